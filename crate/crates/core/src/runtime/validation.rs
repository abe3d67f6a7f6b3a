//! Held-out validation simulations, solved once before training starts.

use ndarray::{s, Array2};

use crate::config::{ExperimentConfig, SamplerKind};
use crate::design::{sample_design, PARAM_DIM};
use crate::nn::{mse_loss, Mlp, NnError, Normalizer, INPUT_WIDTH};
use crate::seed::{derive_seed, SeedRole};
use crate::solver::{run_simulation, SimulationError, SimulationTag, SolverOptions};
use crate::types::Sample;

/// Rows evaluated per forward pass.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub inputs: Array2<f32>,
    pub targets: Array2<f32>,
}

impl ValidationSet {
    /// Solves `cfg.validation_simulations` Monte Carlo draws from the reserved
    /// validation stream, every time step included.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self, ValidationError> {
        let n = cfg.validation_simulations;
        let norm = Normalizer::new(cfg.param_range, cfg.steps_per_simulation);
        if n == 0 {
            return Ok(Self::from_samples(&[], &norm, cfg.field_len()));
        }
        let design = sample_design(
            SamplerKind::MonteCarlo,
            n,
            PARAM_DIM,
            cfg.param_range,
            derive_seed(cfg.master_seed, SeedRole::Validation, 0),
        )
        .map_err(|e| ValidationError::Design(e.to_string()))?;
        let grid = cfg.grid();
        let opts = SolverOptions {
            tol: cfg.solver_tol,
            max_iter: cfg.solver_max_iter(),
        };
        let mut samples = Vec::with_capacity(n * cfg.steps_per_simulation);
        for i in 0..n {
            let tag = SimulationTag {
                client_id: u32::MAX,
                sim_index: i as u32,
            };
            run_simulation(
                &design.params(i),
                &grid,
                cfg.steps_per_simulation,
                opts,
                tag,
                |s| {
                    samples.push(s);
                    Ok::<(), std::convert::Infallible>(())
                },
            )
            .map_err(|e| match e {
                SimulationError::Solver(e) => ValidationError::Solver(e.to_string()),
                SimulationError::Sink { source, .. } => match source {},
            })?;
        }
        Ok(Self::from_samples(&samples, &norm, cfg.field_len()))
    }

    pub fn from_samples(samples: &[Sample], norm: &Normalizer, field_len: usize) -> Self {
        if samples.is_empty() {
            return ValidationSet {
                inputs: Array2::zeros((0, INPUT_WIDTH)),
                targets: Array2::zeros((0, field_len)),
            };
        }
        let b = norm.batch::<f32>(samples);
        ValidationSet {
            inputs: b.inputs,
            targets: b.targets,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean squared error over every element, in normalized units.
    pub fn mse(&self, model: &Mlp<f32>) -> Result<f64, NnError> {
        if self.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut weighted = 0.0;
        let mut start = 0;
        while start < self.len() {
            let end = (start + CHUNK_ROWS).min(self.len());
            let pred = model.forward(self.inputs.slice(s![start..end, ..]))?;
            let loss = mse_loss(pred.view(), self.targets.slice(s![start..end, ..]))?;
            weighted += loss * (end - start) as f64;
            start = end;
        }
        Ok(weighted / self.len() as f64)
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("validation design: {0}")]
    Design(String),
    #[error("validation solve: {0}")]
    Solver(String),
}
