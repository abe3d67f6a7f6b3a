//! Experiment configuration: a single TOML file, fail-fast on unknown keys.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::Grid;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected key=value)")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    MonteCarlo,
    LatinHypercube,
    Halton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferPolicy {
    Fifo,
    Firo,
    Reservoir,
}

impl fmt::Display for BufferPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BufferPolicy::Fifo => "fifo",
            BufferPolicy::Firo => "firo",
            BufferPolicy::Reservoir => "reservoir",
        })
    }
}

/// Full description of one experiment.
///
/// Defaults are a desk-scale version of the heat-equation setup: a 32x32 grid,
/// 100 steps of 0.01 s with unit diffusivity, temperatures drawn in
/// [100, 500] K, a [256, 256] MLP trained with Adam from 1e-3 halved every
/// 10,000 samples down to 2.5e-4, batches of 10, and a buffer of 6,000 samples
/// with a read threshold of 1,000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub alpha: f64,
    pub steps_per_simulation: usize,
    pub n_clients_total: usize,
    pub n_clients_concurrent: usize,
    pub n_ranks: usize,
    pub sampler: SamplerKind,
    pub param_range: [f64; 2],
    pub buffer_policy: BufferPolicy,
    pub buffer_capacity: usize,
    pub buffer_threshold: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_halving_interval_samples: u64,
    pub validation_every_batches: u64,
    pub master_seed: u64,
    pub hidden_layers: Vec<usize>,

    /// Held-out simulations used for validation, drawn from a reserved seed stream.
    pub validation_simulations: usize,
    pub heartbeat_interval_ms: u64,
    pub client_timeout_ms: u64,
    pub max_restarts: u32,
    pub checkpoint_every_batches: u64,
    /// 0 lets producer and trainer run freely. A positive value admits exactly
    /// this many new samples into each rank's buffer per trained batch, which
    /// makes buffer contents independent of thread timing.
    pub paced_samples_per_batch: usize,
    /// Artificial per-step solver cost in the clients.
    pub client_step_delay_ms: u64,
    pub solver_tol: f64,
    pub allreduce_timeout_ms: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            nx: 32,
            ny: 32,
            dt: 0.01,
            dx: 1.0 / 31.0,
            dy: 1.0 / 31.0,
            alpha: 1.0,
            steps_per_simulation: 100,
            n_clients_total: 20,
            n_clients_concurrent: 4,
            n_ranks: 1,
            sampler: SamplerKind::MonteCarlo,
            param_range: [100.0, 500.0],
            buffer_policy: BufferPolicy::Reservoir,
            buffer_capacity: 6000,
            buffer_threshold: 1000,
            batch_size: 10,
            base_lr: 1e-3,
            min_lr: 2.5e-4,
            lr_halving_interval_samples: 10_000,
            validation_every_batches: 100,
            master_seed: 0,
            hidden_layers: vec![256, 256],
            validation_simulations: 10,
            heartbeat_interval_ms: 1000,
            client_timeout_ms: 10_000,
            max_restarts: 3,
            checkpoint_every_batches: 500,
            paced_samples_per_batch: 0,
            client_step_delay_ms: 0,
            solver_tol: 1e-9,
            allreduce_timeout_ms: 120_000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads `path` and applies `key=value` overrides before validation.
    /// Values are parsed as TOML literals, falling back to plain strings.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for entry in overrides {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(entry.clone()))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Override(entry.clone()));
            }
            table.insert(key.to_string(), parse_override_value(raw.trim()));
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.nx < 3 || self.ny < 3 {
            return fail(format!(
                "grid must be at least 3x3, got {}x{}",
                self.nx, self.ny
            ));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("dx", self.dx),
            ("dy", self.dy),
            ("alpha", self.alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        let [lo, hi] = self.param_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return fail(format!(
                "param_range must satisfy lo < hi, got [{lo}, {hi}]"
            ));
        }
        if self.n_ranks == 0 {
            return fail("n_ranks must be >= 1".into());
        }
        if self.n_clients_concurrent == 0 {
            return fail("n_clients_concurrent must be >= 1".into());
        }
        if self.buffer_threshold >= self.buffer_capacity {
            return fail(format!(
                "buffer_threshold ({}) must be below buffer_capacity ({})",
                self.buffer_threshold, self.buffer_capacity
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_threshold.max(1) {
            return fail(format!(
                "batch_size ({}) must be in 1..=buffer_threshold ({})",
                self.batch_size, self.buffer_threshold
            ));
        }
        if !(self.base_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return fail(format!(
                "learning rates must satisfy 0 < min_lr <= base_lr, got base {} min {}",
                self.base_lr, self.min_lr
            ));
        }
        if self.lr_halving_interval_samples == 0 {
            return fail("lr_halving_interval_samples must be >= 1".into());
        }
        if self.validation_every_batches == 0 {
            return fail("validation_every_batches must be >= 1".into());
        }
        if self.hidden_layers.contains(&0) {
            return fail("hidden layer widths must be >= 1".into());
        }
        if !(self.solver_tol > 0.0) {
            return fail("solver_tol must be positive".into());
        }
        if self.steps_per_simulation > u32::MAX as usize || self.n_clients_total > u32::MAX as usize
        {
            return fail("steps and simulation counts must fit in 32 bits".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            nx: self.nx,
            ny: self.ny,
            dx: self.dx,
            dy: self.dy,
            alpha: self.alpha,
            dt: self.dt,
        }
    }

    pub fn field_len(&self) -> usize {
        self.nx * self.ny
    }

    /// Layer widths of the surrogate, input to output.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_layers.len() + 2);
        widths.push(crate::nn::INPUT_WIDTH);
        widths.extend_from_slice(&self.hidden_layers);
        widths.push(self.field_len());
        widths
    }

    pub fn solver_max_iter(&self) -> usize {
        10 * self.nx * self.ny
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
