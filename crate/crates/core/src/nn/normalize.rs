use ndarray::Array2;

use super::{Batch, Scalar, INPUT_WIDTH};
use crate::types::{Sample, SimParams};

/// Affine maps between kelvin and the unit interval, and between time index
/// and `t / steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Normalizer {
    pub fn new(range: [f64; 2], steps: usize) -> Self {
        Normalizer {
            lo: range[0],
            hi: range[1],
            steps,
        }
    }

    pub fn temperature(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    pub fn time(&self, t: u32) -> f64 {
        t as f64 / self.steps.max(1) as f64
    }

    /// Converts an MSE in normalized units to kelvin squared.
    pub fn mse_to_kelvin2(&self, mse: f64) -> f64 {
        mse * (self.hi - self.lo) * (self.hi - self.lo)
    }

    pub fn input_row(&self, params: &SimParams, t: u32) -> [f64; INPUT_WIDTH] {
        let [a, b, c, d, e] = params.to_row().map(|v| self.temperature(v));
        [a, b, c, d, e, self.time(t)]
    }

    /// Input row and target row of one sample.
    pub fn normalize(&self, sample: &Sample) -> ([f64; INPUT_WIDTH], Vec<f32>) {
        let target = sample
            .field
            .iter()
            .map(|&v| self.temperature(v as f64) as f32)
            .collect();
        (self.input_row(&sample.params, sample.t), target)
    }

    pub fn batch<F: Scalar>(&self, samples: &[Sample]) -> Batch<F> {
        let width = samples.first().map_or(0, |s| s.field.len());
        let mut inputs = Array2::zeros((samples.len(), INPUT_WIDTH));
        let mut targets = Array2::zeros((samples.len(), width));
        for (r, s) in samples.iter().enumerate() {
            for (c, v) in self.input_row(&s.params, s.t).into_iter().enumerate() {
                inputs[[r, c]] = F::from_f64(v);
            }
            for (c, &v) in s.field.iter().enumerate() {
                targets[[r, c]] = F::from_f64(self.temperature(v as f64));
            }
        }
        Batch { inputs, targets }
    }
}
