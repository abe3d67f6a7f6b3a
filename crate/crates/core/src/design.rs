//! Experimental design: draws the solver input parameters for every simulation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SamplerKind};
use crate::types::SimParams;

/// Number of input parameters per simulation.
pub const PARAM_DIM: usize = 5;

/// `n` rows of `d` parameter values, all in `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub range: [f64; 2],
    pub dim: usize,
    values: Vec<f64>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Parameters of simulation `i`. Requires a 5-dimensional design.
    pub fn params(&self, i: usize) -> SimParams {
        SimParams::from_row(self.row(i))
    }
}

/// Draws an `n x d` design in `[lo, hi)`.
///
/// Monte Carlo and Latin hypercube draws are fully determined by `seed`.
/// Halton rows are the unscrambled sequence starting at index 1 with the
/// j-th prime as the base of column j, so `seed` only labels the matrix.
pub fn sample_design(
    sampler: SamplerKind,
    n: usize,
    d: usize,
    range: [f64; 2],
    seed: u64,
) -> Result<DesignMatrix, ConfigError> {
    let [lo, hi] = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ConfigError::Invalid(format!(
            "design range [{lo}, {hi}] is empty"
        )));
    }
    if n == 0 || d == 0 {
        return Err(ConfigError::Invalid(
            "design needs n >= 1 and d >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = vec![0.0f64; n * d];
    match sampler {
        SamplerKind::MonteCarlo => {
            for v in unit.iter_mut() {
                *v = rng.gen::<f64>();
            }
        }
        SamplerKind::LatinHypercube => {
            let mut strata: Vec<usize> = (0..n).collect();
            for j in 0..d {
                strata.shuffle(&mut rng);
                for (i, &s) in strata.iter().enumerate() {
                    unit[i * d + j] = (s as f64 + rng.gen::<f64>()) / n as f64;
                }
            }
        }
        SamplerKind::Halton => {
            let bases = first_primes(d);
            for i in 0..n {
                for (j, &b) in bases.iter().enumerate() {
                    unit[i * d + j] = halton_value(i as u64 + 1, b)?;
                }
            }
        }
    }
    let values = unit.into_iter().map(|u| scale_unit(u, lo, hi)).collect();
    Ok(DesignMatrix {
        sampler,
        seed,
        range,
        dim: d,
        values,
    })
}

/// Affine map of `u` in [0,1) onto [lo, hi), guarding against rounding up to `hi`.
fn scale_unit(u: f64, lo: f64, hi: f64) -> f64 {
    let v = lo + u * (hi - lo);
    if v >= hi {
        hi - (hi - lo) * f64::EPSILON
    } else {
        v
    }
}

/// Radical inverse of `index` in `base`.
pub fn halton_value(index: u64, base: u64) -> Result<f64, ConfigError> {
    if base < 2 {
        return Err(ConfigError::Invalid(format!(
            "Halton base must be >= 2, got {base}"
        )));
    }
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut i = index;
    let mut value = 0.0;
    while i > 0 {
        value += (i % base) as f64 * scale;
        i /= base;
        scale *= inv;
    }
    Ok(value)
}

pub fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes
            .iter()
            .take_while(|&&p| p * p <= candidate)
            .all(|&p| !candidate.is_multiple_of(p))
        {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Digit-expansion radical inverse as an exact fraction num / base^k.
    fn radical_inverse_oracle(index: u64, base: u64) -> f64 {
        let (mut num, mut den, mut i) = (0u128, 1u128, index);
        while i > 0 {
            // least-significant digit of `index` becomes the leading fraction digit
            num = num * base as u128 + (i % base) as u128;
            den *= base as u128;
            i /= base;
        }
        num as f64 / den as f64
    }

    #[test]
    fn halton_base2_definitional_values() {
        assert_eq!(halton_value(1, 2).unwrap(), 0.5);
        assert_eq!(halton_value(3, 2).unwrap(), 0.75);
        let m = sample_design(SamplerKind::Halton, 3, 5, [0.0, 1.0], 0).unwrap();
        assert_eq!(m.column(0), vec![0.5, 0.25, 0.75]);
    }

    #[test]
    fn halton_base3_matches_oracle() {
        // 5 = 12 in base 3, mirrored: 2/3 + 1/9 = 7/9
        let v = halton_value(5, 3).unwrap();
        assert!((v - 7.0 / 9.0).abs() < 1e-15, "{v}");
        for base in [2, 3, 5, 7, 11] {
            for idx in 1..500 {
                let a = halton_value(idx, base).unwrap();
                let b = radical_inverse_oracle(idx, base);
                assert!((a - b).abs() < 1e-12, "index {idx} base {base}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn halton_rejects_small_base() {
        assert!(halton_value(1, 1).is_err());
        assert!(halton_value(1, 0).is_err());
    }

    #[test]
    fn halton_dyadic_intervals_are_evenly_filled() {
        let mut counts = [0usize; 16];
        for i in 1..=256u64 {
            let v = halton_value(i, 2).unwrap();
            counts[(v * 16.0) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 16), "{counts:?}");
    }

    #[test]
    fn monte_carlo_is_deterministic_per_seed() {
        let a = sample_design(SamplerKind::MonteCarlo, 3, 5, [0.0, 1.0], 11).unwrap();
        let b = sample_design(SamplerKind::MonteCarlo, 3, 5, [0.0, 1.0], 11).unwrap();
        let c = sample_design(SamplerKind::MonteCarlo, 3, 5, [0.0, 1.0], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn latin_hypercube_hits_every_stratum_once() {
        let m = sample_design(SamplerKind::LatinHypercube, 4, 5, [0.0, 4.0], 3).unwrap();
        for j in 0..5 {
            let mut strata: Vec<usize> = m.column(j).iter().map(|v| v.floor() as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn invalid_range_is_rejected() {
        assert!(sample_design(SamplerKind::MonteCarlo, 3, 5, [1.0, 1.0], 0).is_err());
        assert!(sample_design(SamplerKind::Halton, 3, 5, [2.0, 1.0], 0).is_err());
    }

    #[test]
    fn primes() {
        assert_eq!(first_primes(6), vec![2, 3, 5, 7, 11, 13]);
    }

    proptest::proptest! {
        #[test]
        fn every_entry_within_range(
            n in 1usize..60,
            seed in proptest::prelude::any::<u64>(),
            lo in -1000.0f64..1000.0,
            width in 1e-3f64..1000.0,
            kind in 0usize..3,
        ) {
            let sampler = [SamplerKind::MonteCarlo, SamplerKind::LatinHypercube, SamplerKind::Halton][kind];
            let hi = lo + width;
            let m = sample_design(sampler, n, 5, [lo, hi], seed).unwrap();
            proptest::prop_assert_eq!(m.n_rows(), n);
            for r in m.rows() {
                for &v in r {
                    proptest::prop_assert!(v >= lo && v < hi);
                }
            }
            if sampler == SamplerKind::LatinHypercube {
                let w = (hi - lo) / n as f64;
                for j in 0..5 {
                    let mut strata: Vec<usize> = m
                        .column(j)
                        .iter()
                        .map(|v| (((v - lo) / w).floor() as usize).min(n - 1))
                        .collect();
                    strata.sort_unstable();
                    proptest::prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
                }
            }
        }
    }
}
