use super::{Mlp, NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            step: 0,
            cfg,
        }
    }

    pub fn for_model(model: &Mlp<F>) -> Self {
        Self::new(model.n_params(), AdamConfig::default())
    }

    /// One bias-corrected Adam update of `model` with step size `lr`.
    pub fn step(&mut self, model: &mut Mlp<F>, grads: &[F], lr: f64) -> Result<(), NnError> {
        let params = model.params_mut();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::Shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        if let Some((index, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(NnError::NonFinite {
                what: "gradient",
                index,
                value: g.as_f64(),
            });
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one_b1 = F::from_f64(1.0 - self.cfg.beta1);
        let one_b2 = F::from_f64(1.0 - self.cfg.beta2);
        let bc1 = F::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.cfg.eps);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Applies one Adam step to `model` and `adam`.
pub fn adam_step<F: Scalar>(
    model: &mut Mlp<F>,
    adam: &mut AdamState<F>,
    grads: &[F],
    lr: f64,
) -> Result<(), NnError> {
    adam.step(model, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut model = Mlp::<f32>::init(&[2, 3, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let before = model.clone();
        let mut adam = AdamState::for_model(&model);
        adam.m.iter_mut().for_each(|m| *m = 1.0);
        adam.v.iter_mut().for_each(|v| *v = 1.0);
        let zeros = vec![0.0f32; model.n_params()];
        adam.step(&mut model, &zeros, 1e-3).unwrap();
        // fresh (zero) moments stay zero, so the update is exactly zero
        let mut fresh = AdamState::for_model(&before);
        let mut model2 = before.clone();
        fresh.step(&mut model2, &zeros, 1e-3).unwrap();
        assert_eq!(model2, before);
        assert!(adam.m.iter().all(|&m| (m - 0.9).abs() < 1e-7));
        assert!(adam.v.iter().all(|&v| (v - 0.999).abs() < 1e-7));
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = Mlp::<f64>::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::for_model(&model);
        adam.step(&mut model, &[1.0, 0.0], 1e-3).unwrap();
        // m_hat = v_hat = 1 -> update = lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!(
            (model.params()[0] - expected).abs() < 1e-15,
            "{}",
            model.params()[0]
        );
        assert!((model.params()[0] + 9.99999e-4).abs() < 1e-9);
        assert_eq!(model.params()[1], 0.0);
    }

    #[test]
    fn first_step_in_f32() {
        let mut model = Mlp::<f32>::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::for_model(&model);
        adam_step(&mut model, &mut adam, &[1.0, 0.0], 1e-3).unwrap();
        assert!((model.params()[0] as f64 + 9.99999e-4).abs() < 1e-8);
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let base = Mlp::<f32>::init(&[3, 4, 2], &mut ChaCha8Rng::seed_from_u64(2));
        let grads: Vec<f32> = (0..base.n_params())
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let run = || {
            let mut m = base.clone();
            let mut a = AdamState::for_model(&m);
            for _ in 0..3 {
                a.step(&mut m, &grads, 1e-3).unwrap();
            }
            (m, a)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut model = Mlp::<f32>::zeros(&[1, 1]);
        let mut adam = AdamState::for_model(&model);
        let err = adam.step(&mut model, &[f32::NAN, 0.0], 1e-3).unwrap_err();
        assert!(matches!(
            err,
            NnError::NonFinite {
                what: "gradient",
                index: 0,
                ..
            }
        ));
        assert_eq!(adam.step, 0);
    }
}
