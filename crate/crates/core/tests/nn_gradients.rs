use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surrogate_core::nn::{mse_loss, scheduled_lr, Batch, Mlp};
use surrogate_core::ExperimentConfig;

fn toy(widths: &[usize], seed: u64, rows: usize) -> (Mlp<f64>, Batch<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::<f64>::init(widths, &mut rng);
    // non-zero biases so that no unit sits exactly on the ReLU kink
    for p in model.params_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let inputs = Array2::from_shape_fn((rows, widths[0]), |_| rng.gen_range(-1.0..1.0));
    let targets = Array2::from_shape_fn((rows, *widths.last().unwrap()), |_| {
        rng.gen_range(-1.0..1.0)
    });
    (model, Batch { inputs, targets })
}

fn loss(model: &Mlp<f64>, batch: &Batch<f64>) -> f64 {
    mse_loss(
        model.forward(batch.inputs.view()).unwrap().view(),
        batch.targets.view(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_central_differences(
        hidden in prop::collection::vec(1usize..7, 0..3),
        seed in any::<u64>(),
        rows in 1usize..5,
    ) {
        let mut widths = vec![3];
        widths.extend(hidden);
        widths.push(2);
        let (model, batch) = toy(&widths, seed, rows);
        let (grads, l) = model.backward(&batch).unwrap();
        prop_assert!((l - loss(&model, &batch)).abs() <= 1e-12 * l.max(1.0));
        let h = 1e-6;
        for i in 0..model.n_params() {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus, &batch) - loss(&minus, &batch)) / (2.0 * h);
            let scale = grads[i].abs().max(fd.abs());
            prop_assert!((grads[i] - fd).abs() <= 1e-4 * scale + 1e-9, "param {i}: {} vs {fd}", grads[i]);
        }
    }

    #[test]
    fn lr_never_increases_and_stays_in_range(a in 0u64..200_000, b in 0u64..200_000) {
        let cfg = ExperimentConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(scheduled_lr(hi, &cfg) <= scheduled_lr(lo, &cfg));
        prop_assert!(scheduled_lr(hi, &cfg) >= cfg.min_lr && scheduled_lr(lo, &cfg) <= cfg.base_lr);
    }
}
