use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Scalar};

/// Multilayer perceptron with all parameters in one flat vector.
///
/// Layer `l` maps `widths[l]` inputs to `widths[l+1]` outputs through a
/// row-major `in x out` weight matrix followed by the bias. Every layer but the
/// last is followed by a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F = f32> {
    widths: Vec<usize>,
    params: Vec<F>,
    offsets: Vec<(usize, usize)>,
}

/// Flat gradient vector, laid out like [`Mlp::params`].
pub type Gradients<F> = Vec<F>;

/// Rows of normalized inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F = f32> {
    pub inputs: Array2<F>,
    pub targets: Array2<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout(widths: &[usize]) -> (Vec<(usize, usize)>, usize) {
    let mut offsets = Vec::with_capacity(widths.len().saturating_sub(1));
    let mut at = 0;
    for w in widths.windows(2) {
        let w_off = at;
        at += w[0] * w[1];
        offsets.push((w_off, at));
        at += w[1];
    }
    (offsets, at)
}

impl<F: Scalar> Mlp<F> {
    /// Fan-in scaled uniform init: weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(
            widths.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        let (offsets, total) = layout(widths);
        let mut params = vec![F::zero(); total];
        for (l, &(w_off, b_off)) in offsets.iter().enumerate() {
            let bound = (6.0 / widths[l] as f64).sqrt();
            for p in &mut params[w_off..b_off] {
                *p = F::from_f64(rng.gen_range(-bound..bound));
            }
        }
        Mlp {
            widths: widths.to_vec(),
            params,
            offsets,
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let (offsets, total) = layout(widths);
        Mlp {
            widths: widths.to_vec(),
            params: vec![F::zero(); total],
            offsets,
        }
    }

    pub fn from_params(widths: &[usize], params: Vec<F>) -> Result<Self, NnError> {
        let (offsets, total) = layout(widths);
        if params.len() != total || widths.len() < 2 {
            return Err(NnError::Shape(format!(
                "widths {widths:?} need {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
            offsets,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.offsets.len()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, F> {
        let (w_off, b_off) = self.offsets[layer];
        ArrayView2::from_shape(
            (self.widths[layer], self.widths[layer + 1]),
            &self.params[w_off..b_off],
        )
        .expect("layout matches widths")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, F> {
        let (_, b_off) = self.offsets[layer];
        ArrayView1::from(&self.params[b_off..b_off + self.widths[layer + 1]])
    }

    /// Order-sensitive hash of the exact parameter bits.
    pub fn param_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.widths.hash(&mut h);
        for p in &self.params {
            p.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn forward(&self, inputs: ArrayView2<'_, F>) -> Result<Array2<F>, NnError> {
        if inputs.ncols() != self.widths[0] {
            return Err(NnError::Shape(format!(
                "input has {} columns, model expects {}",
                inputs.ncols(),
                self.widths[0]
            )));
        }
        let last = self.n_layers() - 1;
        let mut h = inputs.to_owned();
        for l in 0..=last {
            let mut z = h.dot(&self.weight(l));
            z += &self.bias(l);
            if l < last {
                z.mapv_inplace(|v| v.max(F::zero()));
            }
            h = z;
        }
        Ok(h)
    }

    /// Loss and exact gradient of `mse_loss(forward(inputs), targets)`.
    pub fn backward(&self, batch: &Batch<F>) -> Result<(Gradients<F>, f64), NnError> {
        let b = batch.inputs.nrows();
        if b == 0 {
            return Err(NnError::EmptyBatch);
        }
        let out_width = *self.widths.last().expect("non-empty widths");
        if batch.inputs.ncols() != self.widths[0]
            || batch.targets.nrows() != b
            || batch.targets.ncols() != out_width
        {
            return Err(NnError::Shape(format!(
                "batch {:?} -> {:?} does not fit widths {:?}",
                batch.inputs.dim(),
                batch.targets.dim(),
                self.widths
            )));
        }
        let last = self.n_layers() - 1;

        // activations[l] is the input of layer l; pre[l] its affine output
        let mut activations: Vec<Array2<F>> = Vec::with_capacity(last + 2);
        let mut pre: Vec<Array2<F>> = Vec::with_capacity(last + 1);
        activations.push(batch.inputs.clone());
        for l in 0..=last {
            let mut z = activations[l].dot(&self.weight(l));
            z += &self.bias(l);
            let a = if l < last {
                z.mapv(|v| v.max(F::zero()))
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(a);
        }
        let pred = &activations[last + 1];
        let loss = mse_loss(pred.view(), batch.targets.view())?;
        if !loss.is_finite() {
            return Err(NnError::NonFinite {
                what: "loss",
                index: 0,
                value: loss,
            });
        }

        let scale = F::from_f64(2.0 / (b * out_width) as f64);
        let mut delta = (pred - &batch.targets).mapv(|d| d * scale);
        let mut grads = vec![F::zero(); self.params.len()];
        for l in (0..=last).rev() {
            if l < last {
                ndarray::Zip::from(&mut delta)
                    .and(&pre[l])
                    .for_each(|d, &z| {
                        if z <= F::zero() {
                            *d = F::zero();
                        }
                    });
            }
            let (w_off, b_off) = self.offsets[l];
            let gw = activations[l].t().dot(&delta);
            // `dot` may return a non-standard layout when a dimension is 1
            for (g, &v) in grads[w_off..b_off].iter_mut().zip(gw.iter()) {
                *g = v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, &v) in grads[b_off..b_off + self.widths[l + 1]]
                .iter_mut()
                .zip(gb.iter())
            {
                *g = v;
            }
            if l > 0 {
                delta = delta.dot(&self.weight(l).t());
            }
        }
        Ok((grads, loss))
    }
}

/// Mean of squared differences over all elements, accumulated in f64.
pub fn mse_loss<F: Scalar>(
    pred: ArrayView2<'_, F>,
    target: ArrayView2<'_, F>,
) -> Result<f64, NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut sum = 0.0f64;
    ndarray::Zip::from(&pred).and(&target).for_each(|&p, &t| {
        let d = p.as_f64() - t.as_f64();
        sum += d * d;
    });
    Ok(sum / pred.len() as f64)
}
