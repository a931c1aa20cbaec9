//! Two-layer convolutional reference classifier over the whole canvas:
//! conv5 → ReLU → pool → conv5 → ReLU → pool → FC, one softmax per object.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{epoch_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::{init_params, Init, ParamBundle, ParamSpec};
use crate::loss::argmax;
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, relu, relu_backward, softmax, Tensor};
use crate::train::make_batch;

pub const KERNEL: usize = 5;
pub const FILTERS: [usize; 2] = [8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
    pub classes: usize,
}

impl BaselineShape {
    pub fn from_config(cfg: &RunConfig) -> Self {
        BaselineShape {
            channels: cfg.model.channels,
            height: cfg.canvas_h,
            width: cfg.canvas_w,
            objects: cfg.model.objects,
            classes: cfg.model.class_count,
        }
    }

    fn flat(&self) -> usize {
        FILTERS[1] * (self.height / 4) * (self.width / 4)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (k, [f1, f2]) = (KERNEL, FILTERS);
        let he = |fan_in: usize| Init::Normal { variance: 2.0 / fan_in as f64 };
        vec![
            ParamSpec::new("conv0", "w", &[f1, self.channels, k, k], he(self.channels * k * k)),
            ParamSpec::new("conv0", "b", &[f1], Init::Zeros),
            ParamSpec::new("conv1", "w", &[f2, f1, k, k], he(f1 * k * k)),
            ParamSpec::new("conv1", "b", &[f2], Init::Zeros),
            ParamSpec::new("out", "w", &[self.flat(), self.objects * self.classes], Init::Normal { variance: 1.0 / self.flat() as f64 }),
            ParamSpec::new("out", "b", &[self.objects * self.classes], Init::Zeros),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ConvBaseline<F> {
    pub shape: BaselineShape,
    pub params: ParamBundle<F>,
}

struct Cache<F> {
    x: Tensor<F>,
    a0: Tensor<F>,
    arg0: Vec<usize>,
    p0: Tensor<F>,
    a1: Tensor<F>,
    arg1: Vec<usize>,
    flat: Tensor<F>,
    /// `[B*S, classes]`
    probs: Tensor<F>,
}

impl<F: Scalar> ConvBaseline<F> {
    pub fn new(shape: BaselineShape, seed: u64) -> Result<Self> {
        if !shape.height.is_multiple_of(4) || !shape.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "the conv baseline pools twice and needs sides divisible by 4, got {}x{}",
                shape.height, shape.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ConvBaseline { shape, params: init_params(&shape.param_specs(), &mut rng) })
    }

    fn w(&self, i: usize) -> &Tensor<F> {
        &self.params.iter().nth(i).expect("baseline parameter").value
    }

    fn forward(&self, images: &Tensor<F>) -> Result<Cache<F>> {
        let pad = KERNEL / 2;
        let a0 = relu(&conv2d(images, self.w(0), self.w(1), 1, pad)?);
        let (p0, arg0) = maxpool2(&a0)?;
        let a1 = relu(&conv2d(&p0, self.w(2), self.w(3), 1, pad)?);
        let (p1, arg1) = maxpool2(&a1)?;
        let b = images.dim(0);
        let flat = p1.reshape(&[b, self.shape.flat()])?;
        let logits = dense(&flat, self.w(4), self.w(5))?;
        let probs = softmax(&logits.reshape(&[b * self.shape.objects, self.shape.classes])?)?;
        Ok(Cache { x: images.clone(), a0, arg0, p0, a1, arg1, flat, probs })
    }

    /// Per-object class distributions, `[B][S][classes]`.
    pub fn predict(&self, images: &Tensor<F>) -> Result<Vec<Vec<Vec<F>>>> {
        let c = self.forward(images)?;
        let (s, k) = (self.shape.objects, self.shape.classes);
        Ok(c.probs.data().chunks(s * k).map(|row| row.chunks(k).map(<[F]>::to_vec).collect()).collect())
    }

    /// Mean over the batch of the summed per-object cross-entropy, with its
    /// gradient written into the parameter slots.
    pub fn loss_and_grads(&mut self, batch: &Batch<F>) -> Result<F> {
        let c = self.forward(&batch.images)?;
        let (b, s, k) = (batch.images.dim(0), self.shape.objects, self.shape.classes);
        let inv_b = F::one() / F::from_usize(b).unwrap();
        let mut loss = F::zero();
        let mut dlogits = c.probs.data().to_vec();
        for (i, t) in batch.targets.iter().enumerate() {
            for (o, &label) in t.labels.iter().enumerate().take(s) {
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
                let row = (i * s + o) * k;
                loss -= c.probs.data()[row + label].max(F::lit(1e-12)).ln();
                dlogits[row + label] -= F::one();
            }
        }
        dlogits.iter_mut().for_each(|v| *v *= inv_b);
        let dlogits = Tensor::from_vec(&[b, s * k], dlogits)?;
        let dd = dense_backward(&c.flat, self.w(4), &dlogits)?;
        let dp1 = dd.input.reshape(&[b, FILTERS[1], self.shape.height / 4, self.shape.width / 4])?;
        let da1 = maxpool2_backward(c.a1.shape(), &c.arg1, &dp1)?;
        let dz1 = relu_backward(&c.a1, &da1)?;
        let pad = KERNEL / 2;
        let g1 = conv2d_backward(&c.p0, self.w(2), 1, pad, &dz1, true)?;
        let da0 = maxpool2_backward(c.a0.shape(), &c.arg0, g1.input.as_ref().expect("input gradient"))?;
        let dz0 = relu_backward(&c.a0, &da0)?;
        let g0 = conv2d_backward(&c.x, self.w(0), 1, pad, &dz0, false)?;
        let grads = [g0.kernels, g0.bias, g1.kernels, g1.bias, dd.weights, dd.bias];
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
        Ok(loss * inv_b)
    }

    /// Fraction of samples with at least one misread object.
    pub fn sequence_error(&self, data: &Dataset, cfg: &RunConfig, batch: usize) -> Result<f64> {
        if data.is_empty() {
            return Ok(f64::NAN);
        }
        let mut wrong = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let b = make_batch::<F>(data, chunk, cfg)?;
            for (dists, t) in self.predict(&b.images)?.iter().zip(&b.targets) {
                if dists.iter().zip(&t.labels).any(|(d, &l)| argmax(d) != l) {
                    wrong += 1;
                }
            }
        }
        Ok(wrong as f64 / data.len() as f64)
    }
}

/// Trains the baseline with the run's optimizer settings for `epochs` passes.
/// Returns the final mean training loss of each epoch.
pub fn train_baseline<F: Scalar>(model: &mut ConvBaseline<F>, cfg: &RunConfig, train: &Dataset, epochs: usize) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs as u64 {
        let mut total = 0.0;
        for idx in epoch_batches(train.len(), cfg.batch, cfg.seed, epoch) {
            let batch = make_batch::<F>(train, &idx, cfg)?;
            let loss = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "baseline loss".into() });
            }
            clip_global_norm(&mut model.params, F::lit(cfg.clip))?;
            adam_step(&mut model.params, &mut adam)?;
            total += loss.to_f64_lossy() * idx.len() as f64;
        }
        history.push(total / train.len().max(1) as f64);
    }
    Ok(history)
}
