//! Central finite-difference checks of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Batch;
use crate::error::Result;
use crate::layers::{batchnorm_backward, batchnorm_forward, lstm_step, lstm_step_backward, BnMode, BnTimeStats, LstmState, LstmWeights};
use crate::loss::{LossWeights, SupervisionTarget, FULL_MASK};
use crate::model::{Edram, FaultInjection, ModelConfig};
use crate::stn::{bilinear_sample, bilinear_sample_backward, grid_backward, make_grid, AffineParams, SampleGrid};
use crate::tensor::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    softmax_backward, tanh, tanh_backward, Tensor,
};
use crate::train::{batch_gradients, batch_loss, Objective};

pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;
/// gradients below this magnitude are compared absolutely
const FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }
}

/// Fourth-order central difference of `f` at zero displacement.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * STEP)?, f(STEP)?, f(-STEP)?, f(-2.0 * STEP)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * STEP))
}

fn record(groups: &mut Vec<GroupReport>, group: &str, err: f64, tol: f64) {
    let g = match groups.iter_mut().position(|g| g.group == group) {
        Some(i) => &mut groups[i],
        None => {
            groups.push(GroupReport { group: group.to_string(), checked: 0, max_rel_error: 0.0, pass: true });
            groups.last_mut().unwrap()
        }
    };
    g.checked += 1;
    if err > g.max_rel_error || err.is_nan() {
        g.max_rel_error = err;
    }
    g.pass = g.max_rel_error <= tol;
}

/// 8x8 images, 4x4 glimpses, two steps, batch of two, random labels and
/// boxes, in 64-bit arithmetic.
pub fn gradcheck_problem(seed: u64) -> Result<(Edram<f64>, Batch<f64>, Vec<AffineParams<f64>>)> {
    let cfg = ModelConfig::tiny();
    let mut model = Edram::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // O(1) weights so that every path carries a visible share of the gradient
    for p in model.params.iter_mut() {
        let fan_in = if p.value.ndim() >= 2 { p.value.len() / p.value.shape().last().copied().unwrap_or(1) } else { 1 };
        let fan_in = if p.value.ndim() == 4 { p.value.len() / p.value.dim(0) } else { fan_in };
        let std = 1.0 / (fan_in as f64).sqrt();
        let base = if p.name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in p.value.data_mut() {
            *v = base + std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
    }
    let b = 2;
    let images = Tensor::from_vec(&[b, 1, 8, 8], (0..b * 64).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let targets = (0..b)
        .map(|_| {
            let gt = AffineParams::from_f64([
                rng.random_range(0.3..0.7),
                0.0,
                rng.random_range(-0.4..0.4),
                0.0,
                rng.random_range(0.3..0.7),
                rng.random_range(-0.4..0.4),
            ]);
            SupervisionTarget::new(vec![rng.random_range(0..cfg.class_count)], vec![gt], FULL_MASK)
        })
        .collect::<Result<Vec<_>>>()?;
    // reads away from the identity keep sample points off integer pixels
    let offsets = (0..cfg.steps)
        .map(|_| {
            let mut a = [0.0; 6];
            for v in &mut a {
                *v = 0.15 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            }
            a[0] -= 0.2;
            a[4] -= 0.2;
            AffineParams::from_f64(a)
        })
        .collect();
    Ok((model, Batch { images, targets }, offsets))
}

/// Checks every parameter of the downscaled model and the read transforms
/// (reported as group `stn`).
pub fn check_model(seed: u64, fault: FaultInjection) -> Result<GradcheckReport> {
    let (mut model, batch, offsets) = gradcheck_problem(seed)?;
    let obj = Objective { weights: LossWeights::default(), supervise_first_read: true };
    let (_, grads, _) = batch_gradients(&model, &batch, &obj, BnMode::Train, Some(&offsets), fault)?;
    let loss_at = |m: &Edram<f64>, off: &[AffineParams<f64>]| -> Result<f64> {
        let trace = m.forward(&batch.images, BnMode::Train, Some(off))?;
        Ok(batch_loss(m, &trace, &batch, &obj)?.0)
    };
    let mut groups = Vec::new();
    for pi in 0..model.params.len() {
        let group = model.params.iter().nth(pi).unwrap().group.clone();
        let n = grads.params[pi].len();
        for j in 0..n {
            let orig = model.params.iter().nth(pi).unwrap().value.data()[j];
            let set = |m: &mut Edram<f64>, v: f64| m.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = v;
            let numeric = central_difference(|h| {
                set(&mut model, orig + h);
                loss_at(&model, &offsets)
            })?;
            set(&mut model, orig);
            record(&mut groups, &group, relative_error(grads.params[pi].data()[j], numeric), MODEL_TOLERANCE);
        }
    }
    for t in 0..offsets.len() {
        for k in 0..6 {
            let numeric = central_difference(|h| {
                let mut p = offsets.clone();
                p[t].0[k] += h;
                loss_at(&model, &p)
            })?;
            record(&mut groups, "stn", relative_error(grads.read_offsets[t].0[k], numeric), MODEL_TOLERANCE);
        }
    }
    Ok(GradcheckReport { seed, tolerance: MODEL_TOLERANCE, groups })
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

/// Max relative error of `analytic` against central differences of `f`
/// around `x`.
fn fd_max_error(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        let numeric = central_difference(|h| {
            xp.data_mut()[i] = v + h;
            f(&xp)
        })?;
        xp.data_mut()[i] = v;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn proj(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Finite-difference checks of each primitive under a random linear
/// readout. Returns `(name, max relative error)` pairs.
pub fn check_primitives(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = randn(&mut rng, &[2, 2, 5, 5]);
    let k = randn(&mut rng, &[3, 2, 3, 3]);
    let bias = randn(&mut rng, &[3]);
    let w = randn(&mut rng, &[2, 3, 5, 5]);
    let g = conv2d_backward(&x, &k, 1, 1, &w, true)?;
    let e1 = fd_max_error(&x, g.input.as_ref().unwrap(), |x| Ok(proj(&conv2d(x, &k, &bias, 1, 1)?, &w)))?;
    let e2 = fd_max_error(&k, &g.kernels, |k| Ok(proj(&conv2d(&x, k, &bias, 1, 1)?, &w)))?;
    let e3 = fd_max_error(&bias, &g.bias, |b| Ok(proj(&conv2d(&x, &k, b, 1, 1)?, &w)))?;
    out.push(("conv2d".to_string(), e1.max(e2).max(e3)));

    let x = randn(&mut rng, &[3, 5]);
    let wt = randn(&mut rng, &[5, 4]);
    let b = randn(&mut rng, &[4]);
    let w = randn(&mut rng, &[3, 4]);
    let g = dense_backward(&x, &wt, &w)?;
    let e1 = fd_max_error(&x, &g.input, |x| Ok(proj(&dense(x, &wt, &b)?, &w)))?;
    let e2 = fd_max_error(&wt, &g.weights, |wt| Ok(proj(&dense(&x, wt, &b)?, &w)))?;
    let e3 = fd_max_error(&b, &g.bias, |b| Ok(proj(&dense(&x, &wt, b)?, &w)))?;
    out.push(("dense".to_string(), e1.max(e2).max(e3)));

    let x = randn(&mut rng, &[2, 2, 4, 4]);
    let (y, arg) = maxpool2(&x)?;
    let w = randn(&mut rng, y.shape());
    let dx = maxpool2_backward(x.shape(), &arg, &w)?;
    out.push(("maxpool2".to_string(), fd_max_error(&x, &dx, |x| Ok(proj(&maxpool2(x)?.0, &w)))?));

    // keep relu inputs away from the kink
    let x = Tensor::from_vec(&[12], (0..12).map(|i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 }).collect())?;
    let w = randn(&mut rng, &[12]);
    let dx = relu_backward(&relu(&x), &w)?;
    out.push(("relu".to_string(), fd_max_error(&x, &dx, |x| Ok(proj(&relu(x), &w)))?));

    let x = randn(&mut rng, &[10]);
    let w = randn(&mut rng, &[10]);
    let dx = tanh_backward(&tanh(&x), &w)?;
    out.push(("tanh".to_string(), fd_max_error(&x, &dx, |x| Ok(proj(&tanh(x), &w)))?));
    let dx = sigmoid_backward(&sigmoid(&x), &w)?;
    out.push(("sigmoid".to_string(), fd_max_error(&x, &dx, |x| Ok(proj(&sigmoid(x), &w)))?));

    let x = randn(&mut rng, &[3, 5]);
    let w = randn(&mut rng, &[3, 5]);
    let dx = softmax_backward(&softmax(&x)?, &w)?;
    out.push(("softmax".to_string(), fd_max_error(&x, &dx, |x| Ok(proj(&softmax(x)?, &w)))?));

    let (bsz, n, d) = (3, 4, 3);
    let x = randn(&mut rng, &[bsz, n]);
    let wx = randn(&mut rng, &[n, 4 * d]);
    let wh = randn(&mut rng, &[d, 4 * d]);
    let lb = randn(&mut rng, &[4 * d]);
    let h0 = randn(&mut rng, &[bsz, d]);
    let c0 = randn(&mut rng, &[bsz, d]);
    let (wh_out, wc_out) = (randn(&mut rng, &[bsz, d]), randn(&mut rng, &[bsz, d]));
    let run = |x: &Tensor<f64>, wx: &Tensor<f64>, wh: &Tensor<f64>, b: &Tensor<f64>, h: &Tensor<f64>, c: &Tensor<f64>| {
        let (s, _) = lstm_step(x, &LstmState { h: h.clone(), c: c.clone() }, LstmWeights { wx, wh, b })?;
        Ok(proj(&s.h, &wh_out) + proj(&s.c, &wc_out))
    };
    let (_, cache) = lstm_step(&x, &LstmState { h: h0.clone(), c: c0.clone() }, LstmWeights { wx: &wx, wh: &wh, b: &lb })?;
    let g = lstm_step_backward(&cache, LstmWeights { wx: &wx, wh: &wh, b: &lb }, &wh_out, &wc_out)?;
    let errs = [
        fd_max_error(&x, &g.x, |v| run(v, &wx, &wh, &lb, &h0, &c0))?,
        fd_max_error(&wx, &g.wx, |v| run(&x, v, &wh, &lb, &h0, &c0))?,
        fd_max_error(&wh, &g.wh, |v| run(&x, &wx, v, &lb, &h0, &c0))?,
        fd_max_error(&lb, &g.b, |v| run(&x, &wx, &wh, v, &h0, &c0))?,
        fd_max_error(&h0, &g.prev.h, |v| run(&x, &wx, &wh, &lb, v, &c0))?,
        fd_max_error(&c0, &g.prev.c, |v| run(&x, &wx, &wh, &lb, &h0, v))?,
    ];
    out.push(("lstm".to_string(), errs.iter().cloned().fold(0.0, f64::max)));

    let x = randn(&mut rng, &[3, 2, 2, 2]);
    let gamma = randn(&mut rng, &[2]);
    let beta = randn(&mut rng, &[2]);
    let w = randn(&mut rng, &[3, 2, 2, 2]);
    let stats = BnTimeStats::<f64>::new(1, 2, 0.1, 1e-5);
    let bn = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        Ok(proj(&batchnorm_forward(x, 0, &stats, g, b, BnMode::Train)?.0, &w))
    };
    let (_, cache, _) = batchnorm_forward(&x, 0, &stats, &gamma, &beta, BnMode::Train)?;
    let g = batchnorm_backward(&cache, &gamma, &w)?;
    let errs = [
        fd_max_error(&x, &g.x, |v| bn(v, &gamma, &beta))?,
        fd_max_error(&gamma, &g.gamma, |v| bn(&x, v, &beta))?,
        fd_max_error(&beta, &g.beta, |v| bn(&x, &gamma, v))?,
    ];
    out.push(("batchnorm".to_string(), errs.iter().cloned().fold(0.0, f64::max)));

    let img = Tensor::from_vec(&[2, 6, 7], (0..84).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let pts: Vec<(f64, f64)> = (0..12).map(|_| (rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1))).collect();
    let grid = SampleGrid::from_points(3, 4, &pts)?;
    let w = randn(&mut rng, &[2, 3, 4]);
    let sg = bilinear_sample_backward(&img, &grid, &w, true)?;
    let e_img = fd_max_error(&img, sg.image.as_ref().unwrap(), |im| Ok(proj(&bilinear_sample(im, &grid)?, &w)))?;
    let e_grid = fd_max_error(&grid.coords, &sg.grid, |c| Ok(proj(&bilinear_sample(&img, &SampleGrid { coords: c.clone() })?, &w)))?;
    out.push(("bilinear_sampler".to_string(), e_img.max(e_grid)));

    let a = AffineParams::from_f64([0.7, 0.1, -0.2, -0.05, 0.6, 0.15]);
    let w = randn(&mut rng, &[3, 4, 2]);
    let da = grid_backward(&w, 3, 4)?;
    let at = Tensor::from_vec(&[6], a.0.to_vec())?;
    let dat = Tensor::from_vec(&[6], da.0.to_vec())?;
    let e = fd_max_error(&at, &dat, |v| {
        let d = v.data();
        Ok(proj(&make_grid(&AffineParams([d[0], d[1], d[2], d[3], d[4], d[5]]), 3, 4).coords, &w))
    })?;
    out.push(("grid_generator".to_string(), e));
    Ok(out)
}
