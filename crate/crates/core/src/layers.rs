//! Learnable layers built on the tensor primitives: the parameter store,
//! the LSTM cell and batch normalization with per-timestep statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, sigmoid_scalar, Tensor};

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given variance.
    Normal {
        variance: f64,
    },
    /// Explicit values, repeated to fill the tensor.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(group: &str, name: &str, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: format!("{group}.{name}"), group: group.to_string(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Ordered collection of learnable tensors, each with a gradient slot of the
/// same shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamBundle<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamBundle<F> {
    pub fn new() -> Self {
        ParamBundle { params: Vec::new() }
    }

    pub fn push(&mut self, name: &str, group: &str, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.to_string(), group: group.to_string(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamBundle<G> {
        ParamBundle {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
        }
    }
}

/// Fills every spec in order from `rng`. The bundle is a pure function of the
/// specs and the generator state.
pub fn init_params<F: Scalar, R: Rng>(specs: &[ParamSpec], rng: &mut R) -> ParamBundle<F> {
    let mut bundle = ParamBundle::new();
    for s in specs {
        let n = s.numel();
        let data: Vec<F> = match &s.init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Uniform(a) => {
                let d = Uniform::new_inclusive(-a, *a).expect("uniform range");
                (0..n).map(|_| F::lit(d.sample(rng))).collect()
            }
            Init::Normal { variance } => {
                let d = Normal::new(0.0, variance.sqrt()).expect("normal std");
                (0..n).map(|_| F::lit(d.sample(rng))).collect()
            }
            Init::Values(v) => (0..n).map(|i| F::lit(v[i % v.len()])).collect(),
        };
        bundle.push(&s.name, &s.group, Tensor::from_vec(&s.shape, data).expect("spec shape"));
    }
    bundle
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(batch: usize, units: usize) -> Self {
        LstmState { h: Tensor::zeros(&[batch, units]), c: Tensor::zeros(&[batch, units]) }
    }
}

/// Borrowed LSTM weights: `wx[n, 4d]`, `wh[d, 4d]`, `b[4d]`, gate blocks in
/// the order input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a, F> {
    pub wx: &'a Tensor<F>,
    pub wh: &'a Tensor<F>,
    pub b: &'a Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<F> {
    x: Tensor<F>,
    prev: LstmState<F>,
    /// post-activation gates `[B, 4d]`
    gates: Vec<F>,
    tanh_c: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads<F> {
    pub x: Tensor<F>,
    pub prev: LstmState<F>,
    pub wx: Tensor<F>,
    pub wh: Tensor<F>,
    pub b: Tensor<F>,
}

pub fn lstm_step<F: Scalar>(x: &Tensor<F>, s: &LstmState<F>, w: LstmWeights<'_, F>) -> Result<(LstmState<F>, LstmCache<F>)> {
    let (batch, n) = (x.dim(0), x.dim(1));
    let d = s.h.dim(1);
    if w.wx.shape() != [n, 4 * d] || w.wh.shape() != [d, 4 * d] || w.b.len() != 4 * d {
        return Err(Error::shape(
            "lstm_step",
            format!("input {:?}, state {:?}, weights {:?}/{:?}/{:?}", x.shape(), s.h.shape(), w.wx.shape(), w.wh.shape(), w.b.shape()),
        ));
    }
    if s.h.shape() != [batch, d] || s.c.shape() != [batch, d] {
        return Err(Error::shape("lstm_step", "hidden and cell state shapes differ"));
    }
    let mut pre = Vec::with_capacity(batch * 4 * d);
    for _ in 0..batch {
        pre.extend_from_slice(w.b.data());
    }
    gemm::nn(batch, n, 4 * d, x.data(), w.wx.data(), &mut pre);
    gemm::nn(batch, d, 4 * d, s.h.data(), w.wh.data(), &mut pre);

    let mut h = vec![F::zero(); batch * d];
    let mut c = vec![F::zero(); batch * d];
    let mut tanh_c = vec![F::zero(); batch * d];
    for r in 0..batch {
        let row = &mut pre[r * 4 * d..(r + 1) * 4 * d];
        for j in 0..d {
            let i = sigmoid_scalar(row[j]);
            let f = sigmoid_scalar(row[d + j]);
            let g = row[2 * d + j].tanh();
            let o = sigmoid_scalar(row[3 * d + j]);
            row[j] = i;
            row[d + j] = f;
            row[2 * d + j] = g;
            row[3 * d + j] = o;
            let cn = f * s.c.data()[r * d + j] + i * g;
            let tc = cn.tanh();
            c[r * d + j] = cn;
            tanh_c[r * d + j] = tc;
            h[r * d + j] = o * tc;
        }
    }
    let next = LstmState { h: Tensor::from_vec(&[batch, d], h)?, c: Tensor::from_vec(&[batch, d], c)? };
    next.h.check_finite("lstm_step")?;
    next.c.check_finite("lstm_step")?;
    Ok((next, LstmCache { x: x.clone(), prev: s.clone(), gates: pre, tanh_c }))
}

/// Backward of one LSTM step given gradients on the new hidden and cell
/// state.
pub fn lstm_step_backward<F: Scalar>(cache: &LstmCache<F>, w: LstmWeights<'_, F>, dh: &Tensor<F>, dc: &Tensor<F>) -> Result<LstmGrads<F>> {
    let (batch, n) = (cache.x.dim(0), cache.x.dim(1));
    let d = cache.prev.h.dim(1);
    if dh.shape() != [batch, d] || dc.shape() != [batch, d] {
        return Err(Error::shape("lstm_step_backward", "upstream state gradient shape"));
    }
    let one = F::one();
    let mut dpre = vec![F::zero(); batch * 4 * d];
    let mut dc_prev = vec![F::zero(); batch * d];
    for r in 0..batch {
        let gt = &cache.gates[r * 4 * d..(r + 1) * 4 * d];
        let dp = &mut dpre[r * 4 * d..(r + 1) * 4 * d];
        for j in 0..d {
            let k = r * d + j;
            let (i, f, g, o) = (gt[j], gt[d + j], gt[2 * d + j], gt[3 * d + j]);
            let tc = cache.tanh_c[k];
            let dhk = dh.data()[k];
            let dct = dc.data()[k] + dhk * o * (one - tc * tc);
            dp[j] = dct * g * i * (one - i);
            dp[d + j] = dct * cache.prev.c.data()[k] * f * (one - f);
            dp[2 * d + j] = dct * i * (one - g * g);
            dp[3 * d + j] = dhk * tc * o * (one - o);
            dc_prev[k] = dct * f;
        }
    }
    let mut dx = vec![F::zero(); batch * n];
    gemm::nt(batch, 4 * d, n, &dpre, w.wx.data(), &mut dx);
    let mut dh_prev = vec![F::zero(); batch * d];
    gemm::nt(batch, 4 * d, d, &dpre, w.wh.data(), &mut dh_prev);
    let mut dwx = vec![F::zero(); n * 4 * d];
    gemm::tn(n, batch, 4 * d, cache.x.data(), &dpre, &mut dwx);
    let mut dwh = vec![F::zero(); d * 4 * d];
    gemm::tn(d, batch, 4 * d, cache.prev.h.data(), &dpre, &mut dwh);
    let mut db = vec![F::zero(); 4 * d];
    for row in dpre.chunks(4 * d) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(LstmGrads {
        x: Tensor::from_vec(&[batch, n], dx)?,
        prev: LstmState { h: Tensor::from_vec(&[batch, d], dh_prev)?, c: Tensor::from_vec(&[batch, d], dc_prev)? },
        wx: Tensor::from_vec(&[n, 4 * d], dwx)?,
        wh: Tensor::from_vec(&[d, 4 * d], dwh)?,
        b: Tensor::from_vec(&[4 * d], db)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance kept separately for every timestep of the unroll.
#[derive(Debug, Clone, PartialEq)]
pub struct BnTimeStats<F> {
    pub mean: Vec<Vec<F>>,
    pub var: Vec<Vec<F>>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BnTimeStats<F> {
    pub fn new(steps: usize, channels: usize, momentum: f64, eps: f64) -> Self {
        BnTimeStats {
            mean: vec![vec![F::zero(); channels]; steps],
            var: vec![vec![F::one(); channels]; steps],
            momentum: F::lit(momentum),
            eps: F::lit(eps),
        }
    }

    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch's moments into the running pair for timestep `t`.
    pub fn update(&mut self, t: usize, m: &BatchMoments<F>) {
        let k = self.momentum;
        let unbias = if m.count > 1 { F::from_usize(m.count).unwrap() / F::from_usize(m.count - 1).unwrap() } else { F::one() };
        for c in 0..m.mean.len() {
            self.mean[t][c] = (F::one() - k) * self.mean[t][c] + k * m.mean[c];
            self.var[t][c] = (F::one() - k) * self.var[t][c] + k * m.var[c] * unbias;
        }
    }
}

/// Per-channel batch mean and (biased) variance plus the element count they
/// were taken over.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    mode: BnMode,
    shape: Vec<usize>,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape("batchnorm", format!("expected [B,d] or [B,C,H,W], got {shape:?}"))),
    }
}

/// Normalizes `x` channel-wise. Train mode uses the batch moments (which are
/// returned so the caller can fold them into `stats`); eval mode uses the
/// running pair stored for timestep `t`.
pub fn batchnorm_forward<F: Scalar>(
    x: &Tensor<F>,
    t: usize,
    stats: &BnTimeStats<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mode: BnMode,
) -> Result<(Tensor<F>, BnCache<F>, Option<BatchMoments<F>>)> {
    let (b, ch, sp) = bn_layout(x.shape())?;
    if gamma.len() != ch || beta.len() != ch {
        return Err(Error::shape("batchnorm", format!("{ch} channels, gamma {:?}", gamma.shape())));
    }
    if t >= stats.steps() {
        return Err(Error::Usage(format!("batchnorm timestep {t} beyond {} stored", stats.steps())));
    }
    let xs = x.data();
    let (mean, var, moments) = match mode {
        BnMode::Train => {
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            let cnt = F::from_usize(b * sp).unwrap();
            let mut mean = vec![F::zero(); ch];
            let mut var = vec![F::zero(); ch];
            for c in 0..ch {
                let mut s = F::zero();
                for bi in 0..b {
                    s += xs[(bi * ch + c) * sp..][..sp].iter().copied().sum::<F>();
                }
                let mu = s / cnt;
                let mut v = F::zero();
                for bi in 0..b {
                    for &e in &xs[(bi * ch + c) * sp..][..sp] {
                        v += (e - mu) * (e - mu);
                    }
                }
                mean[c] = mu;
                var[c] = v / cnt;
            }
            let m = BatchMoments { mean: mean.clone(), var: var.clone(), count: b * sp };
            (mean, var, Some(m))
        }
        BnMode::Eval => (stats.mean[t].clone(), stats.var[t].clone(), None),
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + stats.eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xs.len()];
    let mut out = vec![F::zero(); xs.len()];
    for bi in 0..b {
        for c in 0..ch {
            let base = (bi * ch + c) * sp;
            for k in base..base + sp {
                let h = (xs[k] - mean[c]) * inv_std[c];
                xhat[k] = h;
                out[k] = gamma.data()[c] * h + beta.data()[c];
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    out.check_finite("batchnorm")?;
    Ok((out, BnCache { xhat, inv_std, mode, shape: x.shape().to_vec() }, moments))
}

/// Forward step that also folds train-mode moments into `stats`.
pub fn batchnorm_step<F: Scalar>(
    x: &Tensor<F>,
    t: usize,
    stats: &mut BnTimeStats<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mode: BnMode,
) -> Result<Tensor<F>> {
    let (y, _, m) = batchnorm_forward(x, t, stats, gamma, beta, mode)?;
    if let Some(m) = m {
        stats.update(t, &m);
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct BnGrads<F> {
    pub x: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

pub fn batchnorm_backward<F: Scalar>(cache: &BnCache<F>, gamma: &Tensor<F>, dy: &Tensor<F>) -> Result<BnGrads<F>> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::shape("batchnorm_backward", format!("upstream {:?}", dy.shape())));
    }
    let (b, ch, sp) = bn_layout(&cache.shape)?;
    let g = dy.data();
    let mut dgamma = vec![F::zero(); ch];
    let mut dbeta = vec![F::zero(); ch];
    for bi in 0..b {
        for c in 0..ch {
            let base = (bi * ch + c) * sp;
            for k in base..base + sp {
                dbeta[c] += g[k];
                dgamma[c] += g[k] * cache.xhat[k];
            }
        }
    }
    let mut dx = vec![F::zero(); g.len()];
    let cnt = F::from_usize(b * sp).unwrap();
    for bi in 0..b {
        for c in 0..ch {
            let scale = gamma.data()[c] * cache.inv_std[c];
            let base = (bi * ch + c) * sp;
            for k in base..base + sp {
                dx[k] = match cache.mode {
                    BnMode::Train => scale / cnt * (cnt * g[k] - dbeta[c] - cache.xhat[k] * dgamma[c]),
                    BnMode::Eval => scale * g[k],
                };
            }
        }
    }
    Ok(BnGrads { x: Tensor::from_vec(&cache.shape, dx)?, gamma: Tensor::from_vec(&[ch], dgamma)?, beta: Tensor::from_vec(&[ch], dbeta)? })
}
