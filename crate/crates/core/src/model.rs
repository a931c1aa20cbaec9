//! The recurrent attention network.
//!
//! Each step reads a glimpse at the pending transform, encodes it with the
//! conv stack ("what") and the transform itself ("where"), multiplies the two
//! feature vectors, and feeds the result through two stacked LSTMs. The lower
//! LSTM drives the classifier, the upper one drives the emission head that
//! proposes the next transform. A context network over a downsampled copy
//! of the whole image initializes the upper LSTM.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, init_params, lstm_step, lstm_step_backward, BatchMoments, BnCache, BnMode, BnTimeStats, Init,
    LstmCache, LstmState, LstmWeights, ParamBundle, ParamId, ParamSpec,
};
use crate::scalar::Scalar;
use crate::stn::{bilinear_sample_backward, grid_backward, make_grid, read_glimpses, AffineParams};
use crate::tensor::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, mul, relu, relu_backward, softmax, softmax_backward,
    Tensor,
};

/// One convolution layer: square kernel, filter count, zero padding and an
/// optional 2x2 max pool afterwards. Written as `3x64p1` or `3x64p0+pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub filters: usize,
    pub pad: usize,
    pub pool: bool,
}

impl ConvSpec {
    pub const fn new(kernel: usize, filters: usize, pad: usize, pool: bool) -> Self {
        ConvSpec { kernel, filters, pad, pool }
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}p{}", self.kernel, self.filters, self.pad)?;
        if self.pool {
            write!(f, "+pool")?;
        }
        Ok(())
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("conv layer `{s}`: expected KxFpP or KxFpP+pool"));
        let s = s.trim();
        let (body, pool) = match s.strip_suffix("+pool") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let (k, rest) = body.split_once('x').ok_or_else(bad)?;
        let (f, p) = rest.split_once('p').ok_or_else(bad)?;
        Ok(ConvSpec {
            kernel: k.parse().map_err(|_| bad())?,
            filters: f.parse().map_err(|_| bad())?,
            pad: p.parse().map_err(|_| bad())?,
            pool,
        })
    }
}

pub fn parse_conv_list(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

pub fn format_conv_list(layers: &[ConvSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

mod conv_list_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[ConvSpec], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format_conv_list(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<ConvSpec>, D::Error> {
        let s = String::deserialize(d)?;
        parse_conv_list(&s).map_err(serde::de::Error::custom)
    }
}

/// Architecture and unroll lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// total unrolled steps
    pub steps: usize,
    pub glimpses_per_object: usize,
    pub objects: usize,
    /// extra class-only steps at the end of a sequence
    pub terminal_steps: usize,
    pub channels: usize,
    pub glimpse_hw: usize,
    pub context_hw: usize,
    #[serde(with = "conv_list_serde")]
    pub context_convs: Vec<ConvSpec>,
    #[serde(with = "conv_list_serde")]
    pub glimpse_convs: Vec<ConvSpec>,
    pub lstm_units: usize,
    pub fc_units: usize,
    pub class_count: usize,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub uniform_init: f64,
    pub fc_init_variance: f64,
    pub forget_bias: f64,
}

impl ModelConfig {
    /// 100x100 cluttered digits: 26x26 glimpses, six of them.
    pub fn mnist() -> Self {
        ModelConfig {
            steps: 6,
            glimpses_per_object: 6,
            objects: 1,
            terminal_steps: 0,
            channels: 1,
            glimpse_hw: 26,
            context_hw: 12,
            context_convs: vec![ConvSpec::new(5, 16, 0, false), ConvSpec::new(3, 16, 0, false), ConvSpec::new(3, 32, 0, false)],
            glimpse_convs: vec![
                ConvSpec::new(3, 64, 1, false),
                ConvSpec::new(3, 64, 0, true),
                ConvSpec::new(3, 128, 1, false),
                ConvSpec::new(3, 128, 1, true),
                ConvSpec::new(3, 160, 1, false),
                ConvSpec::new(3, 192, 0, false),
            ],
            lstm_units: 512,
            fc_units: 1024,
            class_count: 10,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            uniform_init: 0.01,
            fc_init_variance: 0.001,
            forget_bias: 1.0,
        }
    }

    /// House-number sequences: up to 5 digits, 3 glimpses each plus 3
    /// terminal glimpses, 34x34 window, 11 classes (10 digits + terminal).
    pub fn svhn() -> Self {
        ModelConfig { steps: 18, glimpses_per_object: 3, objects: 5, terminal_steps: 3, glimpse_hw: 34, class_count: 11, ..Self::mnist() }
    }

    /// Desk-scale configuration for 60x60 canvases.
    pub fn reduced() -> Self {
        ModelConfig {
            steps: 6,
            glimpses_per_object: 6,
            objects: 1,
            terminal_steps: 0,
            channels: 1,
            glimpse_hw: 12,
            context_hw: 12,
            context_convs: vec![ConvSpec::new(5, 8, 0, false), ConvSpec::new(3, 8, 0, false), ConvSpec::new(3, 4, 0, false)],
            glimpse_convs: vec![ConvSpec::new(3, 16, 1, false), ConvSpec::new(3, 32, 1, true)],
            lstm_units: 64,
            fc_units: 128,
            uniform_init: 0.1,
            class_count: 10,
            ..Self::mnist()
        }
    }

    /// Smallest configuration that still exercises every sub-network; used
    /// for finite-difference checks on 8x8 images.
    pub fn tiny() -> Self {
        ModelConfig {
            steps: 2,
            glimpses_per_object: 2,
            objects: 1,
            terminal_steps: 0,
            channels: 1,
            glimpse_hw: 4,
            context_hw: 6,
            context_convs: vec![ConvSpec::new(3, 2, 0, false), ConvSpec::new(3, 2, 0, false)],
            glimpse_convs: vec![ConvSpec::new(3, 2, 1, false), ConvSpec::new(3, 3, 1, true)],
            lstm_units: 8,
            fc_units: 6,
            class_count: 3,
            ..Self::mnist()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "svhn" => Ok(Self::svhn()),
            "reduced" => Ok(Self::reduced()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model preset `{name}` (mnist, svhn, reduced, tiny)"))),
        }
    }

    /// Spatial extent after each conv layer (and its pool) of a stack.
    pub fn feature_sizes(input: usize, layers: &[ConvSpec]) -> Result<Vec<usize>> {
        let mut hw = input;
        let mut out = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            let span = hw + 2 * l.pad;
            if span < l.kernel {
                return Err(Error::Config(format!("conv layer {} ({l}) does not fit a {hw}x{hw} input", i + 1)));
            }
            hw = span - l.kernel + 1;
            if l.pool {
                if hw % 2 != 0 {
                    return Err(Error::Config(format!("conv layer {} ({l}) pools an odd {hw}x{hw} map", i + 1)));
                }
                hw /= 2;
            }
            out.push(hw);
        }
        Ok(out)
    }

    pub fn context_features(&self) -> Result<usize> {
        let sizes = Self::feature_sizes(self.context_hw, &self.context_convs)?;
        let (hw, ch) = match self.context_convs.last() {
            Some(l) => (*sizes.last().unwrap(), l.filters),
            None => (self.context_hw, self.channels),
        };
        Ok(hw * hw * ch)
    }

    pub fn glimpse_features(&self) -> Result<usize> {
        let sizes = Self::feature_sizes(self.glimpse_hw, &self.glimpse_convs)?;
        Ok(match self.glimpse_convs.last() {
            Some(l) => sizes.last().unwrap() * sizes.last().unwrap() * l.filters,
            None => self.glimpse_hw * self.glimpse_hw * self.channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let supervised = self.glimpses_per_object * self.objects;
        if self.steps != supervised + self.terminal_steps {
            return Err(Error::Config(format!(
                "steps = {} but glimpses_per_object x objects + terminal_steps = {}",
                self.steps,
                supervised + self.terminal_steps
            )));
        }
        if self.steps == 0 || self.glimpses_per_object == 0 || self.objects == 0 {
            return Err(Error::Config("steps, glimpses_per_object and objects must be positive".into()));
        }
        if self.channels == 0 || self.glimpse_hw == 0 || self.context_hw == 0 {
            return Err(Error::Config("channels and spatial extents must be positive".into()));
        }
        if self.lstm_units == 0 || self.fc_units == 0 || self.class_count < 2 {
            return Err(Error::Config("lstm_units and fc_units must be positive, class_count at least 2".into()));
        }
        let ctx = self.context_features()?;
        if ctx != self.lstm_units {
            return Err(Error::Config(format!("context network emits {ctx} features but the upper LSTM has {} units", self.lstm_units)));
        }
        self.glimpse_features()?;
        if self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Shapes and initializers of every learnable tensor, in bundle order.
    ///
    /// Does not validate the configuration, so degenerate configurations
    /// can still be counted.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let u = Init::Uniform(self.uniform_init);
        let g = Init::Normal { variance: self.fc_init_variance };
        let mut specs = Vec::new();
        let mut ch = self.channels;
        for (i, l) in self.context_convs.iter().enumerate() {
            specs.push(ParamSpec::new("context", &format!("conv{i}.w"), &[l.filters, ch, l.kernel, l.kernel], u.clone()));
            specs.push(ParamSpec::new("context", &format!("conv{i}.b"), &[l.filters], Init::Zeros));
            ch = l.filters;
        }
        let mut ch = self.channels;
        for (i, l) in self.glimpse_convs.iter().enumerate() {
            specs.push(ParamSpec::new("glimpse", &format!("conv{i}.w"), &[l.filters, ch, l.kernel, l.kernel], u.clone()));
            // batch norm's shift takes the place of the conv bias
            if !self.batch_norm {
                specs.push(ParamSpec::new("glimpse", &format!("conv{i}.b"), &[l.filters], Init::Zeros));
            } else {
                specs.push(ParamSpec::new("batchnorm", &format!("bn{i}.gamma"), &[l.filters], Init::Ones));
                specs.push(ParamSpec::new("batchnorm", &format!("bn{i}.beta"), &[l.filters], Init::Zeros));
            }
            ch = l.filters;
        }
        let flat = Self::feature_sizes(self.glimpse_hw, &self.glimpse_convs)
            .ok()
            .map(|s| match self.glimpse_convs.last() {
                Some(l) => s.last().unwrap().pow(2) * l.filters,
                None => self.glimpse_hw * self.glimpse_hw * self.channels,
            })
            .unwrap_or(0);
        let (d, fc, k) = (self.lstm_units, self.fc_units, self.class_count);
        specs.push(ParamSpec::new("what", "w", &[flat, fc], g.clone()));
        specs.push(ParamSpec::new("what", "b", &[fc], Init::Zeros));
        specs.push(ParamSpec::new("where", "w", &[6, fc], g.clone()));
        specs.push(ParamSpec::new("where", "b", &[fc], Init::Zeros));
        specs.extend(lstm_specs("lstm1", fc, d, &u, self.forget_bias));
        specs.push(ParamSpec::new("classify", "fc.w", &[d, fc], g.clone()));
        specs.push(ParamSpec::new("classify", "fc.b", &[fc], Init::Zeros));
        specs.push(ParamSpec::new("classify", "out.w", &[fc, k], g.clone()));
        specs.push(ParamSpec::new("classify", "out.b", &[k], Init::Zeros));
        specs.extend(lstm_specs("lstm2", d, d, &u, self.forget_bias));
        specs.push(ParamSpec::new("emission", "w", &[d, 6], Init::Zeros));
        specs.push(ParamSpec::new("emission", "b", &[6], Init::Values(vec![1., 0., 0., 0., 1., 0.])));
        specs
    }
}

fn lstm_specs(group: &str, input: usize, units: usize, u: &Init, forget_bias: f64) -> Vec<ParamSpec> {
    let mut bias = vec![0.0; 4 * units];
    for v in &mut bias[units..2 * units] {
        *v = forget_bias;
    }
    vec![
        ParamSpec::new(group, "wx", &[input, 4 * units], u.clone()),
        ParamSpec::new(group, "wh", &[units, 4 * units], u.clone()),
        ParamSpec::new(group, "b", &[4 * units], Init::Values(bias)),
    ]
}

/// Learnable-scalar totals per parameter group, in bundle order.
pub fn count_params(config: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for s in config.param_specs() {
        match out.iter_mut().find(|(g, _)| *g == s.group) {
            Some((_, n)) => *n += s.numel(),
            None => out.push((s.group.clone(), s.numel())),
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    spec: ConvSpec,
    w: ParamId,
    b: Option<ParamId>,
    bn: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LstmLayer {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    context: Vec<ConvLayer>,
    glimpse: Vec<ConvLayer>,
    what: DenseLayer,
    where_: DenseLayer,
    lstm1: LstmLayer,
    cls_fc: DenseLayer,
    cls_out: DenseLayer,
    lstm2: LstmLayer,
    emission: DenseLayer,
}

impl Layout {
    fn resolve<F: Scalar>(config: &ModelConfig, p: &ParamBundle<F>) -> Result<Self> {
        let id = |n: String| p.id(&n).ok_or_else(|| Error::Config(format!("missing parameter `{n}`")));
        let dense =
            |g: &str, pre: &str| -> Result<DenseLayer> { Ok(DenseLayer { w: id(format!("{g}.{pre}w"))?, b: id(format!("{g}.{pre}b"))? }) };
        let lstm = |g: &str| -> Result<LstmLayer> {
            Ok(LstmLayer { wx: id(format!("{g}.wx"))?, wh: id(format!("{g}.wh"))?, b: id(format!("{g}.b"))? })
        };
        let context = config
            .context_convs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                Ok(ConvLayer { spec, w: id(format!("context.conv{i}.w"))?, b: Some(id(format!("context.conv{i}.b"))?), bn: None })
            })
            .collect::<Result<_>>()?;
        let glimpse = config
            .glimpse_convs
            .iter()
            .enumerate()
            .map(|(i, &spec)| {
                let (b, bn) = if config.batch_norm {
                    (None, Some((id(format!("batchnorm.bn{i}.gamma"))?, id(format!("batchnorm.bn{i}.beta"))?)))
                } else {
                    (Some(id(format!("glimpse.conv{i}.b"))?), None)
                };
                Ok(ConvLayer { spec, w: id(format!("glimpse.conv{i}.w"))?, b, bn })
            })
            .collect::<Result<_>>()?;
        Ok(Layout {
            context,
            glimpse,
            what: dense("what", "")?,
            where_: dense("where", "")?,
            lstm1: lstm("lstm1")?,
            cls_fc: dense("classify", "fc.")?,
            cls_out: dense("classify", "out.")?,
            lstm2: lstm("lstm2")?,
            emission: dense("emission", "")?,
        })
    }
}

/// Recurrent carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub lstm1: LstmState<F>,
    pub lstm2: LstmState<F>,
    /// transform for the pending read, one per batch element
    pub theta: Vec<AffineParams<F>>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<F> {
    /// class distribution `[B, classes]`
    pub y: Tensor<F>,
    pub theta_next: Vec<AffineParams<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    input: Tensor<F>,
    bn: Option<BnCache<F>>,
    act: Tensor<F>,
    pool: Option<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Clone)]
struct StepCache<F> {
    theta: Vec<AffineParams<F>>,
    patch: Tensor<F>,
    convs: Vec<ConvCache<F>>,
    flat: Tensor<F>,
    what: Tensor<F>,
    where_in: Tensor<F>,
    where_: Tensor<F>,
    lstm1: LstmCache<F>,
    r1: Tensor<F>,
    cls_hidden: Tensor<F>,
    lstm2: LstmCache<F>,
    r2: Tensor<F>,
}

#[derive(Debug, Clone)]
struct ContextCache<F> {
    inputs: Vec<Tensor<F>>,
    out_shape: Vec<usize>,
}

/// Everything the forward pass produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    pub outputs: Vec<StepOutput<F>>,
    /// transform used for each read, `[step][batch]`
    pub reads: Vec<Vec<AffineParams<F>>>,
    pub patch_shapes: Vec<Vec<usize>>,
    /// batch moments per (step, glimpse conv layer), train mode only
    pub bn_moments: Vec<Vec<BatchMoments<F>>>,
    images: Tensor<F>,
    context: ContextCache<F>,
    steps: Vec<StepCache<F>>,
}

/// Switches for deliberately wrong backward passes, so the gradient checker
/// can be shown to catch them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultInjection {
    pub flip_sampler_sign: bool,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    /// one tensor per bundle entry, bundle order
    pub params: Vec<Tensor<F>>,
    /// total gradient on each step's read transform, summed over the batch
    pub read_offsets: Vec<AffineParams<F>>,
}

/// Area-weighted resampling of `[B,C,H,W]` to `[B,C,oh,ow]`.
pub fn area_downsample<F: Scalar>(images: &Tensor<F>, oh: usize, ow: usize) -> Result<Tensor<F>> {
    if images.ndim() != 4 {
        return Err(Error::shape("area_downsample", format!("expected [B,C,H,W], got {:?}", images.shape())));
    }
    let (b, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let ry = area_weights::<F>(h, oh);
    let rx = area_weights::<F>(w, ow);
    let mut out = vec![F::zero(); b * c * oh * ow];
    let src = images.data();
    let mut tmp = vec![F::zero(); oh * w];
    for plane in 0..b * c {
        let img = &src[plane * h * w..][..h * w];
        tmp.iter_mut().for_each(|v| *v = F::zero());
        for i in 0..oh {
            for y in 0..h {
                let wy = ry[i * h + y];
                if wy == F::zero() {
                    continue;
                }
                for x in 0..w {
                    tmp[i * w + x] += wy * img[y * w + x];
                }
            }
        }
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = F::zero();
                for x in 0..w {
                    acc += rx[j * w + x] * tmp[i * w + x];
                }
                dst[i * ow + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

/// Row `i` holds the fraction of each source cell covered by output cell `i`,
/// normalized to sum to one.
fn area_weights<F: Scalar>(n: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    let scale = n as f64 / m as f64;
    for i in 0..m {
        let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
        for x in (lo.floor() as usize)..(hi.ceil() as usize).min(n) {
            let overlap = (hi.min(x as f64 + 1.0) - lo.max(x as f64)).max(0.0);
            out[i * n + x] = F::lit(overlap / scale);
        }
    }
    out
}

fn thetas_to_tensor<F: Scalar>(thetas: &[AffineParams<F>]) -> Tensor<F> {
    Tensor::from_vec(&[thetas.len(), 6], thetas.iter().flat_map(|a| a.0).collect()).expect("theta rows")
}

fn tensor_to_thetas<F: Scalar>(t: &Tensor<F>) -> Vec<AffineParams<F>> {
    t.data().chunks(6).map(|c| AffineParams([c[0], c[1], c[2], c[3], c[4], c[5]])).collect()
}

/// The attention network: configuration, parameters and per-timestep
/// batch-norm statistics.
#[derive(Debug, Clone)]
pub struct Edram<F> {
    pub config: ModelConfig,
    pub params: ParamBundle<F>,
    pub bn_stats: Vec<BnTimeStats<F>>,
    layout: Layout,
}

impl<F: Scalar> Edram<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config.param_specs(), &mut rng);
        Self::from_parts(config, params, None)
    }

    /// Rebuilds a model around existing parameters (and optionally stored
    /// batch-norm statistics).
    pub fn from_parts(config: ModelConfig, params: ParamBundle<F>, bn_stats: Option<Vec<BnTimeStats<F>>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() || specs.iter().zip(params.iter()).any(|(s, p)| s.name != p.name || s.shape != p.value.shape()) {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        let layout = Layout::resolve(&config, &params)?;
        let bn_stats = match bn_stats {
            Some(s) => s,
            None if config.batch_norm => {
                config.glimpse_convs.iter().map(|l| BnTimeStats::new(config.steps, l.filters, config.bn_momentum, config.bn_eps)).collect()
            }
            None => Vec::new(),
        };
        Ok(Edram { config, params, bn_stats, layout })
    }

    pub fn cast<G: Scalar>(&self) -> Edram<G> {
        Edram {
            config: self.config.clone(),
            params: self.params.cast(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| BnTimeStats {
                    mean: s.mean.iter().map(|r| r.iter().map(|v| G::lit(v.to_f64_lossy())).collect()).collect(),
                    var: s.var.iter().map(|r| r.iter().map(|v| G::lit(v.to_f64_lossy())).collect()).collect(),
                    momentum: G::lit(s.momentum.to_f64_lossy()),
                    eps: G::lit(s.eps.to_f64_lossy()),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, id: ParamId) -> &Tensor<F> {
        self.params.value(id)
    }

    fn conv_bias(&self, l: &ConvLayer) -> std::borrow::Cow<'_, Tensor<F>> {
        match l.b {
            Some(b) => std::borrow::Cow::Borrowed(self.p(b)),
            None => std::borrow::Cow::Owned(Tensor::zeros(&[l.spec.filters])),
        }
    }

    fn lstm_weights(&self, l: LstmLayer) -> LstmWeights<'_, F> {
        LstmWeights { wx: self.p(l.wx), wh: self.p(l.wh), b: self.p(l.b) }
    }

    fn check_images(&self, images: &Tensor<F>) -> Result<()> {
        if images.ndim() != 4 || images.dim(1) != self.config.channels {
            return Err(Error::shape("edram", format!("images must be [B,{},H,W], got {:?}", self.config.channels, images.shape())));
        }
        images.check_finite("edram input")
    }

    fn context_forward(&self, images: &Tensor<F>) -> Result<(Tensor<F>, ContextCache<F>)> {
        let hw = self.config.context_hw;
        let mut x = area_downsample(images, hw, hw)?;
        let mut inputs = Vec::with_capacity(self.layout.context.len());
        for l in &self.layout.context {
            let y = conv2d(&x, self.p(l.w), self.conv_bias(l).as_ref(), 1, l.spec.pad)?;
            inputs.push(x);
            x = y;
        }
        let b = images.dim(0);
        let out_shape = x.shape().to_vec();
        let flat = x.reshape(&[b, self.config.lstm_units])?;
        Ok((flat, ContextCache { inputs, out_shape }))
    }

    /// Initial recurrent state: the upper LSTM's hidden state comes from the
    /// context network, everything else starts at zero, and the first read
    /// covers the whole image.
    pub fn init_state(&self, images: &Tensor<F>) -> Result<ModelState<F>> {
        self.check_images(images)?;
        let b = images.dim(0);
        let d = self.config.lstm_units;
        let (r0, _) = self.context_forward(images)?;
        Ok(ModelState {
            lstm1: LstmState::zeros(b, d),
            lstm2: LstmState { h: r0, c: Tensor::zeros(&[b, d]) },
            theta: vec![AffineParams::identity(); b],
            t: 0,
        })
    }

    fn glimpse_convs_forward(
        &self,
        patch: &Tensor<F>,
        t: usize,
        mode: BnMode,
    ) -> Result<(Tensor<F>, Vec<ConvCache<F>>, Vec<BatchMoments<F>>)> {
        let mut x = patch.clone();
        let mut caches = Vec::with_capacity(self.layout.glimpse.len());
        let mut moments = Vec::new();
        for (i, l) in self.layout.glimpse.iter().enumerate() {
            let z = conv2d(&x, self.p(l.w), self.conv_bias(l).as_ref(), 1, l.spec.pad)?;
            let (z, bn) = match l.bn {
                Some((gamma, beta)) => {
                    let (y, cache, m) = batchnorm_forward(&z, t, &self.bn_stats[i], self.p(gamma), self.p(beta), mode)?;
                    if let Some(m) = m {
                        moments.push(m);
                    }
                    (y, Some(cache))
                }
                None => (z, None),
            };
            let act = relu(&z);
            let (next, pool) = if l.spec.pool {
                let (pooled, arg) = maxpool2(&act)?;
                (pooled, Some((arg, act.shape().to_vec())))
            } else {
                (act.clone(), None)
            };
            caches.push(ConvCache { input: x, bn, act, pool });
            x = next;
        }
        Ok((x, caches, moments))
    }

    /// Glimpse feature vector for patches read at `theta`: the product of
    /// the conv-stack branch and the transform branch.
    pub fn glimpse_features(&self, patch: &Tensor<F>, theta: &[AffineParams<F>], t: usize, mode: BnMode) -> Result<Tensor<F>> {
        let (feat, _, _) = self.glimpse_features_cached(patch, theta, t, mode)?;
        Ok(feat)
    }

    #[allow(clippy::type_complexity)]
    fn glimpse_features_cached(
        &self,
        patch: &Tensor<F>,
        theta: &[AffineParams<F>],
        t: usize,
        mode: BnMode,
    ) -> Result<(Tensor<F>, (Vec<ConvCache<F>>, Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>), Vec<BatchMoments<F>>)> {
        let b = patch.dim(0);
        if theta.len() != b {
            return Err(Error::shape("glimpse_features", format!("{} transforms for batch {b}", theta.len())));
        }
        let (maps, convs, moments) = self.glimpse_convs_forward(patch, t, mode)?;
        let flat_len = maps.len() / b.max(1);
        let flat = maps.reshape(&[b, flat_len])?;
        let what = relu(&dense(&flat, self.p(self.layout.what.w), self.p(self.layout.what.b))?);
        let where_in = thetas_to_tensor(theta);
        let where_ = relu(&dense(&where_in, self.p(self.layout.where_.w), self.p(self.layout.where_.b))?);
        let g = mul(&what, &where_)?;
        Ok((g, (convs, flat, what, where_in, where_), moments))
    }

    fn step_cached(
        &self,
        state: &ModelState<F>,
        images: &Tensor<F>,
        mode: BnMode,
    ) -> Result<(ModelState<F>, StepOutput<F>, StepCache<F>, Vec<BatchMoments<F>>)> {
        if state.t >= self.config.steps {
            return Err(Error::Usage(format!("step {} past the configured {} steps", state.t, self.config.steps)));
        }
        if state.theta.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite { op: "affine transform".into() });
        }
        let g_hw = self.config.glimpse_hw;
        let patch = read_glimpses(images, &state.theta, g_hw, g_hw)?;
        let (g, (convs, flat, what, where_in, where_), moments) = self.glimpse_features_cached(&patch, &state.theta, state.t, mode)?;

        let (lstm1, c1) = lstm_step(&g, &state.lstm1, self.lstm_weights(self.layout.lstm1))?;
        let r1 = lstm1.h.clone();
        let cls_hidden = relu(&dense(&r1, self.p(self.layout.cls_fc.w), self.p(self.layout.cls_fc.b))?);
        let logits = dense(&cls_hidden, self.p(self.layout.cls_out.w), self.p(self.layout.cls_out.b))?;
        let y = softmax(&logits)?;

        let (lstm2, c2) = lstm_step(&r1, &state.lstm2, self.lstm_weights(self.layout.lstm2))?;
        let r2 = lstm2.h.clone();
        let a_next = dense(&r2, self.p(self.layout.emission.w), self.p(self.layout.emission.b))?;
        let theta_next = tensor_to_thetas(&a_next);

        let cache =
            StepCache { theta: state.theta.clone(), patch, convs, flat, what, where_in, where_, lstm1: c1, r1, cls_hidden, lstm2: c2, r2 };
        let next = ModelState { lstm1, lstm2, theta: theta_next.clone(), t: state.t + 1 };
        Ok((next, StepOutput { y, theta_next }, cache, moments))
    }

    /// One recurrent step in the given batch-norm mode.
    pub fn step(&self, state: &ModelState<F>, images: &Tensor<F>, mode: BnMode) -> Result<(ModelState<F>, StepOutput<F>)> {
        let (s, o, _, _) = self.step_cached(state, images, mode)?;
        Ok((s, o))
    }

    /// Runs all configured steps. Returns the per-step outputs and the
    /// transform each read used.
    pub fn unroll(&self, images: &Tensor<F>, mode: BnMode) -> Result<(Vec<StepOutput<F>>, Vec<Vec<AffineParams<F>>>)> {
        let trace = self.forward(images, mode, None)?;
        Ok((trace.outputs, trace.reads))
    }

    /// Full forward pass keeping every activation needed by [`Self::backward`].
    ///
    /// `read_offsets`, when given, is added to each step's read transform
    /// (shared across the batch); the gradient checker perturbs it.
    pub fn forward(&self, images: &Tensor<F>, mode: BnMode, read_offsets: Option<&[AffineParams<F>]>) -> Result<Trace<F>> {
        self.check_images(images)?;
        let b = images.dim(0);
        let d = self.config.lstm_units;
        let (r0, context) = self.context_forward(images)?;
        let mut state = ModelState {
            lstm1: LstmState::zeros(b, d),
            lstm2: LstmState { h: r0, c: Tensor::zeros(&[b, d]) },
            theta: vec![AffineParams::identity(); b],
            t: 0,
        };
        let steps = self.config.steps;
        let mut trace = Trace {
            outputs: Vec::with_capacity(steps),
            reads: Vec::with_capacity(steps),
            patch_shapes: Vec::with_capacity(steps),
            bn_moments: Vec::with_capacity(steps),
            images: images.clone(),
            context,
            steps: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            if let Some(off) = read_offsets {
                for a in &mut state.theta {
                    *a = a.add(&off[t]);
                }
            }
            let (next, out, cache, moments) = self.step_cached(&state, images, mode)?;
            trace.reads.push(cache.theta.clone());
            trace.patch_shapes.push(cache.patch.shape().to_vec());
            trace.outputs.push(out);
            trace.bn_moments.push(moments);
            trace.steps.push(cache);
            state = next;
        }
        Ok(trace)
    }

    /// Folds the batch moments of a train-mode trace into the running
    /// per-timestep statistics.
    pub fn update_bn_stats(&mut self, trace: &Trace<F>) {
        for (t, per_layer) in trace.bn_moments.iter().enumerate() {
            for (stats, m) in self.bn_stats.iter_mut().zip(per_layer) {
                stats.update(t, m);
            }
        }
    }

    /// Reverse pass through the unrolled network.
    ///
    /// `dy[t]` is the loss gradient on step `t`'s class distribution and
    /// `dtheta[t][b]` the direct loss gradient on the transform batch
    /// element `b` read with at step `t`.
    pub fn backward(
        &self,
        trace: &Trace<F>,
        dy: &[Tensor<F>],
        dtheta: &[Vec<AffineParams<F>>],
        fault: FaultInjection,
    ) -> Result<Gradients<F>> {
        let steps = trace.steps.len();
        if dy.len() != steps || dtheta.len() != steps {
            return Err(Error::shape("edram backward", format!("{steps} steps, {} dy, {} dtheta", dy.len(), dtheta.len())));
        }
        let b = trace.images.dim(0);
        let d = self.config.lstm_units;
        let mut grads: Vec<Tensor<F>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut acc = |id: ParamId, g: &Tensor<F>| grads[id.0].add_assign(g);

        let mut dh1 = Tensor::zeros(&[b, d]);
        let mut dc1 = Tensor::zeros(&[b, d]);
        let mut dh2 = Tensor::zeros(&[b, d]);
        let mut dc2 = Tensor::zeros(&[b, d]);
        let mut dtheta_next: Vec<AffineParams<F>> = vec![AffineParams::zeros(); b];
        let mut read_offsets = vec![AffineParams::zeros(); steps];
        let lay = &self.layout;

        for t in (0..steps).rev() {
            let c = &trace.steps[t];
            // emission head
            let da = thetas_to_tensor(&dtheta_next);
            let ge = dense_backward(&c.r2, self.p(lay.emission.w), &da)?;
            acc(lay.emission.w, &ge.weights)?;
            acc(lay.emission.b, &ge.bias)?;
            dh2.add_assign(&ge.input)?;
            let g2 = lstm_step_backward(&c.lstm2, self.lstm_weights(lay.lstm2), &dh2, &dc2)?;
            acc(lay.lstm2.wx, &g2.wx)?;
            acc(lay.lstm2.wh, &g2.wh)?;
            acc(lay.lstm2.b, &g2.b)?;
            dh2 = g2.prev.h;
            dc2 = g2.prev.c;

            // classifier
            let dlogits = softmax_backward(&trace.outputs[t].y, &dy[t])?;
            let go = dense_backward(&c.cls_hidden, self.p(lay.cls_out.w), &dlogits)?;
            acc(lay.cls_out.w, &go.weights)?;
            acc(lay.cls_out.b, &go.bias)?;
            let dh = relu_backward(&c.cls_hidden, &go.input)?;
            let gf = dense_backward(&c.r1, self.p(lay.cls_fc.w), &dh)?;
            acc(lay.cls_fc.w, &gf.weights)?;
            acc(lay.cls_fc.b, &gf.bias)?;

            dh1.add_assign(&gf.input)?;
            dh1.add_assign(&g2.x)?;
            let g1 = lstm_step_backward(&c.lstm1, self.lstm_weights(lay.lstm1), &dh1, &dc1)?;
            acc(lay.lstm1.wx, &g1.wx)?;
            acc(lay.lstm1.wh, &g1.wh)?;
            acc(lay.lstm1.b, &g1.b)?;
            dh1 = g1.prev.h;
            dc1 = g1.prev.c;

            // what x where
            let dwhat = mul(&g1.x, &c.where_)?;
            let dwhere = mul(&g1.x, &c.what)?;
            let dwz = relu_backward(&c.where_, &dwhere)?;
            let gw = dense_backward(&c.where_in, self.p(lay.where_.w), &dwz)?;
            acc(lay.where_.w, &gw.weights)?;
            acc(lay.where_.b, &gw.bias)?;
            let dwhat_z = relu_backward(&c.what, &dwhat)?;
            let gwhat = dense_backward(&c.flat, self.p(lay.what.w), &dwhat_z)?;
            acc(lay.what.w, &gwhat.weights)?;
            acc(lay.what.b, &gwhat.bias)?;

            let last_shape: Vec<usize> = match c.convs.last() {
                Some(cc) => match &cc.pool {
                    Some((_, pre)) => vec![pre[0], pre[1], pre[2] / 2, pre[3] / 2],
                    None => cc.act.shape().to_vec(),
                },
                None => c.patch.shape().to_vec(),
            };
            let mut dx = gwhat.input.reshape(&last_shape)?;
            for (l, cc) in lay.glimpse.iter().zip(&c.convs).rev() {
                if let Some((arg, pre)) = &cc.pool {
                    dx = maxpool2_backward(pre, arg, &dx)?;
                }
                let mut dz = relu_backward(&cc.act, &dx)?;
                if let (Some((gamma, beta)), Some(bc)) = (l.bn, &cc.bn) {
                    let gb = batchnorm_backward(bc, self.p(gamma), &dz)?;
                    acc(gamma, &gb.gamma)?;
                    acc(beta, &gb.beta)?;
                    dz = gb.x;
                }
                let gc = conv2d_backward(&cc.input, self.p(l.w), 1, l.spec.pad, &dz, true)?;
                acc(l.w, &gc.kernels)?;
                if let Some(b) = l.b {
                    acc(b, &gc.bias)?;
                }
                dx = gc.input.expect("input gradient requested");
            }

            // sampler and grid back to the read transform
            let g_hw = self.config.glimpse_hw;
            let mut dtheta_t = Vec::with_capacity(b);
            for bi in 0..b {
                let img = trace.images.outer(bi)?;
                let grid = make_grid(&c.theta[bi], g_hw, g_hw);
                let sg = bilinear_sample_backward(&img, &grid, &dx.outer(bi)?, false)?;
                let mut ds = grid_backward(&sg.grid, g_hw, g_hw)?;
                if fault.flip_sampler_sign {
                    ds.0.iter_mut().for_each(|v| *v = -*v);
                }
                let mut total = ds;
                for k in 0..6 {
                    total.0[k] += gw.input.data()[bi * 6 + k] + dtheta[t][bi].0[k];
                }
                for k in 0..6 {
                    read_offsets[t].0[k] += total.0[k];
                }
                dtheta_t.push(total);
            }
            dtheta_next = dtheta_t;
        }

        // the upper LSTM's initial hidden state is the context network output
        let mut dx = dh2.reshape(&trace.context.out_shape)?;
        for (l, input) in lay.context.iter().zip(&trace.context.inputs).rev() {
            let gc = conv2d_backward(input, self.p(l.w), 1, l.spec.pad, &dx, true)?;
            acc(l.w, &gc.kernels)?;
            if let Some(b) = l.b {
                acc(b, &gc.bias)?;
            }
            dx = gc.input.expect("input gradient requested");
        }
        Ok(Gradients { params: grads, read_offsets })
    }
}
