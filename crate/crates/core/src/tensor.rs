//! Dense row-major tensors and the forward/backward primitives the
//! attention model is assembled from.
//!
//! Every backward here is written by hand against its forward. Reductions
//! always run in a fixed order, so results do not depend on the number of
//! worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("from_vec", format!("shape {shape:?} holds {n} elements, data has {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| F::lit(v)).collect())
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::lit(v.to_f64_lossy())).collect() }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, k: F) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Returns the `index`-th slice along axis 0.
    pub fn outer(&self, index: usize) -> Result<Tensor<F>> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(Error::shape("outer", format!("index {index} on {:?}", self.shape)));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor { shape: self.shape[1..].to_vec(), data: self.data[index * inner..(index + 1) * inner].to_vec() })
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn expect_rank<F: Scalar>(op: &'static str, t: &Tensor<F>, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got {:?}", t.shape)));
    }
    Ok(())
}

const PAR_WORK: usize = 1 << 15;

/// Dense matrix kernels on row-major slices. All accumulate into `c`.
pub mod gemm {
    use super::*;

    fn row_nn<F: Scalar>(crow: &mut [F], arow: &[F], b: &[F], n: usize) {
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn nn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if n == 0 {
            return;
        }
        if m * n * k >= PAR_WORK && m > 1 {
            c.par_chunks_mut(n).zip(a.par_chunks(k.max(1))).for_each(|(crow, arow)| row_nn(crow, arow, b, n));
        } else {
            for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k.max(1))) {
                row_nn(crow, arow, b, n);
            }
        }
    }

    /// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]`.
    pub fn tn<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
        let at = transpose(k, m, a);
        nn(m, k, n, &at, b, c);
    }

    /// `c[m×n] += a · bᵀ` with `b` stored as `[n×k]`.
    pub fn nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
        let bt = transpose(n, k, b);
        nn(m, k, n, a, &bt, c);
    }

    /// Transposes a `[rows×cols]` matrix.
    pub fn transpose<F: Scalar>(rows: usize, cols: usize, a: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a[r * cols + c];
            }
        }
        out
    }
}

/// Convolution geometry derived from input and kernel shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernels.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {input:?} and kernels {kernels:?} must both be rank 4")));
        }
        let (batch, in_ch, in_h, in_w) = (input[0], input[1], input[2], input[3]);
        let (out_ch, kc, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kc != in_ch {
            return Err(Error::shape("conv2d", format!("axis 1: input has {in_ch} channels, kernels expect {kc}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(Error::shape("conv2d", format!("axes 2,3: padded input {span_h}x{span_w} smaller than kernel {kh}x{kw}")));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::shape("conv2d", format!("axes 2,3: stride {stride} does not tile padded input {span_h}x{span_w}")));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds the input into `[C·kh·kw, B·H'·W']`.
fn im2col<F: Scalar>(g: &ConvGeom, input: &[F]) -> Vec<F> {
    let ohw = g.out_h * g.out_w;
    let cols = g.cols();
    let mut col = vec![F::zero(); g.patch_len() * cols];
    col.par_chunks_mut(cols).enumerate().for_each(|(row, dst)| {
        let ci = row / (g.kh * g.kw);
        let ki = (row / g.kw) % g.kh;
        let kj = row % g.kw;
        for b in 0..g.batch {
            let src = &input[(b * g.in_ch + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let dst = &mut dst[b * ohw..(b + 1) * ohw];
            for oy in 0..g.out_h {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                let srow = &src[iy as usize * g.in_w..][..g.in_w];
                for ox in 0..g.out_w {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix >= 0 && ix < g.in_w as isize {
                        dst[oy * g.out_w + ox] = srow[ix as usize];
                    }
                }
            }
        }
    });
    col
}

/// Folds `[C·kh·kw, B·H'·W']` column gradients back onto the input.
fn col2im<F: Scalar>(g: &ConvGeom, col: &[F]) -> Vec<F> {
    let ohw = g.out_h * g.out_w;
    let cols = g.cols();
    let plane = g.in_h * g.in_w;
    let mut out = vec![F::zero(); g.batch * g.in_ch * plane];
    // one (batch, channel) plane per task; kernel offsets are visited in a fixed order
    out.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
        let b = bc / g.in_ch;
        let ci = bc % g.in_ch;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols + b * ohw..][..ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Cross-correlation of `[B,C,H,W]` input with `[K,C,kh,kw]` kernels.
pub fn conv2d<F: Scalar>(input: &Tensor<F>, kernels: &Tensor<F>, bias: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, pad)?;
    if bias.len() != g.out_ch {
        return Err(Error::shape("conv2d", format!("bias has {} entries for {} kernels", bias.len(), g.out_ch)));
    }
    let col = im2col(&g, input.data());
    let cols = g.cols();
    let mut mat = vec![F::zero(); g.out_ch * cols];
    for (k, row) in mat.chunks_mut(cols.max(1)).enumerate() {
        row.iter_mut().for_each(|v| *v = bias.data()[k]);
    }
    gemm::nn(g.out_ch, g.patch_len(), cols, kernels.data(), &col, &mut mat);

    let ohw = g.out_h * g.out_w;
    let mut out = vec![F::zero(); g.batch * g.out_ch * ohw];
    for b in 0..g.batch {
        for k in 0..g.out_ch {
            out[(b * g.out_ch + k) * ohw..][..ohw].copy_from_slice(&mat[k * cols + b * ohw..][..ohw]);
        }
    }
    let out = Tensor::from_vec(&[g.batch, g.out_ch, g.out_h, g.out_w], out)?;
    out.check_finite("conv2d")?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub kernels: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
///
/// The input gradient is skipped when `want_input` is false.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernels: &Tensor<F>,
    stride: usize,
    pad: usize,
    dout: &Tensor<F>,
    want_input: bool,
) -> Result<ConvGrads<F>> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, pad)?;
    if dout.shape() != [g.batch, g.out_ch, g.out_h, g.out_w] {
        return Err(Error::shape("conv2d_backward", format!("upstream {:?} does not match output geometry", dout.shape())));
    }
    let ohw = g.out_h * g.out_w;
    let cols = g.cols();
    let mut dmat = vec![F::zero(); g.out_ch * cols];
    for b in 0..g.batch {
        for k in 0..g.out_ch {
            dmat[k * cols + b * ohw..][..ohw].copy_from_slice(&dout.data()[(b * g.out_ch + k) * ohw..][..ohw]);
        }
    }
    let dbias: Vec<F> = dmat.chunks(cols.max(1)).take(g.out_ch).map(|r| r.iter().copied().sum()).collect();

    let col = im2col(&g, input.data());
    let mut dk = vec![F::zero(); g.out_ch * g.patch_len()];
    gemm::nt(g.out_ch, cols, g.patch_len(), &dmat, &col, &mut dk);

    let dinput = if want_input {
        let mut dcol = vec![F::zero(); g.patch_len() * cols];
        gemm::tn(g.patch_len(), g.out_ch, cols, kernels.data(), &dmat, &mut dcol);
        Some(Tensor::from_vec(input.shape(), col2im(&g, &dcol))?)
    } else {
        None
    };
    Ok(ConvGrads { input: dinput, kernels: Tensor::from_vec(kernels.shape(), dk)?, bias: Tensor::from_vec(&[g.out_ch], dbias)? })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index that won. Ties go to the lowest
/// flat index.
pub fn maxpool2<F: Scalar>(input: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    expect_rank("maxpool2", input, 4)?;
    let (b, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", format!("axes 2,3 must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<F: Scalar>(input_shape: &[usize], argmax: &[usize], dout: &Tensor<F>) -> Result<Tensor<F>> {
    if argmax.len() != dout.len() {
        return Err(Error::shape("maxpool2_backward", format!("{} winners for {} upstream values", argmax.len(), dout.len())));
    }
    let mut din = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        din.data[i] += g;
    }
    Ok(din)
}

/// Affine map `input[B,n] · weights[n,m] + bias[m]`.
pub fn dense<F: Scalar>(input: &Tensor<F>, weights: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    expect_rank("dense", input, 2)?;
    expect_rank("dense", weights, 2)?;
    let (b, n) = (input.dim(0), input.dim(1));
    let (wn, m) = (weights.dim(0), weights.dim(1));
    if n != wn {
        return Err(Error::shape("dense", format!("input axis 1 is {n}, weights axis 0 is {wn}")));
    }
    if bias.len() != m {
        return Err(Error::shape("dense", format!("bias has {} entries, expected {m}", bias.len())));
    }
    let mut out = Vec::with_capacity(b * m);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm::nn(b, n, m, input.data(), weights.data(), &mut out);
    let out = Tensor::from_vec(&[b, m], out)?;
    out.check_finite("dense")?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<F> {
    pub input: Tensor<F>,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn dense_backward<F: Scalar>(input: &Tensor<F>, weights: &Tensor<F>, dout: &Tensor<F>) -> Result<DenseGrads<F>> {
    let (b, n) = (input.dim(0), input.dim(1));
    let m = weights.dim(1);
    if dout.shape() != [b, m] {
        return Err(Error::shape("dense_backward", format!("upstream {:?}, expected [{b}, {m}]", dout.shape())));
    }
    let mut dx = vec![F::zero(); b * n];
    gemm::nt(b, m, n, dout.data(), weights.data(), &mut dx);
    let mut dw = vec![F::zero(); n * m];
    gemm::tn(n, b, m, input.data(), dout.data(), &mut dw);
    let mut db = vec![F::zero(); m];
    for row in dout.data().chunks(m.max(1)) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads { input: Tensor::from_vec(&[b, n], dx)?, weights: Tensor::from_vec(&[n, m], dw)?, bias: Tensor::from_vec(&[m], db)? })
}

fn map<F: Scalar>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

fn zip_map<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    same_shape(op, a, b)?;
    Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() })
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    map(x, |v| v.max(F::zero()))
}

/// Gradient of ReLU given its output. Zero at the kink.
pub fn relu_backward<F: Scalar>(out: &Tensor<F>, dout: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("relu_backward", out, dout, |y, g| if y > F::zero() { g } else { F::zero() })
}

pub fn tanh<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    map(x, |v| v.tanh())
}

/// Gradient of tanh given its output.
pub fn tanh_backward<F: Scalar>(out: &Tensor<F>, dout: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("tanh_backward", out, dout, |y, g| g * (F::one() - y * y))
}

#[inline]
pub fn sigmoid_scalar<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    map(x, sigmoid_scalar)
}

/// Gradient of the logistic function given its output.
pub fn sigmoid_backward<F: Scalar>(out: &Tensor<F>, dout: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("sigmoid_backward", out, dout, |y, g| g * y * (F::one() - y))
}

/// Softmax over the last axis, computed with max subtraction.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let n = *x.shape.last().ok_or_else(|| Error::shape("softmax", "rank 0 input"))?;
    let mut out = x.data.clone();
    if n > 0 {
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    let out = Tensor { shape: x.shape.clone(), data: out };
    out.check_finite("softmax")?;
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`:
/// `dx = y ⊙ (dy − ⟨dy, y⟩)` row by row.
pub fn softmax_backward<F: Scalar>(out: &Tensor<F>, dout: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape("softmax_backward", out, dout)?;
    let n = *out.shape.last().unwrap_or(&0);
    let mut dx = vec![F::zero(); out.len()];
    if n > 0 {
        for ((y, g), d) in out.data.chunks(n).zip(dout.data.chunks(n)).zip(dx.chunks_mut(n)) {
            let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                d[i] = y[i] * (g[i] - dot);
            }
        }
    }
    Ok(Tensor { shape: out.shape.clone(), data: dx })
}

pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    zip_map("add", a, b, |x, y| x + y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every element of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel <= tol || (a - n).abs() < 1e-9, "elem {i}: analytic {a} numeric {n}");
        }
    }

    /// Weighted readout so every output position gets a distinct upstream gradient.
    fn readout(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_diagonal_kernel_sums_diagonal() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let k = Tensor::from_f64(&[1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 5.0);
    }

    #[test]
    fn conv_one_hot_selects_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let k = Tensor::from_f64(&[1, 3, 1, 1], &[0., 1., 0.]).unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        for b in 0..2 {
            assert_eq!(&y.data()[b * 16..(b + 1) * 16], &x.data()[(b * 3 + 1) * 16..(b * 3 + 2) * 16]);
        }
    }

    #[test]
    fn conv_sum_gradient_is_overlapping_kernel_sum() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let k = Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let dout = Tensor::ones(&[1, 1, 2, 2]);
        let g = conv2d_backward(&x, &k, 1, 0, &dout, true).unwrap();
        // centre pixel is covered by every kernel tap
        assert_eq!(g.input.unwrap().data(), &[1., 3., 2., 4., 10., 6., 3., 7., 4.]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        let k = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), 2, 0).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
            let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b = rand_tensor(&[3], &mut rng);
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            let w = rand_tensor(y.shape(), &mut rng);
            let g = conv2d_backward(&x, &k, stride, pad, &w, true).unwrap();
            let fx = numeric_grad(&x, |x| readout(&conv2d(x, &k, &b, stride, pad).unwrap(), &w));
            let fk = numeric_grad(&k, |k| readout(&conv2d(&x, k, &b, stride, pad).unwrap(), &w));
            let fb = numeric_grad(&b, |b| readout(&conv2d(&x, &k, b, stride, pad).unwrap(), &w));
            assert_close(g.input.unwrap().data(), &fx, 1e-4);
            assert_close(g.kernels.data(), &fk, 1e-4);
            assert_close(g.bias.data(), &fb, 1e-4);
        }
    }

    #[test]
    fn maxpool_single_window_and_ties() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let x = Tensor::<f64>::full(&[1, 1, 2, 4], 0.5);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        assert_eq!(arg, vec![0, 2]);
        let d = maxpool2_backward(x.shape(), &arg, &Tensor::<f64>::ones(&[1, 1, 1, 2])).unwrap();
        assert_eq!(d.data(), &[1., 0., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let (y, arg) = maxpool2(&x).unwrap();
        let w = rand_tensor(y.shape(), &mut rng);
        let d = maxpool2_backward(x.shape(), &arg, &w).unwrap();
        let num = numeric_grad(&x, |x| readout(&maxpool2(x).unwrap().0, &w));
        assert_close(d.data(), &num, 1e-4);
    }

    #[test]
    fn dense_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let eye = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let y = dense(&x, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), x.data());
        let y = dense(&x, &eye, &Tensor::ones(&[2])).unwrap();
        assert_eq!(y.data(), &[2., 3.]);
        assert!(dense(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[3, 4], &mut rng);
        let wt = rand_tensor(&[4, 5], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        let r = rand_tensor(&[3, 5], &mut rng);
        let g = dense_backward(&x, &wt, &r).unwrap();
        assert_close(g.input.data(), &numeric_grad(&x, |x| readout(&dense(x, &wt, &b).unwrap(), &r)), 1e-4);
        assert_close(g.weights.data(), &numeric_grad(&wt, |w| readout(&dense(&x, w, &b).unwrap(), &r)), 1e-4);
        assert_close(g.bias.data(), &numeric_grad(&b, |b| readout(&dense(&x, &wt, b).unwrap(), &r)), 1e-4);
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::<f64>::from_f64(&[2], &[-3., 2.]).unwrap();
        assert_eq!(relu(&x).data(), &[0., 2.]);
        let s = softmax(&Tensor::<f64>::zeros(&[1, 2])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let y = tanh(&Tensor::<f64>::zeros(&[1]));
        assert_eq!(tanh_backward(&y, &Tensor::ones(&[1])).unwrap().data(), &[1.0]);
        let big = Tensor::<f64>::from_f64(&[1, 3], &[1000., 1001., 999.]).unwrap();
        let s = softmax(&big).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_activation_backwards_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&[3, 4], &mut rng);
        let r = rand_tensor(&[3, 4], &mut rng);
        let t = tanh(&x);
        assert_close(tanh_backward(&t, &r).unwrap().data(), &numeric_grad(&x, |x| readout(&tanh(x), &r)), 1e-6);
        let s = sigmoid(&x);
        assert_close(sigmoid_backward(&s, &r).unwrap().data(), &numeric_grad(&x, |x| readout(&sigmoid(x), &r)), 1e-6);
        let p = softmax(&x).unwrap();
        assert_close(softmax_backward(&p, &r).unwrap().data(), &numeric_grad(&x, |x| readout(&softmax(x).unwrap(), &r)), 1e-6);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::<f64>::from_f64(&[1, 1], &[f64::INFINITY]).unwrap();
        let err = dense(&x, &Tensor::ones(&[1, 1]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(err.is_numeric());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..24)) {
                let n = v.len();
                let s = softmax(&Tensor::from_vec(&[1, n], v).unwrap()).unwrap();
                prop_assert!((s.sum() - 1.0).abs() <= 1e-6);
            }

            #[test]
            fn maxpool_window_permutation_invariant(
                v in proptest::collection::vec(-10.0f64..10.0, 4),
                perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
            ) {
                let a = Tensor::from_vec(&[1, 1, 2, 2], v.clone()).unwrap();
                let b = Tensor::from_vec(&[1, 1, 2, 2], perm.iter().map(|&i| v[i]).collect()).unwrap();
                let (pa, pb) = (maxpool2(&a).unwrap().0, maxpool2(&b).unwrap().0);
                prop_assert_eq!(pa.data(), pb.data());
            }
        }
    }
}
