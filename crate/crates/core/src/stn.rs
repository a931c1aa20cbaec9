//! Affine attention: grid generation, bilinear sampling and the gradient path
//! from sampled pixels back to the six transformation parameters.
//!
//! Coordinates live in a normalized space where `[-1, 1]` spans the image.
//! Pixel centres are corner-aligned: normalized `-1` is the centre of the
//! first pixel and `+1` the centre of the last, so the identity transform
//! reproduces an image of the same size exactly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The six entries of the 2x3 affine matrix, row-major:
/// `[zoom_x, skew_x, shift_x, skew_y, zoom_y, shift_y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams<F>(pub [F; 6]);

impl<F: Scalar> AffineParams<F> {
    pub fn identity() -> Self {
        let (o, z) = (F::one(), F::zero());
        AffineParams([o, z, z, z, o, z])
    }

    pub fn zeros() -> Self {
        AffineParams([F::zero(); 6])
    }

    pub fn from_f64(v: [f64; 6]) -> Self {
        AffineParams(v.map(F::lit))
    }

    pub fn to_f64(&self) -> [f64; 6] {
        self.0.map(|v| v.to_f64_lossy())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Maps a point of the target mesh into source coordinates.
    #[inline]
    pub fn apply(&self, xg: F, yg: F) -> (F, F) {
        let t = &self.0;
        (t[0] * xg + t[1] * yg + t[2], t[3] * xg + t[4] * yg + t[5])
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.0;
        for (a, b) in out.iter_mut().zip(other.0) {
            *a += b;
        }
        AffineParams(out)
    }
}

/// Evenly spaced mesh positions over `[-1, 1]`; a single point sits at 0.
pub fn mesh_axis<F: Scalar>(n: usize) -> Vec<F> {
    if n == 1 {
        return vec![F::zero()];
    }
    let step = F::lit(2.0) / F::from_usize(n - 1).unwrap();
    (0..n).map(|i| -F::one() + step * F::from_usize(i).unwrap()).collect()
}

/// Source coordinates for every target mesh point, stored as `[h, w, 2]`
/// with `(x, y)` in the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid<F> {
    pub coords: Tensor<F>,
}

impl<F: Scalar> SampleGrid<F> {
    pub fn height(&self) -> usize {
        self.coords.dim(0)
    }

    pub fn width(&self) -> usize {
        self.coords.dim(1)
    }

    pub fn point(&self, i: usize, j: usize) -> (F, F) {
        let k = (i * self.width() + j) * 2;
        (self.coords.data()[k], self.coords.data()[k + 1])
    }

    pub fn from_points(h: usize, w: usize, pts: &[(F, F)]) -> Result<Self> {
        let data = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        Ok(SampleGrid { coords: Tensor::from_vec(&[h, w, 2], data)? })
    }
}

pub fn make_grid<F: Scalar>(a: &AffineParams<F>, h: usize, w: usize) -> SampleGrid<F> {
    let xs = mesh_axis::<F>(w);
    let ys = mesh_axis::<F>(h);
    let mut data = Vec::with_capacity(h * w * 2);
    for &yg in &ys {
        for &xg in &xs {
            let (x, y) = a.apply(xg, yg);
            data.push(x);
            data.push(y);
        }
    }
    SampleGrid { coords: Tensor::from_vec(&[h, w, 2], data).expect("grid shape") }
}

#[inline]
fn to_pixel<F: Scalar>(v: F, extent: usize) -> F {
    (v + F::one()) * F::lit(0.5) * F::from_usize(extent.saturating_sub(1)).unwrap()
}

/// The (up to) two source indices along one axis with their interpolation
/// weights and the literal sub-gradient sign of each weight with respect to
/// the sample position.
#[inline]
fn taps<F: Scalar>(pos: F, extent: usize) -> [(usize, F, F); 2] {
    const NONE: usize = usize::MAX;
    let z = F::zero();
    let mut out = [(NONE, z, z); 2];
    if !(pos > -F::one() && pos < F::from_usize(extent).unwrap()) {
        return out;
    }
    let base = pos.floor();
    let frac = pos - base;
    let b = base.to_isize().unwrap();
    // lower neighbour: weight 1 - frac; sign +1 only when it sits exactly on the sample
    if b >= 0 && (b as usize) < extent {
        let sign = if frac == z { F::one() } else { -F::one() };
        out[0] = (b as usize, F::one() - frac, sign);
    }
    // upper neighbour: weight frac; at frac == 0 it is a full pixel away and contributes nothing
    let u = b + 1;
    if frac > z && u >= 0 && (u as usize) < extent {
        out[1] = (u as usize, frac, F::one());
    }
    out
}

/// Bilinear read of `image[C,H,W]` at every grid point. Samples outside
/// the image read as zero.
pub fn bilinear_sample<F: Scalar>(image: &Tensor<F>, grid: &SampleGrid<F>) -> Result<Tensor<F>> {
    if image.ndim() != 3 {
        return Err(Error::shape("bilinear_sample", format!("image must be [C,H,W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let (gh, gw) = (grid.height(), grid.width());
    let mut out = vec![F::zero(); c * gh * gw];
    let src = image.data();
    for i in 0..gh {
        for j in 0..gw {
            let (xs, ys) = grid.point(i, j);
            let tx = taps(to_pixel(xs, w), w);
            let ty = taps(to_pixel(ys, h), h);
            for ch in 0..c {
                let plane = &src[ch * h * w..][..h * w];
                let mut acc = F::zero();
                for &(n, wy, _) in &ty {
                    if n == usize::MAX {
                        continue;
                    }
                    for &(m, wx, _) in &tx {
                        if m != usize::MAX {
                            acc += plane[n * w + m] * wx * wy;
                        }
                    }
                }
                out[(ch * gh + i) * gw + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[c, gh, gw], out)
}

#[derive(Debug, Clone)]
pub struct SamplerGrads<F> {
    pub image: Option<Tensor<F>>,
    pub grid: Tensor<F>,
}

/// Backward of [`bilinear_sample`].
///
/// The coordinate gradient follows the piecewise rule of the interpolation
/// kernel: a tap at distance ≥ 1 contributes nothing, a tap at or to the
/// right of the sample contributes `+1`, a tap to the left `-1`. The result
/// is scaled from pixel units back to normalized units.
pub fn bilinear_sample_backward<F: Scalar>(
    image: &Tensor<F>,
    grid: &SampleGrid<F>,
    dout: &Tensor<F>,
    want_image: bool,
) -> Result<SamplerGrads<F>> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let (gh, gw) = (grid.height(), grid.width());
    if dout.shape() != [c, gh, gw] {
        return Err(Error::shape("bilinear_sample_backward", format!("upstream {:?}, expected [{c}, {gh}, {gw}]", dout.shape())));
    }
    let half = F::lit(0.5);
    let sx = half * F::from_usize(w.saturating_sub(1)).unwrap();
    let sy = half * F::from_usize(h.saturating_sub(1)).unwrap();
    let src = image.data();
    let up = dout.data();
    let mut dimg = if want_image { vec![F::zero(); c * h * w] } else { Vec::new() };
    let mut dgrid = vec![F::zero(); gh * gw * 2];
    for i in 0..gh {
        for j in 0..gw {
            let (xs, ys) = grid.point(i, j);
            let tx = taps(to_pixel(xs, w), w);
            let ty = taps(to_pixel(ys, h), h);
            let (mut gx, mut gy) = (F::zero(), F::zero());
            for ch in 0..c {
                let g = up[(ch * gh + i) * gw + j];
                if g == F::zero() {
                    continue;
                }
                let plane = &src[ch * h * w..][..h * w];
                for &(n, wy, sgn_y) in &ty {
                    if n == usize::MAX {
                        continue;
                    }
                    for &(m, wx, sgn_x) in &tx {
                        if m == usize::MAX {
                            continue;
                        }
                        let v = plane[n * w + m] * g;
                        gx += v * wy * sgn_x;
                        gy += v * wx * sgn_y;
                        if want_image {
                            dimg[ch * h * w + n * w + m] += g * wx * wy;
                        }
                    }
                }
            }
            let k = (i * gw + j) * 2;
            dgrid[k] = gx * sx;
            dgrid[k + 1] = gy * sy;
        }
    }
    Ok(SamplerGrads {
        image: if want_image { Some(Tensor::from_vec(&[c, h, w], dimg)?) } else { None },
        grid: Tensor::from_vec(&[gh, gw, 2], dgrid)?,
    })
}

/// Pulls a grid-coordinate gradient back onto the affine parameters.
pub fn grid_backward<F: Scalar>(dgrid: &Tensor<F>, h: usize, w: usize) -> Result<AffineParams<F>> {
    if dgrid.shape() != [h, w, 2] {
        return Err(Error::shape("grid_backward", format!("got {:?}, expected [{h}, {w}, 2]", dgrid.shape())));
    }
    let xs = mesh_axis::<F>(w);
    let ys = mesh_axis::<F>(h);
    let mut d = [F::zero(); 6];
    let g = dgrid.data();
    for (i, &yg) in ys.iter().enumerate() {
        for (j, &xg) in xs.iter().enumerate() {
            let k = (i * w + j) * 2;
            let (dx, dy) = (g[k], g[k + 1]);
            d[0] += dx * xg;
            d[1] += dx * yg;
            d[2] += dx;
            d[3] += dy * xg;
            d[4] += dy * yg;
            d[5] += dy;
        }
    }
    Ok(AffineParams(d))
}

/// Reads one `[C, gh, gw]` glimpse per batch element from `images[B,C,H,W]`.
pub fn read_glimpses<F: Scalar>(images: &Tensor<F>, thetas: &[AffineParams<F>], gh: usize, gw: usize) -> Result<Tensor<F>> {
    if images.ndim() != 4 || images.dim(0) != thetas.len() {
        return Err(Error::shape("read_glimpses", format!("images {:?} with {} transforms", images.shape(), thetas.len())));
    }
    let c = images.dim(1);
    let mut out = Vec::with_capacity(thetas.len() * c * gh * gw);
    for (b, a) in thetas.iter().enumerate() {
        let img = images.outer(b)?;
        let patch = bilinear_sample(&img, &make_grid(a, gh, gw))?;
        out.extend_from_slice(patch.data());
    }
    Tensor::from_vec(&[thetas.len(), c, gh, gw], out)
}

/// Gradient of [`read_glimpses`] with respect to each element's transform.
pub fn read_glimpses_backward<F: Scalar>(
    images: &Tensor<F>,
    thetas: &[AffineParams<F>],
    dpatches: &Tensor<F>,
) -> Result<Vec<AffineParams<F>>> {
    let (gh, gw) = (dpatches.dim(2), dpatches.dim(3));
    thetas
        .iter()
        .enumerate()
        .map(|(b, a)| {
            let img = images.outer(b)?;
            let grid = make_grid(a, gh, gw);
            let g = bilinear_sample_backward(&img, &grid, &dpatches.outer(b)?, false)?;
            grid_backward(&g.grid, gh, gw)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[c, h, w], v).unwrap()
    }

    fn rand_img(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Grid holding one point given in pixel coordinates of an `h×w` image.
    fn pixel_point(px: f64, py: f64, h: usize, w: usize) -> SampleGrid<f64> {
        let x = px / (w as f64 - 1.0) * 2.0 - 1.0;
        let y = py / (h as f64 - 1.0) * 2.0 - 1.0;
        SampleGrid::from_points(1, 1, &[(x, y)]).unwrap()
    }

    #[test]
    fn identity_grid_coords() {
        let g = make_grid(&AffineParams::<f64>::identity(), 3, 3);
        for i in 0..3 {
            let row: Vec<f64> = (0..3).map(|j| g.point(i, j).0).collect();
            assert_eq!(row, vec![-1.0, 0.0, 1.0]);
            let col: Vec<f64> = (0..3).map(|j| g.point(j, i).1).collect();
            assert_eq!(col, vec![-1.0, 0.0, 1.0]);
        }
        let single = make_grid(&AffineParams::<f64>::identity(), 1, 1);
        assert_eq!(single.point(0, 0), (0.0, 0.0));
    }

    #[test]
    fn zoom_grid_stays_inside() {
        let g = make_grid(&AffineParams::<f64>::from_f64([0.5, 0., 0., 0., 0.5, 0.]), 7, 5);
        assert!(g.coords.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn translated_grid_is_shifted_identity() {
        let id = make_grid(&AffineParams::<f64>::identity(), 2, 2);
        let g = make_grid(&AffineParams::<f64>::from_f64([1., 0., 0.2, 0., 1., -0.4]), 2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let (a, b) = (id.point(i, j), g.point(i, j));
                assert!((b.0 - a.0 - 0.2).abs() < 1e-15);
                assert!((b.1 - a.1 + 0.4).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let im = rand_img(2, 7, 9, &mut rng);
        let out = bilinear_sample(&im, &make_grid(&AffineParams::identity(), 7, 9)).unwrap();
        for (a, b) in out.data().iter().zip(im.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn bilinear_point_values() {
        let im = img(1, 2, 2, &[0., 1., 2., 3.]);
        let v = bilinear_sample(&im, &pixel_point(0.5, 0.5, 2, 2)).unwrap();
        assert!((v.data()[0] - 1.5).abs() < 1e-12);
        let v = bilinear_sample(&im, &pixel_point(0.25, 0.0, 2, 2)).unwrap();
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_reads_zero() {
        let im = img(1, 2, 2, &[5., 5., 5., 5.]);
        let g = SampleGrid::from_points(1, 3, &[(-3.0, 0.0), (0.0, 3.0), (1e30, -1e30)]).unwrap();
        let v = bilinear_sample(&im, &g).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.0]);
        // half a pixel beyond the border sees half the edge value
        let v = bilinear_sample(&im, &pixel_point(1.5, 0.0, 2, 2)).unwrap();
        assert!((v.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let im = rand_img(1, 5, 5, &mut rng);
        let grid = make_grid(&AffineParams::from_f64([0.6, 0.1, 0.05, -0.1, 0.7, 0.2]), 3, 3);
        let g = bilinear_sample_backward(&im, &grid, &Tensor::zeros(&[1, 3, 3]), true).unwrap();
        assert!(g.image.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_has_flat_interpolant() {
        let im = Tensor::<f64>::full(&[1, 6, 6], 0.7);
        let grid = make_grid(&AffineParams::from_f64([0.5, 0.1, 0.13, -0.2, 0.45, -0.17]), 4, 4);
        let g = bilinear_sample_backward(&im, &grid, &Tensor::ones(&[1, 4, 4]), false).unwrap();
        assert!(g.grid.data().iter().all(|&v| v.abs() < 1e-12), "{:?}", g.grid.data());
    }

    #[test]
    fn integer_sample_uses_on_pixel_branch() {
        // exactly on pixel (1, 1): the x-derivative takes only the +1 branch of that pixel
        let im = img(1, 3, 3, &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        let g = bilinear_sample_backward(&im, &pixel_point(1.0, 1.0, 3, 3), &Tensor::ones(&[1, 1, 1]), false).unwrap();
        // pixel-unit derivative I[1,1] = 4, scaled by (W-1)/2 = 1
        assert!((g.grid.data()[0] - 4.0).abs() < 1e-12);
        assert!((g.grid.data()[1] - 4.0).abs() < 1e-12);
        // just to the right of the pixel the derivative is the neighbour difference I[1,2] - I[1,1]
        let g = bilinear_sample_backward(&im, &pixel_point(1.25, 1.0, 3, 3), &Tensor::ones(&[1, 1, 1]), false).unwrap();
        assert!((g.grid.data()[0] - 1.0).abs() < 1e-12);
    }

    fn weighted(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    fn near_integer(grid: &SampleGrid<f64>, h: usize, w: usize) -> bool {
        (0..grid.height()).any(|i| {
            (0..grid.width()).any(|j| {
                let (x, y) = grid.point(i, j);
                let (px, py) = (to_pixel(x, w), to_pixel(y, h));
                (px - px.round()).abs() < 1e-3 || (py - py.round()).abs() < 1e-3
            })
        })
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let im = rand_img(2, 6, 7, &mut rng);
        let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95))).collect();
        let grid = SampleGrid::from_points(2, 3, &pts).unwrap();
        assert!(!near_integer(&grid, 6, 7));
        let r = Tensor::from_vec(&[2, 2, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = bilinear_sample_backward(&im, &grid, &r, true).unwrap();
        let h = 1e-7;
        for k in 0..12 {
            let mut p = grid.clone();
            p.coords.data_mut()[k] += h;
            let mut m = grid.clone();
            m.coords.data_mut()[k] -= h;
            let fd = (weighted(&bilinear_sample(&im, &p).unwrap(), &r) - weighted(&bilinear_sample(&im, &m).unwrap(), &r)) / (2.0 * h);
            let a = g.grid.data()[k];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "coord {k}: {a} vs {fd}");
        }
        // image gradient is exact: sampling is linear in the image
        let di = g.image.unwrap();
        for k in 0..im.len() {
            let mut e = Tensor::zeros(im.shape());
            e.data_mut()[k] = 1.0;
            let fd = weighted(&bilinear_sample(&e, &grid).unwrap(), &r);
            assert!((di.data()[k] - fd).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_mesh_translation_gradient() {
        let (h, w) = (4, 5);
        let mut d = Tensor::<f64>::zeros(&[h, w, 2]);
        for k in 0..h * w {
            d.data_mut()[2 * k] = 1.0;
        }
        let g = grid_backward(&d, h, w).unwrap();
        assert!((g.0[2] - (h * w) as f64).abs() < 1e-12);
        assert!(g.0[0].abs() < 1e-12 && g.0[1].abs() < 1e-12);
        assert_eq!(&g.0[3..], &[0.0, 0.0, 0.0]);
        let z = grid_backward(&Tensor::<f64>::zeros(&[h, w, 2]), h, w).unwrap();
        assert_eq!(z.0, [0.0; 6]);
    }

    #[test]
    fn theta_gradient_through_grid_and_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let im = rand_img(1, 9, 9, &mut rng);
        let (gh, gw) = (4, 4);
        let mut checked = 0;
        while checked < 5 {
            let a = AffineParams::<f64>::from_f64([
                rng.random_range(0.3..0.9),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.3..0.9),
                rng.random_range(-0.3..0.3),
            ]);
            let grid = make_grid(&a, gh, gw);
            if near_integer(&grid, 9, 9) {
                continue;
            }
            let r = Tensor::from_vec(&[1, gh, gw], (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let sg = bilinear_sample_backward(&im, &grid, &r, false).unwrap();
            let da = grid_backward(&sg.grid, gh, gw).unwrap();
            let h = 1e-7;
            for k in 0..6 {
                let mut p = a;
                p.0[k] += h;
                let mut m = a;
                m.0[k] -= h;
                let fp = weighted(&bilinear_sample(&im, &make_grid(&p, gh, gw)).unwrap(), &r);
                let fm = weighted(&bilinear_sample(&im, &make_grid(&m, gh, gw)).unwrap(), &r);
                let fd = (fp - fm) / (2.0 * h);
                let an = da.0[k];
                assert!((an - fd).abs() <= 1e-3 * an.abs().max(fd.abs()).max(1e-6), "theta {k}: {an} vs {fd}");
            }
            checked += 1;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sampling_is_linear_in_image(
                a in proptest::collection::vec(-1.0f64..1.0, 20),
                b in proptest::collection::vec(-1.0f64..1.0, 20),
                s in -2.0f64..2.0,
                t in -2.0f64..2.0,
                th in proptest::array::uniform6(-1.2f64..1.2),
            ) {
                let ia = img(1, 4, 5, &a);
                let ib = img(1, 4, 5, &b);
                let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
                let grid = make_grid(&AffineParams(th), 3, 3);
                let lhs = bilinear_sample(&img(1, 4, 5, &mix), &grid).unwrap();
                let ra = bilinear_sample(&ia, &grid).unwrap();
                let rb = bilinear_sample(&ib, &grid).unwrap();
                for i in 0..9 {
                    let rhs = s * ra.data()[i] + t * rb.data()[i];
                    prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12);
                }
            }

            #[test]
            fn grid_rows_stay_collinear(th in proptest::array::uniform6(-2.0f64..2.0)) {
                let g = make_grid(&AffineParams(th), 3, 4);
                for i in 0..3 {
                    let (x0, y0) = g.point(i, 0);
                    let (x1, y1) = g.point(i, 1);
                    for j in 2..4 {
                        let (x, y) = g.point(i, j);
                        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
                        prop_assert!(cross.abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
