//! Digit sources, cluttered-canvas synthesis, dataset files and batching.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{SupervisionTarget, ThetaMask};
use crate::scalar::Scalar;
use crate::stn::AffineParams;
use crate::tensor::Tensor;

pub const DIGIT_HW: usize = 28;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A raw IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { what: "idx header", need: 4, have: bytes.len() });
    }
    let mut r = Cursor::new(bytes);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != expected_magic {
        return Err(Error::BadMagic { expected: expected_magic, found: magic });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated { what: "idx header", need: header, have: bytes.len() });
    }
    let dims: Vec<u32> = (0..ndim).map(|_| r.read_u32::<BigEndian>()).collect::<std::io::Result<_>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::DimOverflow(dims.clone()))?;
    if bytes.len() < count {
        return Err(Error::Truncated { what: "idx payload", need: count, have: bytes.len() });
    }
    Ok(IdxArray { magic, dims, data: bytes[header..count].to_vec() })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.write_u32::<BigEndian>(arr.magic).unwrap();
    for &d in &arr.dims {
        out.write_u32::<BigEndian>(d).unwrap();
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn load_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?, expected_magic)
}

/// A set of 28x28 grayscale digits with labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DigitSet {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * DIGIT_HW * DIGIT_HW..][..DIGIT_HW * DIGIT_HW]
    }

    /// Pixel values scaled to `[0, 1]`, shape `[n, 28, 28]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self.images.iter().map(|&v| F::lit(v as f64 / 255.0)).collect();
        Tensor::from_vec(&[self.len(), DIGIT_HW, DIGIT_HW], data).expect("digit set shape")
    }
}

/// Reads an IDX image/label file pair.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<DigitSet> {
    let im = load_idx(images, IDX_IMAGES_MAGIC)?;
    let lb = load_idx(labels, IDX_LABELS_MAGIC)?;
    if im.dims.len() != 3 || im.dims[1] as usize != DIGIT_HW || im.dims[2] as usize != DIGIT_HW {
        return Err(Error::Format(format!("expected n x 28 x 28 images, got {:?}", im.dims)));
    }
    if lb.dims.len() != 1 || lb.dims[0] != im.dims[0] {
        return Err(Error::Format(format!("{} images but label dims {:?}", im.dims[0], lb.dims)));
    }
    if let Some(&l) = lb.data.iter().find(|&&l| l > 9) {
        return Err(Error::LabelOutOfRange { label: l as usize, classes: 10 });
    }
    Ok(DigitSet { images: im.data, labels: lb.data })
}

pub fn save_mnist(set: &DigitSet, images: &Path, labels: &Path) -> Result<()> {
    let n = set.len() as u32;
    let im = IdxArray { magic: IDX_IMAGES_MAGIC, dims: vec![n, 28, 28], data: set.images.clone() };
    let lb = IdxArray { magic: IDX_LABELS_MAGIC, dims: vec![n], data: set.labels.clone() };
    fs::write(images, encode_idx(&im))?;
    fs::write(labels, encode_idx(&lb))?;
    Ok(())
}

enum Stroke {
    Line([f64; 2], [f64; 2]),
    /// centre, radii, start and end angle in degrees (0 = right, 90 = down)
    Arc([f64; 2], [f64; 2], f64, f64),
}

fn glyph_strokes(digit: u8) -> Vec<Stroke> {
    use Stroke::*;
    match digit {
        0 => vec![Arc([0.5, 0.5], [0.21, 0.33], 0.0, 360.0)],
        1 => vec![Line([0.52, 0.16], [0.52, 0.84]), Line([0.38, 0.3], [0.52, 0.16])],
        2 => vec![Arc([0.5, 0.35], [0.2, 0.19], 180.0, 380.0), Line([0.688, 0.415], [0.28, 0.84]), Line([0.28, 0.84], [0.76, 0.84])],
        3 => vec![Arc([0.48, 0.33], [0.18, 0.17], 200.0, 450.0), Arc([0.48, 0.67], [0.2, 0.17], 270.0, 520.0)],
        4 => vec![Line([0.62, 0.16], [0.25, 0.62]), Line([0.25, 0.62], [0.78, 0.62]), Line([0.62, 0.16], [0.62, 0.84])],
        5 => vec![Line([0.72, 0.16], [0.34, 0.16]), Line([0.34, 0.16], [0.31, 0.47]), Arc([0.49, 0.64], [0.21, 0.2], 225.0, 510.0)],
        6 => vec![Arc([0.72, 0.62], [0.4, 0.46], 180.0, 250.0), Arc([0.5, 0.66], [0.19, 0.18], 0.0, 360.0)],
        7 => vec![Line([0.25, 0.16], [0.76, 0.16]), Line([0.76, 0.16], [0.42, 0.84])],
        8 => vec![Arc([0.5, 0.32], [0.16, 0.16], 0.0, 360.0), Arc([0.5, 0.67], [0.19, 0.17], 0.0, 360.0)],
        _ => vec![Arc([0.5, 0.34], [0.18, 0.18], 0.0, 360.0), Line([0.68, 0.36], [0.6, 0.84])],
    }
}

fn polyline(stroke: &Stroke) -> Vec<[f64; 2]> {
    match *stroke {
        Stroke::Line(a, b) => vec![a, b],
        Stroke::Arc(c, r, a0, a1) => {
            let n = (((a1 - a0) / 15.0).ceil() as usize).max(2);
            (0..=n)
                .map(|i| {
                    let t = (a0 + (a1 - a0) * i as f64 / n as f64).to_radians();
                    [c[0] + r[0] * t.cos(), c[1] + r[1] * t.sin()]
                })
                .collect()
        }
    }
}

fn seg_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    ex * ex + ey * ey
}

/// Draws a handwriting-like 28x28 digit: the glyph skeleton under a random
/// scale, rotation, shear and offset, with per-point wobble and a random
/// pen width.
pub fn render_glyph<R: Rng>(digit: u8, rng: &mut R) -> Vec<u8> {
    let sx = rng.random_range(0.8..1.05);
    let sy = rng.random_range(0.85..1.05);
    let rot = rng.random_range(-0.2f64..0.2);
    let shear = rng.random_range(-0.25..0.25);
    let (tx, ty) = (rng.random_range(-0.05..0.05), rng.random_range(-0.04..0.04));
    let pen = rng.random_range(0.045..0.075);
    let (c, s) = (rot.cos(), rot.sin());
    let warp = |p: [f64; 2]| {
        let (x, y) = ((p[0] - 0.5) * sx, (p[1] - 0.5) * sy);
        let x = x + shear * y;
        [0.5 + c * x - s * y + tx, 0.5 + s * x + c * y + ty]
    };
    let mut segs = Vec::new();
    for stroke in glyph_strokes(digit % 10) {
        let pts: Vec<[f64; 2]> = polyline(&stroke)
            .into_iter()
            .map(|p| warp([p[0] + rng.random_range(-0.015..0.015), p[1] + rng.random_range(-0.015..0.015)]))
            .collect();
        segs.extend(pts.windows(2).map(|w| (w[0], w[1])));
    }
    let px = 1.0 / DIGIT_HW as f64;
    let mut out = vec![0u8; DIGIT_HW * DIGIT_HW];
    for y in 0..DIGIT_HW {
        for x in 0..DIGIT_HW {
            let p = [(x as f64 + 0.5) * px, (y as f64 + 0.5) * px];
            let d = segs.iter().map(|&(a, b)| seg_dist2(p, a, b)).fold(f64::INFINITY, f64::min).sqrt();
            let v = ((pen + px - d) / px).clamp(0.0, 1.0);
            out[y * DIGIT_HW + x] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// `n` rendered digits with uniformly drawn labels.
pub fn procedural_digits(n: usize, seed: u64) -> DigitSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    let images = labels
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &l)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            render_glyph(l, &mut r)
        })
        .collect();
    DigitSet { images, labels }
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Continuous rectangle in pixel units, edges at `x0..x1`, `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

impl From<BBox> for Rect {
    fn from(b: BBox) -> Self {
        Rect { x0: b.x as f64, y0: b.y as f64, x1: (b.x + b.w) as f64, y1: (b.y + b.h) as f64 }
    }
}

pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = Rect { x0: a.x0.max(b.x0), y0: a.y0.max(b.y0), x1: a.x1.min(b.x1), y1: a.y1.min(b.y1) };
    let i = inter.area();
    let u = a.area() + b.area() - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Target transform whose window covers `bbox`: zoom is the box extent over
/// the canvas extent, translation the box centre in `[-1, 1]` coordinates,
/// skews zero.
pub fn gt_affine_from_bbox<F: Scalar>(bbox: &BBox, canvas_h: usize, canvas_w: usize) -> Result<AffineParams<F>> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::Format(format!("degenerate box {bbox:?}")));
    }
    if bbox.x + bbox.w > canvas_w || bbox.y + bbox.h > canvas_h {
        return Err(Error::Format(format!("box {bbox:?} outside {canvas_h}x{canvas_w} canvas")));
    }
    let (w, h) = (canvas_w as f64, canvas_h as f64);
    let cx = bbox.x as f64 + bbox.w as f64 / 2.0;
    let cy = bbox.y as f64 + bbox.h as f64 / 2.0;
    Ok(AffineParams::from_f64([bbox.w as f64 / w, 0.0, 2.0 * cx / w - 1.0, 0.0, bbox.h as f64 / h, 2.0 * cy / h - 1.0]))
}

/// Bounding rectangle of the window a transform reads, under the same
/// mapping as [`gt_affine_from_bbox`] (so a ground-truth transform maps back
/// to its box exactly).
pub fn window_rect<F: Scalar>(a: &AffineParams<F>, canvas_h: usize, canvas_w: usize) -> Rect {
    let corners = window_corners(a, canvas_h, canvas_w);
    let xs = corners.iter().map(|c| c.0);
    let ys = corners.iter().map(|c| c.1);
    Rect {
        x0: xs.clone().fold(f64::INFINITY, f64::min),
        x1: xs.fold(f64::NEG_INFINITY, f64::max),
        y0: ys.clone().fold(f64::INFINITY, f64::min),
        y1: ys.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// The four window corners in canvas pixel units, clockwise from top-left.
pub fn window_corners<F: Scalar>(a: &AffineParams<F>, canvas_h: usize, canvas_w: usize) -> [(f64, f64); 4] {
    let t = a.to_f64();
    let map = |xg: f64, yg: f64| {
        let xs = t[0] * xg + t[1] * yg + t[2];
        let ys = t[3] * xg + t[4] * yg + t[5];
        ((xs + 1.0) / 2.0 * canvas_w as f64, (ys + 1.0) / 2.0 * canvas_h as f64)
    };
    [map(-1.0, -1.0), map(1.0, -1.0), map(1.0, 1.0), map(-1.0, 1.0)]
}

/// Max-composites a `ph x pw` patch onto the canvas at `(x, y)`, clipping at
/// the canvas edge.
pub fn paste_max(canvas: &mut [u8], cw: usize, ch: usize, patch: &[u8], pw: usize, ph: usize, x: usize, y: usize) {
    for r in 0..ph.min(ch.saturating_sub(y)) {
        for c in 0..pw.min(cw.saturating_sub(x)) {
            let dst = &mut canvas[(y + r) * cw + x + c];
            *dst = (*dst).max(patch[r * pw + c]);
        }
    }
}

/// One synthesized canvas and its per-object supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub height: usize,
    pub width: usize,
    pub canvas: Vec<u8>,
    pub labels: Vec<u8>,
    pub boxes: Vec<BBox>,
    /// digit-set index of each object
    pub sources: Vec<u32>,
}

impl LabeledSample {
    pub fn canvas_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self.canvas.iter().map(|&v| F::lit(v as f64 / 255.0)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("canvas shape")
    }

    pub fn gt_affine<F: Scalar>(&self) -> Result<Vec<AffineParams<F>>> {
        self.boxes.iter().map(|b| gt_affine_from_bbox(b, self.height, self.width)).collect()
    }
}

pub const CLUTTER_HW: usize = 8;

fn add_clutter<R: Rng>(canvas: &mut [u8], h: usize, w: usize, digits: &DigitSet, exclude: &[usize], count: usize, rng: &mut R) {
    if digits.len() <= exclude.len() {
        return;
    }
    for _ in 0..count {
        let src = loop {
            let i = rng.random_range(0..digits.len());
            if !exclude.contains(&i) {
                break i;
            }
        };
        let img = digits.image(src);
        let (cx, cy) = (rng.random_range(0..=DIGIT_HW - CLUTTER_HW), rng.random_range(0..=DIGIT_HW - CLUTTER_HW));
        let mut crop = [0u8; CLUTTER_HW * CLUTTER_HW];
        for r in 0..CLUTTER_HW {
            crop[r * CLUTTER_HW..][..CLUTTER_HW].copy_from_slice(&img[(cy + r) * DIGIT_HW + cx..][..CLUTTER_HW]);
        }
        let (x, y) = (rng.random_range(0..=w - CLUTTER_HW), rng.random_range(0..=h - CLUTTER_HW));
        paste_max(canvas, w, h, &crop, CLUTTER_HW, CLUTTER_HW, x, y);
    }
}

/// A canvas holding digit `index` at a uniform random position among
/// `clutter_count` 8x8 fragments of other digits.
pub fn synthesize_cluttered<R: Rng>(
    digits: &DigitSet,
    index: usize,
    canvas_hw: usize,
    clutter_count: usize,
    rng: &mut R,
) -> Result<LabeledSample> {
    if canvas_hw < DIGIT_HW {
        return Err(Error::Config(format!("canvas {canvas_hw} smaller than a {DIGIT_HW}px digit")));
    }
    let x = rng.random_range(0..=canvas_hw - DIGIT_HW);
    let y = rng.random_range(0..=canvas_hw - DIGIT_HW);
    let mut canvas = vec![0u8; canvas_hw * canvas_hw];
    add_clutter(&mut canvas, canvas_hw, canvas_hw, digits, &[index], clutter_count, rng);
    paste_max(&mut canvas, canvas_hw, canvas_hw, digits.image(index), DIGIT_HW, DIGIT_HW, x, y);
    Ok(LabeledSample {
        height: canvas_hw,
        width: canvas_hw,
        canvas,
        labels: vec![digits.labels[index]],
        boxes: vec![BBox { x, y, w: DIGIT_HW, h: DIGIT_HW }],
        sources: vec![index as u32],
    })
}

/// A canvas with the given digits in reading order: the width is split into
/// equal slots, one digit per slot at a random offset inside it.
pub fn synthesize_sequence<R: Rng>(
    digits: &DigitSet,
    indices: &[usize],
    height: usize,
    width: usize,
    clutter_count: usize,
    rng: &mut R,
) -> Result<LabeledSample> {
    let s = indices.len();
    if s == 0 || height < DIGIT_HW || width < DIGIT_HW * s {
        return Err(Error::Config(format!("{height}x{width} canvas cannot hold {s} digits side by side")));
    }
    let slot = width / s;
    let mut canvas = vec![0u8; height * width];
    add_clutter(&mut canvas, height, width, digits, indices, clutter_count, rng);
    let mut boxes = Vec::with_capacity(s);
    for (k, &i) in indices.iter().enumerate() {
        let x = k * slot + rng.random_range(0..=slot - DIGIT_HW);
        let y = rng.random_range(0..=height - DIGIT_HW);
        paste_max(&mut canvas, width, height, digits.image(i), DIGIT_HW, DIGIT_HW, x, y);
        boxes.push(BBox { x, y, w: DIGIT_HW, h: DIGIT_HW });
    }
    Ok(LabeledSample {
        height,
        width,
        canvas,
        labels: indices.iter().map(|&i| digits.labels[i]).collect(),
        boxes,
        sources: indices.iter().map(|&i| i as u32).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigitSource {
    Procedural,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub count: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub clutter_count: usize,
    pub objects: usize,
    pub seed: u64,
    pub source: DigitSource,
}

impl DatasetMeta {
    pub fn cluttered(count: usize, canvas_hw: usize, clutter_count: usize, seed: u64) -> Self {
        DatasetMeta { count, canvas_h: canvas_hw, canvas_w: canvas_hw, clutter_count, objects: 1, seed, source: DigitSource::Procedural }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabeledSample>,
}

/// Images plus per-sample targets, ready for the model.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub images: Tensor<F>,
    pub targets: Vec<SupervisionTarget<F>>,
}

const DATASET_MAGIC: &[u8; 4] = b"GKDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Deterministic in `(meta, digits)`: sample `i` draws from its own
    /// generator stream, so generation order does not matter.
    pub fn generate(meta: DatasetMeta, digits: &DigitSet) -> Result<Self> {
        if digits.is_empty() {
            return Err(Error::Config("empty digit set".into()));
        }
        let samples = (0..meta.count)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
                rng.set_stream(i as u64);
                if meta.objects == 1 && meta.canvas_h == meta.canvas_w {
                    let idx = rng.random_range(0..digits.len());
                    synthesize_cluttered(digits, idx, meta.canvas_h, meta.clutter_count, &mut rng)
                } else {
                    let idx: Vec<usize> = (0..meta.objects).map(|_| rng.random_range(0..digits.len())).collect();
                    synthesize_sequence(digits, &idx, meta.canvas_h, meta.canvas_w, meta.clutter_count, &mut rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { meta, samples })
    }

    /// Procedural digits, one freshly rendered glyph per sample on average.
    pub fn procedural(meta: DatasetMeta) -> Result<Self> {
        let digits = procedural_digits(meta.count.max(1000) * meta.objects, meta.seed ^ 0x5eed_d161);
        Self::generate(DatasetMeta { source: DigitSource::Procedural, ..meta }, &digits)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let samples: Vec<_> = self.samples.iter().take(n).cloned().collect();
        Dataset { meta: DatasetMeta { count: samples.len(), ..self.meta }, samples }
    }

    pub fn batch<F: Scalar>(&self, indices: &[usize], mask: ThetaMask) -> Result<Batch<F>> {
        let (h, w) = (self.meta.canvas_h, self.meta.canvas_w);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.canvas.iter().map(|&v| F::lit(v as f64 / 255.0)));
            targets.push(SupervisionTarget::new(s.labels.iter().map(|&l| l as usize).collect(), s.gt_affine()?, mask)?);
        }
        Ok(Batch { images: Tensor::from_vec(&[indices.len(), 1, h, w], data)?, targets })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let mut put = |v: u64| out.write_u64::<LittleEndian>(v).unwrap();
        put(DATASET_VERSION as u64);
        for v in [m.count, m.canvas_h, m.canvas_w, m.clutter_count, m.objects] {
            put(v as u64);
        }
        put(m.seed);
        put(match m.source {
            DigitSource::Procedural => 0,
            DigitSource::Idx => 1,
        });
        for s in &self.samples {
            out.extend_from_slice(&s.labels);
            for (b, &src) in s.boxes.iter().zip(&s.sources) {
                for v in [b.x, b.y, b.w, b.h] {
                    out.write_u32::<LittleEndian>(v as u32).unwrap();
                }
                out.write_u32::<LittleEndian>(src).unwrap();
            }
            out.extend_from_slice(&s.canvas);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = 4 + 8 * 8;
        if bytes.len() < head {
            return Err(Error::Truncated { what: "dataset header", need: head, have: bytes.len() });
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let mut r = Cursor::new(&bytes[4..]);
        let mut get = || r.read_u64::<LittleEndian>().map(|v| v as usize);
        let version = get()?;
        if version != DATASET_VERSION as usize {
            return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
        }
        let (count, canvas_h, canvas_w, clutter_count, objects) = (get()?, get()?, get()?, get()?, get()?);
        let seed = get()? as u64;
        let source = match get()? {
            0 => DigitSource::Procedural,
            1 => DigitSource::Idx,
            s => return Err(Error::Format(format!("unknown digit source {s}"))),
        };
        let per = objects
            .checked_mul(1 + 20)
            .and_then(|v| canvas_h.checked_mul(canvas_w).and_then(|c| c.checked_add(v)))
            .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
        let need =
            count.checked_mul(per).and_then(|v| v.checked_add(head)).ok_or_else(|| Error::Format("dataset size overflows".into()))?;
        if bytes.len() < need {
            return Err(Error::Truncated { what: "dataset payload", need, have: bytes.len() });
        }
        let mut r = Cursor::new(&bytes[head..]);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut labels = vec![0u8; objects];
            r.read_exact(&mut labels)?;
            let mut boxes = Vec::with_capacity(objects);
            let mut sources = Vec::with_capacity(objects);
            for _ in 0..objects {
                let mut f = || r.read_u32::<LittleEndian>().map(|v| v as usize);
                boxes.push(BBox { x: f()?, y: f()?, w: f()?, h: f()? });
                sources.push(r.read_u32::<LittleEndian>()?);
            }
            let mut canvas = vec![0u8; canvas_h * canvas_w];
            r.read_exact(&mut canvas)?;
            samples.push(LabeledSample { height: canvas_h, width: canvas_w, canvas, labels, boxes, sources });
        }
        let meta = DatasetMeta { count, canvas_h, canvas_w, clutter_count, objects, seed, source };
        Ok(Dataset { meta, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Index batches for one epoch: a permutation drawn from `(seed, epoch)`,
/// cut into runs of `batch_size` with a short final batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stn::{make_grid, SampleGrid};
    use proptest::prelude::*;

    fn tiny_set() -> DigitSet {
        procedural_digits(40, 3)
    }

    #[test]
    fn idx_round_trip() {
        let set = DigitSet { images: (0..2 * 784).map(|v| (v % 251) as u8).collect(), labels: vec![3, 7] };
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im"), dir.path().join("lb"));
        save_mnist(&set, &ip, &lp).unwrap();
        let bytes = fs::read(&ip).unwrap();
        assert_eq!(load_mnist(&ip, &lp).unwrap(), set);
        let re = encode_idx(&parse_idx(&bytes, IDX_IMAGES_MAGIC).unwrap());
        assert_eq!(re, bytes);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let lb = encode_idx(&IdxArray { magic: IDX_IMAGES_MAGIC, dims: vec![2], data: vec![1, 2] });
        assert!(matches!(parse_idx(&lb, IDX_LABELS_MAGIC), Err(Error::BadMagic { found: 0x803, .. })));
        let ok = encode_idx(&IdxArray { magic: IDX_IMAGES_MAGIC, dims: vec![1, 28, 28], data: vec![0; 784] });
        assert!(matches!(parse_idx(&ok[..100], IDX_IMAGES_MAGIC), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx(&ok[..6], IDX_IMAGES_MAGIC), Err(Error::Truncated { .. })));
        let huge = encode_idx(&IdxArray { magic: IDX_IMAGES_MAGIC, dims: vec![u32::MAX, u32::MAX, u32::MAX], data: vec![] });
        assert!(matches!(parse_idx(&huge, IDX_IMAGES_MAGIC), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn glyphs_are_drawn_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let glyphs: Vec<Vec<u8>> = (0..10).map(|d| render_glyph(d, &mut rng)).collect();
        for g in &glyphs {
            let ink = g.iter().filter(|&&v| v > 128).count();
            assert!((40..400).contains(&ink), "ink {ink}");
            // border rows stay mostly clear
            assert!(g[..28].iter().all(|&v| v < 255));
        }
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(glyphs[i], glyphs[j]);
            }
        }
    }

    #[test]
    fn bare_digit_at_origin_is_zero_padded() {
        let set = tiny_set();
        let mut canvas = vec![0u8; 60 * 60];
        paste_max(&mut canvas, 60, 60, set.image(0), 28, 28, 0, 0);
        for y in 0..60 {
            for x in 0..60 {
                let want = if x < 28 && y < 28 { set.image(0)[y * 28 + x] } else { 0 };
                assert_eq!(canvas[y * 60 + x], want);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = synthesize_cluttered(&set, 5, 28, 0, &mut rng).unwrap();
        assert_eq!(s.canvas, set.image(5));
        assert_eq!(s.boxes[0], BBox { x: 0, y: 0, w: 28, h: 28 });
    }

    #[test]
    fn synthesis_is_deterministic() {
        let set = tiny_set();
        let a = synthesize_cluttered(&set, 2, 100, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize_cluttered(&set, 2, 100, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let meta = DatasetMeta::cluttered(20, 60, 8, 11);
        assert_eq!(Dataset::generate(meta, &set).unwrap(), Dataset::generate(meta, &set).unwrap());
    }

    #[test]
    fn cluttered_canvas_contains_whole_digit() {
        let set = tiny_set();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..30 {
            let s = synthesize_cluttered(&set, i, 100, 8, &mut rng).unwrap();
            let b = s.boxes[0];
            let digit = set.image(i);
            let mut digit_sum = 0u64;
            for y in 0..28 {
                for x in 0..28 {
                    assert!(s.canvas[(b.y + y) * 100 + b.x + x] >= digit[y * 28 + x]);
                    digit_sum += digit[y * 28 + x] as u64;
                }
            }
            assert!(s.canvas.iter().map(|&v| v as u64).sum::<u64>() >= digit_sum);
        }
    }

    #[test]
    fn gt_affine_examples() {
        let full: AffineParams<f64> = gt_affine_from_bbox(&BBox { x: 0, y: 0, w: 100, h: 100 }, 100, 100).unwrap();
        assert_eq!(full, AffineParams::identity());
        let half: AffineParams<f64> = gt_affine_from_bbox(&BBox { x: 25, y: 25, w: 50, h: 50 }, 100, 100).unwrap();
        assert_eq!(half.to_f64(), [0.5, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let q: AffineParams<f64> = gt_affine_from_bbox(&BBox { x: 0, y: 0, w: 25, h: 25 }, 100, 100).unwrap();
        assert_eq!(q.to_f64(), [0.25, 0.0, -0.75, 0.0, 0.25, -0.75]);
        let tl: AffineParams<f64> = gt_affine_from_bbox(&BBox { x: 0, y: 0, w: 50, h: 50 }, 100, 100).unwrap();
        assert_eq!(tl.0[2], -0.5);
        assert_eq!(tl.0[5], -0.5);
        assert!(gt_affine_from_bbox::<f64>(&BBox { x: 3, y: 3, w: 0, h: 5 }, 100, 100).is_err());
    }

    #[test]
    fn gt_window_recovers_the_box() {
        let set = tiny_set();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..20 {
            let s = synthesize_cluttered(&set, i, 60, 4, &mut rng).unwrap();
            let a = s.gt_affine::<f64>().unwrap()[0];
            let r = window_rect(&a, 60, 60);
            assert!((iou(&r, &s.boxes[0].into()) - 1.0).abs() < 1e-12);
            // and the sampling grid stays inside the canvas
            let g: SampleGrid<f64> = make_grid(&a, 26, 26);
            assert!(g.coords.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn iou_values() {
        let a = Rect { x0: 0.0, y0: 0.0, x1: 2.0, y1: 2.0 };
        let b = Rect { x0: 1.0, y0: 0.0, x1: 3.0, y1: 2.0 };
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &Rect { x0: 5.0, y0: 5.0, x1: 6.0, y1: 6.0 }), 0.0);
    }

    #[test]
    fn sequence_boxes_in_reading_order() {
        let set = tiny_set();
        let s = synthesize_sequence(&set, &[1, 2, 3], 40, 100, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.labels, vec![set.labels[1], set.labels[2], set.labels[3]]);
        for w in s.boxes.windows(2) {
            assert!(w[0].x + w[0].w <= w[1].x);
        }
        assert!(synthesize_sequence(&set, &[1, 2, 3, 4], 40, 100, 0, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let set = tiny_set();
        let mut meta = DatasetMeta::cluttered(7, 60, 8, 1);
        let d = Dataset::generate(meta, &set).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        meta.objects = 2;
        meta.canvas_w = 80;
        let d2 = Dataset::generate(meta, &set).unwrap();
        assert_eq!(Dataset::from_bytes(&d2.to_bytes()).unwrap(), d2);
        let bytes = d.to_bytes();
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn batch_examples() {
        let b = epoch_batches(256, 128, 1, 0);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..256).collect::<Vec<_>>());
        let b = epoch_batches(130, 128, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 2]);
        assert_eq!(epoch_batches(100, 10, 5, 3), epoch_batches(100, 10, 5, 3));
        assert_ne!(epoch_batches(100, 10, 5, 3), epoch_batches(100, 10, 6, 3));
        assert_ne!(epoch_batches(100, 10, 5, 3), epoch_batches(100, 10, 5, 4));
    }

    proptest! {
        #[test]
        fn batches_partition_indices(n in 1usize..400, bs in 1usize..150, seed in any::<u64>(), epoch in 0u64..50) {
            let b = epoch_batches(n, bs, seed, epoch);
            prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
            let mut all = b.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn gt_affine_translation_in_range(x in 0usize..72, y in 0usize..72) {
            let a: AffineParams<f64> = gt_affine_from_bbox(&BBox { x, y, w: 28, h: 28 }, 100, 100).unwrap();
            prop_assert!(a.0[2].abs() <= 1.0 && a.0[5].abs() <= 1.0);
        }
    }
}
