//! Where/what objective and per-object prediction averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stn::AffineParams;

const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: [f64; 6],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha1: 1.0, alpha2: 1.0, beta: [1.0, 0.5, 1.0, 0.5, 1.0, 1.0] }
    }
}

/// Which transform components the localization term sees.
pub type ThetaMask = [bool; 6];

pub const FULL_MASK: ThetaMask = [true; 6];
/// zooms and translations only
pub const NO_SKEW_MASK: ThetaMask = [true, false, true, false, true, true];

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTarget<F> {
    pub labels: Vec<usize>,
    pub gt_affine: Vec<AffineParams<F>>,
    pub active_thetas: ThetaMask,
    /// class for the trailing terminal steps, if any
    pub terminal_label: Option<usize>,
}

impl<F: Scalar> SupervisionTarget<F> {
    pub fn new(labels: Vec<usize>, gt_affine: Vec<AffineParams<F>>, active_thetas: ThetaMask) -> Result<Self> {
        if labels.len() != gt_affine.len() || labels.is_empty() {
            return Err(Error::shape("supervision target", format!("{} labels, {} transforms", labels.len(), gt_affine.len())));
        }
        Ok(SupervisionTarget { labels, gt_affine, active_thetas, terminal_label: None })
    }

    pub fn objects(&self) -> usize {
        self.labels.len()
    }
}

/// One step as the loss sees it: the class distribution and, if the step's
/// read transform is supervised, that transform.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a, F> {
    pub y: &'a [F],
    pub read: Option<&'a AffineParams<F>>,
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Negative log of the ground-truth probability, with the probability
/// floored at 1e-12.
pub fn classification_loss<F: Scalar>(y: &[F], label: usize) -> Result<F> {
    check_label(label, y.len())?;
    Ok(-y[label].max(F::lit(P_FLOOR)).ln())
}

/// Gradient of [`classification_loss`] on the row; zero where the floor is
/// active.
pub fn classification_loss_grad<F: Scalar>(y: &[F], label: usize) -> Result<Vec<F>> {
    check_label(label, y.len())?;
    let mut g = vec![F::zero(); y.len()];
    if y[label] > F::lit(P_FLOOR) {
        g[label] = -F::one() / y[label];
    }
    Ok(g)
}

pub fn localization_loss<F: Scalar>(a: &AffineParams<F>, gt: &AffineParams<F>, beta: &[f64; 6], mask: &ThetaMask) -> F {
    (0..6)
        .filter(|&k| mask[k])
        .map(|k| {
            let d = a.0[k] - gt.0[k];
            F::lit(beta[k]) * d * d
        })
        .sum()
}

pub fn localization_loss_grad<F: Scalar>(a: &AffineParams<F>, gt: &AffineParams<F>, beta: &[f64; 6], mask: &ThetaMask) -> AffineParams<F> {
    let mut g = AffineParams::zeros();
    for k in 0..6 {
        if mask[k] {
            g.0[k] = F::lit(2.0 * beta[k]) * (a.0[k] - gt.0[k]);
        }
    }
    g
}

/// Which object (if any) step `k` belongs to under `n` glimpses per object.
pub fn step_object(k: usize, n: usize, s: usize) -> Option<usize> {
    (k < n * s).then(|| k / n)
}

fn check_steps<F: Scalar>(steps: &[StepView<'_, F>], target: &SupervisionTarget<F>, n: usize) -> Result<()> {
    let s = target.objects();
    if n == 0 || steps.len() < n * s {
        return Err(Error::shape("composite_loss", format!("{} steps for {n} glimpses x {s} objects", steps.len())));
    }
    if steps.len() > n * s && target.terminal_label.is_none() {
        return Err(Error::shape("composite_loss", "terminal steps present but no terminal label"));
    }
    Ok(())
}

/// Composite objective of one sample: for every supervised step, weighted
/// cross-entropy plus weighted localization error, summed and divided by
/// the glimpses per object. Terminal steps add class loss only.
pub fn composite_loss<F: Scalar>(steps: &[StepView<'_, F>], target: &SupervisionTarget<F>, w: &LossWeights, n: usize) -> Result<F> {
    check_steps(steps, target, n)?;
    let s = target.objects();
    let mut total = F::zero();
    for (k, st) in steps.iter().enumerate() {
        let (label, gt) = match step_object(k, n, s) {
            Some(i) => (target.labels[i], Some(&target.gt_affine[i])),
            None => (target.terminal_label.expect("checked"), None),
        };
        total += F::lit(w.alpha1) * classification_loss(st.y, label)?;
        if let (Some(a), Some(gt)) = (st.read, gt) {
            total += F::lit(w.alpha2) * localization_loss(a, gt, &w.beta, &target.active_thetas);
        }
    }
    Ok(total / F::lit(n as f64))
}

/// [`composite_loss`] together with its gradient on every step's class row
/// and supervised read transform.
pub fn composite_loss_grad<F: Scalar>(
    steps: &[StepView<'_, F>],
    target: &SupervisionTarget<F>,
    w: &LossWeights,
    n: usize,
) -> Result<(F, Vec<Vec<F>>, Vec<AffineParams<F>>)> {
    let loss = composite_loss(steps, target, w, n)?;
    let s = target.objects();
    let inv_n = F::one() / F::lit(n as f64);
    let mut dy = Vec::with_capacity(steps.len());
    let mut da = Vec::with_capacity(steps.len());
    for (k, st) in steps.iter().enumerate() {
        let (label, gt) = match step_object(k, n, s) {
            Some(i) => (target.labels[i], Some(&target.gt_affine[i])),
            None => (target.terminal_label.expect("checked"), None),
        };
        let k1 = F::lit(w.alpha1) * inv_n;
        dy.push(classification_loss_grad(st.y, label)?.into_iter().map(|g| g * k1).collect());
        let mut g = AffineParams::zeros();
        if let (Some(a), Some(gt)) = (st.read, gt) {
            g = localization_loss_grad(a, gt, &w.beta, &target.active_thetas);
            let k2 = F::lit(w.alpha2) * inv_n;
            g.0.iter_mut().for_each(|v| *v *= k2);
        }
        da.push(g);
    }
    Ok((loss, dy, da))
}

/// Argmax of the mean distribution; ties go to the lowest class.
pub fn aggregate_prediction<F: Scalar>(ys: &[&[F]]) -> Result<usize> {
    let mean = mean_distribution(ys)?;
    Ok(argmax(&mean))
}

pub fn mean_distribution<F: Scalar>(ys: &[&[F]]) -> Result<Vec<F>> {
    let first = ys.first().ok_or_else(|| Error::shape("aggregate_prediction", "no rows"))?;
    let k = first.len();
    let mut mean = vec![F::zero(); k];
    for row in ys {
        if row.len() != k {
            return Err(Error::shape("aggregate_prediction", "rows of different length"));
        }
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    let inv = F::one() / F::lit(ys.len() as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two models' per-object distributions, averaged.
pub fn ensemble_distribution<F: Scalar>(a: &[F], b: &[F]) -> Result<Vec<F>> {
    mean_distribution(&[a, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_values() {
        assert_eq!(classification_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_abs_diff_eq!(classification_loss(&[0.5, 0.5], 0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let p = (-2f64).exp();
        assert_abs_diff_eq!(classification_loss(&[p, 1.0 - p], 0).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(classification_loss(&[0.0, 1.0], 0).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
        assert!(matches!(classification_loss(&[0.5, 0.5], 2), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn localization_values() {
        let gt = AffineParams::<f64>::from_f64([0.3, 0.0, 0.1, 0.0, 0.3, -0.2]);
        let w = LossWeights::default();
        assert_eq!(localization_loss(&gt, &gt, &w.beta, &FULL_MASK), 0.0);
        let a = AffineParams(gt.0.map(|v| v + 0.1));
        assert_abs_diff_eq!(localization_loss(&a, &gt, &w.beta, &FULL_MASK), 0.05, epsilon = 1e-12);
        let mut skewed = gt;
        skewed.0[1] += 100.0;
        skewed.0[3] -= 100.0;
        assert_eq!(localization_loss(&skewed, &gt, &w.beta, &NO_SKEW_MASK), 0.0);
    }

    /// A step whose class loss is exactly `l` (p_gt = e^-l) and whose read
    /// matches the target.
    fn frozen(l: f64) -> Vec<f64> {
        let p = (-l).exp();
        vec![p, 1.0 - p]
    }

    #[test]
    fn composite_uniform_terms() {
        let row = frozen(0.7);
        let gt = AffineParams::identity();
        let w = LossWeights::default();
        let views: Vec<_> = (0..6).map(|_| StepView { y: &row[..], read: Some(&gt) }).collect();
        let t1 = SupervisionTarget::new(vec![0], vec![gt], FULL_MASK).unwrap();
        assert_abs_diff_eq!(composite_loss(&views, &t1, &w, 6).unwrap(), 0.7, epsilon = 1e-12);

        let views: Vec<_> = (0..12).map(|_| StepView { y: &row[..], read: Some(&gt) }).collect();
        let t2 = SupervisionTarget::new(vec![0, 0], vec![gt, gt], FULL_MASK).unwrap();
        assert_abs_diff_eq!(composite_loss(&views, &t2, &w, 6).unwrap(), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn composite_needs_enough_steps() {
        let row = frozen(0.7);
        let gt = AffineParams::<f64>::identity();
        let views: Vec<_> = (0..5).map(|_| StepView { y: &row[..], read: None }).collect();
        let t = SupervisionTarget::new(vec![0], vec![gt], FULL_MASK).unwrap();
        assert!(composite_loss(&views, &t, &LossWeights::default(), 6).is_err());
    }

    #[test]
    fn alpha2_zero_is_mean_cross_entropy() {
        let rows = [vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]];
        let off = AffineParams::<f64>::from_f64([2.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        let views: Vec<_> = rows.iter().map(|r| StepView { y: &r[..], read: Some(&off) }).collect();
        let t = SupervisionTarget::new(vec![0], vec![AffineParams::identity()], FULL_MASK).unwrap();
        let w = LossWeights { alpha2: 0.0, ..Default::default() };
        let want = -(0.9f64.ln() + 0.6f64.ln() + 0.2f64.ln()) / 3.0;
        assert_abs_diff_eq!(composite_loss(&views, &t, &w, 3).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn terminal_steps_are_class_only() {
        let row = frozen(0.5);
        let off = AffineParams::<f64>::from_f64([5.0; 6]);
        let views: Vec<_> = (0..3).map(|_| StepView { y: &row[..], read: Some(&off) }).collect();
        let mut t = SupervisionTarget::new(vec![0], vec![off], FULL_MASK).unwrap();
        assert!(composite_loss(&views, &t, &LossWeights::default(), 2).is_err());
        t.terminal_label = Some(0);
        assert_abs_diff_eq!(composite_loss(&views, &t, &LossWeights::default(), 2).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let rows = [vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]];
        let reads = [AffineParams::from_f64([0.5, 0.1, -0.2, 0.05, 0.4, 0.3]), AffineParams::from_f64([0.9, 0.0, 0.1, 0.0, 0.8, -0.1])];
        let t = SupervisionTarget::new(vec![1], vec![AffineParams::from_f64([0.3, 0.0, 0.2, 0.0, 0.3, 0.1])], NO_SKEW_MASK).unwrap();
        let w = LossWeights { alpha1: 0.7, alpha2: 1.3, ..Default::default() };
        let eval = |rows: &[Vec<f64>], reads: &[AffineParams<f64>]| {
            let v: Vec<_> = rows.iter().zip(reads).map(|(r, a)| StepView { y: &r[..], read: Some(a) }).collect();
            composite_loss(&v, &t, &w, 2).unwrap()
        };
        let views: Vec<_> = rows.iter().zip(&reads).map(|(r, a)| StepView { y: &r[..], read: Some(a) }).collect();
        let (l, dy, da) = composite_loss_grad(&views, &t, &w, 2).unwrap();
        assert_eq!(l, eval(&rows, &reads));
        let h = 1e-6;
        for s in 0..2 {
            for c in 0..3 {
                let (mut p, mut m) = (rows.clone(), rows.clone());
                p[s][c] += h;
                m[s][c] -= h;
                assert_abs_diff_eq!(dy[s][c], (eval(&p, &reads) - eval(&m, &reads)) / (2.0 * h), epsilon = 1e-6);
            }
            for k in 0..6 {
                let (mut p, mut m) = (reads, reads);
                p[s].0[k] += h;
                m[s].0[k] -= h;
                assert_abs_diff_eq!(da[s].0[k], (eval(&rows, &p) - eval(&rows, &m)) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_prediction(&[&[0.6, 0.4][..], &[0.2, 0.8][..]]).unwrap(), 1);
        assert_eq!(aggregate_prediction(&[&[0.1, 0.7, 0.2][..]]).unwrap(), 1);
        let r = [0.3, 0.3, 0.4];
        assert_eq!(aggregate_prediction(&[&r[..], &r[..], &r[..]]).unwrap(), 2);
        assert_eq!(aggregate_prediction(&[&[0.5, 0.5][..]]).unwrap(), 0);
        assert!(aggregate_prediction::<f64>(&[]).is_err());
    }

    #[test]
    fn ensemble_averages() {
        assert_eq!(ensemble_distribution(&[0.8, 0.2], &[0.2, 0.8]).unwrap(), vec![0.5, 0.5]);
    }

    fn arb_row(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn aggregation_is_order_invariant(rows in prop::collection::vec(arb_row(4), 1..7), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
            let b: Vec<&[f64]> = perm.iter().map(|&i| &rows[i][..]).collect();
            let ma = mean_distribution(&a).unwrap();
            let mb = mean_distribution(&b).unwrap();
            for (x, y) in ma.iter().zip(&mb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(argmax(&ma), argmax(&mb));
        }

        #[test]
        fn loss_is_nonnegative_and_linear_in_weights(
            rows in prop::collection::vec(arb_row(3), 4),
            reads in prop::collection::vec(prop::array::uniform6(-1.0f64..1.0), 4),
            scale in 0.1f64..10.0,
        ) {
            let reads: Vec<_> = reads.into_iter().map(AffineParams).collect();
            let views: Vec<_> = rows.iter().zip(&reads).map(|(r, a)| StepView { y: &r[..], read: Some(a) }).collect();
            let t = SupervisionTarget::new(vec![2, 1], vec![AffineParams::identity(), AffineParams::from_f64([0.5, 0.0, 0.5, 0.0, 0.5, 0.5])], FULL_MASK).unwrap();
            let w = LossWeights::default();
            let ws = LossWeights { alpha1: scale, alpha2: scale, ..w };
            let l = composite_loss(&views, &t, &w, 2).unwrap();
            let ls = composite_loss(&views, &t, &ws, 2).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((ls - scale * l).abs() <= 1e-12 * ls.abs().max(1.0));
        }
    }
}
