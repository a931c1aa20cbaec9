//! Batch objective, the training loop, evaluation and the metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{epoch_batches, iou, window_rect, Batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::loss::{argmax, composite_loss_grad, ensemble_distribution, mean_distribution, LossWeights, StepView};
use crate::model::{Edram, FaultInjection, Gradients, Trace};
use crate::optim::{adam_step, clip_global_norm, AdamState, PlateauSchedule};
use crate::scalar::Scalar;
use crate::stn::AffineParams;
use crate::tensor::Tensor;

/// How the composite loss is attached to the unrolled model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub supervise_first_read: bool,
}

impl Objective {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Objective { weights: cfg.loss_weights(), supervise_first_read: cfg.supervise_first_read }
    }
}

/// Mean composite loss over the batch and its gradient on every step's
/// outputs and read transforms.
pub fn batch_loss<F: Scalar>(
    model: &Edram<F>,
    trace: &Trace<F>,
    batch: &Batch<F>,
    obj: &Objective,
) -> Result<(F, Vec<Tensor<F>>, Vec<Vec<AffineParams<F>>>)> {
    let steps = trace.outputs.len();
    let b = batch.targets.len();
    let k = model.config.class_count;
    let n = model.config.glimpses_per_object;
    let inv_b = F::one() / F::lit(b as f64);
    let mut dy: Vec<Tensor<F>> = (0..steps).map(|_| Tensor::zeros(&[b, k])).collect();
    let mut dtheta = vec![vec![AffineParams::zeros(); b]; steps];
    let mut total = F::zero();
    for (bi, target) in batch.targets.iter().enumerate() {
        let views: Vec<StepView<'_, F>> = (0..steps)
            .map(|t| StepView {
                y: &trace.outputs[t].y.data()[bi * k..(bi + 1) * k],
                read: (t > 0 || obj.supervise_first_read).then(|| &trace.reads[t][bi]),
            })
            .collect();
        let (l, gy, ga) = composite_loss_grad(&views, target, &obj.weights, n)?;
        total += l;
        for t in 0..steps {
            for (d, g) in dy[t].data_mut()[bi * k..(bi + 1) * k].iter_mut().zip(&gy[t]) {
                *d = *g * inv_b;
            }
            for j in 0..6 {
                dtheta[t][bi].0[j] = ga[t].0[j] * inv_b;
            }
        }
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    Ok((loss, dy, dtheta))
}

/// Forward, loss and backward for one batch.
pub fn batch_gradients<F: Scalar>(
    model: &Edram<F>,
    batch: &Batch<F>,
    obj: &Objective,
    mode: BnMode,
    read_offsets: Option<&[AffineParams<F>]>,
    fault: FaultInjection,
) -> Result<(F, Gradients<F>, Trace<F>)> {
    let trace = model.forward(&batch.images, mode, read_offsets)?;
    let (loss, dy, dtheta) = batch_loss(model, &trace, batch, obj)?;
    let grads = model.backward(&trace, &dy, &dtheta, fault)?;
    Ok((loss, grads, trace))
}

/// Per-object class distributions: the mean of each object's step outputs.
/// Indexed `[sample][object][class]`.
pub fn object_distributions<F: Scalar>(model: &Edram<F>, trace: &Trace<F>) -> Result<Vec<Vec<Vec<F>>>> {
    let k = model.config.class_count;
    let (n, s) = (model.config.glimpses_per_object, model.config.objects);
    let b = trace.outputs.first().map_or(0, |o| o.y.dim(0));
    (0..b)
        .map(|bi| {
            (0..s)
                .map(|i| {
                    let rows: Vec<&[F]> = (i * n..(i + 1) * n).map(|t| &trace.outputs[t].y.data()[bi * k..(bi + 1) * k]).collect();
                    mean_distribution(&rows)
                })
                .collect()
        })
        .collect()
}

fn reverse_targets<F: Scalar>(batch: &mut Batch<F>) {
    for t in &mut batch.targets {
        t.labels.reverse();
        t.gt_affine.reverse();
    }
}

/// Builds a batch in the model's reading order.
pub fn make_batch<F: Scalar>(data: &Dataset, idx: &[usize], cfg: &RunConfig) -> Result<Batch<F>> {
    let mut b = data.batch(idx, cfg.theta_mask())?;
    if cfg.reverse_order {
        reverse_targets(&mut b);
    }
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    /// fraction of samples with any object misclassified
    pub sequence_error: f64,
    pub object_accuracy: f64,
    /// mean IoU between each object's last read window and its box
    pub mean_iou: f64,
    pub loss: f64,
}

/// A model plus the run configuration it was trained under.
pub struct Member<'a, F> {
    pub model: &'a Edram<F>,
    pub cfg: &'a RunConfig,
}

/// Scores `data` with batch norm in eval mode. With a second member, the
/// two models' per-object distributions are averaged before the argmax
/// (after undoing either one's reversed reading order).
pub fn evaluate<F: Scalar>(primary: Member<'_, F>, second: Option<Member<'_, F>>, data: &Dataset, batch: usize) -> Result<EvalReport> {
    let cfg = primary.cfg;
    let obj = Objective::from_config(cfg);
    let s = primary.model.config.objects;
    if let Some(m) = &second {
        if m.model.config.objects != s || m.model.config.class_count != primary.model.config.class_count {
            return Err(Error::Config("ensemble members disagree on objects or classes".into()));
        }
    }
    let (h, w) = (data.meta.canvas_h, data.meta.canvas_w);
    let mut wrong_seq = 0usize;
    let mut right_obj = 0usize;
    let mut iou_sum = 0.0;
    let mut loss_sum = 0.0;
    let n = data.len();
    let order: Vec<usize> = (0..n).collect();
    for idx in order.chunks(batch.max(1)) {
        let natural = data.batch::<F>(idx, cfg.theta_mask())?;
        let run = |m: &Member<'_, F>| -> Result<(Trace<F>, Vec<Vec<Vec<F>>>)> {
            let trace = m.model.forward(&natural.images, BnMode::Eval, None)?;
            let mut dist = object_distributions(m.model, &trace)?;
            if m.cfg.reverse_order {
                dist.iter_mut().for_each(|d| d.reverse());
            }
            Ok((trace, dist))
        };
        let (trace, mut dist) = run(&primary)?;
        let mut own = natural.clone();
        if cfg.reverse_order {
            reverse_targets(&mut own);
        }
        loss_sum += batch_loss(primary.model, &trace, &own, &obj)?.0.to_f64_lossy() * idx.len() as f64;
        if let Some(m) = &second {
            let (_, other) = run(m)?;
            for (a, b) in dist.iter_mut().zip(&other) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = ensemble_distribution(x, y)?;
                }
            }
        }
        let n_obj = primary.model.config.glimpses_per_object;
        for (bi, &si) in idx.iter().enumerate() {
            let sample = &data.samples[si];
            let mut all = true;
            for (i, d) in dist[bi].iter().enumerate() {
                if argmax(d) == sample.labels[i] as usize {
                    right_obj += 1;
                } else {
                    all = false;
                }
                let read_obj = if cfg.reverse_order { s - 1 - i } else { i };
                let last = trace.reads[(read_obj + 1) * n_obj - 1][bi];
                iou_sum += iou(&window_rect(&last, h, w), &sample.boxes[i].into());
            }
            if !all {
                wrong_seq += 1;
            }
        }
    }
    let nf = n.max(1) as f64;
    Ok(EvalReport {
        samples: n,
        sequence_error: wrong_seq as f64 / nf,
        object_accuracy: right_obj as f64 / (nf * s as f64),
        mean_iou: iou_sum / (nf * s as f64),
        loss: loss_sum / nf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "epoch train_loss train_err test_err lr wall_time";

impl EpochStats {
    pub fn line(&self) -> String {
        format!("{} {} {} {} {} {:.3}", self.epoch, self.train_loss, self.train_err, self.test_err, self.lr, self.wall_time)
    }
}

/// Appends one line, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, stats: &EpochStats) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", stats.line())?;
    Ok(())
}

/// Replaces the running batch-norm statistics with the equal-weight average
/// of train-mode moments over the first `bn_refresh_samples` training
/// samples, weights held fixed.
pub fn refresh_bn_stats<F: Scalar>(model: &mut Edram<F>, data: &Dataset, cfg: &RunConfig) -> Result<()> {
    let n = cfg.bn_refresh_samples.min(data.len());
    if n == 0 || model.bn_stats.is_empty() {
        return Ok(());
    }
    let momentum: Vec<F> = model.bn_stats.iter().map(|s| s.momentum).collect();
    let idx: Vec<usize> = (0..n).collect();
    for (k, chunk) in idx.chunks(cfg.batch.max(1)).enumerate() {
        for s in &mut model.bn_stats {
            s.momentum = F::one() / F::from_usize(k + 1).unwrap();
        }
        let batch = make_batch::<F>(data, chunk, cfg)?;
        let trace = model.forward(&batch.images, BnMode::Train, None)?;
        model.update_bn_stats(&trace);
    }
    for (s, m) in model.bn_stats.iter_mut().zip(momentum) {
        s.momentum = m;
    }
    Ok(())
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub cfg: RunConfig,
    pub model: Edram<F>,
    pub adam: AdamState<F>,
    pub schedule: PlateauSchedule,
    /// completed epochs
    pub epoch: u64,
    pub steps: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Edram::new(cfg.model.clone(), cfg.seed)?;
        let adam = AdamState::new(&model.params, cfg.lr);
        let schedule = PlateauSchedule {
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            factor: cfg.lr_factor,
            floor: cfg.lr_floor,
            ..PlateauSchedule::new(cfg.lr)
        };
        Ok(Trainer { cfg, model, adam, schedule, epoch: 0, steps: 0 })
    }

    /// One optimizer step. Returns the batch loss and the number of
    /// misclassified sequences in the batch.
    pub fn step(&mut self, batch: &Batch<F>) -> Result<(f64, usize)> {
        let obj = Objective::from_config(&self.cfg);
        let (loss, grads, trace) = batch_gradients(&self.model, batch, &obj, BnMode::Train, None, FaultInjection::default())?;
        let dist = object_distributions(&self.model, &trace)?;
        let wrong = dist.iter().zip(&batch.targets).filter(|(d, t)| d.iter().zip(&t.labels).any(|(row, &l)| argmax(row) != l)).count();
        for (p, g) in self.model.params.iter_mut().zip(grads.params) {
            p.grad = g;
        }
        clip_global_norm(&mut self.model.params, F::lit(self.cfg.clip))?;
        adam_step(&mut self.model.params, &mut self.adam)?;
        for p in self.model.params.iter() {
            p.value.check_finite(&p.name)?;
        }
        self.model.update_bn_stats(&trace);
        self.steps += 1;
        Ok((loss.to_f64_lossy(), wrong))
    }

    /// One pass over `train`, then scoring on `test` and a schedule update.
    pub fn epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochStats> {
        let start = Instant::now();
        let batches = epoch_batches(train.len(), self.cfg.batch, self.cfg.seed, self.epoch);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for idx in &batches {
            let batch = make_batch(train, idx, &self.cfg)?;
            let (l, w) = self.step(&batch)?;
            loss_sum += l * idx.len() as f64;
            wrong += w;
        }
        refresh_bn_stats(&mut self.model, train, &self.cfg)?;
        let n = train.len().max(1) as f64;
        let train_loss = loss_sum / n;
        let test_err = if test.is_empty() {
            f64::NAN
        } else {
            evaluate(Member { model: &self.model, cfg: &self.cfg }, None, test, self.cfg.batch)?.sequence_error
        };
        let lr = self.schedule.update(train_loss)?;
        self.adam.lr = lr;
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            train_loss,
            train_err: wrong as f64 / n,
            test_err,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}
