use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glimpsekit::baseline::{train_baseline, BaselineShape, ConvBaseline};
use glimpsekit::checkpoint::{load_model, load_trainer, save_trainer, Archive};
use glimpsekit::config::RunConfig;
use glimpsekit::data::Dataset;
use glimpsekit::data::{load_mnist, window_corners, DatasetMeta, DigitSource};
use glimpsekit::gradcheck::{check_model, check_primitives, PRIMITIVE_TOLERANCE};
use glimpsekit::layers::BnMode;
use glimpsekit::loss::argmax;
use glimpsekit::model::{count_params, FaultInjection};
use glimpsekit::train::{append_metrics, evaluate, make_batch, object_distributions, Member, Trainer};
use glimpsekit::{Edram, Error, Result, Scalar};
use log::{info, warn};

use crate::args::Common;
use crate::render::{step_color, Overlay, GT_COLOR, LABEL_COLOR, SCALE};

pub const OVERFIT_LOSS: f64 = 0.05;
pub const TRAIN_FILE: &str = "train.gkds";
pub const TEST_FILE: &str = "test.gkds";
pub const METRICS_FILE: &str = "metrics.txt";
pub const LAST_CHECKPOINT: &str = "last.gkcp";

/// The configured run with command-line overrides applied.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?)?,
        None => RunConfig::from_toml("")?,
    };
    apply_overrides(&mut cfg, common);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
}

pub fn split_meta(cfg: &RunConfig, train: bool, source: DigitSource) -> DatasetMeta {
    DatasetMeta {
        count: if train { cfg.train_count } else { cfg.test_count },
        canvas_h: cfg.canvas_h,
        canvas_w: cfg.canvas_w,
        clutter_count: cfg.clutter_count,
        objects: cfg.model.objects,
        seed: if train { cfg.seed } else { cfg.seed ^ 0x7e57_0000 },
        source,
    }
}

fn procedural_split(cfg: &RunConfig, train: bool) -> Result<Dataset> {
    Dataset::procedural(split_meta(cfg, train, DigitSource::Procedural))
}

/// Train and test splits from `<data_dir>/{train,test}.gkds`, or rendered in
/// memory when the directory holds neither and was not named explicitly.
pub fn datasets(cfg: &RunConfig, explicit: bool) -> Result<(Dataset, Dataset)> {
    let dir = Path::new(&cfg.data_dir);
    let (tp, sp) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
    if !explicit && !tp.exists() && !sp.exists() {
        info!("no datasets under {}; rendering procedural splits", dir.display());
        return Ok((procedural_split(cfg, true)?, procedural_split(cfg, false)?));
    }
    let (train, test) = (Dataset::load(&tp)?, Dataset::load(&sp)?);
    for d in [&train, &test] {
        let m = &d.meta;
        if (m.canvas_h, m.canvas_w, m.objects) != (cfg.canvas_h, cfg.canvas_w, cfg.model.objects) {
            return Err(Error::Config(format!(
                "dataset holds {}x{} canvases with {} objects, the configuration wants {}x{} with {}",
                m.canvas_h, m.canvas_w, m.objects, cfg.canvas_h, cfg.canvas_w, cfg.model.objects
            )));
        }
    }
    Ok((train, test))
}

pub fn synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
    let (train, test) = match &common.data {
        Some(dir) => {
            let read = |prefix: &str| {
                load_mnist(&dir.join(format!("{prefix}-images-idx3-ubyte")), &dir.join(format!("{prefix}-labels-idx1-ubyte")))
            };
            let (a, b) = (read("train")?, read("t10k")?);
            info!("loaded {} training and {} test digits from {}", a.len(), b.len(), dir.display());
            (
                Dataset::generate(split_meta(&cfg, true, DigitSource::Idx), &a)?,
                Dataset::generate(split_meta(&cfg, false, DigitSource::Idx), &b)?,
            )
        }
        None => (procedural_split(&cfg, true)?, procedural_split(&cfg, false)?),
    };
    fs::create_dir_all(&out)?;
    train.save(&out.join(TRAIN_FILE))?;
    test.save(&out.join(TEST_FILE))?;
    println!("wrote {} training and {} test canvases ({}x{}) to {}", train.len(), test.len(), cfg.canvas_h, cfg.canvas_w, out.display());
    Ok(())
}

pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub overfit: Option<usize>,
    pub baseline: bool,
}

pub fn train(common: &Common, opts: &TrainOptions) -> Result<()> {
    let cfg = match &opts.resume {
        Some(ck) => {
            let mut stored = RunConfig::from_toml(&Archive::load(ck)?.text("config")?)?;
            if common.config.is_some() {
                let wanted = load_config(common)?;
                let mut cmp = wanted.clone();
                (cmp.epochs, cmp.data_dir, cmp.out_dir) = (stored.epochs, stored.data_dir.clone(), stored.out_dir.clone());
                if cmp != stored {
                    return Err(Error::Config("configuration disagrees with the checkpoint beyond `epochs` and paths".into()));
                }
                stored.epochs = wanted.epochs;
            }
            if common.seed.is_some_and(|s| s != stored.seed) {
                return Err(Error::Config("--seed differs from the checkpoint's seed".into()));
            }
            apply_overrides(&mut stored, &Common { seed: None, ..common.clone() });
            stored
        }
        None => load_config(common)?,
    };
    match cfg.precision.as_str() {
        "f64" => train_as::<f64>(cfg, common, opts),
        _ => train_as::<f32>(cfg, common, opts),
    }
}

fn echo_config(cfg: &RunConfig) {
    info!(
        "preset={} lr={} batch={} clip={} epochs={} steps={} glimpse_hw={} seed={} precision={}",
        cfg.preset, cfg.lr, cfg.batch, cfg.clip, cfg.epochs, cfg.model.steps, cfg.model.glimpse_hw, cfg.seed, cfg.precision
    );
}

fn train_as<F: Scalar>(cfg: RunConfig, common: &Common, opts: &TrainOptions) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    echo_config(&cfg);
    let (train, test) = datasets(&cfg, common.data.is_some())?;

    if opts.baseline {
        return run_baseline::<F>(&cfg, &train, &test, &out);
    }
    if let Some(n) = opts.overfit {
        return overfit::<F>(cfg, &train, n, &out);
    }

    let mut tr = match &opts.resume {
        Some(ck) => {
            let mut t: Trainer<F> = load_trainer(ck)?;
            info!("resuming after epoch {} ({} steps)", t.epoch, t.steps);
            t.cfg = cfg;
            t
        }
        None => Trainer::new(cfg)?,
    };
    let metrics = out.join(METRICS_FILE);
    while tr.epoch < tr.cfg.epochs as u64 {
        let stats = tr.epoch(&train, &test)?;
        append_metrics(&metrics, &stats)?;
        println!("{}", stats.line());
        let ck = out.join(format!("epoch-{:03}.gkcp", stats.epoch));
        save_trainer(&tr, &ck)?;
        fs::copy(&ck, out.join(LAST_CHECKPOINT))?;
    }
    Ok(())
}

/// Single-batch fit of the first `n` training samples; stops at the first step
/// with every sample right and loss under [`OVERFIT_LOSS`].
fn overfit<F: Scalar>(mut cfg: RunConfig, train: &Dataset, n: usize, out: &Path) -> Result<()> {
    if n < 2 || n > train.len() {
        return Err(Error::Usage(format!("--overfit needs 2..={} samples, got {n}", train.len())));
    }
    cfg.batch = n;
    let steps = cfg.overfit_steps;
    let mut tr = Trainer::<F>::new(cfg)?;
    let idx: Vec<usize> = (0..n).collect();
    let batch = make_batch::<F>(train, &idx, &tr.cfg)?;
    let log = out.join("overfit.txt");
    let mut text = String::from("step loss train_err\n");
    let start = Instant::now();
    let mut last = (f64::NAN, n);
    let mut reached = None;
    for s in 1..=steps {
        last = tr.step(&batch)?;
        text.push_str(&format!("{s} {:.6} {:.4}\n", last.0, last.1 as f64 / n as f64));
        if last.1 == 0 && last.0 < OVERFIT_LOSS {
            reached = Some(s);
            break;
        }
    }
    fs::write(&log, text)?;
    save_trainer(&tr, &out.join("overfit.gkcp"))?;
    let secs = start.elapsed().as_secs_f64();
    match reached {
        Some(s) => println!("overfit reached step {s} loss {:.6} train_err 0 wall_time {secs:.1}", last.0),
        None => {
            println!("overfit not_reached step {steps} loss {:.6} train_err {:.4} wall_time {secs:.1}", last.0, last.1 as f64 / n as f64)
        }
    }
    Ok(())
}

fn run_baseline<F: Scalar>(cfg: &RunConfig, train: &Dataset, test: &Dataset, out: &Path) -> Result<()> {
    let mut model = ConvBaseline::<F>::new(BaselineShape::from_config(cfg), cfg.seed)?;
    let start = Instant::now();
    let hist = train_baseline(&mut model, cfg, train, cfg.epochs)?;
    let err = model.sequence_error(test, cfg, cfg.batch)?;
    let secs = start.elapsed().as_secs_f64();
    let mut text = String::from("epoch train_loss\n");
    for (i, l) in hist.iter().enumerate() {
        text.push_str(&format!("{} {l:.6}\n", i + 1));
    }
    fs::write(out.join("baseline.txt"), text)?;
    println!("baseline epochs {} test_err {err:.6} wall_time {secs:.1}", cfg.epochs);
    Ok(())
}

fn checkpoint_precision(path: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&Archive::load(path)?.text("config")?)
}

pub fn eval(checkpoint: &Path, ensemble: Option<&Path>, common: &Common) -> Result<()> {
    match checkpoint_precision(checkpoint)?.precision.as_str() {
        "f64" => eval_as::<f64>(checkpoint, ensemble, common),
        _ => eval_as::<f32>(checkpoint, ensemble, common),
    }
}

fn test_split(cfg: &mut RunConfig, common: &Common) -> Result<Dataset> {
    apply_overrides(cfg, common);
    Ok(datasets(cfg, common.data.is_some())?.1)
}

fn eval_as<F: Scalar>(checkpoint: &Path, ensemble: Option<&Path>, common: &Common) -> Result<()> {
    let (mut cfg, model) = load_model::<F>(checkpoint)?;
    let second = match ensemble {
        Some(p) => Some(load_model::<F>(p)?),
        None => None,
    };
    if let Some((c2, _)) = &second {
        if (c2.canvas_h, c2.canvas_w, c2.model.objects) != (cfg.canvas_h, cfg.canvas_w, cfg.model.objects) {
            return Err(Error::Config("ensemble checkpoints were trained on different canvases".into()));
        }
    }
    let test = test_split(&mut cfg, common)?;
    let r = evaluate(Member { model: &model, cfg: &cfg }, second.as_ref().map(|(c, m)| Member { model: m, cfg: c }), &test, cfg.batch)?;
    println!("samples {}", r.samples);
    println!("sequence_error {:.6}", r.sequence_error);
    println!("object_accuracy {:.6}", r.object_accuracy);
    println!("mean_iou {:.6}", r.mean_iou);
    println!("loss {:.6}", r.loss);
    Ok(())
}

/// Returns whether every group passed.
pub fn gradcheck(common: &Common, seeds: u64, flip_sampler_sign: bool) -> Result<bool> {
    let first = common.seed.unwrap_or(0);
    let mut ok = true;
    let start = Instant::now();
    for seed in first..first + seeds {
        for (name, err) in check_primitives(seed)? {
            let pass = err <= PRIMITIVE_TOLERANCE;
            ok &= pass;
            println!("seed {seed} primitive {name:<16} max_rel_error {err:.3e} {}", verdict(pass));
        }
        let r = check_model(seed, FaultInjection { flip_sampler_sign })?;
        for g in &r.groups {
            ok &= g.pass;
            println!(
                "seed {seed} group     {:<16} max_rel_error {:.3e} {} ({} entries)",
                g.group,
                g.max_rel_error,
                verdict(g.pass),
                g.checked
            );
        }
    }
    println!("gradcheck {} in {:.1}s", verdict(ok), start.elapsed().as_secs_f64());
    Ok(ok)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn visualize(checkpoint: &Path, common: &Common, samples: usize, gt: bool) -> Result<()> {
    match checkpoint_precision(checkpoint)?.precision.as_str() {
        "f64" => visualize_as::<f64>(checkpoint, common, samples, gt),
        _ => visualize_as::<f32>(checkpoint, common, samples, gt),
    }
}

fn visualize_as<F: Scalar>(checkpoint: &Path, common: &Common, samples: usize, gt: bool) -> Result<()> {
    let (mut cfg, model) = load_model::<F>(checkpoint)?;
    let out = common.out.clone().unwrap_or_else(|| Path::new(&cfg.out_dir).join("visualize"));
    let test = test_split(&mut cfg, common)?;
    let n = samples.min(test.len());
    fs::create_dir_all(&out)?;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.batch.max(1)) {
        let batch = make_batch::<F>(&test, chunk, &cfg)?;
        let files = render_batch(&model, &cfg, &test, chunk, &batch.images, gt)?;
        for (i, img) in chunk.iter().zip(files) {
            let path = out.join(format!("sample-{i:04}.png"));
            img.save(&path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

/// One image per sample: every read window in step order, the predicted
/// label of each object and optionally the target windows.
pub fn render_batch<F: Scalar>(
    model: &Edram<F>,
    cfg: &RunConfig,
    data: &Dataset,
    idx: &[usize],
    images: &glimpsekit::Tensor<F>,
    gt: bool,
) -> Result<Vec<image::RgbImage>> {
    let trace = model.forward(images, BnMode::Eval, None)?;
    let mut dist = object_distributions(model, &trace)?;
    if cfg.reverse_order {
        dist.iter_mut().for_each(|d| d.reverse());
    }
    let steps = trace.reads.len();
    let (h, w) = (data.meta.canvas_h, data.meta.canvas_w);
    let mut out = Vec::with_capacity(idx.len());
    for (bi, &si) in idx.iter().enumerate() {
        let s = &data.samples[si];
        let mut o = Overlay::new(&s.canvas, h, w);
        if gt {
            for a in s.gt_affine::<f64>()? {
                o.quad(&window_corners(&a, h, w), GT_COLOR);
            }
        }
        for (t, reads) in trace.reads.iter().enumerate() {
            o.quad(&window_corners(&reads[bi], h, w), step_color(t, steps));
        }
        for (k, d) in dist[bi].iter().enumerate() {
            o.label(argmax(d), 2 + k as u32 * 12, 2, LABEL_COLOR);
            if gt {
                o.label(s.labels[k] as usize, 2 + k as u32 * 12, 20, GT_COLOR);
            }
        }
        debug_assert_eq!(o.img.width(), w as u32 * SCALE);
        out.push(o.img);
    }
    Ok(out)
}

pub fn params(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let groups = count_params(&cfg.model);
    let total: usize = groups.iter().map(|(_, n)| n).sum();
    for (g, n) in &groups {
        println!("{g:<10} {n}");
    }
    println!("total      {total}");
    println!("millions   {:.3} (reference single SVHN model: 11)", total as f64 / 1e6);
    if cfg.preset != "svhn" {
        warn!("the 11M reference refers to the svhn preset");
    }
    Ok(())
}
