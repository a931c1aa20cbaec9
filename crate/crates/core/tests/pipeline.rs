//! End-to-end runs through the public API: files on disk, a short training
//! run, checkpoints and scoring.

use glimpsekit::checkpoint::{load_model, load_trainer, save_trainer};
use glimpsekit::config::RunConfig;
use glimpsekit::data::{load_mnist, procedural_digits, save_mnist, Dataset, DatasetMeta};
use glimpsekit::train::{evaluate, Member, Trainer};
use glimpsekit::Error;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::preset("tiny").unwrap();
    cfg.train_count = 24;
    cfg.test_count = 8;
    cfg
}

fn split(cfg: &RunConfig) -> (Dataset, Dataset) {
    let train = DatasetMeta::cluttered(cfg.train_count, cfg.canvas_h, cfg.clutter_count, cfg.seed);
    let test = DatasetMeta::cluttered(cfg.test_count, cfg.canvas_h, cfg.clutter_count, cfg.seed + 1);
    (Dataset::procedural(train).unwrap(), Dataset::procedural(test).unwrap())
}

#[test]
fn idx_files_round_trip_and_feed_the_synthesizer() {
    let dir = tempfile::tempdir().unwrap();
    let digits = procedural_digits(40, 2);
    let (im, lb) = (dir.path().join("train-images-idx3-ubyte"), dir.path().join("train-labels-idx1-ubyte"));
    save_mnist(&digits, &im, &lb).unwrap();
    let back = load_mnist(&im, &lb).unwrap();
    assert_eq!(back, digits);
    let set = Dataset::generate(DatasetMeta::cluttered(5, 40, 2, 1), &back).unwrap();
    assert_eq!(set.len(), 5);
}

#[test]
fn corrupt_idx_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let digits = procedural_digits(3, 0);
    let (im, lb) = (dir.path().join("i"), dir.path().join("l"));
    save_mnist(&digits, &im, &lb).unwrap();
    let mut bytes = std::fs::read(&im).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&im, &bytes).unwrap();
    let err = load_mnist(&im, &lb).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. }) && err.is_data(), "{err}");
    let err = load_mnist(&lb, &im).unwrap_err();
    assert!(matches!(err, Error::BadMagic { .. }), "{err}");
}

#[test]
fn dataset_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = split(&tiny());
    let path = dir.path().join("train.gkds");
    train.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), train);
}

#[test]
fn train_checkpoint_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let (train, test) = split(&cfg);
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let stats = tr.epoch(&train, &test).unwrap();
    assert!(stats.train_loss.is_finite() && (0.0..=1.0).contains(&stats.test_err));

    let path = dir.path().join("one.gkcp");
    save_trainer(&tr, &path).unwrap();
    let back = load_trainer::<f32>(&path).unwrap();
    assert_eq!(back.epoch, 1);
    assert_eq!(back.steps, tr.steps);

    let (cfg2, model) = load_model::<f64>(&path).unwrap();
    assert_eq!(cfg2.seed, cfg.seed);
    let wide = evaluate(Member { model: &model, cfg: &cfg2 }, None, &test, 4).unwrap();
    let narrow = evaluate(Member { model: &tr.model, cfg: &cfg }, None, &test, 4).unwrap();
    assert_eq!(wide.samples, test.len());
    assert!((wide.loss - narrow.loss).abs() < 1e-3 * narrow.loss.abs().max(1.0), "{wide:?} vs {narrow:?}");
    assert!((0.0..=1.0).contains(&wide.mean_iou));
}
