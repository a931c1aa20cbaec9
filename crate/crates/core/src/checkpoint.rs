//! Single-file training snapshots.
//!
//! Layout: `GKCP`, a u32 version, a u32 record count, then records of
//! `name_len:u32 name kind:u8 ndim:u32 dims:u64* payload_len:u64 payload`,
//! all little-endian. Float records are stored in the trainer's own width.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::{BnTimeStats, ParamBundle};
use crate::model::Edram;
use crate::optim::{AdamState, PlateauSchedule};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const MAGIC: &[u8; 4] = b"GKCP";
pub const VERSION: u32 = 1;

const KIND_F32: u8 = 1;
const KIND_F64: u8 = 2;
const KIND_U64: u8 = 3;
const KIND_TEXT: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: u8,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

/// An ordered set of named records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub records: BTreeMap<String, Record>,
}

impl Archive {
    pub fn put_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) {
        let mut payload = Vec::with_capacity(t.len() * F::DTYPE.size());
        for v in t.data() {
            v.to_le_bytes_vec(&mut payload);
        }
        let kind = match F::DTYPE {
            DType::F32 => KIND_F32,
            DType::F64 => KIND_F64,
        };
        self.records.insert(name.to_string(), Record { kind, shape: t.shape().to_vec(), payload });
    }

    pub fn put_u64s(&mut self, name: &str, vals: &[u64]) {
        let payload = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.records.insert(name.to_string(), Record { kind: KIND_U64, shape: vec![vals.len()], payload });
    }

    pub fn put_f64s(&mut self, name: &str, vals: &[f64]) {
        self.put_tensor(name, &Tensor::from_vec(&[vals.len()], vals.to_vec()).expect("1-d"));
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        let payload = text.as_bytes().to_vec();
        self.records.insert(name.to_string(), Record { kind: KIND_TEXT, shape: vec![payload.len()], payload });
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.records.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no record `{name}`")))
    }

    /// Reads a float record as `F`, widening or narrowing if it was stored
    /// in the other width.
    pub fn tensor<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        let r = self.get(name)?;
        let data: Vec<F> = match r.kind {
            KIND_F32 => r.payload.chunks_exact(4).map(|c| F::lit(f32::from_le_slice(c) as f64)).collect(),
            KIND_F64 if F::DTYPE == DType::F64 => r.payload.chunks_exact(8).map(F::from_le_slice).collect(),
            KIND_F64 => r.payload.chunks_exact(8).map(|c| F::lit(f64::from_le_slice(c))).collect(),
            k => return Err(Error::Format(format!("record `{name}` has kind {k}, expected a float tensor"))),
        };
        Tensor::from_vec(&r.shape, data).map_err(|_| Error::Format(format!("record `{name}` payload does not match its shape")))
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let r = self.get(name)?;
        if r.kind != KIND_U64 {
            return Err(Error::Format(format!("record `{name}` is not an integer array")));
        }
        Ok(r.payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor::<f64>(name)?.into_data())
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let r = self.get(name)?;
        if r.kind != KIND_TEXT {
            return Err(Error::Format(format!("record `{name}` is not text")));
        }
        String::from_utf8(r.payload.clone()).map_err(|_| Error::Format(format!("record `{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.records.len() as u32).unwrap();
        for (name, r) in &self.records {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(r.kind).unwrap();
            out.write_u32::<LittleEndian>(r.shape.len() as u32).unwrap();
            for d in &r.shape {
                out.write_u64::<LittleEndian>(*d as u64).unwrap();
            }
            out.write_u64::<LittleEndian>(r.payload.len() as u64).unwrap();
            out.extend_from_slice(&r.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let trunc = |what: &'static str, cur: &Cursor<&[u8]>, need: usize| Error::Truncated {
            what,
            need,
            have: bytes.len() - cur.position() as usize,
        };
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| trunc("checkpoint header", &cur, 4))?;
        if &magic != MAGIC {
            return Err(Error::BadMagic { expected: u32::from_be_bytes(*MAGIC), found: u32::from_be_bytes(magic) });
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| trunc("checkpoint version", &cur, 4))?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| trunc("record count", &cur, 4))?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let n = cur.read_u32::<LittleEndian>().map_err(|_| trunc("record name", &cur, 4))? as usize;
            let name = take(&mut cur, n).ok_or_else(|| trunc("record name", &cur, n))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let kind = cur.read_u8().map_err(|_| trunc("record kind", &cur, 1))?;
            if !(KIND_F32..=KIND_TEXT).contains(&kind) {
                return Err(Error::Format(format!("record `{name}` has unknown kind {kind}")));
            }
            let ndim = cur.read_u32::<LittleEndian>().map_err(|_| trunc("record rank", &cur, 4))? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let d = cur.read_u64::<LittleEndian>().map_err(|_| trunc("record shape", &cur, 8))?;
                shape.push(usize::try_from(d).map_err(|_| overflow(&name))?);
            }
            let len = cur.read_u64::<LittleEndian>().map_err(|_| trunc("payload length", &cur, 8))?;
            let len = usize::try_from(len).map_err(|_| overflow(&name))?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| overflow(&name))?;
            let width = match kind {
                KIND_F32 => 4,
                KIND_TEXT => 1,
                _ => 8,
            };
            if numel.checked_mul(width) != Some(len) {
                return Err(Error::Format(format!("record `{name}`: {len} payload bytes for shape {shape:?}")));
            }
            let payload = take(&mut cur, len).ok_or_else(|| trunc("record payload", &cur, len))?;
            records.insert(name, Record { kind, shape, payload });
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Archive { records })
    }

    /// Writes through a sibling temp file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn overflow(name: &str) -> Error {
    Error::Format(format!("record `{name}`: size overflows"))
}

fn take(cur: &mut Cursor<&[u8]>, n: usize) -> Option<Vec<u8>> {
    let start = cur.position() as usize;
    let end = start.checked_add(n)?;
    let slice = cur.get_ref().get(start..end)?.to_vec();
    cur.set_position(end as u64);
    Some(slice)
}

fn put_model<F: Scalar>(a: &mut Archive, model: &Edram<F>) {
    for p in model.params.iter() {
        a.put_tensor(&format!("param.{}", p.name), &p.value);
    }
    for (i, s) in model.bn_stats.iter().enumerate() {
        let (steps, ch) = (s.steps(), s.mean.first().map_or(0, Vec::len));
        let flat = |rows: &Vec<Vec<F>>| Tensor::from_vec(&[steps, ch], rows.concat()).expect("bn rows");
        a.put_tensor(&format!("bn.{i}.mean"), &flat(&s.mean));
        a.put_tensor(&format!("bn.{i}.var"), &flat(&s.var));
    }
}

fn read_model<F: Scalar>(a: &Archive, cfg: &RunConfig) -> Result<Edram<F>> {
    let mut params = ParamBundle::new();
    for spec in cfg.model.param_specs() {
        let t = a.tensor::<F>(&format!("param.{}", spec.name))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} has shape {:?}, the configuration expects {:?}",
                spec.name,
                t.shape(),
                spec.shape
            )));
        }
        params.push(&spec.name, &spec.group, t);
    }
    let bn = if cfg.model.batch_norm {
        let mut out = Vec::new();
        for (i, layer) in cfg.model.glimpse_convs.iter().enumerate() {
            let mut s = BnTimeStats::<F>::new(cfg.model.steps, layer.filters, cfg.model.bn_momentum, cfg.model.bn_eps);
            let mean = a.tensor::<F>(&format!("bn.{i}.mean"))?;
            let var = a.tensor::<F>(&format!("bn.{i}.var"))?;
            if mean.shape() != [cfg.model.steps, layer.filters] || var.shape() != mean.shape() {
                return Err(Error::Config(format!("batch-norm statistics for layer {i} do not match the configuration")));
            }
            for t in 0..cfg.model.steps {
                s.mean[t].copy_from_slice(&mean.data()[t * layer.filters..(t + 1) * layer.filters]);
                s.var[t].copy_from_slice(&var.data()[t * layer.filters..(t + 1) * layer.filters]);
            }
            out.push(s);
        }
        Some(out)
    } else {
        None
    };
    Edram::from_parts(cfg.model.clone(), params, bn)
}

/// Snapshot of everything that determines the rest of a training run.
pub fn trainer_archive<F: Scalar>(tr: &Trainer<F>) -> Result<Archive> {
    let mut a = Archive::default();
    a.put_text("config", &tr.cfg.to_toml()?);
    put_model(&mut a, &tr.model);
    for ((p, m), v) in tr.model.params.iter().zip(&tr.adam.m).zip(&tr.adam.v) {
        a.put_tensor(&format!("adam.m.{}", p.name), m);
        a.put_tensor(&format!("adam.v.{}", p.name), v);
    }
    a.put_u64s("adam.step", &[tr.adam.step]);
    a.put_f64s("adam.hyper", &[tr.adam.lr, tr.adam.beta1, tr.adam.beta2, tr.adam.eps]);
    let s = &tr.schedule;
    a.put_f64s("schedule.values", &[s.lr, s.factor, s.threshold, s.floor, s.best]);
    a.put_u64s("schedule.counts", &[s.patience as u64, s.bad_epochs as u64]);
    // the batch order of every epoch is a pure function of (seed, epoch)
    a.put_u64s("progress", &[tr.epoch, tr.steps, tr.cfg.seed]);
    Ok(a)
}

pub fn trainer_from_archive<F: Scalar>(a: &Archive) -> Result<Trainer<F>> {
    let cfg = RunConfig::from_toml(&a.text("config")?)?;
    let model = read_model::<F>(a, &cfg)?;
    let mut adam = AdamState::new(&model.params, cfg.lr);
    for ((p, m), v) in model.params.iter().zip(&mut adam.m).zip(&mut adam.v) {
        *m = a.tensor(&format!("adam.m.{}", p.name))?;
        *v = a.tensor(&format!("adam.v.{}", p.name))?;
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Config(format!("optimizer moments for {} have the wrong shape", p.name)));
        }
    }
    adam.step = one(&a.u64s("adam.step")?, "adam.step")?;
    let hyper = a.f64s("adam.hyper")?;
    let counts = a.u64s("schedule.counts")?;
    let values = a.f64s("schedule.values")?;
    let progress = a.u64s("progress")?;
    if hyper.len() != 4 || values.len() != 5 || counts.len() != 2 || progress.len() != 3 {
        return Err(Error::Format("malformed optimizer or schedule record".into()));
    }
    (adam.lr, adam.beta1, adam.beta2, adam.eps) = (hyper[0], hyper[1], hyper[2], hyper[3]);
    let schedule = PlateauSchedule {
        lr: values[0],
        factor: values[1],
        threshold: values[2],
        floor: values[3],
        best: values[4],
        patience: counts[0] as u32,
        bad_epochs: counts[1] as u32,
    };
    if progress[2] != cfg.seed {
        return Err(Error::Format("checkpoint seed disagrees with its recorded configuration".into()));
    }
    Ok(Trainer { cfg, model, adam, schedule, epoch: progress[0], steps: progress[1] })
}

fn one(v: &[u64], name: &str) -> Result<u64> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Format(format!("record `{name}` should hold one value"))),
    }
}

pub fn save_trainer<F: Scalar>(tr: &Trainer<F>, path: &Path) -> Result<()> {
    trainer_archive(tr)?.save(path)
}

pub fn load_trainer<F: Scalar>(path: &Path) -> Result<Trainer<F>> {
    trainer_from_archive(&Archive::load(path)?)
}

/// Configuration and weights only, for evaluation and rendering.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(RunConfig, Edram<F>)> {
    let a = Archive::load(path)?;
    let cfg = RunConfig::from_toml(&a.text("config")?)?;
    let model = read_model(&a, &cfg)?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, DatasetMeta};
    use crate::train::make_batch;

    fn trainer() -> (Trainer<f64>, Dataset) {
        let mut cfg = RunConfig::preset("tiny").unwrap();
        cfg.model.class_count = 10;
        cfg.batch = 4;
        let data = Dataset::procedural(DatasetMeta::cluttered(8, 28, 1, 2)).unwrap();
        (Trainer::new(cfg).unwrap(), data)
    }

    #[test]
    fn archive_round_trip_and_rejections() {
        let mut a = Archive::default();
        a.put_tensor("w", &Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        a.put_u64s("n", &[7, u64::MAX]);
        a.put_text("c", "lr = 0.1");
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"GKCP");
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.tensor::<f64>("w").unwrap().data()[1], -2.5);
        assert_eq!(b.u64s("n").unwrap(), vec![7, u64::MAX]);

        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(Archive::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Archive::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Archive::from_bytes(&long).is_err());
        assert!(b.text("n").is_err());
        assert!(b.tensor::<f32>("missing").is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let (mut a, data) = trainer();
        let idx: Vec<usize> = (0..4).collect();
        let batch = make_batch::<f64>(&data, &idx, &a.cfg).unwrap();
        a.step(&batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gkcp");
        save_trainer(&a, &path).unwrap();
        let mut b: Trainer<f64> = load_trainer(&path).unwrap();
        assert_eq!(b.cfg, a.cfg);
        assert_eq!(b.adam, a.adam);
        assert_eq!(b.schedule, a.schedule);
        assert_eq!(b.model.bn_stats, a.model.bn_stats);
        let la = a.step(&batch).unwrap();
        let lb = b.step(&batch).unwrap();
        assert_eq!(la.0.to_bits(), lb.0.to_bits());
        for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        assert!(!dir.path().join("ck.tmp").exists());
    }

    #[test]
    fn mismatched_config_is_reported() {
        let (a, _) = trainer();
        let mut arch = trainer_archive(&a).unwrap();
        let mut cfg = a.cfg.clone();
        cfg.model.lstm_units = 16;
        arch.put_text("config", &cfg.to_toml().unwrap());
        let err = trainer_from_archive::<f64>(&arch).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn width_conversion_on_load() {
        let (a, _) = trainer();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gkcp");
        save_trainer(&a.clone(), &path).unwrap();
        let (_, m32) = load_model::<f32>(&path).unwrap();
        let first = a.model.params.iter().next().unwrap();
        let got = m32.params.iter().next().unwrap();
        assert_eq!(got.value.data()[0], first.value.data()[0] as f32);
    }
}
