//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "PMTLCKPT" | version u32 | model config hash u64 | parameter count u64
//! train config (TOML, length-prefixed)
//! epoch u64 | optimizer step u64 | rng seed [u8; 32] | rng stream u64 | rng word u128
//! parameters: count, then per parameter name, shape, value, Adam m, Adam v
//! batch-norm statistics: count, then per layer name, mean, var
//! centroids: rows, cols, values
//! last assignments: count, u64 each
//! history: count, then per epoch the fields of EpochStats
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{EpochStats, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::ClusterState;
use crate::rng::StreamState;
use crate::tensor::{ParameterStore, RunningStats, Tensor};

const MAGIC: &[u8; 8] = b"PMTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.0.push(v.is_some() as u8);
        self.f64(v.unwrap_or(0.0));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Incompatible("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Incompatible("length overflows usize".into()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Incompatible("checkpoint is truncated".into()));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let flag = self.u8()?;
        let v = self.f64()?;
        Ok((flag != 0).then_some(v))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Incompatible("checkpoint holds invalid UTF-8".into()))
    }
}

fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.cfg.model.config_hash());
    w.usize(state.params.scalar_count());
    let toml = toml::to_string(&state.cfg).map_err(|e| Error::State(format!("cannot serialize config: {e}")))?;
    w.str(&toml);
    w.usize(state.epoch);
    w.u64(state.params.step);
    let rng = StreamState::capture(&state.rng);
    w.0.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.0.extend_from_slice(&rng.word_pos.to_le_bytes());

    w.usize(state.params.len());
    for (name, p) in state.params.params() {
        w.str(name);
        w.usize(p.value.rank());
        p.value.shape().iter().for_each(|&d| w.usize(d));
        w.f64s(p.value.data());
        w.f64s(&p.m);
        w.f64s(&p.v);
    }
    let stats: Vec<_> = state.params.stats().collect();
    w.usize(stats.len());
    for (name, s) in stats {
        w.str(name);
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.usize(state.clusters.k());
    w.usize(state.clusters.dim());
    state.clusters.centroids.data().iter().for_each(|&v| w.f64(v));
    w.usize(state.last_assignments.len());
    state.last_assignments.iter().for_each(|&a| w.u64(a as u64));
    w.usize(state.history.len());
    for h in &state.history {
        w.usize(h.epoch);
        w.f64(h.lr);
        w.f64(h.loss);
        w.opt_f64(h.kmeans);
        w.opt_f64(h.ce);
        w.opt_f64(h.chamfer);
        w.usize(h.non_empty);
        w.opt_f64(h.nmi);
        w.u64(h.centroid_hash);
        w.usize(h.assignments_changed);
    }
    Ok(w.0)
}

/// Writes `state` to `path` through a temporary file, so an interrupted
/// write leaves any previous checkpoint intact.
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, verifying the format version, the configuration hash
/// and the parameter count.
pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Incompatible(m) => Error::Incompatible(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Like [`checkpoint_load`] but also requires the stored model to match
/// `expected`.
pub fn checkpoint_load_for(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    let state = checkpoint_load(path)?;
    if state.cfg.model.config_hash() != expected.config_hash() {
        return Err(Error::Incompatible(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(state)
}

fn decode(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Incompatible("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hash = r.u64()?;
    let count = r.usize()?;
    let cfg: TrainConfig = toml::from_str(&r.str()?)
        .map_err(|e| Error::Incompatible(format!("stored configuration does not parse: {e}")))?;
    if cfg.model.config_hash() != hash {
        return Err(Error::Incompatible("configuration hash does not match the stored configuration".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    if cfg.model.parameter_count() != count {
        return Err(Error::Incompatible(format!(
            "header records {count} parameters, the configuration implies {}",
            cfg.model.parameter_count()
        )));
    }
    let epoch = r.usize()?;
    let step = r.u64()?;
    let rng = StreamState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    }
    .restore();

    let mut params = ParameterStore::new();
    params.step = step;
    for _ in 0..r.len(1)? {
        let name = r.str()?;
        let rank = r.len(8)?;
        let shape: Vec<usize> = (0..rank).map(|_| r.usize()).collect::<Result<_>>()?;
        let value = Tensor::new(shape, r.f64s()?).map_err(|e| Error::Incompatible(format!("{name}: {e}")))?;
        let (m, v) = (r.f64s()?, r.f64s()?);
        if m.len() != value.numel() || v.len() != value.numel() {
            return Err(Error::Incompatible(format!("optimizer state of {name} has the wrong size")));
        }
        params.insert(name.clone(), value)?;
        let p = params.get_mut(&name)?;
        p.m = m;
        p.v = v;
    }
    for _ in 0..r.len(1)? {
        let name = r.str()?;
        let stats = RunningStats {
            mean: r.f64s()?,
            var: r.f64s()?,
        };
        params.insert_stats(name, stats)?;
    }
    if params.scalar_count() != count {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {} parameters, header says {count}",
            params.scalar_count()
        )));
    }
    let (k, d) = (r.usize()?, r.usize()?);
    let n = k
        .checked_mul(d)
        .filter(|&n| n.saturating_mul(8) <= buf.len())
        .ok_or_else(|| Error::Incompatible("centroid block is too large".into()))?;
    let centroids = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let clusters = ClusterState::new(Tensor::new(vec![k, d], centroids)?)?;
    let last_assignments = (0..r.len(8)?)
        .map(|_| r.u64().map(|a| a as usize))
        .collect::<Result<_>>()?;
    let mut history = Vec::new();
    for _ in 0..r.len(1)? {
        history.push(EpochStats {
            epoch: r.usize()?,
            lr: r.f64()?,
            loss: r.f64()?,
            kmeans: r.opt_f64()?,
            ce: r.opt_f64()?,
            chamfer: r.opt_f64()?,
            non_empty: r.usize()?,
            nmi: r.opt_f64()?,
            centroid_hash: r.u64()?,
            assignments_changed: r.usize()?,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Incompatible("trailing bytes after checkpoint".into()));
    }
    let mut state = TrainState {
        cfg,
        model,
        params,
        clusters,
        epoch,
        rng,
        history,
        last_assignments,
    };
    state.refreeze();
    Ok(state)
}
