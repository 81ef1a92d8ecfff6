//! Joint training: batch-wise parameter updates against centroids that are
//! only recomputed between epochs.

mod checkpoint;

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_load, checkpoint_load_for, checkpoint_save, FORMAT_VERSION};

use crate::error::{config_err, validation_err, Error, Result};
use crate::evaluation::nmi;
use crate::geometry::{augment, normalize_unit_sphere, sample_points, AugmentConfig, Dataset, PointCloud, Split};
use crate::model::{EncoderBatch, Forward, Model, ModelConfig, CLASSIFIER, DECODER};
use crate::objectives::{
    assign, assign_clusters, chamfer_batch, combined_loss, pseudo_label_loss, ClusterState, LossParts,
    LossWeights,
};
use crate::rng::{derive, Stream};
use crate::tensor::{Mode, ParameterStore, Tensor, Var};

/// Name of the checkpoint file inside a run directory.
pub const CHECKPOINT_NAME: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplies the learning rate every `lr_period` epochs.
    pub lr_decay: f64,
    pub lr_period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            lr_decay: 0.8,
            lr_period: 50,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    /// Full-size settings: batch 40 with the full-size network.
    pub fn full() -> Self {
        Self {
            batch_size: 40,
            model: ModelConfig::full(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_period == 0 {
            return Err(config_err!("lr decay must be in (0, 1] with a positive period"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_period) as i32)
    }
}

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-size weighted mean of the combined loss.
    pub loss: f64,
    pub kmeans: Option<f64>,
    pub ce: Option<f64>,
    pub chamfer: Option<f64>,
    /// Clusters that received at least one sample during the epoch.
    pub non_empty: usize,
    /// Agreement of the epoch's assignments with the shape labels.
    pub nmi: Option<f64>,
    /// Hash of the centroids every batch of the epoch was assigned against.
    pub centroid_hash: u64,
    /// Training clouds whose assignment differs from the previous epoch.
    pub assignments_changed: usize,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParameterStore,
    pub clusters: ClusterState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Stream,
    pub history: Vec<EpochStats>,
    /// Previous epoch's assignment per dataset index (`usize::MAX` if none).
    pub last_assignments: Vec<usize>,
}

/// Per-batch details of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub stats: EpochStats,
    pub batch_centroid_hashes: Vec<u64>,
}

/// Resamples every cloud whose size differs from `m`, then normalizes to
/// the unit sphere every cloud that is not already normalized.
pub fn conform_dataset(ds: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
    let clouds = ds
        .clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.len() == m && is_unit_normalized(c) {
                return Ok(c.clone());
            }
            let c = if c.len() == m {
                c.clone()
            } else {
                sample_points(c, m, &mut derive(seed, &[0x5a4d, i as u64]))?
            };
            Ok(normalize_unit_sphere(&c)?.cloud)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { clouds, ..ds.clone() })
}

fn is_unit_normalized(c: &PointCloud) -> bool {
    let n = c.len() as f64;
    let mut mean = [0.0; 3];
    let mut max: f64 = 0.0;
    for p in &c.points {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
        max = max.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    mean.iter().all(|v| v.abs() < 1e-9) && (max - 1.0).abs() < 1e-9
}

/// Splits `order` into batches of `size`; a trailing batch of one joins the
/// previous batch so batch norm always sees two samples.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Centroids from the augmentation-free shape features of `k_ub` random
/// clouds, drawn with replacement only when there are fewer clouds than
/// clusters.
///
/// The clouds are encoded in training mode, `batch_size` at a time, so the
/// centroids live on the same batch-normalized scale as the features they
/// are compared with during training; the running statistics are left
/// untouched. A single pick has no batch to normalize against and is
/// encoded in eval mode instead.
pub fn init_centroids(
    clouds: &[&PointCloud],
    k_ub: usize,
    model: &Model,
    params: &ParameterStore,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<ClusterState> {
    if clouds.is_empty() {
        return Err(validation_err!("cannot initialize centroids from an empty dataset"));
    }
    let picks: Vec<usize> = if clouds.len() >= k_ub {
        rand::seq::index::sample(rng, clouds.len(), k_ub).into_vec()
    } else {
        (0..k_ub).map(|_| rng.gen_range(0..clouds.len())).collect()
    };
    let d = model.cfg.d_shape;
    let mode = if picks.len() == 1 { Mode::Eval } else { Mode::Train };
    let mut data = Vec::with_capacity(k_ub * d);
    for batch in make_batches(&picks, batch_size.max(2)) {
        let chosen: Vec<&PointCloud> = batch.iter().map(|&i| clouds[i]).collect();
        let enc = EncoderBatch::new(&chosen, &model.cfg)?;
        let mut unused = derive(0, &[]);
        let mut fw = model.forward(params, mode, false, &mut unused);
        let vars = model.encode(&mut fw, &enc)?;
        data.extend_from_slice(fw.g.value(vars.shape).data());
    }
    ClusterState::new(Tensor::new(vec![k_ub, d], data)?)
}

/// Graph nodes of one batch's training objective.
pub struct BatchObjective {
    pub loss: Var,
    pub parts: LossParts,
    pub assignments: Vec<usize>,
    pub shape: Var,
}

/// Encodes `enc`, assigns against `centroids` and builds the combined loss of
/// the enabled tasks, with `target` (`B·m × 3`) as the reconstruction target.
/// Assignments are computed even when clustering is masked off.
pub fn batch_objective(
    model: &Model,
    fw: &mut Forward,
    enc: &EncoderBatch,
    target: Tensor,
    centroids: &Tensor,
    weights: &LossWeights,
) -> Result<BatchObjective> {
    let mask = model.cfg.task_mask;
    let vars = model.encode(fw, enc)?;
    let mut parts = LossParts::default();
    let assignments = if mask.clustering {
        let (a, l) = assign_clusters(&mut fw.g, vars.shape, centroids)?;
        parts.kmeans = Some(l);
        a
    } else {
        assign(fw.g.value(vars.shape), centroids)?
    };
    if mask.classification {
        let logits = model.classify(fw, vars.shape)?;
        parts.ce = Some(pseudo_label_loss(&mut fw.g, logits, &assignments)?);
    }
    if mask.reconstruction {
        let rec = model.decode(fw, vars.shape)?;
        let target = fw.g.constant(target);
        parts.chamfer = Some(chamfer_batch(&mut fw.g, rec, target, enc.clouds)?);
    }
    let loss = combined_loss(&mut fw.g, &parts, weights, &mask)?;
    Ok(BatchObjective {
        loss,
        parts,
        assignments,
        shape: vars.shape,
    })
}

fn freeze_masked_heads(model: &Model, params: &mut ParameterStore) {
    let mask = model.cfg.task_mask;
    if !mask.classification {
        params.freeze_prefix(CLASSIFIER);
    }
    if !mask.reconstruction {
        params.freeze_prefix(DECODER);
    }
}

impl TrainState {
    /// Fresh parameters and initial centroids drawn from the training split.
    pub fn new(cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let mut params = model.init_params(&mut derive(cfg.seed, &[0]));
        freeze_masked_heads(&model, &mut params);
        let train = ds.clouds_in(Split::Train);
        let clusters = init_centroids(
            &train,
            cfg.model.k_ub,
            &model,
            &params,
            cfg.batch_size,
            &mut derive(cfg.seed, &[1]),
        )?;
        Ok(Self {
            rng: derive(cfg.seed, &[2]),
            last_assignments: vec![usize::MAX; ds.len()],
            cfg,
            model,
            params,
            clusters,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Runs one pass over the training split.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<EpochReport> {
        let train_idx = ds.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(validation_err!("dataset has no training clouds"));
        }
        if self.last_assignments.len() != ds.len() {
            return Err(Error::State(format!(
                "state tracks {} clouds but the dataset has {}",
                self.last_assignments.len(),
                ds.len()
            )));
        }
        let cfg = &self.cfg;
        let mask = cfg.model.task_mask;
        let model = &self.model;
        let epoch_seed: u64 = self.rng.gen();
        let mut order = train_idx.clone();
        order.shuffle(&mut derive(epoch_seed, &[0]));
        let lr = cfg.lr_at(self.epoch);
        let centroid_hash = self.clusters.centroid_hash();
        let mut batch_hashes = Vec::new();
        let mut assigned = vec![usize::MAX; ds.len()];
        let mut sums = [0.0f64; 4];
        for (bi, batch) in make_batches(&order, cfg.batch_size).iter().enumerate() {
            let pairs: Vec<(PointCloud, PointCloud)> = batch
                .par_iter()
                .map(|&i| augment(&ds.clouds[i], &cfg.augment, &mut derive(epoch_seed, &[1, i as u64])))
                .collect();
            let noisy: Vec<&PointCloud> = pairs.iter().map(|p| &p.0).collect();
            let enc = EncoderBatch::new(&noisy, &cfg.model)?;
            let clean: Vec<f64> = pairs.iter().flat_map(|p| p.1.flat()).collect();
            let clean = Tensor::new(vec![batch.len() * cfg.model.m, 3], clean)?;

            // assignments always use the centroids frozen at the start of the epoch
            let hash = self.clusters.centroid_hash();
            if hash != centroid_hash {
                return Err(Error::State(format!("centroids changed inside epoch {}", self.epoch)));
            }
            batch_hashes.push(hash);

            let mut drop_rng = derive(epoch_seed, &[2, bi as u64]);
            let mut fw = model.forward(&self.params, Mode::Train, true, &mut drop_rng);
            let obj = batch_objective(model, &mut fw, &enc, clean, &self.clusters.centroids, &cfg.weights)?;
            let (loss, parts, assignments) = (obj.loss, obj.parts, obj.assignments);
            let shape = fw.g.value(obj.shape).clone();
            let value = fw.g.value(loss).item()?;
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| ds.ids[i].as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} in epoch {} batch {bi} (clouds {ids:?})",
                    self.epoch
                )));
            }
            let b = batch.len() as f64;
            sums[0] += value * b;
            for (s, p) in sums[1..].iter_mut().zip([parts.kmeans, parts.ce, parts.chamfer]) {
                if let Some(p) = p {
                    *s += fw.g.value(p).item()? * b;
                }
            }
            fw.g.backward(loss)?;
            let Forward {
                g,
                binder,
                stats_updates,
                ..
            } = fw;
            self.params.accumulate_grads(&g, &binder.bound)?;
            self.params.adam_step(lr)?;
            Forward::commit_stats(stats_updates, &mut self.params)?;
            self.clusters.accumulate(&shape, &assignments)?;
            for (&i, &a) in batch.iter().zip(&assignments) {
                assigned[i] = a;
            }
            debug!("epoch {} batch {bi}: loss {value:.6}", self.epoch);
        }
        let non_empty = self.clusters.update();
        let n = order.len() as f64;
        let labels: Option<Vec<usize>> = train_idx.iter().map(|&i| ds.clouds[i].shape_label).collect();
        let nmi_score = match labels {
            Some(labels) => {
                let a: Vec<usize> = train_idx.iter().map(|&i| assigned[i]).collect();
                Some(nmi(&a, &labels)?)
            }
            None => None,
        };
        let changed = train_idx
            .iter()
            .filter(|&&i| self.last_assignments[i] != assigned[i])
            .count();
        for &i in &train_idx {
            self.last_assignments[i] = assigned[i];
        }
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            loss: sums[0] / n,
            kmeans: mask.clustering.then(|| sums[1] / n),
            ce: mask.classification.then(|| sums[2] / n),
            chamfer: mask.reconstruction.then(|| sums[3] / n),
            non_empty,
            nmi: nmi_score,
            centroid_hash,
            assignments_changed: changed,
        };
        info!(
            "epoch {} lr {:.5} loss {:.5} clusters {} nmi {}",
            stats.epoch,
            stats.lr,
            stats.loss,
            stats.non_empty,
            stats.nmi.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        self.epoch += 1;
        self.history.push(stats.clone());
        Ok(EpochReport {
            stats,
            batch_centroid_hashes: batch_hashes,
        })
    }

    /// Trains until `cfg.epochs` epochs are complete. With `run_dir`, a
    /// checkpoint is written before the first epoch and after every epoch.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        run_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<()> {
        let save = |state: &TrainState| -> Result<()> {
            match run_dir {
                Some(dir) => checkpoint_save(state, &dir.join(CHECKPOINT_NAME)),
                None => Ok(()),
            }
        };
        if self.epoch == 0 {
            save(self)?;
        }
        while self.epoch < self.cfg.epochs {
            let report = self.train_epoch(ds)?;
            save(self)?;
            on_epoch(&report.stats);
        }
        Ok(())
    }

    /// Re-derives which heads are frozen after the parameters were replaced.
    pub(crate) fn refreeze(&mut self) {
        freeze_masked_heads(&self.model, &mut self.params);
    }
}

/// New state for `cfg` trained to completion on `ds`.
pub fn fit(ds: &Dataset, cfg: TrainConfig, run_dir: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, ds)?;
    state.fit(ds, run_dir, |_| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.003);
        assert_eq!(c.lr_at(49), 0.003);
        assert!((c.lr_at(100) - 0.00192).abs() < 1e-15);
        assert_eq!(TrainConfig::full().batch_size, 40);
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = make_batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = make_batches(&order[..6], 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
        assert_eq!(make_batches(&order[..1], 4), vec![vec![0]]);
    }
}
