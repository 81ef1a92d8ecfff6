//! Measurement protocols for learned features.

mod ahc;
mod export;
mod probe;
mod segmentation;

use std::collections::BTreeMap;

pub use ahc::{ahc_cluster, ahc_oracle};
pub use export::{export_embeddings, write_report};
pub use probe::{linear_probe, ProbeConfig};
pub use segmentation::{point_probe, MiouSummary, PointProbeConfig, SegmentationSample};

use crate::error::{validation_err, Result};
use crate::geometry::PointCloud;
use crate::model::Model;
use crate::tensor::{ParameterStore, Tensor};

/// Classification outcome of a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy per true class present in the test set.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// `confusion[truth][predicted]` over labels `0..n`.
    pub confusion: Vec<Vec<usize>>,
    pub segmentation: Option<MiouSummary>,
}

impl ProbeResult {
    pub(crate) fn from_predictions(truth: &[usize], pred: &[usize]) -> Self {
        let n = truth.iter().chain(pred).copied().max().map_or(0, |m| m + 1);
        let mut confusion = vec![vec![0; n]; n];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = (0..n)
            .filter_map(|c| {
                let total: usize = confusion[c].iter().sum();
                (total > 0).then(|| (c, confusion[c][c] as f64 / total as f64))
            })
            .collect();
        Self {
            accuracy: if truth.is_empty() {
                0.0
            } else {
                correct as f64 / truth.len() as f64
            },
            per_class_accuracy,
            confusion,
            segmentation: None,
        }
    }
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(validation_err!("partitions have {} and {} samples", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(validation_err!("partitions are empty"));
    }
    Ok(())
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2·I(a;b) / (H(a) + H(b))`, or 0 when both
/// partitions are a single group.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b)?;
    let n = a.len() as f64;
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    let mut joint = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0usize) += 1;
        *cb.entry(y).or_insert(0usize) += 1;
        *joint.entry((x, y)).or_insert(0usize) += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha + hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[&x] as f64 / n;
            let py = cb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Fraction of samples whose cluster's modal true label equals their own.
/// Modal ties go to the smaller label.
pub fn majority_vote_accuracy(clusters: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(clusters, truth)?;
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &t) in clusters.iter().zip(truth) {
        *table.entry(c).or_default().entry(t).or_insert(0) += 1;
    }
    let correct: usize = table
        .values()
        .map(|counts| {
            // first maximum in ascending label order
            counts
                .iter()
                .fold((0, usize::MAX), |best, (&l, &n)| if n > best.0 { (n, l) } else { best })
                .0
        })
        .sum();
    Ok(correct as f64 / truth.len() as f64)
}

/// Mean IoU over the parts present in `gt` or `pred` of one shape.
pub fn shape_miou(gt: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(gt, pred)?;
    let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
    let mut union: BTreeMap<usize, usize> = BTreeMap::new();
    for (&g, &p) in gt.iter().zip(pred) {
        *union.entry(g).or_insert(0) += 1;
        if g == p {
            *inter.entry(g).or_insert(0) += 1;
        } else {
            *union.entry(p).or_insert(0) += 1;
        }
    }
    let total: f64 = union
        .iter()
        .map(|(part, &u)| inter.get(part).copied().unwrap_or(0) as f64 / u as f64)
        .sum();
    Ok(total / union.len() as f64)
}

/// Eval-mode shape features of `clouds` as an `n × d_shape` matrix.
pub fn shape_features(model: &Model, store: &ParameterStore, clouds: &[&PointCloud]) -> Result<Tensor> {
    let out = model.encode_frozen(store, clouds, 16)?;
    let d = model.cfg.d_shape;
    let data = out.into_iter().flat_map(|o| o.shape_feature).collect();
    Tensor::new(vec![clouds.len(), d], data)
}

/// Standardizes columns with the mean and standard deviation of `train`;
/// constant columns are only centred.
pub(crate) fn standardize(train: &Tensor, others: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, d) = train.dims2()?;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n.max(1) as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let apply = |t: &Tensor| -> Result<Tensor> {
        let (rows, cols) = t.dims2()?;
        if cols != d {
            return Err(validation_err!("feature width {} differs from training width {}", cols, d));
        }
        let mut out = t.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *x = (*x - m) * s;
            }
        }
        Ok(out)
    };
    let rest = others.iter().map(|t| apply(t)).collect::<Result<_>>()?;
    Ok((apply(train)?, rest))
}
