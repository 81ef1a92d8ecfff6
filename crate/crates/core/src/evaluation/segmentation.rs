use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{shape_miou, standardize, ProbeResult};
use crate::error::{config_err, dim_err, validation_err, Result};
use crate::rng::{derive, Stream};
use crate::tensor::{Binder, Graph, ParameterStore, Tensor, Var};

/// Frozen per-point features of one shape with its part labels.
#[derive(Clone, Debug)]
pub struct SegmentationSample {
    /// `m × d_point`.
    pub features: Tensor,
    pub parts: Vec<usize>,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointProbeConfig {
    /// Hidden layer widths of the per-point MLP.
    pub widths: Vec<usize>,
    /// Fraction of all training points used to fit the probe.
    pub fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PointProbeConfig {
    fn default() -> Self {
        Self {
            widths: vec![256, 512, 128],
            fraction: 0.05,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Segmentation quality of a probe.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouSummary {
    /// Mean of per-shape mIoU over all test shapes.
    pub instance_miou: f64,
    /// Mean of per-category averages of per-shape mIoU.
    pub category_miou: f64,
    pub per_category_miou: BTreeMap<usize, f64>,
}

fn init_mlp(input: usize, widths: &[usize], out: usize, rng: &mut Stream) -> ParameterStore {
    use rand::Rng;
    let mut store = ParameterStore::new();
    let mut fan_in = input;
    let dims: Vec<usize> = widths.iter().copied().chain([out]).collect();
    for (j, &w) in dims.iter().enumerate() {
        let bound = if j + 1 == dims.len() {
            1.0 / (fan_in as f64).sqrt()
        } else {
            (6.0 / fan_in as f64).sqrt()
        };
        let weight = (0..fan_in * w).map(|_| rng.gen_range(-bound..=bound)).collect();
        store
            .insert(format!("fc{j}.weight"), Tensor::new(vec![fan_in, w], weight).unwrap())
            .unwrap();
        store.insert(format!("fc{j}.bias"), Tensor::zeros(&[w])).unwrap();
        fan_in = w;
    }
    store
}

fn mlp(g: &mut Graph, binder: &mut Binder, store: &ParameterStore, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for j in 0..layers {
        let w = binder.param(g, store, &format!("fc{j}.weight"))?;
        let b = binder.param(g, store, &format!("fc{j}.bias"))?;
        let z = g.matmul(h, w)?;
        h = g.add(z, b)?;
        if j + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn stack_rows(rows: &[(usize, usize)], samples: &[SegmentationSample], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * d);
    for &(s, p) in rows {
        data.extend_from_slice(samples[s].features.row(p));
    }
    Tensor::new(vec![rows.len(), d], data).expect("rows have width d")
}

/// Fits a per-point MLP on a random `fraction` of the training points and
/// reports point accuracy and mIoU on `test`.
pub fn point_probe(
    train: &[SegmentationSample],
    test: &[SegmentationSample],
    cfg: &PointProbeConfig,
) -> Result<ProbeResult> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(config_err!("point probe fraction must be in (0, 1], got {}", cfg.fraction));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(config_err!("point probe batch size and learning rate must be positive"));
    }
    let d = train
        .first()
        .ok_or_else(|| validation_err!("point probe needs training shapes"))?
        .features
        .shape()[1];
    for s in train.iter().chain(test) {
        let (m, sd) = s.features.dims2()?;
        if sd != d || m != s.parts.len() {
            return Err(dim_err!(
                "shape features {:?} do not match {} labels of width {}",
                s.features.shape(),
                s.parts.len(),
                d
            ));
        }
    }
    let all: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| (0..sample.parts.len()).map(move |p| (s, p)))
        .collect();
    let take = ((all.len() as f64 * cfg.fraction).ceil() as usize).clamp(1, all.len());
    let mut rng = derive(cfg.seed, &[0]);
    let mut picked: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, all.len(), take)
        .into_iter()
        .map(|i| all[i])
        .collect();
    picked.sort_unstable();
    let label = |&(s, p): &(usize, usize)| train[s].parts[p];
    let present: BTreeSet<usize> = all.iter().map(label).collect();
    let sampled: BTreeSet<usize> = picked.iter().map(label).collect();
    if let Some(missing) = present.difference(&sampled).next() {
        return Err(validation_err!(
            "sampling {} of the training points leaves part {} without examples",
            cfg.fraction,
            missing
        ));
    }
    let n_parts = train
        .iter()
        .chain(test)
        .flat_map(|s| s.parts.iter().copied())
        .max()
        .unwrap_or(0)
        + 1;

    let x_raw = stack_rows(&picked, train, d);
    let y: Vec<usize> = picked.iter().map(label).collect();
    let test_rows: Vec<(usize, usize)> = test
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| (0..sample.parts.len()).map(move |p| (s, p)))
        .collect();
    let xt_raw = stack_rows(&test_rows, test, d);
    let (x, rest) = standardize(&x_raw, &[&xt_raw])?;
    let xt = &rest[0];

    let layers = cfg.widths.len() + 1;
    let mut store = init_mlp(d, &cfg.widths, n_parts, &mut derive(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut shuffle_rng = derive(cfg.seed, &[2]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(x.row(i));
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let mut binder = Binder::new(true);
            let xb = g.constant(Tensor::new(vec![chunk.len(), d], data)?);
            let logits = mlp(&mut g, &mut binder, &store, xb, layers)?;
            let loss = g.softmax_cross_entropy_indices(logits, &targets)?;
            g.backward(loss)?;
            store.accumulate_grads(&g, &binder.bound)?;
            store.adam_step(cfg.lr)?;
        }
    }

    let mut g = Graph::new();
    let mut binder = Binder::new(false);
    let xv = g.constant(xt.clone());
    let logits = mlp(&mut g, &mut binder, &store, xv, layers)?;
    let scores = g.value(logits);
    let pred: Vec<usize> = (0..test_rows.len())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let truth: Vec<usize> = test_rows.iter().map(|&(s, p)| test[s].parts[p]).collect();
    let mut result = ProbeResult::from_predictions(&truth, &pred);

    let mut offset = 0;
    let mut per_shape = Vec::with_capacity(test.len());
    let mut by_category: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in test {
        let n = s.parts.len();
        let iou = shape_miou(&s.parts, &pred[offset..offset + n])?;
        offset += n;
        per_shape.push(iou);
        by_category.entry(s.category).or_default().push(iou);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_category_miou: BTreeMap<usize, f64> = by_category.iter().map(|(&c, v)| (c, mean(v))).collect();
    result.segmentation = Some(MiouSummary {
        instance_miou: mean(&per_shape),
        category_miou: mean(&per_category_miou.values().copied().collect::<Vec<_>>()),
        per_category_miou,
    });
    Ok(result)
}
