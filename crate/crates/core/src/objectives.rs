//! The clustering, pseudo-label classification and Chamfer reconstruction
//! losses, and their weighted combination.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, dim_err, validation_err, Error, Result};
use crate::geometry::{KdTree, Point};
use crate::model::TaskMask;
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the clustering, classification and reconstruction losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.005,
            beta: 1.0,
            gamma: 500.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err!("loss weights must be finite and non-negative: {:?}", w));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(config_err!("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Cluster centroids and the per-epoch accumulators used to recompute them.
///
/// Centroids are stored one per row (`K × d`), the transpose of the usual
/// `d × K` centroid matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub centroids: Tensor,
    pub populations: Vec<usize>,
    /// Row-major `K × d` feature sums.
    pub sums: Vec<f64>,
}

impl ClusterState {
    pub fn new(centroids: Tensor) -> Result<Self> {
        let (k, d) = centroids.dims2()?;
        if k == 0 || d == 0 {
            return Err(validation_err!("centroid matrix {:?} is empty", centroids.shape()));
        }
        if !centroids.is_finite() {
            return Err(Error::Numeric("centroids contain a non-finite value".into()));
        }
        Ok(Self {
            centroids,
            populations: vec![0; k],
            sums: vec![0.0; k * d],
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Adds `features` (`B × d`) to the sums of their assigned clusters.
    pub fn accumulate(&mut self, features: &Tensor, assignments: &[usize]) -> Result<()> {
        let (b, d) = features.dims2()?;
        if d != self.dim() || b != assignments.len() {
            return Err(dim_err!(
                "cannot accumulate {:?} features with {} assignments into {} × {} clusters",
                features.shape(),
                assignments.len(),
                self.k(),
                self.dim()
            ));
        }
        for (i, &c) in assignments.iter().enumerate() {
            if c >= self.k() {
                return Err(validation_err!("cluster {} out of range", c));
            }
            self.populations[c] += 1;
            for (s, v) in self.sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        Ok(())
    }

    /// Replaces every populated centroid by the mean of its accumulated
    /// features, keeps empty clusters unchanged and resets the accumulators.
    /// Returns the number of populated clusters.
    pub fn update(&mut self) -> usize {
        let d = self.dim();
        let mut non_empty = 0;
        for c in 0..self.k() {
            let n = self.populations[c];
            if n == 0 {
                continue;
            }
            non_empty += 1;
            let inv = 1.0 / n as f64;
            let row = &mut self.centroids.data_mut()[c * d..(c + 1) * d];
            for (r, s) in row.iter_mut().zip(&self.sums[c * d..(c + 1) * d]) {
                *r = s * inv;
            }
        }
        self.reset_accumulators();
        non_empty
    }

    pub fn reset_accumulators(&mut self) {
        self.populations.iter_mut().for_each(|p| *p = 0);
        self.sums.iter_mut().for_each(|s| *s = 0.0);
    }

    /// Digest of the exact centroid bits.
    pub fn centroid_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for v in self.centroids.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// Nearest centroid of every row of `z` by squared Euclidean distance; ties
/// go to the lowest cluster index.
pub fn assign(z: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    let (b, d) = z.dims2()?;
    let (k, dc) = centroids.dims2()?;
    if d != dc {
        return Err(dim_err!("features have {} dims, centroids {}", d, dc));
    }
    if k == 0 {
        return Err(validation_err!("no centroids"));
    }
    Ok((0..b)
        .map(|i| {
            let zi = z.row(i);
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist: f64 = zi
                    .iter()
                    .zip(centroids.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1
        })
        .collect())
}

/// Hard assignments of `z` (`B × d`) to fixed centroids, and the K-means
/// loss `mean_n ‖z_n − c_{y_n}‖²`. Gradients flow into `z` only.
pub fn assign_clusters(g: &mut Graph, z: Var, centroids: &Tensor) -> Result<(Vec<usize>, Var)> {
    if !g.value(z).is_finite() {
        return Err(Error::Numeric("non-finite shape feature in cluster assignment".into()));
    }
    let assignments = assign(g.value(z), centroids)?;
    let b = assignments.len();
    let d = centroids.shape()[1];
    let mut target = Vec::with_capacity(b * d);
    for &c in &assignments {
        target.extend_from_slice(centroids.row(c));
    }
    let target = g.constant(Tensor::new(vec![b, d], target)?);
    let diff = g.sub(z, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    Ok((assignments, g.scale(total, 1.0 / b as f64)))
}

/// Cross-entropy of the classifier logits against the cluster assignments.
pub fn pseudo_label_loss(g: &mut Graph, logits: Var, assignments: &[usize]) -> Result<Var> {
    let (_, k) = g.value(logits).dims2()?;
    if let Some(&a) = assignments.iter().find(|&&a| a >= k) {
        return Err(validation_err!("assignment {} out of range for {} clusters", a, k));
    }
    g.softmax_cross_entropy_indices(logits, assignments)
}

fn points_of(t: &Tensor) -> Result<Vec<Point>> {
    let (n, d) = t.dims2()?;
    if d != 3 {
        return Err(dim_err!("expected 3-d points, got width {}", d));
    }
    Ok((0..n).map(|i| t.row(i).try_into().unwrap()).collect())
}

/// Index of the nearest point of `to` for each point of `from`, restricted
/// to equal-size groups of `group_from` and `group_to` consecutive rows.
fn nearest_in_groups(from: &[Point], to: &[Point], group_from: usize, group_to: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(from.len());
    for (gi, chunk) in from.chunks(group_from).enumerate() {
        let target = &to[gi * group_to..(gi + 1) * group_to];
        let tree = KdTree::build(target);
        out.extend(
            chunk
                .iter()
                .map(|p| gi * group_to + tree.nearest(p).expect("non-empty group").1),
        );
    }
    out
}

/// Mean squared distance from each row of `from` to its matched row of `to`.
fn matched_mean_sq(g: &mut Graph, from: Var, to: Var, matches: &[usize]) -> Result<Var> {
    let matched = g.gather_rows(to, matches)?;
    let diff = g.sub(from, matched)?;
    let sq = g.mul(diff, diff)?;
    let per_point = g.sum(sq, 1)?;
    g.mean(per_point, 0)
}

/// Symmetric Chamfer distance between point sets `a` (`M × 3`) and `b`
/// (`M' × 3`): half the sum of the mean squared nearest-neighbour distance
/// in each direction.
pub fn chamfer(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    chamfer_batch(g, a, b, 1)
}

/// Mean Chamfer distance over `clouds` pairs stacked row-wise: `a` holds
/// `clouds` groups of equal size, as does `b`.
pub fn chamfer_batch(g: &mut Graph, a: Var, b: Var, clouds: usize) -> Result<Var> {
    let pa = points_of(g.value(a))?;
    let pb = points_of(g.value(b))?;
    if pa.is_empty() || pb.is_empty() {
        return Err(validation_err!("chamfer distance of an empty point set"));
    }
    if clouds == 0 || pa.len() % clouds != 0 || pb.len() % clouds != 0 {
        return Err(dim_err!(
            "{} and {} points do not split into {} clouds",
            pa.len(),
            pb.len(),
            clouds
        ));
    }
    let (ma, mb) = (pa.len() / clouds, pb.len() / clouds);
    let ab = nearest_in_groups(&pa, &pb, ma, mb);
    let ba = nearest_in_groups(&pb, &pa, mb, ma);
    let da = matched_mean_sq(g, a, b, &ab)?;
    let db = matched_mean_sq(g, b, a, &ba)?;
    let sum = g.add(da, db)?;
    Ok(g.scale(sum, 0.5))
}

/// Reference Chamfer distance by exhaustive search.
pub fn chamfer_bruteforce_oracle(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(validation_err!("chamfer distance of an empty point set"));
    }
    let sq = |p: &Point, q: &Point| -> f64 { (0..3).map(|d| (p[d] - q[d]) * (p[d] - q[d])).sum() };
    let one_way = |from: &[Point], to: &[Point]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (one_way(a, b) + one_way(b, a)))
}

/// Scalar task losses of one batch; a task that was not computed is `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub kmeans: Option<Var>,
    pub ce: Option<Var>,
    pub chamfer: Option<Var>,
}

/// `α·kmeans + β·ce + γ·chamfer` over the tasks enabled by `mask`. Parts of
/// disabled tasks are ignored and receive no gradient.
pub fn combined_loss(g: &mut Graph, parts: &LossParts, weights: &LossWeights, mask: &TaskMask) -> Result<Var> {
    if !mask.any() {
        return Err(config_err!("task mask disables every objective"));
    }
    let enabled = [
        (mask.clustering, parts.kmeans, weights.alpha, "clustering"),
        (mask.classification, parts.ce, weights.beta, "classification"),
        (mask.reconstruction, parts.chamfer, weights.gamma, "reconstruction"),
    ];
    let mut total: Option<Var> = None;
    for (on, part, w, name) in enabled {
        if !on {
            continue;
        }
        let part = part.ok_or_else(|| Error::State(format!("{name} loss enabled but not computed")))?;
        let term = g.scale(part, w);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("mask enables a task"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn assignment_examples() {
        let c = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut g = Graph::new();
        let z = g.variable(t(&[&[1.0, 0.0]]));
        let (a, l) = assign_clusters(&mut g, z, &c).unwrap();
        assert_eq!((a, g.value(l).item().unwrap()), (vec![0], 0.0));
        let z = g.variable(t(&[&[0.5, 0.5]]));
        let (a, l) = assign_clusters(&mut g, z, &c).unwrap();
        assert_eq!(a, vec![0]);
        assert!((g.value(l).item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn centroid_mean_and_empty_cluster() {
        let mut s = ClusterState::new(t(&[&[5.0, 5.0], &[7.0, -1.0]])).unwrap();
        s.accumulate(&t(&[&[0.0, 0.0], &[2.0, 0.0]]), &[0, 0]).unwrap();
        assert_eq!(s.update(), 1);
        assert_eq!(s.centroids.row(0), &[1.0, 0.0]);
        assert_eq!(s.centroids.row(1), &[7.0, -1.0]);
        assert!(s.populations.iter().all(|&p| p == 0));
    }

    #[test]
    fn chamfer_examples() {
        let mut g = Graph::new();
        let a = g.variable(t(&[&[0.0, 0.0, 0.0]]));
        let b = g.variable(t(&[&[1.0, 0.0, 0.0]]));
        let c = chamfer(&mut g, a, b).unwrap();
        assert!((g.value(c).item().unwrap() - 1.0).abs() < 1e-12);
        let a = g.variable(t(&[&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]));
        let b = g.variable(t(&[&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]));
        let c = chamfer(&mut g, a, b).unwrap();
        assert!((g.value(c).item().unwrap() - 1.25).abs() < 1e-12);
        let self_c = chamfer(&mut g, a, a).unwrap();
        assert_eq!(g.value(self_c).item().unwrap(), 0.0);
    }

    #[test]
    fn empty_chamfer_is_rejected() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[0, 3]));
        let b = g.variable(t(&[&[1.0, 0.0, 0.0]]));
        assert!(matches!(chamfer(&mut g, a, b), Err(Error::Validation(_))));
        assert!(chamfer_bruteforce_oracle(&[], &[[0.0; 3]]).is_err());
    }

    #[test]
    fn combined_example() {
        let mut g = Graph::new();
        let parts = LossParts {
            kmeans: Some(g.constant(Tensor::scalar(2.0))),
            ce: Some(g.constant(Tensor::scalar(3.0))),
            chamfer: Some(g.constant(Tensor::scalar(0.004))),
        };
        let w = LossWeights::default();
        let l = combined_loss(&mut g, &parts, &w, &TaskMask::ALL).unwrap();
        assert!((g.value(l).item().unwrap() - 5.01).abs() < 1e-12);
        let rec = TaskMask::parse_list("reconstruction").unwrap();
        let l = combined_loss(&mut g, &parts, &w, &rec).unwrap();
        assert!((g.value(l).item().unwrap() - 2.0).abs() < 1e-12);
        let none = TaskMask {
            clustering: false,
            classification: false,
            reconstruction: false,
        };
        assert!(matches!(combined_loss(&mut g, &parts, &w, &none), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let logits = g.variable(Tensor::zeros(&[3, 500]));
        let l = pseudo_label_loss(&mut g, logits, &[0, 10, 499]).unwrap();
        assert!((g.value(l).item().unwrap() - 500f64.ln()).abs() < 1e-12);
        assert!(matches!(pseudo_label_loss(&mut g, logits, &[0, 1, 500]), Err(Error::Validation(_))));
        let mut peaked = Tensor::zeros(&[1, 4]);
        peaked.data_mut()[2] = 40.0;
        let logits = g.variable(peaked);
        let l = pseudo_label_loss(&mut g, logits, &[2]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-6);
    }
}
