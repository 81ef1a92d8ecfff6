//! Exact k-nearest-neighbour search.
//!
//! Candidates are ordered by `(squared distance, index)`, so ties resolve to
//! the lower index and the result matches a sorted brute-force scan exactly.

use crate::error::{validation_err, Result};

const LEAF_SIZE: usize = 8;

/// `k` neighbour ids per query point, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Keeps the first `k` neighbours of every row. Rows are sorted by
    /// distance, so this is the `k`-NN graph of the same points.
    pub fn truncate(&self, k: usize) -> NeighborIndex {
        assert!(k <= self.k);
        let indices = (0..self.rows())
            .flat_map(|i| self.row(i)[..k].iter().copied())
            .collect();
        NeighborIndex { k, indices }
    }
}

#[inline]
fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let t = a[d] - b[d];
        s += t * t;
    }
    s
}

#[inline]
fn before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed point slice.
pub struct KdTree<'a, const D: usize> {
    points: &'a [[f64; D]],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a, const D: usize> KdTree<'a, D> {
    pub fn build(points: &'a [[f64; D]]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split along the widest extent
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            for d in 0..D {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let dim = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
        });
        let value = points[self.order[mid]][dim];
        self.nodes.push(Node::Split {
            dim,
            value,
            left: 0,
            right: 0,
        });
        // left holds order[start..mid] (coords <= value), right order[mid..end] (>= value)
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    /// The `k` nearest points to `query`, skipping index `exclude`.
    /// Returns `(squared distance, index)` pairs in ascending order.
    pub fn nearest_k(&self, query: &[f64; D], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, exclude, &mut best);
        }
        best
    }

    pub fn nearest(&self, query: &[f64; D]) -> Option<(f64, usize)> {
        self.nearest_k(query, 1, None).into_iter().next()
    }

    fn search(
        &self,
        node: usize,
        query: &[f64; D],
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = (dist2(query, &self.points[i]), i);
                    if best.len() == k && !before(cand, best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|&b| before(b, cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, best);
                // visit on equality: an equal-distance point in the far half
                // may still win on index
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }
}

/// Exact `k`-NN graph of `points`, self excluded.
pub fn knn<const D: usize>(points: &[[f64; D]], k: usize) -> Result<NeighborIndex> {
    check_k(points.len(), k)?;
    let tree = KdTree::build(points);
    let mut indices = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        indices.extend(tree.nearest_k(p, k, Some(i)).into_iter().map(|(_, j)| j));
    }
    Ok(NeighborIndex { k, indices })
}

/// Reference double loop for [`knn`].
pub fn knn_bruteforce<const D: usize>(points: &[[f64; D]], k: usize) -> Result<NeighborIndex> {
    check_k(points.len(), k)?;
    let mut indices = Vec::with_capacity(points.len() * k);
    for (i, p) in points.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| (dist2(p, q), j))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        indices.extend(all[..k].iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, indices })
}

fn check_k(m: usize, k: usize) -> Result<()> {
    if k == 0 || k >= m {
        return Err(validation_err!("k-NN needs 0 < k < M, got k={} for M={}", k, m));
    }
    Ok(())
}
