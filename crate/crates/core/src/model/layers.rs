use rand::Rng;

use crate::error::{dim_err, Result};
use crate::geometry::NeighborIndex;
use crate::model::Aggregation;
use crate::rng::Stream;
use crate::tensor::{BatchNormConfig, Binder, Graph, Mode, ParameterStore, RunningStats, Tensor, Var};

/// State of one forward pass: the tape, parameter bindings and the
/// batch-norm statistics produced in train mode.
///
/// The store is only read; running-statistics updates are collected in
/// `stats_updates` and written back with [`Forward::commit_stats`].
pub struct Forward<'a> {
    pub g: Graph,
    pub store: &'a ParameterStore,
    pub binder: Binder,
    pub mode: Mode,
    pub rng: &'a mut Stream,
    pub bn: BatchNormConfig,
    pub stats_updates: Vec<(String, RunningStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParameterStore, mode: Mode, trainable: bool, rng: &'a mut Stream) -> Self {
        Self {
            g: Graph::new(),
            store,
            binder: Binder::new(trainable),
            mode,
            rng,
            bn: BatchNormConfig::default(),
            stats_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.param(&mut self.g, self.store, name)
    }

    /// `x · W` with no bias, followed by batch norm and ReLU.
    pub fn dense_bn_relu(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let h = self.g.matmul(x, w)?;
        let h = self.batch_norm(&format!("{name}.bn"), h)?;
        Ok(self.g.relu(h))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let h = self.g.matmul(x, w)?;
        self.g.add(h, b)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let mut stats = self.store.stats_get(name)?.clone();
        let y = self.g.batch_norm(x, gamma, beta, &mut stats, self.mode, self.bn)?;
        if self.mode == Mode::Train {
            self.stats_updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.g.dropout(x, p, self.mode, &mut *self.rng)
    }

    /// Writes the collected running statistics into `store`.
    pub fn commit_stats(updates: Vec<(String, RunningStats)>, store: &mut ParameterStore) -> Result<()> {
        for (name, stats) in updates {
            *store.stats_mut(&name)? = stats;
        }
        Ok(())
    }
}

/// Graph convolution over a k-NN graph.
///
/// For every point `i` the shared edge function `h` is applied to
/// `[x_i ∥ x_j − x_i]` for each neighbour `j`, and the results are combined
/// over the neighbours by `aggregation`. `neighbors` indexes rows of `x`.
pub fn edge_conv<F>(
    g: &mut Graph,
    x: Var,
    neighbors: &NeighborIndex,
    aggregation: Aggregation,
    mut h: F,
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let edge = edge_features(g, x, neighbors)?;
    let out = h(g, edge)?;
    aggregate_edges(g, out, neighbors.k, aggregation)
}

/// `[x_i ∥ x_j − x_i]` for every point `i` and neighbour `j`, as
/// `[n · k, 2c]` rows grouped by point.
pub fn edge_features(g: &mut Graph, x: Var, neighbors: &NeighborIndex) -> Result<Var> {
    let (n, _) = g.value(x).dims2()?;
    if neighbors.rows() != n {
        return Err(dim_err!(
            "neighbour index has {} rows for {} points",
            neighbors.rows(),
            n
        ));
    }
    let k = neighbors.k;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let center = g.gather_rows(x, &centers)?;
    let neigh = g.gather_rows(x, &neighbors.indices)?;
    let diff = g.sub(neigh, center)?;
    g.concat(&[center, diff], 1)
}

/// Reduces `[n · k, c]` per-edge rows to `[n, c]`.
pub fn aggregate_edges(g: &mut Graph, edges: Var, k: usize, aggregation: Aggregation) -> Result<Var> {
    let (rows, c) = g.value(edges).dims2()?;
    if k == 0 || rows % k != 0 {
        return Err(dim_err!("{} edge rows do not split into groups of {}", rows, k));
    }
    let grouped = g.reshape(edges, &[rows / k, k, c])?;
    match aggregation {
        Aggregation::Sum => g.sum(grouped, 1),
        Aggregation::Max => g.max(grouped, 1),
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        .expect("shape matches")
}
