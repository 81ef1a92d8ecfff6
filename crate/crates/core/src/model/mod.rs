//! Multi-scale EdgeConv encoder and the classification and reconstruction
//! heads.
//!
//! Per point the encoder concatenates three EdgeConv features (one per
//! neighbour count), the raw coordinates and a 1×1 convolution of them. A
//! stack of shared per-point layers maps this to the pre-pool feature; a max
//! pool over points followed by the shape MLP gives the shape feature, and
//! the pre-pool feature concatenated with the shape feature is the final
//! point feature.

mod config;
mod layers;

use rayon::prelude::*;

pub use config::{Aggregation, ModelConfig, TaskMask};
pub use layers::{aggregate_edges, edge_conv, edge_features, Forward};

use crate::error::{validation_err, Result};
use crate::geometry::{knn, NeighborIndex, PointCloud};
use crate::rng::{stream, Stream};
use crate::tensor::{BatchNormConfig, Mode, ParameterStore, RunningStats, Tensor, Var};
use layers::uniform;


pub const ENCODER: &str = "encoder";
pub const CLASSIFIER: &str = "classifier";
pub const DECODER: &str = "decoder";

/// Points of several clouds stacked row-wise with their k-NN graph.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    /// `[clouds · m, 3]`.
    pub points: Tensor,
    /// Neighbour rows index into `points` (already offset per cloud).
    pub neighbors: NeighborIndex,
    pub clouds: usize,
    pub m: usize,
}

impl EncoderBatch {
    /// Stacks the clouds and builds each cloud's `k_max`-NN graph from its
    /// own coordinates.
    pub fn new(clouds: &[&PointCloud], cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.m;
        if let Some(c) = clouds.iter().find(|c| c.len() != m) {
            return Err(validation_err!("encoder expects {} points per cloud, got {}", m, c.len()));
        }
        let k = cfg.k_max();
        let graphs: Vec<NeighborIndex> = clouds
            .par_iter()
            .map(|c| knn(&c.points, k))
            .collect::<Result<_>>()?;
        let mut indices = Vec::with_capacity(clouds.len() * m * k);
        for (ci, nn) in graphs.iter().enumerate() {
            indices.extend(nn.indices.iter().map(|&j| j + ci * m));
        }
        let data: Vec<f64> = clouds.iter().flat_map(|c| c.flat()).collect();
        Ok(Self {
            points: Tensor::new(vec![clouds.len() * m, 3], data)?,
            neighbors: NeighborIndex { k, indices },
            clouds: clouds.len(),
            m,
        })
    }
}

/// Graph handles produced by [`Model::encode`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[clouds · m, pre_pool_width]`.
    pub pre_pool: Var,
    /// `[clouds, d_shape]`.
    pub shape: Var,
    /// `[clouds · m, d_point]`.
    pub point: Var,
}

/// Frozen features of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Row-major `m × d_point`.
    pub point_features: Tensor,
    pub shape_feature: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Forward-pass context using this model's batch-norm constants.
    pub fn forward<'a>(
        &self,
        store: &'a ParameterStore,
        mode: Mode,
        trainable: bool,
        rng: &'a mut Stream,
    ) -> Forward<'a> {
        let mut fw = Forward::new(store, mode, trainable, rng);
        fw.bn = BatchNormConfig {
            momentum: self.cfg.bn_momentum,
            eps: self.cfg.bn_eps,
        };
        fw
    }

    /// Randomly initialized parameters and fresh batch-norm statistics.
    pub fn init_params(&self, rng: &mut Stream) -> ParameterStore {
        let c = &self.cfg;
        let mut store = ParameterStore::new();
        let mut bn_layer = |store: &mut ParameterStore, name: &str, fan_in: usize, out: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            store
                .insert(format!("{name}.weight"), uniform(&[fan_in, out], bound, rng))
                .unwrap();
            store
                .insert(format!("{name}.bn.gamma"), Tensor::full(&[out], 1.0))
                .unwrap();
            store
                .insert(format!("{name}.bn.beta"), Tensor::zeros(&[out]))
                .unwrap();
            store
                .insert_stats(format!("{name}.bn"), RunningStats::new(out))
                .unwrap();
        };
        for i in 0..c.k_list.len() {
            bn_layer(&mut store, &format!("{ENCODER}.edge{i}"), 2 * c.d_in, c.edge_width);
        }
        bn_layer(&mut store, &format!("{ENCODER}.point"), c.d_in, c.point_conv_width);
        let mut width = c.concat_width();
        for (j, &w) in c.conv_widths.iter().enumerate() {
            bn_layer(&mut store, &format!("{ENCODER}.conv{j}"), width, w);
            width = w;
        }
        for (j, &w) in c.shape_mlp_widths.iter().enumerate() {
            bn_layer(&mut store, &format!("{ENCODER}.shape{j}"), width, w);
            width = w;
        }
        let shape_in = width;
        let head_hidden = |store: &mut ParameterStore,
                           bn_layer: &mut dyn FnMut(&mut ParameterStore, &str, usize, usize),
                           prefix: &str,
                           widths: &[usize]| {
            let mut width = c.d_shape;
            for (j, &w) in widths.iter().enumerate() {
                bn_layer(store, &format!("{prefix}.fc{j}"), width, w);
                width = w;
            }
            width
        };
        let cls_in = head_hidden(&mut store, &mut bn_layer, CLASSIFIER, &c.classifier_widths);
        let dec_in = head_hidden(&mut store, &mut bn_layer, DECODER, &c.decoder_widths);
        for (name, fan_in, out) in [
            (format!("{ENCODER}.shape_out"), shape_in, c.d_shape),
            (format!("{CLASSIFIER}.out"), cls_in, c.k_ub),
            (format!("{DECODER}.out"), dec_in, c.decoder_out()),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store
                .insert(format!("{name}.weight"), uniform(&[fan_in, out], bound, rng))
                .unwrap();
            store
                .insert(format!("{name}.bias"), uniform(&[out], bound, rng))
                .unwrap();
        }
        store
    }

    /// Encodes a batch of clouds.
    pub fn encode(&self, fw: &mut Forward, batch: &EncoderBatch) -> Result<EncoderVars> {
        let c = &self.cfg;
        if batch.m != c.m {
            return Err(validation_err!("encoder expects {} points per cloud, got {}", c.m, batch.m));
        }
        let x = fw.g.constant(batch.points.clone());
        let mut parts = Vec::with_capacity(c.k_list.len() + 2);
        for (i, &k) in c.k_list.iter().enumerate() {
            let nn = if k == batch.neighbors.k {
                batch.neighbors.clone()
            } else {
                batch.neighbors.truncate(k)
            };
            let edges = edge_features(&mut fw.g, x, &nn)?;
            let h = fw.dense_bn_relu(&format!("{ENCODER}.edge{i}"), edges)?;
            let feat = aggregate_edges(&mut fw.g, h, k, c.aggregation)?;
            parts.push(feat);
        }
        parts.push(x);
        parts.push(fw.dense_bn_relu(&format!("{ENCODER}.point"), x)?);
        let mut h = fw.g.concat(&parts, 1)?;
        for j in 0..c.conv_widths.len() {
            h = fw.dense_bn_relu(&format!("{ENCODER}.conv{j}"), h)?;
        }
        let pre_pool = h;
        let p = c.pre_pool_width();
        let grouped = fw.g.reshape(pre_pool, &[batch.clouds, batch.m, p])?;
        let mut s = fw.g.max(grouped, 1)?;
        for j in 0..c.shape_mlp_widths.len() {
            s = fw.dense_bn_relu(&format!("{ENCODER}.shape{j}"), s)?;
        }
        let shape = fw.linear(&format!("{ENCODER}.shape_out"), s)?;
        let owner: Vec<usize> = (0..batch.clouds)
            .flat_map(|ci| std::iter::repeat(ci).take(batch.m))
            .collect();
        let broadcast = fw.g.gather_rows(shape, &owner)?;
        let point = fw.g.concat(&[pre_pool, broadcast], 1)?;
        Ok(EncoderVars {
            pre_pool,
            shape,
            point,
        })
    }

    /// Cluster-id logits `[clouds, k_ub]` from shape features.
    pub fn classify(&self, fw: &mut Forward, shape: Var) -> Result<Var> {
        let mut h = shape;
        for j in 0..self.cfg.classifier_widths.len() {
            h = fw.dense_bn_relu(&format!("{CLASSIFIER}.fc{j}"), h)?;
            h = fw.dropout(h, self.cfg.dropout_p)?;
        }
        fw.linear(&format!("{CLASSIFIER}.out"), h)
    }

    /// Reconstructed points `[clouds · m, 3]` from shape features.
    pub fn decode(&self, fw: &mut Forward, shape: Var) -> Result<Var> {
        let clouds = fw.g.shape(shape)[0];
        let mut h = shape;
        for j in 0..self.cfg.decoder_widths.len() {
            h = fw.dense_bn_relu(&format!("{DECODER}.fc{j}"), h)?;
        }
        let out = fw.linear(&format!("{DECODER}.out"), h)?;
        fw.g.reshape(out, &[clouds * self.cfg.m, self.cfg.d_in])
    }

    /// Eval-mode features of `clouds`, processed `batch_size` at a time in
    /// parallel. Results do not depend on the batch size.
    pub fn encode_frozen(
        &self,
        store: &ParameterStore,
        clouds: &[&PointCloud],
        batch_size: usize,
    ) -> Result<Vec<EncoderOutput>> {
        let chunks: Vec<&[&PointCloud]> = clouds.chunks(batch_size.max(1)).collect();
        let out: Vec<Vec<EncoderOutput>> = chunks
            .par_iter()
            .map(|chunk| {
                let batch = EncoderBatch::new(chunk, &self.cfg)?;
                let mut rng = stream(0);
                let mut fw = self.forward(store, Mode::Eval, false, &mut rng);
                let vars = self.encode(&mut fw, &batch)?;
                let shape = fw.g.value(vars.shape);
                let point = fw.g.value(vars.point);
                let dp = self.cfg.d_point;
                let m = self.cfg.m;
                Ok((0..chunk.len())
                    .map(|i| EncoderOutput {
                        shape_feature: shape.row(i).to_vec(),
                        point_features: Tensor::new(
                            vec![m, dp],
                            point.data()[i * m * dp..(i + 1) * m * dp].to_vec(),
                        )
                        .expect("point feature block"),
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().flatten().collect())
    }
}
