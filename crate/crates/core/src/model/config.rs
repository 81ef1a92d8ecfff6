use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};

/// How EdgeConv combines the per-edge features of one point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Max,
}

/// Which task losses take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskMask {
    pub clustering: bool,
    pub classification: bool,
    pub reconstruction: bool,
}

impl TaskMask {
    pub const ALL: TaskMask = TaskMask {
        clustering: true,
        classification: true,
        reconstruction: true,
    };

    pub fn any(&self) -> bool {
        self.clustering || self.classification || self.reconstruction
    }

    /// Parses a comma-separated task list such as `clustering,reconstruction`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut m = TaskMask {
            clustering: false,
            classification: false,
            reconstruction: false,
        };
        for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match t {
                "clustering" | "kmeans" => m.clustering = true,
                "classification" | "ce" => m.classification = true,
                "reconstruction" | "chamfer" => m.reconstruction = true,
                "all" => m = TaskMask::ALL,
                other => return Err(config_err!("unknown task {:?}", other)),
            }
        }
        if !m.any() {
            return Err(config_err!("task mask {:?} enables no task", s));
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.clustering {
            parts.push("clustering");
        }
        if self.classification {
            parts.push("classification");
        }
        if self.reconstruction {
            parts.push("reconstruction");
        }
        parts.join(",")
    }
}

impl Default for TaskMask {
    fn default() -> Self {
        TaskMask::ALL
    }
}

/// Architecture of the encoder and the three task heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Coordinates per input point.
    pub d_in: usize,
    /// Points per cloud.
    pub m: usize,
    /// Neighbour counts of the parallel EdgeConv branches.
    pub k_list: Vec<usize>,
    /// Output channels of each EdgeConv edge MLP.
    pub edge_width: usize,
    /// Output channels of the per-point 1×1 convolution of the raw point.
    pub point_conv_width: usize,
    /// Shared per-point layers after the concatenation; the last entry is
    /// the pre-pool point-feature width.
    pub conv_widths: Vec<usize>,
    /// Hidden layers of the shape MLP applied after max-pooling.
    pub shape_mlp_widths: Vec<usize>,
    pub d_shape: usize,
    pub d_point: usize,
    /// Upper bound on the number of clusters.
    pub k_ub: usize,
    pub classifier_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub dropout_p: f64,
    pub aggregation: Aggregation,
    pub task_mask: TaskMask,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-size network: 2048 points, k ∈ {15, 20, 25}, 512-d shape and
    /// 1024-d point features, 500 clusters.
    pub fn full() -> Self {
        Self {
            d_in: 3,
            m: 2048,
            k_list: vec![15, 20, 25],
            edge_width: 64,
            point_conv_width: 64,
            conv_widths: vec![128, 256, 512],
            shape_mlp_widths: vec![512],
            d_shape: 512,
            d_point: 1024,
            k_ub: 500,
            classifier_widths: vec![2048, 1024],
            decoder_widths: vec![2048, 1024],
            dropout_p: 0.5,
            aggregation: Aggregation::Sum,
            task_mask: TaskMask::ALL,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// The full-size network scaled by 1/8 for a single CPU core.
    pub fn desk() -> Self {
        Self {
            d_in: 3,
            m: 256,
            k_list: vec![8, 12, 16],
            edge_width: 8,
            point_conv_width: 8,
            conv_widths: vec![16, 32, 64],
            shape_mlp_widths: vec![64],
            d_shape: 64,
            d_point: 128,
            k_ub: 32,
            classifier_widths: vec![256, 128],
            decoder_widths: vec![256, 128],
            dropout_p: 0.5,
            aggregation: Aggregation::Sum,
            task_mask: TaskMask::ALL,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn k_max(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(0)
    }

    pub fn pre_pool_width(&self) -> usize {
        self.conv_widths.last().copied().unwrap_or(0)
    }

    /// Width of the concatenated per-point feature entering the conv stack.
    pub fn concat_width(&self) -> usize {
        self.k_list.len() * self.edge_width + self.d_in + self.point_conv_width
    }

    pub fn decoder_out(&self) -> usize {
        self.m * self.d_in
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in != 3 {
            return Err(config_err!("only 3-d input points are supported, got d_in={}", self.d_in));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(config_err!("k_list must hold positive neighbour counts"));
        }
        if self.k_max() >= self.m {
            return Err(config_err!("largest k {} must be below m {}", self.k_max(), self.m));
        }
        if self.conv_widths.is_empty() {
            return Err(config_err!("conv_widths must not be empty"));
        }
        let widths = [self.edge_width, self.point_conv_width, self.d_shape, self.k_ub];
        if widths.contains(&0)
            || self.conv_widths.contains(&0)
            || self.shape_mlp_widths.contains(&0)
            || self.classifier_widths.contains(&0)
            || self.decoder_widths.contains(&0)
        {
            return Err(config_err!("layer widths must be positive"));
        }
        if self.d_point != self.pre_pool_width() + self.d_shape {
            return Err(config_err!(
                "d_point {} must equal pre-pool width {} + d_shape {}",
                self.d_point,
                self.pre_pool_width(),
                self.d_shape
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !self.task_mask.any() {
            return Err(config_err!("task mask disables every head: nothing to train"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(config_err!("invalid batch-norm constants"));
        }
        Ok(())
    }

    /// Number of trainable scalars implied by this configuration.
    pub fn parameter_count(&self) -> usize {
        // matmul weights, plus bias for linear outputs or scale+shift for bn layers
        let bn_layer = |i: usize, o: usize| i * o + 2 * o;
        let linear = |i: usize, o: usize| i * o + o;
        let mut n = self.k_list.len() * bn_layer(2 * self.d_in, self.edge_width);
        n += bn_layer(self.d_in, self.point_conv_width);
        let mut width = self.concat_width();
        for &w in &self.conv_widths {
            n += bn_layer(width, w);
            width = w;
        }
        for &w in &self.shape_mlp_widths {
            n += bn_layer(width, w);
            width = w;
        }
        n += linear(width, self.d_shape);
        let head = |widths: &[usize], out: usize| {
            let mut n = 0;
            let mut width = self.d_shape;
            for &w in widths {
                n += bn_layer(width, w);
                width = w;
            }
            n + linear(width, out)
        };
        n + head(&self.classifier_widths, self.k_ub) + head(&self.decoder_widths, self.decoder_out())
    }

    /// Stable 64-bit digest of the configuration.
    pub fn config_hash(&self) -> u64 {
        let text = toml::to_string(self).expect("model config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
