//! Point clouds, preprocessing, neighbour search and datasets.

mod io;
mod kdtree;
mod synth;
mod transform;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{validation_err, Error, Result};

pub use io::{load_cloud, load_dataset, save_dataset, MANIFEST_NAME};
pub use kdtree::{knn, knn_bruteforce, KdTree, NeighborIndex};
pub use synth::{sample_surface, synth_dataset, synth_generate, ShapeKind};
pub use transform::{
    augment, normalize_unit_sphere, rotation_matrix, sample_points, AugmentConfig, Normalized,
};

pub type Point = [f64; 3];

/// An ordered list of points with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub shape_label: Option<usize>,
    pub part_labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            shape_label: None,
            part_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(validation_err!("point {} has a non-finite coordinate", i));
        }
        if let Some(parts) = &self.part_labels {
            if parts.len() != self.points.len() {
                return Err(validation_err!(
                    "{} part labels for {} points",
                    parts.len(),
                    self.points.len()
                ));
            }
        }
        Ok(())
    }

    /// Coordinates as a flat row-major `M × 3` buffer.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn with_points(&self, points: Vec<Point>) -> Self {
        Self {
            points,
            shape_label: self.shape_label,
            part_labels: self.part_labels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(validation_err!("unknown split {:?}", other)),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A labelled collection of clouds with a train/val/test assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub clouds: Vec<PointCloud>,
    pub splits: Vec<Split>,
    pub category_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.clouds.len() || self.splits.len() != self.clouds.len() {
            return Err(validation_err!("dataset columns have different lengths"));
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if !seen.insert(id) {
                return Err(validation_err!("cloud {} is listed more than once", id));
            }
        }
        for (id, cloud) in self.ids.iter().zip(&self.clouds) {
            cloud
                .validate()
                .map_err(|e| validation_err!("cloud {}: {}", id, e))?;
            if let Some(label) = cloud.shape_label {
                if label >= self.category_names.len() {
                    return Err(validation_err!("cloud {} has unknown category {}", id, label));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn clouds_in(&self, split: Split) -> Vec<&PointCloud> {
        self.indices(split).into_iter().map(|i| &self.clouds[i]).collect()
    }

    /// Shape labels of a split, `None` if any cloud is unlabelled.
    pub fn labels_in(&self, split: Split) -> Option<Vec<usize>> {
        self.clouds_in(split).iter().map(|c| c.shape_label).collect()
    }
}
