use std::fs;
use std::path::{Path, PathBuf};

use pointmtl::evaluation::{PointProbeConfig, ProbeConfig};
use pointmtl::trainer::TrainConfig;
use pointmtl::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything that affects the results of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset manifest. Point files resolve against its directory.
    pub data: PathBuf,
    /// Receives the checkpoint, metrics log, resolved config and reports.
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/manifest.tsv"),
            out_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub point_probe: PointProbeConfig,
    /// Clusters formed by the zero-shot protocol; 0 uses the category count.
    pub zeroshot_clusters: usize,
    /// Additional cluster counts reported by the zero-shot protocol.
    pub zeroshot_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            point_probe: PointProbeConfig::default(),
            zeroshot_clusters: 0,
            zeroshot_sweep: vec![2, 8, 16],
        }
    }
}

impl RunConfig {
    pub fn full() -> Self {
        Self {
            train: TrainConfig::full(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let pp = &self.eval.point_probe;
        if !(pp.fraction > 0.0 && pp.fraction <= 1.0) {
            return Err(Error::Config(format!("point probe fraction must be in (0, 1], got {}", pp.fraction)));
        }
        Ok(())
    }
}
