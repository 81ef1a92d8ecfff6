//! Text outputs.
//!
//! Embeddings: a header `id\tlabel\tf0\t...\tf{d-1}` followed by one
//! tab-separated record per cloud; the label is the category id or `-1`,
//! floats are written with 17 significant digits.
//!
//! Reports: one `metric\tvalue` line per metric.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::shape_features;
use crate::error::{Error, Result};
use crate::geometry::{Dataset, PointCloud};
use crate::model::Model;
use crate::tensor::ParameterStore;

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes the eval-mode shape feature of every cloud in `ds`. Returns the
/// number of records.
pub fn export_embeddings(ds: &Dataset, model: &Model, store: &ParameterStore, path: &Path) -> Result<usize> {
    let clouds: Vec<&PointCloud> = ds.clouds.iter().collect();
    let feats = shape_features(model, store, &clouds)?;
    let d = model.cfg.d_shape;
    let mut out = String::from("id\tlabel");
    for j in 0..d {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    for (i, (id, cloud)) in ds.ids.iter().zip(&ds.clouds).enumerate() {
        out.push_str(id);
        match cloud.shape_label {
            Some(l) => {
                let _ = write!(out, "\t{l}");
            }
            None => out.push_str("\t-1"),
        }
        for v in feats.row(i) {
            let _ = write!(out, "\t{v:.16e}");
        }
        out.push('\n');
    }
    write_file(path, &out)?;
    Ok(ds.len())
}

/// Writes `metric\tvalue` lines.
pub fn write_report(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut out = String::new();
    for (name, value) in metrics {
        let _ = writeln!(out, "{name}\t{value}");
    }
    write_file(path, &out)
}
