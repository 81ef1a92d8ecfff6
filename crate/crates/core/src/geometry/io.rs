//! Plain-text dataset format.
//!
//! Manifest: one tab-separated record per line,
//! `<relpath>\t<category>\t<train|val|test>[\t<labelpath>]`. Blank lines and
//! lines starting with `#` are skipped.
//!
//! Point file: one point per line, `x y z` separated by whitespace, with an
//! optional fourth integer column holding the part label. A label file, when
//! given, holds one integer per line and takes precedence.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Point, PointCloud, Split};
use crate::error::{validation_err, Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_points(path: &Path, text: &str) -> Result<(Vec<Point>, Option<Vec<usize>>)> {
    let mut points = Vec::new();
    let mut parts = Vec::new();
    let mut with_parts = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 or 4 columns, found {}", fields.len()),
            ));
        }
        let has_part = fields.len() == 4;
        if *with_parts.get_or_insert(has_part) != has_part {
            return Err(parse_err(path, lineno, "inconsistent part-label column"));
        }
        let mut p = [0.0; 3];
        for (d, f) in fields[..3].iter().enumerate() {
            p[d] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("bad coordinate {f:?}")))?;
        }
        points.push(p);
        if has_part {
            parts.push(
                fields[3]
                    .parse::<usize>()
                    .map_err(|_| parse_err(path, lineno, format!("bad part label {:?}", fields[3])))?,
            );
        }
    }
    Ok((points, with_parts.unwrap_or(false).then_some(parts)))
}

fn parse_labels(path: &Path, text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, i + 1, format!("bad part label {:?}", l.trim())))
        })
        .collect()
}

/// Reads one point file.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let (points, parts) = parse_points(path, &read(path)?)?;
    let cloud = PointCloud {
        points,
        shape_label: None,
        part_labels: parts,
    };
    Ok(cloud)
}

/// Loads every cloud listed in `manifest` (relative paths resolve against
/// `root`). Category ids are assigned in sorted name order; cloud ids are the
/// listed paths without a `.pts` extension.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Dataset> {
    let text = read(manifest)?;
    struct Record {
        rel: String,
        category: String,
        split: Split,
        labels: Option<PathBuf>,
    }
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(parse_err(
                manifest,
                lineno,
                format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let split: Split = fields[2]
            .parse()
            .map_err(|e| validation_err!("{}:{}: {}", manifest.display(), lineno, e))?;
        records.push(Record {
            rel: fields[0].to_string(),
            category: fields[1].to_string(),
            split,
            labels: fields.get(3).map(|l| root.join(l)),
        });
    }
    let category_names: Vec<String> = records
        .iter()
        .map(|r| r.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut ds = Dataset {
        ids: Vec::with_capacity(records.len()),
        clouds: Vec::with_capacity(records.len()),
        splits: Vec::with_capacity(records.len()),
        category_names,
    };
    for r in records {
        let mut cloud = load_cloud(&root.join(&r.rel))?;
        if let Some(lp) = &r.labels {
            cloud.part_labels = Some(parse_labels(lp, &read(lp)?)?);
        }
        cloud.shape_label = ds.category_names.iter().position(|c| *c == r.category);
        let id = r.rel.strip_suffix(".pts").unwrap_or(&r.rel).to_string();
        ds.ids.push(id);
        ds.clouds.push(cloud);
        ds.splits.push(r.split);
    }
    ds.validate()?;
    Ok(ds)
}

fn format_cloud(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points.iter().enumerate() {
        // `{}` prints the shortest string that parses back to the same bits
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(parts) = &cloud.part_labels {
            let _ = write!(out, " {}", parts[i]);
        }
        out.push('\n');
    }
    out
}

/// Writes every cloud as `<root>/<id>.pts` plus a manifest at
/// `<root>/manifest.tsv`. Returns the manifest path.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<PathBuf> {
    ds.validate()?;
    let mut manifest = String::new();
    for ((id, cloud), split) in ds.ids.iter().zip(&ds.clouds).zip(&ds.splits) {
        let rel = format!("{id}.pts");
        let path = root.join(&rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, format_cloud(cloud)).map_err(|e| Error::io(&path, e))?;
        let category = cloud
            .shape_label
            .map(|l| ds.category_names[l].as_str())
            .ok_or_else(|| validation_err!("cloud {} has no category", id))?;
        let _ = writeln!(manifest, "{rel}\t{category}\t{split}");
    }
    let mpath = root.join(MANIFEST_NAME);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_a_two_point_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.pts", "0 0 0\n1 2 3");
        let c = load_cloud(&p).unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert!(c.part_labels.is_none());
    }

    #[test]
    fn bad_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.pts", "a b c\n");
        match load_cloud(&p).unwrap_err() {
            Error::Parse { file, line, .. } => {
                assert_eq!(line, 1);
                assert_eq!(file, p);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.pts", "0 0 0 1\n1 0 0 0\n");
        let m = write(dir.path(), "m.tsv", "a.pts\tcube\ttrain\na.pts\tcube\ttest\n");
        assert!(matches!(load_dataset(dir.path(), &m), Err(Error::Validation(_))));
        let m = write(dir.path(), "m2.tsv", "a.pts\tcube\tholdout\n");
        assert!(matches!(load_dataset(dir.path(), &m), Err(Error::Validation(_))));
        let m = write(dir.path(), "m3.tsv", "a.pts\tcube\ttrain\n");
        let ds = load_dataset(dir.path(), &m).unwrap();
        assert_eq!(ds.clouds[0].part_labels, Some(vec![1, 0]));
    }

    #[test]
    fn label_file_overrides_column() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.pts", "0 0 0\n1 0 0\n");
        write(dir.path(), "a.seg", "3\n4\n");
        let m = write(dir.path(), "m.tsv", "a.pts\tmug\tval\ta.seg\n");
        let ds = load_dataset(dir.path(), &m).unwrap();
        assert_eq!(ds.clouds[0].part_labels, Some(vec![3, 4]));
        write(dir.path(), "short.seg", "3\n");
        let m = write(dir.path(), "m2.tsv", "a.pts\tmug\tval\tshort.seg\n");
        assert!(load_dataset(dir.path(), &m).is_err());
    }
}
