use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use pointmtl::evaluation::{
    ahc_cluster, export_embeddings, linear_probe, majority_vote_accuracy, nmi, point_probe, shape_features,
    write_report, SegmentationSample,
};
use pointmtl::geometry::{load_dataset, save_dataset, synth_dataset, Dataset, ShapeKind, Split};
use pointmtl::model::TaskMask;
use pointmtl::objectives::assign;
use pointmtl::tensor::OpKind;
use pointmtl::trainer::{
    checkpoint_load, checkpoint_load_for, conform_dataset, EpochStats, TrainState, CHECKPOINT_NAME,
};
use pointmtl::verify::{run_verify, VerifyOptions};
use pointmtl::{Error, Result};

use crate::config::RunConfig;
use crate::{ConfigArgs, EvalArgs, ExportArgs, Preset, Protocol, SynthArgs, TrainArgs, VerifyArgs};

pub const METRICS_NAME: &str = "metrics.tsv";
pub const RESOLVED_CONFIG_NAME: &str = "config.toml";

const METRICS_HEADER: &str = "epoch\tlr\tloss\tkmeans\tce\tchamfer\tnon_empty\tnmi\tassignments_changed";

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => match args.preset {
            Preset::Desk => RunConfig::default(),
            Preset::Full => RunConfig::full(),
        },
    };
    if let Some(d) = &args.data {
        run.data = d.clone();
    }
    if let Some(o) = &args.out_dir {
        run.out_dir = o.clone();
    }
    Ok(run)
}

fn load_data(manifest: &Path) -> Result<Dataset> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    load_dataset(root, manifest)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let kinds: Vec<ShapeKind> = a
        .kinds
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let ds = synth_dataset(&kinds, a.per_class, a.points, a.noise, a.seed)?;
    let manifest = save_dataset(&ds, &a.out)?;
    let count = |s| ds.indices(s).len();
    println!(
        "wrote {} clouds ({} train, {} val, {} test) to {}",
        ds.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.display()
    );
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn metrics_line(s: &EpochStats) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        s.epoch,
        s.lr,
        s.loss,
        opt(s.kmeans),
        opt(s.ce),
        opt(s.chamfer),
        s.non_empty,
        opt(s.nmi),
        s.assignments_changed
    )
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut run = resolve(&a.cfg)?;
    if let Some(mask) = &a.mask {
        run.train.model.task_mask = TaskMask::parse_list(mask)?;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    run.validate()?;
    if a.print_config {
        print!("{}", run.to_toml()?);
        return Ok(());
    }

    let ds = conform_dataset(&load_data(&run.data)?, run.train.model.m, run.train.seed)?;
    let out = &run.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(RESOLVED_CONFIG_NAME), &run.to_toml()?)?;

    let ckpt = out.join(CHECKPOINT_NAME);
    let mut state = if a.resume && ckpt.exists() {
        let mut state = checkpoint_load_for(&ckpt, &run.train.model)?;
        let mut stored = state.cfg.clone();
        stored.epochs = run.train.epochs;
        if stored != run.train {
            return Err(Error::Config(format!(
                "{} was written with a different training configuration",
                ckpt.display()
            )));
        }
        state.cfg.epochs = run.train.epochs;
        info!("resuming {} after epoch {}", ckpt.display(), state.epoch);
        state
    } else {
        TrainState::new(run.train.clone(), &ds)?
    };

    // the log always mirrors the state's history, so a resumed run rewrites
    // the lines it already has
    let metrics = out.join(METRICS_NAME);
    let mut body = format!("{METRICS_HEADER}\n");
    for h in &state.history {
        body.push_str(&metrics_line(h));
        body.push('\n');
    }
    write_file(&metrics, &body)?;
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let mut log_err = None;
    state.fit(&ds, Some(out), |s| {
        if let Err(e) = writeln!(log, "{}", metrics_line(s)) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&metrics, e));
    }
    match state.history.last() {
        Some(last) => println!(
            "trained {} epochs: loss {:.6}, {} non-empty clusters, nmi {}; checkpoint {}",
            state.epoch,
            last.loss,
            last.non_empty,
            opt(last.nmi),
            ckpt.display()
        ),
        None => println!("wrote initial checkpoint {}", ckpt.display()),
    }
    Ok(())
}

/// Loads the checkpoint, strictly against the configured model when a
/// configuration file was given.
fn load_state(cfg: &ConfigArgs, run: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<(TrainState, PathBuf)> {
    let path = checkpoint.clone().unwrap_or_else(|| run.out_dir.join(CHECKPOINT_NAME));
    let state = if cfg.config.is_some() {
        checkpoint_load_for(&path, &run.train.model)?
    } else {
        checkpoint_load(&path)?
    };
    Ok((state, path))
}

fn labels(ds: &Dataset, split: Split) -> Result<Vec<usize>> {
    ds.labels_in(split)
        .ok_or_else(|| Error::Validation(format!("every {split} cloud needs a category label")))
}

fn segmentation_samples(state: &TrainState, ds: &Dataset, split: Split) -> Result<Vec<SegmentationSample>> {
    let clouds: Vec<_> = ds.clouds_in(split).into_iter().filter(|c| c.part_labels.is_some()).collect();
    let out = state.model.encode_frozen(&state.params, &clouds, state.cfg.batch_size)?;
    Ok(clouds
        .iter()
        .zip(out)
        .map(|(c, o)| SegmentationSample {
            features: o.point_features,
            parts: c.part_labels.clone().expect("filtered above"),
            category: c.shape_label.unwrap_or(0),
        })
        .collect())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut run = resolve(&a.cfg)?;
    if let Some(f) = a.fraction {
        run.eval.point_probe.fraction = f;
    }
    run.validate()?;
    let (state, ckpt) = load_state(&a.cfg, &run, &a.checkpoint)?;
    let ds = conform_dataset(&load_data(&run.data)?, state.cfg.model.m, state.cfg.seed)?;
    let dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let (model, params) = (&state.model, &state.params);
    let mut metrics: Vec<(String, f64)> = Vec::new();
    match a.protocol {
        Protocol::Probe => {
            let ftr = shape_features(model, params, &ds.clouds_in(Split::Train))?;
            let fte = shape_features(model, params, &ds.clouds_in(Split::Test))?;
            let r = linear_probe(&ftr, &labels(&ds, Split::Train)?, &fte, &labels(&ds, Split::Test)?, &run.eval.probe)?;
            metrics.push(("accuracy".into(), r.accuracy));
            for (c, acc) in &r.per_class_accuracy {
                let name = ds.category_names.get(*c).map_or_else(|| c.to_string(), Clone::clone);
                metrics.push((format!("accuracy/{name}"), *acc));
            }
        }
        Protocol::Zeroshot => {
            let fte = shape_features(model, params, &ds.clouds_in(Split::Test))?;
            let truth = labels(&ds, Split::Test)?;
            let n = a
                .clusters
                .or((run.eval.zeroshot_clusters > 0).then_some(run.eval.zeroshot_clusters))
                .unwrap_or(ds.category_names.len());
            let groups = ahc_cluster(&fte, n)?;
            metrics.push(("clusters".into(), n as f64));
            metrics.push(("accuracy".into(), majority_vote_accuracy(&groups, &truth)?));
            metrics.push(("nmi".into(), nmi(&groups, &truth)?));
            for &k in run.eval.zeroshot_sweep.iter().filter(|&&k| k != n && k >= 1 && k <= truth.len()) {
                let g = ahc_cluster(&fte, k)?;
                metrics.push((format!("accuracy@{k}"), majority_vote_accuracy(&g, &truth)?));
                metrics.push((format!("nmi@{k}"), nmi(&g, &truth)?));
            }
        }
        Protocol::Partseg => {
            let train = segmentation_samples(&state, &ds, Split::Train)?;
            let test = segmentation_samples(&state, &ds, Split::Test)?;
            let r = point_probe(&train, &test, &run.eval.point_probe)?;
            let seg = r.segmentation.expect("point probe reports segmentation");
            metrics.push(("point_accuracy".into(), r.accuracy));
            metrics.push(("instance_miou".into(), seg.instance_miou));
            metrics.push(("category_miou".into(), seg.category_miou));
            for (c, v) in &seg.per_category_miou {
                let name = ds.category_names.get(*c).map_or_else(|| c.to_string(), Clone::clone);
                metrics.push((format!("miou/{name}"), *v));
            }
        }
        Protocol::Nmi => {
            let feats = shape_features(model, params, &ds.clouds_in(Split::Train))?;
            let assigned = assign(&feats, &state.clusters.centroids)?;
            let used = assigned.iter().collect::<std::collections::BTreeSet<_>>().len();
            metrics.push(("nmi".into(), nmi(&assigned, &labels(&ds, Split::Train)?)?));
            metrics.push(("non_empty".into(), used as f64));
        }
        Protocol::Export => {
            let path = dir.join("embeddings.tsv");
            let n = export_embeddings(&ds, model, params, &path)?;
            println!("wrote {n} embeddings to {}", path.display());
            metrics.push(("records".into(), n as f64));
        }
    }
    let name = match a.protocol {
        Protocol::Probe => "probe",
        Protocol::Zeroshot => "zeroshot",
        Protocol::Partseg => "partseg",
        Protocol::Nmi => "nmi",
        Protocol::Export => "export",
    };
    let report = a.report.clone().unwrap_or_else(|| dir.join(format!("eval_{name}.tsv")));
    write_report(&report, &metrics)?;
    for (k, v) in &metrics {
        println!("{k}\t{v}");
    }
    Ok(())
}

pub fn export(a: &ExportArgs) -> Result<()> {
    let run = resolve(&a.cfg)?;
    let (state, _) = load_state(&a.cfg, &run, &a.checkpoint)?;
    let ds = conform_dataset(&load_data(&run.data)?, state.cfg.model.m, state.cfg.seed)?;
    let n = export_embeddings(&ds, &state.model, &state.params, &a.out)?;
    println!("wrote {n} embeddings to {}", a.out.display());
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?),
        None => None,
    };
    let mut opts = VerifyOptions {
        seed: a.seed,
        fault,
        ..VerifyOptions::default()
    };
    if a.quick {
        opts.chamfer_pairs = 20;
        opts.unequal_pairs = 4;
        opts.permutation_trials = 5;
        opts.elements_per_param = 1;
    }
    let report = run_verify(&opts);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        Err(Error::Numeric(format!("verification failed: {}", names.join(", "))))
    }
}
