//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The process exits 0 even when a criterion fails, so that the result is
//! reported rather than hidden behind a test harness failure. Set
//! `ACCEPTANCE_STRICT=1` to exit 1 on any failure. `ACCEPTANCE_SEEDS`
//! changes the number of ablation seeds (default 3).

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use pointmtl::evaluation::{
    ahc_cluster, linear_probe, majority_vote_accuracy, nmi, point_probe, shape_features, shape_miou, PointProbeConfig,
    ProbeConfig, SegmentationSample,
};
use pointmtl::geometry::{synth_dataset, Dataset, Point, ShapeKind, Split};
use pointmtl::model::TaskMask;
use pointmtl::objectives::{assign_clusters, chamfer, chamfer_bruteforce_oracle, pseudo_label_loss, ClusterState};
use pointmtl::rng::stream;
use pointmtl::tensor::{Graph, Tensor};
use pointmtl::trainer::{checkpoint_load, checkpoint_save, fit, TrainConfig, TrainState, CHECKPOINT_NAME};
use pointmtl::verify::{run_verify, VerifyOptions};
use rand::Rng;

struct Verdicts {
    lines: Vec<(String, bool)>,
}

impl Verdicts {
    fn record(&mut self, name: &str, passed: bool, detail: String) {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.lines.push((name.to_string(), passed));
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1_and_4(v: &mut Verdicts) {
    let t = Instant::now();
    let report = run_verify(&VerifyOptions {
        train_mode_objective: true,
        ..VerifyOptions::default()
    });
    let elapsed = t.elapsed();
    let grad = |pred: &dyn Fn(&str) -> bool| {
        let checks: Vec<_> = report.checks.iter().filter(|c| pred(&c.name)).collect();
        let worst = checks.iter().map(|c| c.max_error).fold(0.0, f64::max);
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        (checks.len(), worst, failed)
    };
    let (n_ops, worst_op, failed_ops) = grad(&|n| n.starts_with("gradient/") && !n.starts_with("gradient/combined_loss"));
    let objective = report.get("gradient/combined_loss").expect("objective check");
    let batch_stats = report.get("gradient/combined_loss_batch_stats").expect("batch-stat check");
    let fast = elapsed < Duration::from_secs(120);
    v.record(
        "C1 gradient integrity, every op and the full objective (inference normalization)",
        failed_ops.is_empty() && objective.passed && fast,
        format!(
            "{n_ops} ops max rel err {worst_op:.2e}, objective max rel err {:.2e}, tolerance 1e-4, {} for all checks{}",
            objective.max_error,
            secs(elapsed),
            if failed_ops.is_empty() { String::new() } else { format!(", failed {failed_ops:?}") }
        ),
    );
    v.record(
        "C1 gradient integrity, full objective with batch-statistic normalization",
        batch_stats.passed,
        format!("max rel err {:.2e}, tolerance 1e-4; {}", batch_stats.max_error, batch_stats.detail),
    );
    let perm = report.get("encoder/permutation").expect("permutation check");
    v.record(
        "C4 permutation invariance over 50 trials",
        perm.passed,
        format!("max difference {:.2e}, tolerance 1e-9; {}", perm.max_error, perm.detail),
    );
}

fn random_cloud(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

fn tensor(points: &[Point]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flatten().copied().collect()).unwrap()
}

fn chamfer_value(a: &[Point], b: &[Point]) -> f64 {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(tensor(a)), g.constant(tensor(b)));
    let c = chamfer(&mut g, va, vb).unwrap();
    g.value(c).item().unwrap()
}

fn criterion_2(v: &mut Verdicts) {
    let t = Instant::now();
    let mut rng = stream(2024);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = if i < 10 { rng.gen_range(8..120) } else { 64 };
        let (a, b) = (random_cloud(64, &mut rng), random_cloud(n, &mut rng));
        worst = worst.max((chamfer_value(&a, &b) - chamfer_bruteforce_oracle(&a, &b).unwrap()).abs());
    }
    let elapsed = t.elapsed();
    v.record(
        "C2 chamfer equals the brute-force oracle on 100 pairs (10 unequal)",
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("max difference {worst:.2e}, tolerance 1e-9, {}", secs(elapsed)),
    );
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::new(vec![r.len(), r[0].len()], r.iter().flat_map(|x| x.iter().copied()).collect()).unwrap()
}

fn criterion_3(v: &mut Verdicts) {
    let mut results: Vec<(&str, f64, f64)> = Vec::new();
    results.push(("chamfer singleton", chamfer_value(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]), 1.0));
    results.push((
        "chamfer two-point",
        chamfer_value(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[0.0; 3], [0.0, 1.0, 0.0]]),
        1.25,
    ));
    let mut g = Graph::new();
    let logits = g.variable(Tensor::zeros(&[3, 500]));
    let ce = pseudo_label_loss(&mut g, logits, &[0, 10, 499]).unwrap();
    results.push(("uniform-logit cross-entropy", g.value(ce).item().unwrap(), 500f64.ln()));
    let c = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let z = g.variable(rows(&[&[0.5, 0.5]]));
    let (a, km) = assign_clusters(&mut g, z, &c).unwrap();
    results.push(("k-means tie loss", g.value(km).item().unwrap(), 0.5));
    results.push(("k-means tie goes to cluster 0", a[0] as f64, 0.0));
    let mut s = ClusterState::new(rows(&[&[5.0, 5.0], &[7.0, -1.0]])).unwrap();
    s.accumulate(&rows(&[&[0.0, 0.0], &[2.0, 0.0]]), &[0, 0]).unwrap();
    s.update();
    results.push(("centroid mean x", s.centroids.row(0)[0], 1.0));
    results.push(("centroid mean y", s.centroids.row(0)[1], 0.0));
    results.push(("empty centroid kept", s.centroids.row(1)[0], 7.0));
    results.push(("mIoU", shape_miou(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap(), 7.0 / 12.0));
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|(n, got, want)| format!("{n} {got} != {want}"))
        .collect();
    let worst = results.iter().map(|(_, g, w)| (g - w).abs()).fold(0.0, f64::max);
    v.record(
        "C3 exact micro-examples",
        bad.is_empty(),
        format!("{} values, max deviation {worst:.1e}, tolerance 1e-9 {}", results.len(), bad.join("; ")),
    );
}

fn small_desk_dataset() -> Dataset {
    synth_dataset(&ShapeKind::ALL, 10, 256, 0.0, 5).unwrap()
}

fn criterion_5(v: &mut Verdicts) {
    let ds = small_desk_dataset();
    let mut state = TrainState::new(TrainConfig { epochs: 4, seed: 3, ..TrainConfig::default() }, &ds).unwrap();
    let mut problems = Vec::new();
    let mut batches = 0;
    for _ in 0..4 {
        let before = state.clusters.centroids.clone();
        let hash = state.clusters.centroid_hash();
        let report = state.train_epoch(&ds).unwrap();
        batches += report.batch_centroid_hashes.len();
        if report.batch_centroid_hashes.iter().any(|&h| h != hash) {
            problems.push(format!("epoch {}: centroids moved within the epoch", report.stats.epoch));
        }
        if state.clusters.centroid_hash() == hash && report.stats.assignments_changed > 0 {
            problems.push(format!("epoch {}: centroids not updated", report.stats.epoch));
        }
        let used: BTreeSet<usize> = ds.indices(Split::Train).iter().map(|&i| state.last_assignments[i]).collect();
        let d = state.clusters.dim();
        for c in (0..state.clusters.k()).filter(|c| !used.contains(c)) {
            if before.data()[c * d..(c + 1) * d] != state.clusters.centroids.data()[c * d..(c + 1) * d] {
                problems.push(format!("epoch {}: empty cluster {c} moved", report.stats.epoch));
            }
        }
    }
    v.record(
        "C5 epoch-wise centroid discipline",
        problems.is_empty(),
        format!("4 epochs, {batches} batches checked {}", problems.join("; ")),
    );
}

struct RunSummary {
    nmi: f64,
    probe: f64,
    non_empty: usize,
    elapsed: Duration,
    state: TrainState,
}

fn probe_accuracy(state: &TrainState, ds: &Dataset) -> f64 {
    let tr = shape_features(&state.model, &state.params, &ds.clouds_in(Split::Train)).unwrap();
    let te = shape_features(&state.model, &state.params, &ds.clouds_in(Split::Test)).unwrap();
    let (ytr, yte) = (ds.labels_in(Split::Train).unwrap(), ds.labels_in(Split::Test).unwrap());
    linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap().accuracy
}

fn desk_run(ds: &Dataset, mask: &str, seed: u64) -> RunSummary {
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    cfg.model.task_mask = TaskMask::parse_list(mask).unwrap();
    let t = Instant::now();
    let state = fit(ds, cfg, None).unwrap();
    let elapsed = t.elapsed();
    let last = state.history.last().unwrap();
    let summary = RunSummary {
        nmi: last.nmi.unwrap(),
        probe: probe_accuracy(&state, ds),
        non_empty: last.non_empty,
        elapsed,
        state,
    };
    println!(
        "  run {mask:<14} seed {seed}: nmi {:.3}, probe {:.3}, {} non-empty clusters, {}",
        summary.nmi,
        summary.probe,
        summary.non_empty,
        secs(elapsed)
    );
    summary
}

fn criterion_6(v: &mut Verdicts, run: &RunSummary) {
    let cfg = &run.state.cfg;
    let m = &cfg.model;
    let setup = m.k_list == [8, 12, 16] && m.d_shape == 64 && m.d_point == 128 && m.k_ub == 32;
    let setup = setup && cfg.batch_size == 16 && cfg.epochs == 100;
    let minutes = run.elapsed.as_secs_f64() / 60.0;
    v.record(
        "C6a desk training NMI >= 0.5",
        setup && run.nmi >= 0.5,
        format!("nmi {:.3}", run.nmi),
    );
    v.record(
        "C6b linear probe accuracy >= 90%",
        setup && run.probe >= 0.9,
        format!("accuracy {:.1}%", 100.0 * run.probe),
    );
    v.record(
        "C6c non-empty clusters strictly inside (1, 32)",
        setup && run.non_empty > 1 && run.non_empty < 32,
        format!("{} non-empty clusters", run.non_empty),
    );
    let threads = rayon::current_num_threads();
    let budget = if threads > 1 { 8.0 } else { 30.0 };
    v.record(
        "C6d wall-clock within budget",
        minutes <= budget,
        format!("{minutes:.1} min with {threads} thread(s), budget {budget} min"),
    );
}

fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|&&b| b).count() > votes.len()
}

fn criterion_7(v: &mut Verdicts, ds: &Dataset, seed0_all: &RunSummary) {
    let seeds: u64 = std::env::var("ACCEPTANCE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(3);
    let collapsed = |r: &RunSummary| r.non_empty == 1 || r.probe < 0.4;
    let (mut clu, mut cls, mut vs_rec, mut best) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut table = Vec::new();
    for seed in 0..seeds {
        let owned;
        let all = if seed == 0 {
            seed0_all
        } else {
            owned = desk_run(ds, "all", seed);
            &owned
        };
        let rec = desk_run(ds, "reconstruction", seed);
        let clustering = desk_run(ds, "clustering", seed);
        let classification = desk_run(ds, "classification", seed);
        clu.push(collapsed(&clustering));
        cls.push(collapsed(&classification));
        vs_rec.push(all.probe >= rec.probe - 0.02);
        let top = [all.probe, rec.probe, clustering.probe, classification.probe].into_iter().fold(0.0, f64::max);
        best.push(all.probe >= top - 0.01);
        table.push(format!(
            "seed {seed}: all {:.3}/{}, rec {:.3}/{}, clu {:.3}/{}, cls {:.3}/{}",
            all.probe,
            all.non_empty,
            rec.probe,
            rec.non_empty,
            clustering.probe,
            clustering.non_empty,
            classification.probe,
            classification.non_empty
        ));
    }
    let votes = |b: &[bool]| format!("{}/{} seeds", b.iter().filter(|&&x| x).count(), b.len());
    println!("  probe accuracy / non-empty clusters per run: {}", table.join("; "));
    v.record(
        "C7a clustering-only run collapses (1 cluster or probe < 40%)",
        majority(&clu),
        votes(&clu),
    );
    v.record(
        "C7b classification-only run collapses (1 cluster or probe < 40%)",
        majority(&cls),
        votes(&cls),
    );
    v.record(
        "C7c all tasks probe >= reconstruction-only probe - 2 points",
        majority(&vs_rec),
        votes(&vs_rec),
    );
    v.record("C7d all tasks best or within 1 point of best", majority(&best), votes(&best));
}

fn segmentation_samples(state: &TrainState, ds: &Dataset, split: Split) -> Vec<SegmentationSample> {
    let clouds = ds.clouds_in(split);
    let out = state.model.encode_frozen(&state.params, &clouds, 16).unwrap();
    clouds
        .iter()
        .zip(out)
        .map(|(c, o)| SegmentationSample {
            features: o.point_features,
            parts: c.part_labels.clone().unwrap(),
            category: c.shape_label.unwrap(),
        })
        .collect()
}

fn criterion_8(v: &mut Verdicts, state: &TrainState) {
    let ds = synth_dataset(&[ShapeKind::Cylinder, ShapeKind::Cube], 50, 256, 0.0, 8).unwrap();
    let train = segmentation_samples(state, &ds, Split::Train);
    let test = segmentation_samples(state, &ds, Split::Test);
    let cfg = PointProbeConfig { fraction: 0.05, ..PointProbeConfig::default() };
    let r = point_probe(&train, &test, &cfg).unwrap();
    let seg = r.segmentation.unwrap();
    v.record(
        "C8 part-segmentation probe on 5% of points, instance mIoU >= 0.70",
        seg.instance_miou >= 0.7,
        format!(
            "instance mIoU {:.3}, category mIoU {:.3}, point accuracy {:.3}",
            seg.instance_miou, seg.category_miou, r.accuracy
        ),
    );
}

fn criterion_9(v: &mut Verdicts, state: &TrainState, ds: &Dataset) {
    let feats = shape_features(&state.model, &state.params, &ds.clouds_in(Split::Test)).unwrap();
    let truth = ds.labels_in(Split::Test).unwrap();
    let groups = ahc_cluster(&feats, 4).unwrap();
    let acc = majority_vote_accuracy(&groups, &truth).unwrap();
    v.record(
        "C9 zero-shot AHC with 4 clusters, majority-vote accuracy >= 60%",
        acc >= 0.6,
        format!("accuracy {:.1}%, nmi {:.3}", 100.0 * acc, nmi(&groups, &truth).unwrap()),
    );
}

fn criterion_10(v: &mut Verdicts) {
    let ds = small_desk_dataset();
    let cfg = |seed| TrainConfig { epochs: 3, seed, ..TrainConfig::default() };
    let a = fit(&ds, cfg(21), None).unwrap();
    let b = fit(&ds, cfg(21), None).unwrap();
    let same = a.history == b.history && a.clusters == b.clusters;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(CHECKPOINT_NAME);
    let mut state = TrainState::new(cfg(22), &ds).unwrap();
    state.train_epoch(&ds).unwrap();
    checkpoint_save(&state, &path).unwrap();
    let next = state.train_epoch(&ds).unwrap();
    let mut resumed = checkpoint_load(&path).unwrap();
    let again = resumed.train_epoch(&ds).unwrap();
    let params_equal = state
        .params
        .params()
        .zip(resumed.params.params())
        .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.value == p2.value);
    let resume_exact = next == again && state.clusters == resumed.clusters && params_equal;
    v.record(
        "C10 determinism and checkpoint resume",
        same && resume_exact,
        format!("identical-seed histories equal: {same}; resumed epoch bit-exact: {resume_exact}"),
    );
}

fn main() {
    let start = Instant::now();
    let mut v = Verdicts { lines: Vec::new() };
    criterion_1_and_4(&mut v);
    criterion_2(&mut v);
    criterion_3(&mut v);
    criterion_5(&mut v);
    criterion_10(&mut v);

    let ds = synth_dataset(&ShapeKind::ALL, 100, 256, 0.0, 0).unwrap();
    let main_run = desk_run(&ds, "all", 0);
    criterion_6(&mut v, &main_run);
    criterion_8(&mut v, &main_run.state);
    criterion_9(&mut v, &main_run.state, &ds);
    criterion_7(&mut v, &ds, &main_run);

    let failed: Vec<&str> = v.lines.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {} of {} checks passed in {:.1} min",
        v.lines.len() - failed.len(),
        v.lines.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    for f in &failed {
        println!("  failed: {f}");
    }
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|s| s == "1") {
        std::process::exit(1);
    }
}
