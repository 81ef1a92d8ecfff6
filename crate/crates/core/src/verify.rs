//! Self-test suite: finite-difference checks of every tape operation and of
//! the full training objective, the chamfer oracle sweep, permutation
//! invariance of the encoder and the centroid update rule.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{synth_generate, PointCloud, ShapeKind};
use crate::model::{EncoderBatch, Model, ModelConfig};
use crate::objectives::{chamfer, chamfer_bruteforce_oracle, ClusterState, LossWeights};
use crate::rng::{derive, Stream};
use crate::tensor::{
    grad_check, grad_check_elements, BatchNormConfig, GradCheckReport, Graph, Mode, OpKind, RunningStats,
    Tensor, Var,
};
use crate::trainer::batch_objective;

/// Finite-difference step.
pub const GRAD_EPS: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
pub const CHAMFER_TOL: f64 = 1e-9;
pub const PERMUTATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub chamfer_pairs: usize,
    /// Pairs among `chamfer_pairs` whose clouds differ in size.
    pub unequal_pairs: usize,
    pub permutation_trials: usize,
    /// Sampled elements per parameter tensor in the full-objective check.
    pub elements_per_param: usize,
    /// Also check the full objective with batch statistics in the
    /// normalization layers, as used during training.
    pub train_mode_objective: bool,
    /// Negates the backward rule of one op in every checked graph.
    pub fault: Option<OpKind>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            chamfer_pairs: 100,
            unequal_pairs: 10,
            permutation_trials: 50,
            elements_per_param: 4,
            train_mode_objective: false,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn record(&mut self, name: impl Into<String>, tolerance: f64, result: Result<(f64, String)>) {
        let name = name.into();
        let outcome = match result {
            Ok((err, detail)) => CheckOutcome {
                passed: err <= tolerance,
                max_error: err,
                tolerance,
                detail,
                name,
            },
            Err(e) => CheckOutcome {
                name,
                max_error: f64::INFINITY,
                tolerance,
                passed: false,
                detail: format!("error: {e}"),
            },
        };
        self.checks.push(outcome);
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<36} max error {:.3e} (tolerance {:.0e}) {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_error,
                c.tolerance,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn random(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Uniform magnitudes in [0.1, 1) with random sign, away from relu kinks.
fn away_from_zero(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Contracts `v` with a fixed random tensor so upstream gradients differ per
/// element.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(v), &mut derive(seed, &[0x9e37]));
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

fn summarize(r: GradCheckReport) -> (f64, String) {
    (
        r.max_rel_err,
        format!(
            "({} elements, worst analytic {:.6e} vs numeric {:.6e})",
            r.checked, r.analytic, r.numeric
        ),
    )
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_cases(seed: u64) -> Vec<(OpKind, Vec<Tensor>, OpFn)> {
    let mut rng = derive(seed, &[1]);
    let mut r = |shape: &[usize]| random(shape, &mut rng);
    let a34 = r(&[3, 4]);
    let b45 = r(&[4, 5]);
    let c3 = r(&[3]);
    let x43 = r(&[4, 3]);
    let y43 = r(&[4, 3]);
    let t234 = r(&[2, 3, 4]);
    let a32 = r(&[3, 2]);
    let gamma = r(&[3]);
    let beta = r(&[3]);
    let logits = r(&[3, 5]);
    let mut nz = derive(seed, &[2]);
    let relu_in = away_from_zero(&[4, 3], &mut nz);
    let mut one_hot = Tensor::zeros(&[3, 5]);
    for (i, t) in [4usize, 0, 2].iter().enumerate() {
        one_hot.data_mut()[i * 5 + t] = 1.0;
    }
    let dropout_seed = seed ^ 0x5eed;
    vec![
        (
            OpKind::MatMul,
            vec![a34.clone(), b45],
            Box::new(|g, v| {
                let c = g.matmul(v[0], v[1])?;
                project(g, c, 1)
            }),
        ),
        (
            OpKind::Add,
            vec![x43.clone(), c3.clone()],
            Box::new(|g, v| {
                let c = g.add(v[0], v[1])?;
                project(g, c, 2)
            }),
        ),
        (
            OpKind::Sub,
            vec![x43.clone(), y43.clone()],
            Box::new(|g, v| {
                let c = g.sub(v[0], v[1])?;
                project(g, c, 3)
            }),
        ),
        (
            OpKind::Mul,
            vec![x43.clone(), c3.clone()],
            Box::new(|g, v| {
                let c = g.mul(v[0], v[1])?;
                project(g, c, 4)
            }),
        ),
        (
            OpKind::Scale,
            vec![x43.clone()],
            Box::new(|g, v| {
                let c = g.scale(v[0], -1.7);
                project(g, c, 5)
            }),
        ),
        (
            OpKind::Relu,
            vec![relu_in],
            Box::new(|g, v| {
                let c = g.relu(v[0]);
                project(g, c, 6)
            }),
        ),
        (
            OpKind::Sum,
            vec![t234.clone()],
            Box::new(|g, v| {
                let c = g.sum(v[0], 1)?;
                project(g, c, 7)
            }),
        ),
        (
            OpKind::Mean,
            vec![t234.clone()],
            Box::new(|g, v| {
                let c = g.mean(v[0], 2)?;
                project(g, c, 8)
            }),
        ),
        (
            OpKind::Max,
            vec![t234.clone()],
            Box::new(|g, v| {
                let c = g.max(v[0], 1)?;
                project(g, c, 9)
            }),
        ),
        (
            OpKind::Concat,
            vec![a32, a34.clone()],
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                project(g, c, 10)
            }),
        ),
        (
            OpKind::Narrow,
            vec![a34.clone()],
            Box::new(|g, v| {
                let c = g.narrow(v[0], 1, 1, 2)?;
                project(g, c, 11)
            }),
        ),
        (
            OpKind::Gather,
            vec![a34.clone()],
            Box::new(|g, v| {
                let c = g.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
                project(g, c, 12)
            }),
        ),
        (
            OpKind::Reshape,
            vec![a34],
            Box::new(|g, v| {
                let c = g.reshape(v[0], &[2, 6])?;
                project(g, c, 13)
            }),
        ),
        (
            OpKind::BatchNorm,
            vec![x43.clone(), gamma, beta],
            Box::new(|g, v| {
                let mut stats = RunningStats::new(3);
                let c = g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, BatchNormConfig::default())?;
                project(g, c, 14)
            }),
        ),
        (
            OpKind::Dropout,
            vec![x43],
            Box::new(move |g, v| {
                let mut r = derive(dropout_seed, &[]);
                let c = g.dropout(v[0], 0.5, Mode::Train, &mut r)?;
                project(g, c, 15)
            }),
        ),
        (
            OpKind::SoftmaxCrossEntropy,
            vec![logits],
            Box::new(move |g, v| g.softmax_cross_entropy(v[0], &one_hot)),
        ),
    ]
}

fn with_fault<'a>(
    fault: Option<OpKind>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a,
) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a {
    move |g, v| {
        if let Some(kind) = fault {
            g.inject_sign_fault(kind);
        }
        f(g, v)
    }
}

fn cloud(kind: ShapeKind, m: usize, seed: u64) -> Result<PointCloud> {
    synth_generate(kind, m, 0.0, &mut derive(seed, &[kind as u64]))
}

/// Gradient of the combined loss of all three tasks with respect to the
/// model parameters on a two-cloud batch of the desk network.
///
/// With batch statistics over only two clouds, freshly initialized
/// shape-level features barely differ between the clouds, so the
/// normalization divides by a tiny spread and the loss curves sharply on the
/// scale of the finite-difference step; [`Mode::Eval`] uses the stored
/// statistics instead and keeps the objective smooth.
fn check_full_objective(opts: &VerifyOptions, mode: Mode, eps: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone())?;
    let params = model.init_params(&mut derive(opts.seed, &[10]));
    let a = cloud(ShapeKind::Torus, cfg.m, opts.seed)?;
    let b = cloud(ShapeKind::Cube, cfg.m, opts.seed)?;
    let enc = EncoderBatch::new(&[&a, &b], &cfg)?;
    let target = Tensor::new(vec![2 * cfg.m, 3], a.flat().into_iter().chain(b.flat()).collect())?;

    // centroids scattered around the batch's own features
    let mut rng = derive(opts.seed, &[11]);
    let noise = Normal::new(0.0, 0.5).expect("valid sigma");
    let mut unused = derive(0, &[]);
    let mut fw = model.forward(&params, mode, false, &mut unused);
    let feats = model.encode(&mut fw, &enc)?.shape;
    let feats = fw.g.value(feats).clone();
    let centroids: Vec<f64> = (0..cfg.k_ub)
        .flat_map(|c| feats.row(c % 2).iter().map(|v| v + noise.sample(&mut rng)).collect::<Vec<_>>())
        .collect();
    let centroids = Tensor::new(vec![cfg.k_ub, cfg.d_shape], centroids)?;

    let names: Vec<String> = params.params().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor> = params.params().map(|(_, p)| p.value.clone()).collect();
    let elements: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let k = opts.elements_per_param.min(t.numel());
            rand::seq::index::sample(&mut rng, t.numel(), k).into_vec()
        })
        .collect();
    let weights = LossWeights::default();
    let dropout_seed = opts.seed ^ 0xd00d;
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut drop = derive(dropout_seed, &[]);
        let mut fw = model.forward(&params, mode, true, &mut drop);
        fw.g = std::mem::take(g);
        fw.binder.bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let obj = batch_objective(&model, &mut fw, &enc, target.clone(), &centroids, &weights);
        *g = std::mem::take(&mut fw.g);
        Ok(obj?.loss)
    };
    grad_check_elements(with_fault(opts.fault, f), &inputs, &elements, eps)
}

fn check_chamfer(opts: &VerifyOptions) -> Result<(f64, String)> {
    let mut rng = derive(opts.seed, &[20]);
    let mut worst: f64 = 0.0;
    for i in 0..opts.chamfer_pairs {
        let nb = if i < opts.unequal_pairs { rng.gen_range(8..64) } else { 64 };
        let pa: Vec<[f64; 3]> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let pb: Vec<[f64; 3]> = (0..nb).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut g = Graph::new();
        let ta = g.constant(Tensor::new(vec![64, 3], pa.iter().flatten().copied().collect())?);
        let tb = g.constant(Tensor::new(vec![nb, 3], pb.iter().flatten().copied().collect())?);
        let c = chamfer(&mut g, ta, tb)?;
        let fast = g.value(c).item()?;
        worst = worst.max((fast - chamfer_bruteforce_oracle(&pa, &pb)?).abs());
    }
    Ok((worst, format!("({} pairs, {} unequal)", opts.chamfer_pairs, opts.unequal_pairs)))
}

/// Shape features are unchanged and point features follow the points under
/// a random reordering of every cloud.
fn check_permutation(opts: &VerifyOptions) -> Result<(f64, String)> {
    let cfg = ModelConfig::desk();
    let model = Model::new(cfg.clone())?;
    let params = model.init_params(&mut derive(opts.seed, &[30]));
    let mut rng = derive(opts.seed, &[31]);
    let mut worst: f64 = 0.0;
    for t in 0..opts.permutation_trials {
        let kind = ShapeKind::ALL[t % ShapeKind::ALL.len()];
        let c = cloud(kind, cfg.m, opts.seed.wrapping_add(t as u64))?;
        let mut perm: Vec<usize> = (0..cfg.m).collect();
        perm.shuffle(&mut rng);
        let shuffled = c.with_points(perm.iter().map(|&i| c.points[i]).collect());
        let out = model.encode_frozen(&params, &[&c, &shuffled], 2)?;
        for (x, y) in out[0].shape_feature.iter().zip(&out[1].shape_feature) {
            worst = worst.max((x - y).abs());
        }
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in out[1].point_features.row(i).iter().zip(out[0].point_features.row(p)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok((worst, format!("({} trials)", opts.permutation_trials)))
}

/// Epoch-wise centroid update against a directly computed mean, with empty
/// clusters left bit-identical.
fn check_centroid_update(opts: &VerifyOptions) -> Result<(f64, String)> {
    let hand = {
        let mut c = ClusterState::new(Tensor::new(vec![2, 2], vec![7.0, 7.0, -1.0, 3.0])?)?;
        c.accumulate(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0])?, &[0, 0])?;
        c.update();
        let expected = [1.0, 0.0, -1.0, 3.0];
        c.centroids.data().iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let mut rng = derive(opts.seed, &[40]);
    let (k, d, n) = (8, 5, 30);
    let initial = random(&[k, d], &mut rng);
    let mut c = ClusterState::new(initial.clone())?;
    let mut members = vec![Vec::new(); k];
    for _ in 0..3 {
        let z = random(&[n / 3, d], &mut rng);
        // clusters 6 and 7 never receive samples
        let a: Vec<usize> = (0..n / 3).map(|_| rng.gen_range(0..6)).collect();
        for (i, &ci) in a.iter().enumerate() {
            members[ci].push(z.row(i).to_vec());
        }
        c.accumulate(&z, &a)?;
    }
    let non_empty = c.update();
    let mut worst = hand;
    for (ci, rows) in members.iter().enumerate() {
        let got = &c.centroids.data()[ci * d..(ci + 1) * d];
        if rows.is_empty() {
            if got != &initial.data()[ci * d..(ci + 1) * d] {
                worst = f64::INFINITY;
            }
            continue;
        }
        for j in 0..d {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            worst = worst.max((got[j] - mean).abs());
        }
    }
    if non_empty != members.iter().filter(|m| !m.is_empty()).count() {
        worst = f64::INFINITY;
    }
    Ok((worst, format!("({non_empty} of {k} clusters populated)")))
}

/// Runs every check. Individual failures are recorded in the report rather
/// than returned as errors.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for (kind, inputs, f) in op_cases(opts.seed) {
        let r = grad_check(with_fault(opts.fault, f), &inputs, GRAD_EPS).map(summarize);
        report.record(format!("gradient/{}", kind.name()), GRAD_TOL, r);
    }
    report.record(
        "gradient/combined_loss",
        GRAD_TOL,
        check_full_objective(opts, Mode::Eval, GRAD_EPS).map(summarize),
    );
    if opts.train_mode_objective {
        // a smaller step separates truncation error from a wrong gradient
        let outcome = check_full_objective(opts, Mode::Train, GRAD_EPS).and_then(|r| {
            let fine = check_full_objective(opts, Mode::Train, GRAD_EPS / 10.0)?;
            let (err, detail) = summarize(r);
            Ok((err, format!("{detail}; at eps {:.0e} max rel err {:.2e}", GRAD_EPS / 10.0, fine.max_rel_err)))
        });
        report.record("gradient/combined_loss_batch_stats", GRAD_TOL, outcome);
    }
    report.record("chamfer/oracle", CHAMFER_TOL, check_chamfer(opts));
    report.record("encoder/permutation", PERMUTATION_TOL, check_permutation(opts));
    report.record("clusters/centroid_update", 1e-12, check_centroid_update(opts));
    report
}
