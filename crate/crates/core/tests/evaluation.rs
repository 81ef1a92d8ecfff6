use std::collections::HashMap;

use pointmtl::evaluation::{
    ahc_cluster, ahc_oracle, export_embeddings, linear_probe, majority_vote_accuracy, nmi, shape_features,
    shape_miou, write_report, ProbeConfig,
};
use pointmtl::geometry::{synth_dataset, ShapeKind};
use pointmtl::model::{Model, ModelConfig};
use pointmtl::rng::stream;
use pointmtl::tensor::Tensor;
use pointmtl::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// NMI through joint entropy in base 2: I = H(a) + H(b) - H(a, b).
fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let h = |counts: HashMap<(usize, usize), usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    };
    let mut ca = HashMap::new();
    let mut cb = HashMap::new();
    let mut cj = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry((x, 0)).or_insert(0) += 1;
        *cb.entry((y, 0)).or_insert(0) += 1;
        *cj.entry((x, y)).or_insert(0) += 1;
    }
    let (ha, hb, hj) = (h(ca), h(cb), h(cj));
    if ha + hb == 0.0 {
        0.0
    } else {
        2.0 * (ha + hb - hj) / (ha + hb)
    }
}

#[test]
fn nmi_examples() {
    assert!((nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - 1.0).abs() < 1e-12);
    assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    assert_eq!(nmi(&[3, 3, 3], &[1, 1, 1]).unwrap(), 0.0);
    assert!(matches!(nmi(&[0, 1], &[0]), Err(Error::Validation(_))));
    assert!(matches!(nmi(&[], &[]), Err(Error::Validation(_))));
}

#[test]
fn majority_vote_examples() {
    assert_eq!(majority_vote_accuracy(&[2, 2, 0, 0], &[1, 1, 3, 3]).unwrap(), 1.0);
    assert!((majority_vote_accuracy(&[0, 0, 0], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    // one cluster scores the largest class prior
    assert!((majority_vote_accuracy(&[0; 5], &[0, 1, 1, 2, 1]).unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn miou_examples() {
    assert!((shape_miou(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap() - 7.0 / 12.0).abs() < 1e-9);
    assert_eq!(shape_miou(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
    // part 2 occurs in neither and does not count; part 1 occurs only in the prediction
    assert_eq!(shape_miou(&[0, 0], &[0, 1]).unwrap(), 0.25);
}

fn blobs(n: usize, seed: u64, sigma: f64) -> (Tensor, Vec<usize>) {
    let mut rng = stream(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = labels
        .iter()
        .flat_map(|&l| {
            let cx = if l == 0 { -1.0 } else { 1.0 };
            [cx + noise.sample(&mut rng), noise.sample(&mut rng)]
        })
        .collect();
    (Tensor::new(vec![n, 2], data).unwrap(), labels)
}

#[test]
fn probe_separates_gaussian_blobs() {
    // centres 2 apart, sigma 0.1: margin well beyond 4 sigma
    let (x, y) = blobs(60, 1, 0.1);
    let (xt, yt) = blobs(40, 2, 0.1);
    let r = linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.confusion, vec![vec![20, 0], vec![0, 20]]);
}

#[test]
fn probe_one_hot_features() {
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let onehot = |l: &[usize]| {
        Tensor::new(
            vec![l.len(), 4],
            l.iter().flat_map(|&c| (0..4).map(move |j| (j == c) as u8 as f64)).collect(),
        )
        .unwrap()
    };
    let r = linear_probe(&onehot(&labels), &labels, &onehot(&labels[..12]), &labels[..12], &ProbeConfig::default())
        .unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.per_class_accuracy.len(), 4);
}

#[test]
fn probe_rejects_single_class() {
    let (x, _) = blobs(10, 3, 0.1);
    let y = vec![0; 10];
    assert!(matches!(
        linear_probe(&x, &y, &x, &y, &ProbeConfig::default()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn ahc_singletons_and_bounds() {
    let (x, _) = blobs(6, 4, 1.0);
    assert_eq!(ahc_cluster(&x, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(ahc_cluster(&x, 1).unwrap(), vec![0; 6]);
    assert!(matches!(ahc_cluster(&x, 0), Err(Error::Validation(_))));
}

fn small_model() -> ModelConfig {
    ModelConfig {
        m: 32,
        k_list: vec![3, 5, 7],
        edge_width: 4,
        point_conv_width: 4,
        conv_widths: vec![8, 12],
        shape_mlp_widths: vec![12],
        d_shape: 10,
        d_point: 22,
        k_ub: 6,
        classifier_widths: vec![16],
        decoder_widths: vec![16],
        ..ModelConfig::desk()
    }
}

#[test]
fn export_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(&ShapeKind::ALL, 3, 32, 0.0, 1).unwrap();
    let model = Model::new(small_model()).unwrap();
    let store = model.init_params(&mut stream(0));
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("sub/b.tsv");
    assert_eq!(export_embeddings(&ds, &model, &store, &a).unwrap(), 12);
    export_embeddings(&ds, &model, &store, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines.iter().all(|l| l.split('\t').count() == 12));

    let clouds: Vec<_> = ds.clouds.iter().collect();
    let feats = shape_features(&model, &store, &clouds).unwrap();
    let first: Vec<f64> = lines[1].split('\t').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, feats.row(0));
    assert!(lines[1].starts_with(&format!("{}\t0\t", ds.ids[0])));

    let report = dir.path().join("r.tsv");
    write_report(&report, &[("accuracy".into(), 0.5), ("nmi".into(), 0.25)]).unwrap();
    assert_eq!(std::fs::read_to_string(&report).unwrap(), "accuracy\t0.5\nnmi\t0.25\n");
}

fn partition(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, n)
}

proptest! {
    #[test]
    fn nmi_matches_oracle_and_is_symmetric((a, b) in (1usize..40).prop_flat_map(|n| (partition(n), partition(n)))) {
        let ab = nmi(&a, &b).unwrap();
        let ba = nmi(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - nmi_oracle(&a, &b).clamp(0.0, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn nmi_and_majority_vote_ignore_ids(
        (a, b) in (1usize..40).prop_flat_map(|n| (partition(n), partition(n))),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let relabeled: Vec<usize> = a.iter().map(|&x| perm[x] + 10).collect();
        prop_assert!((nmi(&a, &b).unwrap() - nmi(&relabeled, &b).unwrap()).abs() < 1e-12);
        prop_assert_eq!(majority_vote_accuracy(&a, &b).unwrap(), majority_vote_accuracy(&relabeled, &b).unwrap());
    }

    #[test]
    fn majority_vote_bounds(truth in (1usize..40).prop_flat_map(partition)) {
        let mut counts = [0usize; 4];
        truth.iter().for_each(|&t| counts[t] += 1);
        let prior = *counts.iter().max().unwrap() as f64 / truth.len() as f64;
        prop_assert_eq!(majority_vote_accuracy(&truth, &truth).unwrap(), 1.0);
        prop_assert!((majority_vote_accuracy(&vec![0; truth.len()], &truth).unwrap() - prior).abs() < 1e-12);
    }

    #[test]
    fn ahc_matches_linkage_oracle(seed in any::<u64>(), k in 1usize..=8) {
        let mut rng = stream(seed);
        let x = Tensor::new(vec![8, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        prop_assert_eq!(ahc_cluster(&x, k).unwrap(), ahc_oracle(&x, k).unwrap());
    }

    #[test]
    fn miou_is_one_on_perfect_prediction(gt in prop::collection::vec(0usize..5, 1..30)) {
        prop_assert_eq!(shape_miou(&gt, &gt).unwrap(), 1.0);
    }
}
