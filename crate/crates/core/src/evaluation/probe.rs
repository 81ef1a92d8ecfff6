use std::collections::BTreeSet;

use log::debug;
use serde::{Deserialize, Serialize};

use super::{standardize, ProbeResult};
use crate::error::{config_err, dim_err, validation_err, Result};
use crate::tensor::{dot, Tensor};

/// Settings of the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// L2 regularization strength.
    pub lambda: f64,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

/// Largest eigenvalue of `AᵀA` for `A = [x | 1]`, by power iteration.
fn max_eigen_gram(x: &Tensor) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut v = vec![1.0; d + 1];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; d + 1];
        for i in 0..n {
            let row = x.row(i);
            let s = dot(row, &v[..d]) + v[d];
            for (o, r) in next[..d].iter_mut().zip(row) {
                *o += s * r;
            }
            next[d] += s;
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let done = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next.into_iter().map(|e| e / norm).collect();
        if done {
            break;
        }
    }
    lambda
}

/// One-vs-rest squared-hinge classifier `sign(w·x + b)` trained by gradient
/// descent with step `1/L`. Returns `(w, b)`.
fn train_binary(x: &Tensor, y: &[f64], lipschitz: f64, cfg: &ProbeConfig) -> (Vec<f64>, f64) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let step = 1.0 / lipschitz;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut prev = f64::INFINITY;
    for it in 0..cfg.max_iter {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for i in 0..n {
            let row = x.row(i);
            let margin = 1.0 - y[i] * (dot(row, &w) + b);
            if margin > 0.0 {
                loss += margin * margin;
                let c = -2.0 * margin * y[i] / n as f64;
                for (g, r) in gw.iter_mut().zip(row) {
                    *g += c * r;
                }
                gb += c;
            }
        }
        loss = loss / n as f64 + 0.5 * cfg.lambda * dot(&w, &w);
        if (prev - loss).abs() < cfg.tol {
            debug!("probe converged after {it} iterations, loss {loss:.6}");
            break;
        }
        prev = loss;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * (g + cfg.lambda * *wi);
        }
        b -= step * gb;
    }
    (w, b)
}

/// Trains a linear classifier on standardized frozen features and reports
/// test accuracy.
pub fn linear_probe(
    train_feats: &Tensor,
    train_labels: &[usize],
    test_feats: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if !(cfg.lambda > 0.0) || !(cfg.tol > 0.0) {
        return Err(config_err!("probe lambda and tolerance must be positive"));
    }
    let (n, d) = train_feats.dims2()?;
    let (nt, dt) = test_feats.dims2()?;
    if n != train_labels.len() || nt != test_labels.len() || d != dt {
        return Err(dim_err!(
            "probe inputs disagree: train {:?} with {} labels, test {:?} with {} labels",
            train_feats.shape(),
            train_labels.len(),
            test_feats.shape(),
            test_labels.len()
        ));
    }
    let classes: Vec<usize> = train_labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(validation_err!("linear probe needs at least two training classes"));
    }
    let (x, rest) = standardize(train_feats, &[test_feats])?;
    let xt = &rest[0];
    // gradient of the mean squared hinge is 2/n · ‖[x|1]‖²-Lipschitz
    let lipschitz = 2.0 * max_eigen_gram(&x) / n as f64 + cfg.lambda;
    let models: Vec<(Vec<f64>, f64)> = classes
        .iter()
        .map(|&c| {
            let y: Vec<f64> = train_labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(&x, &y, lipschitz, cfg)
        })
        .collect();
    let pred: Vec<usize> = (0..nt)
        .map(|i| {
            let row = xt.row(i);
            let mut best = (f64::NEG_INFINITY, classes[0]);
            for (&c, (w, b)) in classes.iter().zip(&models) {
                let s = dot(row, w) + b;
                if s > best.0 {
                    best = (s, c);
                }
            }
            best.1
        })
        .collect();
    Ok(ProbeResult::from_predictions(test_labels, &pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separable_blobs() {
        let mut rng = stream(3);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut sample = |n: usize| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let c = i % 2;
                let centre = if c == 0 { -2.0 } else { 2.0 };
                data.push(centre + noise.sample(&mut rng));
                data.push(noise.sample(&mut rng));
                labels.push(c);
            }
            (Tensor::new(vec![n, 2], data).unwrap(), labels)
        };
        let (x, y) = sample(80);
        let (xt, yt) = sample(40);
        let r = linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn one_hot_features() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut data = vec![0.0; 30 * 3];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 3 + l] = 1.0;
        }
        let x = Tensor::new(vec![30, 3], data).unwrap();
        let r = linear_probe(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[4, 2]);
        let err = linear_probe(&x, &[1, 1, 1, 1], &x, &[1, 1, 1, 1], &ProbeConfig::default());
        assert!(matches!(err, Err(crate::Error::Validation(_))));
    }
}
