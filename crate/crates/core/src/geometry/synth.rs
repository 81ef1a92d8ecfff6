//! Synthetic surface samples: a small stand-in for a CAD shape corpus.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{normalize_unit_sphere, Dataset, PointCloud, Split};
use crate::error::{validation_err, Error, Result};
use crate::rng::{derive, Stream};

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
        }
    }

    /// Whether clouds of this kind carry two part labels.
    pub fn has_parts(self) -> bool {
        matches!(self, ShapeKind::Cube | ShapeKind::Cylinder)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| validation_err!("unknown shape kind {:?}", s))
    }
}

/// Raw surface sample in canonical pose, before noise or normalization.
///
/// Sphere: unit radius. Cube: `[-1, 1]³`, part 1 is the `+z` face.
/// Cylinder: radius 1, `z ∈ [-1, 1]`, part 1 is the two caps. Torus: major
/// radius 1, minor radius 0.4 around the z axis. Points are area-uniform.
pub fn sample_surface(kind: ShapeKind, m: usize, rng: &mut Stream) -> PointCloud {
    let mut points = Vec::with_capacity(m);
    let mut parts = Vec::with_capacity(m);
    for _ in 0..m {
        let (p, part) = match kind {
            ShapeKind::Sphere => {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                ([v[0] / n, v[1] / n, v[2] / n], 0)
            }
            ShapeKind::Cube => {
                let face = rng.gen_range(0..6usize);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let v: f64 = rng.gen_range(-1.0..=1.0);
                let p = match axis {
                    0 => [sign, u, v],
                    1 => [u, sign, v],
                    _ => [u, v, sign],
                };
                (p, usize::from(axis == 2 && sign > 0.0))
            }
            ShapeKind::Cylinder => {
                let theta = rng.gen_range(0.0..2.0 * PI);
                // caps: 2πr² of the 2πr² + 2πr·h total area with r = 1, h = 2
                if rng.gen_bool(1.0 / 3.0) {
                    let r = rng.gen::<f64>().sqrt();
                    let z = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    ([r * theta.cos(), r * theta.sin(), z], 1)
                } else {
                    let z = rng.gen_range(-1.0..=1.0);
                    ([theta.cos(), theta.sin(), z], 0)
                }
            }
            ShapeKind::Torus => {
                let theta = rng.gen_range(0.0..2.0 * PI);
                // area element ∝ (R + r cos φ): rejection sample φ
                let phi = loop {
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let accept = (TORUS_MAJOR + TORUS_MINOR * f64::cos(phi))
                        / (TORUS_MAJOR + TORUS_MINOR);
                    if rng.gen::<f64>() < accept {
                        break phi;
                    }
                };
                let ring = TORUS_MAJOR + TORUS_MINOR * phi.cos();
                (
                    [ring * theta.cos(), ring * theta.sin(), TORUS_MINOR * phi.sin()],
                    0,
                )
            }
        };
        points.push(p);
        parts.push(part);
    }
    PointCloud {
        points,
        shape_label: None,
        part_labels: kind.has_parts().then_some(parts),
    }
}

/// Samples `m` surface points, jitters them with Gaussian noise of standard
/// deviation `noise` and normalizes to the unit sphere.
pub fn synth_generate(kind: ShapeKind, m: usize, noise: f64, rng: &mut Stream) -> Result<PointCloud> {
    if m < 16 {
        return Err(validation_err!("synthetic clouds need at least 16 points, got {}", m));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(validation_err!("noise must be finite and >= 0, got {}", noise));
    }
    let mut cloud = sample_surface(kind, m, rng);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("checked std");
        for p in &mut cloud.points {
            for c in p.iter_mut() {
                *c += normal.sample(rng);
            }
        }
    }
    Ok(normalize_unit_sphere(&cloud)?.cloud)
}

/// Builds a dataset of `per_class` clouds per kind, split 70/10/20 within
/// each class. Category ids follow the order of `kinds`.
pub fn synth_dataset(
    kinds: &[ShapeKind],
    per_class: usize,
    m: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if kinds.is_empty() {
        return Err(validation_err!("at least one shape kind is required"));
    }
    if per_class == 0 {
        return Err(validation_err!("per-class count must be positive"));
    }
    let mut ids = Vec::new();
    let mut clouds = Vec::new();
    let mut splits = Vec::new();
    let n_train = per_class * 7 / 10;
    let n_val = per_class / 10;
    for (label, &kind) in kinds.iter().enumerate() {
        for i in 0..per_class {
            let mut rng: Stream = derive(seed, &[label as u64, i as u64]);
            let mut cloud = synth_generate(kind, m, noise, &mut rng)?;
            cloud.shape_label = Some(label);
            ids.push(format!("{}/{}_{:04}", kind, kind, i));
            clouds.push(cloud);
            splits.push(if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    let ds = Dataset {
        ids,
        clouds,
        splits,
        category_names: kinds.iter().map(|k| k.name().to_string()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_norm(p: &[f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }
    use crate::rng::stream;

    #[test]
    fn sphere_points_lie_on_the_unit_sphere() {
        let c = sample_surface(ShapeKind::Sphere, 500, &mut stream(1));
        assert!(c.points.iter().all(|p| (point_norm(p) - 1.0).abs() < 1e-9));
    }

    #[test]
    fn two_part_kinds_have_both_parts() {
        for kind in [ShapeKind::Cylinder, ShapeKind::Cube] {
            for seed in 0..20 {
                let c = synth_generate(kind, 64, 0.0, &mut stream(seed)).unwrap();
                let parts = c.part_labels.unwrap();
                assert!(parts.contains(&0) && parts.contains(&1), "{kind} seed {seed}");
            }
        }
        let s = synth_generate(ShapeKind::Torus, 64, 0.0, &mut stream(0)).unwrap();
        assert!(s.part_labels.is_none());
    }

    #[test]
    fn cylinder_caps_sit_on_the_ends() {
        let c = sample_surface(ShapeKind::Cylinder, 400, &mut stream(2));
        for (p, &part) in c.points.iter().zip(c.part_labels.as_ref().unwrap()) {
            if part == 1 {
                assert!(p[2].abs() == 1.0);
            } else {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        for kind in ShapeKind::ALL {
            let a = synth_generate(kind, 128, 0.01, &mut stream(3)).unwrap();
            let b = synth_generate(kind, 128, 0.01, &mut stream(3)).unwrap();
            assert_eq!(a, b);
            let bits = |c: &PointCloud| c.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            let max = a.points.iter().map(point_norm).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_parsing_and_guards() {
        assert_eq!("torus".parse::<ShapeKind>().unwrap(), ShapeKind::Torus);
        assert!(matches!("cone".parse::<ShapeKind>(), Err(Error::Validation(_))));
        assert!(synth_generate(ShapeKind::Cube, 15, 0.0, &mut stream(0)).is_err());
        assert!(synth_dataset(&[], 10, 32, 0.0, 0).is_err());
    }

    #[test]
    fn dataset_split_counts() {
        let ds = synth_dataset(&ShapeKind::ALL, 10, 32, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.indices(Split::Train).len(), 28);
        assert_eq!(ds.indices(Split::Val).len(), 4);
        assert_eq!(ds.indices(Split::Test).len(), 8);
    }
}
