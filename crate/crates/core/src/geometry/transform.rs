use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud};
use crate::error::{config_err, validation_err, Result};
use crate::rng::Stream;

/// Result of [`normalize_unit_sphere`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub cloud: PointCloud,
    /// Set when every point coincided and the output is all zeros.
    pub degenerate: bool,
}

/// Centres the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<Normalized> {
    if cloud.is_empty() {
        return Err(validation_err!("cannot normalize an empty cloud"));
    }
    cloud.validate()?;
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.points {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centred: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centred
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        log::warn!("degenerate cloud: all {} points coincide", cloud.len());
        return Ok(Normalized {
            cloud: cloud.with_points(vec![[0.0; 3]; cloud.len()]),
            degenerate: true,
        });
    }
    let points = centred
        .iter()
        .map(|p| [p[0] / max_norm, p[1] / max_norm, p[2] / max_norm])
        .collect();
    Ok(Normalized {
        cloud: cloud.with_points(points),
        degenerate: false,
    })
}

/// Draws `m` points uniformly, without replacement when the cloud is large
/// enough. Part labels travel with their points.
pub fn sample_points(cloud: &PointCloud, m: usize, rng: &mut Stream) -> Result<PointCloud> {
    if m == 0 {
        return Err(validation_err!("sample size must be positive"));
    }
    if cloud.is_empty() {
        return Err(validation_err!("cannot sample from an empty cloud"));
    }
    let picks: Vec<usize> = if cloud.len() >= m {
        rand::seq::index::sample(rng, cloud.len(), m).into_vec()
    } else {
        (0..m).map(|_| rng.gen_range(0..cloud.len())).collect()
    };
    Ok(PointCloud {
        points: picks.iter().map(|&i| cloud.points[i]).collect(),
        shape_label: cloud.shape_label,
        part_labels: cloud
            .part_labels
            .as_ref()
            .map(|parts| picks.iter().map(|&i| parts[i]).collect()),
    })
}

/// Training-time jitter and rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of per-coordinate Gaussian noise.
    pub noise_std: f64,
    /// Rotation about z drawn from `[-rotate_z_deg, rotate_z_deg]`.
    pub rotate_z_deg: f64,
    /// Rotations about x and y drawn from `[-rotate_xy_deg, rotate_xy_deg]`.
    pub rotate_xy_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.01,
            rotate_z_deg: 180.0,
            rotate_xy_deg: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            noise_std: 0.0,
            rotate_z_deg: 0.0,
            rotate_xy_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.noise_std) || !ok(self.rotate_z_deg) || !ok(self.rotate_xy_deg) {
            return Err(config_err!("augmentation ranges must be finite and >= 0: {:?}", self));
        }
        Ok(())
    }
}

/// `Rx(ax) · Ry(ay) · Rz(az)`: applied to a point, z acts first, then y, then x.
pub fn rotation_matrix(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&matmul3(&rx, &ry), &rz)
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn uniform_angle(range_deg: f64, rng: &mut Stream) -> f64 {
    let u: f64 = rng.gen_range(-1.0..=1.0);
    (u * range_deg).to_radians()
}

/// Rotates the cloud once to produce the clean reconstruction target, then
/// adds i.i.d. Gaussian noise to form the encoder input.
///
/// Returns `(noisy, clean)`.
pub fn augment(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut Stream,
) -> (PointCloud, PointCloud) {
    let az = uniform_angle(cfg.rotate_z_deg, rng);
    let ay = uniform_angle(cfg.rotate_xy_deg, rng);
    let ax = uniform_angle(cfg.rotate_xy_deg, rng);
    let r = rotation_matrix(ax, ay, az);
    let clean_pts: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| {
            [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
            ]
        })
        .collect();
    let noisy_pts = if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        clean_pts
            .iter()
            .map(|p| {
                [
                    p[0] + normal.sample(rng),
                    p[1] + normal.sample(rng),
                    p[2] + normal.sample(rng),
                ]
            })
            .collect()
    } else {
        clean_pts.clone()
    };
    (cloud.with_points(noisy_pts), cloud.with_points(clean_pts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn norm(p: &Point) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = stream(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-3.0..5.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)])
                .collect(),
        )
    }

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.cloud.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(!n.degenerate);
    }

    #[test]
    fn normalize_is_idempotent_with_unit_max_norm() {
        for seed in 0..20 {
            let once = normalize_unit_sphere(&random_cloud(50, seed)).unwrap().cloud;
            let max = once.points.iter().map(norm).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
            let twice = normalize_unit_sphere(&once).unwrap().cloud;
            for (a, b) in once.points.iter().zip(&twice.points) {
                for d in 0..3 {
                    assert!((a[d] - b[d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_cloud_flags_and_zeroes() {
        let c = PointCloud::new(vec![[1.5, -2.0, 3.0]; 4]);
        let n = normalize_unit_sphere(&c).unwrap();
        assert!(n.degenerate);
        assert!(n.cloud.points.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn sampling_rules() {
        let mut c = random_cloud(10, 1);
        c.part_labels = Some((0..10).collect());
        let mut rng = stream(2);
        let all = sample_points(&c, 10, &mut rng).unwrap();
        let mut ids = all.part_labels.clone().unwrap();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        for (p, &l) in all.points.iter().zip(all.part_labels.as_ref().unwrap()) {
            assert_eq!(*p, c.points[l]);
        }
        let up = sample_points(&c, 25, &mut rng).unwrap();
        assert_eq!(up.len(), 25);
        assert!(sample_points(&c, 0, &mut rng).is_err());

        let three = random_cloud(3, 4);
        let a = sample_points(&three, 1, &mut stream(9)).unwrap();
        let b = sample_points(&three, 1, &mut stream(9)).unwrap();
        assert_eq!(a, b);
        assert!(three.points.contains(&a.points[0]));
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = stream(3);
        for _ in 0..100 {
            let r = rotation_matrix(rng.gen_range(-3.2..3.2), rng.gen_range(-3.2..3.2), rng.gen_range(-3.2..3.2));
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_augmentation() {
        let c = random_cloud(30, 5);
        let (noisy, clean) = augment(&c, &AugmentConfig::disabled(), &mut stream(1));
        assert_eq!(noisy, c);
        assert_eq!(clean, c);
    }

    #[test]
    fn augmentation_is_an_isometry_plus_noise() {
        let c = random_cloud(2048, 6);
        let cfg = AugmentConfig::default();
        let (noisy, clean) = augment(&c, &cfg, &mut stream(7));
        for i in (0..2048).step_by(97) {
            for j in (0..2048).step_by(89) {
                let d0 = norm(&sub(&c.points[i], &c.points[j]));
                let d1 = norm(&sub(&clean.points[i], &clean.points[j]));
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        let mean_abs: f64 = noisy
            .points
            .iter()
            .zip(&clean.points)
            .flat_map(|(a, b)| (0..3).map(move |d| (a[d] - b[d]).abs()))
            .sum::<f64>()
            / (2048.0 * 3.0);
        assert!((0.006..=0.010).contains(&mean_abs), "{mean_abs}");
    }

    fn sub(a: &Point, b: &Point) -> Point {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
}
