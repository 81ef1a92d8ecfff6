use crate::error::{validation_err, Result};
use crate::tensor::Tensor;

fn euclidean(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Relabels clusters by order of first appearance.
fn canonical(owner: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    owner
        .iter()
        .map(|&o| {
            let next = map.len();
            *map.entry(o).or_insert(next)
        })
        .collect()
}

/// Average-linkage agglomerative clustering of the rows of `feats` under
/// Euclidean distance, merging until `n_clusters` remain.
///
/// A cluster is identified by its smallest member index; among equally
/// close pairs the lexicographically smallest `(i, j)` merges first. Cluster
/// ids in the result follow first appearance.
pub fn ahc_cluster(feats: &Tensor, n_clusters: usize) -> Result<Vec<usize>> {
    let (n, _) = feats.dims2()?;
    if n_clusters == 0 || n < n_clusters {
        return Err(validation_err!("cannot form {} clusters from {} samples", n_clusters, n));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(feats, i, j);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - n_clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && dist[i * n + j] < best.0 {
                    best = (dist[i * n + j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        // Lance–Williams update for average linkage
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if active[k] && k != i && k != j {
                let d = (si * dist[i * n + k] + sj * dist[j * n + k]) / (si + sj);
                dist[i * n + k] = d;
                dist[k * n + i] = d;
            }
        }
        size[i] += size[j];
        active[j] = false;
        owner.iter_mut().filter(|o| **o == j).for_each(|o| *o = i);
    }
    Ok(canonical(&owner))
}

/// Reference implementation recomputing every linkage from member lists.
pub fn ahc_oracle(feats: &Tensor, n_clusters: usize) -> Result<Vec<usize>> {
    let (n, _) = feats.dims2()?;
    if n_clusters == 0 || n < n_clusters {
        return Err(validation_err!("cannot form {} clusters from {} samples", n_clusters, n));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > n_clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &p in &clusters[a] {
                    for &q in &clusters[b] {
                        total += euclidean(feats, p, q);
                    }
                }
                let link = total / (clusters[a].len() * clusters[b].len()) as f64;
                if link < best.0 {
                    best = (link, a, b);
                }
            }
        }
        let merged = clusters.remove(best.2);
        clusters[best.1].extend(merged);
        // keep clusters ordered by smallest member
        clusters.sort_by_key(|c| *c.iter().min().unwrap());
    }
    let mut owner = vec![0; n];
    for c in &clusters {
        let id = *c.iter().min().unwrap();
        for &p in c {
            owner[p] = id;
        }
    }
    Ok(canonical(&owner))
}
