use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dtw::DistanceMatrix;
use crate::data::RoadId;
use crate::{Error, Result};

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 100;

/// Road to cluster labels. Labels are numbered by first appearance in road
/// order, so equal partitions always carry equal labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub ids: Vec<RoadId>,
    pub labels: Vec<usize>,
    /// Set when the affinity carried no structure and everything landed in one cluster.
    pub degenerate: bool,
    /// Elbow curve, when one was computed alongside.
    #[serde(default)]
    pub elbow: Vec<ElbowPoint>,
}

impl ClusterAssignment {
    pub fn label_of(&self, road: &RoadId) -> Option<usize> {
        self.ids.iter().position(|r| r == road).map(|i| self.labels[i])
    }

    pub fn members(&self, cluster: usize) -> Vec<RoadId> {
        self.ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(r, _)| r.clone())
            .collect()
    }
}

fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = Vec::<(usize, usize)>::new();
    raw.iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's k-means with k-means++ seeding, best of several restarts.
fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let pick = if total <= 0.0 {
                rng.random_range(0..n)
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if u < w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                idx
            };
            centers.push(points[pick].clone());
        }
        let mut labels = vec![0; n];
        for _ in 0..KMEANS_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bl = 0;
                let mut bd = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p, center);
                    if d < bd {
                        bd = d;
                        bl = c;
                    }
                }
                if labels[i] != bl {
                    labels[i] = bl;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let sse: f64 = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-12) {
            best = Some((sse, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Spectral clustering of a distance matrix.
///
/// Affinity is `exp(-d² / 2σ²)` with σ the median off-diagonal distance (the
/// median of the positive distances when more than half are zero). The `k`
/// eigenvectors of the symmetric normalised Laplacian with the smallest
/// eigenvalues are row-normalised and grouped by seeded k-means.
pub fn spectral_cluster(d: &DistanceMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = d.len();
    if k < 2 || k >= n {
        return Err(Error::invalid(format!("cluster count must lie in [2, {n}), got {k}")));
    }
    let off = d.off_diagonal();
    let mut sigma = median(off.clone());
    if sigma <= 0.0 {
        sigma = median(off.iter().copied().filter(|&x| x > 0.0).collect());
    }
    if sigma <= 0.0 {
        tracing::warn!("all trends are identical; returning a single cluster");
        return Ok(ClusterAssignment {
            k: 1,
            ids: d.ids.clone(),
            labels: vec![0; n],
            degenerate: true,
            elbow: Vec::new(),
        });
    }

    // The diagonal keeps its affinity of 1 (d_ii = 0).
    let w = DMatrix::from_fn(n, n, |i, j| (-d.d[i][j].powi(2) / (2.0 * sigma * sigma)).exp());
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = w.row(i).sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = canonical_labels(&kmeans(&points, k, &mut rng));
    Ok(ClusterAssignment {
        k,
        ids: d.ids.clone(),
        labels,
        degenerate: false,
        elbow: Vec::new(),
    })
}

/// Mean DTW distance over all same-cluster pairs (0 when no such pair exists).
fn within_cluster_mean(d: &DistanceMatrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                sum += d.d[i][j];
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    /// Within-cluster mean distance of the k-cluster solution.
    pub raw_inertia: f64,
    /// Running minimum of `raw_inertia` over `1..=k`.
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub suggested_k: usize,
    pub curve: Vec<ElbowPoint>,
}

/// Elbow suggestion over `k = 1..=k_max`.
///
/// `k = 1` (every road together) anchors the curve so a two-cluster elbow is
/// visible. The curve is the running minimum of the raw inertia, hence never
/// increasing; the suggestion is the `k` in `2..k_max` with the largest second
/// difference, or `k_max` itself when `k_max = 2`.
pub fn elbow_suggest(d: &DistanceMatrix, k_max: usize, seed: u64) -> Result<ElbowResult> {
    let n = d.len();
    if k_max < 2 {
        return Err(Error::invalid("k_max must be at least 2"));
    }
    if k_max >= n {
        return Err(Error::invalid(format!("k_max ({k_max}) must be below the road count ({n})")));
    }
    let mut curve = Vec::with_capacity(k_max);
    let mut env = f64::INFINITY;
    for k in 1..=k_max {
        let raw = if k == 1 {
            within_cluster_mean(d, &vec![0; n])
        } else {
            let a = spectral_cluster(d, k, seed)?;
            within_cluster_mean(d, &a.labels)
        };
        env = env.min(raw);
        curve.push(ElbowPoint {
            k,
            raw_inertia: raw,
            inertia: env,
        });
    }
    let mut suggested_k = 2;
    let mut best = f64::NEG_INFINITY;
    for k in 2..k_max {
        let c = |k: usize| curve[k - 1].inertia;
        let bend = c(k - 1) - 2.0 * c(k) + c(k + 1);
        if bend > best + 1e-12 {
            best = bend;
            suggested_k = k;
        }
    }
    Ok(ElbowResult { suggested_k, curve })
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len());
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(sizes: &[usize], gap: f64) -> DistanceMatrix {
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
        let n = labels.len();
        let d = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else if labels[i] == labels[j] {
                            0.1 + 0.01 * ((i + j) % 3) as f64
                        } else {
                            gap
                        }
                    })
                    .collect()
            })
            .collect();
        DistanceMatrix::new((0..n).map(|i| RoadId::new(format!("r{i}"))).collect(), d).unwrap()
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
    }

    #[test]
    fn separated_blocks_are_recovered() {
        let d = blocks(&[4, 3, 5], 5.0);
        let a = spectral_cluster(&d, 3, 1).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert_eq!(a, spectral_cluster(&d, 3, 1).unwrap());
    }

    #[test]
    fn degenerate_distances_give_one_cluster() {
        let d = DistanceMatrix::new(vec!["a".into(), "b".into(), "c".into()], vec![vec![0.0; 3]; 3]).unwrap();
        let a = spectral_cluster(&d, 2, 0).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.k, 1);
        assert_eq!(a.labels, vec![0, 0, 0]);
    }

    #[test]
    fn cluster_count_bounds() {
        let d = blocks(&[2, 2], 1.0);
        assert!(spectral_cluster(&d, 1, 0).is_err());
        assert!(spectral_cluster(&d, 4, 0).is_err());
        assert!(elbow_suggest(&d, 4, 0).is_err());
    }

    #[test]
    fn elbow_finds_planted_count() {
        let d = blocks(&[3, 3, 3, 3], 4.0);
        let e = elbow_suggest(&d, 7, 0).unwrap();
        assert_eq!(e.suggested_k, 4);
        assert!(e.curve.windows(2).all(|w| w[1].inertia <= w[0].inertia));
    }
}
