use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RoadId, TrendVector};
use crate::{Error, Result};

/// Band half-width in 5-minute slots (up to 20 minutes of shift).
pub const DEFAULT_DTW_WINDOW: usize = 4;

/// Zero mean, unit (population) variance; a constant series maps to zeros.
pub fn znormalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - m) / sd).collect()
}

/// Banded DTW with L1 local cost on the series as given.
///
/// Cells with `|i - j| > window` are unreachable. Costs accumulate along the
/// path from `(0, 0)`, so the result is bit-identical to summing the cheapest
/// admissible path's costs in order.
pub fn dtw_raw(a: &[f64], b: &[f64], window: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut prev = vec![f64::INFINITY; n];
    let mut cur = vec![f64::INFINITY; n];
    for i in 0..n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        for j in lo..=hi {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut m = f64::INFINITY;
                if i > 0 {
                    m = m.min(prev[j]);
                    if j > 0 {
                        m = m.min(prev[j - 1]);
                    }
                }
                if j > 0 {
                    m = m.min(cur[j - 1]);
                }
                m
            };
            cur[j] = best + (a[i] - b[j]).abs();
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n - 1])
}

/// DTW between two daily trends after z-normalising each.
pub fn dtw_distance(a: &TrendVector, b: &TrendVector, window: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    dtw_raw(&znormalize(&a.slots), &znormalize(&b.slots), window)
}

/// Symmetric road-by-road distance matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<RoadId>,
    pub d: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Checks symmetry, zero diagonal and finiteness.
    pub fn new(ids: Vec<RoadId>, d: Vec<Vec<f64>>) -> Result<Self> {
        let n = ids.len();
        if d.len() != n || d.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("distance matrix shape does not match its ids"));
        }
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(Error::invalid("distance matrix diagonal must be zero"));
            }
            for j in 0..n {
                if !d[i][j].is_finite() || d[i][j] < 0.0 || d[i][j] != d[j][i] {
                    return Err(Error::invalid("distances must be finite, non-negative and symmetric"));
                }
            }
        }
        Ok(DistanceMatrix { ids, d })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, road: &RoadId) -> Option<usize> {
        self.ids.iter().position(|r| r == road)
    }

    pub fn get(&self, a: &RoadId, b: &RoadId) -> Option<f64> {
        Some(self.d[self.index_of(a)?][self.index_of(b)?])
    }

    /// Upper-triangle entries, row-major.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.d[i][j])
            .collect()
    }

    /// The same matrix with roads listed in `order`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        DistanceMatrix {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            d: order
                .iter()
                .map(|&i| order.iter().map(|&j| self.d[i][j]).collect())
                .collect(),
        }
    }
}

/// Pairwise DTW over all roads. Pairs run in parallel; each unordered pair is
/// computed once and mirrored.
pub fn dtw_matrix(ids: &[RoadId], trends: &[TrendVector], window: usize) -> Result<DistanceMatrix> {
    if ids.len() != trends.len() {
        return Err(Error::invalid("one trend per road is required"));
    }
    if let Some(t) = trends.iter().find(|t| t.len() != trends[0].len()) {
        return Err(Error::LengthMismatch {
            left: trends[0].len(),
            right: t.len(),
        });
    }
    let n = ids.len();
    let normed: Vec<Vec<f64>> = trends.iter().map(|t| znormalize(&t.slots)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| dtw_raw(&normed[i], &normed[j], window))
        .collect::<Result<Vec<f64>>>()?;
    let mut d = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        d[i][j] = v;
        d[j][i] = v;
    }
    Ok(DistanceMatrix { ids: ids.to_vec(), d })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_are_at_zero() {
        let a = [1.0, 3.0, 2.0, 5.0];
        for w in 0..5 {
            assert_eq!(dtw_raw(&a, &a, w).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_window_is_pointwise_l1() {
        let a = [0.0, 0.0, 1.0, 0.0];
        let b = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(dtw_raw(&a, &b, 0).unwrap(), 2.0);
        assert_eq!(dtw_raw(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dtw_raw(&a, &b, 4).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(dtw_raw(&[1.0], &[1.0, 2.0], 1), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn znormalize_constant_is_zero() {
        assert_eq!(znormalize(&[5.0, 5.0]), vec![0.0, 0.0]);
        let z = znormalize(&[1.0, 3.0]);
        assert_eq!(z, vec![-1.0, 1.0]);
    }
}
