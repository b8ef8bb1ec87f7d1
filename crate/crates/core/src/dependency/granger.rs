use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::data::{RoadId, SpeedPanel};
use crate::{Error, Result};

/// Largest lag considered: one hour of 5-minute steps.
pub const DEFAULT_MAX_LAG: usize = 12;
/// Results at or above this p-value are not shown.
pub const SIGNIFICANCE: f64 = 0.05;

/// Information criterion used to pick the lag order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LagCriterion {
    /// Over-selects lags under the null often enough to push the test's size
    /// to roughly 9-11% at nominal 5%.
    Aic,
    #[default]
    Bic,
}

impl LagCriterion {
    fn penalty(self, n: f64, params: usize) -> f64 {
        let per = match self {
            LagCriterion::Aic => 2.0,
            LagCriterion::Bic => n.ln(),
        };
        per * params as f64
    }
}

/// Outcome of one bivariate linear Granger F-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrangerTest {
    pub lag: usize,
    pub f_value: f64,
    /// `(L, n - 2L - 1)`.
    pub dof: (usize, usize),
    pub p_value: f64,
}

impl GrangerTest {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE
    }
}

/// Renders as `F[6,268]=16.2, p=0.001` (`p<0.001` below that).
impl fmt::Display for GrangerTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F[{},{}]={:.1}, ", self.dof.0, self.dof.1, self.f_value)?;
        if self.p_value < 0.001 {
            write!(f, "p<0.001")
        } else {
            write!(f, "p={:.3}", self.p_value)
        }
    }
}

/// "`cause` Granger-causes `effect`" test result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityResult {
    pub cause: RoadId,
    pub effect: RoadId,
    #[serde(flatten)]
    pub test: GrangerTest,
    pub displayable: bool,
}

impl fmt::Display for CausalityResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}: {}", self.cause, self.effect, self.test)
    }
}

/// Design matrix `[1, y_{t-1..L}, x_{t-1..L}]` over targets `t in from..n`.
fn design(y: &[f64], x: Option<&[f64]>, lag: usize, from: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = y.len() - from;
    let cols = 1 + lag + if x.is_some() { lag } else { 0 };
    let m = DMatrix::from_fn(rows, cols, |r, c| {
        let t = from + r;
        match c {
            0 => 1.0,
            c if c <= lag => y[t - c],
            c => x.expect("x lags")[t - (c - lag)],
        }
    });
    let target = DVector::from_fn(rows, |r, _| y[from + r]);
    (m, target)
}

/// Residual sum of squares of an OLS fit, or `None` if the design is rank deficient.
fn ols_rss(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<f64> {
    // Scale columns to unit norm so the rank check does not depend on units.
    let scales: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    if scales.iter().any(|&s| s == 0.0) {
        return None;
    }
    let mut xs = x.clone();
    for (j, s) in scales.iter().enumerate() {
        xs.column_mut(j).unscale_mut(*s);
    }
    let qr = xs.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * diag_max) {
        return None;
    }
    let q = qr.q();
    let beta = r.solve_upper_triangular(&(q.transpose() * y))?;
    let resid = y - &xs * beta;
    Some(resid.norm_squared())
}

/// [`granger_test_with`] using the default (BIC) lag criterion.
pub fn granger_test(x: &[f64], y: &[f64], max_lag: usize) -> Result<GrangerTest> {
    granger_test_with(x, y, max_lag, LagCriterion::default())
}

/// Does the past of `x` help predict `y` beyond `y`'s own past?
///
/// The lag `L` in `1..=max_lag` minimises the information criterion of the
/// unrestricted model, all candidates fitted on the same sample (targets from
/// `max_lag` on). The final F-test refits both models at the chosen lag on
/// targets from `L` on, so `n = len - L` and the denominator has
/// `n - 2L - 1` degrees of freedom.
pub fn granger_test_with(x: &[f64], y: &[f64], max_lag: usize, criterion: LagCriterion) -> Result<GrangerTest> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if max_lag == 0 {
        return Err(Error::invalid("max_lag must be at least 1"));
    }
    if y.len() <= 3 * max_lag {
        return Err(Error::invalid(format!(
            "series of length {} is too short for lag {max_lag}",
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contain non-finite values"));
    }

    let mut best: Option<(f64, usize)> = None;
    for lag in 1..=max_lag {
        let (m, t) = design(y, Some(x), lag, max_lag);
        let Some(rss) = ols_rss(&m, &t) else {
            continue;
        };
        let n = t.len() as f64;
        let ic = n * (rss.max(f64::MIN_POSITIVE) / n).ln() + criterion.penalty(n, 2 * lag + 1);
        if best.is_none_or(|(b, _)| ic < b) {
            best = Some((ic, lag));
        }
    }
    let Some((_, lag)) = best else {
        return Err(Error::Untestable("regressors are rank deficient at every lag".into()));
    };

    let (mu, tu) = design(y, Some(x), lag, lag);
    let (mr, tr) = design(y, None, lag, lag);
    let untestable = || Error::Untestable("rank-deficient regressors (constant series?)".into());
    let rss_u = ols_rss(&mu, &tu).ok_or_else(untestable)?;
    let rss_r = ols_rss(&mr, &tr).ok_or_else(untestable)?;
    let n = tu.len();
    let df2 = n - 2 * lag - 1;
    if rss_u <= 1e-12 * rss_r.max(f64::MIN_POSITIVE) || rss_u == 0.0 {
        return Err(Error::Untestable("unrestricted model fits exactly".into()));
    }
    let f_value = (((rss_r - rss_u) / lag as f64) / (rss_u / df2 as f64)).max(0.0);
    let dist = FisherSnedecor::new(lag as f64, df2 as f64)
        .map_err(|e| Error::invalid(format!("F distribution: {e}")))?;
    let p_value = dist.sf(f_value).clamp(0.0, 1.0);
    Ok(GrangerTest {
        lag,
        f_value,
        dof: (lag, df2),
        p_value,
    })
}

/// Tests `candidate -> target` for every candidate other than the target.
/// Untestable pairs are skipped. Results keep candidate order.
pub fn granger_pairs(
    target: &RoadId,
    candidates: &[RoadId],
    panel: &SpeedPanel,
    max_lag: usize,
) -> Result<Vec<CausalityResult>> {
    granger_pairs_with(target, candidates, panel, max_lag, LagCriterion::default())
}

pub fn granger_pairs_with(
    target: &RoadId,
    candidates: &[RoadId],
    panel: &SpeedPanel,
    max_lag: usize,
    criterion: LagCriterion,
) -> Result<Vec<CausalityResult>> {
    let y = panel.series_of(target)?;
    let xs = candidates
        .iter()
        .filter(|c| *c != target)
        .map(|c| Ok((c, panel.series_of(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Option<CausalityResult>> = xs
        .par_iter()
        .map(|(c, x)| match granger_test_with(x, y, max_lag, criterion) {
            Ok(test) => Ok(Some(CausalityResult {
                cause: (*c).clone(),
                effect: target.clone(),
                displayable: test.significant(),
                test,
            })),
            Err(Error::Untestable(why)) => {
                tracing::debug!(cause = %c, effect = %target, "skipping untestable pair: {why}");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Significant candidates for `target`, strongest F first (ties by road id).
pub fn causality_scan(
    target: &RoadId,
    candidates: &[RoadId],
    panel: &SpeedPanel,
    max_lag: usize,
) -> Result<Vec<CausalityResult>> {
    causality_scan_with(target, candidates, panel, max_lag, LagCriterion::default())
}

pub fn causality_scan_with(
    target: &RoadId,
    candidates: &[RoadId],
    panel: &SpeedPanel,
    max_lag: usize,
    criterion: LagCriterion,
) -> Result<Vec<CausalityResult>> {
    if candidates.is_empty() {
        return Err(Error::invalid("causality scan needs at least one candidate"));
    }
    let mut out: Vec<CausalityResult> = granger_pairs_with(target, candidates, panel, max_lag, criterion)?
        .into_iter()
        .filter(|r| r.displayable)
        .collect();
    out.sort_by(|a, b| {
        b.test
            .f_value
            .total_cmp(&a.test.f_value)
            .then_with(|| a.cause.cmp(&b.cause))
    });
    Ok(out)
}
