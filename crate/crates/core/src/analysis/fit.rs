//! Least-squares fits, the rate fit in `N`, and the plateau test in `t`.

use serde::Serialize;

use crate::analysis::estimate::{SweepResult, SweepRow};
use crate::error::{Error, Result};
use crate::reduce::{mean, mean_ci95};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Domain("least squares needs two or more paired points".into()));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Domain("least squares needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Trend of a replicated time series: the OLS slope of each replica's
/// curve, averaged, with a 95% interval across replicas.
///
/// Values at neighbouring times share most of their history, so a slope
/// fitted to the averaged curve would understate its own uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trend {
    pub slope: f64,
    pub ci_half_width: f64,
}

impl Trend {
    /// The interval reaches zero or below, so growth is not established.
    pub fn admits_no_growth(&self) -> bool {
        self.slope - self.ci_half_width <= 0.0
    }
}

pub fn replica_trend(times: &[f64], replicas: &[Vec<f64>]) -> Result<Trend> {
    if replicas.len() < 2 {
        return Err(Error::config("replicas", "trend needs at least 2 replicas"));
    }
    let slopes = replicas
        .iter()
        .map(|series| ols(times, series).map(|f| f.slope))
        .collect::<Result<Vec<_>>>()?;
    let (slope, ci_half_width) = mean_ci95(&slopes);
    Ok(Trend { slope, ci_half_width })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub t_eval: f64,
    pub slope: f64,
    /// Natural log of the fitted prefactor `K`.
    pub intercept: f64,
    pub r_squared: f64,
    pub n_values: Vec<usize>,
    /// Sample sizes dropped because their mean is zero or its interval
    /// reaches zero.
    pub excluded: Vec<usize>,
}

impl RateFit {
    pub fn prefactor(&self) -> f64 {
        self.intercept.exp()
    }

    /// One-sided test: decay at least as fast as `N^-exponent`, up to
    /// `slack`.
    pub fn meets_rate(&self, exponent: f64, slack: f64) -> bool {
        self.slope <= -exponent + slack
    }
}

fn time_matches(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Fit `log h_mean = intercept + slope * log N` at time `t_eval`.
pub fn fit_rate(results: &SweepResult, t_eval: f64) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n_values = Vec::new();
    let mut excluded = Vec::new();
    for row in results.rows.iter().filter(|r| time_matches(r.t, t_eval)) {
        let usable = row.h_mean > 0.0 && !(row.h_mean - row.h_ci <= 0.0);
        if usable {
            xs.push((row.n as f64).ln());
            ys.push(row.h_mean.ln());
            n_values.push(row.n);
        } else {
            log::warn!("rate fit: excluding N={} at t={} (h_mean={}, ci={})", row.n, row.t, row.h_mean, row.h_ci);
            excluded.push(row.n);
        }
    }
    let mut distinct = n_values.clone();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::DegenerateFit { found: distinct.len() });
    }
    let fit = ols(&xs, &ys)?;
    Ok(RateFit {
        t_eval,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_values,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformityRow {
    pub n: usize,
    pub h_start: f64,
    pub h_sup: f64,
    pub t_sup: f64,
    pub ratio: f64,
    pub trend: Trend,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformityReport {
    pub t_min: f64,
    pub t_max: f64,
    pub max_ratio: f64,
    pub rows: Vec<UniformityRow>,
    pub pass: bool,
}

/// Largest ratio `sup h / h(t_min)` tolerated by the plateau test.
pub const PLATEAU_RATIO: f64 = 2.0;

/// For every `N`: `sup_{t in [t_min, t_max]} h_mean <= 2 h_mean(t_min)`,
/// and no increasing trend over the second half of the window.
///
/// The trend uses the per-replica values kept on each row.
pub fn uniformity_test(results: &SweepResult, t_min: f64, t_max: f64) -> Result<UniformityReport> {
    if !(t_max > t_min) {
        return Err(Error::config("uniformity", "need t_max > t_min"));
    }
    let t_half = 0.5 * (t_min + t_max);
    let mut rows = Vec::new();
    for n in results.n_values() {
        let window: Vec<&SweepRow> = results
            .rows
            .iter()
            .filter(|r| r.n == n && r.t >= t_min - 1e-9 && r.t <= t_max + 1e-9)
            .collect();
        let start = window
            .iter()
            .find(|r| time_matches(r.t, t_min))
            .ok_or_else(|| Error::config("uniformity", format!("no record at t = {t_min} for N = {n}")))?;
        let (t_sup, h_sup) = window
            .iter()
            .map(|r| (r.t, r.h_mean))
            .fold((start.t, start.h_mean), |acc, v| if v.1 > acc.1 { v } else { acc });
        let ratio = if start.h_mean > 0.0 {
            h_sup / start.h_mean
        } else if h_sup == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        let late: Vec<&&SweepRow> = window.iter().filter(|r| r.t >= t_half - 1e-9).collect();
        let times: Vec<f64> = late.iter().map(|r| r.t).collect();
        let replicas = late.first().map_or(0, |r| r.replica_h.len());
        if late.len() < 2 || replicas < 2 || late.iter().any(|r| r.replica_h.len() != replicas) {
            return Err(Error::config(
                "uniformity",
                format!("N = {n}: need 2+ record times with per-replica values in the late window"),
            ));
        }
        let series: Vec<Vec<f64>> = (0..replicas)
            .map(|k| late.iter().map(|r| r.replica_h[k]).collect())
            .collect();
        let trend = replica_trend(&times, &series)?;
        let pass = ratio <= PLATEAU_RATIO && trend.admits_no_growth();
        rows.push(UniformityRow {
            n,
            h_start: start.h_mean,
            h_sup,
            t_sup,
            ratio,
            trend,
            pass,
        });
    }
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let pass = !rows.is_empty() && rows.iter().all(|r| r.pass);
    Ok(UniformityReport {
        t_min,
        t_max,
        max_ratio,
        rows,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundOrdering {
    pub prefactor: f64,
    pub exponent: f64,
    pub slack: f64,
    /// `(N, t, h_mean - ci, bound)` of rows above the bound.
    pub violations: Vec<(usize, f64, f64, f64)>,
}

impl BoundOrdering {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Every row must satisfy `h_mean - ci <= K N^-exponent (1 + slack)`.
pub fn check_bound_ordering(results: &SweepResult, prefactor: f64, exponent: f64, slack: f64) -> BoundOrdering {
    let violations = results
        .rows
        .iter()
        .filter_map(|r| {
            let bound = prefactor * (r.n as f64).powf(-exponent) * (1.0 + slack);
            let lower = r.h_mean - r.h_ci;
            (lower > bound).then_some((r.n, r.t, lower, bound))
        })
        .collect();
    BoundOrdering {
        prefactor,
        exponent,
        slack,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic(h: impl Fn(usize, f64) -> f64, ns: &[usize], ts: &[f64]) -> SweepResult {
        let mut rows = Vec::new();
        for &n in ns {
            for &t in ts {
                let v = h(n, t);
                rows.push(SweepRow {
                    n,
                    t,
                    h_mean: v,
                    h_ci: 0.01 * v,
                    replicas: 3,
                    dt: 0.01,
                    seed: 0,
                    surrogate_budget: None,
                    replica_h: vec![0.99 * v, v, 1.01 * v],
                });
            }
        }
        SweepResult { rows }
    }

    #[test]
    fn exact_power_laws() {
        let ns = [16, 32, 64, 128, 256];
        let r = synthetic(|n, _| 7.0 * (n as f64).powf(-2.0 / 3.0), &ns, &[10.0]);
        let fit = fit_rate(&r, 10.0).unwrap();
        assert_relative_eq!(fit.slope, -2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept, 7f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);

        let r = synthetic(|n, _| 3.0 / n as f64, &ns, &[10.0]);
        let fit = fit_rate(&r, 10.0).unwrap();
        assert_relative_eq!(fit.slope, -1.0, epsilon = 1e-12);
        assert!(fit.meets_rate(2.0 / 3.0, 0.15));
    }

    #[test]
    fn degenerate_rows_are_excluded() {
        let r = synthetic(|n, _| if n == 16 { 0.0 } else { 1.0 / n as f64 }, &[16, 32, 64, 128], &[1.0]);
        assert!(matches!(fit_rate(&r, 1.0), Err(Error::DegenerateFit { found: 3 })));
        let r = synthetic(|n, _| if n == 16 { 0.0 } else { 1.0 / n as f64 }, &[16, 32, 64, 128, 256], &[1.0]);
        let fit = fit_rate(&r, 1.0).unwrap();
        assert_eq!(fit.excluded, vec![16]);
        assert_eq!(fit.n_values, vec![32, 64, 128, 256]);
    }

    #[test]
    fn plateau_test_on_synthetic_series() {
        let ts: Vec<f64> = (5..=50).map(f64::from).collect();
        let flat = synthetic(|_, _| 0.3, &[16, 32], &ts);
        let rep = uniformity_test(&flat, 5.0, 50.0).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.max_ratio, 1.0);

        let mut growing = synthetic(|_, t| 0.1 * t, &[16], &ts);
        // replicas grow at different rates so the trend has a spread
        for row in &mut growing.rows {
            row.replica_h = vec![0.09 * row.t, 0.1 * row.t, 0.11 * row.t];
        }
        let rep = uniformity_test(&growing, 5.0, 50.0).unwrap();
        assert!(!rep.pass);
        assert!(rep.rows[0].ratio > 2.0);
        assert!(!rep.rows[0].trend.admits_no_growth());
    }

    #[test]
    fn slow_growth_fails_on_trend_alone() {
        let ts: Vec<f64> = (5..=50).map(f64::from).collect();
        let mut r = synthetic(|_, t| 1.0 + 0.01 * t, &[64], &ts);
        for row in &mut r.rows {
            let t = row.t;
            row.replica_h = vec![1.0 + 0.009 * t, 1.0 + 0.01 * t, 1.0 + 0.011 * t];
        }
        let rep = uniformity_test(&r, 5.0, 50.0).unwrap();
        assert!(rep.rows[0].ratio <= 2.0);
        assert!(!rep.pass);
    }

    #[test]
    fn bound_ordering_is_one_sided() {
        let r = synthetic(|n, _| 1.0 / n as f64, &[16, 64], &[1.0]);
        assert!(check_bound_ordering(&r, 1.0, 2.0 / 3.0, 0.2).pass());
        let r = synthetic(|n, _| 10.0 * (n as f64).powf(-0.5), &[16, 1024], &[1.0]);
        let ord = check_bound_ordering(&r, 1.0, 2.0 / 3.0, 0.2);
        assert_eq!(ord.violations.len(), 2);
    }

    #[test]
    fn trend_of_flat_replicas_is_zero() {
        let times = [0.0, 1.0, 2.0];
        let t = replica_trend(&times, &[vec![1.0; 3], vec![2.0; 3]]).unwrap();
        assert_eq!(t.slope, 0.0);
        assert!(t.admits_no_growth());
    }
}
