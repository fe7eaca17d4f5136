//! Numerical checks of the two auxiliary inequalities: the moment bound
//! `E[(e_1 + ... + e_N)^q] <= const * N^(q-1)` for centred i.i.d. terms,
//! and the time-uniform bound of `u' <= -c u + C u^(1/a)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::bounds::{compute_uniform_bound, ode_comparison, BoundInputs};
use crate::error::{Error, Result};
use crate::reduce::mean_ci95;
use crate::rng::{keyed_uniform, KeyedStream};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

/// Largest `N` handled by exhaustive enumeration.
pub const MAX_EXACT_N: u32 = 24;

/// `sum over all 2^N sign vectors of (e_1 + ... + e_N)^q`, computed with
/// exact integer arithmetic.
pub fn rademacher_moment_sum(n: u32, q: u32) -> Result<i128> {
    if n == 0 || n > MAX_EXACT_N {
        return Err(Error::Domain(format!("exhaustive enumeration needs 1 <= N <= {MAX_EXACT_N}")));
    }
    // N^q must fit, with room for the 2^N terms
    if (q as f64) * (n as f64).log2() + n as f64 > 120.0 {
        return Err(Error::Domain(format!("(N, q) = ({n}, {q}) overflows the exact sum")));
    }
    let mut total: i128 = 0;
    for mask in 0u32..(1u32 << n) {
        let s = n as i128 - 2 * mask.count_ones() as i128;
        total += s.pow(q);
    }
    Ok(total)
}

/// `E[(e_1 + ... + e_N)^q]` for Rademacher terms, by enumeration.
pub fn rademacher_moment_exact(n: u32, q: u32) -> Result<f64> {
    Ok(rademacher_moment_sum(n, q)? as f64 / 2f64.powi(n as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MomentSampler {
    Rademacher,
    Gaussian,
}

impl MomentSampler {
    fn draw_sum(self, seed: u64, replica: u64, n: usize) -> f64 {
        match self {
            MomentSampler::Rademacher => {
                let mut rng = KeyedStream::new(seed, replica, n as u64, 0);
                let mut s = 0i64;
                let mut left = n;
                while left > 0 {
                    let word = rng.next_u32();
                    let take = left.min(32);
                    let ones = (word & (u32::MAX >> (32 - take))).count_ones() as i64;
                    s += 2 * ones - take as i64;
                    left -= take;
                }
                s as f64
            }
            MomentSampler::Gaussian => {
                let mut rng = KeyedStream::new(seed, replica, n as u64, 1);
                let mut s = 0.0;
                for _ in 0..n {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s += z;
                }
                s
            }
        }
    }

    /// `E[(e_1 + ... + e_N)^4]`.
    pub fn fourth_moment(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            MomentSampler::Rademacher => 3.0 * n * n - 2.0 * n,
            MomentSampler::Gaussian => 3.0 * n * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub n: usize,
    pub estimate: f64,
    pub ci: f64,
    /// `estimate / N^normaliser`.
    pub ratio: f64,
    pub ratio_ci: f64,
    /// Enumerated value (Rademacher, small `N` only).
    pub exact: Option<f64>,
}

/// Monte Carlo estimate of `E[(sum e)^q]` for each `N`, normalised by
/// `N^(q-1)`.
///
/// `fault_offset` shifts the normalising exponent down (`N^(q-1-offset)`);
/// it exists so the lemma suite can confirm that it detects a wrong
/// exponent.
pub fn moment_sum_check(
    sampler: MomentSampler,
    q: u32,
    ns: &[usize],
    replicas: usize,
    seed: u64,
    fault_offset: u32,
) -> Result<Vec<MomentRow>> {
    if q <= 2 {
        return Err(Error::config("q", format!("need q > 2, got {q}")));
    }
    if replicas < 2 {
        return Err(Error::config("replicas", "need at least 2 replicas"));
    }
    let power = f64::from(q) - 1.0 - f64::from(fault_offset);
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::config("n", "need N >= 1"));
            }
            let samples: Vec<f64> = (0..replicas as u64)
                .into_par_iter()
                .map(|r| sampler.draw_sum(seed, r, n).powi(q as i32))
                .collect();
            let (estimate, ci) = mean_ci95(&samples);
            let scale = (n as f64).powf(power);
            let exact = match sampler {
                MomentSampler::Rademacher if n as u32 <= 16 => Some(rademacher_moment_exact(n as u32, q)?),
                _ => None,
            };
            Ok(MomentRow {
                n,
                estimate,
                ci,
                ratio: estimate / scale,
                ratio_ci: ci / scale,
                exact,
            })
        })
        .collect()
}

/// The decay rule for `q = 4`: the normalised ratio at the largest `N`
/// is at most `factor` times the ratio at the smallest.
pub fn ratio_decays(rows: &[MomentRow], factor: f64) -> bool {
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() >= 2 => b.ratio <= factor * a.ratio,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdeCase {
    pub c: f64,
    pub c_big: f64,
    pub a: u32,
    pub u0: f64,
    pub bound: f64,
    pub max_u: f64,
    pub pass: bool,
}

/// Random cases with `c, C` in `[0.1, 10]`, `a` in `{2, 3, 4}`, `u0` in
/// `[0, bound]`: the integrated maximum must stay below
/// `bound * (1 + 1e-6)`.
pub fn ode_random_suite(cases: usize, seed: u64, t_end: f64, dt: f64) -> Result<Vec<OdeCase>> {
    (0..cases as u64)
        .into_par_iter()
        .map(|i| {
            let u = |node| keyed_uniform(seed, 0x0DE, i, node);
            let c = 0.1 + 9.9 * u(0);
            let c_big = 0.1 + 9.9 * u(1);
            let a = 2 + (3.0 * u(2)) as u32;
            let inputs = BoundInputs {
                c,
                c_big,
                a: f64::from(a),
            };
            let bound = compute_uniform_bound(inputs)?;
            let u0 = bound * u(3);
            let run = ode_comparison(inputs, u0, t_end, dt)?;
            Ok(OdeCase {
                c,
                c_big,
                a,
                u0,
                bound,
                max_u: run.max_u,
                pass: run.max_u <= bound * (1.0 + 1e-6),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    /// `(N, enumerated E[(sum e)^4], 3N^2 - 2N)` for `N = 1..=16`.
    pub exact_rows: Vec<(u32, f64, f64)>,
    pub exact_pass: bool,
    pub gaussian_rows: Vec<MomentRow>,
    pub decay_pass: bool,
    pub third_moment_rows: Vec<MomentRow>,
    pub third_moment_pass: bool,
    pub closed_form_max: f64,
    pub closed_form_pass: bool,
    pub ode_cases: Vec<OdeCase>,
    pub ode_pass: bool,
    pub fault_offset: u32,
}

impl LemmaReport {
    pub fn pass(&self) -> bool {
        self.exact_pass && self.decay_pass && self.third_moment_pass && self.closed_form_pass && self.ode_pass
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let verdict = |b: bool| if b { "PASS" } else { "FAIL" };
        let mut s = String::new();
        let _ = writeln!(s, "moment bound, Rademacher q=4 by enumeration: {}", verdict(self.exact_pass));
        for (n, v, want) in &self.exact_rows {
            let _ = writeln!(s, "  N={n:2}  E={v}  3N^2-2N={want}");
        }
        let _ = writeln!(
            s,
            "moment bound, Gaussian q=4 ratio E/N^{}: {}",
            3 - self.fault_offset as i32,
            verdict(self.decay_pass)
        );
        for r in &self.gaussian_rows {
            let _ = writeln!(s, "  N={:6}  ratio={:.6e} +- {:.2e}", r.n, r.ratio, r.ratio_ci);
        }
        let _ = writeln!(s, "moment bound, Gaussian q=3 ratio near 0: {}", verdict(self.third_moment_pass));
        for r in &self.third_moment_rows {
            let _ = writeln!(s, "  N={:6}  ratio={:.4e} +- {:.2e}", r.n, r.ratio, r.ratio_ci);
        }
        let _ = writeln!(
            s,
            "uniform ODE bound, c=2 C=4 a=2 u0=1e-6: max={:.9} (bound 4): {}",
            self.closed_form_max,
            verdict(self.closed_form_pass)
        );
        let worst = self
            .ode_cases
            .iter()
            .map(|c| c.max_u / c.bound.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "uniform ODE bound, {} random cases, worst max/bound={worst:.9}: {}",
            self.ode_cases.len(),
            verdict(self.ode_pass)
        );
        let _ = writeln!(s, "overall: {}", verdict(self.pass()));
        s
    }
}

/// Replicas used for each Gaussian point of the default suite.
pub const SUITE_REPLICAS: usize = 4000;

/// The default lemma suite. `fault_offset > 0` deliberately mis-states
/// the normalising exponent; the suite must then fail.
pub fn run_lemma_suite(seed: u64, fault_offset: u32) -> Result<LemmaReport> {
    let exact_rows: Vec<(u32, f64, f64)> = (1..=16u32)
        .map(|n| {
            let v = rademacher_moment_exact(n, 4)?;
            let nf = f64::from(n);
            Ok((n, v, 3.0 * nf * nf - 2.0 * nf))
        })
        .collect::<Result<_>>()?;
    let exact_pass = (1..=16u32).all(|n| {
        let want = (3 * n as i128 * n as i128 - 2 * n as i128) << n;
        rademacher_moment_sum(n, 4).map(|s| s == want).unwrap_or(false)
    });
    let ns = [100, 1000, 10_000];
    let gaussian_rows = moment_sum_check(MomentSampler::Gaussian, 4, &ns, SUITE_REPLICAS, seed, fault_offset)?;
    let decay_pass = ratio_decays(&gaussian_rows, 0.15);
    let third_moment_rows = moment_sum_check(MomentSampler::Gaussian, 3, &ns, SUITE_REPLICAS, seed ^ 0x3, 0)?;
    // within three standard errors of zero
    let third_moment_pass = third_moment_rows.iter().all(|r| r.ratio.abs() <= 3.0 * r.ratio_ci / 1.96);
    let closed = ode_comparison(BoundInputs { c: 2.0, c_big: 4.0, a: 2.0 }, 1e-6, 20.0, 1e-3)?;
    let closed_form_pass = (closed.max_u - 4.0).abs() <= 1e-6;
    let ode_cases = ode_random_suite(100, seed, 20.0, 1e-3)?;
    let ode_pass = ode_cases.iter().all(|c| c.pass);
    Ok(LemmaReport {
        exact_rows,
        exact_pass,
        gaussian_rows,
        decay_pass,
        third_moment_rows,
        third_moment_pass,
        closed_form_max: closed.max_u,
        closed_form_pass,
        ode_cases,
        ode_pass,
        fault_offset,
    })
}
