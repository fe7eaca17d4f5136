//! Grid certification of the structural inequalities on `(b0, b1, b2)`
//! and the metric `(f, g)`, and extraction of the constants that enter
//! the dominance margin
//! `c = c0 - c1_breve - c1_grave - c2`.
//!
//! Conditions quantified over the whole line can only be checked on
//! `[-R, R]`; those report `PassWithCaveat` instead of `Pass`.
//!
//! Grids at refinement level `l` have `(n0 - 1) 2^l + 1` points, so every
//! coarse point is also a fine point, and the random triples of level `l`
//! extend those of level `l - 1`. Sup-type constants therefore never
//! decrease and inf-type constants never increase under refinement.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::fit::{replica_trend, Trend};
use crate::engine::{run_observed, SimConfig};
use crate::error::{Error, Result};
use crate::model::{MetricSpec, ParticleModel};
use crate::reduce::{mean_ci95, pairwise_sum};
use crate::rng::keyed_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid2D {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
    /// Pairs closer than this are treated by a Lipschitz envelope.
    pub diag_epsilon: f64,
}

impl Grid2D {
    pub fn new(lo: f64, hi: f64, n_points: usize, diag_epsilon: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config("grid", format!("need finite lo < hi, got [{lo}, {hi}]")));
        }
        if n_points < 2 {
            return Err(Error::config("grid.n_points", "need at least 2 points"));
        }
        if !(diag_epsilon > 0.0) {
            return Err(Error::config("grid.diag_epsilon", "must be positive"));
        }
        Ok(Self {
            lo,
            hi,
            n_points,
            diag_epsilon,
        })
    }

    pub fn points(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { self.hi } else { self.lo + h * i as f64 })
            .collect()
    }

    /// The nested grid with `(n - 1) 2^level + 1` points.
    pub fn refined(&self, level: u32) -> Self {
        Self {
            n_points: (self.n_points - 1) * (1usize << level) + 1,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    PassWithCaveat,
    Fail,
}

impl CheckStatus {
    pub fn passed(self) -> bool {
        self != CheckStatus::Fail
    }

    fn from_bool(ok: bool, caveat: bool) -> Self {
        match (ok, caveat) {
            (false, _) => CheckStatus::Fail,
            (true, true) => CheckStatus::PassWithCaveat,
            (true, false) => CheckStatus::Pass,
        }
    }
}

impl std::fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "pass",
            CheckStatus::PassWithCaveat => "pass-with-caveat",
            CheckStatus::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub status: CheckStatus,
    /// Extreme value of the checked expression (its minimum for lower
    /// bounds, maximum for upper bounds).
    pub worst: f64,
    /// Point where `worst` is attained.
    pub witness: Vec<f64>,
    pub detail: String,
}

/// Moment curves of the limit particles along a simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentBounds {
    /// Exponent `p` of the weight moment `E[g(X̄)^p]`.
    pub weight_exponent: f64,
    pub q: u32,
    /// `sup_t E[g(X̄_t)^p]` and its 95% half width.
    pub c1_hat: f64,
    pub c1_ci: f64,
    /// `sup_t E[|b̄1(X̄_t, law_t)|^q]` and its 95% half width.
    pub c2_hat: f64,
    pub c2_ci: f64,
    /// `(t, weight moment, interaction moment)`.
    pub per_time: Vec<(f64, f64, f64)>,
    pub c1_trend: Option<Trend>,
    pub c2_trend: Option<Trend>,
}

impl MomentBounds {
    /// No growth over the second half of the horizon.
    pub fn pass(&self) -> bool {
        let ok = |t: &Option<Trend>| t.map_or(true, |t| t.admits_no_growth());
        self.c1_hat.is_finite() && self.c2_hat.is_finite() && ok(&self.c1_trend) && ok(&self.c2_trend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCertificate {
    pub model: String,
    pub level: u32,
    pub grid: Grid2D,
    pub checks: Vec<CheckRecord>,
    pub c0: f64,
    pub a0: f64,
    pub c2: f64,
    pub c1_breve: f64,
    pub c1_grave: f64,
    pub margin: f64,
    pub moments: Option<MomentBounds>,
    /// `(C / c)^(a/(a-1))` when a forcing constant `C` was supplied.
    pub k_prediction: Option<f64>,
}

/// `c0 - c1_breve - c1_grave - c2`.
pub fn compute_margin(cert: &AssumptionCertificate) -> f64 {
    cert.c0 - cert.c1_breve - cert.c1_grave - cert.c2
}

impl AssumptionCertificate {
    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn margin_check(&self) -> CheckRecord {
        let c = compute_margin(self);
        CheckRecord {
            name: "margin".into(),
            status: CheckStatus::from_bool(c > 0.0, false),
            worst: c,
            witness: vec![],
            detail: format!(
                "c = {} - {} - {} - {} = {c}",
                self.c0, self.c1_breve, self.c1_grave, self.c2
            ),
        }
    }

    /// Every check passes, the margin is positive and every constant is
    /// finite.
    pub fn passed(&self) -> bool {
        let constants = [self.c0, self.a0, self.c2, self.c1_breve, self.c1_grave];
        self.checks.iter().all(|c| c.status.passed())
            && compute_margin(self) > 0.0
            && constants.iter().all(|v| v.is_finite())
            && self.moments.as_ref().map_or(true, MomentBounds::pass)
    }

    pub fn to_report(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {}  level {}  grid [{}, {}] x {} points  diag_epsilon {}",
            self.model, self.level, self.grid.lo, self.grid.hi, self.grid.n_points, self.grid.diag_epsilon
        );
        for c in self.checks.iter().chain(std::iter::once(&self.margin_check())) {
            let _ = write!(s, "  {:<24} {:<17} worst={:.9e}", c.name, c.status.to_string(), c.worst);
            if !c.witness.is_empty() {
                let _ = write!(s, " at {:?}", c.witness);
            }
            let _ = writeln!(s);
            if !c.detail.is_empty() {
                let _ = writeln!(s, "      {}", c.detail);
            }
        }
        let _ = writeln!(
            s,
            "  constants: c0={:.12} a0={:.9} c2={:.9} c1_breve={:.9} c1_grave={:.9} margin={:.9}",
            self.c0,
            self.a0,
            self.c2,
            self.c1_breve,
            self.c1_grave,
            compute_margin(self)
        );
        if let Some(m) = &self.moments {
            let _ = writeln!(
                s,
                "  moments: C1={:.6} +- {:.2e} (p={})  C2={:.6e} +- {:.2e} (q={})  {}",
                m.c1_hat,
                m.c1_ci,
                m.weight_exponent,
                m.c2_hat,
                m.c2_ci,
                m.q,
                if m.pass() { "no growth" } else { "growth detected" }
            );
        }
        if let Some(k) = self.k_prediction {
            let _ = writeln!(s, "  K prediction: {k}");
        }
        let _ = writeln!(s, "  overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifierConfig {
    /// Grid half width; default `5A`, or 10 when `D` is the whole line.
    pub radius: Option<f64>,
    pub n_points: usize,
    /// Default `1e-3 R`.
    pub diag_epsilon: Option<f64>,
    pub n_triples: usize,
    /// Times at which the time-dependent drift is sampled.
    pub sample_times: Vec<f64>,
    /// Constant on the right of the tail condition; defaults to `c0`.
    pub tail_c0: Option<f64>,
    /// Forcing constant used for the `K` prediction.
    pub c_big: Option<f64>,
    pub seed: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            radius: None,
            n_points: 401,
            diag_epsilon: None,
            n_triples: 2_000_000,
            sample_times: vec![0.0],
            tail_c0: None,
            c_big: None,
            seed: 0,
        }
    }
}

impl VerifierConfig {
    pub fn grid(&self, spec: &MetricSpec) -> Result<Grid2D> {
        let r = match self.radius {
            Some(r) => r,
            None if spec.domain.is_whole_line() => 10.0,
            None => 5.0 * spec.domain.half_width,
        };
        let eps = self.diag_epsilon.unwrap_or(1e-3 * r);
        if self.sample_times.is_empty() {
            return Err(Error::config("verifier.sample_times", "need at least one sample time"));
        }
        Grid2D::new(-r, r, self.n_points, eps)
    }
}

/// Extreme value of an expression over an index set, with its location.
#[derive(Debug, Clone, Copy)]
struct Extremum {
    value: f64,
    index: usize,
    point: [f64; 3],
}

const CHUNK: usize = 4096;

/// Maximum of `eval(i)` over `0..count`; `None` entries are skipped. Ties
/// go to the lowest index, so the witness does not depend on scheduling.
fn scan_max<F>(count: usize, eval: F) -> Result<Option<Extremum>>
where
    F: Fn(usize) -> Option<(f64, [f64; 3])> + Sync,
{
    let chunks: Vec<Result<Option<Extremum>>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut best: Option<Extremum> = None;
            for index in c * CHUNK..((c + 1) * CHUNK).min(count) {
                if let Some((value, point)) = eval(index) {
                    if !value.is_finite() {
                        return Err(Error::ModelEvaluation {
                            location: format!("{point:?}"),
                        });
                    }
                    if best.map_or(true, |b| value > b.value) {
                        best = Some(Extremum { value, index, point });
                    }
                }
            }
            Ok(best)
        })
        .collect();
    let mut best: Option<Extremum> = None;
    for c in chunks {
        if let Some(e) = c? {
            if best.map_or(true, |b| e.value > b.value || (e.value == b.value && e.index < b.index)) {
                best = Some(e);
            }
        }
    }
    Ok(best)
}

fn scan_min<F>(count: usize, eval: F) -> Result<Option<Extremum>>
where
    F: Fn(usize) -> Option<(f64, [f64; 3])> + Sync,
{
    Ok(scan_max(count, |i| eval(i).map(|(v, p)| (-v, p)))?.map(|e| Extremum {
        value: -e.value,
        ..e
    }))
}

fn witness(e: &Option<Extremum>, dims: usize) -> Vec<f64> {
    e.map(|e| e.point[..dims].to_vec()).unwrap_or_default()
}

/// Lower-bound condition `expr >= 0`, recorded with the usual tolerance.
fn lower_bound_record(name: &str, e: Option<Extremum>, scale: f64, caveat: bool, dims: usize, detail: String) -> CheckRecord {
    let tol = 1e-12 * scale.max(1.0);
    let worst = e.map_or(0.0, |e| e.value);
    CheckRecord {
        name: name.into(),
        status: CheckStatus::from_bool(worst >= -tol, caveat),
        worst,
        witness: witness(&e, dims),
        detail,
    }
}

/// The convexity condition
/// `f'(x-y) (b̂0(x) - b̂0(y)) - f''(x-y) (b2(x) - b2(y))^2 / 2 >= 0`
/// on all grid pairs and sample times.
pub fn check_convexity_positive(
    model: &ParticleModel,
    spec: &MetricSpec,
    grid: &Grid2D,
    sample_times: &[f64],
) -> Result<CheckRecord> {
    let xs = grid.points();
    let n = xs.len();
    let expr = |t: f64, x: f64, y: f64| {
        let d = x - y;
        let db2 = model.b2(x) - model.b2(y);
        spec.f_prime(d) * (model.b0_hat(t, x) - model.b0_hat(t, y)) - 0.5 * spec.f_second(d) * db2 * db2
    };
    let count = n * n * sample_times.len();
    let at = |i: usize| {
        let (t, x, y) = (sample_times[i / (n * n)], xs[(i / n) % n], xs[i % n]);
        (t, x, y)
    };
    let min = scan_min(count, |i| {
        let (t, x, y) = at(i);
        Some((expr(t, x, y), [x, y, t]))
    })?;
    let scale = scan_max(count, |i| {
        let (t, x, y) = at(i);
        Some((expr(t, x, y).abs(), [x, y, t]))
    })?
    .map_or(0.0, |e| e.value);
    Ok(lower_bound_record(
        "convexity",
        min,
        scale,
        true,
        3,
        format!("min over {count} (x, y, t) grid points"),
    ))
}

/// `inf` over off-diagonal pairs in `D x D` of the convexity expression
/// divided by `f(x - y)`. Pairs at distance exactly `diag_epsilon` stand in
/// for the diagonal limit.
pub fn extract_c0(
    model: &ParticleModel,
    spec: &MetricSpec,
    grid: &Grid2D,
    sample_times: &[f64],
) -> Result<(f64, CheckRecord)> {
    let whole = spec.domain.is_whole_line();
    let w = if whole {
        grid.hi.min(-grid.lo)
    } else {
        spec.domain.half_width
    };
    let core = Grid2D { lo: -w, hi: w, ..*grid };
    let xs = core.points();
    let n = xs.len();
    let eps = grid.diag_epsilon;
    let ratio = |t: f64, x: f64, y: f64| {
        let d = x - y;
        let db2 = model.b2(x) - model.b2(y);
        let lhs = spec.f_prime(d) * (model.b0_hat(t, x) - model.b0_hat(t, y)) - 0.5 * spec.f_second(d) * db2 * db2;
        lhs / spec.f(d)
    };
    let pairs = n * n;
    // grid pairs, then one near-diagonal pair (x, x + eps) per grid point
    let per_time = pairs + n;
    let count = per_time * sample_times.len();
    let min = scan_min(count, |i| {
        let t = sample_times[i / per_time];
        let k = i % per_time;
        let (x, y) = if k < pairs {
            (xs[k / n], xs[k % n])
        } else {
            let x = xs[k - pairs];
            (x, x + eps)
        };
        if (x - y).abs() < eps || y > w {
            return None;
        }
        Some((ratio(t, x, y), [x, y, t]))
    })?;
    let c0 = min.map_or(f64::INFINITY, |e| e.value);
    let record = CheckRecord {
        name: "core_contraction".into(),
        status: CheckStatus::from_bool(c0 > 0.0 && c0.is_finite(), whole),
        worst: c0,
        witness: witness(&min, 3),
        detail: format!("c0 = inf of the convexity ratio over [{}, {}]^2", -w, w),
    };
    Ok((c0, record))
}

/// `|f'(z)|^a <= f(z)` on `[-2R, 2R]`.
pub fn check_f_power(spec: &MetricSpec, grid: &Grid2D) -> Result<CheckRecord> {
    let zgrid = Grid2D {
        lo: 2.0 * grid.lo,
        hi: 2.0 * grid.hi,
        ..*grid
    };
    let zs = zgrid.points();
    let a = f64::from(spec.a);
    let expr = |z: f64| spec.f_prime(z).abs().powf(a) - spec.f(z);
    let max = scan_max(zs.len(), |i| Some((expr(zs[i]), [zs[i], 0.0, 0.0])))?;
    let scale = scan_max(zs.len(), |i| Some((expr(zs[i]).abs(), [zs[i], 0.0, 0.0])))?.map_or(0.0, |e| e.value);
    let worst = max.map_or(0.0, |e| e.value);
    let tol = 1e-12 * scale.max(1.0);
    Ok(CheckRecord {
        name: "f_power".into(),
        status: CheckStatus::from_bool(worst <= tol, true),
        worst,
        witness: witness(&max, 1),
        detail: format!("max of |f'(z)|^{} - f(z) over {} points", spec.a, zs.len()),
    })
}

fn outside_core(spec: &MetricSpec, xs: &[f64]) -> Vec<f64> {
    xs.iter().copied().filter(|&x| !spec.domain.contains(x)).collect()
}

/// `sup_{x not in D} |g'(x)/g(x) b2(x)|`.
pub fn extract_a0(model: &ParticleModel, spec: &MetricSpec, grid: &Grid2D) -> Result<f64> {
    let xs = outside_core(spec, &grid.points());
    let max = scan_max(xs.len(), |i| {
        let x = xs[i];
        Some(((spec.g_prime(x) / spec.g(x) * model.b2(x)).abs(), [x, 0.0, 0.0]))
    })?;
    Ok(max.map_or(0.0, |e| e.value))
}

/// `sup` over the grid of `g''(x)/g(x) b2(x)^2` (signed).
pub fn extract_c2(model: &ParticleModel, spec: &MetricSpec, grid: &Grid2D) -> Result<f64> {
    let xs = grid.points();
    let max = scan_max(xs.len(), |i| {
        let x = xs[i];
        let b = model.b2(x);
        Some((spec.g_second(x) / spec.g(x) * b * b, [x, 0.0, 0.0]))
    })?;
    Ok(max.map_or(0.0, |e| e.value))
}

/// Tail condition outside `D`:
/// `(g'/g)(x) (b̂0(x) - b̄1 - (f'/f)(x-y) b2(x) (b2(x) - b2(y)) - a0 b2(x)/2) >= c0`.
///
/// The unknown law enters only through `b̄1`, bounded by `sup_b1`, so the
/// sign-worst value is used. Pairs closer than `diag_epsilon` replace the
/// `f'/f` term by the envelope `|f'(e)/f(e)| lip_b2 e |b2(x)|`.
pub fn check_tail_domination(
    model: &ParticleModel,
    spec: &MetricSpec,
    grid: &Grid2D,
    sample_times: &[f64],
    a0: f64,
    c0: f64,
) -> Result<CheckRecord> {
    let all = grid.points();
    let xs = outside_core(spec, &all);
    if xs.is_empty() {
        return Ok(CheckRecord {
            name: "tail_domination".into(),
            status: CheckStatus::Pass,
            worst: f64::INFINITY,
            witness: vec![],
            detail: "no grid point outside the core domain (vacuous)".into(),
        });
    }
    if !model.sup_b1.is_finite() && !model.interaction.is_zero() {
        return Ok(CheckRecord {
            name: "tail_domination".into(),
            status: CheckStatus::Fail,
            worst: f64::NEG_INFINITY,
            witness: vec![],
            detail: "sup_b1 is unbounded, so the mean-field term cannot be bounded".into(),
        });
    }
    let sup_b1 = if model.interaction.is_zero() { 0.0 } else { model.sup_b1 };
    let eps = grid.diag_epsilon;
    let env = (spec.f_prime(eps) / spec.f(eps)).abs() * model.lip_b2 * eps;
    let (nx, ny) = (xs.len(), all.len());
    let per_time = nx * ny;
    let count = per_time * sample_times.len();
    let min = scan_min(count, |i| {
        let t = sample_times[i / per_time];
        let k = i % per_time;
        let (x, y) = (xs[k / ny], all[k % ny]);
        let r = spec.g_prime(x) / spec.g(x);
        let b = model.b2(x);
        let base = model.b0_hat(t, x) - 0.5 * a0 * b;
        let lhs = if (x - y).abs() >= eps {
            let d = x - y;
            let cross = spec.f_prime(d) / spec.f(d) * b * (b - model.b2(y));
            r * (base - cross) - r.abs() * sup_b1
        } else {
            r * base - r.abs() * (sup_b1 + env * b.abs())
        };
        Some((lhs, [x, y, t]))
    })?;
    let worst = min.map_or(f64::INFINITY, |e| e.value);
    let tol = 1e-12 * c0.abs().max(1.0);
    Ok(CheckRecord {
        name: "tail_domination".into(),
        status: CheckStatus::from_bool(worst >= c0 - tol, true),
        worst,
        witness: witness(&min, 3),
        detail: format!("min over x outside D must be >= {c0}"),
    })
}

/// Smallest constants making the two interaction-regularity bounds hold on
/// the triple set:
///
/// `g(x)^(2(a-1)/a) (b1(x,y1) - b1(x,y2)) <= c1_breve (g(y1) g(y2) f(y1-y2))^((a-1)/a)`
/// and `|b1(y1,x) - b1(y2,x)| <= c1_grave f(y1-y2)^((a-1)/a)`.
///
/// The triples are `n_triples` uniform draws from `[-R, R]^3` plus, for
/// every grid pair `(x, y1)`, the near-diagonal triple
/// `(x, y1, y1 + diag_epsilon)`.
pub fn extract_c1_bounds(
    model: &ParticleModel,
    spec: &MetricSpec,
    grid: &Grid2D,
    n_triples: usize,
    seed: u64,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let xs = grid.points();
    let n = xs.len();
    let eps = grid.diag_epsilon;
    let span = grid.hi - grid.lo;
    let a = f64::from(spec.a);
    let p = (a - 1.0) / a;
    let triple = |i: usize| -> [f64; 3] {
        if i < n_triples {
            let u = |node| grid.lo + span * keyed_uniform(seed, 0xC1, i as u64, node);
            [u(0), u(1), u(2)]
        } else {
            let k = i - n_triples;
            let y1 = xs[k % n];
            [xs[k / n], y1, y1 + eps]
        }
    };
    let count = n_triples + n * n;
    let breve = scan_max(count, |i| {
        let [x, y1, y2] = triple(i);
        if (y1 - y2).abs() < eps * (1.0 - 1e-9) {
            return None;
        }
        let lhs = spec.g(x).powf(2.0 * p) * (model.b1(x, y1) - model.b1(x, y2)).abs();
        let rhs = (spec.g(y1) * spec.g(y2) * spec.f(y1 - y2)).powf(p);
        Some((lhs / rhs, [x, y1, y2]))
    })?;
    let grave = scan_max(count, |i| {
        let [x, y1, y2] = triple(i);
        if (y1 - y2).abs() < eps * (1.0 - 1e-9) {
            return None;
        }
        let lhs = (model.b1(y1, x) - model.b1(y2, x)).abs();
        Some((lhs / spec.f(y1 - y2).powf(p), [x, y1, y2]))
    })?;
    Ok((
        breve.map_or(0.0, |e| e.value.max(0.0)),
        grave.map_or(0.0, |e| e.value.max(0.0)),
        witness(&breve, 3),
        witness(&grave, 3),
    ))
}

/// Declared model bounds (`lip_b2`, `sup_b1`) hold on the grid.
pub fn check_declared_bounds(model: &ParticleModel, grid: &Grid2D) -> Result<CheckRecord> {
    let xs = grid.points();
    let n = xs.len();
    // adjacent differences bound every pairwise difference on the grid
    let lip = scan_max(n - 1, |i| {
        let (x, y) = (xs[i], xs[i + 1]);
        Some(((model.b2(y) - model.b2(x)).abs() / (y - x), [x, y, 0.0]))
    })?;
    let sup = scan_max(n * n, |i| {
        let (x, y) = (xs[i / n], xs[i % n]);
        Some((model.b1(x, y).abs(), [x, y, 0.0]))
    })?;
    let lip_v = lip.map_or(0.0, |e| e.value);
    let sup_v = sup.map_or(0.0, |e| e.value);
    let lip_ok = lip_v <= model.lip_b2 * (1.0 + 1e-9) + 1e-12;
    let sup_ok = sup_v <= model.sup_b1 * (1.0 + 1e-12) + 1e-15;
    let (worst, w) = if !lip_ok { (lip_v, lip) } else { (sup_v, sup) };
    Ok(CheckRecord {
        name: "declared_bounds".into(),
        status: CheckStatus::from_bool(lip_ok && sup_ok, false),
        worst,
        witness: witness(&w, 2),
        detail: format!(
            "grid Lipschitz of b2 = {lip_v} (declared {}), grid sup |b1| = {sup_v} (declared {})",
            model.lip_b2, model.sup_b1
        ),
    })
}

/// `f` even, nonnegative and zero only at 0; `g = 1`, `g' = 0` on `D`;
/// `g >= 1` everywhere on the grid.
pub fn check_metric_invariants(spec: &MetricSpec, grid: &Grid2D) -> Result<CheckRecord> {
    let xs = grid.points();
    let mut problems = Vec::new();
    let mut witness = Vec::new();
    if spec.f(0.0) != 0.0 {
        problems.push(format!("f(0) = {}", spec.f(0.0)));
    }
    for &x in &xs {
        for z in [x, 2.0 * x] {
            let (fz, fm) = (spec.f(z), spec.f(-z));
            if fz != fm || fz < 0.0 || (z != 0.0 && fz <= 0.0) {
                problems.push(format!("f fails evenness or positivity at {z}"));
                witness = vec![z];
            }
        }
        let g = spec.g(x);
        if !(g >= 1.0) {
            problems.push(format!("g({x}) = {g} < 1"));
            witness = vec![x];
        }
        if spec.domain.contains(x) && (g != 1.0 || spec.g_prime(x) != 0.0) {
            problems.push(format!("g or g' not flat at {x} in D"));
            witness = vec![x];
        }
    }
    if !spec.domain.is_whole_line() {
        let w = spec.domain.half_width;
        for x in [-w, w] {
            if spec.g(x) != 1.0 || spec.g_prime(x) != 0.0 {
                problems.push(format!("g or g' not flat at the boundary {x}"));
                witness = vec![x];
            }
        }
    }
    problems.truncate(5);
    Ok(CheckRecord {
        name: "metric_invariants".into(),
        status: CheckStatus::from_bool(problems.is_empty(), false),
        worst: problems.len() as f64,
        witness,
        detail: problems.join("; "),
    })
}

/// Run every grid check at refinement `level` and assemble the
/// certificate (without moment bounds).
pub fn verify(
    model: &ParticleModel,
    spec: &MetricSpec,
    config: &VerifierConfig,
    level: u32,
) -> Result<AssumptionCertificate> {
    let grid = config.grid(spec)?.refined(level);
    let times = &config.sample_times;
    let mut checks = vec![
        check_declared_bounds(model, &grid)?,
        check_metric_invariants(spec, &grid)?,
        check_convexity_positive(model, spec, &grid, times)?,
    ];
    let (c0, c0_record) = extract_c0(model, spec, &grid, times)?;
    checks.push(c0_record);
    checks.push(check_f_power(spec, &grid)?);
    let a0 = extract_a0(model, spec, &grid)?;
    let tail_c0 = config.tail_c0.unwrap_or(c0);
    checks.push(check_tail_domination(model, spec, &grid, times, a0, tail_c0)?);
    let c2 = extract_c2(model, spec, &grid)?;
    let triples = config.n_triples.saturating_mul(1usize << level);
    let (c1_breve, c1_grave, wb, wg) = extract_c1_bounds(model, spec, &grid, triples, config.seed)?;
    checks.push(CheckRecord {
        name: "interaction_regularity".into(),
        status: CheckStatus::from_bool(c1_breve.is_finite() && c1_grave.is_finite(), true),
        worst: c1_breve + c1_grave,
        witness: wb.iter().chain(&wg).copied().collect(),
        detail: format!("c1_breve = {c1_breve} at {wb:?}; c1_grave = {c1_grave} at {wg:?}; {triples} random triples"),
    });
    let mut cert = AssumptionCertificate {
        model: model.name.clone(),
        level,
        grid,
        checks,
        c0,
        a0,
        c2,
        c1_breve,
        c1_grave,
        margin: 0.0,
        moments: None,
        k_prediction: None,
    };
    cert.margin = compute_margin(&cert);
    if let Some(c_big) = config.c_big {
        if cert.margin > 0.0 {
            let a = f64::from(spec.a);
            cert.k_prediction = Some((c_big / cert.margin).powf(a / (a - 1.0)));
        }
    }
    Ok(cert)
}

/// Smallest `A` among `candidates` (ascending) for which the tail
/// condition passes, or `None`.
pub fn minimal_passing_half_width<F>(build: F, candidates: &[f64], config: &VerifierConfig) -> Result<Option<f64>>
where
    F: Fn(f64) -> Result<(ParticleModel, MetricSpec)>,
{
    for &a in candidates {
        let (model, spec) = build(a)?;
        let grid = config.grid(&spec)?;
        let (c0, _) = extract_c0(&model, &spec, &grid, &config.sample_times)?;
        let a0 = extract_a0(&model, &spec, &grid)?;
        let rhs = config.tail_c0.unwrap_or(c0);
        let rec = check_tail_domination(&model, &spec, &grid, &config.sample_times, a0, rhs)?;
        if rec.status.passed() {
            return Ok(Some(a));
        }
    }
    Ok(None)
}

/// Monte Carlo moment curves of the limit particles:
/// `E[g(X̄_t)^p]` with `p = 2(a-1)q / (aq - a - q)`, and
/// `E[|b̄1(X̄_t, law_t)|^q]`, at every record time.
pub fn estimate_moment_bounds(
    model: &ParticleModel,
    spec: &MetricSpec,
    config: &SimConfig,
    replicas: usize,
) -> Result<MomentBounds> {
    let p = spec.weight_moment_exponent().ok_or_else(|| {
        Error::config(
            "metric",
            format!("weight moment needs aq > a + q, got a = {}, q = {}", spec.a, spec.q),
        )
    })?;
    if replicas < 2 {
        return Err(Error::config("replicas", "need at least 2 replicas"));
    }
    let q = spec.q as i32;
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(r as u64);
            let mut w = Vec::new();
            let mut m = Vec::new();
            run_observed(model, &cfg, |ens, _| {
                let law = ens.limit_law(model);
                let gw: Vec<f64> = ens.x_bar.iter().map(|&x| spec.g(x).powf(p)).collect();
                let bm: Vec<f64> = ens.x_bar.iter().map(|&x| law.bar_b1(model, x).abs().powi(q)).collect();
                w.push(pairwise_sum(&gw) / gw.len() as f64);
                m.push(pairwise_sum(&bm) / bm.len() as f64);
                Ok(())
            })?;
            Ok((w, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let times = &config.record_times;
    let mut per_time = Vec::with_capacity(times.len());
    let (mut c1, mut c2) = ((f64::NEG_INFINITY, 0.0), (f64::NEG_INFINITY, 0.0));
    for (i, &t) in times.iter().enumerate() {
        let w: Vec<f64> = per.iter().map(|r| r.0[i]).collect();
        let m: Vec<f64> = per.iter().map(|r| r.1[i]).collect();
        let (wm, wc) = mean_ci95(&w);
        let (mm, mc) = mean_ci95(&m);
        if wm > c1.0 {
            c1 = (wm, wc);
        }
        if mm > c2.0 {
            c2 = (mm, mc);
        }
        per_time.push((t, wm, mm));
    }
    let half = 0.5 * config.t_end;
    let late: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= half).collect();
    let trend = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Result<Option<Trend>> {
        if late.len() < 2 {
            return Ok(None);
        }
        let ts: Vec<f64> = late.iter().map(|&i| times[i]).collect();
        let series: Vec<Vec<f64>> = per.iter().map(|r| late.iter().map(|&i| pick(r)[i]).collect()).collect();
        replica_trend(&ts, &series).map(Some)
    };
    let c1_trend = trend(|r| &r.0)?;
    let c2_trend = trend(|r| &r.1)?;
    Ok(MomentBounds {
        weight_exponent: p,
        q: spec.q,
        c1_hat: c1.0,
        c1_ci: c1.1,
        c2_hat: c2.0,
        c2_ci: c2.1,
        per_time,
        c1_trend,
        c2_trend,
    })
}
