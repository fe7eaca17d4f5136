//! The four commands. Each writes into a fresh [`RunDir`] and returns
//! whether the run met its own pass criterion.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use unichaos_core::analysis::{
    classical_gronwall_bound, estimate_h, fit_rate, lipschitz_estimate, run_lemma_suite, uniformity_test,
    EstimateOptions, RateFit, SweepResult, UniformityReport,
};
use unichaos_core::engine::run_observed;
use unichaos_core::meanfield::{audit_observation, is_budget_dominated, BUDGET_THRESHOLD};
use unichaos_core::model::h_metric;
use unichaos_core::reduce::{mean, mean_ci95, pairwise_sum};
use unichaos_core::verifier::{estimate_moment_bounds, verify, AssumptionCertificate};
use unichaos_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::output::RunDir;

pub const SERIES_HEADER: &str =
    "t,h_mean,h_ci,f_mean,x_mean,x_sq_mean,x_bar_mean,x_bar_sq_mean,surrogate_budget";
pub const CONTRAST_HEADER: &str = "N,t,h_mean,log10_h,log10_gronwall,decades";

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

/// Any failure while running a command.
#[derive(Debug)]
pub enum CommandError {
    Core(Error),
    Io(std::io::Error),
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Core(e)
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Io(e)
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Core(e) => write!(f, "{e}"),
            CommandError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

pub type CommandResult = std::result::Result<Verdict, CommandError>;

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Default)]
struct SeriesObs {
    h: Vec<f64>,
    f: Vec<f64>,
    x: Vec<f64>,
    x_sq: Vec<f64>,
    xb: Vec<f64>,
    xb_sq: Vec<f64>,
    budget: Vec<f64>,
    snapshots: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

fn avg(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Time series of `E[h]` and the first two moments of both populations.
pub fn simulate(cfg: &ExperimentConfig, run: &mut RunDir) -> CommandResult {
    let (model, spec) = cfg.build_model()?;
    let s = &cfg.sim;
    let sim = cfg.sim_config(s.n_particles, s.t_end, cfg.record_times()?)?;
    sim.validate()?;
    let obs: Vec<SeriesObs> = (0..s.replicas)
        .into_par_iter()
        .map(|r| {
            let mut c = sim.clone();
            c.seed = sim.seed.wrapping_add(r as u64);
            c.audit = r < s.audit_replicas;
            let mut o = SeriesObs::default();
            run_observed(&model, &c, |ens, t| {
                let h: Vec<f64> = ens
                    .x
                    .iter()
                    .zip(&ens.x_bar)
                    .map(|(&x, &xb)| h_metric(&spec, x, xb))
                    .collect::<Result<_>>()?;
                let f: Vec<f64> = ens.x.iter().zip(&ens.x_bar).map(|(&x, &xb)| spec.f(x - xb)).collect();
                let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
                o.h.push(avg(&h));
                o.f.push(avg(&f));
                o.x.push(avg(&ens.x));
                o.x_sq.push(avg(&sq(&ens.x)));
                o.xb.push(avg(&ens.x_bar));
                o.xb_sq.push(avg(&sq(&ens.x_bar)));
                if ens.audit.is_some() {
                    o.budget.push(audit_observation(&model, &spec, ens)?.1);
                }
                if r == 0 && s.snapshots {
                    o.snapshots.push((t, ens.x.clone(), ens.x_bar.clone()));
                }
                Ok(())
            })?;
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;

    let col = |pick: fn(&SeriesObs) -> &Vec<f64>, i: usize, k: usize| -> Vec<f64> {
        obs[..k].iter().map(|o| pick(o)[i]).collect()
    };
    let all = s.replicas;
    let mut csv = String::from(SERIES_HEADER);
    csv.push('\n');
    let mut last = (0.0, 0.0);
    for (i, &t) in sim.record_times.iter().enumerate() {
        let (h, ci) = mean_ci95(&col(|o| &o.h, i, all));
        last = (h, ci);
        let budget = (s.audit_replicas > 0).then(|| mean(&col(|o| &o.budget, i, s.audit_replicas)));
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            num(t),
            num(h),
            num(ci),
            num(mean(&col(|o| &o.f, i, all))),
            num(mean(&col(|o| &o.x, i, all))),
            num(mean(&col(|o| &o.x_sq, i, all))),
            num(mean(&col(|o| &o.xb, i, all))),
            num(mean(&col(|o| &o.xb_sq, i, all))),
            opt_num(budget)
        );
    }
    run.write("series.csv", csv.as_bytes())?;

    if s.snapshots {
        let mut snap = String::from("t,j,x,x_bar\n");
        for (t, x, xb) in &obs[0].snapshots {
            for (j, (a, b)) in x.iter().zip(xb).enumerate() {
                let _ = writeln!(snap, "{},{j},{},{}", num(*t), num(*a), num(*b));
            }
        }
        run.write("snapshots.csv", snap.as_bytes())?;
    }

    let mut summary = String::new();
    let _ = writeln!(summary, "model {}  N={}  M={}", model.name, sim.n_particles, sim.n_reference);
    let _ = writeln!(
        summary,
        "dt={}  path_dt={}  t_end={}  replicas={}  seed={}",
        sim.dt, sim.path_dt, sim.t_end, s.replicas, sim.seed
    );
    let _ = writeln!(summary, "E[h](t_end) = {:.6e} +- {:.2e}", last.0, last.1);
    run.write("summary.txt", summary.as_bytes())?;
    run.write(
        "plot_series.gp",
        b"set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\nset ylabel 'E[h]'\n\
          set logscale y\nplot 'series.csv' using 1:2:3 with yerrorbars, '' using 1:2 with lines notitle\n",
    )?;
    Ok(Verdict::Pass)
}

#[derive(Serialize)]
struct CertificateFile<'a> {
    model: &'a str,
    pass: bool,
    elapsed_seconds: Vec<f64>,
    levels: &'a [AssumptionCertificate],
}

/// Assumption certificate at every configured refinement level.
pub fn verify_assumptions(cfg: &ExperimentConfig, run: &mut RunDir) -> CommandResult {
    let (model, spec) = cfg.build_model()?;
    let vc = cfg.verifier_config();
    let moments = match (cfg.moment_sim_config()?, &cfg.verifier.moments) {
        (Some(sc), Some(m)) => Some(estimate_moment_bounds(&model, &spec, &sc, m.replicas)?),
        _ => None,
    };
    let mut certs = Vec::new();
    let mut elapsed = Vec::new();
    let mut text = String::new();
    for &level in &cfg.verifier.levels {
        let start = Instant::now();
        let mut cert = verify(&model, &spec, &vc, level)?;
        cert.moments = moments.clone();
        elapsed.push(start.elapsed().as_secs_f64());
        text.push_str(&cert.to_report());
        text.push('\n');
        certs.push(cert);
    }
    let pass = certs.iter().all(AssumptionCertificate::passed);
    let _ = writeln!(text, "certificate: {}", if pass { "PASS" } else { "FAIL" });
    run.write_json(
        "certificate.json",
        &CertificateFile {
            model: &model.name,
            pass,
            elapsed_seconds: elapsed,
            levels: &certs,
        },
    )?;
    run.write("certificate.txt", text.as_bytes())?;
    Ok(if pass { Verdict::Pass } else { Verdict::Fail })
}

#[derive(Debug, Clone, Serialize)]
pub struct RateVerdict {
    pub t: f64,
    pub exponent: f64,
    pub slope_limit: f64,
    pub r2_min: f64,
    pub fit: Option<RateFit>,
    pub error: Option<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    pub n: usize,
    pub t: f64,
    pub h_mean: f64,
    pub surrogate_budget: f64,
    pub drift_abs_diff: f64,
    pub ratio: f64,
    pub dominated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastRow {
    pub n: usize,
    pub t: f64,
    pub h_mean: f64,
    pub log10_h: f64,
    pub log10_gronwall: f64,
    pub decades: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastVerdict {
    pub t: f64,
    pub lipschitz: f64,
    pub min_decades: f64,
    pub required_decades: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepAnalysis {
    pub rate: Option<RateVerdict>,
    pub budget: Vec<BudgetRow>,
    pub budget_pass_at_max_n: Option<bool>,
    pub uniformity: Option<UniformityReport>,
    pub contrast: Option<ContrastVerdict>,
    pub moment_root: Vec<(usize, f64)>,
    pub elapsed_seconds: Vec<(usize, f64)>,
}

/// `E[h]` over `N_list` x `t_eval_list`, with the rate fit, plateau test
/// and Gronwall contrast.
pub fn sweep(cfg: &ExperimentConfig, run: &mut RunDir) -> CommandResult {
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "the sweep command needs a sweep block"))?;
    let (model, spec) = cfg.build_model()?;
    let t_end = *sw.t_eval_list.last().expect("validated non-empty");
    let mut result = SweepResult::default();
    let mut moment_root = Vec::new();
    let mut budgets = Vec::new();
    let mut elapsed = Vec::new();
    for &n in &sw.n_list {
        let start = Instant::now();
        let sc = cfg.sim_config(n, t_end, sw.t_eval_list.clone())?;
        let mut opts = EstimateOptions::new(sw.replicas);
        opts.audit_replicas = sw.audit_replicas;
        let est = estimate_h(&model, &spec, &sc, opts)?;
        moment_root.push((n, est.moment_root));
        budgets.push((n, est.budget));
        result.rows.extend(est.rows);
        let secs = start.elapsed().as_secs_f64();
        log::info!("sweep: N={n} done in {secs:.1} s");
        elapsed.push((n, secs));
    }
    result.sort();
    run.write("sweep.csv", result.to_csv().as_bytes())?;

    let rate = sw.t_fit.map(|t| {
        let exponent = spec.rate_exponent();
        let (fit, error) = match fit_rate(&result, t) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let pass = fit
            .as_ref()
            .is_some_and(|f| f.meets_rate(exponent, sw.rate_slack) && f.r_squared >= sw.r2_min);
        RateVerdict {
            t,
            exponent,
            slope_limit: -exponent + sw.rate_slack,
            r2_min: sw.r2_min,
            fit,
            error,
            pass,
        }
    });

    let budget_t = sw.t_fit.unwrap_or(t_end);
    let mut budget_rows = Vec::new();
    for (n, b) in &budgets {
        let (Some(b), Some(row)) = (b, result.row(*n, budget_t)) else {
            continue;
        };
        let sb = row.surrogate_budget.unwrap_or(f64::NAN);
        let drift = b
            .per_time
            .iter()
            .find(|p| (p.0 - budget_t).abs() <= 1e-9 * budget_t.max(1.0))
            .map_or(f64::NAN, |p| p.1);
        budget_rows.push(BudgetRow {
            n: *n,
            t: budget_t,
            h_mean: row.h_mean,
            surrogate_budget: sb,
            drift_abs_diff: drift,
            ratio: sb / row.h_mean,
            dominated: !(sb.is_finite()) || is_budget_dominated(sb, row.h_mean, BUDGET_THRESHOLD),
        });
    }
    let n_max = sw.n_list.iter().copied().max().unwrap_or(0);
    let budget_pass_at_max_n = budget_rows.iter().find(|b| b.n == n_max).map(|b| !b.dominated);

    let uniformity = match sw.uniformity_window {
        Some([lo, hi]) => Some(uniformity_test(&result, lo, hi)?),
        None => None,
    };

    let lipschitz = match sw.gronwall_lipschitz {
        Some(l) => l,
        None => {
            let grid = cfg.verifier_config().grid(&spec)?;
            lipschitz_estimate(&model, grid.hi, 401)?
        }
    };
    let mut contrast_rows = Vec::new();
    let mut contrast_csv = String::from(CONTRAST_HEADER);
    contrast_csv.push('\n');
    for row in &result.rows {
        let root = moment_root.iter().find(|m| m.0 == row.n).map_or(0.0, |m| m.1);
        let g = classical_gronwall_bound(row.t, lipschitz, root)?.log10();
        let lh = row.h_mean.log10();
        let r = ContrastRow {
            n: row.n,
            t: row.t,
            h_mean: row.h_mean,
            log10_h: lh,
            log10_gronwall: g,
            decades: g - lh,
        };
        let _ = writeln!(
            contrast_csv,
            "{},{},{},{},{},{}",
            r.n,
            num(r.t),
            num(r.h_mean),
            num(r.log10_h),
            num(r.log10_gronwall),
            num(r.decades)
        );
        contrast_rows.push(r);
    }
    run.write("contrast.csv", contrast_csv.as_bytes())?;
    let contrast = sw.contrast_t.map(|t| {
        let min_decades = contrast_rows
            .iter()
            .filter(|r| (r.t - t).abs() <= 1e-9 * t.max(1.0))
            .map(|r| r.decades)
            .fold(f64::INFINITY, f64::min);
        ContrastVerdict {
            t,
            lipschitz,
            min_decades,
            required_decades: sw.contrast_decades,
            pass: min_decades >= sw.contrast_decades,
        }
    });

    let analysis = SweepAnalysis {
        rate,
        budget: budget_rows,
        budget_pass_at_max_n,
        uniformity,
        contrast,
        moment_root,
        elapsed_seconds: elapsed,
    };
    run.write_json("analysis.json", &analysis)?;
    run.write("report.txt", sweep_report(&analysis).as_bytes())?;
    run.write("plot_sweep.gp", sweep_plot_script(sw.t_fit).as_bytes())?;
    Ok(Verdict::Pass)
}

fn verdict(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn sweep_report(a: &SweepAnalysis) -> String {
    let mut s = String::new();
    if let Some(r) = &a.rate {
        match &r.fit {
            Some(f) => {
                let _ = writeln!(
                    s,
                    "rate at t={}: slope {:.4} (limit {:.4}), r^2 {:.4} (min {}), N used {:?}, excluded {:?}: {}",
                    r.t,
                    f.slope,
                    r.slope_limit,
                    f.r_squared,
                    r.r2_min,
                    f.n_values,
                    f.excluded,
                    verdict(r.pass)
                );
            }
            None => {
                let _ = writeln!(s, "rate at t={}: {}: FAIL", r.t, r.error.as_deref().unwrap_or("no fit"));
            }
        }
    }
    for b in &a.budget {
        let _ = writeln!(
            s,
            "budget N={:4} t={}: h={:.4e} budget={:.4e} ratio={:.4} drift={:.3e}",
            b.n, b.t, b.h_mean, b.surrogate_budget, b.ratio, b.drift_abs_diff
        );
    }
    if let Some(p) = a.budget_pass_at_max_n {
        let _ = writeln!(s, "budget at largest N within {BUDGET_THRESHOLD} of E[h]: {}", verdict(p));
    }
    if let Some(u) = &a.uniformity {
        let _ = writeln!(s, "uniformity on [{}, {}]:", u.t_min, u.t_max);
        for r in &u.rows {
            let _ = writeln!(
                s,
                "  N={:4} h(start)={:.4e} sup={:.4e} at t={} ratio={:.3} trend={:.3e} +- {:.3e}: {}",
                r.n,
                r.h_start,
                r.h_sup,
                r.t_sup,
                r.ratio,
                r.trend.slope,
                r.trend.ci_half_width,
                verdict(r.pass)
            );
        }
        let _ = writeln!(s, "uniformity: {}", verdict(u.pass));
    }
    if let Some(c) = &a.contrast {
        let _ = writeln!(
            s,
            "Gronwall contrast at t={} (lip {:.4}): min gap {:.2} decades (need {}): {}",
            c.t,
            c.lipschitz,
            c.min_decades,
            c.required_decades,
            verdict(c.pass)
        );
    }
    for (n, secs) in &a.elapsed_seconds {
        let _ = writeln!(s, "elapsed N={n}: {secs:.1} s");
    }
    s
}

fn sweep_plot_script(t_fit: Option<f64>) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\n\
         set xlabel 't'\nset ylabel 'E[h]'\nset output 'h_vs_t.png'\nset terminal pngcairo\n\
         plot for [n in system(\"tail -n +2 sweep.csv | cut -d, -f1 | uniq\")] \
         'sweep.csv' using ($1 == n ? $2 : 1/0):3 with linespoints title 'N='.n\n",
    );
    if let Some(t) = t_fit {
        let _ = write!(
            s,
            "set output 'rate.png'\nset logscale x\nset xlabel 'N'\n\
             plot 'sweep.csv' using ($2 == {t} ? $1 : 1/0):3:4 with yerrorbars title 'E[h] at t={t}'\n"
        );
    }
    s.push_str(
        "set output 'contrast.png'\nunset logscale x\nset xlabel 't'\nset ylabel 'log10'\nunset logscale y\n\
         plot 'contrast.csv' using 2:4 with points title 'log10 E[h]', '' using 2:5 with lines title 'log10 Gronwall'\n",
    );
    s
}

/// The two lemma suites; `fault_offset > 0` runs the negative control.
pub fn lemmas(seed: u64, fault_offset: u32, run: &mut RunDir) -> CommandResult {
    let report = run_lemma_suite(seed, fault_offset)?;
    run.write("lemmas.txt", report.to_text().as_bytes())?;
    run.write_json("lemmas.json", &report)?;
    Ok(if report.pass() { Verdict::Pass } else { Verdict::Fail })
}
