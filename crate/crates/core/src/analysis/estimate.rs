//! Monte Carlo estimation of the coupled distance `E[h(X_t, X̄_t)]`.
//!
//! Replica `r` runs with seed `seed + r`. Confidence intervals are built
//! from replica-level means only: particles inside one replica interact
//! and are not independent.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{run_observed, SimConfig};
use crate::error::{Error, Result};
use crate::meanfield::{audit_observation, SurrogateBudget};
use crate::model::{h_metric, MetricSpec, ParticleModel};
use crate::reduce::{mean, mean_ci95, pairwise_sum};

pub const CSV_HEADER: &str = "N,t,h_mean,h_ci,replicas,dt,seed,surrogate_budget";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub t: f64,
    pub h_mean: f64,
    /// 95% half width.
    pub h_ci: f64,
    pub replicas: usize,
    pub dt: f64,
    pub seed: u64,
    /// Surrogate share of `h_mean` at this time, when audited.
    pub surrogate_budget: Option<f64>,
    /// Replica-level means, in replica order.
    #[serde(skip)]
    pub replica_h: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Distinct `N`, ascending.
    pub fn n_values(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }

    pub fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| a.n.cmp(&b.n).then(a.t.total_cmp(&b.t)));
    }

    pub fn row(&self, n: usize, t: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && (r.t - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    /// CSV with the fixed header; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let budget = r.surrogate_budget.map(|b| format!("{b:?}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{},{:?},{},{}",
                r.n, r.t, r.h_mean, r.h_ci, r.replicas, r.dt, r.seed, budget
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub replicas: usize,
    /// The first `audit_replicas` replicas also run the second reference
    /// ensemble that measures the surrogate error. Auditing does not
    /// change the audited replica's own trajectories.
    pub audit_replicas: usize,
}

impl EstimateOptions {
    pub fn new(replicas: usize) -> Self {
        Self {
            replicas,
            audit_replicas: 0,
        }
    }
}

/// Everything measured for one `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct HEstimate {
    pub rows: Vec<SweepRow>,
    /// `E[f(X_t - X̄_t)]` per record time.
    pub f_mean: Vec<f64>,
    /// Present when `audit_replicas > 0`.
    pub budget: Option<SurrogateBudget>,
    /// `sup_t sqrt(E[b1(X̄^j_t, X̄^k_t)^2])` over distinct pairs `j != k`.
    pub moment_root: f64,
}

#[derive(Default)]
struct ReplicaObs {
    h: Vec<f64>,
    f: Vec<f64>,
    b1_sq: Vec<f64>,
    drift: Vec<f64>,
    budget: Vec<f64>,
}

fn observe_replica(model: &ParticleModel, spec: &MetricSpec, cfg: &SimConfig) -> Result<ReplicaObs> {
    let mut obs = ReplicaObs::default();
    let n = cfg.n_particles;
    let mut h = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut b = vec![0.0; n];
    run_observed(model, cfg, |ens, _t| {
        for j in 0..n {
            let (x, xb) = (ens.x[j], ens.x_bar[j]);
            h[j] = h_metric(spec, x, xb)?;
            f[j] = spec.f(x - xb);
            let other = ens.x_bar[(j + 1) % n];
            b[j] = if n > 1 { model.b1(xb, other).powi(2) } else { 0.0 };
        }
        obs.h.push(pairwise_sum(&h) / n as f64);
        obs.f.push(pairwise_sum(&f) / n as f64);
        obs.b1_sq.push(pairwise_sum(&b) / n as f64);
        if ens.audit.is_some() {
            let (d, hb) = audit_observation(model, spec, ens)?;
            obs.drift.push(d);
            obs.budget.push(hb);
        }
        Ok(())
    })?;
    Ok(obs)
}

/// Coupled-distance estimate at every record time of `config`.
pub fn estimate_h(
    model: &ParticleModel,
    spec: &MetricSpec,
    config: &SimConfig,
    options: EstimateOptions,
) -> Result<HEstimate> {
    if options.replicas < 2 {
        return Err(Error::config("replicas", format!("need at least 2 replicas, got {}", options.replicas)));
    }
    if options.audit_replicas > options.replicas {
        return Err(Error::config("audit_replicas", "cannot exceed replicas"));
    }
    config.validate()?;
    let obs: Vec<ReplicaObs> = (0..options.replicas)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(r as u64);
            cfg.audit = r < options.audit_replicas;
            observe_replica(model, spec, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let times = &config.record_times;
    let column = |pick: &dyn Fn(&ReplicaObs) -> &Vec<f64>, i: usize, count: usize| -> Vec<f64> {
        obs[..count].iter().map(|o| pick(o)[i]).collect()
    };
    let audited = options.audit_replicas;
    let mut rows = Vec::with_capacity(times.len());
    let mut f_mean = Vec::with_capacity(times.len());
    let mut per_time = Vec::new();
    let mut moment_root: f64 = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let replica_h = column(&|o| &o.h, i, options.replicas);
        let (h_mean, h_ci) = mean_ci95(&replica_h);
        f_mean.push(mean(&column(&|o| &o.f, i, options.replicas)));
        moment_root = moment_root.max(mean(&column(&|o| &o.b1_sq, i, options.replicas)).sqrt());
        let surrogate_budget = (audited > 0).then(|| {
            let d = mean(&column(&|o| &o.drift, i, audited));
            let hb = mean(&column(&|o| &o.budget, i, audited));
            if t > 0.0 {
                per_time.push((t, d, hb));
            }
            hb
        });
        rows.push(SweepRow {
            n: config.n_particles,
            t,
            h_mean,
            h_ci,
            replicas: options.replicas,
            dt: config.dt,
            seed: config.seed,
            surrogate_budget,
            replica_h,
        });
    }
    let budget = (audited > 0).then(|| {
        let d: Vec<f64> = per_time.iter().map(|p| p.1).collect();
        let h: Vec<f64> = per_time.iter().map(|p| p.2).collect();
        let avg = |v: &[f64]| if v.is_empty() { 0.0 } else { mean(v) };
        SurrogateBudget {
            drift_abs_diff: avg(&d),
            h_contribution: avg(&h),
            per_time,
        }
    });
    Ok(HEstimate {
        rows,
        f_mean,
        budget,
        moment_root,
    })
}

/// Coupled squared distance of `l` selected particles at `t_end`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointMarginal {
    /// `E[sum_k (X^{i_k} - X̄^{i_k})^2]`.
    pub value: f64,
    pub ci: f64,
    /// `4 sum_k E[h(X^{i_k}, X̄^{i_k})]`, an upper bound on `value` when
    /// `f = z^2/4` and `g >= 1`.
    pub h_bound: f64,
    pub indices: Vec<usize>,
}

/// `indices` are particle numbers in `1..=N`.
pub fn joint_marginal_test(
    model: &ParticleModel,
    spec: &MetricSpec,
    config: &SimConfig,
    indices: &[usize],
    replicas: usize,
) -> Result<JointMarginal> {
    let n = config.n_particles;
    if indices.is_empty() {
        return Err(Error::config("indices", "need at least one particle"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i == 0 || i > n) {
        return Err(Error::config("indices", format!("index {bad} outside 1..={n}")));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != indices.len() {
        return Err(Error::config("indices", "indices must be distinct"));
    }
    if replicas < 2 {
        return Err(Error::config("replicas", "need at least 2 replicas"));
    }
    let mut cfg = config.clone();
    cfg.record_times = vec![config.t_end];
    let per: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(r as u64);
            let mut out = (0.0, 0.0);
            run_observed(model, &c, |ens, _| {
                let mut sq = 0.0;
                let mut h = 0.0;
                for &i in indices {
                    let (x, xb) = (ens.x[i - 1], ens.x_bar[i - 1]);
                    sq += (x - xb) * (x - xb);
                    h += h_metric(spec, x, xb)?;
                }
                out = (sq, h);
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let sq: Vec<f64> = per.iter().map(|p| p.0).collect();
    let h: Vec<f64> = per.iter().map(|p| p.1).collect();
    let (value, ci) = mean_ci95(&sq);
    Ok(JointMarginal {
        value,
        ci,
        h_bound: 4.0 * mean(&h),
        indices: indices.to_vec(),
    })
}
