//! Euler–Maruyama integration of the coupled particle / limit system.
//!
//! Three populations advance together:
//!
//! * `x`: the N-particle system, driven by its own empirical measure;
//! * `x_bar`: one limit particle per coupled particle, driven by the
//!   reference ensemble's law (or an exact law) and by the *same*
//!   Brownian increments as the matching `x[j]`;
//! * `reference`: an independent M-particle system whose empirical measure
//!   stands in for the limit law.
//!
//! With `audit` enabled a second reference ensemble and a second set of
//! limit particles run alongside, which is how the surrogate error is
//! measured.
//!
//! Noise is keyed by `(seed, stream, step, node)` and every interaction
//! average is a fixed-shape pairwise sum, so results do not depend on the
//! rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Population, Result};
use crate::meanfield::MeanFieldLaw;
use crate::model::{Interaction, ParticleModel, MAX_RANK};
use crate::reduce::{pairwise_sum, par_pairwise_sum};
use crate::rng::bridge_increments;

/// Populations at least this large are stepped with rayon.
const PAR_MIN: usize = 2048;
/// Largest supported `log2(path_dt / dt)`.
const MAX_BRIDGE_LEVELS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurrogateBackend {
    /// Empirical law of an independent reference ensemble.
    Ensemble,
    /// Exact law mean of the Euler scheme for the linear model,
    /// `m_{n+1} = (1 - dt/tau) m_n`, used as a point mass. Exact only when
    /// `b1` is affine in its second argument.
    LinearExact { tau: f64 },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_particles: usize,
    pub n_reference: usize,
    pub dt: f64,
    /// Grid on which the Brownian path is sampled; `dt` must equal
    /// `path_dt / 2^k`. Runs sharing `path_dt` and seed see the same path.
    pub path_dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub record_times: Vec<f64>,
    pub state_clip: Option<f64>,
    pub surrogate: SurrogateBackend,
    pub audit: bool,
}

pub const DEFAULT_REFERENCE_MULTIPLIER: usize = 16;
pub const DEFAULT_DT: f64 = 1e-2;
pub const DEFAULT_STATE_CLIP: f64 = 1e6;

impl SimConfig {
    pub fn new(n_particles: usize, dt: f64, t_end: f64, seed: u64) -> Self {
        Self {
            n_particles,
            n_reference: DEFAULT_REFERENCE_MULTIPLIER * n_particles,
            dt,
            path_dt: dt,
            t_end,
            seed,
            record_times: vec![t_end],
            state_clip: Some(DEFAULT_STATE_CLIP),
            surrogate: SurrogateBackend::Ensemble,
            audit: false,
        }
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_end / self.dt).round() as u64
    }

    fn step_of(&self, t: f64) -> Option<u64> {
        let k = (t / self.dt).round();
        ((k * self.dt - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(k as u64)
    }

    pub fn bridge_levels(&self) -> Result<u32> {
        let ratio = self.path_dt / self.dt;
        let levels = ratio.log2().round();
        if !(0.0..=f64::from(MAX_BRIDGE_LEVELS)).contains(&levels)
            || (2f64.powf(levels) - ratio).abs() > 1e-9 * ratio
        {
            return Err(Error::config(
                "path_dt",
                format!("path_dt / dt must be a power of two, got {ratio}"),
            ));
        }
        Ok(levels as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::config("n_particles", "need N >= 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", format!("need dt > 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config("t_end", format!("need t_end >= 0, got {}", self.t_end)));
        }
        if self.t_end > 0.0 && self.t_end < self.dt {
            return Err(Error::config("t_end", "need t_end >= dt (or t_end = 0)"));
        }
        if self.step_of(self.t_end).is_none() {
            return Err(Error::config("t_end", "t_end must be a multiple of dt"));
        }
        self.bridge_levels()?;
        if self.record_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("record_times", "must be strictly increasing"));
        }
        for &t in &self.record_times {
            if !(0.0..=self.t_end * (1.0 + 1e-12)).contains(&t) {
                return Err(Error::config(
                    "record_times",
                    format!("record time {t} outside [0, t_end]"),
                ));
            }
            if self.step_of(t).is_none() {
                return Err(Error::config(
                    "record_times",
                    format!("record time {t} is not a multiple of dt"),
                ));
            }
        }
        if let Some(clip) = self.state_clip {
            if !(clip > 0.0) {
                return Err(Error::config("state_clip", "must be positive"));
            }
        }
        match self.surrogate {
            SurrogateBackend::Ensemble => {
                if self.n_reference < self.n_particles {
                    return Err(Error::config(
                        "n_reference",
                        format!(
                            "need M >= N for coupling, got M = {} < N = {}",
                            self.n_reference, self.n_particles
                        ),
                    ));
                }
            }
            SurrogateBackend::LinearExact { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::config("surrogate", "linear-exact needs tau > 0"));
                }
                if self.audit {
                    return Err(Error::config("audit", "audit needs the ensemble backend"));
                }
            }
        }
        Ok(())
    }
}

/// Second reference ensemble and its limit particles.
#[derive(Debug, Clone)]
pub struct AuditState {
    pub x_bar: Vec<f64>,
    pub reference: Vec<f64>,
    pub reference_streams: Vec<u64>,
    reference_noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CoupledEnsemble {
    pub t: f64,
    pub step_index: u64,
    pub x: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub reference: Vec<f64>,
    /// Noise stream of `x[j]` and `x_bar[j]`.
    pub coupled_streams: Vec<u64>,
    pub reference_streams: Vec<u64>,
    pub audit: Option<AuditState>,
    /// Mean of the exact law (linear-exact backend only).
    pub exact_mean: f64,
    seed: u64,
    dt: f64,
    path_dt: f64,
    levels: u32,
    clip: Option<f64>,
    backend: SurrogateBackend,
    coupled_noise: Vec<f64>,
    reference_noise: Vec<f64>,
    scratch: Scratch,
    terms: InteractionTerms,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    left: Vec<f64>,
    right: Vec<f64>,
    column: Vec<f64>,
}

/// Per-population interaction terms of the current step.
#[derive(Debug, Clone, Default)]
struct InteractionTerms {
    particle: Vec<f64>,
    limit: Vec<f64>,
    reference: Vec<f64>,
    audit_limit: Vec<f64>,
    audit_reference: Vec<f64>,
}

impl CoupledEnsemble {
    /// All particles start at `x_ini`. Coupled stream `j` is `j`,
    /// reference stream `k` is `N + k`, audit reference stream `k` is
    /// `N + M + k`.
    pub fn new(model: &ParticleModel, config: &SimConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_particles;
        let m = match config.surrogate {
            SurrogateBackend::Ensemble => config.n_reference,
            SurrogateBackend::LinearExact { .. } => 0,
        };
        let audit = config.audit.then(|| AuditState {
            x_bar: vec![model.x_ini; n],
            reference: vec![model.x_ini; m],
            reference_streams: ((n + m) as u64..(n + 2 * m) as u64).collect(),
            reference_noise: Vec::new(),
        });
        Ok(Self {
            t: 0.0,
            step_index: 0,
            x: vec![model.x_ini; n],
            x_bar: vec![model.x_ini; n],
            reference: vec![model.x_ini; m],
            coupled_streams: (0..n as u64).collect(),
            reference_streams: (n as u64..(n + m) as u64).collect(),
            audit,
            exact_mean: model.x_ini,
            seed: config.seed,
            dt: config.dt,
            path_dt: config.path_dt,
            levels: config.bridge_levels()?,
            clip: config.state_clip,
            backend: config.surrogate,
            coupled_noise: Vec::new(),
            reference_noise: Vec::new(),
            scratch: Scratch::default(),
            terms: InteractionTerms::default(),
        })
    }

    /// Replace the coupled stream ids (one per particle).
    pub fn with_coupled_streams(mut self, streams: Vec<u64>) -> Result<Self> {
        if streams.len() != self.x.len() {
            return Err(Error::config("coupled_streams", "need one stream per particle"));
        }
        self.coupled_streams = streams;
        Ok(self)
    }

    pub fn n_particles(&self) -> usize {
        self.x.len()
    }

    /// The law the limit particles currently see.
    pub fn limit_law<'a>(&'a self, model: &ParticleModel) -> MeanFieldLaw<'a> {
        match self.backend {
            SurrogateBackend::Ensemble => MeanFieldLaw::from_support(&model.interaction, &self.reference),
            SurrogateBackend::LinearExact { .. } => {
                if model.interaction.is_zero() {
                    MeanFieldLaw::Zero
                } else {
                    MeanFieldLaw::PointMass(self.exact_mean)
                }
            }
        }
    }
}

/// Fill `out[i * width + s]` with increment `s` of stream `streams[i]`
/// for path interval `path_step`.
fn fill_increments(
    seed: u64,
    streams: &[u64],
    path_step: u64,
    path_dt: f64,
    levels: u32,
    out: &mut Vec<f64>,
) {
    let width = 1usize << levels;
    out.resize(streams.len() * width, 0.0);
    let body = |(chunk, &stream): (&mut [f64], &u64)| {
        bridge_increments(seed, stream, path_step, path_dt, levels, chunk);
    };
    if streams.len() >= PAR_MIN {
        out.par_chunks_mut(width).zip(streams.par_iter()).for_each(body);
    } else {
        out.chunks_mut(width).zip(streams.iter()).for_each(body);
    }
}

/// Law of a population as seen by the interaction kernel.
#[derive(Clone, Copy)]
enum SourceLaw<'a> {
    Zero,
    Moments { rank: usize, moments: [f64; MAX_RANK] },
    Dense(&'a [f64]),
    Point(f64),
}

fn column_means(rows: &[f64], rank: usize, column: &mut Vec<f64>) -> [f64; MAX_RANK] {
    let n = rows.len() / rank;
    let mut moments = [0.0; MAX_RANK];
    for (c, m) in moments.iter_mut().enumerate().take(rank) {
        column.clear();
        column.extend(rows.chunks_exact(rank).map(|row| row[c]));
        *m = par_pairwise_sum(column) / n as f64;
    }
    moments
}

/// Interaction of a population with its own empirical measure:
/// `out[j] = (1/n) sum_k b1(states[j], states[k])`. Returns the law so
/// other populations can be driven by it.
fn self_interaction<'a>(
    model: &ParticleModel,
    states: &'a [f64],
    scratch: &mut Scratch,
    out: &mut Vec<f64>,
) -> SourceLaw<'a> {
    out.clear();
    out.resize(states.len(), 0.0);
    match &model.interaction {
        Interaction::Zero => SourceLaw::Zero,
        Interaction::Dense(_) => {
            let law = SourceLaw::Dense(states);
            apply_law(model, law, states, out);
            law
        }
        Interaction::Separable { rank, features } => {
            let rank = *rank;
            let n = states.len();
            scratch.left.resize(rank * n, 0.0);
            scratch.right.resize(rank * n, 0.0);
            let body = |((l, r), &y): ((&mut [f64], &mut [f64]), &f64)| features(y, l, r);
            if n >= PAR_MIN {
                scratch
                    .left
                    .par_chunks_mut(rank)
                    .zip(scratch.right.par_chunks_mut(rank))
                    .zip(states.par_iter())
                    .for_each(body);
            } else {
                scratch
                    .left
                    .chunks_mut(rank)
                    .zip(scratch.right.chunks_mut(rank))
                    .zip(states.iter())
                    .for_each(body);
            }
            let moments = column_means(&scratch.right, rank, &mut scratch.column);
            let fold = |(o, l): (&mut f64, &[f64])| {
                let mut acc = 0.0;
                for c in 0..rank {
                    acc += l[c] * moments[c];
                }
                *o = acc;
            };
            if n >= PAR_MIN {
                out.par_iter_mut().zip(scratch.left.par_chunks(rank)).for_each(fold);
            } else {
                out.iter_mut().zip(scratch.left.chunks(rank)).for_each(fold);
            }
            SourceLaw::Moments { rank, moments }
        }
    }
}

/// `out[j] = b̄1(targets[j], law)`.
fn apply_law(model: &ParticleModel, law: SourceLaw<'_>, targets: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(targets.len(), 0.0);
    match law {
        SourceLaw::Zero => {}
        SourceLaw::Point(y) => {
            for (o, &x) in out.iter_mut().zip(targets) {
                *o = model.b1(x, y);
            }
        }
        SourceLaw::Dense(source) => {
            let inv = 1.0 / source.len() as f64;
            let body = |row: &mut Vec<f64>, (o, &xj): (&mut f64, &f64)| {
                row.clear();
                row.extend(source.iter().map(|&y| model.b1(xj, y)));
                *o = pairwise_sum(row) * inv;
            };
            if targets.len() * source.len() >= PAR_MIN * 64 {
                out.par_iter_mut()
                    .zip(targets.par_iter())
                    .for_each_init(Vec::new, body);
            } else {
                let mut row = Vec::new();
                out.iter_mut().zip(targets.iter()).for_each(|p| body(&mut row, p));
            }
        }
        SourceLaw::Moments { rank, moments } => {
            let Interaction::Separable { features, .. } = &model.interaction else {
                unreachable!("moment law from a non-separable kernel")
            };
            let body = |(o, &xj): (&mut f64, &f64)| {
                let mut l = [0.0; MAX_RANK];
                let mut r = [0.0; MAX_RANK];
                features(xj, &mut l[..rank], &mut r[..rank]);
                let mut acc = 0.0;
                for c in 0..rank {
                    acc += l[c] * moments[c];
                }
                *o = acc;
            };
            if targets.len() >= PAR_MIN {
                out.par_iter_mut().zip(targets.par_iter()).for_each(body);
            } else {
                out.iter_mut().zip(targets.iter()).for_each(body);
            }
        }
    }
}

/// One Euler–Maruyama update of a population, given its interaction terms
/// and Brownian increments laid out with stride `width`.
#[allow(clippy::too_many_arguments)]
fn advance(
    model: &ParticleModel,
    t: f64,
    dt: f64,
    states: &mut [f64],
    interaction: &[f64],
    noise: &[f64],
    width: usize,
    sub: usize,
) {
    let body = |((s, &int), dw): ((&mut f64, &f64), &[f64])| {
        let x = *s;
        *s = x + (model.b0(t, x) + int) * dt + model.b2(x) * dw[sub];
    };
    if states.len() >= PAR_MIN {
        states
            .par_iter_mut()
            .zip(interaction.par_iter())
            .zip(noise.par_chunks(width))
            .for_each(body);
    } else {
        states
            .iter_mut()
            .zip(interaction.iter())
            .zip(noise.chunks(width))
            .for_each(body);
    }
}

fn guard(states: &[f64], t: f64, clip: Option<f64>, population: Population) -> Result<()> {
    for (index, &v) in states.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { t, population, index });
        }
        if let Some(clip) = clip {
            if v.abs() > clip {
                return Err(Error::Divergence {
                    t,
                    population,
                    index,
                    value: v.abs(),
                    clip,
                });
            }
        }
    }
    Ok(())
}

/// Advance every population by one step of length `dt`.
///
/// Drift terms are evaluated at the start-of-step states and time; all
/// interaction averages use the start-of-step configuration.
pub fn step(model: &ParticleModel, ens: &mut CoupledEnsemble, dt: f64) -> Result<()> {
    if (dt - ens.dt).abs() > 1e-15 * ens.dt {
        return Err(Error::config("dt", format!("step dt {dt} differs from configured {}", ens.dt)));
    }
    let width = 1usize << ens.levels;
    let s = ens.step_index;
    let sub = (s as usize) & (width - 1);
    let t = s as f64 * dt;
    if sub == 0 {
        let path_step = s >> ens.levels;
        fill_increments(ens.seed, &ens.coupled_streams, path_step, ens.path_dt, ens.levels, &mut ens.coupled_noise);
        fill_increments(ens.seed, &ens.reference_streams, path_step, ens.path_dt, ens.levels, &mut ens.reference_noise);
        if let Some(audit) = ens.audit.as_mut() {
            fill_increments(ens.seed, &audit.reference_streams, path_step, ens.path_dt, ens.levels, &mut audit.reference_noise);
        }
    }

    // Every drift below reads start-of-step states only.
    let sc = &mut ens.scratch;
    let terms = &mut ens.terms;
    let law = match ens.backend {
        SurrogateBackend::Ensemble => self_interaction(model, &ens.reference, sc, &mut terms.reference),
        SurrogateBackend::LinearExact { .. } if model.interaction.is_zero() => SourceLaw::Zero,
        SurrogateBackend::LinearExact { .. } => SourceLaw::Point(ens.exact_mean),
    };
    apply_law(model, law, &ens.x_bar, &mut terms.limit);
    self_interaction(model, &ens.x, sc, &mut terms.particle);
    if let Some(audit) = ens.audit.as_mut() {
        let law2 = self_interaction(model, &audit.reference, sc, &mut terms.audit_reference);
        apply_law(model, law2, &audit.x_bar, &mut terms.audit_limit);
        advance(model, t, dt, &mut audit.x_bar, &terms.audit_limit, &ens.coupled_noise, width, sub);
        advance(model, t, dt, &mut audit.reference, &terms.audit_reference, &audit.reference_noise, width, sub);
    }
    advance(model, t, dt, &mut ens.x_bar, &terms.limit, &ens.coupled_noise, width, sub);
    advance(model, t, dt, &mut ens.reference, &terms.reference, &ens.reference_noise, width, sub);
    advance(model, t, dt, &mut ens.x, &terms.particle, &ens.coupled_noise, width, sub);

    if let SurrogateBackend::LinearExact { tau } = ens.backend {
        ens.exact_mean *= 1.0 - dt / tau;
    }

    ens.step_index = s + 1;
    ens.t = ens.step_index as f64 * dt;
    let t_new = ens.t;
    guard(&ens.x, t_new, ens.clip, Population::Particle)?;
    guard(&ens.x_bar, t_new, ens.clip, Population::Limit)?;
    guard(&ens.reference, t_new, ens.clip, Population::Reference)?;
    if let Some(audit) = &ens.audit {
        guard(&audit.x_bar, t_new, ens.clip, Population::AuditLimit)?;
        guard(&audit.reference, t_new, ens.clip, Population::AuditReference)?;
    }
    Ok(())
}

/// Integrate from 0 to `t_end`, calling `observe(ensemble, t)` at every
/// record time.
pub fn run_observed<F>(model: &ParticleModel, config: &SimConfig, mut observe: F) -> Result<()>
where
    F: FnMut(&CoupledEnsemble, f64) -> Result<()>,
{
    let mut ens = CoupledEnsemble::new(model, config)?;
    run_ensemble(model, config, &mut ens, &mut observe)
}

/// As [`run_observed`], starting from a caller-built ensemble.
pub fn run_ensemble<F>(
    model: &ParticleModel,
    config: &SimConfig,
    ens: &mut CoupledEnsemble,
    observe: &mut F,
) -> Result<()>
where
    F: FnMut(&CoupledEnsemble, f64) -> Result<()>,
{
    let record_steps: Vec<(u64, f64)> = config
        .record_times
        .iter()
        .map(|&t| ((t / config.dt).round() as u64, t))
        .collect();
    let mut next = 0;
    let n_steps = config.n_steps();
    loop {
        while next < record_steps.len() && record_steps[next].0 == ens.step_index {
            observe(ens, record_steps[next].1)?;
            next += 1;
        }
        if ens.step_index >= n_steps {
            break;
        }
        step(model, ens, config.dt)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<Snapshot>,
}

/// Integrate and keep full `(x, x_bar)` snapshots at every record time.
pub fn run(model: &ParticleModel, config: &SimConfig) -> Result<Trajectory> {
    let mut records = Vec::with_capacity(config.record_times.len());
    run_observed(model, config, |ens, t| {
        records.push(Snapshot {
            t,
            x: ens.x.clone(),
            x_bar: ens.x_bar.clone(),
        });
        Ok(())
    })?;
    Ok(Trajectory { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_model, build_neural_model, NeuralFieldParams, SynapticKernel};

    fn decay_model() -> ParticleModel {
        ParticleModel::new("decay", |_, x| -x, Interaction::Zero, |_| 0.0).with_initial_state(1.0)
    }

    #[test]
    fn deterministic_euler_step() {
        let model = decay_model();
        let cfg = SimConfig::new(4, 0.1, 0.1, 1);
        let traj = run(&model, &cfg).unwrap();
        let last = traj.records.last().unwrap();
        for (&a, &b) in last.x.iter().zip(last.x_bar.iter()) {
            assert!((a - 0.9).abs() < 1e-15);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_horizon_records_initial_state() {
        let model = decay_model();
        let mut cfg = SimConfig::new(3, 0.1, 0.0, 1);
        cfg.record_times = vec![0.0];
        let traj = run(&model, &cfg).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.records[0].t, 0.0);
        assert!(traj.records[0].x.iter().chain(&traj.records[0].x_bar).all(|&v| v == 1.0));
    }

    #[test]
    fn coupling_is_exact_without_interaction() {
        let (model, _) = build_neural_model(&NeuralFieldParams {
            coupling: SynapticKernel::Constant(0.0),
            sigma: 0.7,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = SimConfig::new(16, 0.01, 2.0, 5);
        cfg.record_times = (1..=20).map(|k| 0.1 * k as f64).collect();
        run_observed(&model, &cfg, |ens, _| {
            assert!(ens.x.iter().zip(&ens.x_bar).all(|(a, b)| a == b));
            assert!(ens.x.iter().any(|&v| v != 0.0));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn reruns_are_bit_identical() {
        let (model, _) = build_neural_model(&NeuralFieldParams::default()).unwrap();
        let mut cfg = SimConfig::new(12, 0.01, 1.0, 42);
        cfg.audit = true;
        let a = run(&model, &cfg).unwrap();
        let b = run(&model, &cfg).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert!(ra.x.iter().zip(&rb.x).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert!(ra.x_bar.iter().zip(&rb.x_bar).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        // Large enough to take the parallel paths.
        let (model, _) = build_neural_model(&NeuralFieldParams::default()).unwrap();
        let mut cfg = SimConfig::new(256, 0.01, 0.2, 9);
        cfg.audit = true;
        let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let a = pool(1).install(|| run(&model, &cfg)).unwrap();
        let b = pool(3).install(|| run(&model, &cfg)).unwrap();
        let ra = a.records.last().unwrap();
        let rb = b.records.last().unwrap();
        assert!(ra.x.iter().zip(&rb.x).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(ra.x_bar.iter().zip(&rb.x_bar).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn brownian_variance_matches_elapsed_time() {
        let model = ParticleModel::new("bm", |_, _| 0.0, Interaction::Zero, |_| 1.0);
        let n_steps = 20;
        let dt = 0.05;
        let mut values = Vec::new();
        // 10^4 replicas of a single particle
        for r in 0..10_000u64 {
            let mut cfg = SimConfig::new(1, dt, n_steps as f64 * dt, r);
            cfg.n_reference = 1;
            let traj = run(&model, &cfg).unwrap();
            values.push(traj.records[0].x[0]);
        }
        let n = values.len() as f64;
        let mean = pairwise_sum(&values) / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = n_steps as f64 * dt;
        // standard error of a Gaussian sample variance
        let se = expected * (2.0 / (n - 1.0)).sqrt();
        assert!((var - expected).abs() <= 3.0 * se, "var={var} expected={expected}");
    }

    #[test]
    fn pooled_increments_pass_moment_checks() {
        let n_streams = 1000u64;
        let n_steps = 1000u64;
        let dt = 0.01;
        let mut buf = [0.0];
        let mut draws = Vec::with_capacity((n_streams * n_steps) as usize);
        for stream in 0..n_streams {
            for s in 0..n_steps {
                bridge_increments(17, stream, s, dt, 0, &mut buf);
                draws.push(buf[0]);
            }
        }
        let n = draws.len() as f64;
        let mean = pairwise_sum(&draws) / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 4.0 * var.sqrt() / n.sqrt(), "mean={mean}");
        assert!((0.99 * dt..=1.01 * dt).contains(&var), "var={var}");
    }

    #[test]
    fn permuting_streams_permutes_particles() {
        let (model, _) = build_neural_model(&NeuralFieldParams::default()).unwrap();
        let n = 10;
        let cfg = SimConfig::new(n, 0.01, 1.0, 3);
        let mut base = CoupledEnsemble::new(&model, &cfg).unwrap();
        let perm: Vec<usize> = (0..n).map(|j| (j * 3 + 1) % n).collect();
        let streams: Vec<u64> = perm.iter().map(|&p| p as u64).collect();
        let mut permuted = CoupledEnsemble::new(&model, &cfg).unwrap().with_coupled_streams(streams).unwrap();
        let mut noop = |_: &CoupledEnsemble, _: f64| Ok(());
        run_ensemble(&model, &cfg, &mut base, &mut noop).unwrap();
        run_ensemble(&model, &cfg, &mut permuted, &mut noop).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            assert!((permuted.x[j] - base.x[p]).abs() < 1e-12);
            assert!((permuted.x_bar[j] - base.x_bar[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let model = ParticleModel::new("explode", |_, x| 50.0 * x, Interaction::Zero, |_| 0.0)
            .with_initial_state(1.0);
        let mut cfg = SimConfig::new(2, 0.1, 10.0, 0);
        cfg.state_clip = Some(1e6);
        match run(&model, &cfg) {
            Err(Error::Divergence { t, index, .. }) => {
                assert!(t > 0.0 && t < 10.0);
                assert_eq!(index, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        cfg.state_clip = None;
        cfg.t_end = 100.0;
        cfg.record_times = vec![100.0];
        assert!(matches!(run(&model, &cfg), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        let ok = SimConfig::new(4, 0.01, 1.0, 0);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.dt = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "dt"));
        let mut c = ok.clone();
        c.n_reference = 2;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.record_times = vec![0.5, 0.2];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.record_times = vec![2.0];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.path_dt = 0.03;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.path_dt = 0.04;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn refined_runs_share_the_brownian_path() {
        // Pure noise: x(t) = W(t), so dt and dt/4 runs agree at common times.
        let model = ParticleModel::new("bm", |_, _| 0.0, Interaction::Zero, |_| 1.0);
        let mut coarse = SimConfig::new(3, 0.02, 1.0, 8);
        coarse.record_times = vec![0.5, 1.0];
        let mut fine = coarse.clone();
        fine.dt = 0.005;
        let a = run(&model, &coarse).unwrap();
        let b = run(&model, &fine).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            for (p, q) in ra.x.iter().zip(&rb.x) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_exact_backend_tracks_discrete_mean() {
        let model = build_linear_model(0.5, 1.0, 0.0).unwrap().with_initial_state(2.0);
        let mut cfg = SimConfig::new(2, 0.1, 1.0, 0);
        cfg.surrogate = SurrogateBackend::LinearExact { tau: 1.0 };
        let mut ens = CoupledEnsemble::new(&model, &cfg).unwrap();
        let mut noop = |_: &CoupledEnsemble, _: f64| Ok(());
        run_ensemble(&model, &cfg, &mut ens, &mut noop).unwrap();
        assert!((ens.exact_mean - 2.0 * 0.9f64.powi(10)).abs() < 1e-14);
        // sigma = 0 so x_bar follows the exact mean as well
        assert!((ens.x_bar[0] - ens.exact_mean).abs() < 1e-14);
    }
}
