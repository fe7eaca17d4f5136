//! Experiment configuration: one JSON document, parsed strictly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unichaos_core::engine::{SimConfig, SurrogateBackend, DEFAULT_REFERENCE_MULTIPLIER};
use unichaos_core::model::{
    build_linear_model, build_neural_model, InputCurrent, Interaction, MetricSpec, NeuralFieldParams,
    ParticleModel, SynapticKernel,
};
use unichaos_core::verifier::VerifierConfig;
use unichaos_core::{Error, Result};

/// Names accepted by `{"kind": "registered", "name": ...}`.
pub const REGISTERED_MODELS: &[&str] = &["anti_decay", "independent_ou"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub verifier: VerifierBlock,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Neural {
        #[serde(default = "one")]
        tau: f64,
        #[serde(default = "default_neural_sigma")]
        sigma: f64,
        #[serde(default)]
        coupling: CouplingConfig,
        #[serde(default)]
        input: InputConfig,
        #[serde(default)]
        x_ini: f64,
    },
    Linear {
        #[serde(default = "half")]
        theta: f64,
        #[serde(default = "one")]
        tau: f64,
        #[serde(default = "half")]
        sigma: f64,
        #[serde(default)]
        x_ini: f64,
    },
    Registered {
        name: String,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_neural_sigma() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingConfig {
    /// `amplitude * cos(x - y)`
    Cosine { amplitude: f64 },
    Constant { value: f64 },
}

impl Default for CouplingConfig {
    fn default() -> Self {
        CouplingConfig::Cosine { amplitude: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    Sinusoid {
        offset: f64,
        amplitude: f64,
        frequency: f64,
    },
}

/// Metric overrides. Absent fields take the model's defaults: a sigmoid
/// weight with core half width 3 for the neural and registered models, a
/// flat weight on the whole line for the linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub a: Option<u32>,
    pub q: Option<u32>,
    pub half_width: Option<f64>,
    pub whole_line: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    Ensemble,
    LinearExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub n_particles: usize,
    pub reference_multiplier: usize,
    pub dt: f64,
    /// Brownian path grid; defaults to `dt`.
    pub path_dt: Option<f64>,
    pub t_end: f64,
    /// Explicit record times; otherwise every `record_every` up to `t_end`.
    pub record_times: Option<Vec<f64>>,
    pub record_every: Option<f64>,
    pub state_clip: Option<f64>,
    pub surrogate: SurrogateKind,
    pub replicas: usize,
    pub audit_replicas: usize,
    pub snapshots: bool,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self {
            n_particles: 64,
            reference_multiplier: DEFAULT_REFERENCE_MULTIPLIER,
            dt: 0.01,
            path_dt: None,
            t_end: 10.0,
            record_times: None,
            record_every: None,
            state_clip: Some(1e6),
            surrogate: SurrogateKind::Ensemble,
            replicas: 8,
            audit_replicas: 0,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub n_list: Vec<usize>,
    #[serde(default = "default_sweep_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub audit_replicas: usize,
    pub t_eval_list: Vec<f64>,
    /// Time at which the log-log rate is fitted.
    #[serde(default)]
    pub t_fit: Option<f64>,
    /// `[t_min, t_max]` of the plateau and trend test.
    #[serde(default)]
    pub uniformity_window: Option<[f64; 2]>,
    /// Allowed excess of the fitted slope over `-rate`.
    #[serde(default = "default_rate_slack")]
    pub rate_slack: f64,
    #[serde(default = "default_r2_min")]
    pub r2_min: f64,
    /// Horizon at which the Gronwall contrast is judged.
    #[serde(default)]
    pub contrast_t: Option<f64>,
    /// Required gap, in decades, between the Gronwall bound and `E[h]`.
    #[serde(default = "default_contrast_decades")]
    pub contrast_decades: f64,
    /// Lipschitz constant for the Gronwall contrast; estimated on the
    /// verifier grid when absent.
    #[serde(default)]
    pub gronwall_lipschitz: Option<f64>,
}

fn default_sweep_replicas() -> usize {
    100
}
fn default_rate_slack() -> f64 {
    0.15
}
fn default_r2_min() -> f64 {
    0.95
}
fn default_contrast_decades() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsBlock {
    pub n_particles: usize,
    pub t_end: f64,
    #[serde(default = "default_moment_dt")]
    pub dt: f64,
    #[serde(default = "default_moment_replicas")]
    pub replicas: usize,
    #[serde(default = "one")]
    pub record_every: f64,
}

fn default_moment_dt() -> f64 {
    0.01
}
fn default_moment_replicas() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierBlock {
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default)]
    pub diag_epsilon: Option<f64>,
    #[serde(default = "default_n_triples")]
    pub n_triples: usize,
    #[serde(default = "default_sample_times")]
    pub sample_times: Vec<f64>,
    #[serde(default)]
    pub tail_c0: Option<f64>,
    #[serde(default)]
    pub c_big: Option<f64>,
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default)]
    pub moments: Option<MomentsBlock>,
}

fn default_n_points() -> usize {
    401
}
fn default_n_triples() -> usize {
    2_000_000
}
fn default_sample_times() -> Vec<f64> {
    vec![0.0]
}
fn default_levels() -> Vec<u32> {
    vec![0]
}

impl Default for VerifierBlock {
    fn default() -> Self {
        Self {
            radius: None,
            n_points: default_n_points(),
            diag_epsilon: None,
            n_triples: default_n_triples(),
            sample_times: default_sample_times(),
            tail_c0: None,
            c_big: None,
            levels: default_levels(),
            moments: None,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn contains_time(list: &[f64], t: f64) -> bool {
    list.iter().any(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every parameter range, including those only used by one
    /// command, so a config is either usable or rejected up front.
    pub fn validate(&self) -> Result<()> {
        self.build_model()?;
        let s = &self.sim;
        positive("sim.dt", s.dt).map_err(|_| Error::config("dt", format!("need dt > 0, got {}", s.dt)))?;
        if s.reference_multiplier == 0 {
            return Err(Error::config("sim.reference_multiplier", "must be at least 1"));
        }
        if let Some(every) = s.record_every {
            positive("sim.record_every", every)?;
        }
        if s.record_times.is_some() && s.record_every.is_some() {
            return Err(Error::config("sim.record_times", "give record_times or record_every, not both"));
        }
        if let Some(clip) = s.state_clip {
            positive("sim.state_clip", clip)?;
        }
        if s.replicas == 0 {
            return Err(Error::config("sim.replicas", "need at least 1 replica"));
        }
        if s.audit_replicas > s.replicas {
            return Err(Error::config("sim.audit_replicas", "cannot exceed sim.replicas"));
        }
        if s.surrogate == SurrogateKind::LinearExact && !matches!(self.model, ModelConfig::Linear { .. }) {
            return Err(Error::config("sim.surrogate", "linear_exact needs the linear model"));
        }
        self.sim_config(s.n_particles, s.t_end, self.record_times()?)?.validate()?;

        if let Some(sw) = &self.sweep {
            if sw.n_list.is_empty() || sw.n_list.contains(&0) {
                return Err(Error::config("sweep.n_list", "need a non-empty list of positive N"));
            }
            if sw.replicas < 2 {
                return Err(Error::config("sweep.replicas", "need at least 2 replicas"));
            }
            if sw.audit_replicas > sw.replicas {
                return Err(Error::config("sweep.audit_replicas", "cannot exceed sweep.replicas"));
            }
            if sw.t_eval_list.is_empty() {
                return Err(Error::config("sweep.t_eval_list", "must not be empty"));
            }
            let t_end = *sw.t_eval_list.last().unwrap();
            self.sim_config(sw.n_list[0], t_end, sw.t_eval_list.clone())?
                .validate()
                .map_err(|e| match e {
                    Error::Config { field, reason } if field == "record_times" => {
                        Error::config("sweep.t_eval_list", reason)
                    }
                    other => other,
                })?;
            if let Some(t) = sw.t_fit {
                if !contains_time(&sw.t_eval_list, t) {
                    return Err(Error::config("sweep.t_fit", format!("{t} is not in t_eval_list")));
                }
            }
            if let Some(t) = sw.contrast_t {
                if !contains_time(&sw.t_eval_list, t) {
                    return Err(Error::config("sweep.contrast_t", format!("{t} is not in t_eval_list")));
                }
            }
            if let Some([lo, hi]) = sw.uniformity_window {
                if !(lo < hi) || !contains_time(&sw.t_eval_list, lo) || !contains_time(&sw.t_eval_list, hi) {
                    return Err(Error::config(
                        "sweep.uniformity_window",
                        "need lo < hi, both in t_eval_list",
                    ));
                }
            }
            if !(sw.rate_slack >= 0.0) {
                return Err(Error::config("sweep.rate_slack", "must be >= 0"));
            }
            if let Some(l) = sw.gronwall_lipschitz {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(Error::config("sweep.gronwall_lipschitz", "must be finite and >= 0"));
                }
            }
        }

        let v = &self.verifier;
        if v.levels.is_empty() {
            return Err(Error::config("verifier.levels", "need at least one refinement level"));
        }
        if v.levels.iter().any(|&l| l > 6) {
            return Err(Error::config("verifier.levels", "levels above 6 are not supported"));
        }
        if v.n_triples == 0 {
            return Err(Error::config("verifier.n_triples", "must be positive"));
        }
        let (_, spec) = self.build_model()?;
        self.verifier_config().grid(&spec)?;
        if let Some(m) = &v.moments {
            positive("verifier.moments.dt", m.dt)?;
            positive("verifier.moments.record_every", m.record_every)?;
            if m.replicas < 2 {
                return Err(Error::config("verifier.moments.replicas", "need at least 2 replicas"));
            }
            self.moment_sim_config()?.unwrap().validate()?;
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<(ParticleModel, MetricSpec)> {
        let m = &self.metric;
        let a = m.a.unwrap_or(2);
        let q = m.q.unwrap_or(3);
        if m.whole_line == Some(true) && m.half_width.is_some() {
            return Err(Error::config("metric.half_width", "conflicts with whole_line = true"));
        }
        let sigmoid_spec = |default_width: f64| {
            if m.whole_line == Some(true) {
                MetricSpec::flat_quadratic(a, q)
            } else {
                MetricSpec::quadratic_sigmoid(m.half_width.unwrap_or(default_width), a, q)
            }
        };
        match &self.model {
            ModelConfig::Neural {
                tau,
                sigma,
                coupling,
                input,
                x_ini,
            } => {
                let params = NeuralFieldParams {
                    tau: *tau,
                    sigma: *sigma,
                    half_width: m.half_width.unwrap_or(3.0),
                    coupling: match coupling {
                        CouplingConfig::Cosine { amplitude } => SynapticKernel::CosineDifference { amplitude: *amplitude },
                        CouplingConfig::Constant { value } => SynapticKernel::Constant(*value),
                    },
                    input: match input {
                        InputConfig::Zero => InputCurrent::Zero,
                        InputConfig::Constant { value } => InputCurrent::Constant(*value),
                        InputConfig::Sinusoid {
                            offset,
                            amplitude,
                            frequency,
                        } => InputCurrent::Sinusoid {
                            offset: *offset,
                            amplitude: *amplitude,
                            frequency: *frequency,
                        },
                    },
                    x_ini: *x_ini,
                };
                let (model, _) = build_neural_model(&params)?;
                Ok((model, sigmoid_spec(3.0)?))
            }
            ModelConfig::Linear {
                theta,
                tau,
                sigma,
                x_ini,
            } => {
                if !x_ini.is_finite() {
                    return Err(Error::config("model.x_ini", "must be finite"));
                }
                let model = build_linear_model(*theta, *tau, *sigma)?.with_initial_state(*x_ini);
                let spec = match (m.half_width, m.whole_line) {
                    (Some(w), _) => MetricSpec::quadratic_sigmoid(w, a, q)?,
                    _ => MetricSpec::flat_quadratic(a, q)?,
                };
                Ok((model, spec))
            }
            ModelConfig::Registered { name } => {
                let model = registered_model(name)?;
                Ok((model, sigmoid_spec(3.0)?))
            }
        }
    }

    /// Record times of the simulate command.
    pub fn record_times(&self) -> Result<Vec<f64>> {
        let s = &self.sim;
        if let Some(times) = &s.record_times {
            return Ok(times.clone());
        }
        if s.t_end == 0.0 {
            return Ok(vec![0.0]);
        }
        let every = s.record_every.unwrap_or(s.t_end.min(1.0));
        let count = (s.t_end / every + 1e-9).floor() as usize;
        let mut times: Vec<f64> = (1..=count).map(|k| k as f64 * every).collect();
        if times.last().map_or(true, |&t| (t - s.t_end).abs() > 1e-9 * s.t_end) {
            times.push(s.t_end);
        }
        Ok(times)
    }

    /// Engine configuration for `n` particles up to `t_end`.
    pub fn sim_config(&self, n: usize, t_end: f64, record_times: Vec<f64>) -> Result<SimConfig> {
        let s = &self.sim;
        let mut cfg = SimConfig::new(n, s.dt, t_end, self.seed);
        cfg.n_reference = n.saturating_mul(s.reference_multiplier);
        cfg.path_dt = s.path_dt.unwrap_or(s.dt);
        cfg.record_times = record_times;
        cfg.state_clip = s.state_clip;
        cfg.surrogate = match s.surrogate {
            SurrogateKind::Ensemble => SurrogateBackend::Ensemble,
            SurrogateKind::LinearExact => match self.model {
                ModelConfig::Linear { tau, .. } => SurrogateBackend::LinearExact { tau },
                _ => return Err(Error::config("sim.surrogate", "linear_exact needs the linear model")),
            },
        };
        Ok(cfg)
    }

    pub fn moment_sim_config(&self) -> Result<Option<SimConfig>> {
        let Some(m) = &self.verifier.moments else {
            return Ok(None);
        };
        let count = (m.t_end / m.record_every + 1e-9).floor() as usize;
        let times: Vec<f64> = (0..=count).map(|k| k as f64 * m.record_every).collect();
        let mut cfg = self.sim_config(m.n_particles, m.t_end, times)?;
        cfg.dt = m.dt;
        cfg.path_dt = m.dt;
        Ok(Some(cfg))
    }

    pub fn verifier_config(&self) -> VerifierConfig {
        let v = &self.verifier;
        VerifierConfig {
            radius: v.radius,
            n_points: v.n_points,
            diag_epsilon: v.diag_epsilon,
            n_triples: v.n_triples,
            sample_times: v.sample_times.clone(),
            tail_c0: v.tail_c0,
            c_big: v.c_big,
            seed: self.seed,
        }
    }
}

/// Built-in models outside the two parametrised families.
pub fn registered_model(name: &str) -> Result<ParticleModel> {
    match name {
        // Expanding drift with no interaction: the negative control for the
        // drift assumptions.
        "anti_decay" => Ok(ParticleModel::new("anti_decay", |_, x| x, Interaction::Zero, |_| 0.3)),
        "independent_ou" => Ok(build_linear_model(0.0, 1.0, 0.5)?),
        other => Err(Error::config(
            "model.name",
            format!("unknown registered model `{other}`, expected one of {REGISTERED_MODELS:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(text)
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn minimal_configs_parse() {
        let c = parse(r#"{"model": {"kind": "linear"}}"#).unwrap();
        assert_eq!(c.sim.n_particles, 64);
        assert_eq!(c.output_dir, PathBuf::from("runs"));
        let (_, spec) = c.build_model().unwrap();
        assert!(spec.domain.is_whole_line());
        let c = parse(r#"{"model": {"kind": "neural"}, "metric": {"half_width": 4}}"#).unwrap();
        let (model, spec) = c.build_model().unwrap();
        assert_eq!(model.name, "neural");
        assert_eq!(spec.domain.half_width, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"model": {"kind": "linear"}, "sede": 1}"#,
            r#"{"model": {"kind": "linear", "thetta": 1}}"#,
            r#"{"model": {"kind": "linear"}, "sim": {"nparticles": 3}}"#,
            r#"{"model": {"kind": "neural", "coupling": {"kind": "cosine", "amplitude": 1, "phase": 0}}}"#,
            r#"{"model": {"kind": "linear"}, "verifier": {"grid": 3}}"#,
        ] {
            assert!(parse(text).is_err(), "{text}");
        }
        let e = parse(r#"{"model": {"kind": "linear"}, "sede": 1}"#).unwrap_err();
        assert_eq!(field_of(e), "sede");
    }

    #[test]
    fn bad_ranges_name_the_field() {
        let e = parse(r#"{"model": {"kind": "linear"}, "sim": {"dt": 0}}"#).unwrap_err();
        assert_eq!(field_of(e), "dt");
        let e = parse(r#"{"model": {"kind": "neural", "tau": -1}}"#).unwrap_err();
        assert_eq!(field_of(e), "tau");
        let e = parse(r#"{"model": {"kind": "registered", "name": "nope"}}"#).unwrap_err();
        assert_eq!(field_of(e), "model.name");
        let e = parse(r#"{"model": {"kind": "neural"}, "sim": {"surrogate": "linear_exact"}}"#).unwrap_err();
        assert_eq!(field_of(e), "sim.surrogate");
        let e = parse(
            r#"{"model": {"kind": "linear"}, "sweep": {"n_list": [16], "t_eval_list": [1, 2], "t_fit": 3}}"#,
        )
        .unwrap_err();
        assert_eq!(field_of(e), "sweep.t_fit");
        let e = parse(r#"{"model": {"kind": "linear"}, "sweep": {"n_list": [16], "t_eval_list": [1, 0.5]}}"#)
            .unwrap_err();
        assert_eq!(field_of(e), "sweep.t_eval_list");
    }

    #[test]
    fn record_times_default_to_unit_spacing() {
        let c = parse(r#"{"model": {"kind": "linear"}, "sim": {"t_end": 3.5}}"#).unwrap();
        assert_eq!(c.record_times().unwrap(), vec![1.0, 2.0, 3.0, 3.5]);
        let c = parse(r#"{"model": {"kind": "linear"}, "sim": {"t_end": 0}}"#).unwrap();
        assert_eq!(c.record_times().unwrap(), vec![0.0]);
        let c = parse(r#"{"model": {"kind": "linear"}, "sim": {"t_end": 1, "record_every": 0.25}}"#).unwrap();
        assert_eq!(c.record_times().unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse(
            r#"{"model": {"kind": "neural", "input": {"kind": "sinusoid", "offset": 0.1, "amplitude": 0.2, "frequency": 0.5}},
                "sweep": {"n_list": [16, 32], "t_eval_list": [1, 2]}, "seed": 9}"#,
        )
        .unwrap();
        assert_eq!(parse(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn registered_models_build() {
        for name in REGISTERED_MODELS {
            let text = format!(r#"{{"model": {{"kind": "registered", "name": "{name}"}}}}"#);
            let (model, _) = parse(&text).unwrap().build_model().unwrap();
            assert_eq!(&model.name, if *name == "anti_decay" { "anti_decay" } else { "linear" });
        }
    }
}
