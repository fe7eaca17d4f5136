//! Python bindings: models, the metric, the coupled simulation, the
//! coupled-distance estimator, the assumption verifier and the bound
//! calculators.

use std::collections::HashMap;

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use unichaos_core::analysis::{self, BoundInputs, EstimateOptions};
use unichaos_core::engine::{self, SimConfig, SurrogateBackend};
use unichaos_core::model::{self as core_model, MetricSpec, NeuralFieldParams, ParticleModel, SynapticKernel};
use unichaos_core::{verifier, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A particle model together with its metric.
#[pyclass(frozen, name = "Model")]
struct PyModel {
    model: ParticleModel,
    spec: MetricSpec,
    /// `tau` of the linear model, for the exact-mean surrogate.
    linear_tau: Option<f64>,
}

#[pymethods]
impl PyModel {
    /// Rate-based neural population with `J(x, y) = amplitude cos(x - y)`
    /// (or a constant `J` when `constant_coupling` is given).
    #[staticmethod]
    #[pyo3(signature = (tau=1.0, sigma=0.3, amplitude=0.2, half_width=3.0, x_ini=0.0, constant_coupling=None))]
    fn neural(
        tau: f64,
        sigma: f64,
        amplitude: f64,
        half_width: f64,
        x_ini: f64,
        constant_coupling: Option<f64>,
    ) -> PyResult<Self> {
        let params = NeuralFieldParams {
            tau,
            sigma,
            half_width,
            coupling: match constant_coupling {
                Some(j) => SynapticKernel::Constant(j),
                None => SynapticKernel::CosineDifference { amplitude },
            },
            x_ini,
            ..NeuralFieldParams::default()
        };
        let (model, spec) = core_model::build_neural_model(&params).map_err(to_py)?;
        Ok(Self {
            model,
            spec,
            linear_tau: None,
        })
    }

    /// `b0 = -x/tau`, `b1 = theta (y - x)`, `b2 = sigma`, flat metric.
    #[staticmethod]
    #[pyo3(signature = (theta=0.5, tau=1.0, sigma=0.5))]
    fn linear(theta: f64, tau: f64, sigma: f64) -> PyResult<Self> {
        let model = core_model::build_linear_model(theta, tau, sigma).map_err(to_py)?;
        let spec = MetricSpec::flat_quadratic(2, 3).map_err(to_py)?;
        Ok(Self {
            model,
            spec,
            linear_tau: Some(tau),
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.model.name.clone()
    }

    fn b0(&self, t: f64, x: f64) -> f64 {
        self.model.b0(t, x)
    }

    fn b1(&self, x: f64, y: f64) -> f64 {
        self.model.b1(x, y)
    }

    fn b2(&self, x: f64) -> f64 {
        self.model.b2(x)
    }

    /// The weighted distance `g(x) g(y) f(x - y)`.
    fn h(&self, x: f64, y: f64) -> PyResult<f64> {
        core_model::h_metric(&self.spec, x, y).map_err(to_py)
    }

    fn rate_exponent(&self) -> f64 {
        self.spec.rate_exponent()
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.model.name)
    }
}

fn sim_config(
    model: &PyModel,
    n: usize,
    dt: f64,
    t_end: f64,
    seed: u64,
    record_times: Option<Vec<f64>>,
    exact_mean: bool,
) -> PyResult<SimConfig> {
    let mut cfg = SimConfig::new(n, dt, t_end, seed);
    if let Some(times) = record_times {
        cfg.record_times = times;
    }
    if exact_mean {
        let tau = model
            .linear_tau
            .ok_or_else(|| PyValueError::new_err("exact_mean needs the linear model"))?;
        cfg.surrogate = SurrogateBackend::LinearExact { tau };
    }
    Ok(cfg)
}

/// Coupled particles and limit particles: a list of `(t, x, x_bar)`.
#[pyfunction]
#[pyo3(signature = (model, n, dt=0.01, t_end=1.0, seed=0, record_times=None, exact_mean=false))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    model: &PyModel,
    n: usize,
    dt: f64,
    t_end: f64,
    seed: u64,
    record_times: Option<Vec<f64>>,
    exact_mean: bool,
) -> PyResult<Vec<(f64, Vec<f64>, Vec<f64>)>> {
    let cfg = sim_config(model, n, dt, t_end, seed, record_times, exact_mean)?;
    let traj = py.detach(|| engine::run(&model.model, &cfg)).map_err(to_py)?;
    Ok(traj.records.into_iter().map(|s| (s.t, s.x, s.x_bar)).collect())
}

/// Mean coupled distance over replicas: a list of `(t, h_mean, h_ci)`.
#[pyfunction]
#[pyo3(signature = (model, n, replicas, dt=0.01, t_end=1.0, seed=0, record_times=None, exact_mean=false))]
#[allow(clippy::too_many_arguments)]
fn estimate_h(
    py: Python<'_>,
    model: &PyModel,
    n: usize,
    replicas: usize,
    dt: f64,
    t_end: f64,
    seed: u64,
    record_times: Option<Vec<f64>>,
    exact_mean: bool,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let cfg = sim_config(model, n, dt, t_end, seed, record_times, exact_mean)?;
    let est = py
        .detach(|| analysis::estimate_h(&model.model, &model.spec, &cfg, EstimateOptions::new(replicas)))
        .map_err(to_py)?;
    Ok(est.rows.iter().map(|r| (r.t, r.h_mean, r.h_ci)).collect())
}

/// Grid certificate at one refinement level: `(passed, constants, report)`.
#[pyfunction]
#[pyo3(signature = (model, level=0, n_points=401, n_triples=2_000_000, seed=0))]
fn verify(
    py: Python<'_>,
    model: &PyModel,
    level: u32,
    n_points: usize,
    n_triples: usize,
    seed: u64,
) -> PyResult<(bool, HashMap<String, f64>, String)> {
    let config = verifier::VerifierConfig {
        n_points,
        n_triples,
        seed,
        ..verifier::VerifierConfig::default()
    };
    let cert = py
        .detach(|| verifier::verify(&model.model, &model.spec, &config, level))
        .map_err(to_py)?;
    let constants = HashMap::from([
        ("c0".to_string(), cert.c0),
        ("a0".to_string(), cert.a0),
        ("c2".to_string(), cert.c2),
        ("c1_breve".to_string(), cert.c1_breve),
        ("c1_grave".to_string(), cert.c1_grave),
        ("margin".to_string(), cert.margin),
    ]);
    Ok((cert.passed(), constants, cert.to_report()))
}

/// `exp(2 t lip) * moment_root`.
#[pyfunction]
fn classical_gronwall_bound(t: f64, lip: f64, moment_root: f64) -> PyResult<f64> {
    analysis::classical_gronwall_bound(t, lip, moment_root)
        .map(|v| v.value())
        .map_err(to_py)
}

/// `(C / c)^(a / (a - 1))`.
#[pyfunction]
fn compute_uniform_bound(c: f64, c_big: f64, a: f64) -> PyResult<f64> {
    analysis::compute_uniform_bound(BoundInputs { c, c_big, a }).map_err(to_py)
}

/// Integrate `u' = -c u + C u^(1/a)`: `(max_u, final_u)`.
#[pyfunction]
#[pyo3(signature = (c, c_big, a, u0, t_end, dt=1e-3))]
fn ode_comparison(c: f64, c_big: f64, a: f64, u0: f64, t_end: f64, dt: f64) -> PyResult<(f64, f64)> {
    let run = analysis::ode_comparison(BoundInputs { c, c_big, a }, u0, t_end, dt).map_err(to_py)?;
    Ok((run.max_u, run.final_u))
}

/// Exact `E[(sum of n random signs)^q]` by enumeration.
#[pyfunction]
fn rademacher_moment(n: u32, q: u32) -> PyResult<f64> {
    analysis::rademacher_moment_exact(n, q).map_err(to_py)
}

/// The lemma self-check suite: `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (seed=0, fault_offset=0))]
fn lemma_suite(py: Python<'_>, seed: u64, fault_offset: u32) -> PyResult<(bool, String)> {
    let report = py
        .detach(|| analysis::run_lemma_suite(seed, fault_offset))
        .map_err(to_py)?;
    Ok((report.pass(), report.to_text()))
}

#[pyfunction]
fn rate_exponent(a: u32, q: u32) -> PyResult<f64> {
    core_model::rate_exponent(a, q).map_err(to_py)
}

#[pymodule]
fn unichaos(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_h, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(classical_gronwall_bound, m)?)?;
    m.add_function(wrap_pyfunction!(compute_uniform_bound, m)?)?;
    m.add_function(wrap_pyfunction!(ode_comparison, m)?)?;
    m.add_function(wrap_pyfunction!(rademacher_moment, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_suite, m)?)?;
    m.add_function(wrap_pyfunction!(rate_exponent, m)?)?;
    Ok(())
}
