//! Theoretical bounds: the finite-horizon Gronwall bound, the
//! time-uniform bound of the differential inequality
//! `u' <= -c u + C u^(1/a)`, and a direct integration of that inequality.

use std::cell::Cell;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ParticleModel;

/// A positive number held as its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogValue {
    pub ln: f64,
}

impl LogValue {
    pub fn value(&self) -> f64 {
        self.ln.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }
}

/// `exp(2 T lip) * moment_root`, kept in log space.
pub fn classical_gronwall_bound(t: f64, lip: f64, moment_root: f64) -> Result<LogValue> {
    if !(t >= 0.0) || !(lip >= 0.0) || !(moment_root >= 0.0) {
        return Err(Error::Domain(format!(
            "Gronwall bound needs T, lip, moment_root >= 0, got ({t}, {lip}, {moment_root})"
        )));
    }
    Ok(LogValue {
        ln: 2.0 * t * lip + moment_root.ln(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    /// Dominance margin `c > 0`.
    pub c: f64,
    /// Forcing constant `C`.
    pub c_big: f64,
    pub a: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Domain(format!("need c > 0, got {}", self.c)));
        }
        if !(self.a > 1.0) {
            return Err(Error::Domain(format!("need a > 1, got {}", self.a)));
        }
        if !(self.c_big >= 0.0) {
            return Err(Error::Domain(format!("need C >= 0, got {}", self.c_big)));
        }
        Ok(())
    }
}

/// `(C / c)^(a / (a - 1))`.
pub fn compute_uniform_bound(inputs: BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok((inputs.c_big / inputs.c).powf(inputs.a / (inputs.a - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OdeRun {
    pub max_u: f64,
    pub final_u: f64,
    /// An RK4 stage went negative and was clamped to 0.
    pub clamped: bool,
}

/// Per-step tolerance of the step-doubling error control.
const ODE_TOL: f64 = 1e-13;

/// RK4 integration of `u' = -c u + C u^(1/a)` on `[0, t_end]`, returning
/// the running maximum.
///
/// `u^(1/a)` is not smooth at 0, so steps are halved (down from `dt`)
/// until two half steps agree with one full step.
pub fn ode_comparison(inputs: BoundInputs, u0: f64, t_end: f64, dt: f64) -> Result<OdeRun> {
    inputs.validate()?;
    if !(u0 >= 0.0) || !u0.is_finite() {
        return Err(Error::Domain(format!("need finite u0 >= 0, got {u0}")));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::Domain("need dt > 0 and t_end >= 0".into()));
    }
    let BoundInputs { c, c_big, a } = inputs;
    let inv_a = 1.0 / a;
    let clamped = Cell::new(false);
    let clamp = |u: f64| {
        if u < 0.0 {
            clamped.set(true);
            0.0
        } else {
            u
        }
    };
    let rhs = |u: f64| {
        let u = clamp(u);
        -c * u + c_big * u.powf(inv_a)
    };
    let rk4 = |u: f64, h: f64| {
        let k1 = rhs(u);
        let k2 = rhs(u + 0.5 * h * k1);
        let k3 = rhs(u + 0.5 * h * k2);
        let k4 = rhs(u + h * k3);
        clamp(u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    };
    let min_step = dt * 1e-9;
    let mut t = 0.0;
    let mut h = dt;
    let mut u = u0;
    let mut max_u = u0;
    while t_end - t > 1e-12 * t_end.max(1.0) {
        h = h.min(t_end - t);
        let full = rk4(u, h);
        let half = rk4(rk4(u, 0.5 * h), 0.5 * h);
        let err = (full - half).abs();
        if err <= ODE_TOL * u.max(half).max(1.0) || h <= min_step {
            t += h;
            u = half;
            max_u = max_u.max(u);
            if err < 0.1 * ODE_TOL {
                h = (2.0 * h).min(dt);
            }
        } else {
            h *= 0.5;
        }
    }
    if clamped.get() {
        log::warn!("ode_comparison: negative iterate clamped to 0");
    }
    Ok(OdeRun {
        max_u,
        final_u: u,
        clamped: clamped.get(),
    })
}

/// Sum of the grid Lipschitz constants of `b1` in its first and second
/// argument on `[-r, r]`, from adjacent grid differences.
pub fn lipschitz_estimate(model: &ParticleModel, r: f64, n_points: usize) -> Result<f64> {
    if !(r > 0.0) || n_points < 2 {
        return Err(Error::Domain("need r > 0 and at least 2 points".into()));
    }
    let h = 2.0 * r / (n_points - 1) as f64;
    let pts: Vec<f64> = (0..n_points).map(|i| -r + h * i as f64).collect();
    let (mut lx, mut ly) = (0.0f64, 0.0f64);
    for &u in &pts {
        for w in pts.windows(2) {
            lx = lx.max((model.b1(w[1], u) - model.b1(w[0], u)).abs() / h);
            ly = ly.max((model.b1(u, w[1]) - model.b1(u, w[0])).abs() / h);
        }
    }
    if !(lx + ly).is_finite() {
        return Err(Error::ModelEvaluation {
            location: "Lipschitz grid of b1".into(),
        });
    }
    Ok(lx + ly)
}
