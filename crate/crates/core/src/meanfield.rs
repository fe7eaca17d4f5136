//! Numerical stand-in for the law of the limit equation.
//!
//! The law is approximated by the empirical measure of an independent
//! reference ensemble. Limit particles read `b̄1` from it and never feed
//! back into it.

use serde::Serialize;

use crate::engine::{run_observed, CoupledEnsemble, SimConfig, SurrogateBackend};
use crate::error::{Error, Result};
use crate::model::{h_metric, Interaction, MetricSpec, ParticleModel, MAX_RANK};
use crate::reduce::{mean, pairwise_sum};

/// Uniform probability measure on a finite set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    support: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(support: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Domain("empirical measure needs at least one point".into()));
        }
        if let Some(bad) = support.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite support point {bad}")));
        }
        Ok(Self { support })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// `b̄1(x, mu) = (1/M) sum_k b1(x, y_k)`, summed in fixed pairwise order.
pub fn bar_b1(model: &ParticleModel, x: f64, mu: &EmpiricalMeasure) -> Result<f64> {
    if mu.is_empty() {
        return Err(Error::Domain("b̄1 of an empty measure".into()));
    }
    Ok(MeanFieldLaw::from_support(&model.interaction, mu.support()).bar_b1(model, x))
}

/// A law against which `b̄1` can be evaluated repeatedly.
///
/// For separable kernels the averaged right factors are computed once, so
/// each evaluation is `O(rank)` rather than `O(M)`.
#[derive(Debug, Clone)]
pub enum MeanFieldLaw<'a> {
    Empirical(&'a [f64]),
    Moments { rank: usize, moments: [f64; MAX_RANK] },
    PointMass(f64),
    Zero,
}

impl<'a> MeanFieldLaw<'a> {
    pub fn from_support(interaction: &Interaction, support: &'a [f64]) -> Self {
        match interaction {
            Interaction::Zero => MeanFieldLaw::Zero,
            Interaction::Dense(_) => MeanFieldLaw::Empirical(support),
            Interaction::Separable { rank, features } => {
                let rank = *rank;
                let n = support.len();
                let mut right = vec![0.0; rank * n];
                let mut l = [0.0; MAX_RANK];
                let mut r = [0.0; MAX_RANK];
                for (k, &y) in support.iter().enumerate() {
                    features(y, &mut l[..rank], &mut r[..rank]);
                    for c in 0..rank {
                        right[c * n + k] = r[c];
                    }
                }
                let mut moments = [0.0; MAX_RANK];
                for c in 0..rank {
                    moments[c] = pairwise_sum(&right[c * n..(c + 1) * n]) / n as f64;
                }
                MeanFieldLaw::Moments { rank, moments }
            }
        }
    }

    pub fn bar_b1(&self, model: &ParticleModel, x: f64) -> f64 {
        match self {
            MeanFieldLaw::Zero => 0.0,
            MeanFieldLaw::PointMass(y) => model.b1(x, *y),
            MeanFieldLaw::Empirical(support) => {
                let vals: Vec<f64> = support.iter().map(|&y| model.b1(x, y)).collect();
                pairwise_sum(&vals) / vals.len() as f64
            }
            MeanFieldLaw::Moments { rank, moments } => match &model.interaction {
                Interaction::Separable { features, .. } => {
                    let mut l = [0.0; MAX_RANK];
                    let mut r = [0.0; MAX_RANK];
                    features(x, &mut l[..*rank], &mut r[..*rank]);
                    let mut acc = 0.0;
                    for c in 0..*rank {
                        acc += l[c] * moments[c];
                    }
                    acc
                }
                _ => unreachable!("moment law built from a non-separable kernel"),
            },
        }
    }
}

/// Size of the reference-ensemble error, measured by running two
/// independent reference ensembles side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateBudget {
    /// Mean `|b̄1(x̄_j; ref) - b̄1(x̄_j; ref')|` along the coupled trajectories.
    pub drift_abs_diff: f64,
    /// Mean `h(x̄_j, x̄'_j) / 2`: the share of `E[h]` attributable to one
    /// reference ensemble, in the units of `E[h]`.
    pub h_contribution: f64,
    /// `(t, drift_abs_diff, h_contribution)` per recorded time (t > 0).
    pub per_time: Vec<(f64, f64, f64)>,
}

/// Default threshold above which a run is "budget-dominated".
pub const BUDGET_THRESHOLD: f64 = 0.10;

pub fn is_budget_dominated(h_contribution: f64, h_mean: f64, threshold: f64) -> bool {
    h_contribution > threshold * h_mean
}

/// `(mean |b̄1(x̄_j; ref) - b̄1(x̄_j; ref')|, mean h(x̄_j, x̄'_j) / 2)` for an
/// ensemble running with audit enabled.
pub fn audit_observation(model: &ParticleModel, spec: &MetricSpec, ens: &CoupledEnsemble) -> Result<(f64, f64)> {
    let audit = ens
        .audit
        .as_ref()
        .ok_or_else(|| Error::config("audit", "ensemble was built without audit"))?;
    let law = MeanFieldLaw::from_support(&model.interaction, &ens.reference);
    let law2 = MeanFieldLaw::from_support(&model.interaction, &audit.reference);
    let mut d = Vec::with_capacity(ens.x_bar.len());
    let mut h = Vec::with_capacity(ens.x_bar.len());
    for (&a, &b) in ens.x_bar.iter().zip(audit.x_bar.iter()) {
        d.push((law.bar_b1(model, a) - law2.bar_b1(model, a)).abs());
        h.push(0.5 * h_metric(spec, a, b)?);
    }
    Ok((mean(&d), mean(&h)))
}

pub fn surrogate_error_budget(
    model: &ParticleModel,
    spec: &MetricSpec,
    config: &SimConfig,
    replicas: usize,
) -> Result<SurrogateBudget> {
    if config.surrogate != SurrogateBackend::Ensemble {
        return Err(Error::config(
            "surrogate",
            "the error budget is only defined for the ensemble backend",
        ));
    }
    if config.n_reference < config.n_particles {
        return Err(Error::config("n_reference", "need M >= N"));
    }
    if replicas == 0 {
        return Err(Error::config("replicas", "need at least one replica"));
    }
    let mut audited = config.clone();
    audited.audit = true;
    let times: Vec<f64> = audited.record_times.iter().copied().filter(|&t| t > 0.0).collect();
    let mut drift = vec![vec![0.0; replicas]; times.len()];
    let mut hsum = vec![vec![0.0; replicas]; times.len()];
    for r in 0..replicas {
        let mut cfg = audited.clone();
        cfg.seed = audited.seed.wrapping_add(r as u64);
        let mut slot = 0;
        run_observed(model, &cfg, |ens, t| {
            if t <= 0.0 {
                return Ok(());
            }
            let (d, h) = audit_observation(model, spec, ens)?;
            drift[slot][r] = d;
            hsum[slot][r] = h;
            slot += 1;
            Ok(())
        })?;
    }
    let per_time: Vec<(f64, f64, f64)> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, mean(&drift[i]), mean(&hsum[i])))
        .collect();
    let (drift_abs_diff, h_contribution) = if per_time.is_empty() {
        (0.0, 0.0)
    } else {
        let d: Vec<f64> = per_time.iter().map(|p| p.1).collect();
        let h: Vec<f64> = per_time.iter().map(|p| p.2).collect();
        (mean(&d), mean(&h))
    };
    Ok(SurrogateBudget {
        drift_abs_diff,
        h_contribution,
        per_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_linear_model, build_neural_model, NeuralFieldParams, SynapticKernel};
    use crate::rng::keyed_normal;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn bar_b1_examples() {
        let zero = build_linear_model(0.0, 1.0, 0.5).unwrap();
        let mu = EmpiricalMeasure::new(vec![1.0, 3.0]).unwrap();
        assert_eq!(bar_b1(&zero, 0.7, &mu).unwrap(), 0.0);
        let lin = build_linear_model(0.5, 1.0, 0.5).unwrap();
        assert_eq!(bar_b1(&lin, 0.0, &mu).unwrap(), 1.0);
        assert!(EmpiricalMeasure::new(vec![]).is_err());
        assert!(EmpiricalMeasure::new(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn sigmoid_average_under_symmetric_law() {
        let (model, _) = build_neural_model(&NeuralFieldParams {
            coupling: SynapticKernel::Constant(1.0),
            ..Default::default()
        })
        .unwrap();
        let m = 1_000_000;
        let support: Vec<f64> = (0..m).map(|k| keyed_normal(99, k as u64, 0, 0)).collect();
        let values: Vec<f64> = support.iter().map(|&y| crate::model::sigmoid(y)).collect();
        let mu = EmpiricalMeasure::new(support).unwrap();
        let est = bar_b1(&model, 0.0, &mu).unwrap();
        let mean_s = mean(&values);
        let var = values.iter().map(|v| (v - mean_s).powi(2)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        assert!((est - 0.5).abs() <= 3.0 * se, "est={est} se={se}");
    }

    #[test]
    fn dense_and_separable_paths_agree() {
        let lin = build_linear_model(0.3, 1.0, 0.5).unwrap();
        let dense = ParticleModel::new(
            "dense-linear",
            |_, x| -x,
            Interaction::dense(|x, y| 0.3 * (y - x)),
            |_| 0.5,
        );
        let mu = EmpiricalMeasure::new(vec![-1.0, 0.25, 2.0, 7.5]).unwrap();
        for x in [-3.0, 0.0, 1.5] {
            assert_relative_eq!(
                bar_b1(&lin, x, &mu).unwrap(),
                bar_b1(&dense, x, &mu).unwrap(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn budget_threshold_rule() {
        assert!(is_budget_dominated(0.2, 1.0, BUDGET_THRESHOLD));
        assert!(!is_budget_dominated(0.05, 1.0, BUDGET_THRESHOLD));
    }

    #[test]
    fn budget_vanishes_without_interaction() {
        let model = build_linear_model(0.0, 1.0, 0.5).unwrap();
        let spec = MetricSpec::flat_quadratic(2, 3).unwrap();
        let mut cfg = SimConfig::new(8, 0.01, 1.0, 3);
        cfg.record_times = vec![0.5, 1.0];
        let b = surrogate_error_budget(&model, &spec, &cfg, 2).unwrap();
        assert_eq!(b.drift_abs_diff, 0.0);
        assert_eq!(b.h_contribution, 0.0);
    }

    #[test]
    fn budget_scales_like_inverse_root_m() {
        let model = build_linear_model(0.5, 1.0, 0.5).unwrap();
        let spec = MetricSpec::flat_quadratic(2, 3).unwrap();
        let mut cfg = SimConfig::new(16, 0.01, 5.0, 11);
        cfg.record_times = (1..=10).map(|k| 0.5 * k as f64).collect();
        cfg.n_reference = 256;
        let small = surrogate_error_budget(&model, &spec, &cfg, 8).unwrap();
        cfg.n_reference = 1024;
        let large = surrogate_error_budget(&model, &spec, &cfg, 8).unwrap();
        let ratio = large.drift_abs_diff / small.drift_abs_diff;
        assert!((1.0 / 3.0..=0.75).contains(&ratio), "ratio={ratio}");
        // M = N is flagged once the budget is compared to E[h]
        assert!(large.h_contribution < small.h_contribution);
    }

    proptest! {
        #[test]
        fn bar_b1_is_permutation_invariant(mut ys in proptest::collection::vec(-5.0f64..5.0, 1..40), x in -5.0f64..5.0) {
            let (model, _) = build_neural_model(&NeuralFieldParams::default()).unwrap();
            let a = bar_b1(&model, x, &EmpiricalMeasure::new(ys.clone()).unwrap()).unwrap();
            ys.reverse();
            let b = bar_b1(&model, x, &EmpiricalMeasure::new(ys).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-14);
        }

        #[test]
        fn point_mass_matches_kernel(x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let (model, _) = build_neural_model(&NeuralFieldParams::default()).unwrap();
            let mu = EmpiricalMeasure::new(vec![y]).unwrap();
            prop_assert_eq!(bar_b1(&model, x, &mu).unwrap(), model.b1(x, y));
        }

        #[test]
        fn linear_closed_form(ys in proptest::collection::vec(-5.0f64..5.0, 1..40), x in -5.0f64..5.0, theta in -2.0f64..2.0) {
            let model = build_linear_model(theta, 1.0, 0.1).unwrap();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let got = bar_b1(&model, x, &EmpiricalMeasure::new(ys).unwrap()).unwrap();
            prop_assert!((got - theta * (m - x)).abs() <= 1e-12);
        }
    }
}
