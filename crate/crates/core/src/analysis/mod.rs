//! Estimators, fits and bound calculators.

pub mod bounds;
pub mod estimate;
pub mod fit;
pub mod lemmas;

pub use bounds::{classical_gronwall_bound, compute_uniform_bound, lipschitz_estimate, ode_comparison, BoundInputs, LogValue};
pub use estimate::{estimate_h, joint_marginal_test, EstimateOptions, HEstimate, SweepResult, SweepRow};
pub use fit::{check_bound_ordering, fit_rate, uniformity_test, RateFit, UniformityReport};
pub use lemmas::{moment_sum_check, rademacher_moment_exact, run_lemma_suite, MomentSampler};
