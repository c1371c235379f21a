//! Numerical laboratory for the action-eigenvalue formulation of
//! non-relativistic quantum mechanics on exponential (Gaussian-type) wave
//! functions.
//!
//! * [`model`]: physical parameters, polynomial fields, grids.
//! * [`dynamics`]: the coefficient ODE flow, f(t), λ and the Hermiticity defect.
//! * [`discrete`]: broken-line wave functionals, the discrete action operator
//!   and the probability quadratures.
//! * [`oracle`]: an independent Crank–Nicolson Schrödinger solver.
//! * [`stationary`]: stationary eigenvalues λ₀ and endpoint prediction.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discrete;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod oracle;
mod poly;
pub mod quadrature;
pub mod stationary;

pub use discrete::{
    apply_action_operator, build_slices, endpoint_probability, lambda_discrete, path_probability,
    residual_convergence, tensor_probability, BrokenLine, EndpointProbability, LambdaDecomposition,
    NodeBox, OperatorMode, PathSampler, ResidualRow, ResidualStudy, SliceSet,
};
pub use dynamics::{
    action_eigenvalue, evolve, evolve_summary, f_internal, hermiticity_defect, rhs,
    CoefficientState, EvolutionResult, FlowSummary, IntegratorStats, Rhs,
};
pub use error::{QapError, Result, ValidationIssue};
pub use model::{
    eval_poly_jet, validate_model, DiscretizationContext, Jet, Model, PhysicalParams,
    PolynomialField, PotentialSchedule, TimeGrid,
};
pub use oracle::{
    auto_domain, compare_states, cross_check, expectation, propagate_grid, propagate_grid_observed,
    GridState, OracleComparison,
};
pub use stationary::{
    classical_action_reference, classical_limit_sweep, default_guesses, default_shape,
    find_stationary, lambda_of_initial, predict_endpoint, probe_expectation_integral,
    probe_sensitivity, search_stationary, ClassicalScenario, EndpointPrediction,
    InitialCoefficientVector, MultistartOutcome, ProbeMode, ProbeResult, SearchBlock,
    SearchOptions, StationaryProblem, StationaryResult, SweepRow,
};
