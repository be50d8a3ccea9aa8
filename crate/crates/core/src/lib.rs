//! Numerical laboratory for the simple random walk in Bernoulli potentials.
//!
//! The crate computes restricted quenched and annealed travel costs by
//! solving killed-walk linear systems, estimates Lyapunov exponents and their
//! derivatives in the Bernoulli parameter, evaluates large-deviation rate
//! functions, and checks the associated inequalities at desk scale.
//!
//! All numerical routines are generic over [`Scalar`] (`f64` or `f32`); the
//! `*F64` aliases below name the double-precision instantiations used by the
//! command-line front end.

pub mod annealed;
pub mod bounds;
pub mod environment;
pub mod error;
pub mod lattice;
pub mod lyapunov;
pub mod mc;
pub mod quenched;
pub mod rate;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod verify;

pub use environment::{
    enumerate_environments, relevant_sites_excluding, sample_environment, Environment,
    WeightedEnvironment, DEFAULT_ENUMERATION_GUARD,
};
pub use annealed::{CostEstimate, DerivativeReport, EnumeratedCosts, EstimatorKind};
pub use error::{Error, Result};
pub use lattice::{build_box, l1_norm, linf_norm, BoxGeometry, Neighbor};
pub use scalar::Scalar;
pub use lyapunov::{BoxRule, ExponentKind, LyapunovConfig, LyapunovPoint};
pub use mc::{Estimate, RunPlan, StreamingStats};
pub use quenched::FlipRatioReport;
pub use rate::{ExponentCache, RateFunctionValue, RateSearchConfig};
pub use solver::{solve_travel_field, QuenchedField, SolverConfig};

pub type QuenchedFieldF64 = QuenchedField<f64>;
pub type SolverConfigF64 = SolverConfig<f64>;
pub type EnumeratedCostsF64 = EnumeratedCosts<f64>;
pub type FlipRatioReportF64 = FlipRatioReport<f64>;
pub type QuenchedFieldF32 = QuenchedField<f32>;
pub type SolverConfigF32 = SolverConfig<f32>;
