//! Model-free optimal control of continuous-time systems by off-policy
//! Q-learning.
//!
//! The crate learns a quadratic-in-action Q-function `Q̂(x, μ) = Ψ(x, μ)ᵀθ`
//! from a fixed batch of sampled transitions `(x, μ, x′, π)`, using either
//! policy iteration ([`learner::run_piql`]) or value iteration
//! ([`learner::run_viql`]). Each parameter update projects the Bellman
//! residual onto a set of weight functions (Galerkin weighting by default)
//! and solves the resulting square system with a rank-revealing solver.
//!
//! [`lqr_oracle`] provides model-based ground truth for linear-quadratic
//! problems: a Newton–Kleinman CARE solver and the exact finite-interval
//! Q-matrix, against which the data-driven results are checked.

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod learner;
pub mod lqr_oracle;
pub mod sampling;

pub use basis::{BasisSet, GainMatrix, Monomial, QApprox};
pub use dynamics::{
    ClosedLoopConfig, ControlVector, DynamicsModel, FeedbackLaw, LinearModel, NonlinearBenchmark, QuadraticCost,
    StageCost, StateVector,
};
pub use error::{Error, Result};

pub use learner::{IterationTrace, LearnerConfig, Policy, TraceStatus};
pub use lqr_oracle::{OptimalQMatrix, RiccatiSolution};
pub use sampling::{BoxDomain, Sample, SampleSet};
