//! Policy-iteration and value-iteration Q-learning on a fixed batch of
//! transitions.
//!
//! Both loops solve for `θ` by forcing the Bellman residual to be orthogonal
//! to a set of weight functions evaluated at the samples:
//!
//! ```text
//! PI:  Wᵀ Z⁽ⁱ⁾ θ⁽ⁱ⁾ = Wᵀ η,                 Z⁽ⁱ⁾ row k = Ψ(xₖ, μₖ) − Ψ(x′ₖ, û⁽ⁱ⁾(x′ₖ))
//! VI:  Wᵀ Z θ⁽ⁱ⁾   = Wᵀ (η + Z′⁽ⁱ⁾ θ⁽ⁱ⁻¹⁾), Z row k = Ψ(xₖ, μₖ), Z′⁽ⁱ⁾ row k = Ψ(x′ₖ, û⁽ⁱ⁾(x′ₖ))
//! ```
//!
//! with Galerkin weights `W = [Ψ(xₖ, μₖ)]`. The Monte-Carlo volume factor
//! multiplies both sides and is dropped.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SVD};

use crate::basis::{BasisSet, GainMatrix, QApprox, TermKind};
use crate::dynamics::{ControlVector, FeedbackLaw, StateVector};
use crate::error::{Error, Result};
use crate::sampling::{fmt_f64, SampleSet};

/// Target policy evaluated at successor states.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Zero { inputs: usize },
    Feedback(GainMatrix),
}

impl Policy {
    pub fn input_dim(&self) -> usize {
        match self {
            Policy::Zero { inputs } => *inputs,
            Policy::Feedback(g) => g.input_dim(),
        }
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Policy::Zero { inputs } => DVector::zeros(*inputs),
            Policy::Feedback(g) => g.apply(x),
        }
    }

    pub fn gain(&self) -> Option<&GainMatrix> {
        match self {
            Policy::Zero { .. } => None,
            Policy::Feedback(g) => Some(g),
        }
    }
}

impl FeedbackLaw for Policy {
    fn control(&self, x: &StateVector) -> Result<ControlVector> {
        Ok(Policy::control(self, x))
    }
}

/// Starting Q-function for value iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialQ {
    /// `c (‖x‖² + ‖μ‖²)`, placed on the basis' pure-square terms.
    ScaledSquares(f64),
    Theta(DVector<f64>),
    /// Q-function of the given policy, obtained by one policy-evaluation solve.
    EvaluatePolicy(Policy),
}

impl Default for InitialQ {
    fn default() -> Self {
        InitialQ::ScaledSquares(0.01)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    /// Stop once `‖θ⁽ⁱ⁾ − θ⁽ⁱ⁻¹⁾‖ ≤ xi`.
    pub xi: f64,
    pub max_iterations: usize,
    /// Singular values below `svd_tolerance · σ_max` count as rank loss.
    pub svd_tolerance: f64,
    /// Fraction of samples kept out of the regression for the residual diagnostic.
    pub holdout_fraction: f64,
    /// Policy evaluated first by policy iteration; `None` means `u = 0`.
    pub initial_policy: Option<Policy>,
    pub initial_q: InitialQ,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            xi: 1e-5,
            max_iterations: 5000,
            svd_tolerance: 1e-10,
            holdout_fraction: 0.2,
            initial_policy: None,
            initial_q: InitialQ::default(),
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::invalid("xi", format!("must be positive, got {}", self.xi)));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.svd_tolerance > 0.0 && self.svd_tolerance < 1.0) {
            return Err(Error::invalid(
                "svd_tolerance",
                format!("must lie in (0, 1), got {}", self.svd_tolerance),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `W`, `Z` and right-hand side of one projected Bellman equation.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSystem {
    pub weights: DMatrix<f64>,
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
}

impl RegressionSystem {
    /// `‖Wᵀ(Zθ − t)‖ / ‖Wᵀt‖` (absolute when `Wᵀt = 0`).
    pub fn orthogonality(&self, theta: &DVector<f64>) -> f64 {
        let rhs = self.weights.tr_mul(&self.target);
        let res = self.weights.tr_mul(&(&self.features * theta - &self.target));
        let scale = rhs.norm();
        if scale > 0.0 {
            res.norm() / scale
        } else {
            res.norm()
        }
    }
}

fn check_set(set: &SampleSet, basis: &BasisSet) -> Result<()> {
    if set.state_dim != basis.state_dim() || set.input_dim != basis.input_dim() {
        return Err(Error::invalid(
            "dataset",
            format!(
                "dataset is {}+{} dimensional but basis expects {}+{}",
                set.state_dim,
                set.input_dim,
                basis.state_dim(),
                basis.input_dim()
            ),
        ));
    }
    Ok(())
}

fn check_policy(policy: &Policy, basis: &BasisSet) -> Result<()> {
    if policy.input_dim() != basis.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "policy output",
            expected: basis.input_dim(),
            actual: policy.input_dim(),
        });
    }
    Ok(())
}

/// Rows `Ψ(xₖ, μₖ)`.
fn current_features(set: &SampleSet, basis: &BasisSet) -> DMatrix<f64> {
    let mut psi = DMatrix::zeros(set.len(), basis.len());
    let mut row = vec![0.0; basis.len()];
    for (k, s) in set.samples.iter().enumerate() {
        basis.eval_into(s.x.as_slice(), s.mu.as_slice(), &mut row);
        psi.row_mut(k).copy_from_slice(&row);
    }
    psi
}

/// Rows `Ψ(x′ₖ, û(x′ₖ))`.
fn successor_features(set: &SampleSet, basis: &BasisSet, policy: &Policy) -> DMatrix<f64> {
    let mut psi = DMatrix::zeros(set.len(), basis.len());
    let mut row = vec![0.0; basis.len()];
    for (k, s) in set.samples.iter().enumerate() {
        let u = policy.control(&s.x_next);
        basis.eval_into(s.x_next.as_slice(), u.as_slice(), &mut row);
        psi.row_mut(k).copy_from_slice(&row);
    }
    psi
}

fn costs(set: &SampleSet) -> DVector<f64> {
    DVector::from_iterator(set.len(), set.samples.iter().map(|s| s.pi))
}

pub fn piql_regression_matrices(set: &SampleSet, basis: &BasisSet, policy: &Policy) -> Result<RegressionSystem> {
    check_set(set, basis)?;
    check_policy(policy, basis)?;
    let weights = current_features(set, basis);
    let features = &weights - successor_features(set, basis, policy);
    Ok(RegressionSystem {
        weights,
        features,
        target: costs(set),
    })
}

pub fn viql_regression_matrices(set: &SampleSet, basis: &BasisSet, previous: &QApprox) -> Result<RegressionSystem> {
    check_set(set, basis)?;
    if previous.basis() != basis {
        return Err(Error::invalid("previous", "Q-function uses a different basis"));
    }
    let policy = Policy::Feedback(previous.gain()?);
    let weights = current_features(set, basis);
    let target = costs(set) + successor_features(set, basis, &policy) * previous.theta();
    Ok(RegressionSystem {
        features: weights.clone(),
        weights,
        target,
    })
}

/// Rank-revealing solve of `(WᵀZ) θ = Wᵀ t` through the SVD of `WᵀZ`.
struct ProjectedSolver {
    svd: SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cutoff: f64,
}

impl ProjectedSolver {
    fn new(weights: &DMatrix<f64>, features: &DMatrix<f64>, tolerance: f64) -> Result<Self> {
        if weights.shape() != features.shape() {
            return Err(Error::invalid("W/Z", "weight and feature matrices differ in shape"));
        }
        let dim = features.ncols();
        let gram = weights.tr_mul(features);
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("W/Z", "non-finite entries in the regression matrices"));
        }
        let svd = SVD::new(gram, true, true);
        let largest = svd.singular_values.max();
        let cutoff = tolerance * largest;
        let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
        if rank < dim || largest == 0.0 {
            return Err(Error::Singular { rank, dim, tolerance });
        }
        Ok(Self { svd, cutoff })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.svd
            .solve(rhs, self.cutoff)
            .expect("SVD was computed with U and Vᵀ")
    }
}

fn solve_system(system: &RegressionSystem, svd_tolerance: f64) -> Result<DVector<f64>> {
    let solver = ProjectedSolver::new(&system.weights, &system.features, svd_tolerance)?;
    Ok(solver.solve(&system.weights.tr_mul(&system.target)))
}

pub fn piql_update(system: &RegressionSystem, svd_tolerance: f64) -> Result<DVector<f64>> {
    solve_system(system, svd_tolerance)
}

pub fn viql_update(system: &RegressionSystem, svd_tolerance: f64) -> Result<DVector<f64>> {
    solve_system(system, svd_tolerance)
}

/// RMS of `Ψ(x, μ)ᵀθ − Ψ(x′, û(x′))ᵀθ − π` over `set`; NaN for an empty set.
pub fn bellman_residual(set: &SampleSet, basis: &BasisSet, theta: &DVector<f64>, policy: &Policy) -> Result<f64> {
    check_set(set, basis)?;
    check_policy(policy, basis)?;
    if theta.len() != basis.len() {
        return Err(Error::DimensionMismatch {
            context: "θ length vs basis size",
            expected: basis.len(),
            actual: theta.len(),
        });
    }
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let residual = (current_features(set, basis) - successor_features(set, basis, policy)) * theta - costs(set);
    Ok((residual.norm_squared() / set.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Piql,
    Viql,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Piql => "piql",
            Algorithm::Viql => "viql",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceStatus {
    Converged,
    MaxIterations,
    Failed,
}

impl TraceStatus {
    pub fn name(self) -> &'static str {
        match self {
            TraceStatus::Converged => "converged",
            TraceStatus::MaxIterations => "max_iterations",
            TraceStatus::Failed => "error",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub index: usize,
    pub theta: DVector<f64>,
    /// `‖θ⁽ⁱ⁾ − θ⁽ⁱ⁻¹⁾‖`; absent for the first parameter vector.
    pub theta_delta: Option<f64>,
    /// Greedy gain of `θ⁽ⁱ⁾`; absent if `Q̂⁽ⁱ⁾` is not coercive in μ.
    pub gain: Option<GainMatrix>,
    /// Held-out Bellman residual RMS of `θ⁽ⁱ⁾` under the policy used in its update.
    pub bellman_rms: f64,
    /// Relative orthogonality defect of the solve that produced `θ⁽ⁱ⁾`; zero
    /// for a supplied initial vector.
    pub orthogonality: f64,
}

#[derive(Debug)]
pub struct IterationTrace {
    pub algorithm: Algorithm,
    pub basis: BasisSet,
    pub records: Vec<IterationRecord>,
    pub status: TraceStatus,
    pub failure: Option<Error>,
    /// Iterations after which `Q̂` rose above its predecessor at some
    /// training sample by more than `1e-6·max(1, |Q̂|)`.
    pub monotonicity_warnings: Vec<usize>,
}

impl IterationTrace {
    fn new(algorithm: Algorithm, basis: &BasisSet) -> Self {
        Self {
            algorithm,
            basis: basis.clone(),
            records: Vec::new(),
            status: TraceStatus::MaxIterations,
            failure: None,
            monotonicity_warnings: Vec::new(),
        }
    }

    fn fail(mut self, iteration: usize, err: Error) -> Self {
        self.status = TraceStatus::Failed;
        self.failure = Some(Error::at_iteration(iteration, err));
        self
    }

    /// Index of the last recorded iteration.
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.index)
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn final_q(&self) -> Option<QApprox> {
        self.last()
            .map(|r| QApprox::new(self.basis.clone(), r.theta.clone()).expect("θ sized by basis"))
    }

    pub fn final_gain(&self) -> Option<&GainMatrix> {
        self.last().and_then(|r| r.gain.as_ref())
    }

    pub fn converged(&self) -> bool {
        self.status == TraceStatus::Converged
    }

    /// CSV with columns `iter, theta_delta, bellman_rms, k_<row>_<col>…, theta_<j>…`.
    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            let _ = writeln!(out, "# config_hash={h}");
        }
        let gain_shape = self
            .records
            .iter()
            .find_map(|r| r.gain.as_ref())
            .map(|g| g.matrix().shape());
        let mut header = vec!["iter".to_string(), "theta_delta".into(), "bellman_rms".into()];
        if let Some((rows, cols)) = gain_shape {
            for r in 0..rows {
                for c in 0..cols {
                    header.push(format!("k_{}_{}", r + 1, c + 1));
                }
            }
        }
        header.extend((1..=self.basis.len()).map(|j| format!("theta_{j}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for rec in &self.records {
            let mut row = vec![
                rec.index.to_string(),
                rec.theta_delta.map(fmt_f64).unwrap_or_default(),
                fmt_f64(rec.bellman_rms),
            ];
            if let Some((rows, cols)) = gain_shape {
                match &rec.gain {
                    Some(g) if g.matrix().shape() == (rows, cols) => {
                        for r in 0..rows {
                            for c in 0..cols {
                                row.push(fmt_f64(g.matrix()[(r, c)]));
                            }
                        }
                    }
                    _ => row.extend(std::iter::repeat_n(String::new(), rows * cols)),
                }
            }
            row.extend(rec.theta.iter().map(|v| fmt_f64(*v)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn q_rises(basis: &BasisSet, set: &SampleSet, previous: &DVector<f64>, current: &DVector<f64>) -> bool {
    let psi = current_features(set, basis);
    let before = &psi * previous;
    let after = &psi * current;
    before
        .iter()
        .zip(after.iter())
        .any(|(b, a)| a - b > 1e-6 * b.abs().max(1.0))
}

fn split(set: &SampleSet, basis: &BasisSet, config: &LearnerConfig) -> Result<(SampleSet, SampleSet)> {
    config.validate()?;
    check_set(set, basis)?;
    let (train, held) = set.split_holdout(config.holdout_fraction)?;
    if train.len() < basis.len() {
        return Err(Error::invalid(
            "dataset",
            format!("{} training samples for {} basis functions", train.len(), basis.len()),
        ));
    }
    // The residual diagnostic falls back to the training data when nothing is held out.
    let held = if held.is_empty() { train.clone() } else { held };
    Ok((train, held))
}

/// Policy iteration: evaluate `û⁽ⁱ⁾` by one projected solve, improve greedily,
/// stop when consecutive parameter vectors are within `xi`.
pub fn run_piql(set: &SampleSet, basis: &BasisSet, config: &LearnerConfig) -> Result<IterationTrace> {
    let (train, held) = split(set, basis, config)?;
    let mut policy = config.initial_policy.clone().unwrap_or(Policy::Zero {
        inputs: basis.input_dim(),
    });
    check_policy(&policy, basis)?;
    let mut trace = IterationTrace::new(Algorithm::Piql, basis);
    let weights = current_features(&train, basis);
    let eta = costs(&train);

    for i in 0..=config.max_iterations {
        let features = &weights - successor_features(&train, basis, &policy);
        let system = RegressionSystem {
            weights: weights.clone(),
            features,
            target: eta.clone(),
        };
        let theta = match piql_update(&system, config.svd_tolerance) {
            Ok(t) => t,
            Err(e) => return Ok(trace.fail(i, e)),
        };
        let bellman_rms = bellman_residual(&held, basis, &theta, &policy)?;
        let q = QApprox::new(basis.clone(), theta.clone())?;
        let gain = q.gain();
        let prev = trace.last().map(|r| r.theta.clone());
        let theta_delta = prev.as_ref().map(|p| (&theta - p).norm());
        if let Some(p) = &prev {
            if q_rises(basis, &train, p, &theta) {
                trace.monotonicity_warnings.push(i);
            }
        }
        trace.records.push(IterationRecord {
            index: i,
            orthogonality: system.orthogonality(&theta),
            theta,
            theta_delta,
            gain: gain.as_ref().ok().cloned(),
            bellman_rms,
        });
        if theta_delta.is_some_and(|d| d <= config.xi) {
            trace.status = TraceStatus::Converged;
            return Ok(trace);
        }
        match gain {
            Ok(g) => policy = Policy::Feedback(g),
            Err(e) => return Ok(trace.fail(i, e)),
        }
    }
    trace.status = TraceStatus::MaxIterations;
    Ok(trace)
}

fn initial_theta(init: &InitialQ, train: &SampleSet, basis: &BasisSet, config: &LearnerConfig) -> Result<DVector<f64>> {
    match init {
        InitialQ::ScaledSquares(c) => {
            let mut theta = DVector::zeros(basis.len());
            for (j, t) in basis.terms().iter().enumerate() {
                let pure_square = t.degree() == 2 && t.x_exponents().iter().chain(t.mu_exponents()).any(|&e| e == 2);
                if pure_square {
                    theta[j] = *c;
                }
            }
            let has_action_squares = (0..basis.input_dim())
                .all(|i| (0..basis.len()).any(|j| basis.term_kind(j) == TermKind::MuQuadratic { i, j: i }));
            if !has_action_squares {
                return Err(Error::UnsupportedBasis(
                    "scaled-square initialization needs a μᵢ² term for every input".into(),
                ));
            }
            Ok(theta)
        }
        InitialQ::Theta(theta) => {
            if theta.len() != basis.len() {
                return Err(Error::DimensionMismatch {
                    context: "initial θ length",
                    expected: basis.len(),
                    actual: theta.len(),
                });
            }
            Ok(theta.clone())
        }
        InitialQ::EvaluatePolicy(policy) => {
            check_policy(policy, basis)?;
            let system = piql_regression_matrices(train, basis, policy)?;
            piql_update(&system, config.svd_tolerance)
        }
    }
}

/// Value iteration: one projected Bellman backup per iteration from `Q̂⁽⁰⁾`.
pub fn run_viql(set: &SampleSet, basis: &BasisSet, config: &LearnerConfig) -> Result<IterationTrace> {
    let (train, held) = split(set, basis, config)?;
    let mut trace = IterationTrace::new(Algorithm::Viql, basis);
    let theta0 = match initial_theta(&config.initial_q, &train, basis, config) {
        Ok(t) => t,
        Err(e) if e.is_numerical() => return Ok(trace.fail(0, e)),
        Err(e) => return Err(e),
    };

    let psi = current_features(&train, basis);
    let eta = costs(&train);
    let solver = match ProjectedSolver::new(&psi, &psi, config.svd_tolerance) {
        Ok(s) => s,
        Err(e) => return Ok(trace.fail(1, e)),
    };

    let gain0 = QApprox::new(basis.clone(), theta0.clone())?.gain();
    let residual0 = match &gain0 {
        Ok(g) => bellman_residual(&held, basis, &theta0, &Policy::Feedback(g.clone()))?,
        Err(_) => f64::NAN,
    };
    trace.records.push(IterationRecord {
        index: 0,
        theta: theta0,
        theta_delta: None,
        gain: gain0.as_ref().ok().cloned(),
        bellman_rms: residual0,
        orthogonality: 0.0,
    });
    let mut policy = match gain0 {
        Ok(g) => Policy::Feedback(g),
        Err(e) => return Ok(trace.fail(1, e)),
    };

    for i in 1..=config.max_iterations {
        let prev = trace.last().expect("initial record").theta.clone();
        let target = &eta + successor_features(&train, basis, &policy) * &prev;
        let theta = solver.solve(&psi.tr_mul(&target));
        let system = RegressionSystem {
            weights: psi.clone(),
            features: psi.clone(),
            target,
        };
        let orthogonality = system.orthogonality(&theta);
        let bellman_rms = bellman_residual(&held, basis, &theta, &policy)?;
        let gain = QApprox::new(basis.clone(), theta.clone())?.gain();
        let theta_delta = (&theta - &prev).norm();
        if q_rises(basis, &train, &prev, &theta) {
            trace.monotonicity_warnings.push(i);
        }
        trace.records.push(IterationRecord {
            index: i,
            theta,
            theta_delta: Some(theta_delta),
            gain: gain.as_ref().ok().cloned(),
            bellman_rms,
            orthogonality,
        });
        if theta_delta <= config.xi {
            trace.status = TraceStatus::Converged;
            return Ok(trace);
        }
        match gain {
            Ok(g) => policy = Policy::Feedback(g),
            Err(e) => return Ok(trace.fail(i, e)),
        }
    }
    trace.status = TraceStatus::MaxIterations;
    Ok(trace)
}
