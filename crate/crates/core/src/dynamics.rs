//! Continuous-time system models, stage costs and fixed-step RK4 integration.
//!
//! Everything here is deterministic: a transition is advanced with a fixed
//! number of classical Runge–Kutta substeps, with the running cost carried as
//! one extra state so that the terminal state and the integrated cost come out
//! of the same scheme.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

/// States whose Euclidean norm exceeds this are treated as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Default number of RK4 substeps per sampling interval.
pub const DEFAULT_SUBSTEPS: usize = 10;

/// Time-invariant dynamics `ẋ = f(x, u)`.
pub trait DynamicsModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &StateVector, u: &ControlVector) -> StateVector;

    /// Short identifier recorded in dataset headers.
    fn id(&self) -> &str {
        "custom"
    }
}

/// `ẋ = Ax + Bu`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    id: String,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid(
                "A",
                format!("must be square, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                context: "rows of B",
                expected: a.nrows(),
                actual: b.nrows(),
            });
        }
        if b.ncols() == 0 {
            return Err(Error::invalid("B", "needs at least one input column"));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("A/B", "entries must be finite"));
        }
        Ok(Self {
            a,
            b,
            id: "linear".to_string(),
        })
    }

    /// Longitudinal F-16 short-period model with elevator actuator,
    /// state `[angle of attack, pitch rate, elevator deflection]`.
    pub fn f16() -> Self {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[
                -1.01887, 0.90506, -0.00215, //
                0.82225, -1.07741, -0.17555, //
                0.0, 0.0, -1.0,
            ],
        );
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        Self {
            a,
            b,
            id: "f16".to_string(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl DynamicsModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        &self.a * x + &self.b * u
    }

    fn id(&self) -> &str {
        &self.id
    }
}

/// Two-state polynomial benchmark built so that, for `S(x) = ‖x‖²` and
/// `W(u) = u²`, the optimal value is `V*(x) = x₁²/2 + x₂²` and the optimal
/// feedback is `u*(x) = −x₁x₂`.
///
/// ```text
/// ẋ₁ = −x₁ + x₂
/// ẋ₂ = −0.5 (x₁ + x₂) + 0.5 x₁² x₂ + x₁ u
/// ```
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NonlinearBenchmark;

impl NonlinearBenchmark {
    pub fn optimal_value(x: &StateVector) -> f64 {
        0.5 * x[0] * x[0] + x[1] * x[1]
    }

    pub fn optimal_control(x: &StateVector) -> ControlVector {
        DVector::from_element(1, -x[0] * x[1])
    }
}

impl DynamicsModel for NonlinearBenchmark {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &StateVector, u: &ControlVector) -> StateVector {
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![-x1 + x2, -0.5 * (x1 + x2) + 0.5 * x1 * x1 * x2 + x1 * u[0]])
    }

    fn id(&self) -> &str {
        "nonlinear"
    }
}

/// Running cost `R(x, u) = S(x) + W(u)`.
pub trait StageCost: Send + Sync {
    fn state_cost(&self, x: &StateVector) -> f64;
    fn control_cost(&self, u: &ControlVector) -> f64;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
}

/// `S(x) = xᵀ S x`, `W(u) = uᵀ W u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    s: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(s: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() || !w.is_square() {
            return Err(Error::invalid("S/W", "cost weights must be square"));
        }
        if s.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("S/W", "cost weights must be finite"));
        }
        let s = (&s + s.transpose()) * 0.5;
        let w = (&w + w.transpose()) * 0.5;
        Ok(Self { s, w })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            s: DMatrix::identity(n, n),
            w: DMatrix::identity(m, m),
        }
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
}

impl StageCost for QuadraticCost {
    fn state_cost(&self, x: &StateVector) -> f64 {
        x.dot(&(&self.s * x))
    }

    fn control_cost(&self, u: &ControlVector) -> f64 {
        u.dot(&(&self.w * u))
    }

    fn state_dim(&self) -> usize {
        self.s.nrows()
    }

    fn input_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// State feedback `u = κ(x)` used for closed-loop simulation.
pub trait FeedbackLaw {
    fn control(&self, x: &StateVector) -> Result<ControlVector>;
}

impl<F> FeedbackLaw for F
where
    F: Fn(&StateVector) -> Result<ControlVector>,
{
    fn control(&self, x: &StateVector) -> Result<ControlVector> {
        self(x)
    }
}

fn check_len(context: &'static str, expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

fn check_dims(model: &dyn DynamicsModel, x: &StateVector, u: &ControlVector) -> Result<()> {
    check_len("state vector", model.state_dim(), x)?;
    check_len("control vector", model.input_dim(), u)
}

pub(crate) fn check_cost(model: &dyn DynamicsModel, cost: &dyn StageCost) -> Result<()> {
    if cost.state_dim() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "cost state dimension",
            expected: model.state_dim(),
            actual: cost.state_dim(),
        });
    }
    if cost.input_dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "cost input dimension",
            expected: model.input_dim(),
            actual: cost.input_dim(),
        });
    }
    Ok(())
}

pub fn stage_cost(cost: &dyn StageCost, x: &StateVector, u: &ControlVector) -> Result<f64> {
    check_len("state vector", cost.state_dim(), x)?;
    check_len("control vector", cost.input_dim(), u)?;
    Ok(cost.state_cost(x) + cost.control_cost(u))
}

/// One classical RK4 step of `ż = g(z)`.
fn rk4<G>(z: &DVector<f64>, h: f64, mut g: G) -> Result<DVector<f64>>
where
    G: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = g(z)?;
    let k2 = g(&(z + &k1 * (0.5 * h)))?;
    let k3 = g(&(z + &k2 * (0.5 * h)))?;
    let k4 = g(&(z + &k3 * h))?;
    Ok(z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn guard(z: &DVector<f64>, n: usize, time: f64) -> Result<()> {
    let x = z.rows(0, n);
    let norm = x.norm();
    if !norm.is_finite() || norm > DIVERGENCE_BOUND || !z.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            time,
            norm,
            bound: DIVERGENCE_BOUND,
        });
    }
    Ok(())
}

/// Advances `ẋ = f(x, u)` by `h` with `u` frozen.
pub fn rk4_step(model: &dyn DynamicsModel, x: &StateVector, u: &ControlVector, h: f64) -> Result<StateVector> {
    check_dims(model, x, u)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(
            "h",
            format!("step must be positive and finite, got {h}"),
        ));
    }
    let next = rk4(x, h, |z| Ok(model.drift(z, u)))?;
    guard(&next, next.len(), h)?;
    Ok(next)
}

/// Integrates state and running cost over `[0, Δt]` with the action held
/// constant, returning `(x′, π)` where `π = ∫ R(x(τ), μ) dτ`.
pub fn integrate_transition(
    model: &dyn DynamicsModel,
    cost: &dyn StageCost,
    x0: &StateVector,
    mu: &ControlVector,
    delta_t: f64,
    substeps: usize,
) -> Result<(StateVector, f64)> {
    check_dims(model, x0, mu)?;
    check_cost(model, cost)?;
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(Error::invalid(
            "delta_t",
            format!("must be positive and finite, got {delta_t}"),
        ));
    }
    if substeps == 0 {
        return Err(Error::invalid("substeps", "must be at least 1"));
    }
    let n = model.state_dim();
    let h = delta_t / substeps as f64;
    let control_cost = cost.control_cost(mu);

    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(x0);
    let rhs = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let x = z.rows(0, n).into_owned();
        let mut dz = DVector::zeros(n + 1);
        dz.rows_mut(0, n).copy_from(&model.drift(&x, mu));
        dz[n] = cost.state_cost(&x) + control_cost;
        Ok(dz)
    };
    for step in 0..substeps {
        z = rk4(&z, h, rhs)?;
        guard(&z, n, (step + 1) as f64 * h)?;
    }
    let pi = z[n].max(0.0);
    Ok((z.rows(0, n).into_owned(), pi))
}

/// Settings for closed-loop rollouts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedLoopConfig {
    pub horizon: f64,
    pub step: f64,
    /// State norm above which the loop is declared unstable.
    pub state_bound: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            horizon: 30.0,
            step: 0.01,
            state_bound: DIVERGENCE_BOUND,
        }
    }
}

impl ClosedLoopConfig {
    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", format!("must be positive, got {}", self.step)));
        }
        if self.state_bound.is_nan() || self.state_bound <= 0.0 {
            return Err(Error::invalid("state_bound", "must be positive"));
        }
        Ok(())
    }
}

/// Sampled closed-loop trajectory; `controls[k]` is the feedback at `states[k]`.
#[derive(Clone, Debug)]
pub struct ClosedLoopRun {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
    pub cost: f64,
}

fn rollout<O>(
    model: &dyn DynamicsModel,
    cost: &dyn StageCost,
    policy: &dyn FeedbackLaw,
    x0: &StateVector,
    config: &ClosedLoopConfig,
    mut observe: O,
) -> Result<f64>
where
    O: FnMut(f64, &StateVector) -> Result<()>,
{
    config.validate()?;
    check_len("initial state", model.state_dim(), x0)?;
    check_cost(model, cost)?;
    let n = model.state_dim();
    let m = model.input_dim();
    let rhs = |z: &DVector<f64>| -> Result<DVector<f64>> {
        let x = z.rows(0, n).into_owned();
        let u = policy.control(&x)?;
        check_len("policy output", m, &u)?;
        let mut dz = DVector::zeros(n + 1);
        dz.rows_mut(0, n).copy_from(&model.drift(&x, &u));
        dz[n] = cost.state_cost(&x) + cost.control_cost(&u);
        Ok(dz)
    };

    let mut z = DVector::zeros(n + 1);
    z.rows_mut(0, n).copy_from(x0);
    // The tolerance keeps e.g. 30 / 0.01 from losing a step to rounding.
    let full_steps = (config.horizon / config.step * (1.0 + 1e-12)).floor() as usize;
    let remainder = config.horizon - full_steps as f64 * config.step;
    observe(0.0, x0)?;
    let advance = |z: &mut DVector<f64>, h: f64, t: f64| -> Result<()> {
        *z = rk4(z, h, rhs)?;
        let norm = z.rows(0, n).norm();
        if !norm.is_finite() || norm > config.state_bound {
            return Err(Error::Unstable {
                time: t,
                norm,
                bound: config.state_bound,
            });
        }
        Ok(())
    };
    for k in 1..=full_steps {
        let t = k as f64 * config.step;
        advance(&mut z, config.step, t)?;
        observe(t, &z.rows(0, n).into_owned())?;
    }
    if remainder > 1e-9 * config.step {
        advance(&mut z, remainder, config.horizon)?;
        observe(config.horizon, &z.rows(0, n).into_owned())?;
    }
    Ok(z[n])
}

/// Cost `∫₀ᵀ S(x) + W(κ(x)) dt` along the closed loop `ẋ = f(x, κ(x))`.
pub fn closed_loop_cost(
    model: &dyn DynamicsModel,
    cost: &dyn StageCost,
    policy: &dyn FeedbackLaw,
    x0: &StateVector,
    config: &ClosedLoopConfig,
) -> Result<f64> {
    rollout(model, cost, policy, x0, config, |_, _| Ok(()))
}

/// Same rollout as [`closed_loop_cost`], keeping the sampled trajectory.
pub fn simulate_closed_loop(
    model: &dyn DynamicsModel,
    cost: &dyn StageCost,
    policy: &dyn FeedbackLaw,
    x0: &StateVector,
    config: &ClosedLoopConfig,
) -> Result<ClosedLoopRun> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    let total = rollout(model, cost, policy, x0, config, |t, x| {
        times.push(t);
        controls.push(policy.control(x)?);
        states.push(x.clone());
        Ok(())
    })?;
    Ok(ClosedLoopRun {
        times,
        states,
        controls,
        cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn decay() -> LinearModel {
        LinearModel::new(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    fn state_only_cost() -> QuadraticCost {
        QuadraticCost::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1)).unwrap()
    }

    #[test]
    fn stage_cost_examples() {
        let c = QuadraticCost::identity(2, 1);
        assert_eq!(stage_cost(&c, &dvector![0.0, 0.0], &dvector![0.0]).unwrap(), 0.0);
        assert_eq!(stage_cost(&c, &dvector![1.0, 2.0], &dvector![3.0]).unwrap(), 14.0);
        assert_abs_diff_eq!(
            stage_cost(&c, &dvector![0.1, 0.1], &dvector![0.0]).unwrap(),
            0.02,
            epsilon = 1e-15
        );
        assert!(matches!(
            stage_cost(&c, &dvector![1.0], &dvector![0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rk4_scalar_decay_matches_exponential() {
        let x = rk4_step(&decay(), &dvector![1.0], &dvector![0.0], 0.1).unwrap();
        assert_abs_diff_eq!(x[0], (-0.1f64).exp(), epsilon = 1e-7);
    }

    #[test]
    fn rk4_constant_derivative_is_exact() {
        let m = LinearModel::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let x = rk4_step(&m, &dvector![0.0, 0.0], &dvector![0.3, -2.0], 0.25).unwrap();
        assert_eq!(x, dvector![0.3 * 0.25, -2.0 * 0.25]);
    }

    #[test]
    fn rk4_local_error_is_fifth_order() {
        // Two half steps vs one full step: the gap shrinks by ~2⁵ when h halves.
        let m = NonlinearBenchmark;
        let x = dvector![0.7, -0.4];
        let u = dvector![0.3];
        let gap = |h: f64| {
            let one = rk4_step(&m, &x, &u, h).unwrap();
            let half = rk4_step(&m, &rk4_step(&m, &x, &u, h / 2.0).unwrap(), &u, h / 2.0).unwrap();
            (one - half).norm()
        };
        let ratio = gap(0.2) / gap(0.1);
        assert!((ratio - 32.0).abs() < 6.0, "ratio {ratio}");
    }

    #[test]
    fn rk4_rejects_bad_step() {
        assert!(rk4_step(&decay(), &dvector![1.0], &dvector![0.0], 0.0).is_err());
        assert!(rk4_step(&decay(), &dvector![1.0], &dvector![0.0], f64::NAN).is_err());
    }

    #[test]
    fn transition_at_equilibrium_is_zero() {
        let (x, pi) = integrate_transition(
            &NonlinearBenchmark,
            &QuadraticCost::identity(2, 1),
            &dvector![0.0, 0.0],
            &dvector![0.0],
            0.1,
            10,
        )
        .unwrap();
        assert_eq!(x, dvector![0.0, 0.0]);
        assert_eq!(pi, 0.0);
    }

    #[test]
    fn transition_cost_matches_closed_form() {
        let (x, pi) =
            integrate_transition(&decay(), &state_only_cost(), &dvector![1.0], &dvector![0.0], 0.1, 10).unwrap();
        assert_abs_diff_eq!(pi, (1.0 - (-0.2f64).exp()) / 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[0], (-0.1f64).exp(), epsilon = 1e-10);
    }

    #[test]
    fn transition_refinement_is_converged_on_f16() {
        let model = LinearModel::f16();
        let cost = QuadraticCost::identity(3, 1);
        let x0 = dvector![0.8, -0.5, 0.3];
        let mu = dvector![-0.7];
        let (xa, pa) = integrate_transition(&model, &cost, &x0, &mu, 0.1, 10).unwrap();
        let (xb, pb) = integrate_transition(&model, &cost, &x0, &mu, 0.1, 20).unwrap();
        assert!((xa - xb).norm() < 1e-8);
        assert!((pa - pb).abs() < 1e-8);
    }

    #[test]
    fn transition_detects_divergence() {
        let blowup = LinearModel::new(DMatrix::from_element(1, 1, 200.0), DMatrix::from_element(1, 1, 0.0)).unwrap();
        let err =
            integrate_transition(&blowup, &state_only_cost(), &dvector![1.0], &dvector![0.0], 0.1, 10).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn transition_validates_arguments() {
        let c = state_only_cost();
        assert!(integrate_transition(&decay(), &c, &dvector![1.0], &dvector![0.0], -0.1, 10).is_err());
        assert!(integrate_transition(&decay(), &c, &dvector![1.0], &dvector![0.0], 0.1, 0).is_err());
        assert!(integrate_transition(&decay(), &c, &dvector![1.0, 2.0], &dvector![0.0], 0.1, 1).is_err());
    }

    #[test]
    fn closed_loop_from_origin_costs_nothing() {
        let zero = |_: &StateVector| Ok(dvector![0.0]);
        let c = closed_loop_cost(
            &NonlinearBenchmark,
            &QuadraticCost::identity(2, 1),
            &zero,
            &dvector![0.0, 0.0],
            &ClosedLoopConfig::default(),
        )
        .unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn closed_loop_scalar_decay() {
        let zero = |_: &StateVector| Ok(dvector![0.0]);
        let cfg = ClosedLoopConfig {
            horizon: 20.0,
            ..Default::default()
        };
        let c = closed_loop_cost(&decay(), &QuadraticCost::identity(1, 1), &zero, &dvector![1.0], &cfg).unwrap();
        assert_abs_diff_eq!(c, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn closed_loop_optimal_nonlinear_cost() {
        let cfg = ClosedLoopConfig {
            horizon: 40.0,
            ..Default::default()
        };
        let opt = |x: &StateVector| Ok(NonlinearBenchmark::optimal_control(x));
        let x0 = dvector![0.1, 0.1];
        let c = closed_loop_cost(&NonlinearBenchmark, &QuadraticCost::identity(2, 1), &opt, &x0, &cfg).unwrap();
        assert_abs_diff_eq!(c, 0.0150, epsilon = 0.002);
        // The benchmark's value function is known exactly.
        assert_abs_diff_eq!(c, NonlinearBenchmark::optimal_value(&x0), epsilon = 1e-8);
    }

    #[test]
    fn closed_loop_flags_instability() {
        let push = |x: &StateVector| Ok(x * 5.0);
        let cfg = ClosedLoopConfig {
            horizon: 50.0,
            step: 0.01,
            state_bound: 1e3,
        };
        let err = closed_loop_cost(&decay(), &QuadraticCost::identity(1, 1), &push, &dvector![1.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }

    #[test]
    fn simulation_records_trajectory() {
        let zero = |_: &StateVector| Ok(dvector![0.0]);
        let cfg = ClosedLoopConfig {
            horizon: 1.0,
            step: 0.1,
            ..Default::default()
        };
        let run = simulate_closed_loop(&decay(), &QuadraticCost::identity(1, 1), &zero, &dvector![1.0], &cfg).unwrap();
        assert_eq!(run.times.len(), 11);
        assert_abs_diff_eq!(run.times[10], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(run.states[10][0], (-1.0f64).exp(), epsilon = 1e-6);
    }
}
