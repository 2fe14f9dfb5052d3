//! Model-based ground truth for linear-quadratic problems.
//!
//! Nothing in here is used by the learner. These routines need `A` and `B`
//! and serve as the reference that data-driven results are measured against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Taylor terms used after scaling; with `‖A/2ˢ‖₁ ≤ 1/2` the truncation
/// error is below `0.5¹⁹/19!`.
const EXPM_TAYLOR_ORDER: usize = 18;

const NEWTON_MAX_STEPS: usize = 50;

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=EXPM_TAYLOR_ORDER {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// All eigenvalues strictly in the open left half plane.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.clone().complex_eigenvalues().iter().all(|l| l.re < 0.0)
}

pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `AᵀX + XA = −Q` through the Kronecker-vectorized linear system.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(Error::invalid("lyapunov", "A and Q must be square and of equal size"));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Riccati("Lyapunov operator is singular (A has eigenvalues λᵢ + λⱼ = 0)".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Stabilizing solution of `AᵀP + PA − PBW⁻¹BᵀP + S = 0`.
///
/// The optimal feedback is `u = −Kx` with `K = W⁻¹BᵀP`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub newton_steps: usize,
}

impl RiccatiSolution {
    pub fn residual(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
        let w_inv = w
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Riccati("W is singular".into()))?;
        let p = &self.p;
        let r = a.transpose() * p + p * a - p * b * w_inv * b.transpose() * p + s;
        Ok(r.norm())
    }

    /// Feedback in the `u = Kx` convention used by learned gains.
    pub fn feedback_gain(&self) -> DMatrix<f64> {
        -&self.k
    }
}

fn check_lq_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<(usize, usize)> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || s.shape() != (n, n) || w.shape() != (m, m) {
        return Err(Error::invalid(
            "A/B/S/W",
            format!(
                "inconsistent shapes A {:?}, B {:?}, S {:?}, W {:?}",
                a.shape(),
                b.shape(),
                s.shape(),
                w.shape()
            ),
        ));
    }
    Ok((n, m))
}

/// Bass's construction: for a controllable pair, `K = BᵀZ⁻¹` with
/// `(A + βI)Z + Z(A + βI)ᵀ = 2BBᵀ` and `β` above the spectral radius makes
/// `A − BK` Hurwitz.
pub fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let beta = a.abs().row_sum().max() + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta).transpose();
    let z = solve_lyapunov(&shifted, &(b * b.transpose() * 2.0))?;
    let z_inv = z
        .try_inverse()
        .ok_or_else(|| Error::Riccati("no stabilizing initial gain: (A, B) is not controllable".into()))?;
    let k = b.transpose() * z_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::Riccati("no stabilizing initial gain found".into()));
    }
    Ok(k)
}

/// Newton–Kleinman iterates `P₀, P₁, …` from a stabilizing `K₀`.
pub fn newton_kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    k0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let _ = check_lq_shapes(a, b, s, w)?;
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Riccati("W is singular".into()))?;
    let mut k = k0.clone();
    let mut iterates: Vec<DMatrix<f64>> = Vec::new();
    for _ in 0..NEWTON_MAX_STEPS {
        let closed = a - b * &k;
        if !is_hurwitz(&closed) {
            return Err(Error::Riccati(format!(
                "iterate {} is not stabilizing (spectral abscissa {:.3e})",
                iterates.len(),
                spectral_abscissa(&closed)
            )));
        }
        let p = solve_lyapunov(&closed, &(s + k.transpose() * w * &k))?;
        k = &w_inv * b.transpose() * &p;
        let done = iterates
            .last()
            .is_some_and(|prev| (&p - prev).norm() <= 1e-14 * p.norm().max(1.0));
        iterates.push(p);
        if done {
            return Ok(iterates);
        }
    }
    Err(Error::Riccati(format!(
        "Newton–Kleinman did not converge in {NEWTON_MAX_STEPS} steps"
    )))
}

pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<RiccatiSolution> {
    let _ = check_lq_shapes(a, b, s, w)?;
    let k0 = stabilizing_gain(a, b)?;
    let iterates = newton_kleinman(a, b, s, w, &k0)?;
    let p = iterates.last().cloned().expect("at least one iterate");
    let w_inv = w.clone().try_inverse().expect("checked in newton_kleinman");
    let k = w_inv * b.transpose() * &p;
    Ok(RiccatiSolution {
        p,
        k,
        newton_steps: iterates.len(),
    })
}

/// `Φ(τ) = exp([[A, B], [0, 0]] τ) = [[E(τ), F(τ)], [0, I]]` where
/// `E(τ) = exp(Aτ)` and `F(τ) = ∫₀^τ exp(As) ds B`.
fn augmented_flow(a: &DMatrix<f64>, b: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut gen = DMatrix::zeros(n + m, n + m);
    gen.view_mut((0, 0), (n, n)).copy_from(a);
    gen.view_mut((0, n), (n, m)).copy_from(b);
    expm(&(gen * tau))
}

/// Exact one-interval map of a linear system under a held action:
/// `x′ = Φ [x; μ]` and `π = [x; μ]ᵀ C [x; μ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactTransition {
    /// `[E(Δt) F(Δt)]`, n×(n+m).
    pub flow: DMatrix<f64>,
    /// `∫₀^Δt Φᵀ blockdiag(S, W) Φ dτ`.
    pub cost: DMatrix<f64>,
}

impl ExactTransition {
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        s: &DMatrix<f64>,
        w: &DMatrix<f64>,
        delta_t: f64,
        quadrature_points: usize,
    ) -> Result<Self> {
        let (n, m) = check_lq_shapes(a, b, s, w)?;
        if !(delta_t > 0.0 && delta_t.is_finite()) {
            return Err(Error::invalid("delta_t", format!("must be positive, got {delta_t}")));
        }
        // Composite Simpson needs an even interval count.
        let intervals = quadrature_points.max(2).div_ceil(2) * 2;
        let h = delta_t / intervals as f64;
        let mut weight = DMatrix::zeros(n + m, n + m);
        weight.view_mut((0, 0), (n, n)).copy_from(s);
        weight.view_mut((n, n), (m, m)).copy_from(w);
        let mut acc = DMatrix::zeros(n + m, n + m);
        for k in 0..=intervals {
            let phi = augmented_flow(a, b, k as f64 * h);
            let c = if k == 0 || k == intervals {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += phi.transpose() * &weight * &phi * c;
        }
        acc *= h / 3.0;
        let cost = (&acc + acc.transpose()) * 0.5;
        let flow = augmented_flow(a, b, delta_t).rows(0, n).into_owned();
        Ok(Self { flow, cost })
    }

    pub fn step(&self, x: &DVector<f64>, mu: &DVector<f64>) -> (DVector<f64>, f64) {
        let z = concat(x, mu);
        (&self.flow * &z, z.dot(&(&self.cost * &z)).max(0.0))
    }

    /// `G = C + [E F]ᵀ P [E F]`.
    pub fn q_matrix(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let g = &self.cost + self.flow.transpose() * p * &self.flow;
        (&g + g.transpose()) * 0.5
    }
}

fn concat(x: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + mu.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), mu.len()).copy_from(mu);
    z
}

/// Quadratic Q-function `[x; μ]ᵀ G [x; μ]` for one held-action interval.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalQMatrix {
    pub g: DMatrix<f64>,
    pub delta_t: f64,
    pub state_dim: usize,
}

impl OptimalQMatrix {
    pub fn g11(&self) -> DMatrix<f64> {
        let n = self.state_dim;
        self.g.view((0, 0), (n, n)).into_owned()
    }

    pub fn g12(&self) -> DMatrix<f64> {
        let n = self.state_dim;
        let m = self.g.nrows() - n;
        self.g.view((0, n), (n, m)).into_owned()
    }

    pub fn g22(&self) -> DMatrix<f64> {
        let n = self.state_dim;
        let m = self.g.nrows() - n;
        self.g.view((n, n), (m, m)).into_owned()
    }

    /// Minimizing feedback `u = −G₂₂⁻¹G₁₂ᵀ x`, returned as the m×n matrix.
    pub fn greedy_gain(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .g22()
            .cholesky()
            .ok_or_else(|| Error::NonCoercive("G₂₂ is not positive definite".into()))?;
        Ok(-chol.solve(&self.g12().transpose()))
    }

    /// `min_μ` of the quadratic form: `G₁₁ − G₁₂G₂₂⁻¹G₁₂ᵀ`.
    pub fn minimized_value(&self) -> Result<DMatrix<f64>> {
        let k = self.greedy_gain()?;
        let v = self.g11() + self.g12() * k;
        Ok((&v + v.transpose()) * 0.5)
    }
}

/// Q-matrix for acting with `μ` over `[0, Δt]` and then incurring `x′ᵀPx′`.
pub fn optimal_q_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    p: &DMatrix<f64>,
    delta_t: f64,
    quadrature_points: usize,
) -> Result<OptimalQMatrix> {
    let n = a.nrows();
    if p.shape() != (n, n) {
        return Err(Error::invalid("P", format!("expected {n}x{n}, got {:?}", p.shape())));
    }
    let exact = ExactTransition::new(a, b, s, w, delta_t, quadrature_points)?;
    Ok(OptimalQMatrix {
        g: exact.q_matrix(p),
        delta_t,
        state_dim: n,
    })
}

/// Fixed point of `P ↦ min_μ G(P)` for a held-action interval: the value
/// matrix that policy iteration on exact data converges to. Iterated from the
/// CARE solution.
pub fn sampled_data_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &DMatrix<f64>,
    delta_t: f64,
    quadrature_points: usize,
) -> Result<(DMatrix<f64>, OptimalQMatrix)> {
    let n = a.nrows();
    let exact = ExactTransition::new(a, b, s, w, delta_t, quadrature_points)?;
    let mut p = solve_care(a, b, s, w)?.p;
    for _ in 0..1_000_000 {
        let q = OptimalQMatrix {
            g: exact.q_matrix(&p),
            delta_t,
            state_dim: n,
        };
        let next = q.minimized_value()?;
        let change = (&next - &p).norm();
        p = next;
        if change <= 1e-15 * p.norm().max(1.0) {
            let q = OptimalQMatrix {
                g: exact.q_matrix(&p),
                delta_t,
                state_dim: n,
            };
            return Ok((p, q));
        }
    }
    Err(Error::Riccati("sampled-data Riccati iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn f16() -> (DMatrix<f64>, DMatrix<f64>) {
        let m = crate::dynamics::LinearModel::f16();
        (m.a().clone(), m.b().clone())
    }

    #[test]
    fn expm_scalar_and_reference() {
        for v in [-3.0, -0.1, 0.0, 0.7, 5.0] {
            let e = expm(&scalar(v))[(0, 0)];
            assert!((e - v.exp()).abs() <= 1e-13 * v.exp());
        }
        let (a, _) = f16();
        for t in [0.1, 1.0, 7.5] {
            let mine = expm(&(&a * t));
            let reference = (&a * t).exp();
            assert!((mine - &reference).norm() <= 1e-12 * reference.norm().max(1.0));
        }
    }

    #[test]
    fn expm_nilpotent_is_polynomial() {
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        assert_eq!(expm(&n), DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]));
    }

    #[test]
    fn lyapunov_residual() {
        let (a, _) = f16();
        let q = DMatrix::identity(3, 3);
        let x = solve_lyapunov(&a, &q).unwrap();
        let r = a.transpose() * &x + &x * &a + &q;
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn care_scalar_integrator() {
        let sol = solve_care(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.k[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn care_scalar_stable() {
        let sol = solve_care(&scalar(-1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_abs_diff_eq!(sol.p[(0, 0)], 2f64.sqrt() - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.k[(0, 0)], 2f64.sqrt() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn care_f16_gain_and_residual() {
        let (a, b) = f16();
        let s = DMatrix::identity(3, 3);
        let w = DMatrix::identity(1, 1);
        let sol = solve_care(&a, &b, &s, &w).unwrap();
        assert!(sol.residual(&a, &b, &s, &w).unwrap() <= 1e-10 * s.norm());
        assert!(sol.newton_steps <= 25);
        let reference = [0.1352, 0.1501, 0.4329];
        for (i, p) in reference.iter().enumerate() {
            assert_abs_diff_eq!(sol.k[(0, i)].abs(), *p, epsilon = 1e-3);
        }
        assert!(is_hurwitz(&(&a - &b * &sol.k)));
    }

    #[test]
    fn care_unstable_open_loop_uses_bass_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(!is_hurwitz(&a));
        let s = DMatrix::identity(2, 2);
        let w = DMatrix::identity(1, 1);
        let sol = solve_care(&a, &b, &s, &w).unwrap();
        assert!(sol.residual(&a, &b, &s, &w).unwrap() < 1e-10);
        assert!(is_hurwitz(&(&a - &b * &sol.k)));
    }

    #[test]
    fn care_uncontrollable_unstable_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let s = DMatrix::identity(2, 2);
        let w = DMatrix::identity(1, 1);
        assert!(solve_care(&a, &b, &s, &w).is_err());
    }

    #[test]
    fn newton_kleinman_is_monotone() {
        let (a, b) = f16();
        let s = DMatrix::identity(3, 3);
        let w = DMatrix::identity(1, 1);
        let ps = newton_kleinman(&a, &b, &s, &w, &DMatrix::zeros(1, 3)).unwrap();
        for pair in ps.windows(2) {
            let diff = &pair[0] - &pair[1];
            assert!(diff.symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn q_matrix_scalar_closed_form() {
        // A = 0, B = 1, S = W = 1, P = 1: x(τ) = x + τμ.
        for dt in [0.2, 0.1, 0.05] {
            let q = optimal_q_matrix(
                &scalar(0.0),
                &scalar(1.0),
                &scalar(1.0),
                &scalar(1.0),
                &scalar(1.0),
                dt,
                200,
            )
            .unwrap();
            assert_abs_diff_eq!(q.g[(0, 0)], dt + 1.0, epsilon = 1e-13);
            assert_abs_diff_eq!(q.g[(0, 1)], dt + dt * dt / 2.0, epsilon = 1e-13);
            assert_abs_diff_eq!(q.g[(1, 1)], dt + dt * dt + dt.powi(3) / 3.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn q_matrix_is_symmetric_and_coercive() {
        let (a, b) = f16();
        let s = DMatrix::identity(3, 3);
        let w = DMatrix::identity(1, 1);
        let sol = solve_care(&a, &b, &s, &w).unwrap();
        for dt in [0.01, 0.1, 0.5] {
            let q = optimal_q_matrix(&a, &b, &s, &w, &sol.p, dt, 200).unwrap();
            assert!((&q.g - q.g.transpose()).norm() <= 1e-12);
            assert!(q.g22().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn q_matrix_quadrature_is_converged() {
        let (a, b) = f16();
        let s = DMatrix::identity(3, 3);
        let w = DMatrix::identity(1, 1);
        let p = solve_care(&a, &b, &s, &w).unwrap().p;
        let coarse = optimal_q_matrix(&a, &b, &s, &w, &p, 0.2, 200).unwrap();
        let fine = optimal_q_matrix(&a, &b, &s, &w, &p, 0.2, 400).unwrap();
        assert!((&coarse.g - &fine.g).norm() <= 1e-10 * fine.g.norm());
    }

    #[test]
    fn exact_transition_matches_rk4() {
        use crate::dynamics::{integrate_transition, LinearModel, QuadraticCost};
        let (a, b) = f16();
        let s = DMatrix::identity(3, 3);
        let w = DMatrix::identity(1, 1);
        let exact = ExactTransition::new(&a, &b, &s, &w, 0.1, 200).unwrap();
        let x = DVector::from_vec(vec![0.5, -0.2, 0.9]);
        let mu = DVector::from_vec(vec![-0.4]);
        let (xe, pe) = exact.step(&x, &mu);
        let (xr, pr) = integrate_transition(
            &LinearModel::f16(),
            &QuadraticCost::new(s, w).unwrap(),
            &x,
            &mu,
            0.1,
            10,
        )
        .unwrap();
        assert!((xe - xr).norm() < 1e-8);
        assert!((pe - pr).abs() < 1e-8);
    }

    #[test]
    fn sampled_data_fixed_point_is_consistent() {
        let (a, b) = (scalar(-1.0), scalar(1.0));
        let (p, q) = sampled_data_riccati(&a, &b, &scalar(1.0), &scalar(1.0), 0.1, 200).unwrap();
        assert!((q.minimized_value().unwrap() - &p).norm() < 1e-14);
        // Holding the action costs a little more than continuous feedback.
        assert!(p[(0, 0)] > 2f64.sqrt() - 1.0);
        assert!(p[(0, 0)] - (2f64.sqrt() - 1.0) < 1e-2);
    }
}
