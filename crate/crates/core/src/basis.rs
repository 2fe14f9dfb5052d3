//! Monomial bases over `(x, μ)` and linear-in-parameter Q-functions.
//!
//! Greedy improvement is done in closed form. That requires the Q-function to
//! be at most quadratic in the action with an x-free quadratic block:
//!
//! ```text
//! Q̂(x, μ) = a(x) + b(x)ᵀμ + μᵀCμ
//! ```
//!
//! so every term must be μ-free, linear in one action coordinate (with any
//! x factor), or a pure product `μᵢμⱼ`. The minimizer is then
//! `μ*(x) = −½ C⁻¹ b(x)`, and since `b(x)` is a linear combination of the
//! x-factors that appear next to a single μ, the policy is a gain matrix on
//! those features.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Product of powers of state and action coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Monomial {
    x_exp: Vec<u32>,
    mu_exp: Vec<u32>,
}

impl Monomial {
    pub fn new(x_exp: Vec<u32>, mu_exp: Vec<u32>) -> Self {
        Self { x_exp, mu_exp }
    }

    /// Single-variable power over the combined coordinates `(x₁…xₙ, μ₁…μₘ)`.
    fn from_combined(n: usize, m: usize, exps: &[(usize, u32)]) -> Self {
        let mut combined = vec![0; n + m];
        for &(var, e) in exps {
            combined[var] += e;
        }
        Self {
            x_exp: combined[..n].to_vec(),
            mu_exp: combined[n..].to_vec(),
        }
    }

    pub fn x_exponents(&self) -> &[u32] {
        &self.x_exp
    }

    pub fn mu_exponents(&self) -> &[u32] {
        &self.mu_exp
    }

    pub fn x_degree(&self) -> u32 {
        self.x_exp.iter().sum()
    }

    pub fn mu_degree(&self) -> u32 {
        self.mu_exp.iter().sum()
    }

    pub fn degree(&self) -> u32 {
        self.x_degree() + self.mu_degree()
    }

    /// The x-part of this monomial, with all action exponents zeroed.
    pub fn x_factor(&self) -> Monomial {
        Monomial {
            x_exp: self.x_exp.clone(),
            mu_exp: vec![0; self.mu_exp.len()],
        }
    }

    pub fn eval(&self, x: &[f64], mu: &[f64]) -> f64 {
        let mut v = 1.0;
        for (xi, &e) in x.iter().zip(&self.x_exp) {
            if e > 0 {
                v *= xi.powi(e as i32);
            }
        }
        for (ui, &e) in mu.iter().zip(&self.mu_exp) {
            if e > 0 {
                v *= ui.powi(e as i32);
            }
        }
        v
    }

    /// Parses `x1^2*u1` style text. `n` and `m` fix the coordinate counts.
    pub fn parse(text: &str, n: usize, m: usize) -> std::result::Result<Self, String> {
        let mut x_exp = vec![0; n];
        let mut mu_exp = vec![0; m];
        let text = text.trim();
        if text.is_empty() {
            return Err("empty monomial".into());
        }
        for token in text.split('*') {
            let token = token.trim();
            let (var, exp) = match token.split_once('^') {
                Some((v, e)) => (
                    v.trim(),
                    e.trim()
                        .parse::<u32>()
                        .map_err(|_| format!("bad exponent in `{token}`"))?,
                ),
                None => (token, 1),
            };
            let (slot, limit) = if let Some(idx) = var.strip_prefix('x') {
                (idx, n)
            } else if let Some(idx) = var.strip_prefix('u') {
                (idx, m)
            } else {
                return Err(format!("unknown variable `{var}` (expected x<i> or u<i>)"));
            };
            let index: usize = slot.parse().map_err(|_| format!("bad variable index in `{var}`"))?;
            if index == 0 || index > limit {
                return Err(format!("variable `{var}` out of range 1..={limit}"));
            }
            if var.starts_with('x') {
                x_exp[index - 1] += exp;
            } else {
                mu_exp[index - 1] += exp;
            }
        }
        Ok(Self { x_exp, mu_exp })
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let vars = self
            .x_exp
            .iter()
            .enumerate()
            .map(|(i, &e)| ('x', i, e))
            .chain(self.mu_exp.iter().enumerate().map(|(i, &e)| ('u', i, e)));
        for (sym, i, e) in vars {
            match e {
                0 => {}
                1 => parts.push(format!("{sym}{}", i + 1)),
                _ => parts.push(format!("{sym}{}^{e}", i + 1)),
            }
        }
        if parts.is_empty() {
            f.write_str("1")
        } else {
            f.write_str(&parts.join("*"))
        }
    }
}

/// How a term enters the action-quadratic form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    MuFree,
    /// One action factor `μ_input`, times an arbitrary x-monomial.
    MuLinear {
        input: usize,
    },
    /// `μᵢμⱼ` with `i ≤ j` and no x factor.
    MuQuadratic {
        i: usize,
        j: usize,
    },
    /// Anything else; blocks closed-form improvement.
    Unsupported,
}

impl TermKind {
    fn of(term: &Monomial) -> Self {
        match term.mu_degree() {
            0 => TermKind::MuFree,
            1 => TermKind::MuLinear {
                input: term.mu_exp.iter().position(|&e| e == 1).unwrap(),
            },
            2 if term.x_degree() == 0 => {
                let mut idx = term
                    .mu_exp
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &e)| std::iter::repeat_n(i, e as usize));
                let i = idx.next().unwrap();
                let j = idx.next().unwrap();
                TermKind::MuQuadratic { i, j }
            }
            _ => TermKind::Unsupported,
        }
    }
}

/// Ordered list of monomials `Ψ_L(x, μ)`.
///
/// Term order is kept exactly as given so that parameter vectors line up with
/// the order a basis was declared in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasisSet {
    n: usize,
    m: usize,
    terms: Vec<Monomial>,
}

impl BasisSet {
    pub fn new(n: usize, m: usize, terms: Vec<Monomial>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("basis", "state and input dimensions must be positive"));
        }
        if terms.is_empty() {
            return Err(Error::invalid("basis", "needs at least one term"));
        }
        for (j, t) in terms.iter().enumerate() {
            if t.x_exp.len() != n || t.mu_exp.len() != m {
                return Err(Error::invalid(
                    "basis",
                    format!(
                        "term {} has arity ({}, {}), expected ({n}, {m})",
                        j + 1,
                        t.x_exp.len(),
                        t.mu_exp.len()
                    ),
                ));
            }
            if t.degree() == 0 {
                return Err(Error::invalid(
                    "basis",
                    format!("term {} is constant; every term must vanish at the origin", j + 1),
                ));
            }
            if terms[..j].contains(t) {
                return Err(Error::invalid("basis", format!("term {} (`{t}`) is repeated", j + 1)));
            }
        }
        Ok(Self { n, m, terms })
    }

    /// All degree-2 monomials in `z = (x₁…xₙ, μ₁…μₘ)`, ordered
    /// `z₁², z₁z₂, …, z₁z_{n+m}, z₂², z₂z₃, …, z_{n+m}²`.
    pub fn quadratic(n: usize, m: usize) -> Result<Self> {
        let p = n + m;
        let mut terms = Vec::with_capacity(p * (p + 1) / 2);
        for a in 0..p {
            for b in a..p {
                terms.push(Monomial::from_combined(n, m, &[(a, 1), (b, 1)]));
            }
        }
        Self::new(n, m, terms)
    }

    /// Eighteen-term basis for the two-state polynomial benchmark: all x-only
    /// monomials of degree 2 to 4, the action times `x₁, x₂, x₁², x₁x₂, x₂²`,
    /// and `μ²`.
    pub fn nonlinear_benchmark() -> Self {
        const TERMS: [&str; 18] = [
            "x1^2",
            "x1*x2",
            "x2^2", //
            "x1^3",
            "x1^2*x2",
            "x1*x2^2",
            "x2^3", //
            "x1^4",
            "x1^3*x2",
            "x1^2*x2^2",
            "x1*x2^3",
            "x2^4", //
            "x1*u1",
            "x2*u1",
            "x1^2*u1",
            "x1*x2*u1",
            "x2^2*u1", //
            "u1^2",
        ];
        let terms = TERMS.iter().map(|t| Monomial::parse(t, 2, 1).unwrap()).collect();
        Self::new(2, 1, terms).expect("benchmark basis is well formed")
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn term_kind(&self, j: usize) -> TermKind {
        TermKind::of(&self.terms[j])
    }

    pub fn is_full_quadratic(&self) -> bool {
        Self::quadratic(self.n, self.m).is_ok_and(|q| q == *self)
    }

    /// Writes `Ψ_L(x, μ)` into `out` without dimension checks.
    pub(crate) fn eval_into(&self, x: &[f64], mu: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(x, mu);
        }
    }

    pub fn eval(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, mu)?;
        let mut out = DVector::zeros(self.len());
        self.eval_into(x.as_slice(), mu.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn check_dims(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "basis state argument",
                expected: self.n,
                actual: x.len(),
            });
        }
        if mu.len() != self.m {
            return Err(Error::DimensionMismatch {
                context: "basis action argument",
                expected: self.m,
                actual: mu.len(),
            });
        }
        Ok(())
    }

    /// One monomial per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.terms {
            s.push_str(&t.to_string());
            s.push('\n');
        }
        s
    }

    /// Inverse of [`BasisSet::to_text`]; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str, n: usize, m: usize) -> Result<Self> {
        let mut terms = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let t = Monomial::parse(line, n, m).map_err(|message| Error::Parse { line: i + 1, message })?;
            terms.push(t);
        }
        Self::new(n, m, terms)
    }

    fn action_structure(&self) -> Result<ActionStructure> {
        let mut features: Vec<Monomial> = Vec::new();
        let mut linear = Vec::new();
        let mut quadratic = Vec::new();
        for (j, t) in self.terms.iter().enumerate() {
            match TermKind::of(t) {
                TermKind::MuFree => {}
                TermKind::MuLinear { input } => {
                    let f = t.x_factor();
                    let k = match features.iter().position(|g| *g == f) {
                        Some(k) => k,
                        None => {
                            features.push(f);
                            features.len() - 1
                        }
                    };
                    linear.push((j, input, k));
                }
                TermKind::MuQuadratic { i, j: jj } => quadratic.push((j, i, jj)),
                TermKind::Unsupported => {
                    return Err(Error::UnsupportedBasis(format!(
                        "term `{t}` is not μ-free, μ-linear, or an x-free μ-quadratic; \
                         closed-form improvement needs Q̂ quadratic in μ with constant curvature"
                    )))
                }
            }
        }
        Ok(ActionStructure {
            features,
            linear,
            quadratic,
        })
    }
}

impl fmt::Display for BasisSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.terms.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

struct ActionStructure {
    /// Distinct x-factors of μ-linear terms, in order of first appearance.
    features: Vec<Monomial>,
    /// (term, input, feature)
    linear: Vec<(usize, usize, usize)>,
    /// (term, i, j)
    quadratic: Vec<(usize, usize, usize)>,
}

/// Feedback `u = K φ(x)` over a list of x-monomials `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainMatrix {
    k: DMatrix<f64>,
    features: Vec<Monomial>,
}

impl GainMatrix {
    pub fn new(k: DMatrix<f64>, features: Vec<Monomial>) -> Result<Self> {
        if k.ncols() != features.len() {
            return Err(Error::DimensionMismatch {
                context: "gain columns vs features",
                expected: features.len(),
                actual: k.ncols(),
            });
        }
        if features.iter().any(|f| f.mu_degree() != 0) {
            return Err(Error::invalid("features", "gain features must not involve the action"));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("K", "gain entries must be finite"));
        }
        Ok(Self { k, features })
    }

    /// Linear state feedback `u = Kx`, `K` of shape m×n.
    pub fn linear(k: DMatrix<f64>) -> Result<Self> {
        let (m, n) = k.shape();
        let features = (0..n).map(|i| Monomial::from_combined(n, m, &[(i, 1)])).collect();
        Self::new(k, features)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn features(&self) -> &[Monomial] {
        &self.features
    }

    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn feature_values(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.features.len(), self.features.iter().map(|f| f.eval(x, &[])))
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * self.feature_values(x.as_slice())
    }
}

/// `Q̂(x, μ) = Ψ_L(x, μ)ᵀθ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QApprox {
    basis: BasisSet,
    theta: DVector<f64>,
}

impl QApprox {
    pub fn new(basis: BasisSet, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                context: "θ length vs basis size",
                expected: basis.len(),
                actual: theta.len(),
            });
        }
        Ok(Self { basis, theta })
    }

    pub fn zero(basis: BasisSet) -> Self {
        let theta = DVector::zeros(basis.len());
        Self { basis, theta }
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn value(&self, x: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
        Ok(self.basis.eval(x, mu)?.dot(&self.theta))
    }

    /// Assembles the symmetric curvature `C` and the coefficient matrix of
    /// `b(x)` over the feature list.
    fn action_form(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<Monomial>)> {
        let s = self.basis.action_structure()?;
        let m = self.basis.m;
        let mut c = DMatrix::zeros(m, m);
        for &(term, i, j) in &s.quadratic {
            if i == j {
                c[(i, i)] += self.theta[term];
            } else {
                c[(i, j)] += 0.5 * self.theta[term];
                c[(j, i)] += 0.5 * self.theta[term];
            }
        }
        let c = (&c + c.transpose()) * 0.5;
        let mut lin = DMatrix::zeros(m, s.features.len());
        for &(term, input, k) in &s.linear {
            lin[(input, k)] += self.theta[term];
        }
        Ok((c, lin, s.features))
    }

    /// Closed-form minimizer of `Q̂(x, ·)` as a gain on the μ-linear x-factors.
    pub fn gain(&self) -> Result<GainMatrix> {
        let (c, lin, features) = self.action_form()?;
        let chol = c.clone().cholesky().ok_or_else(|| {
            let min_eig = c.clone().symmetric_eigenvalues().min();
            Error::NonCoercive(format!(
                "action curvature is not positive definite (smallest eigenvalue {min_eig:.3e})"
            ))
        })?;
        let k = chol.solve(&lin) * -0.5;
        GainMatrix::new(k, features)
    }

    /// `μ*(x) = argmin_μ Q̂(x, μ)`.
    pub fn greedy_policy(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.basis.n {
            return Err(Error::DimensionMismatch {
                context: "greedy policy state",
                expected: self.basis.n,
                actual: x.len(),
            });
        }
        Ok(self.gain()?.apply(x))
    }
}

/// Extracts the symmetric matrix `G` with `Q̂ = [x; μ]ᵀ G [x; μ]` from a
/// full quadratic basis.
pub fn theta_to_g(q: &QApprox) -> Result<DMatrix<f64>> {
    let basis = q.basis();
    if !basis.is_full_quadratic() {
        return Err(Error::UnsupportedBasis(
            "θ ↔ G mapping needs the full quadratic basis in canonical order".into(),
        ));
    }
    let p = basis.n + basis.m;
    let mut g = DMatrix::zeros(p, p);
    let mut j = 0;
    for a in 0..p {
        for b in a..p {
            let th = q.theta()[j];
            if a == b {
                g[(a, a)] = th;
            } else {
                g[(a, b)] = 0.5 * th;
                g[(b, a)] = 0.5 * th;
            }
            j += 1;
        }
    }
    Ok(g)
}

/// Inverse of [`theta_to_g`]; `G` is symmetrized first.
pub fn g_to_theta(g: &DMatrix<f64>, n: usize, m: usize) -> Result<QApprox> {
    let p = n + m;
    if g.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            context: "G size",
            expected: p,
            actual: g.nrows(),
        });
    }
    let basis = BasisSet::quadratic(n, m)?;
    let mut theta = DVector::zeros(basis.len());
    let mut j = 0;
    for a in 0..p {
        for b in a..p {
            theta[j] = if a == b { g[(a, a)] } else { g[(a, b)] + g[(b, a)] };
            j += 1;
        }
    }
    QApprox::new(basis, theta)
}
