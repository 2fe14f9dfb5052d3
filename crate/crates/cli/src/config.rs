//! Run configuration: one TOML file describing the plant, cost, sampling box,
//! basis and learner settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ctql::learner::InitialQ;
use ctql::{
    BasisSet, BoxDomain, DynamicsModel, GainMatrix, LearnerConfig, LinearModel, NonlinearBenchmark, Policy,
    QuadraticCost,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub cost: CostConfig,
    pub sampling: SamplingConfig,
    pub learner: LearnerSection,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// `f16`, `nonlinear`, or `linear` with inline `a` and `b`.
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
}

/// Quadratic stage cost; identity weights when omitted.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Rows>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub count: usize,
    #[serde(default = "default_delta_t")]
    pub delta_t: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Symmetric box `[-h, h]` on every coordinate not given explicitly.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_upper: Option<Vec<f64>>,
}

fn default_delta_t() -> f64 {
    0.025
}

fn default_substeps() -> usize {
    ctql::dynamics::DEFAULT_SUBSTEPS
}

fn default_half_width() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    Piql,
    Viql,
}

/// `lqr`, `example2`, or an explicit list such as `["x1^2", "x1*u1", "u1^2"]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisSpec {
    Preset(String),
    Terms(Vec<String>),
}

/// Starting Q-function for value iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViqlStart {
    /// `initial_scale · (‖x‖² + ‖μ‖²)`.
    Scaled,
    /// Q-function of the initial policy.
    Policy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSection {
    pub algorithm: AlgorithmChoice,
    pub basis: BasisSpec,
    #[serde(default = "default_xi")]
    pub xi: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_svd_tolerance")]
    pub svd_tolerance: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Linear state feedback `u = K x` evaluated first; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_gain: Option<Rows>,
    #[serde(default = "default_viql_start")]
    pub viql_start: ViqlStart,
    #[serde(default = "default_initial_scale")]
    pub initial_scale: f64,
    /// Explicit θ⁽⁰⁾ for value iteration; overrides `viql_start`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_theta: Option<Vec<f64>>,
}

fn default_xi() -> f64 {
    1e-5
}

fn default_max_iterations() -> usize {
    5000
}

fn default_svd_tolerance() -> f64 {
    1e-10
}

fn default_holdout() -> f64 {
    0.2
}

fn default_viql_start() -> ViqlStart {
    ViqlStart::Scaled
}

fn default_initial_scale() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_state_bound")]
    pub state_bound: f64,
}

fn default_horizon() -> f64 {
    30.0
}

fn default_step() -> f64 {
    0.01
}

fn default_state_bound() -> f64 {
    ctql::dynamics::DIVERGENCE_BOUND
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            x0: None,
            horizon: default_horizon(),
            step: default_step(),
            state_bound: default_state_bound(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_quadrature")]
    pub quadrature_points: usize,
}

fn default_quadrature() -> usize {
    400
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            quadrature_points: default_quadrature(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Error in the user's configuration, reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

macro_rules! config_bail {
    ($($arg:tt)*) => {
        return Err(ConfigError(format!($($arg)*)).into())
    };
}

pub(crate) fn matrix(rows: &Rows, field: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        config_bail!("{field}: expected a non-empty rectangular matrix");
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.system.dims()?;
        self.cost.build(n, m)?;
        let s = &self.sampling;
        if s.count == 0 {
            config_bail!("sampling.count: must be at least 1");
        }
        if !(s.delta_t > 0.0 && s.delta_t.is_finite()) {
            config_bail!("sampling.delta_t: must be positive, got {}", s.delta_t);
        }
        if s.substeps == 0 {
            config_bail!("sampling.substeps: must be at least 1");
        }
        if !(s.half_width > 0.0 && s.half_width.is_finite()) {
            config_bail!("sampling.half_width: must be positive, got {}", s.half_width);
        }
        self.domain()?
            .validate()
            .map_err(|e| ConfigError(format!("sampling: {e}")))?;
        let basis = self.basis()?;
        if s.count < basis.len() {
            config_bail!(
                "sampling.count: {} samples cannot determine {} basis weights",
                s.count,
                basis.len()
            );
        }
        self.learner_config(&basis)?
            .validate()
            .map_err(|e| ConfigError(format!("learner: {e}")))?;
        let e = &self.evaluate;
        if let Some(x0) = &e.x0 {
            if x0.len() != n {
                config_bail!("evaluate.x0: expected {n} entries, got {}", x0.len());
            }
        }
        if !(e.horizon > 0.0 && e.step > 0.0 && e.state_bound > 0.0) {
            config_bail!("evaluate: horizon, step and state_bound must be positive");
        }
        if self.oracle.quadrature_points < 2 {
            config_bail!("oracle.quadrature_points: must be at least 2");
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let text = toml::to_string(&canonical).expect("configuration serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn model(&self) -> Result<Box<dyn DynamicsModel>> {
        self.system.build()
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        let (n, m) = self.system.dims()?;
        self.cost.build(n, m)
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        let (n, m) = self.system.dims()?;
        let s = &self.sampling;
        let side = |v: &Option<Vec<f64>>, len: usize, sign: f64, field: &str| -> Result<Vec<f64>> {
            match v {
                Some(v) if v.len() != len => config_bail!("sampling.{field}: expected {len} entries, got {}", v.len()),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![sign * s.half_width; len]),
            }
        };
        Ok(BoxDomain {
            x_lower: side(&s.x_lower, n, -1.0, "x_lower")?,
            x_upper: side(&s.x_upper, n, 1.0, "x_upper")?,
            mu_lower: side(&s.mu_lower, m, -1.0, "mu_lower")?,
            mu_upper: side(&s.mu_upper, m, 1.0, "mu_upper")?,
        })
    }

    pub fn basis(&self) -> Result<BasisSet> {
        let (n, m) = self.system.dims()?;
        match &self.learner.basis {
            BasisSpec::Preset(name) => match name.as_str() {
                "lqr" => Ok(BasisSet::quadratic(n, m)?),
                "example2" if (n, m) == (2, 1) => Ok(BasisSet::nonlinear_benchmark()),
                "example2" => {
                    config_bail!("learner.basis: preset example2 needs 2 states and 1 input, system has {n} and {m}")
                }
                other => {
                    config_bail!("learner.basis: unknown preset `{other}` (expected lqr, example2 or a list of terms)")
                }
            },
            BasisSpec::Terms(terms) => BasisSet::from_text(&terms.join("\n"), n, m)
                .map_err(|e| ConfigError(format!("learner.basis: {e}")).into()),
        }
    }

    pub fn initial_policy(&self) -> Result<Policy> {
        let (n, m) = self.system.dims()?;
        match &self.learner.initial_gain {
            None => Ok(Policy::Zero { inputs: m }),
            Some(k) => {
                let k = matrix(k, "learner.initial_gain")?;
                if k.shape() != (m, n) {
                    config_bail!(
                        "learner.initial_gain: expected {m}x{n}, got {}x{}",
                        k.nrows(),
                        k.ncols()
                    );
                }
                Ok(Policy::Feedback(GainMatrix::linear(k)?))
            }
        }
    }

    pub fn learner_config(&self, basis: &BasisSet) -> Result<LearnerConfig> {
        let l = &self.learner;
        let policy = self.initial_policy()?;
        let initial_q = match (&l.initial_theta, l.viql_start) {
            (Some(theta), _) => {
                if theta.len() != basis.len() {
                    config_bail!(
                        "learner.initial_theta: expected {} entries, got {}",
                        basis.len(),
                        theta.len()
                    );
                }
                InitialQ::Theta(DVector::from_column_slice(theta))
            }
            (None, ViqlStart::Policy) => InitialQ::EvaluatePolicy(policy.clone()),
            (None, ViqlStart::Scaled) => InitialQ::ScaledSquares(l.initial_scale),
        };
        Ok(LearnerConfig {
            xi: l.xi,
            max_iterations: l.max_iterations,
            svd_tolerance: l.svd_tolerance,
            holdout_fraction: l.holdout_fraction,
            initial_policy: Some(policy),
            initial_q,
        })
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.as_ref().map(|o| o.dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

impl SystemConfig {
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self.model.as_str() {
            "f16" => Ok((3, 1)),
            "nonlinear" => Ok((2, 1)),
            "linear" => {
                let m = self.linear()?.expect("linear model");
                Ok((m.a().nrows(), m.b().ncols()))
            }
            other => config_bail!("system.model: unknown model `{other}` (expected f16, nonlinear or linear)"),
        }
    }

    /// The linear plant, if the configured model is linear.
    pub fn linear(&self) -> Result<Option<LinearModel>> {
        let inline = self.a.is_some() || self.b.is_some();
        match self.model.as_str() {
            "f16" if !inline => Ok(Some(LinearModel::f16())),
            "linear" => {
                let (Some(a), Some(b)) = (&self.a, &self.b) else {
                    config_bail!("system: model `linear` needs both `a` and `b`");
                };
                let model = LinearModel::new(matrix(a, "system.a")?, matrix(b, "system.b")?)
                    .map_err(|e| ConfigError(format!("system: {e}")))?;
                Ok(Some(model))
            }
            "nonlinear" if !inline => Ok(None),
            "f16" | "nonlinear" => config_bail!("system: `a` and `b` are only allowed with model `linear`"),
            other => config_bail!("system.model: unknown model `{other}` (expected f16, nonlinear or linear)"),
        }
    }

    pub fn build(&self) -> Result<Box<dyn DynamicsModel>> {
        match self.linear()? {
            Some(model) => Ok(Box::new(model)),
            None => Ok(Box::new(NonlinearBenchmark)),
        }
    }
}

impl CostConfig {
    pub fn build(&self, n: usize, m: usize) -> Result<QuadraticCost> {
        let s = match &self.s {
            Some(s) => matrix(s, "cost.s")?,
            None => DMatrix::identity(n, n),
        };
        let w = match &self.w {
            Some(w) => matrix(w, "cost.w")?,
            None => DMatrix::identity(m, m),
        };
        if s.shape() != (n, n) || w.shape() != (m, m) {
            config_bail!("cost: expected s {n}x{n} and w {m}x{m}");
        }
        if w.clone().cholesky().is_none() {
            config_bail!("cost.w: must be positive definite");
        }
        QuadraticCost::new(s, w).map_err(|e| ConfigError(format!("cost: {e}")).into())
    }
}

/// Applies the `--seed` override.
pub fn with_seed(mut config: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(seed) = seed {
        config.sampling.seed = seed;
    }
    config
}

pub fn parse_vector(text: &str, field: &str) -> Result<Vec<f64>> {
    let parsed: std::result::Result<Vec<f64>, _> = text
        .trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect();
    match parsed {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => bail!(ConfigError(format!(
            "{field}: expected comma-separated numbers, got `{text}`"
        ))),
    }
}

pub fn ensure_dims(actual: (usize, usize), expected: (usize, usize), what: &str) -> Result<()> {
    ensure!(
        actual == expected,
        ConfigError(format!(
            "{what} has {} states and {} inputs, configuration expects {} and {}",
            actual.0, actual.1, expected.0, expected.1
        ))
    );
    Ok(())
}
