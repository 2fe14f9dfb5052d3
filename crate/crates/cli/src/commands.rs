use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctql::dynamics::simulate_closed_loop;
use ctql::learner::{run_piql, run_viql, IterationTrace};
use ctql::lqr_oracle::{optimal_q_matrix, sampled_data_riccati, solve_care};
use ctql::sampling::{collect_samples, fmt_f64, load_dataset, save_dataset};
use ctql::{BasisSet, ClosedLoopConfig, Policy, QApprox, SampleSet, TraceStatus};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{ensure_dims, rows, AlgorithmChoice, ConfigError, CostConfig, Rows, RunConfig, SystemConfig};

pub const EXIT_NOT_CONVERGED: u8 = 4;

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_FILE: &str = "model.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

/// Learned controller as written by `train` and read by `evaluate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub config_hash: String,
    pub algorithm: String,
    pub status: String,
    pub iterations: usize,
    pub delta_t: f64,
    pub basis: Vec<String>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_features: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Rows>,
    pub system: SystemConfig,
    pub cost: CostConfig,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    pub fn q_approx(&self) -> Result<QApprox> {
        let (n, m) = self.system.dims()?;
        let basis =
            BasisSet::from_text(&self.basis.join("\n"), n, m).map_err(|e| ConfigError(format!("model basis: {e}")))?;
        Ok(QApprox::new(basis, DVector::from_column_slice(&self.theta))
            .map_err(|e| ConfigError(format!("model theta: {e}")))?)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = values.into_iter().map(|v| format!("{v:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn print_matrix(label: &str, m: &DMatrix<f64>) {
    println!("{label} =");
    for i in 0..m.nrows() {
        println!("  {}", fmt_row(m.row(i).iter().copied()));
    }
}

fn collect(config: &RunConfig) -> Result<SampleSet> {
    let model = config.model()?;
    let mut set = collect_samples(
        model.as_ref(),
        &config.cost()?,
        &config.domain()?,
        config.sampling.count,
        config.sampling.delta_t,
        config.sampling.substeps,
        config.sampling.seed,
    )?;
    set.config_hash = Some(config.hash());
    Ok(set)
}

pub fn cmd_collect(config: &RunConfig, out: &Path) -> Result<u8> {
    let set = collect(config)?;
    let path = out.join(DATASET_FILE);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_dataset(&set, &path)?;
    println!("model      {}", set.model);
    println!("samples    M = {}", set.len());
    println!("delta_t    {}", set.delta_t);
    println!("substeps   {}", set.substeps);
    println!("seed       {}", set.seed);
    println!("config     {}", config.hash());
    println!("wrote      {}", path.display());
    Ok(0)
}

pub fn cmd_train(config: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<u8> {
    let hash = config.hash();
    let set = match dataset {
        Some(path) => {
            let set = load_dataset(path)?;
            if set.config_hash.as_deref().is_some_and(|h| h != hash) {
                eprintln!("note: {} was collected under a different configuration", path.display());
            }
            set
        }
        None => {
            let set = collect(config)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            save_dataset(&set, out.join(DATASET_FILE))?;
            set
        }
    };
    ensure_dims((set.state_dim, set.input_dim), config.system.dims()?, "dataset")?;
    let basis = config.basis()?;
    let learner = config.learner_config(&basis)?;
    let trace = match config.learner.algorithm {
        AlgorithmChoice::Piql => run_piql(&set, &basis, &learner)?,
        AlgorithmChoice::Viql => run_viql(&set, &basis, &learner)?,
    };

    let trace_path = write(out, TRACE_FILE, &trace.to_csv(Some(&hash)))?;
    let model = model_file(config, &set, &trace, &hash);
    if let Some(model) = &model {
        let text = format!("# ctql-model v1\n{}", toml::to_string(model)?);
        write(out, MODEL_FILE, &text)?;
    }

    println!("algorithm  {}", trace.algorithm.name());
    println!("status     {}", trace.status.name());
    println!("iterations {}", trace.iterations());
    if let Some(gain) = trace.final_gain() {
        let names: Vec<String> = gain.features().iter().map(ToString::to_string).collect();
        println!("features   [{}]", names.join(", "));
        print_matrix("gain", gain.matrix());
    }
    if let Some(last) = trace.last() {
        println!("residual   {:.3e} (held-out RMS)", last.bellman_rms);
    }
    if !trace.monotonicity_warnings.is_empty() {
        println!(
            "warning    Q rose at training samples on {} iteration(s), first at {}",
            trace.monotonicity_warnings.len(),
            trace.monotonicity_warnings[0]
        );
    }
    println!("wrote      {}", trace_path.display());
    if model.is_some() {
        println!("wrote      {}", out.join(MODEL_FILE).display());
    }

    match trace.status {
        TraceStatus::Converged => Ok(0),
        TraceStatus::MaxIterations => Ok(EXIT_NOT_CONVERGED),
        TraceStatus::Failed => Err(trace.failure.expect("failed trace carries its error").into()),
    }
}

fn model_file(config: &RunConfig, set: &SampleSet, trace: &IterationTrace, hash: &str) -> Option<ModelFile> {
    let last = trace.last()?;
    let gain = trace.final_gain();
    Some(ModelFile {
        config_hash: hash.to_string(),
        algorithm: trace.algorithm.name().to_string(),
        status: trace.status.name().to_string(),
        iterations: trace.iterations(),
        delta_t: set.delta_t,
        basis: trace.basis.terms().iter().map(ToString::to_string).collect(),
        theta: last.theta.iter().copied().collect(),
        gain_features: gain.map(|g| g.features().iter().map(ToString::to_string).collect()),
        gain: gain.map(|g| rows(g.matrix())),
        system: config.system.clone(),
        cost: config.cost.clone(),
    })
}

pub struct EvaluateArgs<'a> {
    pub model: &'a Path,
    pub config: Option<&'a RunConfig>,
    pub x0: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub out: &'a Path,
}

pub fn cmd_evaluate(args: EvaluateArgs<'_>) -> Result<u8> {
    let model = ModelFile::load(args.model)?;
    let q = model.q_approx()?;
    let policy = Policy::Feedback(q.gain()?);
    let (n, _) = model.system.dims()?;
    let defaults = args.config.map(|c| c.evaluate.clone()).unwrap_or_default();
    let Some(x0) = args.x0.or(defaults.x0) else {
        return Err(ConfigError("evaluate: initial state required (--x0 or evaluate.x0)".into()).into());
    };
    if x0.len() != n {
        return Err(ConfigError(format!("evaluate.x0: expected {n} entries, got {}", x0.len())).into());
    }
    let horizon = args.horizon.unwrap_or(defaults.horizon);
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ConfigError(format!("evaluate.horizon: must be positive, got {horizon}")).into());
    }
    let loop_config = ClosedLoopConfig {
        horizon,
        step: defaults.step,
        state_bound: defaults.state_bound,
    };
    let plant = model.system.build()?;
    let cost = model.cost.build(n, q.basis().input_dim())?;
    let run = simulate_closed_loop(plant.as_ref(), &cost, &policy, &DVector::from_vec(x0), &loop_config)?;

    let mut csv = format!("# config_hash={}\nt", model.config_hash);
    for i in 1..=n {
        let _ = write!(csv, ",x{i}");
    }
    for j in 1..=q.basis().input_dim() {
        let _ = write!(csv, ",u{j}");
    }
    csv.push('\n');
    for ((t, x), u) in run.times.iter().zip(&run.states).zip(&run.controls) {
        let fields: Vec<String> = std::iter::once(*t)
            .chain(x.iter().copied())
            .chain(u.iter().copied())
            .map(fmt_f64)
            .collect();
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let path = write(args.out, TRAJECTORY_FILE, &csv)?;
    println!("horizon    {horizon}");
    println!("cost       {:.6}", run.cost);
    println!("final |x|  {:.3e}", run.states.last().map_or(0.0, |x| x.norm()));
    println!("wrote      {}", path.display());
    Ok(0)
}

pub fn cmd_oracle(config: &RunConfig, out: &Path) -> Result<u8> {
    let Some(model) = config.system.linear()? else {
        return Err(ConfigError(format!("oracle: model `{}` is not linear", config.system.model)).into());
    };
    let cost = config.cost()?;
    let (a, b, s, w) = (model.a(), model.b(), cost.s(), cost.w());
    let dt = config.sampling.delta_t;
    let points = config.oracle.quadrature_points;
    let care = solve_care(a, b, s, w)?;
    let q = optimal_q_matrix(a, b, s, w, &care.p, dt, points)?;
    let (p_d, q_d) = sampled_data_riccati(a, b, s, w, dt, points)?;
    let held = q_d.greedy_gain()?;

    print_matrix("P", &care.p);
    print_matrix("K (u = -K x)", &care.k);
    println!("residual   {:.3e}", care.residual(a, b, s, w)?);
    println!("delta_t    {dt}");
    print_matrix("G (CARE value after the interval)", &q.g);
    println!("G22 > 0    {}", q.g22().cholesky().is_some());
    print_matrix("gain from G (u = K x)", &q.greedy_gain()?);
    print_matrix("P held-action fixed point", &p_d);
    print_matrix("gain at the fixed point (u = K x)", &held);

    let mut csv = format!("# config_hash={}\nquantity,row,col,value\n", config.hash());
    let mut emit = |name: &str, mat: &DMatrix<f64>| {
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                let _ = writeln!(csv, "{name},{i},{j},{}", fmt_f64(mat[(i, j)]));
            }
        }
    };
    emit("P", &care.p);
    emit("K", &care.k);
    emit("G", &q.g);
    emit("gain_dt", &q.greedy_gain()?);
    emit("P_dt", &p_d);
    emit("G_dt", &q_d.g);
    emit("gain_fixed_point", &held);
    let path = write(out, ORACLE_FILE, &csv)?;
    println!("wrote      {}", path.display());
    Ok(0)
}
