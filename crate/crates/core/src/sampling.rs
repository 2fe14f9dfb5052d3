//! Off-policy transition datasets.
//!
//! Each sample draws `(x, μ)` uniformly from an axis-aligned box and
//! integrates one held-action interval. The random stream for sample `k` is
//! the ChaCha8 stream `k` under the dataset seed, so any single sample can be
//! regenerated on its own and the set does not depend on evaluation order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{integrate_transition, DynamicsModel, StageCost};
use crate::error::{Error, Result};

/// Axis-aligned sampling box for states and actions.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub mu_lower: Vec<f64>,
    pub mu_upper: Vec<f64>,
}

impl BoxDomain {
    /// `[−half, half]` on every state and action coordinate.
    pub fn symmetric(n: usize, m: usize, half: f64) -> Self {
        Self {
            x_lower: vec![-half; n],
            x_upper: vec![half; n],
            mu_lower: vec![-half; m],
            mu_upper: vec![half; m],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x_lower.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mu_lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_lower.len() != self.x_upper.len() || self.mu_lower.len() != self.mu_upper.len() {
            return Err(Error::invalid("domain", "lower and upper bounds differ in length"));
        }
        if self.x_lower.is_empty() || self.mu_lower.is_empty() {
            return Err(Error::invalid(
                "domain",
                "bounds must cover at least one state and one action",
            ));
        }
        let pairs = self
            .x_lower
            .iter()
            .zip(&self.x_upper)
            .chain(self.mu_lower.iter().zip(&self.mu_upper));
        for (lo, hi) in pairs {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::invalid("domain", format!("bad interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Lebesgue measure of the box in `(x, μ)` space.
    pub fn volume(&self) -> f64 {
        self.x_lower
            .iter()
            .zip(&self.x_upper)
            .chain(self.mu_lower.iter().zip(&self.mu_upper))
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn contains(&self, x: &DVector<f64>, mu: &DVector<f64>) -> bool {
        let inside = |v: &DVector<f64>, lo: &[f64], hi: &[f64]| {
            v.len() == lo.len() && v.iter().zip(lo).zip(hi).all(|((v, l), h)| *l <= *v && *v <= *h)
        };
        inside(x, &self.x_lower, &self.x_upper) && inside(mu, &self.mu_lower, &self.mu_upper)
    }
}

/// One transition `(x, μ, x′, π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub mu: DVector<f64>,
    pub x_next: DVector<f64>,
    pub pi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub model: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub delta_t: f64,
    pub substeps: usize,
    pub seed: u64,
    pub domain: BoxDomain,
    /// Measure of the sampling box. The Monte-Carlo factor `I_D / M` cancels
    /// from both parameter updates, so this is informational.
    pub domain_volume: f64,
    /// Hash of the run configuration that produced the set, when known.
    pub config_hash: Option<String>,
}

/// The `index`-th uniform `(x, μ)` draw for `seed`. Each index has its own
/// ChaCha stream, so draws do not depend on how many came before.
pub fn draw_pair(domain: &BoxDomain, seed: u64, index: usize) -> (DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut draw = |lo: &[f64], hi: &[f64]| {
        DVector::from_iterator(
            lo.len(),
            lo.iter()
                .zip(hi)
                .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..=h) }),
        )
    };
    let x = draw(&domain.x_lower, &domain.x_upper);
    let mu = draw(&domain.mu_lower, &domain.mu_upper);
    (x, mu)
}

/// Draws `count` transitions uniformly over `domain`.
pub fn collect_samples(
    model: &dyn DynamicsModel,
    cost: &dyn StageCost,
    domain: &BoxDomain,
    count: usize,
    delta_t: f64,
    substeps: usize,
    seed: u64,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::invalid("M", "sample count must be at least 1"));
    }
    domain.validate()?;
    if domain.state_dim() != model.state_dim() || domain.input_dim() != model.input_dim() {
        return Err(Error::invalid(
            "domain",
            format!(
                "box is {}+{} dimensional, model is {}+{}",
                domain.state_dim(),
                domain.input_dim(),
                model.state_dim(),
                model.input_dim()
            ),
        ));
    }
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(Error::invalid("delta_t", format!("must be positive, got {delta_t}")));
    }
    let samples = (0..count)
        .map(|index| {
            let (x, mu) = draw_pair(domain, seed, index);
            let (x_next, pi) =
                integrate_transition(model, cost, &x, &mu, delta_t, substeps).map_err(|e| Error::Sample {
                    index,
                    source: Box::new(e),
                })?;
            Ok(Sample { x, mu, x_next, pi })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet {
        samples,
        model: model.id().to_string(),
        state_dim: model.state_dim(),
        input_dim: model.input_dim(),
        delta_t,
        substeps,
        seed,
        domain: domain.clone(),
        domain_volume: domain.volume(),
        config_hash: None,
    })
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }

    /// Splits off `fraction` of the samples (rounded) as a held-out set using
    /// a seeded shuffle. Both parts keep the original sample order.
    pub fn split_holdout(&self, fraction: f64) -> Result<(SampleSet, SampleSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(
                "holdout_fraction",
                format!("must lie in [0, 1), got {fraction}"),
            ));
        }
        let held = (fraction * self.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        order.shuffle(&mut rng);
        let mut is_held = vec![false; self.len()];
        for &i in &order[..held] {
            is_held[i] = true;
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, h) in self.samples.iter().zip(is_held) {
            if h {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((self.with_samples(train), self.with_samples(test)))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "# ctql-dataset v1");
        if let Some(h) = &self.config_hash {
            let _ = writeln!(out, "# config_hash={h}");
        }
        let _ = writeln!(out, "# model={}", self.model);
        let _ = writeln!(out, "# n={}", self.state_dim);
        let _ = writeln!(out, "# m={}", self.input_dim);
        let _ = writeln!(out, "# M={}", self.len());
        let _ = writeln!(out, "# delta_t={}", fmt_f64(self.delta_t));
        let _ = writeln!(out, "# substeps={}", self.substeps);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# x_lower={}", list(&self.domain.x_lower));
        let _ = writeln!(out, "# x_upper={}", list(&self.domain.x_upper));
        let _ = writeln!(out, "# mu_lower={}", list(&self.domain.mu_lower));
        let _ = writeln!(out, "# mu_upper={}", list(&self.domain.mu_upper));
        let _ = writeln!(out, "# domain_volume={}", fmt_f64(self.domain_volume));
        for s in &self.samples {
            let fields: Vec<String> =
                s.x.iter()
                    .chain(s.mu.iter())
                    .chain(s.x_next.iter())
                    .chain(std::iter::once(&s.pi))
                    .map(|v| fmt_f64(*v))
                    .collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header = Header::default();
        let mut rows: Vec<(usize, &str)> = Vec::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if !rows.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "metadata after the first record".into(),
                    });
                }
                if let Some((k, v)) = meta.split_once('=') {
                    header.set(k.trim(), v.trim(), line_no)?;
                }
                continue;
            }
            rows.push((line_no, line));
        }
        let n = required(header.n, "n")?;
        let m = required(header.m, "m")?;
        let expected = required(header.count, "M")?;
        let domain = BoxDomain {
            x_lower: required(header.x_lower.clone(), "x_lower")?,
            x_upper: required(header.x_upper.clone(), "x_upper")?,
            mu_lower: required(header.mu_lower.clone(), "mu_lower")?,
            mu_upper: required(header.mu_upper.clone(), "mu_upper")?,
        };
        domain.validate().map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        if domain.state_dim() != n || domain.input_dim() != m {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "domain bounds are {}+{} dimensional but n={n}, m={m}",
                    domain.state_dim(),
                    domain.input_dim()
                ),
            });
        }
        let width = 2 * n + m + 1;
        let mut samples = Vec::with_capacity(rows.len());
        for (line, row) in rows {
            let vals = row
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse {
                    line,
                    message: format!("bad number: {e}"),
                })?;
            if vals.len() != width {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {width} fields for n={n}, m={m}, found {}", vals.len()),
                });
            }
            let pi = vals[width - 1];
            if pi.is_nan() || pi < 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("integrated cost must be nonnegative, got {pi}"),
                });
            }
            samples.push(Sample {
                x: DVector::from_column_slice(&vals[..n]),
                mu: DVector::from_column_slice(&vals[n..n + m]),
                x_next: DVector::from_column_slice(&vals[n + m..2 * n + m]),
                pi,
            });
        }
        if samples.len() != expected {
            return Err(Error::Parse {
                line: last_line,
                message: format!("header declares M={expected} but {} records follow", samples.len()),
            });
        }
        Ok(SampleSet {
            samples,
            model: header.model.unwrap_or_else(|| "custom".into()),
            state_dim: n,
            input_dim: m,
            delta_t: required(header.delta_t, "delta_t")?,
            substeps: required(header.substeps, "substeps")?,
            seed: required(header.seed, "seed")?,
            domain_volume: header.domain_volume.unwrap_or_else(|| domain.volume()),
            domain,
            config_hash: header.config_hash,
        })
    }
}

pub fn save_dataset(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_text())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SampleSet> {
    SampleSet::from_text(&fs::read_to_string(path)?)
}

/// Fixed 17-significant-digit scientific notation; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Default)]
struct Header {
    model: Option<String>,
    config_hash: Option<String>,
    n: Option<usize>,
    m: Option<usize>,
    count: Option<usize>,
    delta_t: Option<f64>,
    substeps: Option<usize>,
    seed: Option<u64>,
    x_lower: Option<Vec<f64>>,
    x_upper: Option<Vec<f64>>,
    mu_lower: Option<Vec<f64>>,
    mu_upper: Option<Vec<f64>>,
    domain_volume: Option<f64>,
}

impl Header {
    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad value `{v}` for `{key}`"),
            })
        }
        fn list(v: &str, key: &str, line: usize) -> Result<Vec<f64>> {
            v.split(',').map(|x| num(x.trim(), key, line)).collect()
        }
        match key {
            "model" => self.model = Some(value.to_string()),
            "config_hash" => self.config_hash = Some(value.to_string()),
            "n" => self.n = Some(num(value, key, line)?),
            "m" => self.m = Some(num(value, key, line)?),
            "M" => self.count = Some(num(value, key, line)?),
            "delta_t" => self.delta_t = Some(num(value, key, line)?),
            "substeps" => self.substeps = Some(num(value, key, line)?),
            "seed" => self.seed = Some(num(value, key, line)?),
            "x_lower" => self.x_lower = Some(list(value, key, line)?),
            "x_upper" => self.x_upper = Some(list(value, key, line)?),
            "mu_lower" => self.mu_lower = Some(list(value, key, line)?),
            "mu_upper" => self.mu_upper = Some(list(value, key, line)?),
            "domain_volume" => self.domain_volume = Some(num(value, key, line)?),
            _ => {}
        }
        Ok(())
    }
}

fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Parse {
        line: 0,
        message: format!("missing header key `{key}`"),
    })
}
