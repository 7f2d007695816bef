//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rpp_aggregation::simharness::{fit_error_model, MarketHistory};
use rpp_aggregation::{EmpiricalJointModel, GaussianJointModel, JointModel, PriceSystem};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AllocationKind {
    Pam,
    /// Aggregate payoff split in proportion to commitments.
    Proportional,
}

/// Numbers given inline in the config or read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Inline(Vec<f64>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriceSpec {
    List(Vec<f64>),
    Table {
        forward: f64,
        rt_buy: f64,
        rt_sell: f64,
        #[serde(default)]
        tie: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTable {
    pub mean: Option<Vec<f64>>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub scenarios: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<f64>>,
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    File(PathBuf),
    Table(ModelTable),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    pub prices: Option<PriceSpec>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
    pub sampled: Option<bool>,
    pub physical: Option<bool>,
    pub commitments: Option<Values>,
    pub realizations: Option<Values>,
    pub allocation: Option<AllocationKind>,
    pub rpp: Option<usize>,
    pub history: Option<PathBuf>,
    pub train_rows: Option<usize>,
    pub grid_points: Option<usize>,
    pub tolerance_sds: Option<f64>,
    pub verify: Option<bool>,
    pub coalitions_csv: Option<PathBuf>,
    pub rpps: Option<usize>,
    pub hours: Option<usize>,
    pub correlation: Option<f64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),*) => {
        $(if $top.$field.is_some() { $base.$field = $top.$field; })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    /// Makes file references relative to the config file's directory.
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(ModelSpec::File(p)) = &mut self.model {
            fix(p);
        }
        for v in [&mut self.commitments, &mut self.realizations]
            .into_iter()
            .flatten()
        {
            if let Values::File(p) = v {
                fix(p);
            }
        }
        for p in [&mut self.out, &mut self.history, &mut self.coalitions_csv]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Fields set in `flags` win over `self`.
    pub fn overlay(mut self, flags: RunConfig) -> Self {
        overlay!(self, flags; model, prices, seed, samples, out, sampled, physical, commitments,
            realizations, allocation, rpp, history, train_rows, grid_points, tolerance_sds, verify,
            coalitions_csv, rpps, hours, correlation);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == Some(0) {
            bail!("samples must be at least 1");
        }
        if let Some(k) = self.tolerance_sds {
            if !(k > 0.0 && k.is_finite()) {
                bail!("tolerance_sds must be positive, got {k}");
            }
        }
        if self.grid_points.is_some_and(|g| g < 2) {
            bail!("grid_points must be at least 2");
        }
        Ok(())
    }

    pub fn seed_required(&self, what: &str) -> Result<u64> {
        self.seed.with_context(|| {
            format!("{what} is stochastic: a seed is required (--seed or `seed` in the config)")
        })
    }

    pub fn prices(&self) -> Result<PriceSystem> {
        let spec = self
            .prices
            .as_ref()
            .context("prices are required (--prices p_f,p_rb,p_rs[,p_star])")?;
        let p = match spec {
            PriceSpec::List(v) => match v.as_slice() {
                [f, rb, rs] => PriceSystem::new(*f, *rb, *rs),
                [f, rb, rs, tie] => PriceSystem::with_tie(*f, *rb, *rs, *tie),
                _ => bail!(
                    "prices need 3 or 4 values (p_f, p_rb, p_rs[, p_star]), got {}",
                    v.len()
                ),
            },
            PriceSpec::Table {
                forward,
                rt_buy,
                rt_sell,
                tie: Some(t),
            } => PriceSystem::with_tie(*forward, *rt_buy, *rt_sell, *t),
            PriceSpec::Table {
                forward,
                rt_buy,
                rt_sell,
                tie: None,
            } => PriceSystem::new(*forward, *rt_buy, *rt_sell),
        };
        Ok(p?)
    }

    pub fn model(&self) -> Result<JointModel> {
        match self
            .model
            .as_ref()
            .context("a model is required (--model or [model] in the config)")?
        {
            ModelSpec::Table(t) => model_from_table(t),
            ModelSpec::File(p) => load_model_file(p),
        }
    }

    pub fn commitments(&self) -> Result<Vec<f64>> {
        load_values(self.commitments.as_ref(), "commitments")
    }

    pub fn realizations(&self) -> Result<Vec<f64>> {
        load_values(self.realizations.as_ref(), "realizations")
    }

    pub fn history(&self) -> Result<MarketHistory> {
        let path = self
            .history
            .as_ref()
            .context("a history CSV is required (--history)")?;
        read_history(path)
    }
}

pub fn parse_price_flag(s: &str) -> Result<PriceSpec> {
    let v = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid price {t:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriceSpec::List(v))
}

fn model_from_table(t: &ModelTable) -> Result<JointModel> {
    if let Some(scenarios) = &t.scenarios {
        if t.mean.is_some() || t.covariance.is_some() {
            bail!("model has both scenarios and Gaussian parameters");
        }
        let mut m = EmpiricalJointModel::new(scenarios.clone(), t.weights.clone())?;
        if let Some(h) = t.bandwidth {
            m = m.with_bandwidth(h)?;
        }
        return Ok(m.into());
    }
    let mean = t.mean.clone().context("model is missing `mean`")?;
    let covariance = t
        .covariance
        .clone()
        .context("model is missing `covariance`")?;
    Ok(GaussianJointModel::new(mean, covariance)?.into())
}

fn read_history(path: &Path) -> Result<MarketHistory> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    MarketHistory::read_csv(file).with_context(|| format!("invalid history {}", path.display()))
}

/// `.json` / `.toml` model tables; `.csv` is either a market history (header
/// starting with `timestamp`), fitted as a Gaussian of the actuals, or a
/// table of scenarios (header row, one column per producer) used as an
/// empirical model.
fn load_model_file(path: &Path) -> Result<JointModel> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read model {}", path.display()))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default();
    match ext {
        "json" => model_from_table(
            &serde_json::from_str(&text)
                .with_context(|| format!("invalid model {}", path.display()))?,
        ),
        "toml" => model_from_table(
            &toml::from_str(&text).with_context(|| format!("invalid model {}", path.display()))?,
        ),
        "csv" if text.trim_start().starts_with("timestamp") => {
            let h = read_history(path)?;
            let rows = h.len();
            let mean: Vec<f64> = (0..h.n_rpps())
                .map(|i| h.hours().iter().map(|r| r.actuals[i]).sum::<f64>() / rows as f64)
                .collect();
            // Covariance of the actuals: reuse the error fit with zero forecasts.
            let mut zeroed = h.hours().to_vec();
            for r in &mut zeroed {
                r.forecasts.iter_mut().for_each(|f| *f = 0.0);
            }
            let fitted = fit_error_model(&MarketHistory::new(zeroed)?)?;
            Ok(fitted.with_mean(mean)?.into())
        }
        "csv" => {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            let scenarios = rdr
                .records()
                .enumerate()
                .map(|(k, r)| {
                    let r = r.with_context(|| format!("row {}", k + 1))?;
                    r.iter()
                        .map(|v| {
                            v.parse::<f64>()
                                .with_context(|| format!("row {}: invalid number {v:?}", k + 1))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EmpiricalJointModel::new(scenarios, None)?.into())
        }
        _ => bail!(
            "unsupported model file {} (expected .json, .toml or .csv)",
            path.display()
        ),
    }
}

fn load_values(v: Option<&Values>, what: &str) -> Result<Vec<f64>> {
    match v.with_context(|| format!("{what} are required"))? {
        Values::Inline(v) => Ok(v.clone()),
        Values::File(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read {what} {}", p.display()))?;
            parse_values(&text).with_context(|| format!("invalid {what} in {}", p.display()))
        }
    }
}

/// A JSON array, or numbers separated by commas or whitespace.
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let t = text.trim();
    if t.starts_with('[') {
        return Ok(serde_json::from_str(t)?);
    }
    t.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("invalid number {s:?}"))
        })
        .collect()
}
