//! Joint models of the generation vector `X = (X_1, ..., X_N)`.
//!
//! Every equilibrium formula in this crate needs three things from a model:
//! the CDF of the sum `X_N = sum_i X_i`, its quantile function, and the
//! conditional means `E[X_i | X_N = alpha]`. [`GaussianJointModel`] provides
//! them in closed form; [`EmpiricalJointModel`] works from a weighted scenario
//! set and smooths the conditional means with a Gaussian kernel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::market::RealizationProfile;

/// Tolerance on the slope condition `dE[X_i | X_N = a]/da <= 1`.
pub const SLOPE_TOLERANCE: f64 = 1e-9;

const SYMMETRY_RTOL: f64 = 1e-12;
const PSD_RTOL: f64 = 1e-9;
const SAMPLE_CHUNK: usize = 4096;
const KERNEL_MASS_FLOOR: f64 = 1e-12;
const DEFAULT_SLOPE_GRID_POINTS: usize = 41;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

pub fn normal_pdf(z: f64) -> f64 {
    std_normal().pdf(z)
}

pub fn normal_quantile(q: f64) -> f64 {
    std_normal().inverse_cdf(q)
}

/// Whether Gaussian draws keep negative generation or clip it at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Raw draws; entries may be negative. Matches the closed-form analysis.
    #[default]
    Analysis,
    /// Entries clipped at 0.
    Physical,
}

/// `dE[X_i | X_N = alpha] / d alpha` per producer.
///
/// For Gaussian models the slopes are constant and sum to one. For empirical
/// models each entry is the largest slope seen on the model's alpha grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMeanSlope {
    pub slopes: Vec<f64>,
}

impl ConditionalMeanSlope {
    pub fn max_slope(&self) -> f64 {
        self.slopes
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.slopes.iter().sum()
    }

    /// True iff every slope is at most `1 + SLOPE_TOLERANCE`.
    pub fn condition_holds(&self) -> bool {
        self.slopes.iter().all(|s| *s <= 1.0 + SLOPE_TOLERANCE)
    }

    /// Producers whose slope exceeds one.
    pub fn violators(&self) -> Vec<usize> {
        self.slopes
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > 1.0 + SLOPE_TOLERANCE)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

/// Multivariate normal generation model `N(mean, covariance)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GaussianSpec", into = "GaussianSpec")]
pub struct GaussianJointModel {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    /// `L` with `L L^T = covariance`, from the eigendecomposition.
    factor: DMatrix<f64>,
    /// Row sums of the covariance, i.e. `Cov(X_i, X_N)`.
    cov_with_sum: Vec<f64>,
    sum_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GaussianSpec {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<GaussianSpec> for GaussianJointModel {
    type Error = Error;
    fn try_from(spec: GaussianSpec) -> Result<Self> {
        GaussianJointModel::new(spec.mean, spec.covariance)
    }
}

impl From<GaussianJointModel> for GaussianSpec {
    fn from(m: GaussianJointModel) -> Self {
        GaussianSpec {
            covariance: m.covariance_rows(),
            mean: m.mean,
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidModel("covariance matrix is empty".into()));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != n) {
        return Err(Error::InvalidModel(format!(
            "covariance row {r} has length {}, expected {n}",
            rows[r].len()
        )));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel(
            "covariance has non-finite entries".into(),
        ));
    }
    Ok(m)
}

impl GaussianJointModel {
    /// Validates symmetry (1e-12 relative) and positive semidefiniteness
    /// (smallest eigenvalue at least `-1e-9 * trace`).
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let cov = matrix_from_rows(&covariance)?;
        Self::from_matrix(mean, cov, false).map(|(m, _)| m)
    }

    /// Like [`new`](Self::new) but clips slightly negative eigenvalues to zero.
    /// Returns whether a repair happened.
    pub fn new_repaired(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<(Self, bool)> {
        let cov = matrix_from_rows(&covariance)?;
        Self::from_matrix(mean, cov, true)
    }

    fn from_matrix(mean: Vec<f64>, cov: DMatrix<f64>, repair: bool) -> Result<(Self, bool)> {
        let n = cov.nrows();
        if mean.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("mean has non-finite entries".into()));
        }
        let max_abs = cov.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_RTOL * max_abs {
                    return Err(Error::InvalidModel(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let trace = cov.trace();
        let eigen = SymmetricEigen::new(cov.clone());
        let min_eig = eigen
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_RTOL * trace.abs() {
            return Err(Error::InvalidModel(format!(
                "covariance is not positive semidefinite (smallest eigenvalue {min_eig:e})"
            )));
        }
        let clipped = eigen.eigenvalues.map(|l| l.max(0.0));
        let repaired = repair && min_eig < 0.0;
        let cov = if repaired {
            let mut rebuilt = &eigen.eigenvectors
                * DMatrix::from_diagonal(&clipped)
                * eigen.eigenvectors.transpose();
            rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
            rebuilt
        } else {
            cov
        };
        let factor = &eigen.eigenvectors * DMatrix::from_diagonal(&clipped.map(f64::sqrt));
        let cov_with_sum: Vec<f64> = (0..n).map(|i| cov.row(i).sum()).collect();
        let sum_variance = cov_with_sum.iter().sum::<f64>();
        Ok((
            Self {
                mean,
                covariance: cov,
                factor,
                cov_with_sum,
                sum_variance,
            },
            repaired,
        ))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn covariance_rows(&self) -> Vec<Vec<f64>> {
        self.covariance
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    pub fn sum_mean(&self) -> f64 {
        self.mean.iter().sum()
    }

    pub fn sum_variance(&self) -> f64 {
        self.sum_variance
    }

    pub fn sum_std(&self) -> f64 {
        self.sum_variance.max(0.0).sqrt()
    }

    /// `Cov(X_i, X_N)`.
    pub fn cov_with_sum(&self, i: usize) -> f64 {
        self.cov_with_sum[i]
    }

    pub fn marginal_std(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    /// True when `Var(X_N) = 0`, so the sum has no density.
    pub fn is_degenerate(&self) -> bool {
        !(self.sum_variance > 0.0)
    }

    fn require_sum_spread(&self) -> Result<f64> {
        if self.is_degenerate() {
            return Err(Error::DegenerateModel(
                "variance of total generation is zero".into(),
            ));
        }
        Ok(self.sum_std())
    }

    /// Same covariance, different mean. Used to re-center the error model on
    /// each hour's forecasts.
    pub fn with_mean(&self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: mean.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("mean has non-finite entries".into()));
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }

    /// Mean and variance of `sum_{i in members} X_i`.
    pub fn subset_moments(&self, members: &[usize]) -> (f64, f64) {
        let mean = members.iter().map(|&i| self.mean[i]).sum();
        let var = members
            .iter()
            .flat_map(|&i| members.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.covariance[(i, j)])
            .sum();
        (mean, var)
    }

    pub fn sum_cdf(&self, alpha: f64) -> Result<f64> {
        let sd = self.require_sum_spread()?;
        Ok(normal_cdf((alpha - self.sum_mean()) / sd))
    }

    /// Density of `X_N` at `alpha`.
    pub fn sum_pdf(&self, alpha: f64) -> Result<f64> {
        let sd = self.require_sum_spread()?;
        Ok(normal_pdf((alpha - self.sum_mean()) / sd) / sd)
    }

    pub fn sum_quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!(
                "Gaussian quantile level must lie in (0, 1), got {q}"
            )));
        }
        let sd = self.require_sum_spread()?;
        Ok(self.sum_mean() + sd * normal_quantile(q))
    }

    /// `Cov(X_i, X_N) / Var(X_N)`.
    pub fn slope(&self, i: usize) -> Result<f64> {
        self.check_index(i)?;
        self.require_sum_spread()?;
        Ok(self.cov_with_sum[i] / self.sum_variance)
    }

    pub fn conditional_mean(&self, i: usize, alpha: f64) -> Result<f64> {
        let b = self.slope(i)?;
        Ok(self.mean[i] + b * (alpha - self.sum_mean()))
    }

    pub fn conditional_mean_slopes(&self) -> Result<ConditionalMeanSlope> {
        let slopes = (0..self.dim())
            .map(|i| self.slope(i))
            .collect::<Result<_>>()?;
        Ok(ConditionalMeanSlope { slopes })
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.dim() {
            return Err(Error::Domain(format!(
                "producer index {i} out of range for {} producers",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Model of the game where `members` act as one player. The merged
    /// component is appended after the remaining producers, which keep their
    /// relative order. Returns the model and, for each original index outside
    /// `members`, its new index.
    pub fn merge(&self, members: &[usize]) -> Result<(Self, Vec<Option<usize>>)> {
        let n = self.dim();
        let (map, m) = merge_layout(n, members)?;
        let mut a = DMatrix::zeros(m, n);
        for (orig, new) in map.iter().enumerate() {
            let row = new.unwrap_or(m - 1);
            a[(row, orig)] = 1.0;
        }
        let mean = (&a * DVector::from_column_slice(&self.mean))
            .iter()
            .copied()
            .collect();
        let cov = &a * &self.covariance * a.transpose();
        let (model, _) = Self::from_matrix(mean, cov, true)?;
        Ok((model, map))
    }

    fn fill_rows(&self, out: &mut [f64], seed: u64, chunk: u64, mode: SamplingMode) {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        let mut z = DVector::zeros(n);
        for row in out.chunks_mut(n) {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let x = &self.factor * &z;
            for ((dst, mu), dx) in row.iter_mut().zip(&self.mean).zip(x.iter()) {
                let v = mu + dx;
                *dst = match mode {
                    SamplingMode::Analysis => v,
                    SamplingMode::Physical => v.max(0.0),
                };
            }
        }
    }
}

fn merge_layout(n: usize, members: &[usize]) -> Result<(Vec<Option<usize>>, usize)> {
    if members.is_empty() {
        return Err(Error::Domain(
            "cannot merge an empty set of producers".into(),
        ));
    }
    let mut in_set = vec![false; n];
    for &i in members {
        if i >= n {
            return Err(Error::Domain(format!(
                "producer index {i} out of range for {n} producers"
            )));
        }
        in_set[i] = true;
    }
    let mut next = 0;
    let map = in_set
        .iter()
        .map(|&inside| {
            if inside {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect();
    Ok((map, next + 1))
}

// ---------------------------------------------------------------------------
// Empirical
// ---------------------------------------------------------------------------

/// Weighted scenario set standing in for the joint density.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "EmpiricalSpec", into = "EmpiricalSpec")]
pub struct EmpiricalJointModel {
    scenarios: Vec<Vec<f64>>,
    weights: Vec<f64>,
    bandwidth: Option<f64>,
    slope_grid: Option<Vec<f64>>,
    /// Scenario sums sorted ascending with their weights.
    sorted_sums: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmpiricalSpec {
    scenarios: Vec<Vec<f64>>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
    #[serde(default)]
    bandwidth: Option<f64>,
    #[serde(default)]
    slope_grid: Option<Vec<f64>>,
}

impl TryFrom<EmpiricalSpec> for EmpiricalJointModel {
    type Error = Error;
    fn try_from(s: EmpiricalSpec) -> Result<Self> {
        let mut m = EmpiricalJointModel::new(s.scenarios, s.weights)?;
        if let Some(h) = s.bandwidth {
            m = m.with_bandwidth(h)?;
        }
        if let Some(g) = s.slope_grid {
            m = m.with_slope_grid(g)?;
        }
        Ok(m)
    }
}

impl From<EmpiricalJointModel> for EmpiricalSpec {
    fn from(m: EmpiricalJointModel) -> Self {
        EmpiricalSpec {
            scenarios: m.scenarios,
            weights: Some(m.weights),
            bandwidth: m.bandwidth,
            slope_grid: m.slope_grid,
        }
    }
}

impl EmpiricalJointModel {
    /// `weights` default to uniform; otherwise they must be nonnegative and
    /// sum to one within 1e-9.
    pub fn new(scenarios: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Result<Self> {
        let s = scenarios.len();
        if s == 0 {
            return Err(Error::InvalidModel("scenario set is empty".into()));
        }
        let n = scenarios[0].len();
        if n == 0 {
            return Err(Error::InvalidModel("scenarios have no producers".into()));
        }
        for (k, row) in scenarios.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidModel(format!(
                    "scenario {k} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "scenario {k} has non-finite entries"
                )));
            }
        }
        let weights = match weights {
            None => vec![1.0 / s as f64; s],
            Some(w) => {
                if w.len() != s {
                    return Err(Error::Dimension {
                        expected: s,
                        found: w.len(),
                    });
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidModel(
                        "weights must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidModel(format!(
                        "weights sum to {total}, not 1"
                    )));
                }
                w
            }
        };
        let mut sorted_sums: Vec<(f64, f64)> = scenarios
            .iter()
            .zip(&weights)
            .map(|(row, &w)| (row.iter().sum(), w))
            .collect();
        sorted_sums.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            scenarios,
            weights,
            bandwidth: None,
            slope_grid: None,
            sorted_sums,
        })
    }

    /// Overrides the Silverman bandwidth of the conditional-mean smoother.
    pub fn with_bandwidth(mut self, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "bandwidth must be positive, got {h}"
            )));
        }
        self.bandwidth = Some(h);
        Ok(self)
    }

    /// Overrides the alpha grid used for slope estimation (at least 2 points,
    /// strictly increasing).
    pub fn with_slope_grid(mut self, grid: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidModel(
                "slope grid needs at least two strictly increasing points".into(),
            ));
        }
        self.slope_grid = Some(grid);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.scenarios[0].len()
    }

    pub fn scenarios(&self) -> &[Vec<f64>] {
        &self.scenarios
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn weighted_moments<I: Iterator<Item = (f64, f64)>>(values: I) -> (f64, f64) {
        let pairs: Vec<(f64, f64)> = values.collect();
        let mean: f64 = pairs.iter().map(|(v, w)| v * w).sum();
        let var: f64 = pairs.iter().map(|(v, w)| w * (v - mean).powi(2)).sum();
        (mean, var)
    }

    pub fn sum_mean(&self) -> f64 {
        self.sorted_sums.iter().map(|(s, w)| s * w).sum()
    }

    pub fn sum_std(&self) -> f64 {
        Self::weighted_moments(self.sorted_sums.iter().copied())
            .1
            .sqrt()
    }

    pub fn marginal_mean(&self, i: usize) -> f64 {
        self.scenarios
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r[i] * w)
            .sum()
    }

    pub fn marginal_std(&self, i: usize) -> f64 {
        Self::weighted_moments(
            self.scenarios
                .iter()
                .map(|r| r[i])
                .zip(self.weights.iter().copied()),
        )
        .1
        .sqrt()
    }

    /// Kernel bandwidth: the override if set, else `1.06 * sd(X_N) * S^(-1/5)`.
    pub fn bandwidth(&self) -> Result<f64> {
        if let Some(h) = self.bandwidth {
            return Ok(h);
        }
        let sd = self.sum_std();
        if !(sd > 0.0) {
            return Err(Error::DegenerateModel(
                "scenario sums have zero spread; set a bandwidth explicitly".into(),
            ));
        }
        Ok(1.06 * sd * (self.scenarios.len() as f64).powf(-0.2))
    }

    pub fn sum_cdf(&self, alpha: f64) -> Result<f64> {
        Ok(self
            .sorted_sums
            .iter()
            .take_while(|(s, _)| *s <= alpha)
            .map(|(_, w)| w)
            .sum::<f64>()
            .min(1.0))
    }

    /// Smallest realized sum `s` with `F(s) >= q`.
    pub fn sum_quantile(&self, q: f64) -> Result<f64> {
        weighted_quantile(&self.sorted_sums, q)
    }

    /// Quantile of `sum_{i in members} X_i` under the same convention.
    pub fn subset_quantile(&self, members: &[usize], q: f64) -> Result<f64> {
        let mut sums: Vec<(f64, f64)> = self
            .scenarios
            .iter()
            .zip(&self.weights)
            .map(|(r, &w)| (members.iter().map(|&i| r[i]).sum(), w))
            .collect();
        sums.sort_by(|a, b| a.0.total_cmp(&b.0));
        weighted_quantile(&sums, q)
    }

    /// Nadaraya–Watson estimate of `E[X_i | X_N = alpha]`.
    pub fn conditional_mean(&self, i: usize, alpha: f64) -> Result<f64> {
        if i >= self.dim() {
            return Err(Error::Domain(format!(
                "producer index {i} out of range for {} producers",
                self.dim()
            )));
        }
        let h = self.bandwidth()?;
        let (num, den) =
            self.scenarios
                .iter()
                .zip(&self.weights)
                .fold((0.0, 0.0), |(num, den), (row, &w)| {
                    let u = (row.iter().sum::<f64>() - alpha) / h;
                    let k = w * (-0.5 * u * u).exp();
                    (num + k * row[i], den + k)
                });
        if den < KERNEL_MASS_FLOOR {
            return Err(Error::EstimationSupport {
                alpha,
                bandwidth: h,
            });
        }
        Ok(num / den)
    }

    /// Alpha grid for slope estimation: the override, or 41 points spanning
    /// the weighted 5% to 95% quantiles of the sum.
    pub fn slope_grid(&self) -> Result<Vec<f64>> {
        if let Some(g) = &self.slope_grid {
            return Ok(g.clone());
        }
        let lo = self.sum_quantile(0.05)?;
        let hi = self.sum_quantile(0.95)?;
        if !(hi > lo) {
            return Err(Error::DegenerateModel(
                "scenario sums too concentrated for a slope grid".into(),
            ));
        }
        let k = DEFAULT_SLOPE_GRID_POINTS - 1;
        Ok((0..=k)
            .map(|j| lo + (hi - lo) * j as f64 / k as f64)
            .collect())
    }

    /// Finite-difference slopes of `alpha -> E[X_i | X_N = alpha]` between
    /// consecutive grid points, as `(midpoint, slope)` pairs.
    pub fn slope_curve(&self, i: usize) -> Result<Vec<(f64, f64)>> {
        let grid = self.slope_grid()?;
        let values = grid
            .iter()
            .map(|&a| self.conditional_mean(i, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(grid
            .windows(2)
            .zip(values.windows(2))
            .map(|(a, v)| (0.5 * (a[0] + a[1]), (v[1] - v[0]) / (a[1] - a[0])))
            .collect())
    }

    pub fn conditional_mean_slopes(&self) -> Result<ConditionalMeanSlope> {
        let slopes = (0..self.dim())
            .map(|i| {
                Ok(self
                    .slope_curve(i)?
                    .into_iter()
                    .map(|(_, s)| s)
                    .fold(f64::NEG_INFINITY, f64::max))
            })
            .collect::<Result<_>>()?;
        Ok(ConditionalMeanSlope { slopes })
    }

    /// Scenario set of the game where `members` act as one player; layout as
    /// in [`GaussianJointModel::merge`].
    pub fn merge(&self, members: &[usize]) -> Result<(Self, Vec<Option<usize>>)> {
        let (map, m) = merge_layout(self.dim(), members)?;
        let scenarios = self
            .scenarios
            .iter()
            .map(|row| {
                let mut out = vec![0.0; m];
                for (orig, new) in map.iter().enumerate() {
                    out[new.unwrap_or(m - 1)] += row[orig];
                }
                out
            })
            .collect();
        let mut merged = Self::new(scenarios, Some(self.weights.clone()))?;
        merged.bandwidth = self.bandwidth;
        merged.slope_grid = self.slope_grid.clone();
        Ok((merged, map))
    }

    fn fill_rows(&self, out: &mut [f64], seed: u64, chunk: u64, mode: SamplingMode) {
        let n = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        let index = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        for row in out.chunks_mut(n) {
            let src = &self.scenarios[index.sample(&mut rng)];
            for (dst, &v) in row.iter_mut().zip(src) {
                *dst = match mode {
                    SamplingMode::Analysis => v,
                    SamplingMode::Physical => v.max(0.0),
                };
            }
        }
    }
}

fn weighted_quantile(sorted: &[(f64, f64)], q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!(
            "empirical quantile level must lie in (0, 1], got {q}"
        )));
    }
    let mut cum = 0.0;
    for &(s, w) in sorted {
        cum += w;
        if cum >= q - 1e-12 {
            return Ok(s);
        }
    }
    Ok(sorted.last().expect("nonempty scenario set").0)
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Either kind of joint generation model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointModel {
    Gaussian(GaussianJointModel),
    Empirical(EmpiricalJointModel),
}

impl From<GaussianJointModel> for JointModel {
    fn from(m: GaussianJointModel) -> Self {
        JointModel::Gaussian(m)
    }
}

impl From<EmpiricalJointModel> for JointModel {
    fn from(m: EmpiricalJointModel) -> Self {
        JointModel::Empirical(m)
    }
}

impl JointModel {
    pub fn dim(&self) -> usize {
        match self {
            JointModel::Gaussian(m) => m.dim(),
            JointModel::Empirical(m) => m.dim(),
        }
    }

    pub fn sum_cdf(&self, alpha: f64) -> Result<f64> {
        match self {
            JointModel::Gaussian(m) => m.sum_cdf(alpha),
            JointModel::Empirical(m) => m.sum_cdf(alpha),
        }
    }

    pub fn sum_quantile(&self, q: f64) -> Result<f64> {
        match self {
            JointModel::Gaussian(m) => m.sum_quantile(q),
            JointModel::Empirical(m) => m.sum_quantile(q),
        }
    }

    pub fn conditional_mean(&self, i: usize, alpha: f64) -> Result<f64> {
        match self {
            JointModel::Gaussian(m) => m.conditional_mean(i, alpha),
            JointModel::Empirical(m) => m.conditional_mean(i, alpha),
        }
    }

    pub fn conditional_mean_slopes(&self) -> Result<ConditionalMeanSlope> {
        match self {
            JointModel::Gaussian(m) => m.conditional_mean_slopes(),
            JointModel::Empirical(m) => m.conditional_mean_slopes(),
        }
    }

    pub fn sum_mean(&self) -> f64 {
        match self {
            JointModel::Gaussian(m) => m.sum_mean(),
            JointModel::Empirical(m) => m.sum_mean(),
        }
    }

    pub fn sum_std(&self) -> f64 {
        match self {
            JointModel::Gaussian(m) => m.sum_std(),
            JointModel::Empirical(m) => m.sum_std(),
        }
    }

    pub fn marginal_std(&self, i: usize) -> f64 {
        match self {
            JointModel::Gaussian(m) => m.marginal_std(i),
            JointModel::Empirical(m) => m.marginal_std(i),
        }
    }

    pub fn marginal_mean(&self, i: usize) -> f64 {
        match self {
            JointModel::Gaussian(m) => m.mean()[i],
            JointModel::Empirical(m) => m.marginal_mean(i),
        }
    }

    /// Quantile of `sum_{i in members} X_i`.
    pub fn subset_quantile(&self, members: &[usize], q: f64) -> Result<f64> {
        if members.is_empty() {
            return Err(Error::Domain("subset must be nonempty".into()));
        }
        if let Some(&i) = members.iter().find(|&&i| i >= self.dim()) {
            return Err(Error::Domain(format!(
                "producer index {i} out of range for {} producers",
                self.dim()
            )));
        }
        match self {
            JointModel::Gaussian(m) => {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::Domain(format!(
                        "Gaussian quantile level must lie in (0, 1), got {q}"
                    )));
                }
                let (mean, var) = m.subset_moments(members);
                if !(var > 0.0) {
                    return Err(Error::DegenerateModel(format!(
                        "sub-sum over {members:?} has zero variance"
                    )));
                }
                Ok(mean + var.sqrt() * normal_quantile(q))
            }
            JointModel::Empirical(m) => m.subset_quantile(members, q),
        }
    }

    pub fn merge(&self, members: &[usize]) -> Result<(JointModel, Vec<Option<usize>>)> {
        match self {
            JointModel::Gaussian(m) => m.merge(members).map(|(m, map)| (m.into(), map)),
            JointModel::Empirical(m) => m.merge(members).map(|(m, map)| (m.into(), map)),
        }
    }

    /// `n` draws as a flat row-major `n x N` buffer. Deterministic in `seed`
    /// regardless of thread count: rows are generated in fixed-size chunks,
    /// each from its own ChaCha stream.
    pub fn sample_rows(&self, n: usize, seed: u64, mode: SamplingMode) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; n * dim];
        out.par_chunks_mut(SAMPLE_CHUNK * dim)
            .enumerate()
            .for_each(|(chunk, buf)| match self {
                JointModel::Gaussian(m) => m.fill_rows(buf, seed, chunk as u64, mode),
                JointModel::Empirical(m) => m.fill_rows(buf, seed, chunk as u64, mode),
            });
        out
    }

    /// `n` realization profiles. In analysis mode entries may be negative.
    pub fn sample(
        &self,
        n: usize,
        seed: u64,
        mode: SamplingMode,
    ) -> Result<Vec<RealizationProfile>> {
        if n == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        self.sample_rows(n, seed, mode)
            .chunks(self.dim())
            .map(|r| RealizationProfile::unchecked_sign(r.to_vec()))
            .collect()
    }
}
