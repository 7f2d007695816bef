//! Monte Carlo estimates with standard errors.
//!
//! Reductions run over fixed-size blocks whose partial sums are combined in
//! block order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::market::{CommitmentProfile, PriceSystem, SettlementBranch};

const BLOCK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    /// True when `|mean - target| <= k * stderr + abs_slack`.
    pub fn within(&self, target: f64, k: f64, abs_slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + abs_slack
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64,
        }
    }

    fn estimate(self) -> Estimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            mean: self.mean,
            stderr: (var / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }
}

/// Estimates `E[f(row)]` for each of the `k` outputs of `f` over the rows of a
/// flat `rows.len() / dim x dim` buffer.
pub fn estimate_rows<F>(rows: &[f64], dim: usize, k: usize, f: F) -> Vec<Estimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let partials: Vec<Vec<Moments>> = rows
        .par_chunks(BLOCK * dim)
        .map(|block| {
            let mut acc = vec![Moments::default(); k];
            let mut out = vec![0.0; k];
            for row in block.chunks(dim) {
                f(row, &mut out);
                for (m, v) in acc.iter_mut().zip(&out) {
                    m.push(*v);
                }
            }
            acc
        })
        .collect();
    partials
        .into_iter()
        .fold(vec![Moments::default(); k], |acc, block| {
            acc.into_iter()
                .zip(block)
                .map(|(a, b)| a.merge(b))
                .collect()
        })
        .into_iter()
        .map(Moments::estimate)
        .collect()
}

/// Estimate of a scalar statistic.
pub fn estimate_scalar<F>(rows: &[f64], dim: usize, f: F) -> Estimate
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    estimate_rows(rows, dim, 1, |row, out| out[0] = f(row))[0]
}

/// Expected PAM payoff of every producer under fixed commitments.
pub fn pam_payoff_estimates(
    rows: &[f64],
    commitments: &CommitmentProfile,
    prices: &PriceSystem,
) -> Vec<Estimate> {
    let c = commitments.as_slice();
    let c_total = commitments.total();
    estimate_rows(rows, c.len(), c.len(), |x, out| {
        let branch = SettlementBranch::classify(c_total, x.iter().sum());
        let q = prices.settlement_price(branch);
        for ((o, &ci), &xi) in out.iter_mut().zip(c).zip(x) {
            *o = prices.forward() * ci + q * (xi - ci);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_match_two_pass() {
        let data: Vec<f64> = (0..50_000)
            .map(|i| ((i * 7919) % 1000) as f64 * 0.01)
            .collect();
        let est = estimate_scalar(&data, 1, |r| r[0]);
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((est.mean - mean).abs() < 1e-10);
        assert!((est.stderr - (var / n).sqrt()).abs() < 1e-12);
        assert_eq!(est.samples, 50_000);
    }

    #[test]
    fn constant_has_zero_stderr() {
        let est = estimate_scalar(&[2.0; 10], 1, |r| r[0]);
        assert_eq!(est.mean, 2.0);
        assert_eq!(est.stderr, 0.0);
        assert!(est.within(2.0, 3.0, 0.0));
    }
}
