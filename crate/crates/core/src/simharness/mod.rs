//! Hour-by-hour simulation of producers trading with and without an aggregator.
//!
//! A zero-mean Gaussian forecast-error model is fitted on a training window.
//! For each hour of the test window the error model is re-centered on that
//! hour's forecasts, commitments are chosen per case, and payoffs are settled
//! against realized generation:
//!
//! - case 2: aggregator with the PAM, producers commit at the Nash equilibrium;
//! - case 3: aggregator with the PAM, producers commit their stand-alone newsvendor optimum;
//! - case 4: no aggregator, stand-alone newsvendor commitments settled separately.
//!
//! Other allocation rules plug in through [`AllocationRule`].

pub mod history;
pub mod report;
pub mod synthetic;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{ne_commitments, optimal_separate_commitment};
use crate::error::{Error, Result};
use crate::market::{
    pam_allocate, separate_payoff, CommitmentProfile, PayoffAllocation, PriceSystem,
    RealizationProfile,
};
use crate::stochastic::{GaussianJointModel, JointModel};

pub use history::{HourRecord, MarketHistory};

/// Real-time buy price multiplier on the day-ahead price.
pub const DA_MARKUP: f64 = 1.2;
/// Real-time buy price multiplier on the real-time price.
pub const RT_MARKUP: f64 = 2.0;

/// `(p_rb, p_rs) = (max(1.2 p_da, 2 p_rt), min(p_da / 1.2, p_rt / 2))`.
pub fn construct_rt_prices(p_da: f64, p_rt: f64) -> Result<(f64, f64)> {
    if !(p_da > 0.0 && p_da.is_finite()) {
        return Err(Error::data(format!(
            "day-ahead price must be positive, got {p_da}"
        )));
    }
    if !(p_rt >= 0.0 && p_rt.is_finite()) {
        return Err(Error::data(format!(
            "real-time price must be nonnegative, got {p_rt}"
        )));
    }
    Ok((
        (DA_MARKUP * p_da).max(RT_MARKUP * p_rt),
        (p_da / DA_MARKUP).min(p_rt / RT_MARKUP),
    ))
}

/// Price system for one hour of history.
pub fn hour_prices(hour: &HourRecord) -> Result<PriceSystem> {
    let (rb, rs) = construct_rt_prices(hour.p_da, hour.p_rt)?;
    PriceSystem::new(hour.p_da, rb, rs)
}

/// Zero-mean Gaussian model of forecast errors `actual - forecast`, with the
/// unbiased sample covariance (PSD-repaired when marginally indefinite).
pub fn fit_error_model(train: &MarketHistory) -> Result<GaussianJointModel> {
    let n = train.n_rpps();
    let rows = train.len();
    if rows < n + 1 {
        return Err(Error::data(format!(
            "need at least {} training rows for {n} producers, got {rows}",
            n + 1
        )));
    }
    let errors: Vec<Vec<f64>> = train
        .hours()
        .iter()
        .map(|h| {
            h.actuals
                .iter()
                .zip(&h.forecasts)
                .map(|(a, f)| a - f)
                .collect()
        })
        .collect();
    let means: Vec<f64> = (0..n)
        .map(|i| errors.iter().map(|e| e[i]).sum::<f64>() / rows as f64)
        .collect();
    let cov: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    errors
                        .iter()
                        .map(|e| (e[i] - means[i]) * (e[j] - means[j]))
                        .sum::<f64>()
                        / (rows - 1) as f64
                })
                .collect()
        })
        .collect();
    GaussianJointModel::new_repaired(vec![0.0; n], cov).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseId {
    Case2,
    Case3,
    Case4,
}

impl CaseId {
    pub const ALL: [CaseId; 3] = [CaseId::Case2, CaseId::Case3, CaseId::Case4];

    pub fn as_str(&self) -> &'static str {
        match self {
            CaseId::Case2 => "case2",
            CaseId::Case3 => "case3",
            CaseId::Case4 => "case4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseOptions {
    /// Clip commitments at zero.
    pub physical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourWarning {
    pub hour: usize,
    pub message: String,
}

/// Payoffs of one case over a test window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    pub timestamps: Vec<String>,
    /// `hourly[t][i]`: payoff of producer `i` in hour `t`.
    pub hourly: Vec<Vec<f64>>,
    pub per_rpp_totals: Vec<f64>,
    pub per_hour_totals: Vec<f64>,
    pub grand_total: f64,
    pub warnings: Vec<HourWarning>,
    /// Commitments raised to zero in physical mode.
    pub clipped_commitments: usize,
}

impl CaseResult {
    fn assemble(case: String, history: &MarketHistory, hours: Vec<HourOutcome>) -> Self {
        let n = history.n_rpps();
        let mut per_rpp_totals = vec![0.0; n];
        let mut per_hour_totals = Vec::with_capacity(hours.len());
        let mut hourly = Vec::with_capacity(hours.len());
        let mut warnings = Vec::new();
        let mut clipped_commitments = 0;
        for (t, h) in hours.into_iter().enumerate() {
            for (acc, p) in per_rpp_totals.iter_mut().zip(&h.payoffs) {
                *acc += p;
            }
            per_hour_totals.push(h.payoffs.iter().sum());
            hourly.push(h.payoffs);
            clipped_commitments += h.clipped;
            if let Some(message) = h.warning {
                warnings.push(HourWarning { hour: t, message });
            }
        }
        CaseResult {
            case,
            timestamps: history
                .hours()
                .iter()
                .map(|h| h.timestamp.clone())
                .collect(),
            grand_total: per_hour_totals.iter().sum(),
            hourly,
            per_rpp_totals,
            per_hour_totals,
            warnings,
            clipped_commitments,
        }
    }
}

struct HourOutcome {
    payoffs: Vec<f64>,
    warning: Option<String>,
    clipped: usize,
}

fn clip(commitments: Vec<f64>, options: &CaseOptions) -> (Vec<f64>, usize) {
    if !options.physical {
        return (commitments, 0);
    }
    let clipped = commitments.iter().filter(|c| **c < 0.0).count();
    (
        commitments.into_iter().map(|c| c.max(0.0)).collect(),
        clipped,
    )
}

fn hour_model(error_model: &GaussianJointModel, hour: &HourRecord) -> Result<JointModel> {
    Ok(error_model.with_mean(hour.forecasts.clone())?.into())
}

fn separate_commitments(model: &JointModel, prices: &PriceSystem) -> Result<Vec<f64>> {
    (0..model.dim())
        .map(|i| optimal_separate_commitment(model, &[i], prices))
        .collect()
}

fn simulate_hour(
    case: CaseId,
    error_model: &GaussianJointModel,
    hour: &HourRecord,
    options: &CaseOptions,
) -> Result<HourOutcome> {
    let prices = hour_prices(hour)?;
    let model = hour_model(error_model, hour)?;
    let realizations = RealizationProfile::new(hour.actuals.clone())?;
    let (raw, warning) = match case {
        CaseId::Case2 => {
            let ne = ne_commitments(&model, &prices)?;
            let warning = ne.warning();
            (ne.commitments.into(), warning)
        }
        CaseId::Case3 | CaseId::Case4 => (separate_commitments(&model, &prices)?, None),
    };
    let (commitments, clipped) = clip(raw, options);
    let payoffs = match case {
        CaseId::Case2 | CaseId::Case3 => {
            let c = CommitmentProfile::new(commitments)?;
            pam_allocate(&c, &realizations, &prices)?.payoffs().to_vec()
        }
        CaseId::Case4 => commitments
            .iter()
            .zip(realizations.as_slice())
            .map(|(&c, &x)| separate_payoff(c, x, &prices))
            .collect(),
    };
    Ok(HourOutcome {
        payoffs,
        warning,
        clipped,
    })
}

fn check_roster(history: &MarketHistory, error_model: &GaussianJointModel) -> Result<()> {
    if history.n_rpps() != error_model.dim() {
        return Err(Error::Dimension {
            expected: error_model.dim(),
            found: history.n_rpps(),
        });
    }
    Ok(())
}

/// Runs one case over every hour of `history`.
pub fn run_case(
    case: CaseId,
    history: &MarketHistory,
    error_model: &GaussianJointModel,
    options: &CaseOptions,
) -> Result<CaseResult> {
    check_roster(history, error_model)?;
    let hours = history
        .hours()
        .par_iter()
        .map(|h| simulate_hour(case, error_model, h, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseResult::assemble(
        case.as_str().to_string(),
        history,
        hours,
    ))
}

/// Settlement rule supplied by the caller, e.g. a PAM that needs external
/// competitive prices.
pub trait AllocationRule: Sync {
    fn name(&self) -> &str;

    fn allocate(
        &self,
        hour: &HourRecord,
        commitments: &CommitmentProfile,
        realizations: &RealizationProfile,
        prices: &PriceSystem,
    ) -> Result<PayoffAllocation>;
}

/// Allocation `P_i = p_i* x_i + (P_N - sum_j p_j* x_j) / N` for per-producer
/// prices `p_i*` supplied by a callback.
pub struct CompetitivePriceRule<F> {
    pub name: String,
    pub prices: F,
}

impl<F> AllocationRule for CompetitivePriceRule<F>
where
    F: Fn(&HourRecord) -> Result<Vec<f64>> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn allocate(
        &self,
        hour: &HourRecord,
        commitments: &CommitmentProfile,
        realizations: &RealizationProfile,
        prices: &PriceSystem,
    ) -> Result<PayoffAllocation> {
        let p_star = (self.prices)(hour)?;
        let x = realizations.as_slice();
        if p_star.len() != x.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                found: p_star.len(),
            });
        }
        let aggregate =
            crate::market::aggregate_payoff(commitments.total(), realizations.total(), prices);
        let base: f64 = p_star.iter().zip(x).map(|(p, x)| p * x).sum();
        let share = (aggregate - base) / x.len() as f64;
        PayoffAllocation::new(
            p_star.iter().zip(x).map(|(p, x)| p * x + share).collect(),
            aggregate,
        )
    }
}

/// Runs an external allocation rule with producers at the Nash-equilibrium
/// commitments, so the aggregate commitment is the newsvendor optimum.
pub fn run_with_rule(
    rule: &dyn AllocationRule,
    history: &MarketHistory,
    error_model: &GaussianJointModel,
    options: &CaseOptions,
) -> Result<CaseResult> {
    check_roster(history, error_model)?;
    let hours = history
        .hours()
        .par_iter()
        .map(|h| {
            let prices = hour_prices(h)?;
            let model = hour_model(error_model, h)?;
            let ne = ne_commitments(&model, &prices)?;
            let warning = ne.warning();
            let (c, clipped) = clip(ne.commitments.into(), options);
            let alloc = rule.allocate(
                h,
                &CommitmentProfile::new(c)?,
                &RealizationProfile::new(h.actuals.clone())?,
                &prices,
            )?;
            Ok(HourOutcome {
                payoffs: alloc.payoffs().to_vec(),
                warning,
                clipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaseResult::assemble(
        rule.name().to_string(),
        history,
        hours,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::aggregate_payoff;

    fn record(t: &str, f: &[f64], a: &[f64], p_da: f64, p_rt: f64) -> HourRecord {
        HourRecord {
            timestamp: t.to_string(),
            instant: history::parse_timestamp(t).unwrap(),
            forecasts: f.to_vec(),
            actuals: a.to_vec(),
            p_da,
            p_rt,
        }
    }

    #[test]
    fn rt_price_rule() {
        assert_eq!(construct_rt_prices(30.0, 50.0).unwrap(), (100.0, 25.0));
        let (rb, rs) = construct_rt_prices(30.0, 10.0).unwrap();
        assert!((rb - 36.0).abs() < 1e-12 && (rs - 5.0).abs() < 1e-12);
        let (rb, rs) = construct_rt_prices(30.0, 0.0).unwrap();
        assert!((rb - 36.0).abs() < 1e-12 && rs == 0.0);
        assert!(construct_rt_prices(0.0, 10.0).is_err());
        assert!(construct_rt_prices(-1.0, 10.0).is_err());
        assert!(construct_rt_prices(30.0, -1.0).is_err());
    }

    #[test]
    fn fit_two_point_variance() {
        let h = MarketHistory::new(vec![
            record("2004-01-01T00:00:00", &[10.0], &[9.0], 30.0, 30.0),
            record("2004-01-01T01:00:00", &[10.0], &[11.0], 30.0, 30.0),
        ])
        .unwrap();
        let m = fit_error_model(&h).unwrap();
        assert_eq!(m.mean(), &[0.0]);
        assert!((m.covariance()[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_zero_errors_is_degenerate() {
        let h = MarketHistory::new(vec![
            record(
                "2004-01-01T00:00:00",
                &[10.0, 5.0],
                &[10.0, 5.0],
                30.0,
                30.0,
            ),
            record(
                "2004-01-01T01:00:00",
                &[11.0, 6.0],
                &[11.0, 6.0],
                30.0,
                30.0,
            ),
            record(
                "2004-01-01T02:00:00",
                &[12.0, 7.0],
                &[12.0, 7.0],
                30.0,
                30.0,
            ),
        ])
        .unwrap();
        let m = fit_error_model(&h).unwrap();
        assert!(m.covariance().iter().all(|v| *v == 0.0));
        assert!(m.is_degenerate());
    }

    #[test]
    fn fit_needs_enough_rows() {
        let h = MarketHistory::new(vec![record(
            "2004-01-01T00:00:00",
            &[1.0, 1.0],
            &[1.0, 1.0],
            30.0,
            30.0,
        )])
        .unwrap();
        assert!(matches!(fit_error_model(&h), Err(Error::Data { .. })));
    }

    #[test]
    fn case4_commits_marginal_quantiles() {
        let err =
            GaussianJointModel::new(vec![0.0, 0.0], vec![vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let hour = record(
            "2004-02-01T00:00:00",
            &[10.0, 20.0],
            &[8.0, 20.0],
            30.0,
            10.0,
        );
        let h = MarketHistory::new(vec![hour.clone()]).unwrap();
        let r = run_case(CaseId::Case4, &h, &err, &CaseOptions::default()).unwrap();
        let p = hour_prices(&hour).unwrap();
        let z = crate::stochastic::normal_quantile(p.fractile().unwrap());
        for (i, (mu, sd, x)) in [(10.0, 2.0, 8.0), (20.0, 3.0, 20.0)].iter().enumerate() {
            let c = mu + sd * z;
            assert!((r.per_rpp_totals[i] - separate_payoff(c, *x, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn case4_median_with_exact_forecast() {
        // p_rt = 0.8 p_da puts p_da at the midpoint of (p_rs, p_rb) = (12, 48).
        let err =
            GaussianJointModel::new(vec![0.0, 0.0], vec![vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let hour = record(
            "2004-02-01T00:00:00",
            &[10.0, 20.0],
            &[10.0, 20.0],
            30.0,
            24.0,
        );
        assert_eq!(hour_prices(&hour).unwrap().fractile().unwrap(), 0.5);
        let h = MarketHistory::new(vec![hour]).unwrap();
        let r = run_case(CaseId::Case4, &h, &err, &CaseOptions::default()).unwrap();
        assert!((r.per_rpp_totals[0] - 300.0).abs() < 1e-9);
        assert!((r.per_rpp_totals[1] - 600.0).abs() < 1e-9);
        assert_eq!(r.per_hour_totals, vec![r.grand_total]);
    }

    #[test]
    fn pam_cases_are_budget_balanced_per_hour() {
        let err =
            GaussianJointModel::new(vec![0.0, 0.0], vec![vec![4.0, 1.0], vec![1.0, 9.0]]).unwrap();
        let h = MarketHistory::new(vec![
            record(
                "2004-02-01T00:00:00",
                &[10.0, 20.0],
                &[8.0, 25.0],
                30.0,
                40.0,
            ),
            record(
                "2004-02-01T01:00:00",
                &[12.0, 18.0],
                &[11.0, 12.0],
                28.0,
                5.0,
            ),
        ])
        .unwrap();
        for case in [CaseId::Case2, CaseId::Case3] {
            let r = run_case(case, &h, &err, &CaseOptions::default()).unwrap();
            for (t, hour) in h.hours().iter().enumerate() {
                let p = hour_prices(hour).unwrap();
                let ne_or_sep = r.hourly[t].iter().sum::<f64>();
                // Recompute the commitments to get the aggregate independently.
                let model = hour_model(&err, hour).unwrap();
                let c: Vec<f64> = match case {
                    CaseId::Case2 => ne_commitments(&model, &p).unwrap().commitments.into(),
                    _ => separate_commitments(&model, &p).unwrap(),
                };
                let agg = aggregate_payoff(c.iter().sum(), hour.actuals.iter().sum(), &p);
                assert!((ne_or_sep - agg).abs() < 1e-9 * agg.abs().max(1.0));
            }
            assert!(
                (r.grand_total - r.per_rpp_totals.iter().sum::<f64>()).abs()
                    < 1e-6 * r.grand_total.abs()
            );
        }
    }

    #[test]
    fn physical_mode_clips_negative_commitments() {
        let err = GaussianJointModel::new(vec![0.0, 0.0], vec![vec![25.0, 0.0], vec![0.0, 25.0]])
            .unwrap();
        let h = MarketHistory::new(vec![record(
            "2004-02-01T00:00:00",
            &[0.5, 0.5],
            &[0.0, 1.0],
            30.0,
            40.0,
        )])
        .unwrap();
        let r = run_case(CaseId::Case4, &h, &err, &CaseOptions { physical: true }).unwrap();
        assert_eq!(r.clipped_commitments, 2);
        let raw = run_case(CaseId::Case4, &h, &err, &CaseOptions::default()).unwrap();
        assert_eq!(raw.clipped_commitments, 0);
    }

    #[test]
    fn roster_mismatch() {
        let err = GaussianJointModel::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let h = MarketHistory::new(vec![record(
            "2004-02-01T00:00:00",
            &[1.0, 1.0],
            &[1.0, 1.0],
            30.0,
            40.0,
        )])
        .unwrap();
        assert!(matches!(
            run_case(CaseId::Case2, &h, &err, &CaseOptions::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn external_rule_plugs_in() {
        let err =
            GaussianJointModel::new(vec![0.0, 0.0], vec![vec![4.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let h = MarketHistory::new(vec![record(
            "2004-02-01T00:00:00",
            &[10.0, 20.0],
            &[9.0, 22.0],
            30.0,
            20.0,
        )])
        .unwrap();
        let rule = CompetitivePriceRule {
            name: "flat".to_string(),
            prices: |h: &HourRecord| Ok(vec![h.p_da; h.forecasts.len()]),
        };
        let r = run_with_rule(&rule, &h, &err, &CaseOptions::default()).unwrap();
        assert_eq!(r.case, "flat");
        let case2 = run_case(CaseId::Case2, &h, &err, &CaseOptions::default()).unwrap();
        // Same commitments, so the same aggregate payoff.
        assert!((r.grand_total - case2.grand_total).abs() < 1e-9);
    }
}
