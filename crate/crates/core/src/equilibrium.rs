//! Equilibrium of the commitment game induced by the PAM.
//!
//! The aggregate optimum is a newsvendor quantile of total generation. The
//! only candidate pure Nash equilibrium assigns each producer its conditional
//! mean given that the total equals this quantile, and it is an equilibrium
//! for every price system iff no conditional-mean slope exceeds one. The
//! expected-payoff evaluation and best-response scan below check that claim
//! numerically without relying on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{CommitmentProfile, PriceSystem, SettlementBranch};
use crate::quadrature;
use crate::stochastic::{normal_cdf, normal_pdf, ConditionalMeanSlope, JointModel};

/// Relative scale of the quadrature tolerance: `1e-6 * (p_rb - p_rs) * sd(X_N)`.
pub const QUADRATURE_RTOL: f64 = 1e-6;

/// Lower integration bound in standard deviations below the mean of `X_N`.
pub const GAUSSIAN_TAIL_SDS: f64 = 8.0;

/// Real-time prices used when constructing counterexample price systems.
pub const COUNTEREXAMPLE_RT_BUY: f64 = 60.0;
pub const COUNTEREXAMPLE_RT_SELL: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeCondition {
    pub slopes: ConditionalMeanSlope,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub commitments: CommitmentProfile,
    /// Aggregate optimum `c_N*`.
    pub total: f64,
    pub fractile: f64,
    pub condition: NeCondition,
}

impl EquilibriumResult {
    /// Set when the slope condition fails: the profile is then only the unique
    /// candidate and may not be an equilibrium for these prices.
    pub fn warning(&self) -> Option<String> {
        (!self.condition.holds).then(|| {
            format!(
                "existence condition violated by producer(s) {:?}; commitments are the unique NE candidate",
                self.condition.slopes.violators()
            )
        })
    }
}

/// `F_N^{-1}((p_f - p_rs) / (p_rb - p_rs))`.
pub fn newsvendor_commitment(model: &JointModel, prices: &PriceSystem) -> Result<f64> {
    model.sum_quantile(prices.fractile()?)
}

pub fn check_ne_condition(model: &JointModel) -> Result<NeCondition> {
    let slopes = model.conditional_mean_slopes()?;
    let holds = slopes.condition_holds();
    Ok(NeCondition { slopes, holds })
}

/// `c_i = E[X_i | X_N = c_N*]` for every producer.
pub fn ne_commitments(model: &JointModel, prices: &PriceSystem) -> Result<EquilibriumResult> {
    let fractile = prices.fractile()?;
    let total = model.sum_quantile(fractile)?;
    let commitments = (0..model.dim())
        .map(|i| model.conditional_mean(i, total))
        .collect::<Result<Vec<_>>>()?;
    Ok(EquilibriumResult {
        commitments: CommitmentProfile::new(commitments)?,
        total,
        fractile,
        condition: check_ne_condition(model)?,
    })
}

/// Newsvendor commitment of `members` trading as one unit outside the aggregation.
pub fn optimal_separate_commitment(
    model: &JointModel,
    members: &[usize],
    prices: &PriceSystem,
) -> Result<f64> {
    model.subset_quantile(members, prices.fractile()?)
}

/// Absolute tolerance on expected payoffs computed by quadrature.
pub fn quadrature_tolerance(model: &JointModel, prices: &PriceSystem) -> f64 {
    QUADRATURE_RTOL * prices.spread().abs() * model.sum_std()
}

/// Expected PAM payoff of producer `i` committing `commitment` while the
/// others commit `others_total` in aggregate:
///
/// `p_rs mu_i + (p_f - p_rs) c_i + (p_rb - p_rs) (-c_i F_N(c_N) + int_{-inf}^{c_N} E[X_i | X_N = s] f_N(s) ds)`
///
/// Gaussian models integrate from `mu_N - 8 sd_N` by adaptive Gauss–Kronrod.
/// Empirical models take the exact scenario expectation.
pub fn expected_pam_payoff(
    model: &JointModel,
    i: usize,
    commitment: f64,
    others_total: f64,
    prices: &PriceSystem,
) -> Result<f64> {
    if i >= model.dim() {
        return Err(Error::Domain(format!(
            "producer index {i} out of range for {} producers",
            model.dim()
        )));
    }
    let c_total = commitment + others_total;
    match model {
        JointModel::Gaussian(g) => {
            let sd = g.sum_std();
            if !(sd > 0.0) {
                return Err(Error::DegenerateModel(
                    "variance of total generation is zero".into(),
                ));
            }
            let mu_n = g.sum_mean();
            let mu_i = g.mean()[i];
            let slope = g.slope(i)?;
            let lower = (mu_n - GAUSSIAN_TAIL_SDS * sd).min(c_total);
            let integrand = |s: f64| {
                let z = (s - mu_n) / sd;
                (mu_i + slope * (s - mu_n)) * normal_pdf(z) / sd
            };
            let tol = QUADRATURE_RTOL * sd;
            let partial = quadrature::integrate(
                integrand,
                lower,
                c_total,
                tol,
                quadrature::DEFAULT_MAX_INTERVALS,
            )?;
            let cdf = normal_cdf((c_total - mu_n) / sd);
            Ok(prices.rt_sell() * mu_i
                + (prices.forward() - prices.rt_sell()) * commitment
                + prices.spread() * (partial.value - commitment * cdf))
        }
        JointModel::Empirical(e) => Ok(e
            .scenarios()
            .iter()
            .zip(e.weights())
            .map(|(row, w)| {
                let branch = SettlementBranch::classify(c_total, row.iter().sum());
                w * (prices.forward() * commitment
                    + prices.settlement_price(branch) * (row[i] - commitment))
            })
            .sum()),
    }
}

/// Deviation grid centered on the equilibrium commitment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationGrid {
    pub points: usize,
    /// Half-width in MWh; `None` means four marginal standard deviations.
    pub half_width: Option<f64>,
}

impl Default for DeviationGrid {
    fn default() -> Self {
        Self {
            points: 101,
            half_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseReport {
    pub rpp: usize,
    pub ne_commitment: f64,
    pub ne_payoff: f64,
    pub best_commitment: f64,
    pub best_payoff: f64,
    /// `best_payoff - ne_payoff`; at most zero up to numerical error at an NE.
    pub improvement: f64,
    pub tolerance: f64,
}

impl BestResponseReport {
    pub fn no_profitable_deviation(&self) -> bool {
        self.improvement <= self.tolerance
    }
}

/// Scans unilateral deviations of producer `i` from the candidate equilibrium
/// with everyone else held at their equilibrium commitments.
pub fn verify_best_response(
    model: &JointModel,
    prices: &PriceSystem,
    i: usize,
    grid: &DeviationGrid,
) -> Result<BestResponseReport> {
    if grid.points < 2 {
        return Err(Error::Domain(
            "deviation grid needs at least two points".into(),
        ));
    }
    let ne = ne_commitments(model, prices)?;
    let c = ne.commitments.as_slice();
    if i >= c.len() {
        return Err(Error::Domain(format!(
            "producer index {i} out of range for {} producers",
            c.len()
        )));
    }
    let ne_commitment = c[i];
    let others: f64 = c
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, v)| v)
        .sum();
    let half_width = match grid.half_width {
        Some(w) if w > 0.0 && w.is_finite() => w,
        Some(w) => {
            return Err(Error::Domain(format!(
                "grid half-width must be positive, got {w}"
            )))
        }
        None => {
            let sd = model.marginal_std(i);
            4.0 * if sd > 0.0 { sd } else { model.sum_std() }
        }
    };
    let ne_payoff = expected_pam_payoff(model, i, ne_commitment, others, prices)?;
    let step = 2.0 * half_width / (grid.points - 1) as f64;
    let evaluated = (0..grid.points)
        .into_par_iter()
        .map(|k| {
            let ci = ne_commitment - half_width + step * k as f64;
            expected_pam_payoff(model, i, ci, others, prices).map(|v| (ci, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let (best_commitment, best_payoff) =
        evaluated
            .into_iter()
            .fold((ne_commitment, ne_payoff), |best, cand| {
                if cand.1 > best.1 {
                    cand
                } else {
                    best
                }
            });
    Ok(BestResponseReport {
        rpp: i,
        ne_commitment,
        ne_payoff,
        best_commitment,
        best_payoff,
        improvement: best_payoff - ne_payoff,
        tolerance: quadrature_tolerance(model, prices),
    })
}

/// Price system under which the candidate equilibrium admits a profitable
/// deviation, with the evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub prices: PriceSystem,
    /// Point `D_1` of the violation interval placed at the aggregate optimum.
    pub anchor: f64,
    pub fractile: f64,
    pub report: BestResponseReport,
}

/// Searches for prices that break equilibrium existence for producer `i`.
///
/// Candidate anchors `D_1` are taken inside intervals where the slope of
/// `E[X_i | X_N = alpha]` exceeds one. Each anchor fixes the fractile
/// `F_N(D_1)`, hence a price system, and the deviation scan decides whether
/// the candidate equilibrium fails. A slope above one does not make every
/// anchor work: for slopes below two the candidate stays a local maximum, and
/// the profitable deviation only appears where the density of `X_N` rises
/// fast enough across the deviation, i.e. in a tail. Among anchors whose
/// improvement exceeds a hundred times the quadrature tolerance the least
/// extreme fractile is returned, otherwise the largest verified improvement.
/// `None` means there is no violation interval or no anchor produced an
/// improvement above ten times the quadrature tolerance.
pub fn find_counterexample_prices(model: &JointModel, i: usize) -> Result<Option<Counterexample>> {
    if i >= model.dim() {
        return Err(Error::Domain(format!(
            "producer index {i} out of range for {} producers",
            model.dim()
        )));
    }
    if model.dim() == 1 {
        return Ok(None);
    }
    let anchors = violation_anchors(model, i)?;
    let mut found = Vec::new();
    for anchor in anchors {
        let fractile = model.sum_cdf(anchor)?;
        if !(fractile > 0.0 && fractile < 1.0) {
            continue;
        }
        let forward =
            COUNTEREXAMPLE_RT_SELL + fractile * (COUNTEREXAMPLE_RT_BUY - COUNTEREXAMPLE_RT_SELL);
        let prices = PriceSystem::new(forward, COUNTEREXAMPLE_RT_BUY, COUNTEREXAMPLE_RT_SELL)?;
        let report = match verify_best_response(model, &prices, i, &DeviationGrid::default()) {
            Ok(r) => r,
            Err(Error::EstimationSupport { .. }) => continue,
            Err(e) => return Err(e),
        };
        if report.improvement > 10.0 * report.tolerance {
            found.push(Counterexample {
                prices,
                anchor,
                fractile,
                report,
            });
        }
    }
    // Prefer the least extreme fractile among clear-cut violations; deep-tail
    // price systems are valid but numerically fragile.
    let tail_distance = |c: &Counterexample| c.fractile.min(1.0 - c.fractile);
    let clear_cut = found
        .iter()
        .filter(|c| c.report.improvement > 100.0 * c.report.tolerance)
        .max_by(|a, b| tail_distance(a).total_cmp(&tail_distance(b)));
    let chosen = clear_cut.or_else(|| {
        found
            .iter()
            .max_by(|a, b| a.report.improvement.total_cmp(&b.report.improvement))
    });
    Ok(chosen.cloned())
}

fn violation_anchors(model: &JointModel, i: usize) -> Result<Vec<f64>> {
    match model {
        JointModel::Gaussian(g) => {
            if g.slope(i)? <= 1.0 + crate::stochastic::SLOPE_TOLERANCE {
                return Ok(Vec::new());
            }
            // Constant slope: the whole line violates. Sweep anchors across it.
            let (mu, sd) = (g.sum_mean(), g.sum_std());
            Ok((-24..=24).map(|k| mu + sd * 0.25 * k as f64).collect())
        }
        JointModel::Empirical(e) => {
            let curve = e.slope_curve(i)?;
            let slope_at = |a: f64, d: f64| -> Result<f64> {
                Ok((e.conditional_mean(i, a + d)? - e.conditional_mean(i, a - d)?) / (2.0 * d))
            };
            let mut anchors = Vec::new();
            for (k, &(alpha, slope)) in curve.iter().enumerate() {
                if slope <= 1.0 + crate::stochastic::SLOPE_TOLERANCE {
                    continue;
                }
                anchors.push(alpha);
                // Left end of a violation run: bisect towards the previous midpoint.
                if k > 0 && curve[k - 1].1 <= 1.0 + crate::stochastic::SLOPE_TOLERANCE {
                    let (mut lo, mut hi) = (curve[k - 1].0, alpha);
                    let d = 0.25 * (hi - lo);
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        if slope_at(mid, d)? > 1.0 {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    anchors.push(hi);
                }
            }
            Ok(anchors)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{normal_quantile, EmpiricalJointModel, GaussianJointModel};

    fn gaussian(mu: &[f64], rows: &[&[f64]]) -> JointModel {
        GaussianJointModel::new(mu.to_vec(), rows.iter().map(|r| r.to_vec()).collect())
            .unwrap()
            .into()
    }

    fn prices(pf: f64) -> PriceSystem {
        PriceSystem::new(pf, 60.0, 20.0).unwrap()
    }

    /// Closed form of the Gaussian partial expectation, independent of the quadrature path:
    /// int_{-inf}^{c} (mu_i + b (s - mu_N)) f_N(s) ds = mu_i Phi(z) - b sd phi(z).
    fn closed_form_payoff(
        mu: &[f64],
        cov: &[&[f64]],
        i: usize,
        ci: f64,
        others: f64,
        p: &PriceSystem,
    ) -> f64 {
        let mu_n: f64 = mu.iter().sum();
        let var: f64 = cov.iter().map(|r| r.iter().sum::<f64>()).sum();
        let sd = var.sqrt();
        let b = cov[i].iter().sum::<f64>() / var;
        let z = (ci + others - mu_n) / sd;
        let partial = mu[i] * normal_cdf(z) - b * sd * normal_pdf(z);
        p.rt_sell() * mu[i]
            + (p.forward() - p.rt_sell()) * ci
            + p.spread() * (partial - ci * normal_cdf(z))
    }

    #[test]
    fn newsvendor_examples() {
        let m = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        assert!((newsvendor_commitment(&m, &prices(40.0)).unwrap() - 20.0).abs() < 1e-12);
        let c = newsvendor_commitment(&m, &prices(50.0)).unwrap();
        assert!((c - (20.0 + normal_quantile(0.75) * 8f64.sqrt())).abs() < 1e-12);
        assert!((c - 21.908).abs() < 1e-3);
        let e: JointModel =
            EmpiricalJointModel::new(vec![vec![10.0], vec![20.0], vec![30.0]], None)
                .unwrap()
                .into();
        assert_eq!(newsvendor_commitment(&e, &prices(40.0)).unwrap(), 20.0);
        let flat = PriceSystem::new(30.0, 30.0, 30.0).unwrap();
        assert_eq!(
            newsvendor_commitment(&m, &flat),
            Err(Error::DegeneratePrices)
        );
    }

    #[test]
    fn ne_examples() {
        let m = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        let r = ne_commitments(&m, &prices(40.0)).unwrap();
        assert!((r.commitments.as_slice()[0] - 10.0).abs() < 1e-12);
        assert!((r.commitments.as_slice()[1] - 10.0).abs() < 1e-12);
        assert!(r.condition.holds && r.warning().is_none());

        let m = gaussian(&[10.0, 20.0], &[&[4.0, 0.0], &[0.0, 9.0]]);
        let r = ne_commitments(&m, &prices(50.0)).unwrap();
        let total = 30.0 + normal_quantile(0.75) * 13f64.sqrt();
        assert!((r.total - total).abs() < 1e-12);
        let c = r.commitments.as_slice();
        assert!((c[0] - (10.0 + 4.0 / 13.0 * (total - 30.0))).abs() < 1e-12);
        assert!((c[1] - (20.0 + 9.0 / 13.0 * (total - 30.0))).abs() < 1e-12);
        assert!((c[0] - 10.748).abs() < 1e-3 && (c[1] - 21.684).abs() < 1e-3);
        assert!((c[0] + c[1] - r.total).abs() < 1e-12);
    }

    #[test]
    fn violated_condition_still_returns_candidate() {
        let m = gaussian(&[10.0, 10.0], &[&[9.0, -5.0], &[-5.0, 4.0]]);
        let r = ne_commitments(&m, &prices(40.0)).unwrap();
        assert!(!r.condition.holds);
        assert!(r.warning().unwrap().contains("[0]"));
        assert!((r.condition.slopes.slopes[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_producer_condition() {
        let m = gaussian(&[7.0], &[&[2.0]]);
        let c = check_ne_condition(&m).unwrap();
        assert!(c.holds);
        assert!((c.slopes.slopes[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let mu = [10.0, 20.0, 5.0];
        let cov: [&[f64]; 3] = [&[4.0, 1.0, 0.0], &[1.0, 9.0, -0.5], &[0.0, -0.5, 1.0]];
        let m = gaussian(&mu, &cov);
        let p = prices(47.0);
        let tol = quadrature_tolerance(&m, &p);
        for (i, ci, others) in [
            (0, 10.0, 25.0),
            (1, 14.0, 12.0),
            (2, -3.0, 40.0),
            (0, -100.0, 0.0),
        ] {
            let q = expected_pam_payoff(&m, i, ci, others, &p).unwrap();
            let exact = closed_form_payoff(&mu, &cov, i, ci, others, &p);
            assert!((q - exact).abs() <= tol, "{i} {ci}: {q} vs {exact}");
        }
    }

    #[test]
    fn payoff_unbounded_below_for_large_negative_commitment() {
        let m = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        let p = prices(40.0);
        let a = expected_pam_payoff(&m, 0, -100.0, 10.0, &p).unwrap();
        let b = expected_pam_payoff(&m, 0, -1000.0, 10.0, &p).unwrap();
        assert!(b < a);
        assert!((a - b - 20.0 * 900.0).abs() < 1e-6);
    }

    #[test]
    fn first_order_condition_at_ne() {
        let m = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        let p = prices(47.0);
        let r = ne_commitments(&m, &p).unwrap();
        let c = r.commitments.as_slice();
        let h = 1e-4 * m.sum_std();
        let f = |ci: f64| expected_pam_payoff(&m, 0, ci, c[1], &p).unwrap();
        let d = (f(c[0] + h) - f(c[0] - h)) / (2.0 * h);
        assert!(d.abs() <= 1e-4 * p.spread(), "{d}");
    }

    #[test]
    fn best_response_symmetric_model() {
        let m = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        let rep = verify_best_response(&m, &prices(40.0), 0, &DeviationGrid::default()).unwrap();
        assert!(rep.no_profitable_deviation(), "{rep:?}");
        assert!(rep.improvement <= rep.tolerance);
    }

    #[test]
    fn single_producer_best_response_is_newsvendor() {
        let m = gaussian(&[12.0], &[&[9.0]]);
        let p = prices(50.0);
        let rep = verify_best_response(&m, &p, 0, &DeviationGrid::default()).unwrap();
        let newsvendor = newsvendor_commitment(&m, &p).unwrap();
        assert!((rep.ne_commitment - newsvendor).abs() < 1e-12);
        assert_eq!(rep.best_commitment, rep.ne_commitment);
    }

    #[test]
    fn separate_commitments() {
        let m = gaussian(
            &[10.0, 20.0, 5.0],
            &[&[4.0, 0.0, 0.0], &[0.0, 9.0, 0.0], &[0.0, 0.0, 1.0]],
        );
        let c = optimal_separate_commitment(&m, &[0, 1], &prices(50.0)).unwrap();
        assert!((c - (30.0 + normal_quantile(0.75) * 13f64.sqrt())).abs() < 1e-12);
        assert!(
            (optimal_separate_commitment(&m, &[1], &prices(40.0)).unwrap() - 20.0).abs() < 1e-12
        );
        let all = optimal_separate_commitment(&m, &[0, 1, 2], &prices(45.0)).unwrap();
        assert!((all - newsvendor_commitment(&m, &prices(45.0)).unwrap()).abs() < 1e-12);
        assert!(optimal_separate_commitment(&m, &[], &prices(45.0)).is_err());
    }

    #[test]
    fn counterexample_none_cases() {
        let ok = gaussian(&[10.0, 10.0], &[&[4.0, 0.0], &[0.0, 4.0]]);
        assert!(find_counterexample_prices(&ok, 0).unwrap().is_none());
        let single = gaussian(&[10.0], &[&[4.0]]);
        assert!(find_counterexample_prices(&single, 0).unwrap().is_none());
        let bad = gaussian(&[10.0, 10.0], &[&[9.0, -5.0], &[-5.0, 4.0]]);
        // Producer 1 has slope -1/3; only producer 0 can be broken.
        assert!(find_counterexample_prices(&bad, 1).unwrap().is_none());
    }

    #[test]
    fn counterexample_for_dominant_producer() {
        let bad = gaussian(&[10.0, 10.0], &[&[9.0, -5.0], &[-5.0, 4.0]]);
        let ce = find_counterexample_prices(&bad, 0)
            .unwrap()
            .expect("violation");
        assert!(ce.report.improvement > 10.0 * ce.report.tolerance);
        assert!((ce.prices.fractile().unwrap() - ce.fractile).abs() < 1e-12);
        // At the median the candidate is still an equilibrium.
        let rep = verify_best_response(&bad, &prices(40.0), 0, &DeviationGrid::default()).unwrap();
        assert!(rep.no_profitable_deviation());
    }

    #[test]
    fn empirical_payoff_is_scenario_average() {
        let e: JointModel = EmpiricalJointModel::new(vec![vec![4.0, 6.0], vec![12.0, 8.0]], None)
            .unwrap()
            .into();
        let p = PriceSystem::with_tie(40.0, 60.0, 20.0, 50.0).unwrap();
        // c = (5, 10): scenario sums 10 (< 15, shortfall) and 20 (surplus).
        let v = expected_pam_payoff(&e, 0, 5.0, 10.0, &p).unwrap();
        let s1 = 40.0 * 5.0 + 60.0 * (4.0 - 5.0);
        let s2 = 40.0 * 5.0 + 20.0 * (12.0 - 5.0);
        assert!((v - 0.5 * (s1 + s2)).abs() < 1e-12);
    }
}
