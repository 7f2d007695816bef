//! Coalitional stability of the PAM.
//!
//! Ex post, a coalition `T` that leaves with its submitted commitments is
//! worth `v(T) = aggregate_payoff(c_T, x_T)`. The same value arises from a
//! market in which members trade realized energy among themselves, and the
//! competitive equilibrium of that market reproduces the PAM payoffs. Ex ante,
//! coalitions are compared on expected payoffs at the Nash equilibrium.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{ne_commitments, optimal_separate_commitment};
use crate::error::{Error, Result};
use crate::market::{
    aggregate_payoff, pam_allocate, separate_payoff, CommitmentProfile, PayoffAllocation,
    PriceSystem, RealizationProfile, SettlementBranch, MONEY_RTOL,
};
use crate::montecarlo::{estimate_rows, Estimate};
use crate::stochastic::{JointModel, SamplingMode};

/// Largest roster audited over all `2^N - 1` coalitions.
pub const EXHAUSTIVE_AUDIT_LIMIT: usize = 24;
/// Largest roster for the ex-ante audit, which runs one Monte Carlo statistic per coalition.
pub const EXANTE_AUDIT_LIMIT: usize = 12;
/// Rosters above this size keep only violating and binding coalitions in audit reports.
pub const FULL_REPORT_LIMIT: usize = 16;

const MAX_ROSTER: usize = 64;

/// Set of producers as a bitmask over roster indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(u64);

impl Coalition {
    pub fn from_mask(mask: u64) -> Self {
        Self(mask)
    }

    pub fn from_members(members: &[usize]) -> Result<Self> {
        let mut mask = 0u64;
        for &i in members {
            if i >= MAX_ROSTER {
                return Err(Error::Capacity {
                    what: "coalition member index",
                    limit: MAX_ROSTER - 1,
                    got: i,
                });
            }
            mask |= 1 << i;
        }
        Ok(Self(mask))
    }

    pub fn grand(n: usize) -> Result<Self> {
        check_roster(n)?;
        Ok(Self(full_mask(n)))
    }

    pub fn singleton(i: usize) -> Result<Self> {
        Self::from_members(&[i])
    }

    pub fn mask(&self) -> u64 {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        i < MAX_ROSTER && self.0 & (1 << i) != 0
    }

    /// Members in ascending index order.
    pub fn members(&self) -> Vec<usize> {
        (0..MAX_ROSTER).filter(|&i| self.contains(i)).collect()
    }

    fn check_within(&self, n: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("coalition must be nonempty".into()));
        }
        if n < MAX_ROSTER && self.0 >> n != 0 {
            return Err(Error::Domain(format!(
                "coalition {:#x} names producers outside a roster of {n}",
                self.0
            )));
        }
        Ok(())
    }
}

fn full_mask(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

fn check_roster(n: usize) -> Result<()> {
    if n > MAX_ROSTER {
        return Err(Error::Capacity {
            what: "roster size for coalition analysis",
            limit: MAX_ROSTER,
            got: n,
        });
    }
    Ok(())
}

fn check_lengths(c: &CommitmentProfile, x: &RealizationProfile) -> Result<()> {
    if c.len() != x.len() {
        return Err(Error::Dimension {
            expected: c.len(),
            found: x.len(),
        });
    }
    Ok(())
}

/// Magnitude for turning the 1e-9 relative money tolerance into an absolute one.
fn money_scale(c: &CommitmentProfile, x: &RealizationProfile, prices: &PriceSystem) -> f64 {
    let price = prices
        .forward()
        .abs()
        .max(prices.rt_buy().abs())
        .max(prices.rt_sell().abs());
    let energy: f64 = c
        .as_slice()
        .iter()
        .chain(x.as_slice())
        .map(|v| v.abs())
        .sum();
    (price * energy).max(1.0)
}

/// One row of a coalition audit. `stderr` is zero for ex-post audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoalitionReport {
    pub coalition: Coalition,
    pub allocated_total: f64,
    pub standalone_value: f64,
    pub slack: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreAudit {
    /// Every coalition checked, in mask order. Above [`FULL_REPORT_LIMIT`]
    /// producers only violating coalitions and the one with the least slack
    /// are kept.
    pub reports: Vec<CoalitionReport>,
    pub coalitions_checked: usize,
    pub min_slack: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub sampled: bool,
}

impl CoreAudit {
    pub fn violations(&self) -> impl Iterator<Item = &CoalitionReport> {
        self.reports
            .iter()
            .filter(move |r| r.slack < -self.tolerance)
    }
}

/// `v(T) = aggregate_payoff(sum_T c_i, sum_T x_i)`.
pub fn coalition_value(
    subset: Coalition,
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<f64> {
    check_lengths(commitments, realizations)?;
    subset.check_within(commitments.len())?;
    let (c, x) = subset_totals(subset, commitments.as_slice(), realizations.as_slice());
    Ok(aggregate_payoff(c, x, prices))
}

fn subset_totals(subset: Coalition, c: &[f64], x: &[f64]) -> (f64, f64) {
    let mut m = subset.mask();
    let (mut ct, mut xt) = (0.0, 0.0);
    while m != 0 {
        let i = m.trailing_zeros() as usize;
        ct += c[i];
        xt += x[i];
        m &= m - 1;
    }
    (ct, xt)
}

fn report_for(
    subset: Coalition,
    payoffs: &[f64],
    c: &[f64],
    x: &[f64],
    prices: &PriceSystem,
) -> CoalitionReport {
    let mut m = subset.mask();
    let mut allocated = 0.0;
    while m != 0 {
        allocated += payoffs[m.trailing_zeros() as usize];
        m &= m - 1;
    }
    let (ct, xt) = subset_totals(subset, c, x);
    let standalone = aggregate_payoff(ct, xt, prices);
    CoalitionReport {
        coalition: subset,
        allocated_total: allocated,
        standalone_value: standalone,
        slack: allocated - standalone,
        stderr: 0.0,
    }
}

fn finish_audit(
    mut reports: Vec<CoalitionReport>,
    n: usize,
    tolerance: f64,
    sampled: bool,
) -> CoreAudit {
    let coalitions_checked = reports.len();
    let binding = reports
        .iter()
        .copied()
        .min_by(|a, b| a.slack.total_cmp(&b.slack));
    let min_slack = binding.map_or(0.0, |r| r.slack);
    if n > FULL_REPORT_LIMIT {
        reports.retain(|r| r.slack < -tolerance);
        if let Some(b) = binding {
            if b.slack >= -tolerance {
                reports.push(b);
            }
        }
    }
    CoreAudit {
        reports,
        coalitions_checked,
        min_slack,
        tolerance,
        passed: min_slack >= -tolerance,
        sampled,
    }
}

/// Checks `sum_{i in T} P_i >= v(T)` for every nonempty coalition.
pub fn audit_expost_core(
    alloc: &PayoffAllocation,
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<CoreAudit> {
    check_lengths(commitments, realizations)?;
    let n = commitments.len();
    if alloc.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: alloc.len(),
        });
    }
    if n > EXHAUSTIVE_AUDIT_LIMIT {
        return Err(Error::Capacity {
            what: "roster size for exhaustive core audit (use the sampled audit)",
            limit: EXHAUSTIVE_AUDIT_LIMIT,
            got: n,
        });
    }
    let (c, x, p) = (
        commitments.as_slice(),
        realizations.as_slice(),
        alloc.payoffs(),
    );
    let tolerance = MONEY_RTOL * money_scale(commitments, realizations, prices).max(alloc.scale());
    let masks = 1..=full_mask(n);
    if n <= FULL_REPORT_LIMIT {
        let reports: Vec<CoalitionReport> = masks
            .into_par_iter()
            .map(|m| report_for(Coalition(m), p, c, x, prices))
            .collect();
        return Ok(finish_audit(reports, n, tolerance, false));
    }
    // Too many coalitions to keep: retain violations and the binding one.
    let binding = masks
        .clone()
        .into_par_iter()
        .map(|m| report_for(Coalition(m), p, c, x, prices))
        .min_by(|a, b| {
            a.slack
                .total_cmp(&b.slack)
                .then(a.coalition.cmp(&b.coalition))
        })
        .expect("at least one coalition");
    let mut reports: Vec<CoalitionReport> = masks
        .into_par_iter()
        .map(|m| report_for(Coalition(m), p, c, x, prices))
        .filter(|r| r.slack < -tolerance)
        .collect();
    if binding.slack >= -tolerance {
        reports.push(binding);
    }
    Ok(CoreAudit {
        reports,
        coalitions_checked: full_mask(n) as usize,
        min_slack: binding.slack,
        tolerance,
        passed: binding.slack >= -tolerance,
        sampled: false,
    })
}

/// All singletons, the grand coalition and `samples` uniform random nonempty
/// coalitions, deduplicated in mask order.
pub fn sampled_coalitions(n: usize, samples: usize, seed: u64) -> Result<Vec<Coalition>> {
    check_roster(n)?;
    Ok(sampled_masks(n, samples, seed)
        .into_iter()
        .map(Coalition)
        .collect())
}

fn sampled_masks(n: usize, samples: usize, seed: u64) -> Vec<u64> {
    let full = full_mask(n);
    let mut masks: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
    masks.push(full);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    masks.extend(
        std::iter::repeat_with(|| rng.gen::<u64>() & full)
            .filter(|m| *m != 0)
            .take(samples),
    );
    masks.sort_unstable();
    masks.dedup();
    masks
}

/// Core audit over all singletons, the grand coalition and `samples` uniformly
/// drawn coalitions. For rosters too large to enumerate.
pub fn audit_expost_core_sampled(
    alloc: &PayoffAllocation,
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
    samples: usize,
    seed: u64,
) -> Result<CoreAudit> {
    check_lengths(commitments, realizations)?;
    let n = commitments.len();
    check_roster(n)?;
    if alloc.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: alloc.len(),
        });
    }
    let masks = sampled_masks(n, samples, seed);
    let (c, x, p) = (
        commitments.as_slice(),
        realizations.as_slice(),
        alloc.payoffs(),
    );
    let tolerance = MONEY_RTOL * money_scale(commitments, realizations, prices).max(alloc.scale());
    let reports = masks
        .into_par_iter()
        .map(|m| report_for(Coalition(m), p, c, x, prices))
        .collect();
    Ok(finish_audit(reports, n, tolerance, true))
}

/// PAM payoff of `subset` merged into one player (commitment `sum_T c_i`,
/// realization `sum_T x_i`) minus the sum of the members' unmerged payoffs.
pub fn audit_expost_no_collusion(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
    subset: Coalition,
) -> Result<f64> {
    check_lengths(commitments, realizations)?;
    subset.check_within(commitments.len())?;
    let original = pam_allocate(commitments, realizations, prices)?;
    let (c, x) = (commitments.as_slice(), realizations.as_slice());
    let (mut mc, mut mx): (Vec<f64>, Vec<f64>) = (0..c.len())
        .filter(|&i| !subset.contains(i))
        .map(|i| (c[i], x[i]))
        .unzip();
    let (ct, xt) = subset_totals(subset, c, x);
    mc.push(ct);
    mx.push(xt);
    let merged = pam_allocate(
        &CommitmentProfile::new(mc)?,
        &RealizationProfile::unchecked_sign(mx)?,
        prices,
    )?;
    let merged_payoff = *merged.payoffs().last().expect("merged player present");
    let members_payoff: f64 = subset
        .members()
        .iter()
        .map(|&i| original.payoffs()[i])
        .sum();
    Ok(merged_payoff - members_payoff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollusionAudit {
    pub coalitions_checked: usize,
    pub max_abs_difference: f64,
    pub worst: Coalition,
    pub tolerance: f64,
    pub passed: bool,
}

/// [`audit_expost_no_collusion`] over every nonempty coalition.
pub fn audit_expost_no_collusion_all(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<CollusionAudit> {
    check_lengths(commitments, realizations)?;
    let n = commitments.len();
    if n > EXHAUSTIVE_AUDIT_LIMIT {
        return Err(Error::Capacity {
            what: "roster size for exhaustive collusion audit",
            limit: EXHAUSTIVE_AUDIT_LIMIT,
            got: n,
        });
    }
    collusion_over(
        (1..=full_mask(n)).collect(),
        commitments,
        realizations,
        prices,
    )
}

/// Collusion audit over the coalitions of [`sampled_coalitions`].
pub fn audit_expost_no_collusion_sampled(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
    samples: usize,
    seed: u64,
) -> Result<CollusionAudit> {
    check_lengths(commitments, realizations)?;
    let n = commitments.len();
    check_roster(n)?;
    collusion_over(
        sampled_masks(n, samples, seed),
        commitments,
        realizations,
        prices,
    )
}

fn collusion_over(
    masks: Vec<u64>,
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<CollusionAudit> {
    let coalitions_checked = masks.len();
    let diffs = masks
        .into_par_iter()
        .map(|m| {
            audit_expost_no_collusion(commitments, realizations, prices, Coalition(m))
                .map(|d| (m, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let (worst, max_abs_difference) = diffs
        .into_iter()
        .map(|(m, d)| (m, d.abs()))
        .fold((1, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let tolerance = MONEY_RTOL * money_scale(commitments, realizations, prices);
    Ok(CollusionAudit {
        coalitions_checked,
        max_abs_difference,
        worst: Coalition(worst),
        tolerance,
        passed: max_abs_difference <= tolerance,
    })
}

/// Redistribution of the coalition's realized energy that attains `v(T)`.
///
/// Surplus energy of members with `x_i >= c_i` offsets the deficits of the
/// others. In a net shortfall, surplus members are held at `z_i = c_i` and
/// deficit members are topped up in ascending index order. In a net surplus,
/// deficit members are filled to `c_i` and surplus members give up energy in
/// ascending index order. Returned in ascending member order.
pub fn lemma2_redistribution(
    subset: Coalition,
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
) -> Result<Vec<f64>> {
    check_lengths(commitments, realizations)?;
    subset.check_within(commitments.len())?;
    let members = subset.members();
    let c: Vec<f64> = members.iter().map(|&i| commitments.as_slice()[i]).collect();
    let x: Vec<f64> = members
        .iter()
        .map(|&i| realizations.as_slice()[i])
        .collect();
    Ok(redistribute(&c, &x))
}

fn redistribute(c: &[f64], x: &[f64]) -> Vec<f64> {
    let surplus: f64 = c.iter().zip(x).map(|(c, x)| (x - c).max(0.0)).sum();
    let deficit: f64 = c.iter().zip(x).map(|(c, x)| (c - x).max(0.0)).sum();
    if surplus < deficit {
        let mut available = surplus;
        c.iter()
            .zip(x)
            .map(|(&ci, &xi)| {
                if xi - ci >= 0.0 {
                    ci
                } else {
                    let take = (ci - xi).min(available);
                    available -= take;
                    xi + take
                }
            })
            .collect()
    } else {
        let mut owed = deficit;
        c.iter()
            .zip(x)
            .map(|(&ci, &xi)| {
                if xi - ci < 0.0 {
                    ci
                } else {
                    let give = (xi - ci).min(owed);
                    owed -= give;
                    xi - give
                }
            })
            .collect()
    }
}

/// Competitive equilibrium of the market where producers trade realized energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompetitiveEquilibrium {
    pub price: f64,
    pub branch: SettlementBranch,
    pub redistribution: Vec<f64>,
    pub payoffs: Vec<f64>,
}

impl CompetitiveEquilibrium {
    /// `sum z - sum x`.
    pub fn clearing_residual(&self, realizations: &RealizationProfile) -> f64 {
        self.redistribution.iter().sum::<f64>() - realizations.total()
    }

    /// Checks that each `z_i` maximizes `f_i(z) - p (z - x_i)`.
    ///
    /// The objective is concave and piecewise linear with slope `p_rb - p`
    /// below `c_i` and `p_rs - p` above, so `z_i < c_i` needs `p = p_rb`,
    /// `z_i > c_i` needs `p = p_rs`, and `z_i = c_i` is always optimal.
    pub fn is_individually_optimal(
        &self,
        commitments: &CommitmentProfile,
        prices: &PriceSystem,
    ) -> bool {
        let ptol = MONEY_RTOL * prices.rt_buy().abs().max(prices.rt_sell().abs()).max(1.0);
        let in_range =
            self.price >= prices.rt_sell() - ptol && self.price <= prices.rt_buy() + ptol;
        in_range
            && commitments
                .as_slice()
                .iter()
                .zip(&self.redistribution)
                .all(|(&c, &z)| {
                    let ztol = 1e-9 * c.abs().max(1.0);
                    if z < c - ztol {
                        (self.price - prices.rt_buy()).abs() <= ptol
                    } else if z > c + ztol {
                        (self.price - prices.rt_sell()).abs() <= ptol
                    } else {
                        true
                    }
                })
    }
}

/// Price and redistribution clearing the energy-trading market. The price is
/// `p_rb` in a net shortfall, `p_rs` in a net surplus and the tie price
/// otherwise; competitive payoffs `f_i(z_i) - p (z_i - x_i)` with
/// `f_i(z) = separate_payoff(c_i, z)`.
pub fn competitive_equilibrium(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<CompetitiveEquilibrium> {
    check_lengths(commitments, realizations)?;
    let (c, x) = (commitments.as_slice(), realizations.as_slice());
    let branch = SettlementBranch::classify(commitments.total(), realizations.total());
    let price = prices.settlement_price(branch);
    // In a tie this yields z = c up to the sub-tolerance residual, which it
    // absorbs so the market still clears.
    let redistribution = redistribute(c, x);
    let payoffs = c
        .iter()
        .zip(x)
        .zip(&redistribution)
        .map(|((&ci, &xi), &zi)| separate_payoff(ci, zi, prices) - price * (zi - xi))
        .collect();
    Ok(CompetitiveEquilibrium {
        price,
        branch,
        redistribution,
        payoffs,
    })
}

// ---------------------------------------------------------------------------
// Ex-ante audits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExAnteAudit {
    /// One report per nonempty coalition in mask order; `stderr` is the
    /// standard error of the slack.
    pub reports: Vec<CoalitionReport>,
    pub samples: usize,
    pub condition_holds: bool,
    pub warning: Option<String>,
}

impl ExAnteAudit {
    /// True when every slack is at least `-k` standard errors.
    pub fn passes(&self, k: f64) -> bool {
        self.reports
            .iter()
            .all(|r| r.slack >= -k * r.stderr - 1e-9 * r.standalone_value.abs().max(1.0))
    }
}

/// Compares, for every coalition `T`, the members' expected PAM payoffs at the
/// Nash equilibrium with the best expected payoff `T` could get trading alone
/// at its own newsvendor commitment. Both sides use the same draws.
pub fn audit_exante_stability(
    model: &JointModel,
    prices: &PriceSystem,
    samples: usize,
    seed: u64,
) -> Result<ExAnteAudit> {
    let n = model.dim();
    if n > EXANTE_AUDIT_LIMIT {
        return Err(Error::Capacity {
            what: "roster size for ex-ante coalition audit",
            limit: EXANTE_AUDIT_LIMIT,
            got: n,
        });
    }
    if samples == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let ne = ne_commitments(model, prices)?;
    let m = full_mask(n) as usize;
    let standalone_commitment = (1..=m)
        .map(|mask| optimal_separate_commitment(model, &Coalition(mask as u64).members(), prices))
        .collect::<Result<Vec<_>>>()?;
    let rows = model.sample_rows(samples, seed, SamplingMode::Analysis);
    let c = ne.commitments.as_slice();
    let c_total = ne.commitments.total();
    let estimates = estimate_rows(&rows, n, 3 * m, |x, out| {
        let q = prices.settlement_price(SettlementBranch::classify(c_total, x.iter().sum()));
        let mut alloc = vec![0.0; m + 1];
        let mut xsum = vec![0.0; m + 1];
        for mask in 1..=m {
            let low = mask.trailing_zeros() as usize;
            let rest = mask & (mask - 1);
            alloc[mask] = alloc[rest] + prices.forward() * c[low] + q * (x[low] - c[low]);
            xsum[mask] = xsum[rest] + x[low];
            let standalone = separate_payoff(standalone_commitment[mask - 1], xsum[mask], prices);
            out[3 * (mask - 1)] = alloc[mask];
            out[3 * (mask - 1) + 1] = standalone;
            out[3 * (mask - 1) + 2] = alloc[mask] - standalone;
        }
    });
    let reports = (1..=m)
        .map(|mask| {
            let e = &estimates[3 * (mask - 1)..3 * mask];
            CoalitionReport {
                coalition: Coalition(mask as u64),
                allocated_total: e[0].mean,
                standalone_value: e[1].mean,
                slack: e[2].mean,
                stderr: e[2].stderr,
            }
        })
        .collect();
    Ok(ExAnteAudit {
        reports,
        samples,
        condition_holds: ne.condition.holds,
        warning: ne.warning(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollusionCheck {
    pub coalition: Coalition,
    /// Equilibrium commitment of the merged player in the merged game.
    pub merged_commitment: f64,
    /// Sum of the members' equilibrium commitments in the original game.
    pub members_commitment: f64,
    /// Whether producers outside the coalition keep their commitments.
    pub others_unchanged: bool,
    /// Merged player's expected payoff minus the members' original expected payoffs.
    pub difference: Estimate,
}

impl CollusionCheck {
    /// Commitment identity within 1e-9 relative and payoff difference within
    /// `k` standard errors of zero.
    pub fn passes(&self, k: f64) -> bool {
        let scale = self.members_commitment.abs().max(1.0);
        (self.merged_commitment - self.members_commitment).abs() <= 1e-9 * scale
            && self.others_unchanged
            && self
                .difference
                .within(0.0, k, 1e-9 * self.difference.mean.abs().max(1.0))
    }
}

/// Solves the game in which `subset` joins as one player and compares it with
/// the original equilibrium.
pub fn audit_exante_no_collusion(
    model: &JointModel,
    prices: &PriceSystem,
    subset: Coalition,
    samples: usize,
    seed: u64,
) -> Result<CollusionCheck> {
    let n = model.dim();
    check_roster(n)?;
    subset.check_within(n)?;
    if samples == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let members = subset.members();
    let original = ne_commitments(model, prices)?;
    let (merged_model, map) = model.merge(&members)?;
    let merged = ne_commitments(&merged_model, prices)?;
    let c = original.commitments.as_slice();
    let mc = merged.commitments.as_slice();
    let merged_commitment = *mc.last().expect("merged player present");
    let members_commitment: f64 = members.iter().map(|&i| c[i]).sum();
    let ctol = 1e-9 * c.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let others_unchanged = map
        .iter()
        .enumerate()
        .filter_map(|(i, new)| new.map(|j| (i, j)))
        .all(|(i, j)| (mc[j] - c[i]).abs() <= ctol);

    let rows = model.sample_rows(samples, seed, SamplingMode::Analysis);
    let c_total = original.commitments.total();
    let merged_total = merged.commitments.total();
    let difference = estimate_rows(&rows, n, 1, |x, out| {
        let x_total: f64 = x.iter().sum();
        let x_t: f64 = members.iter().map(|&i| x[i]).sum();
        let q_merged = prices.settlement_price(SettlementBranch::classify(merged_total, x_total));
        let merged_payoff =
            prices.forward() * merged_commitment + q_merged * (x_t - merged_commitment);
        let q = prices.settlement_price(SettlementBranch::classify(c_total, x_total));
        let members_payoff: f64 = members
            .iter()
            .map(|&i| prices.forward() * c[i] + q * (x[i] - c[i]))
            .sum();
        out[0] = merged_payoff - members_payoff;
    })[0];
    Ok(CollusionCheck {
        coalition: subset,
        merged_commitment,
        members_commitment,
        others_unchanged,
        difference,
    })
}
