//! Settlement arithmetic for a two-settlement market: payoffs of a producer
//! trading on its own, of the aggregator, and of the payoff allocation
//! mechanism (PAM) that splits the aggregator's payoff among its members.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance (MWh) under which the aggregate deviation counts as zero.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Relative tolerance for money equalities such as budget balance.
pub const MONEY_RTOL: f64 = 1e-9;

/// Day-ahead price and the two real-time imbalance prices.
///
/// Construction enforces `rt_sell <= forward <= rt_buy` and
/// `rt_sell <= tie <= rt_buy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriceSystem {
    forward: f64,
    rt_buy: f64,
    rt_sell: f64,
    tie: f64,
}

impl PriceSystem {
    /// Prices with the tie price at the midpoint of the real-time prices.
    pub fn new(forward: f64, rt_buy: f64, rt_sell: f64) -> Result<Self> {
        Self::with_tie(forward, rt_buy, rt_sell, 0.5 * (rt_buy + rt_sell))
    }

    pub fn with_tie(forward: f64, rt_buy: f64, rt_sell: f64, tie: f64) -> Result<Self> {
        for (name, v) in [
            ("p_f", forward),
            ("p_rb", rt_buy),
            ("p_rs", rt_sell),
            ("p_star", tie),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidPrices(format!("{name} is not finite")));
            }
        }
        if rt_sell > rt_buy {
            return Err(Error::InvalidPrices(format!(
                "real-time sell price {rt_sell} exceeds buy price {rt_buy}"
            )));
        }
        if forward < rt_sell || forward > rt_buy {
            return Err(Error::InvalidPrices(format!(
                "day-ahead price {forward} outside [{rt_sell}, {rt_buy}]"
            )));
        }
        if tie < rt_sell || tie > rt_buy {
            return Err(Error::InvalidPrices(format!(
                "tie price {tie} outside [{rt_sell}, {rt_buy}]"
            )));
        }
        Ok(Self {
            forward,
            rt_buy,
            rt_sell,
            tie,
        })
    }

    pub fn forward(&self) -> f64 {
        self.forward
    }

    pub fn rt_buy(&self) -> f64 {
        self.rt_buy
    }

    pub fn rt_sell(&self) -> f64 {
        self.rt_sell
    }

    pub fn tie(&self) -> f64 {
        self.tie
    }

    /// `rt_buy - rt_sell`.
    pub fn spread(&self) -> f64 {
        self.rt_buy - self.rt_sell
    }

    /// Newsvendor critical fractile `(p_f - p_rs) / (p_rb - p_rs)`.
    pub fn fractile(&self) -> Result<f64> {
        let spread = self.spread();
        if spread <= 0.0 {
            return Err(Error::DegeneratePrices);
        }
        Ok((self.forward - self.rt_sell) / spread)
    }

    /// Real-time price applied to every member's deviation under the PAM.
    pub fn settlement_price(&self, branch: SettlementBranch) -> f64 {
        match branch {
            SettlementBranch::Shortfall => self.rt_buy,
            SettlementBranch::Tie => self.tie,
            SettlementBranch::Surplus => self.rt_sell,
        }
    }
}

impl<'de> Deserialize<'de> for PriceSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            forward: f64,
            rt_buy: f64,
            rt_sell: f64,
            tie: Option<f64>,
        }
        let raw = Raw::deserialize(d)?;
        let prices = match raw.tie {
            Some(t) => PriceSystem::with_tie(raw.forward, raw.rt_buy, raw.rt_sell, t),
            None => PriceSystem::new(raw.forward, raw.rt_buy, raw.rt_sell),
        };
        prices.map_err(serde::de::Error::custom)
    }
}

/// Sign of the aggregate deviation `x_N - c_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SettlementBranch {
    Shortfall,
    Tie,
    Surplus,
}

impl SettlementBranch {
    pub fn classify(commitment_total: f64, realization_total: f64) -> Self {
        let deviation = realization_total - commitment_total;
        if deviation.abs() <= TIE_TOLERANCE {
            SettlementBranch::Tie
        } else if deviation < 0.0 {
            SettlementBranch::Shortfall
        } else {
            SettlementBranch::Surplus
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SettlementBranch::Shortfall => "shortfall",
            SettlementBranch::Tie => "tie",
            SettlementBranch::Surplus => "surplus",
        }
    }
}

/// Day-ahead commitments (MWh), one per producer. Negative entries are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CommitmentProfile(Vec<f64>);

impl CommitmentProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidProfile(format!(
                "commitment {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for CommitmentProfile {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CommitmentProfile> for Vec<f64> {
    fn from(p: CommitmentProfile) -> Self {
        p.0
    }
}

/// Delivered energy (MWh), one entry per producer.
///
/// [`RealizationProfile::new`] enforces nonnegative generation. Draws from an
/// untruncated Gaussian model can dip below zero; those go through
/// [`RealizationProfile::unchecked_sign`], which only requires finiteness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealizationProfile(Vec<f64>);

impl RealizationProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let profile = Self::unchecked_sign(values)?;
        if let Some(i) = profile.0.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidProfile(format!(
                "realization {i} is negative ({})",
                profile.0[i]
            )));
        }
        Ok(profile)
    }

    pub fn unchecked_sign(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidProfile(format!(
                "realization {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for RealizationProfile {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RealizationProfile> for Vec<f64> {
    fn from(p: RealizationProfile) -> Self {
        p.0
    }
}

/// Per-producer payoffs together with the aggregate they must sum to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffAllocation {
    payoffs: Vec<f64>,
    aggregate: f64,
}

impl PayoffAllocation {
    /// Rejects allocations that are not budget balanced within [`MONEY_RTOL`].
    pub fn new(payoffs: Vec<f64>, aggregate: f64) -> Result<Self> {
        let alloc = Self { payoffs, aggregate };
        let residual = alloc.budget_residual();
        if residual.abs() > MONEY_RTOL * alloc.scale() {
            return Err(Error::InvalidProfile(format!(
                "allocation not budget balanced: residual {residual:e}"
            )));
        }
        Ok(alloc)
    }

    pub fn payoffs(&self) -> &[f64] {
        &self.payoffs
    }

    pub fn aggregate(&self) -> f64 {
        self.aggregate
    }

    pub fn len(&self) -> usize {
        self.payoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payoffs.is_empty()
    }

    /// `sum(payoffs) - aggregate`.
    pub fn budget_residual(&self) -> f64 {
        self.payoffs.iter().sum::<f64>() - self.aggregate
    }

    /// Magnitude used to turn relative money tolerances into absolute ones.
    pub fn scale(&self) -> f64 {
        let abs_sum: f64 = self.payoffs.iter().map(|p| p.abs()).sum();
        abs_sum.max(self.aggregate.abs()).max(1.0)
    }
}

fn check_lengths(commitments: &CommitmentProfile, realizations: &RealizationProfile) -> Result<()> {
    if commitments.len() != realizations.len() {
        return Err(Error::Dimension {
            expected: commitments.len(),
            found: realizations.len(),
        });
    }
    Ok(())
}

/// Payoff of a producer settling on its own: `p_f c - p_rb (c - x)+ + p_rs (x - c)+`.
pub fn separate_payoff(commitment: f64, realization: f64, prices: &PriceSystem) -> f64 {
    let shortfall = (commitment - realization).max(0.0);
    let surplus = (realization - commitment).max(0.0);
    prices.forward * commitment - prices.rt_buy * shortfall + prices.rt_sell * surplus
}

/// Payoff of the aggregator committing `c_total` and delivering `x_total`.
pub fn aggregate_payoff(c_total: f64, x_total: f64, prices: &PriceSystem) -> f64 {
    separate_payoff(c_total, x_total, prices)
}

/// Settles every member's deviation at the real-time price selected by the
/// sign of the aggregate deviation.
pub fn pam_allocate(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<PayoffAllocation> {
    check_lengths(commitments, realizations)?;
    let c_total = commitments.total();
    let x_total = realizations.total();
    let q = prices.settlement_price(SettlementBranch::classify(c_total, x_total));
    let payoffs = commitments
        .as_slice()
        .iter()
        .zip(realizations.as_slice())
        .map(|(&c, &x)| prices.forward * c + q * (x - c))
        .collect();
    Ok(PayoffAllocation {
        payoffs,
        aggregate: aggregate_payoff(c_total, x_total, prices),
    })
}

/// PAM payoff of a single position `(c, x)` when the aggregate settles on `branch`.
///
/// Linear in `(c, x)`, so a merged player receives exactly the sum of its
/// members' payoffs.
pub fn pam_payoff_at(
    commitment: f64,
    realization: f64,
    branch: SettlementBranch,
    prices: &PriceSystem,
) -> f64 {
    prices.forward * commitment + prices.settlement_price(branch) * (realization - commitment)
}

/// Gain from pooling deviations: `(p_rb - p_rs) * min(surplus, shortfall)`
/// where surplus sums `x_i - c_i` over members with `x_i >= c_i` and shortfall
/// sums `c_i - x_i` over the rest.
pub fn excess_payoff(
    commitments: &CommitmentProfile,
    realizations: &RealizationProfile,
    prices: &PriceSystem,
) -> Result<f64> {
    check_lengths(commitments, realizations)?;
    let (surplus, shortfall) = commitments
        .as_slice()
        .iter()
        .zip(realizations.as_slice())
        .fold((0.0, 0.0), |(up, down), (&c, &x)| {
            if x - c >= 0.0 {
                (up + (x - c), down)
            } else {
                (up, down + (c - x))
            }
        });
    Ok(prices.spread() * surplus.min(shortfall))
}
