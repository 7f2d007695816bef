//! Aggregation of renewable power producers (RPPs) in a two-settlement
//! (day-ahead / real-time) electricity market.
//!
//! The crate covers the settlement arithmetic of the payoff allocation
//! mechanism ([`market`]), probabilistic models of joint generation
//! ([`stochastic`]), the closed-form Nash equilibrium of the commitment game
//! and its verification oracles ([`equilibrium`]), coalitional stability
//! audits and the competitive-equilibrium construction ([`coalition`]), and an
//! hour-by-hour market simulation harness ([`simharness`]).

pub mod coalition;
pub mod equilibrium;
pub mod error;
pub mod market;
pub mod montecarlo;
pub mod quadrature;
pub mod simharness;
pub mod stochastic;

pub use error::{Error, Result};
pub use market::{
    aggregate_payoff, excess_payoff, pam_allocate, separate_payoff, CommitmentProfile,
    PayoffAllocation, PriceSystem, RealizationProfile, SettlementBranch,
};
pub use stochastic::{EmpiricalJointModel, GaussianJointModel, JointModel, SamplingMode};
