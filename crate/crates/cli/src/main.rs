//! `rpp-agg`: reproducible runs of the renewable aggregation mechanism.
//!
//! Exit codes: 0 success, 1 audit violation or no counterexample found,
//! 2 invalid input or configuration, 3 equilibrium existence condition fails,
//! 4 problem too large for an exhaustive audit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{AllocationKind, ModelSpec, RunConfig, Values};

#[derive(Parser)]
#[command(
    name = "rpp-agg",
    version,
    about = "Aggregation of renewable power producers in a two-settlement market"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model file: .json/.toml table ({mean, covariance} or {scenarios}), or .csv.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prices as p_f,p_rb,p_rs[,p_star].
    #[arg(long, allow_hyphen_values = true)]
    prices: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples (ex-ante audits) or sampled coalitions (--sampled).
    #[arg(long)]
    samples: Option<usize>,
    /// Output file (or directory for `simulate`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Audit a random sample of coalitions instead of all of them.
    #[arg(long)]
    sampled: bool,
    /// Clip commitments at zero in simulations.
    #[arg(long)]
    physical: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Nash-equilibrium commitments for a model and prices.
    Ne {
        #[command(flatten)]
        common: Common,
        /// Also scan each producer's best response on a deviation grid.
        #[arg(long)]
        verify: bool,
    },
    /// Conditional-mean slopes and the equilibrium existence verdict.
    CheckCondition {
        #[command(flatten)]
        common: Common,
    },
    /// Search for prices under which the candidate equilibrium fails.
    Counterexample {
        #[command(flatten)]
        common: Common,
        /// Producer index (0-based) whose deviation is tested.
        #[arg(long)]
        rpp: Option<usize>,
    },
    /// Settle one hour with the payoff allocation mechanism.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        commitments: Option<PathBuf>,
        #[arg(long)]
        realizations: Option<PathBuf>,
    },
    /// Ex-post core, collusion and competitive-equilibrium audits; ex-ante
    /// audits when only a model is given.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        commitments: Option<PathBuf>,
        #[arg(long)]
        realizations: Option<PathBuf>,
        #[arg(long, value_enum)]
        allocation: Option<AllocationKind>,
        /// Write every coalition report as CSV.
        #[arg(long)]
        coalitions_csv: Option<PathBuf>,
    },
    /// Run cases 2-4 over a market history.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        history: Option<PathBuf>,
        /// Rows used to fit the error model; the rest is the test window.
        #[arg(long)]
        train_rows: Option<usize>,
    },
    /// Write a synthetic market history CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rpps: Option<usize>,
        #[arg(long)]
        hours: Option<usize>,
        /// Pairwise correlation of forecast errors.
        #[arg(long, allow_hyphen_values = true)]
        correlation: Option<f64>,
    },
}

fn flags(common: &Common) -> anyhow::Result<RunConfig> {
    Ok(RunConfig {
        model: common.model.clone().map(ModelSpec::File),
        prices: common
            .prices
            .as_deref()
            .map(config::parse_price_flag)
            .transpose()?,
        seed: common.seed,
        samples: common.samples,
        out: common.out.clone(),
        sampled: common.sampled.then_some(true),
        physical: common.physical.then_some(true),
        ..Default::default()
    })
}

fn resolve(common: &Common, extra: RunConfig) -> anyhow::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.overlay(flags(common)?).overlay(extra);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let file = |p: &Option<PathBuf>| p.clone().map(Values::File);
    match cli.command {
        Command::Ne { common, verify } => {
            let cfg = resolve(
                &common,
                RunConfig {
                    verify: verify.then_some(true),
                    ..Default::default()
                },
            )?;
            commands::ne(&cfg)
        }
        Command::CheckCondition { common } => {
            commands::check_condition(&resolve(&common, RunConfig::default())?)
        }
        Command::Counterexample { common, rpp } => commands::counterexample(&resolve(
            &common,
            RunConfig {
                rpp,
                ..Default::default()
            },
        )?),
        Command::Allocate {
            common,
            commitments,
            realizations,
        } => commands::allocate(&resolve(
            &common,
            RunConfig {
                commitments: file(&commitments),
                realizations: file(&realizations),
                ..Default::default()
            },
        )?),
        Command::Audit {
            common,
            commitments,
            realizations,
            allocation,
            coalitions_csv,
        } => commands::audit(&resolve(
            &common,
            RunConfig {
                commitments: file(&commitments),
                realizations: file(&realizations),
                allocation,
                coalitions_csv,
                ..Default::default()
            },
        )?),
        Command::Simulate {
            common,
            history,
            train_rows,
        } => commands::simulate(&resolve(
            &common,
            RunConfig {
                history,
                train_rows,
                ..Default::default()
            },
        )?),
        Command::Generate {
            common,
            rpps,
            hours,
            correlation,
        } => commands::generate(&resolve(
            &common,
            RunConfig {
                rpps,
                hours,
                correlation,
                ..Default::default()
            },
        )?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let capacity = e.chain().any(|c| {
                matches!(
                    c.downcast_ref(),
                    Some(rpp_aggregation::Error::Capacity { .. })
                )
            });
            if capacity {
                eprintln!("hint: rerun with --sampled to audit a random sample of coalitions");
                ExitCode::from(4)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
