use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rpp_aggregation::coalition::{
    audit_exante_no_collusion, audit_exante_stability, audit_expost_core,
    audit_expost_core_sampled, audit_expost_no_collusion_all, audit_expost_no_collusion_sampled,
    competitive_equilibrium, Coalition, CoalitionReport, CollusionAudit, CollusionCheck, CoreAudit,
    ExAnteAudit,
};
use rpp_aggregation::equilibrium::{
    check_ne_condition, find_counterexample_prices, ne_commitments, verify_best_response,
    BestResponseReport, Counterexample, DeviationGrid,
};
use rpp_aggregation::market::MONEY_RTOL;
use rpp_aggregation::simharness::report::{
    compare, write_daily_csv, write_flat_csv, write_hour_of_day_csv,
};
use rpp_aggregation::simharness::synthetic::{default_error_model, SyntheticSpec};
use rpp_aggregation::simharness::{fit_error_model, run_case, CaseId, CaseOptions, HourWarning};
use rpp_aggregation::{
    aggregate_payoff, pam_allocate, CommitmentProfile, JointModel, PayoffAllocation,
    RealizationProfile, SettlementBranch,
};
use serde::Serialize;

use crate::config::{AllocationKind, RunConfig};
use crate::output::{create, emit, Provenance};

const DEFAULT_EXANTE_SAMPLES: usize = 100_000;
const DEFAULT_SAMPLED_COALITIONS: usize = 100_000;
const DEFAULT_TOLERANCE_SDS: f64 = 3.0;

#[derive(Serialize)]
struct NeReport {
    total: f64,
    fractile: f64,
    commitments: Vec<f64>,
    slopes: Vec<f64>,
    condition_holds: bool,
    warning: Option<String>,
    best_response: Option<Vec<BestResponseReport>>,
}

pub fn ne(cfg: &RunConfig) -> Result<ExitCode> {
    let model = cfg.model()?;
    let prices = cfg.prices()?;
    let r = ne_commitments(&model, &prices)?;
    let best_response = if cfg.verify == Some(true) {
        let grid = DeviationGrid {
            points: cfg.grid_points.unwrap_or(DeviationGrid::default().points),
            half_width: None,
        };
        Some(
            (0..model.dim())
                .map(|i| verify_best_response(&model, &prices, i, &grid))
                .collect::<rpp_aggregation::Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let warning = r.warning();
    if let Some(w) = &warning {
        eprintln!("warning: {w}");
    }
    let report = NeReport {
        total: r.total,
        fractile: r.fractile,
        commitments: r.commitments.as_slice().to_vec(),
        slopes: r.condition.slopes.slopes.clone(),
        condition_holds: r.condition.holds,
        warning,
        best_response,
    };
    emit(cfg.out.as_deref(), &Provenance::new("ne", cfg)?, &report)?;
    Ok(if r.condition.holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

#[derive(Serialize)]
struct ConditionReport {
    slopes: Vec<f64>,
    max_slope: f64,
    violators: Vec<usize>,
    holds: bool,
}

pub fn check_condition(cfg: &RunConfig) -> Result<ExitCode> {
    let model = cfg.model()?;
    let c = check_ne_condition(&model)?;
    let report = ConditionReport {
        max_slope: c.slopes.max_slope(),
        violators: c.slopes.violators(),
        slopes: c.slopes.slopes,
        holds: c.holds,
    };
    emit(
        cfg.out.as_deref(),
        &Provenance::new("check-condition", cfg)?,
        &report,
    )?;
    Ok(if report.holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

#[derive(Serialize)]
struct CounterexampleReport {
    rpp: usize,
    found: bool,
    counterexample: Option<Counterexample>,
}

pub fn counterexample(cfg: &RunConfig) -> Result<ExitCode> {
    let model = cfg.model()?;
    let rpp = cfg.rpp.unwrap_or(0);
    if rpp >= model.dim() {
        bail!("rpp {rpp} out of range for {} producers", model.dim());
    }
    let found = find_counterexample_prices(&model, rpp)?;
    let report = CounterexampleReport {
        rpp,
        found: found.is_some(),
        counterexample: found,
    };
    emit(
        cfg.out.as_deref(),
        &Provenance::new("counterexample", cfg)?,
        &report,
    )?;
    Ok(if report.found {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn profiles(cfg: &RunConfig) -> Result<(CommitmentProfile, RealizationProfile)> {
    let c = cfg.commitments()?;
    let x = cfg.realizations()?;
    if c.len() != x.len() {
        bail!("{} commitments but {} realizations", c.len(), x.len());
    }
    if c.is_empty() {
        bail!("no producers given");
    }
    Ok((CommitmentProfile::new(c)?, RealizationProfile::new(x)?))
}

#[derive(Serialize)]
struct AllocationReport {
    payoffs: Vec<f64>,
    aggregate: f64,
    branch: &'static str,
    settlement_price: f64,
    budget_residual: f64,
}

pub fn allocate(cfg: &RunConfig) -> Result<ExitCode> {
    let prices = cfg.prices()?;
    let (c, x) = profiles(cfg)?;
    let alloc = pam_allocate(&c, &x, &prices)?;
    let branch = SettlementBranch::classify(c.total(), x.total());
    let report = AllocationReport {
        payoffs: alloc.payoffs().to_vec(),
        aggregate: alloc.aggregate(),
        branch: branch.as_str(),
        settlement_price: prices.settlement_price(branch),
        budget_residual: alloc.budget_residual(),
    };
    emit(
        cfg.out.as_deref(),
        &Provenance::new("allocate", cfg)?,
        &report,
    )?;
    Ok(ExitCode::SUCCESS)
}

/// Aggregate payoff split in proportion to commitments (equal shares when
/// the commitments sum to zero).
fn proportional_allocation(
    c: &CommitmentProfile,
    x: &RealizationProfile,
    prices: &rpp_aggregation::PriceSystem,
) -> Result<PayoffAllocation> {
    let aggregate = aggregate_payoff(c.total(), x.total(), prices);
    let total = c.total();
    let n = c.len() as f64;
    let payoffs = c
        .as_slice()
        .iter()
        .map(|ci| {
            if total == 0.0 {
                aggregate / n
            } else {
                aggregate * ci / total
            }
        })
        .collect();
    Ok(PayoffAllocation::new(payoffs, aggregate)?)
}

#[derive(Serialize)]
struct CeSummary {
    price: f64,
    branch: &'static str,
    redistribution: Vec<f64>,
    payoffs: Vec<f64>,
    clearing_residual: f64,
    individually_optimal: bool,
    /// Largest |CE payoff - allocated payoff|.
    max_gap_to_allocation: f64,
    matches_allocation: bool,
    passed: bool,
}

#[derive(Serialize)]
struct CoreSummary {
    coalitions_checked: usize,
    min_slack: f64,
    tolerance: f64,
    sampled: bool,
    passed: bool,
    violations: Vec<CoalitionReport>,
}

impl From<&CoreAudit> for CoreSummary {
    fn from(a: &CoreAudit) -> Self {
        Self {
            coalitions_checked: a.coalitions_checked,
            min_slack: a.min_slack,
            tolerance: a.tolerance,
            sampled: a.sampled,
            passed: a.passed,
            violations: a.violations().cloned().collect(),
        }
    }
}

#[derive(Serialize)]
struct ExPostReport {
    allocation: AllocationKind,
    payoffs: Vec<f64>,
    aggregate: f64,
    core: CoreSummary,
    collusion: CollusionAudit,
    competitive_equilibrium: CeSummary,
    passed: bool,
}

#[derive(Serialize)]
struct ExAnteReport {
    samples: usize,
    tolerance_sds: f64,
    stability: ExAnteAudit,
    stability_passed: bool,
    collusion: Vec<CollusionCheck>,
    collusion_passed: bool,
    passed: bool,
}

fn write_coalitions_csv(cfg: &RunConfig, reports: &[CoalitionReport]) -> Result<()> {
    let Some(path) = &cfg.coalitions_csv else {
        return Ok(());
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "subset",
        "allocated_total",
        "standalone_value",
        "slack",
        "stderr",
    ])?;
    for r in reports {
        w.write_record([
            r.coalition.mask().to_string(),
            r.allocated_total.to_string(),
            r.standalone_value.to_string(),
            r.slack.to_string(),
            r.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn audit(cfg: &RunConfig) -> Result<ExitCode> {
    if cfg.commitments.is_none() && cfg.realizations.is_none() && cfg.model.is_some() {
        return audit_exante(cfg);
    }
    let prices = cfg.prices()?;
    let (c, x) = profiles(cfg)?;
    let kind = cfg.allocation.unwrap_or(AllocationKind::Pam);
    let alloc = match kind {
        AllocationKind::Pam => pam_allocate(&c, &x, &prices)?,
        AllocationKind::Proportional => proportional_allocation(&c, &x, &prices)?,
    };
    let sampled = cfg.sampled == Some(true);
    let (core, collusion) = if sampled {
        let seed = cfg.seed_required("sampled audit")?;
        let samples = cfg.samples.unwrap_or(DEFAULT_SAMPLED_COALITIONS);
        let core = audit_expost_core_sampled(&alloc, &c, &x, &prices, samples, seed)?;
        let a = audit_expost_no_collusion_sampled(&c, &x, &prices, samples, seed)?;
        (core, a)
    } else {
        let core = audit_expost_core(&alloc, &c, &x, &prices)?;
        (core, audit_expost_no_collusion_all(&c, &x, &prices)?)
    };
    write_coalitions_csv(cfg, &core.reports)?;

    let ce = competitive_equilibrium(&c, &x, &prices)?;
    let gap = ce
        .payoffs
        .iter()
        .zip(alloc.payoffs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let clearing_residual = ce.clearing_residual(&x);
    let individually_optimal = ce.is_individually_optimal(&c, &prices);
    let ce_summary = CeSummary {
        price: ce.price,
        branch: ce.branch.as_str(),
        clearing_residual,
        individually_optimal,
        max_gap_to_allocation: gap,
        matches_allocation: gap <= MONEY_RTOL * alloc.scale(),
        passed: individually_optimal && clearing_residual.abs() <= 1e-9 * x.total().abs().max(1.0),
        redistribution: ce.redistribution,
        payoffs: ce.payoffs,
    };
    for v in core.violations() {
        eprintln!(
            "core violation: coalition {:?} slack {}",
            v.coalition
                .members()
                .iter()
                .map(|i| i + 1)
                .collect::<Vec<_>>(),
            v.slack
        );
    }
    let passed = core.passed && collusion.passed && ce_summary.passed;
    let report = ExPostReport {
        allocation: kind,
        payoffs: alloc.payoffs().to_vec(),
        aggregate: alloc.aggregate(),
        core: (&core).into(),
        collusion,
        competitive_equilibrium: ce_summary,
        passed,
    };
    emit(cfg.out.as_deref(), &Provenance::new("audit", cfg)?, &report)?;
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn audit_exante(cfg: &RunConfig) -> Result<ExitCode> {
    let model = cfg.model()?;
    let prices = cfg.prices()?;
    let seed = cfg.seed_required("ex-ante audit")?;
    let samples = cfg.samples.unwrap_or(DEFAULT_EXANTE_SAMPLES);
    let k = cfg.tolerance_sds.unwrap_or(DEFAULT_TOLERANCE_SDS);
    let stability = audit_exante_stability(&model, &prices, samples, seed)?;
    if let Some(w) = &stability.warning {
        eprintln!("warning: {w}");
    }
    let collusion = (1u64..(1 << model.dim()))
        .filter(|m| m.count_ones() >= 2)
        .map(|m| audit_exante_no_collusion(&model, &prices, Coalition::from_mask(m), samples, seed))
        .collect::<rpp_aggregation::Result<Vec<_>>>()?;
    write_coalitions_csv(cfg, &stability.reports)?;
    let stability_passed = stability.passes(k);
    let collusion_passed = collusion.iter().all(|c| c.passes(k));
    let report = ExAnteReport {
        samples,
        tolerance_sds: k,
        stability,
        stability_passed,
        collusion,
        collusion_passed,
        passed: stability_passed && collusion_passed,
    };
    emit(cfg.out.as_deref(), &Provenance::new("audit", cfg)?, &report)?;
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Serialize)]
struct SimulationSummary {
    train_rows: usize,
    test_rows: usize,
    error_model_source: &'static str,
    error_model_degenerate: bool,
    physical: bool,
    comparison: rpp_aggregation::simharness::report::Comparison,
    warnings: Vec<(String, Vec<HourWarning>)>,
    clipped_commitments: Vec<(String, usize)>,
}

pub fn simulate(cfg: &RunConfig) -> Result<ExitCode> {
    let history = cfg.history()?;
    let dir = cfg
        .out
        .as_ref()
        .context("simulate writes several files: --out DIR is required")?;
    let (train_rows, test, error_model, source) = match &cfg.model {
        Some(_) => match cfg.model()? {
            JointModel::Gaussian(m) => (0, history.clone(), m, "config"),
            JointModel::Empirical(_) => bail!("simulation needs a Gaussian error model"),
        },
        None => {
            let rows = cfg.train_rows.unwrap_or(history.len() / 2);
            let (train, test) = history.split_at(rows)?;
            (rows, test, fit_error_model(&train)?, "fitted")
        }
    };
    let options = CaseOptions {
        physical: cfg.physical == Some(true),
    };
    let results = CaseId::ALL
        .iter()
        .map(|&case| run_case(case, &test, &error_model, &options))
        .collect::<rpp_aggregation::Result<Vec<_>>>()?;

    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for r in &results {
        emit(
            Some(&dir.join(format!("{}.json", r.case))),
            &Provenance::new("simulate", cfg)?,
            r,
        )?;
    }
    write_flat_csv(&results, create(&dir.join("payoffs.csv"))?)?;
    write_daily_csv(&test, &results, create(&dir.join("daily.csv"))?)?;
    write_hour_of_day_csv(&test, &results, create(&dir.join("hour_of_day.csv"))?)?;
    if options.physical {
        for r in &results {
            if r.clipped_commitments > 0 {
                eprintln!(
                    "{}: {} commitments clipped at zero",
                    r.case, r.clipped_commitments
                );
            }
        }
    }
    let summary = SimulationSummary {
        train_rows,
        test_rows: test.len(),
        error_model_source: source,
        error_model_degenerate: error_model.is_degenerate(),
        physical: options.physical,
        comparison: compare(&results),
        warnings: results
            .iter()
            .filter(|r| !r.warnings.is_empty())
            .map(|r| (r.case.clone(), r.warnings.clone()))
            .collect(),
        clipped_commitments: results
            .iter()
            .map(|r| (r.case.clone(), r.clipped_commitments))
            .collect(),
    };
    emit(
        Some(&dir.join("summary.json")),
        &Provenance::new("simulate", cfg)?,
        &summary,
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn generate(cfg: &RunConfig) -> Result<ExitCode> {
    let seed = cfg.seed_required("generate")?;
    let errors = match &cfg.model {
        Some(_) => match cfg.model()? {
            JointModel::Gaussian(m) => m,
            JointModel::Empirical(_) => bail!("generation needs a Gaussian error model"),
        },
        None => default_error_model(cfg.rpps.unwrap_or(10), cfg.correlation.unwrap_or(0.3))?,
    };
    let history = SyntheticSpec::new(errors, cfg.hours.unwrap_or(720)).generate(seed)?;
    match &cfg.out {
        Some(p) => history.write_csv(create(p)?)?,
        None => history.write_csv(std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}
