//! The four subcommands: flag handling, model assembly from a case file,
//! and CSV table construction.

use std::path::PathBuf;

use clap::Args;
use rld_core::dcopf::{
    adopt_reference, solve_nda_opf, CostModel, FlowDirection, OpfError, OpfResult,
};
use rld_core::eval::{
    evaluate, nominal_policy, price_sweep, rld_ignorant_policy, rld_policy, sample_scenarios,
    three_sigma_policy, EvalError, EvaluationReport, Policy,
};
use rld_core::network::{build_flow_structure, FlowStructure, Network, NetworkError};
use rld_core::rld::{network_rld_from_nominal, RldError};
use thiserror::Error;

use crate::case::{self, CaseError, CaseFile};
use crate::output::{emit, sig6, Csv};

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Case file path
    pub case: PathBuf,
    /// Scenario-sampling seed
    #[arg(long, default_value_t = case::DEFAULT_SEED)]
    pub seed: u64,
    /// Monte Carlo scenario count per sigma
    #[arg(long, default_value_t = case::DEFAULT_SCENARIOS)]
    pub scenarios: usize,
    /// Error-scale override
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Sigma sweep as start:stop:step
    #[arg(long, value_name = "A:B:STEP")]
    pub sigma_grid: Option<String>,
    /// Replace real-time prices with this ratio times the highest
    /// day-ahead price
    #[arg(long)]
    pub beta_ratio: Option<f64>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Case {
        path: PathBuf,
        #[source]
        source: CaseError,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Rld(#[from] RldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Stable machine-readable code for the stderr error line.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "IO",
            CliError::Case { source: CaseError::Parse { .. }, .. } => "PARSE",
            CliError::Case { .. } => "VALIDATION",
            CliError::Network(_) | CliError::Opf(_) => "SOLVE",
            CliError::Rld(_) => "DISPATCH",
            CliError::Eval(_) => "EVAL",
            CliError::Usage(_) => "USAGE",
        }
    }
}

struct Model {
    case: CaseFile,
    net: Network,
    fs: FlowStructure,
    costs: CostModel,
}

fn load(args: &RunArgs) -> Result<Model, CliError> {
    let text = std::fs::read_to_string(&args.case)
        .map_err(|source| CliError::Io { path: args.case.clone(), source })?;
    let case = case::parse_case(&text)
        .map_err(|source| CliError::Case { path: args.case.clone(), source })?;
    let net = case.network()?;
    let fs = build_flow_structure(&net, 0)?;
    let costs = case.cost_model(args.beta_ratio)?;
    Ok(Model { case, net, fs, costs })
}

/// The nominal solution, adopting the case's pinned reference dispatch
/// when one is present (the LP still certifies it and prices it).
fn nominal_solution(m: &Model) -> Result<OpfResult, CliError> {
    let d = m.case.demand();
    Ok(match m.case.reference_generation() {
        Some(g) => adopt_reference(&m.net, &m.fs, &m.costs.alpha, &d, &g)?,
        None => solve_nda_opf(&m.net, &m.fs, &m.costs, &d)?,
    })
}

fn branch_label(m: &Model, e: usize) -> String {
    let b = &m.net.branches()[e];
    format!("{}-{}", b.from + 1, b.to + 1)
}

fn direction_label(dir: FlowDirection) -> &'static str {
    match dir {
        FlowDirection::Forward => "forward",
        FlowDirection::Reverse => "reverse",
    }
}

fn provenance(args: &RunArgs) -> String {
    format!(
        "seed={} scenarios={} version={}",
        args.seed,
        args.scenarios,
        env!("CARGO_PKG_VERSION")
    )
}

fn write_output(args: &RunArgs, csv: &Csv) -> Result<(), CliError> {
    emit(csv, args.out.as_deref()).map_err(|source| CliError::Io {
        path: args.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>")),
        source,
    })
}

fn parse_sigma_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("--sigma-grid expects start:stop:step, got '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut nums = [0.0f64; 3];
    for (slot, part) in nums.iter_mut().zip(&parts) {
        *slot = part.parse().map_err(|_| bad())?;
    }
    let [start, stop, step] = nums;
    if !(start.is_finite() && stop.is_finite() && step > 0.0 && stop >= start) {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 10_000 {
        return Err(CliError::Usage(format!("--sigma-grid '{spec}' has {count} points")));
    }
    Ok((0..count).map(|k| start + step * k as f64).collect())
}

fn sigma_grid_from(args: &RunArgs) -> Result<Option<Vec<f64>>, CliError> {
    match &args.sigma_grid {
        Some(spec) => {
            if args.sigma.is_some() {
                return Err(CliError::Usage(
                    "--sigma and --sigma-grid are mutually exclusive".to_string(),
                ));
            }
            Ok(Some(parse_sigma_grid(spec)?))
        }
        None => Ok(None),
    }
}

/// The benchmark policy set; the no-reserve schedule comes first so the
/// evaluator keys its fast path on the nominal pattern.
fn standard_policies() -> Vec<Policy> {
    vec![
        nominal_policy(),
        rld_policy(),
        rld_ignorant_policy(),
        three_sigma_policy(),
    ]
}

/// Nominal day-ahead dispatch: generation, flows, locational prices, and
/// the congestion set.
pub fn cmd_nda(args: &RunArgs) -> Result<(), CliError> {
    let m = load(args)?;
    let sol = nominal_solution(&m)?;
    let n = m.net.n();

    let mut rows = Vec::new();
    for i in 0..n {
        rows.push(vec!["generation".to_string(), (i + 1).to_string(), sig6(sol.generation[i])]);
    }
    for e in 0..m.net.m() {
        rows.push(vec!["flow".to_string(), branch_label(&m, e), sig6(sol.flows[e])]);
    }
    for i in 0..n {
        rows.push(vec!["lmp".to_string(), (i + 1).to_string(), sig6(sol.bus_duals[i])]);
    }
    for &(e, dir) in &sol.congested {
        rows.push(vec![
            "congested".to_string(),
            branch_label(&m, e),
            direction_label(dir).to_string(),
        ]);
    }
    rows.push(vec!["cost".to_string(), String::new(), sig6(sol.cost)]);

    let csv = Csv {
        comment: provenance(args),
        header: vec!["quantity", "id", "value"],
        rows,
    };
    write_output(args, &csv)
}

/// Analytic risk-limiting dispatch: schedule, per-bus reserve
/// perturbation, and the price of uncertainty.
pub fn cmd_rld(args: &RunArgs) -> Result<(), CliError> {
    let m = load(args)?;
    let sol = nominal_solution(&m)?;
    let forecast = m.case.forecast(args.sigma)?;
    let congested: Vec<(usize, FlowDirection)> = sol.congested.clone();
    let nominal_cost = sol.cost;
    let dispatch = network_rld_from_nominal(&m.net, &m.fs, &m.costs, &forecast, sol)?;
    let n = m.net.n();

    let mut rows = Vec::new();
    for i in 0..n {
        rows.push(vec!["g_star".to_string(), (i + 1).to_string(), sig6(dispatch.g_star[i])]);
    }
    for i in 0..n {
        rows.push(vec!["delta".to_string(), (i + 1).to_string(), sig6(dispatch.delta[i])]);
    }
    for &(e, dir) in &congested {
        rows.push(vec![
            "congested".to_string(),
            branch_label(&m, e),
            direction_label(dir).to_string(),
        ]);
    }
    rows.push(vec!["nominal_cost".to_string(), String::new(), sig6(nominal_cost)]);
    rows.push(vec![
        "price_of_uncertainty".to_string(),
        String::new(),
        sig6(dispatch.price_of_uncertainty),
    ]);
    rows.push(vec![
        "saturated".to_string(),
        String::new(),
        dispatch.saturated.to_string(),
    ]);

    let csv = Csv {
        comment: provenance(args),
        header: vec!["quantity", "id", "value"],
        rows,
    };
    write_output(args, &csv)
}

fn evaluation_rows(report: &EvaluationReport) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for row in &report.rows {
        rows.push(vec![
            sig6(row.sigma),
            "oracle".to_string(),
            sig6(row.oracle.mean),
            sig6(row.oracle.std_error),
            "0".to_string(),
            "0".to_string(),
        ]);
        for p in &row.policies {
            rows.push(vec![
                sig6(row.sigma),
                p.name.clone(),
                sig6(p.stats.mean),
                sig6(p.stats.std_error),
                sig6(p.integration_cost),
                sig6(p.integration_se),
            ]);
        }
    }
    rows
}

/// Monte Carlo cost comparison of the benchmark policies against the
/// clairvoyant oracle, at one error scale or over a sweep.
pub fn cmd_evaluate(args: &RunArgs) -> Result<(), CliError> {
    let m = load(args)?;
    let forecast = m.case.forecast(args.sigma)?;
    let policies = standard_policies();
    let report = match sigma_grid_from(args)? {
        Some(grid) => price_sweep(
            &m.net,
            &m.fs,
            &m.costs,
            &forecast,
            &policies,
            &grid,
            args.seed,
            args.scenarios,
        )?,
        None => {
            let batch = sample_scenarios(&forecast, args.seed, args.scenarios)?;
            evaluate(&m.net, &m.fs, &m.costs, &forecast, &policies, &batch)?
        }
    };

    let csv = Csv {
        comment: provenance(args),
        header: vec![
            "sigma",
            "policy",
            "mean_cost",
            "std_error",
            "integration_cost",
            "integration_se",
        ],
        rows: evaluation_rows(&report),
    };
    write_output(args, &csv)
}

/// Integration-cost sweep over sigma with through-origin fits; also
/// reports the analytic price of uncertainty when the dispatch pipeline
/// supports the case.
pub fn cmd_price(args: &RunArgs) -> Result<(), CliError> {
    if args.sigma.is_some() {
        return Err(CliError::Usage(
            "price sweeps the error scale; use --sigma-grid instead of --sigma".to_string(),
        ));
    }
    let m = load(args)?;
    let forecast = m.case.forecast(None)?;
    let policies = standard_policies();
    let grid = sigma_grid_from(args)?.unwrap_or_else(case::default_sigma_grid);
    let report = price_sweep(
        &m.net,
        &m.fs,
        &m.costs,
        &forecast,
        &policies,
        &grid,
        args.seed,
        args.scenarios,
    )?;

    let mut rows = Vec::new();
    for row in &report.rows {
        for p in &row.policies {
            rows.push(vec![
                "integration".to_string(),
                sig6(row.sigma),
                p.name.clone(),
                sig6(p.integration_cost),
                sig6(p.integration_se),
            ]);
        }
    }
    for fit in &report.fits {
        rows.push(vec![
            "fit_slope".to_string(),
            String::new(),
            fit.name.clone(),
            sig6(fit.slope),
            sig6(fit.half_width),
        ]);
        rows.push(vec![
            "fit_intercept".to_string(),
            String::new(),
            fit.name.clone(),
            sig6(fit.intercept),
            String::new(),
        ]);
        rows.push(vec![
            "fit_r2".to_string(),
            String::new(),
            fit.name.clone(),
            sig6(fit.r_squared),
            String::new(),
        ]);
    }
    match network_rld_from_nominal(&m.net, &m.fs, &m.costs, &forecast, nominal_solution(&m)?) {
        Ok(dispatch) => rows.push(vec![
            "analytic".to_string(),
            String::new(),
            "rld".to_string(),
            sig6(dispatch.price_of_uncertainty),
            String::new(),
        ]),
        Err(RldError::UnsupportedPattern(_)) => {}
        Err(e) => return Err(e.into()),
    }

    let csv = Csv {
        comment: provenance(args),
        header: vec!["record", "sigma", "policy", "value", "stderr"],
        rows,
    };
    write_output(args, &csv)
}
