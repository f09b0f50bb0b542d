//! Monte Carlo evaluation of dispatch policies.
//!
//! Samples correlated forecast errors with a counter-based generator,
//! evaluates day-ahead schedules against the real-time recourse market
//! under common random numbers, and estimates integration costs and the
//! empirical price of uncertainty from sweeps over the error scale.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::dcopf::{oracle_cost, rt_opf_cost, solve_nda_opf, CostModel, OpfError};
use crate::network::{FlowStructure, Network};
use crate::rld::{
    network_rld, pooled_rld, reduce_to_two_bus, Forecast, RldError, TwoBusProblem,
};

/// Fraction of infeasible scenarios tolerated before the evaluation aborts.
const INFEASIBLE_ABORT_FRACTION: f64 = 0.001;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cholesky factorization failed: {0}")]
    CholeskyFailure(String),
    #[error("{infeasible} of {total} scenarios infeasible, above the 0.1% threshold")]
    TooManyInfeasible { infeasible: usize, total: usize },
    #[error("policy '{0}' produced an invalid schedule: {1}")]
    BadSchedule(String, String),
    #[error("unsupported evaluation setup: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Rld(#[from] RldError),
}

/// A batch of standardized error samples z ~ N(0, corr); the realized
/// demand of scenario i is d_hat + sigma_e * z_i.
///
/// Each scenario is drawn from its own generator stream keyed by
/// (seed, index), so batches are reproducible bit-for-bit and independent
/// of evaluation order.
#[derive(Debug, Clone)]
pub struct ScenarioBatch {
    pub seed: u64,
    pub count: usize,
    pub z_samples: DMatrix<f64>,
}

impl ScenarioBatch {
    pub fn realized_demand(&self, forecast: &Forecast, scenario: usize) -> DVector<f64> {
        let n = forecast.n();
        DVector::from_fn(n, |j, _| {
            forecast.d_hat[j] + forecast.sigma_e * self.z_samples[(scenario, j)]
        })
    }
}

/// Draws `count` correlated error scenarios for the forecast.
pub fn sample_scenarios(
    forecast: &Forecast,
    seed: u64,
    count: usize,
) -> Result<ScenarioBatch, EvalError> {
    if count == 0 {
        return Err(EvalError::Unsupported("scenario count must be >= 1".into()));
    }
    let n = forecast.n();
    let chol = forecast
        .cholesky_factor()
        .map_err(|e| EvalError::CholeskyFailure(e.to_string()))?;
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &chol * xi;
            z.iter().cloned().collect()
        })
        .collect();
    let mut z_samples = DMatrix::zeros(count, n);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..n {
            z_samples[(i, j)] = row[j];
        }
    }
    Ok(ScenarioBatch { seed, count, z_samples })
}

/// A named day-ahead scheduling rule.
#[derive(Clone)]
pub struct Policy {
    pub name: String,
    #[allow(clippy::type_complexity)]
    pub schedule: Arc<
        dyn Fn(&Network, &FlowStructure, &CostModel, &Forecast) -> Result<DVector<f64>, EvalError>
            + Send
            + Sync,
    >,
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy").field("name", &self.name).finish()
    }
}

impl Policy {
    pub fn new<F>(name: &str, schedule: F) -> Self
    where
        F: Fn(&Network, &FlowStructure, &CostModel, &Forecast) -> Result<DVector<f64>, EvalError>
            + Send
            + Sync
            + 'static,
    {
        Policy { name: name.to_string(), schedule: Arc::new(schedule) }
    }

    /// Schedules a fixed vector regardless of the forecast.
    pub fn fixed(name: &str, g: DVector<f64>) -> Self {
        Policy::new(name, move |_, _, _, _| Ok(g.clone()))
    }
}

/// The nominal day-ahead schedule with no reserve.
pub fn nominal_policy() -> Policy {
    Policy::new("nominal", |net, fs, costs, forecast| {
        Ok(solve_nda_opf(net, fs, costs, &forecast.d_hat)?.generation)
    })
}

/// The analytic risk-limiting dispatch.
pub fn rld_policy() -> Policy {
    Policy::new("rld", |net, fs, costs, forecast| {
        Ok(network_rld(net, fs, costs, forecast)?.g_star)
    })
}

/// Risk-limiting reserve sized as if the network were uncongested; the
/// baseline that shows the value of modeling congestion.
pub fn rld_ignorant_policy() -> Policy {
    Policy::new("rld_ignorant", |net, fs, costs, forecast| {
        let nominal = solve_nda_opf(net, fs, costs, &forecast.d_hat)?;
        Ok(pooled_rld(costs, forecast, nominal)?.g_star)
    })
}

/// The 3-sigma rule's schedule: every bus contributes three standard
/// deviations of reserve, spread equally over the nominal generators.
pub fn three_sigma_schedule(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
) -> Result<DVector<f64>, EvalError> {
    let nominal = solve_nda_opf(net, fs, costs, &forecast.d_hat)?;
    let n = net.n();
    let generators: Vec<usize> = (0..n).filter(|&i| nominal.generation[i] > 1e-6).collect();
    let mut g = nominal.generation;
    if !generators.is_empty() {
        let add = 3.0 * forecast.sigma_e * n as f64 / generators.len() as f64;
        for &i in &generators {
            g[i] += add;
        }
    }
    Ok(g)
}

pub fn three_sigma_policy() -> Policy {
    Policy::new("three_sigma", three_sigma_schedule)
}

/// Mean, paired standard error, and the stage split of a cost sample.
#[derive(Debug, Clone, Default)]
pub struct CostStats {
    pub mean: f64,
    pub std_error: f64,
    pub mean_stage1: f64,
    pub mean_stage2: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyReport {
    pub name: String,
    pub stats: CostStats,
    /// Mean cost gap to the clairvoyant oracle on the same scenarios.
    pub integration_cost: f64,
    /// Standard error of the paired per-scenario gap.
    pub integration_se: f64,
    /// Scenarios where this policy's recourse problem was infeasible.
    pub infeasible: usize,
}

#[derive(Debug, Clone)]
pub struct SigmaRow {
    pub sigma: f64,
    pub oracle: CostStats,
    pub policies: Vec<PolicyReport>,
    /// Scenarios excluded for every policy to keep the comparison paired.
    pub excluded: usize,
}

/// Least-squares fit of integration cost against sigma.
#[derive(Debug, Clone)]
pub struct PolicyFit {
    pub name: String,
    /// Slope of the through-origin fit: the empirical price of uncertainty.
    pub slope: f64,
    /// 95% confidence half-width of the slope.
    pub half_width: f64,
    /// Intercept of a free-intercept fit, as a nonlinearity diagnostic.
    pub intercept: f64,
    /// 1 - SS_res / SS_tot of the through-origin fit (centered total).
    pub r_squared: f64,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub seed: u64,
    pub scenario_count: usize,
    pub sigma_grid: Vec<f64>,
    pub rows: Vec<SigmaRow>,
    /// Present when the report spans a sigma sweep.
    pub fits: Vec<PolicyFit>,
}

/// Shared recourse-cost evaluator: tries a closed-form candidate dispatch
/// first and falls back to the full linear program when the candidate
/// violates a line capacity or prices are not uniform.
struct RtContext<'a> {
    net: &'a Network,
    fs: &'a FlowStructure,
    costs: &'a CostModel,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    caps: Vec<(usize, f64)>,
    beta_uniform: Option<f64>,
    alpha_uniform: Option<f64>,
    /// Nominal generation pattern, normalized; shapes the fast-path
    /// allocation so its flows stay close to the nominal (feasible) ones.
    gen_pattern: DVector<f64>,
}

impl<'a> RtContext<'a> {
    fn new(
        net: &'a Network,
        fs: &'a FlowStructure,
        costs: &'a CostModel,
        nominal_g: &DVector<f64>,
    ) -> Self {
        let n = net.n();
        let k = n.saturating_sub(1);
        let mut reduced = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                reduced[(i, j)] = fs.injection_map[(i + 1, j)];
            }
        }
        let caps = net
            .branches()
            .iter()
            .enumerate()
            .filter_map(|(e, b)| b.capacity.map(|c| (e, c)))
            .collect();
        let uniform = |v: &DVector<f64>| {
            let first = v[0];
            v.iter().all(|&x| (x - first).abs() <= 1e-12).then_some(first)
        };
        let total: f64 = nominal_g.sum();
        let gen_pattern = if total > 1e-9 {
            nominal_g / total
        } else {
            DVector::from_element(n, 1.0 / n as f64)
        };
        RtContext {
            net,
            fs,
            costs,
            lu: reduced.lu(),
            caps,
            beta_uniform: uniform(&costs.beta),
            alpha_uniform: uniform(&costs.alpha),
            gen_pattern,
        }
    }

    /// Branch flows realizing the injection (must sum to ~0), or None if
    /// any capacity is exceeded.
    fn flows_within_caps(&self, injection: &DVector<f64>) -> Option<bool> {
        if self.caps.is_empty() {
            return Some(true);
        }
        let n = self.net.n();
        let rhs = DVector::from_fn(n - 1, |i, _| injection[i + 1]);
        let f_tilde = self.lu.solve(&rhs)?;
        let flows = &self.fs.flow_basis * f_tilde;
        Some(
            self.caps
                .iter()
                .all(|&(e, c)| flows[e].abs() <= c + 1e-9),
        )
    }

    /// Cheapest-possible balancing cost for residual demand r under a
    /// uniform price q: q * max(total, 0), valid when some allocation
    /// realizing it respects the capacities.
    fn uniform_price_candidate(&self, q: f64, residual: &DVector<f64>) -> Option<f64> {
        let n = residual.len();
        let total: f64 = residual.sum();
        let injection = if total > 0.0 {
            // Purchase the net shortage in the nominal generation pattern.
            DVector::from_fn(n, |i, _| self.gen_pattern[i] * total - residual[i])
        } else {
            // Dispose the net surplus where surplus sits.
            let surplus: f64 = residual.iter().map(|&r| (-r).max(0.0)).sum();
            if surplus <= 0.0 {
                return Some(0.0);
            }
            let scale = -total / surplus;
            DVector::from_fn(n, |i, _| -residual[i] - (-residual[i]).max(0.0) * scale)
        };
        match self.flows_within_caps(&injection) {
            Some(true) => Some(q * total.max(0.0)),
            _ => None,
        }
    }

    /// Real-time recourse cost for schedule g and realized demand d;
    /// None marks an infeasible scenario.
    fn rt_cost(&self, g: &DVector<f64>, d: &DVector<f64>) -> Result<Option<f64>, OpfError> {
        let residual = d - g;
        if let Some(q) = self.beta_uniform {
            if let Some(cost) = self.uniform_price_candidate(q, &residual) {
                return Ok(Some(cost));
            }
        }
        match rt_opf_cost(self.net, self.fs, self.costs, d, g) {
            Ok(c) => Ok(Some(c)),
            Err(OpfError::InfeasibleNetwork) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Clairvoyant single-stage cost at day-ahead prices.
    fn oracle(&self, d: &DVector<f64>) -> Result<Option<f64>, OpfError> {
        if let Some(q) = self.alpha_uniform {
            if let Some(cost) = self.uniform_price_candidate(q, d) {
                return Ok(Some(cost));
            }
        }
        match oracle_cost(self.net, self.fs, self.costs, d) {
            Ok(c) => Ok(Some(c)),
            Err(OpfError::InfeasibleNetwork) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Evaluates the policies on the batch under common random numbers and
/// reports paired cost statistics against the clairvoyant oracle.
pub fn evaluate(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    policies: &[Policy],
    batch: &ScenarioBatch,
) -> Result<EvaluationReport, EvalError> {
    let row = evaluate_row(net, fs, costs, forecast, policies, batch)?;
    Ok(EvaluationReport {
        seed: batch.seed,
        scenario_count: batch.count,
        sigma_grid: vec![forecast.sigma_e],
        rows: vec![row],
        fits: Vec::new(),
    })
}

fn evaluate_row(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    policies: &[Policy],
    batch: &ScenarioBatch,
) -> Result<SigmaRow, EvalError> {
    if policies.is_empty() {
        return Err(EvalError::Unsupported("no policies to evaluate".into()));
    }
    let n = net.n();
    if forecast.n() != n || batch.z_samples.ncols() != n {
        return Err(EvalError::Unsupported(format!(
            "dimension mismatch: network {n}, forecast {}, batch {}",
            forecast.n(),
            batch.z_samples.ncols()
        )));
    }

    let mut schedules = Vec::with_capacity(policies.len());
    for p in policies {
        let g = (p.schedule)(net, fs, costs, forecast)?;
        if g.len() != n || g.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EvalError::BadSchedule(
                p.name.clone(),
                "schedule must be a finite nonnegative n-vector".into(),
            ));
        }
        schedules.push(g);
    }
    let stage1: Vec<f64> = schedules.iter().map(|g| costs.alpha.dot(g)).collect();

    let nominal_g = schedules.first().cloned().unwrap_or_else(|| DVector::zeros(n));
    let ctx = RtContext::new(net, fs, costs, &nominal_g);

    struct Row {
        oracle: Option<f64>,
        stage2: Vec<Option<f64>>,
    }
    let rows: Vec<Row> = (0..batch.count)
        .into_par_iter()
        .map(|i| -> Result<Row, EvalError> {
            let d = batch.realized_demand(forecast, i);
            let oracle = ctx.oracle(&d)?;
            let mut stage2 = Vec::with_capacity(schedules.len());
            for g in &schedules {
                stage2.push(ctx.rt_cost(g, &d)?);
            }
            Ok(Row { oracle, stage2 })
        })
        .collect::<Result<Vec<_>, _>>()?;

    // A scenario is excluded for every policy if any recourse problem (or
    // the oracle) was infeasible, keeping all comparisons paired.
    let included: Vec<usize> = (0..batch.count)
        .filter(|&i| rows[i].oracle.is_some() && rows[i].stage2.iter().all(Option::is_some))
        .collect();
    let excluded = batch.count - included.len();
    if excluded > 0 && (excluded as f64) >= INFEASIBLE_ABORT_FRACTION * batch.count as f64 {
        return Err(EvalError::TooManyInfeasible { infeasible: excluded, total: batch.count });
    }
    if included.is_empty() {
        return Err(EvalError::TooManyInfeasible { infeasible: excluded, total: batch.count });
    }
    let count = included.len() as f64;

    let mean_se = |values: &[f64]| -> (f64, f64) {
        let mean = values.iter().sum::<f64>() / count;
        if values.len() < 2 {
            return (mean, 0.0);
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
        (mean, (var / count).sqrt())
    };

    let oracle_costs: Vec<f64> = included.iter().map(|&i| rows[i].oracle.unwrap()).collect();
    let (oracle_mean, oracle_se) = mean_se(&oracle_costs);
    let oracle = CostStats {
        mean: oracle_mean,
        std_error: oracle_se,
        mean_stage1: oracle_mean,
        mean_stage2: 0.0,
    };

    let mut reports = Vec::with_capacity(policies.len());
    for (k, p) in policies.iter().enumerate() {
        let totals: Vec<f64> = included
            .iter()
            .map(|&i| stage1[k] + rows[i].stage2[k].unwrap())
            .collect();
        let (mean, se) = mean_se(&totals);
        let gaps: Vec<f64> = totals
            .iter()
            .zip(&oracle_costs)
            .map(|(t, o)| t - o)
            .collect();
        let (gap_mean, gap_se) = mean_se(&gaps);
        let infeasible = (0..batch.count).filter(|&i| rows[i].stage2[k].is_none()).count();
        reports.push(PolicyReport {
            name: p.name.clone(),
            stats: CostStats {
                mean,
                std_error: se,
                mean_stage1: stage1[k],
                mean_stage2: mean - stage1[k],
            },
            integration_cost: gap_mean,
            integration_se: gap_se,
            infeasible,
        });
    }

    Ok(SigmaRow { sigma: forecast.sigma_e, oracle, policies: reports, excluded })
}

/// Sweeps the error scale over `sigma_grid` with common random numbers,
/// evaluating the policies at each point and fitting integration cost
/// against sigma, through the origin, per policy.
pub fn price_sweep(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast_base: &Forecast,
    policies: &[Policy],
    sigma_grid: &[f64],
    seed: u64,
    count: usize,
) -> Result<EvaluationReport, EvalError> {
    if sigma_grid.len() < 3 || sigma_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Unsupported(
            "sigma grid must be ascending with at least 3 points".into(),
        ));
    }
    let batch = sample_scenarios(forecast_base, seed, count)?;
    let mut rows = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let forecast = Forecast {
            d_hat: forecast_base.d_hat.clone(),
            sigma_e: sigma,
            corr: forecast_base.corr.clone(),
        };
        rows.push(evaluate_row(net, fs, costs, &forecast, policies, &batch)?);
    }

    let mut fits = Vec::with_capacity(policies.len());
    for (k, p) in policies.iter().enumerate() {
        let points: Vec<(f64, f64, f64)> = rows
            .iter()
            .map(|r| {
                let pr = &r.policies[k];
                (r.sigma, pr.integration_cost, pr.integration_se)
            })
            .collect();
        fits.push(fit_through_origin(&p.name, &points));
    }

    Ok(EvaluationReport {
        seed,
        scenario_count: count,
        sigma_grid: sigma_grid.to_vec(),
        rows,
        fits,
    })
}

fn fit_through_origin(name: &str, points: &[(f64, f64, f64)]) -> PolicyFit {
    let sxx: f64 = points.iter().map(|(s, _, _)| s * s).sum();
    let sxy: f64 = points.iter().map(|(s, c, _)| s * c).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let var: f64 = points.iter().map(|(s, _, e)| (s * e).powi(2)).sum::<f64>()
        / (sxx * sxx).max(f64::MIN_POSITIVE);
    let half_width = 1.96 * var.sqrt();

    let n = points.len() as f64;
    let mean_c: f64 = points.iter().map(|(_, c, _)| c).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|(_, c, _)| (c - mean_c).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|(s, c, _)| (c - slope * s).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    // Free-intercept fit as a nonlinearity diagnostic.
    let mean_s: f64 = points.iter().map(|(s, _, _)| s).sum::<f64>() / n;
    let sxx_c: f64 = points.iter().map(|(s, _, _)| (s - mean_s).powi(2)).sum();
    let sxy_c: f64 = points
        .iter()
        .map(|(s, c, _)| (s - mean_s) * (c - mean_c))
        .sum();
    let slope_free = if sxx_c > 0.0 { sxy_c / sxx_c } else { 0.0 };
    let intercept = mean_c - slope_free * mean_s;

    PolicyFit { name: name.to_string(), slope, half_width, intercept, r_squared }
}

/// Grid specification for the brute-force search: one (lo, hi) range in
/// normalized units per perturbed bus, shared step.
#[derive(Debug, Clone)]
pub struct DeltaGrid {
    pub buses: Vec<usize>,
    pub ranges: Vec<(f64, f64)>,
    pub step: f64,
}

impl DeltaGrid {
    /// Same symmetric range for every perturbed bus.
    pub fn symmetric(buses: Vec<usize>, lo: f64, hi: f64, step: f64) -> Self {
        let ranges = vec![(lo, hi); buses.len()];
        DeltaGrid { buses, ranges, step }
    }

    fn points(&self, dim: usize) -> usize {
        let (lo, hi) = self.ranges[dim];
        (((hi - lo) / self.step).round() as usize) + 1
    }

    fn value(&self, dim: usize, idx: usize) -> f64 {
        self.ranges[dim].0 + self.step * idx as f64
    }
}

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    /// Per-bus normalized perturbation of the best grid point.
    pub best_delta: DVector<f64>,
    /// Sample-average two-stage cost at that point.
    pub best_cost: f64,
    /// Advisory: the optimum sits on the grid boundary, so the grid is
    /// too coarse or too narrow.
    pub on_boundary: bool,
}

/// Exhaustive sample-average minimization of the two-stage cost over a
/// perturbation grid; the independent oracle the analytic equilibrium is
/// certified against.
///
/// When the nominal pattern has a single congested line the per-scenario
/// recourse collapses to a closed form in the side-aggregated errors,
/// making dense grids affordable; otherwise every (point, scenario) pair
/// solves a recourse LP, which only suits tiny grids.
pub fn brute_force_two_stage(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    grid: &DeltaGrid,
    batch: &ScenarioBatch,
) -> Result<BruteForceResult, EvalError> {
    let n = net.n();
    if n > 3 {
        return Err(EvalError::Unsupported(
            "brute force is limited to networks of at most 3 buses".into(),
        ));
    }
    if grid.buses.is_empty() || grid.buses.iter().any(|&b| b >= n) {
        return Err(EvalError::Unsupported("grid buses out of range".into()));
    }
    if grid.ranges.len() != grid.buses.len()
        || !(grid.step > 0.0)
        || grid.ranges.iter().any(|&(lo, hi)| hi < lo)
    {
        return Err(EvalError::Unsupported("grid ranges must be ascending".into()));
    }

    let nominal = solve_nda_opf(net, fs, costs, &forecast.d_hat)?;
    let sigma = forecast.sigma_e;

    // Side-aggregated closed form when exactly one line is congested and
    // nothing sheds at the nominal optimum; a nominal dump absorbs one
    // side's deficits for free, which the closed form does not model, so
    // shedding instances take the per-scenario linear program instead.
    let outflow = &fs.incidence * &nominal.flows;
    let shed_tol = 1e-6 * (1.0 + forecast.d_hat.amax());
    let sheds = (0..n)
        .any(|i| nominal.generation[i] - forecast.d_hat[i] - outflow[i] > shed_tol);
    let reduced: Option<(TwoBusProblem, Vec<(f64, f64)>)> = if nominal.congested.len() == 1
        && !sheds
    {
        match reduce_to_two_bus(net, fs, costs, forecast, &nominal) {
            Ok(problem) => {
                let gamma = problem.gamma.clone();
                let pairs: Vec<(f64, f64)> = (0..batch.count)
                    .map(|i| {
                        let mut z1 = 0.0;
                        let mut z2 = 0.0;
                        for j in 0..n {
                            let z = batch.z_samples[(i, j)];
                            z1 += gamma[j] * z;
                            z2 += (1.0 - gamma[j]) * z;
                        }
                        (z1, z2)
                    })
                    .collect();
                Some((problem, pairs))
            }
            Err(RldError::UnsupportedPattern(_)) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let ctx = RtContext::new(net, fs, costs, &nominal.generation);

    let dims = grid.buses.len();
    let per_dim: Vec<usize> = (0..dims).map(|d| grid.points(d)).collect();
    let total_points: usize = per_dim.iter().product();

    let mut best_cost = f64::INFINITY;
    let mut best_idx = vec![0usize; dims];
    let mut idx = vec![0usize; dims];
    for flat in 0..total_points {
        let mut rem = flat;
        for d in (0..dims).rev() {
            idx[d] = rem % per_dim[d];
            rem /= per_dim[d];
        }
        let mut delta = DVector::zeros(n);
        for (d, &bus) in grid.buses.iter().enumerate() {
            delta[bus] = grid.value(d, idx[d]);
        }
        let g = DVector::from_fn(n, |i, _| (nominal.generation[i] + sigma * delta[i]).max(0.0));
        let stage1 = costs.alpha.dot(&g);

        let mean_recourse = if let Some((problem, pairs)) = &reduced {
            // Effective perturbation after the nonnegativity clip.
            let delta_eff = if sigma > 0.0 {
                DVector::from_fn(n, |i, _| (g[i] - nominal.generation[i]) / sigma)
            } else {
                DVector::zeros(n)
            };
            let mut d1 = 0.0;
            let mut d2 = 0.0;
            for j in 0..n {
                d1 += problem.gamma[j] * delta_eff[j];
                d2 += (1.0 - problem.gamma[j]) * delta_eff[j];
            }
            let m = problem.beta1.min(problem.beta2);
            let b2 = problem.beta2;
            let mut acc = 0.0;
            for &(z1, z2) in pairs {
                acc += if z2 > d2 {
                    b2 * (z2 - d2) + m * (z1 - d1).max(0.0)
                } else {
                    m * (z1 + z2 - d1 - d2).max(0.0)
                };
            }
            sigma * acc / batch.count as f64
        } else if sigma == 0.0 {
            match ctx.rt_cost(&g, &forecast.d_hat)? {
                Some(c) => c,
                None => continue,
            }
        } else {
            let costs_i: Vec<Option<f64>> = (0..batch.count)
                .into_par_iter()
                .map(|i| {
                    let d = batch.realized_demand(forecast, i);
                    ctx.rt_cost(&g, &d)
                })
                .collect::<Result<Vec<_>, _>>()?;
            if costs_i.iter().any(Option::is_none) {
                continue;
            }
            costs_i.iter().map(|c| c.unwrap()).sum::<f64>() / batch.count as f64
        };

        let cost = stage1 + mean_recourse;
        // Improvement must clear float roundoff, so scans across an
        // exactly flat cost ridge keep the first point encountered.
        if cost < best_cost - 1e-9 * (1.0 + cost.abs()) {
            best_cost = cost;
            best_idx.copy_from_slice(&idx);
        }
    }

    if !best_cost.is_finite() {
        return Err(EvalError::Unsupported(
            "every grid point was infeasible".into(),
        ));
    }
    let mut best_delta = DVector::zeros(n);
    let mut on_boundary = false;
    for (d, &bus) in grid.buses.iter().enumerate() {
        best_delta[bus] = grid.value(d, best_idx[d]);
        if per_dim[d] > 1 && (best_idx[d] == 0 || best_idx[d] == per_dim[d] - 1) {
            on_boundary = true;
        }
    }
    Ok(BruteForceResult { best_delta, best_cost, on_boundary })
}
