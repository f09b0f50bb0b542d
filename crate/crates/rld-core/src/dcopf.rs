//! DC optimal power flow in fundamental-flow form.
//!
//! One generic LP covers every dispatch problem in the toolkit: minimize
//! prices . y over y >= 0 and fundamental flows f, subject to per-bus
//! balance y >= demand + A f (free disposal) and branch capacity
//! |R f| <= c. The nominal day-ahead problem, the real-time recourse
//! problem, and the clairvoyant benchmark are thin wrappers that choose
//! prices and demand.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lp::{self, LinearProgram, LpError, LpStatus};
use crate::network::{FlowStructure, Network, NetworkError};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("network cannot route the required power")]
    InfeasibleNetwork,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference schedule rejected: {0}")]
    ReferenceMismatch(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Day-ahead prices alpha and real-time prices beta, one of each per bus.
/// Day-ahead prices never exceed real-time prices anywhere (no arbitrage).
#[derive(Debug, Clone)]
pub struct CostModel {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

impl CostModel {
    pub fn new(alpha: DVector<f64>, beta: DVector<f64>) -> Result<Self, OpfError> {
        if alpha.len() != beta.len() {
            return Err(OpfError::InvalidInput(format!(
                "alpha has {} entries, beta has {}",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().chain(beta.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(OpfError::InvalidInput("prices must be finite and >= 0".into()));
        }
        let max_alpha = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_beta = beta.iter().cloned().fold(f64::INFINITY, f64::min);
        if max_alpha > min_beta {
            return Err(OpfError::InvalidInput(format!(
                "day-ahead price {max_alpha} exceeds real-time price {min_beta}"
            )));
        }
        Ok(CostModel { alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// Binding at +capacity (flow in the branch's from -> to direction).
    Forward,
    /// Binding at -capacity.
    Reverse,
}

/// Capacity multiplier of one branch together with the binding direction.
#[derive(Debug, Clone, Copy)]
pub struct BranchDual {
    pub mu: f64,
    pub direction: FlowDirection,
}

/// Solution of one dispatch LP.
#[derive(Debug, Clone)]
pub struct OpfResult {
    /// Costed generation y (free disposal keeps it at zero where the bus
    /// has surplus).
    pub generation: DVector<f64>,
    pub flows: DVector<f64>,
    pub fundamental_flows: DVector<f64>,
    pub cost: f64,
    /// Locational marginal prices (balance-row duals).
    pub bus_duals: DVector<f64>,
    /// Per-branch capacity dual; zero for unbounded branches.
    pub congestion_duals: Vec<BranchDual>,
    /// Branches binding at capacity with a strictly positive dual.
    pub congested: Vec<(usize, FlowDirection)>,
}

/// Positions of the capacity rows appended after the n balance rows:
/// for each capacity-limited branch, the +f row then the -f row.
fn capacity_rows(net: &Network) -> Vec<usize> {
    net.branches()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.capacity.is_some())
        .map(|(j, _)| j)
        .collect()
}

fn build_opf_lp(
    net: &Network,
    fs: &FlowStructure,
    prices: &DVector<f64>,
    demand: &DVector<f64>,
) -> Result<LinearProgram, OpfError> {
    let n = net.n();
    let k = fs.injection_map.ncols();
    if prices.len() != n || demand.len() != n {
        return Err(OpfError::InvalidInput(format!(
            "expected {n} prices and demands, got {} and {}",
            prices.len(),
            demand.len()
        )));
    }
    if prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(OpfError::InvalidInput("prices must be finite and >= 0".into()));
    }
    let capped = capacity_rows(net);
    let n_rows = n + 2 * capped.len();
    let n_vars = n + k;

    let mut lp = LinearProgram::new(n_vars);
    for i in 0..n {
        lp.objective[i] = prices[i];
        lp.bounds[i] = (Some(0.0), None);
    }

    let mut ineq = DMatrix::zeros(n_rows, n_vars);
    let mut rhs = DVector::zeros(n_rows);
    // Balance: -y_i + (A f)_i <= -d_i.
    for i in 0..n {
        ineq[(i, i)] = -1.0;
        for j in 0..k {
            ineq[(i, n + j)] = fs.injection_map[(i, j)];
        }
        rhs[i] = -demand[i];
    }
    // Capacity: +-(R f)_e <= c_e for capacity-limited branches.
    for (slot, &e) in capped.iter().enumerate() {
        let c = net.branches()[e].capacity.unwrap();
        for j in 0..k {
            let r = fs.flow_basis[(e, j)];
            ineq[(n + 2 * slot, n + j)] = r;
            ineq[(n + 2 * slot + 1, n + j)] = -r;
        }
        rhs[n + 2 * slot] = c;
        rhs[n + 2 * slot + 1] = c;
    }
    lp.ineq_matrix = ineq;
    lp.ineq_rhs = rhs;
    Ok(lp)
}

/// Minimum-cost balancing of `demand` at the given prices; the workhorse
/// behind the nominal, real-time, and clairvoyant problems.
pub fn solve_generic_opf(
    net: &Network,
    fs: &FlowStructure,
    prices: &DVector<f64>,
    demand: &DVector<f64>,
) -> Result<OpfResult, OpfError> {
    let lp_problem = build_opf_lp(net, fs, prices, demand)?;
    let sol = lp::solve_lp(&lp_problem)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(OpfError::InfeasibleNetwork),
        LpStatus::Unbounded => {
            return Err(OpfError::Lp(LpError::NumericalFailure(
                "dispatch LP unbounded despite nonnegative prices".into(),
            )))
        }
    }
    let n = net.n();
    let k = fs.injection_map.ncols();
    let generation = DVector::from_fn(n, |i, _| sol.primal[i].max(0.0));
    let fundamental_flows = DVector::from_fn(k, |j, _| sol.primal[n + j]);
    let flows = &fs.flow_basis * &fundamental_flows;
    let bus_duals = DVector::from_fn(n, |i, _| sol.dual_ineq[i]);

    let capped = capacity_rows(net);
    let mut congestion_duals =
        vec![BranchDual { mu: 0.0, direction: FlowDirection::Forward }; net.m()];
    let mut congested = Vec::new();
    for (slot, &e) in capped.iter().enumerate() {
        let mu_fwd = sol.dual_ineq[n + 2 * slot];
        let mu_rev = sol.dual_ineq[n + 2 * slot + 1];
        let (mu, direction) = if mu_fwd >= mu_rev {
            (mu_fwd, FlowDirection::Forward)
        } else {
            (mu_rev, FlowDirection::Reverse)
        };
        congestion_duals[e] = BranchDual { mu, direction };
        let c = net.branches()[e].capacity.unwrap();
        if flows[e].abs() >= c - lp::ACTIVE_TOL && mu > lp::ACTIVE_TOL {
            congested.push((e, direction));
        }
    }

    Ok(OpfResult {
        generation,
        flows,
        fundamental_flows,
        cost: sol.objective_value,
        bus_duals,
        congestion_duals,
        congested,
    })
}

/// The deterministic day-ahead problem: generic OPF at day-ahead prices
/// and the demand forecast. Its congestion set is the expected congestion
/// pattern the dispatch pipeline keys on.
pub fn solve_nda_opf(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    d_hat: &DVector<f64>,
) -> Result<OpfResult, OpfError> {
    solve_generic_opf(net, fs, &costs.alpha, d_hat)
}

/// Cost of serving the realized demand with full hindsight (day-ahead
/// prices, realized load).
pub fn oracle_cost(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    d_realized: &DVector<f64>,
) -> Result<f64, OpfError> {
    Ok(solve_generic_opf(net, fs, &costs.alpha, d_realized)?.cost)
}

/// Recourse cost of balancing `d_realized - g_dayahead` at real-time
/// prices.
pub fn rt_opf_cost(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    d_realized: &DVector<f64>,
    g_dayahead: &DVector<f64>,
) -> Result<f64, OpfError> {
    if g_dayahead.len() != net.n() {
        return Err(OpfError::InvalidInput(format!(
            "schedule has {} entries for {} buses",
            g_dayahead.len(),
            net.n()
        )));
    }
    let residual = d_realized - g_dayahead;
    Ok(solve_generic_opf(net, fs, &costs.beta, &residual)?.cost)
}

/// Validates an externally supplied optimal schedule and returns it as the
/// nominal solution, with duals taken from the LP optimum.
///
/// Uniform-price benchmarks make the nominal LP degenerate (any split of
/// total generation is optimal); published reference schedules pick one
/// point of that face. The reference is accepted when it balances, respects
/// capacities, and matches the LP optimal cost to within 1e-6 relative.
pub fn adopt_reference(
    net: &Network,
    fs: &FlowStructure,
    prices: &DVector<f64>,
    demand: &DVector<f64>,
    reference_g: &DVector<f64>,
) -> Result<OpfResult, OpfError> {
    let n = net.n();
    if reference_g.len() != n {
        return Err(OpfError::InvalidInput(format!(
            "reference schedule has {} entries for {n} buses",
            reference_g.len()
        )));
    }
    if reference_g.iter().any(|g| *g < -1e-9) {
        return Err(OpfError::ReferenceMismatch("negative generation".into()));
    }
    let injections = reference_g - demand;
    let scale = 1.0 + demand.amax().max(reference_g.amax());
    if injections.sum().abs() > 1e-6 * scale {
        return Err(OpfError::ReferenceMismatch(format!(
            "schedule does not balance demand (net {} MW)",
            injections.sum()
        )));
    }
    // Fundamental flows carrying those injections: drop one balance row
    // (they sum to zero) and solve the remaining square system.
    let k = fs.injection_map.ncols();
    let mut reduced = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for i in 0..k {
        for j in 0..k {
            reduced[(i, j)] = fs.injection_map[(i + 1, j)];
        }
        rhs[i] = injections[i + 1];
    }
    let fundamental_flows = reduced
        .lu()
        .solve(&rhs)
        .ok_or_else(|| OpfError::ReferenceMismatch("cannot route reference schedule".into()))?;
    let flows = &fs.flow_basis * &fundamental_flows;
    for (e, b) in net.branches().iter().enumerate() {
        if let Some(c) = b.capacity {
            if flows[e].abs() > c + 1e-6 {
                return Err(OpfError::ReferenceMismatch(format!(
                    "reference flow {} exceeds capacity {c} on branch {e}",
                    flows[e]
                )));
            }
        }
    }

    let solved = solve_generic_opf(net, fs, prices, demand)?;
    let ref_cost: f64 = reference_g
        .iter()
        .zip(prices.iter())
        .map(|(g, p)| g.max(0.0) * p)
        .sum();
    if (ref_cost - solved.cost).abs() > 1e-6 * (1.0 + solved.cost.abs()) {
        return Err(OpfError::ReferenceMismatch(format!(
            "reference cost {ref_cost} differs from optimal cost {}",
            solved.cost
        )));
    }

    // Keep the LP duals (valid for any primal optimum) but classify
    // congestion against the reference flows.
    let mut congested = Vec::new();
    for (e, b) in net.branches().iter().enumerate() {
        if let Some(c) = b.capacity {
            let mu = solved.congestion_duals[e].mu;
            if flows[e].abs() >= c - lp::ACTIVE_TOL && mu > lp::ACTIVE_TOL {
                congested.push((e, solved.congestion_duals[e].direction));
            }
        }
    }
    Ok(OpfResult {
        generation: reference_g.clone(),
        flows,
        fundamental_flows,
        cost: ref_cost,
        bus_duals: solved.bus_duals,
        congestion_duals: solved.congestion_duals,
        congested,
    })
}
