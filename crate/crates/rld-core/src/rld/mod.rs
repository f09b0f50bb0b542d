//! Analytic risk-limiting dispatch.
//!
//! Builds on the nominal OPF: classifies the expected congestion pattern,
//! reduces a single-congestion network to an equivalent two-bus problem
//! with correlated aggregated errors, solves the two-bus reserve
//! equilibrium in closed form up to a 2-D root find, and maps the result
//! back to per-bus reserve perturbations together with the price of
//! uncertainty (marginal integration cost per MW of error scale).

pub mod gauss;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::dcopf::{solve_nda_opf, CostModel, FlowDirection, OpfError, OpfResult};
use crate::network::{build_flow_structure_with_leading_branch, FlowStructure, Network};

pub use gauss::{bivariate_orthant, phi, pos_part_mean, pos_part_mean_given_tail, q_fn, q_inv};

/// Normalized reserve perturbations are clamped to this many standard
/// deviations; beyond it every tail probability involved underflows.
pub const DELTA_CLAMP: f64 = 8.0;

const RESIDUAL_TOL: f64 = 1e-7;
const NEWTON_TOL: f64 = 1e-9;
const MAX_NEWTON_ITER: usize = 100;
/// Coordinates this deep in opposite tails signal the degenerate ridge of
/// equal effective prices, where the 2-D system loses rank.
const RIDGE_DEPTH: f64 = 5.5;
/// Effective prices closer than this count as tied; the same tolerance
/// bounds how far the upstream price may exceed the downstream one.
const PRICE_TIE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RldError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("equilibrium solver did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("aggregated error covariance is degenerate")]
    DegenerateCovariance,
    #[error("gamma-weight system is singular; network violates the single-congestion premise")]
    SingularSystem,
    #[error("unsupported congestion pattern: {0}")]
    UnsupportedPattern(String),
    #[error("more than one congested line")]
    MultipleCongestion,
    #[error(transparent)]
    Opf(#[from] OpfError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
}

/// Net-demand forecast: mean d_hat, error scale sigma_e, and the error
/// correlation/shape matrix, so the error covariance is
/// sigma_e^2 * corr.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub d_hat: DVector<f64>,
    pub sigma_e: f64,
    pub corr: DMatrix<f64>,
}

impl Forecast {
    pub fn new(d_hat: DVector<f64>, sigma_e: f64, corr: DMatrix<f64>) -> Result<Self, RldError> {
        let n = d_hat.len();
        if corr.nrows() != n || corr.ncols() != n {
            return Err(RldError::Domain(format!(
                "correlation matrix is {}x{} for {n} buses",
                corr.nrows(),
                corr.ncols()
            )));
        }
        if !(sigma_e >= 0.0) || !sigma_e.is_finite() {
            return Err(RldError::Domain(format!("sigma_e must be >= 0, got {sigma_e}")));
        }
        for i in 0..n {
            for j in 0..i {
                if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-9 {
                    return Err(RldError::Domain("correlation matrix not symmetric".into()));
                }
            }
        }
        let f = Forecast { d_hat, sigma_e, corr };
        f.cholesky_factor()?;
        Ok(f)
    }

    pub fn n(&self) -> usize {
        self.d_hat.len()
    }

    /// Lower-triangular factor L with L L' = corr, allowing a diagonal
    /// jitter up to 1e-10 for semidefinite matrices.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>, RldError> {
        let mut jitter = 0.0;
        loop {
            let mut m = self.corr.clone();
            if jitter > 0.0 {
                for i in 0..m.nrows() {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(chol) = m.cholesky() {
                return Ok(chol.l());
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
            if jitter > 1e-10 {
                return Err(RldError::Domain(
                    "correlation matrix is not positive semidefinite".into(),
                ));
            }
        }
    }
}

/// Optimal single-bus day-ahead purchase: max(0, d_hat + sigma_e *
/// q_inv(alpha / beta)).
pub fn single_bus_rld(alpha: f64, beta: f64, d_hat: f64, sigma_e: f64) -> Result<f64, RldError> {
    check_price_pair(alpha, beta)?;
    Ok((d_hat + sigma_e * q_inv(alpha / beta)?).max(0.0))
}

/// Marginal integration cost per MW of error scale at a single bus:
/// beta * phi(q_inv(alpha / beta)).
pub fn price_of_uncertainty_single(alpha: f64, beta: f64) -> Result<f64, RldError> {
    check_price_pair(alpha, beta)?;
    Ok(beta * phi(q_inv(alpha / beta)?))
}

fn check_price_pair(alpha: f64, beta: f64) -> Result<(), RldError> {
    if !(alpha > 0.0) || !(alpha < beta) {
        return Err(RldError::Domain(format!(
            "prices must satisfy 0 < alpha < beta, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

/// Forecast-plane regions of the two-bus network, oriented so bus 1 is the
/// cheaper day-ahead bus.
///
/// `E`: line congested cheap -> expensive with both buses generating.
/// `A`/`C`: one bus has structural surplus of at least the line capacity
/// and exports at capacity, leaving a single-bus problem on the other
/// side. `B`/`D`: the line does not bind and the buses merge into one
/// (with and without net positive total demand).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoBusRegion {
    A,
    B,
    C,
    D,
    E,
}

#[derive(Debug, Clone, Copy)]
pub struct RegionClassification {
    pub region: TwoBusRegion,
    /// Set when the forecast lies within 1e-6 * sigma_e of a region
    /// boundary; the small-error premise is strained there.
    pub boundary_case: bool,
}

/// Classifies the two-bus forecast plane by deterministic comparisons.
pub fn classify_two_bus_region(
    d_hat: [f64; 2],
    capacity: f64,
    costs: &CostModel,
    sigma_e: f64,
) -> Result<RegionClassification, RldError> {
    if costs.alpha.len() != 2 {
        return Err(RldError::Domain(format!(
            "two-bus classification got {} buses",
            costs.alpha.len()
        )));
    }
    if !(capacity >= 0.0) || !(sigma_e > 0.0) {
        return Err(RldError::Domain("capacity must be >= 0 and sigma_e > 0".into()));
    }
    // Orient so bus 1 is the cheaper day-ahead bus; swapping also swaps
    // the A/C labels.
    let swap = costs.alpha[0] > costs.alpha[1];
    let (d1, d2) = if swap { (d_hat[1], d_hat[0]) } else { (d_hat[0], d_hat[1]) };
    let c = capacity;
    let region = if d1 <= -c {
        if swap { TwoBusRegion::C } else { TwoBusRegion::A }
    } else if d2 <= -c {
        if swap { TwoBusRegion::A } else { TwoBusRegion::C }
    } else if d2 > c {
        TwoBusRegion::E
    } else if d1 + d2 > 0.0 {
        TwoBusRegion::B
    } else {
        TwoBusRegion::D
    };
    let tol = 1e-6 * sigma_e;
    let boundary_case = (d1 + c).abs() <= tol
        || (d2 + c).abs() <= tol
        || (d2 - c).abs() <= tol
        || (d1 + d2).abs() <= tol;
    Ok(RegionClassification { region, boundary_case })
}

/// The two reduced sides: upstream (exporting end of the congested line)
/// and downstream (importing end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReducedSide {
    Upstream,
    Downstream,
}

/// Nominal free disposal detected per reduced side; a side with strictly
/// positive shedding absorbs its errors at zero marginal cost.
#[derive(Debug, Clone, Copy, Default)]
pub struct SideRelief {
    pub upstream: bool,
    pub downstream: bool,
}

/// How reduced perturbations (delta1', delta2') map back to per-bus
/// perturbations.
#[derive(Debug, Clone)]
pub enum DeltaMap {
    /// Two generating buses with distinct side weights; per-bus values are
    /// `inverse_map * (delta1', delta2')` at `buses`, zero elsewhere.
    TwoGenerators { buses: (usize, usize), inverse_map: Matrix2<f64> },
    /// A single generating bus whose side weight splits its perturbation d
    /// into delta' = (weight * d, (1 - weight) * d).
    SingleGenerator { bus: usize, weight: f64, relief: SideRelief },
}

/// Equivalent two-bus reserve problem produced by the network reduction:
/// effective day-ahead prices, endpoint real-time prices, the covariance
/// of the aggregated normalized errors, the per-bus aggregation weights,
/// and the inverse mapping back to bus perturbations.
#[derive(Debug, Clone)]
pub struct TwoBusProblem {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cov: Matrix2<f64>,
    pub gamma: DVector<f64>,
    pub delta_map: DeltaMap,
}

impl TwoBusProblem {
    /// Per-bus perturbation vector realizing the reduced (delta1', delta2').
    pub fn bus_deltas(&self, n: usize, delta1: f64, delta2: f64) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        match &self.delta_map {
            DeltaMap::TwoGenerators { buses, inverse_map } => {
                let d = inverse_map * Vector2::new(delta1, delta2);
                out[buses.0] = d[0];
                out[buses.1] = d[1];
            }
            DeltaMap::SingleGenerator { bus, .. } => {
                // delta1' + delta2' = weight*d + (1-weight)*d = d.
                out[*bus] = delta1 + delta2;
            }
        }
        out
    }
}

/// Result of the two-bus equilibrium solve. `saturated` marks solutions
/// pinned at the +-8 standard-deviation clamp, where the stationarity
/// conditions hold only as one-sided bound conditions.
#[derive(Debug, Clone)]
pub struct TwoBusEquilibrium {
    pub delta1: f64,
    pub delta2: f64,
    pub price: f64,
    pub saturated: bool,
    pub residual: [f64; 2],
    pub iterations: usize,
}

/// Scale-free view of a two-bus problem: side standard deviations, the
/// aggregate (sum) deviation, and the three correlations the orthant
/// probabilities need.
struct Normalized {
    s1: f64,
    s2: f64,
    sp: f64,
    r12: f64,
    r1p: f64,
    r2p: f64,
    m: f64,
    beta2: f64,
    alpha1: f64,
    alpha2: f64,
}

impl Normalized {
    fn new(p: &TwoBusProblem) -> Result<Self, RldError> {
        let s11 = p.cov[(0, 0)];
        let s22 = p.cov[(1, 1)];
        let s12 = 0.5 * (p.cov[(0, 1)] + p.cov[(1, 0)]);
        if !(s11 > 0.0) || !(s22 > 0.0) {
            return Err(RldError::DegenerateCovariance);
        }
        let det = s11 * s22 - s12 * s12;
        if det <= 1e-12 * s11 * s22 {
            return Err(RldError::DegenerateCovariance);
        }
        let sp2 = s11 + 2.0 * s12 + s22;
        if sp2 <= 1e-12 * (s11 + s22) {
            return Err(RldError::DegenerateCovariance);
        }
        let (s1, s2, sp) = (s11.sqrt(), s22.sqrt(), sp2.sqrt());
        let m = p.beta1.min(p.beta2);
        if !(p.alpha1 > 0.0) || !(p.alpha2 > 0.0) || p.alpha1 >= m || p.alpha2 >= m {
            return Err(RldError::Domain(format!(
                "effective day-ahead prices ({}, {}) must lie strictly inside (0, {m})",
                p.alpha1, p.alpha2
            )));
        }
        if p.alpha1 > p.alpha2 + PRICE_TIE {
            return Err(RldError::Domain(format!(
                "upstream effective price {} exceeds downstream price {}; \
                 congestion orientation is inconsistent",
                p.alpha1, p.alpha2
            )));
        }
        Ok(Normalized {
            s1,
            s2,
            sp,
            r12: (s12 / (s1 * s2)).clamp(-1.0, 1.0),
            r1p: ((s11 + s12) / (s1 * sp)).clamp(-1.0, 1.0),
            r2p: ((s12 + s22) / (s2 * sp)).clamp(-1.0, 1.0),
            m,
            beta2: p.beta2,
            alpha1: p.alpha1,
            alpha2: p.alpha2,
        })
    }

    /// Stationarity system of the reduced stage cost C(delta1, delta2):
    /// F1 = m P(z1 > d1, z1 + z2 > t) - alpha1 and
    /// F2 = beta2 P(z2 > d2) + m (P(z1 + z2 > t) - P(z2 > d2, z1 + z2 > t))
    ///      - alpha2, with t = d1 + d2; grad C = -F.
    fn residuals(&self, d1: f64, d2: f64) -> Result<[f64; 2], RldError> {
        let a1 = d1 / self.s1;
        let a2 = d2 / self.s2;
        let bt = (d1 + d2) / self.sp;
        let f1 = self.m * bivariate_orthant(a1, bt, self.r1p)? - self.alpha1;
        let f2 = self.beta2 * q_fn(a2)
            + self.m * (q_fn(bt) - bivariate_orthant(a2, bt, self.r2p)?)
            - self.alpha2;
        Ok([f1, f2])
    }

    fn jacobian(&self, d1: f64, d2: f64) -> [[f64; 2]; 2] {
        let a1 = d1 / self.s1;
        let a2 = d2 / self.s2;
        let bt = (d1 + d2) / self.sp;
        let la_1 = orthant_da(a1, bt, self.r1p);
        let lb_1 = orthant_db(a1, bt, self.r1p);
        let la_2 = orthant_da(a2, bt, self.r2p);
        let lb_2 = orthant_db(a2, bt, self.r2p);
        let df1_d1 = self.m * (la_1 / self.s1 + lb_1 / self.sp);
        let df1_d2 = self.m * lb_1 / self.sp;
        let df2_d1 = self.m * (-phi(bt) / self.sp - lb_2 / self.sp);
        let df2_d2 = -self.beta2 * phi(a2) / self.s2
            + self.m * (-phi(bt) / self.sp - la_2 / self.s2 - lb_2 / self.sp);
        [[df1_d1, df1_d2], [df2_d1, df2_d2]]
    }

    /// Expected recourse cost at perturbation (d1, d2):
    /// m E[(p - t)^+ 1(z2 < d2)] + m E[(z1 - d1)^+ 1(z2 > d2)]
    /// + beta2 E[(z2 - d2)^+], with p = z1 + z2.
    fn recourse_mean(&self, d1: f64, d2: f64) -> Result<f64, RldError> {
        let a1 = d1 / self.s1;
        let a2 = d2 / self.s2;
        let bt = (d1 + d2) / self.sp;
        let total_short = self.sp * pos_part_mean(bt)
            - self.sp * pos_part_mean_given_tail(bt, a2, self.r2p)?;
        let backflow_blocked = self.s1 * pos_part_mean_given_tail(a1, a2, self.r12)?;
        let downstream = self.s2 * pos_part_mean(a2);
        Ok(self.m * (total_short + backflow_blocked) + self.beta2 * downstream)
    }
}

/// d/da of the orthant probability P(Z1 > a, Z2 > b).
fn orthant_da(a: f64, b: f64, rho: f64) -> f64 {
    let sbar = (1.0 - rho * rho).max(1e-300).sqrt();
    -phi(a) * q_fn((b - rho * a) / sbar)
}

/// d/db of the orthant probability P(Z1 > a, Z2 > b).
fn orthant_db(a: f64, b: f64, rho: f64) -> f64 {
    let sbar = (1.0 - rho * rho).max(1e-300).sqrt();
    -phi(b) * q_fn((a - rho * b) / sbar)
}

/// Expected recourse cost of the reduced two-bus problem at the given
/// normalized perturbations (per unit of error scale).
pub fn two_bus_recourse_mean(
    p: &TwoBusProblem,
    delta1: f64,
    delta2: f64,
) -> Result<f64, RldError> {
    Normalized::new(p)?.recourse_mean(delta1, delta2)
}

/// Full reduced stage cost alpha1 d1 + alpha2 d2 + expected recourse; the
/// equilibrium minimizes this over the perturbations.
pub fn two_bus_stage_cost(p: &TwoBusProblem, delta1: f64, delta2: f64) -> Result<f64, RldError> {
    let norm = Normalized::new(p)?;
    Ok(p.alpha1 * delta1 + p.alpha2 * delta2 + norm.recourse_mean(delta1, delta2)?)
}

/// Solves the two-bus reserve equilibrium by damped Newton iteration on
/// the stationarity system, with analytic Jacobians, the decoupled
/// single-bus solution as warm start, and clamping at +-8 standard
/// deviations per coordinate.
///
/// Tied effective prices leave the system without a finite root: the
/// stage cost flattens along lines of constant total reserve as the
/// upstream coordinate falls, so the optimum set is a ridge cut off by
/// the clamp box. The solver pins the upstream coordinate at its clamp,
/// refines the downstream one on its own equation, and flags the result
/// `saturated`; if that corner fails box optimality (prices near the
/// edges of the admissible range) it falls back to the Newton path.
pub fn solve_two_bus_equilibrium(p: &TwoBusProblem) -> Result<TwoBusEquilibrium, RldError> {
    let norm = Normalized::new(p)?;
    let (l1, l2) = (DELTA_CLAMP * norm.s1, DELTA_CLAMP * norm.s2);
    let clip = |d1: f64, d2: f64| (d1.clamp(-l1, l1), d2.clamp(-l2, l2));

    if norm.alpha2 - norm.alpha1 <= PRICE_TIE {
        let d1 = -l1;
        let d2 = solve_coordinate(&norm, Coordinate::Second, d1, -l2, l2)?;
        let f = norm.residuals(d1, d2)?;
        if kkt_satisfied(d1, d2, l1, l2, &f, RESIDUAL_TOL) {
            let price = p.alpha1 * d1 + p.alpha2 * d2 + norm.recourse_mean(d1, d2)?;
            return Ok(TwoBusEquilibrium {
                delta1: d1,
                delta2: d2,
                price,
                saturated: true,
                residual: f,
                iterations: 0,
            });
        }
    }

    let start1 = norm.s1 * q_inv(norm.alpha1 / norm.m)?;
    let start2 = norm.s2 * q_inv(norm.alpha2 / norm.beta2)?;
    let (mut d1, mut d2) = clip(start1, start2);
    let mut f = norm.residuals(d1, d2)?;
    let mut iterations = 0;

    let merit = |f: &[f64; 2]| f[0].abs().max(f[1].abs());

    for iter in 0..MAX_NEWTON_ITER {
        iterations = iter;
        if merit(&f) <= 1e-3 {
            // Ridge signature: opposite deep tails only occur on the
            // degenerate equal-price ridge, where the true optimum sits at
            // the clamp corner.
            let (a1, a2) = (d1 / norm.s1, d2 / norm.s2);
            if a1 <= -RIDGE_DEPTH && a2 >= RIDGE_DEPTH {
                d1 = -l1;
                d2 = solve_coordinate(&norm, Coordinate::Second, d1, -l2, l2)?;
                f = norm.residuals(d1, d2)?;
                break;
            }
            if a1 >= RIDGE_DEPTH && a2 <= -RIDGE_DEPTH {
                d2 = -l2;
                d1 = solve_coordinate(&norm, Coordinate::First, d2, -l1, l1)?;
                f = norm.residuals(d1, d2)?;
                break;
            }
        }
        if kkt_satisfied(d1, d2, l1, l2, &f, NEWTON_TOL) {
            break;
        }

        let j = norm.jacobian(d1, d2);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let scale = j.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        let (mut step1, mut step2) = if det.abs() > 1e-14 * scale * scale && scale > 0.0 {
            (
                (-f[0] * j[1][1] + f[1] * j[0][1]) / det,
                (-j[0][0] * f[1] + j[1][0] * f[0]) / det,
            )
        } else {
            // Singular Jacobian: descend the stage cost directly
            // (grad C = -F), scaled to a one-sigma move.
            let norm_f = (f[0] * f[0] + f[1] * f[1]).sqrt().max(1e-300);
            (f[0] / norm_f * norm.s1, f[1] / norm_f * norm.s2)
        };
        // Keep single steps bounded; the clamp box is only 16 sigma wide.
        let step_cap = 4.0 * norm.s1.max(norm.s2);
        let step_len = (step1 * step1 + step2 * step2).sqrt();
        if step_len > step_cap {
            step1 *= step_cap / step_len;
            step2 *= step_cap / step_len;
        }

        let mut lambda = 1.0;
        let mut advanced = false;
        while lambda >= 1e-6 {
            let (t1, t2) = clip(d1 + lambda * step1, d2 + lambda * step2);
            if t1 == d1 && t2 == d2 {
                break;
            }
            let ft = norm.residuals(t1, t2)?;
            if merit(&ft) < merit(&f) {
                d1 = t1;
                d2 = t2;
                f = ft;
                advanced = true;
                break;
            }
            lambda *= 0.5;
        }
        if !advanced {
            break;
        }
    }

    // Endgame: re-solve free coordinates one-dimensionally if the joint
    // iteration stopped short, then accept by box-constrained optimality.
    if !kkt_satisfied(d1, d2, l1, l2, &f, NEWTON_TOL) {
        let pinned1 = d1.abs() >= l1 - 1e-12;
        let pinned2 = d2.abs() >= l2 - 1e-12;
        if pinned1 && !pinned2 {
            d2 = solve_coordinate(&norm, Coordinate::Second, d1, -l2, l2)?;
        } else if pinned2 && !pinned1 {
            d1 = solve_coordinate(&norm, Coordinate::First, d2, -l1, l1)?;
        }
        f = norm.residuals(d1, d2)?;
    }

    if !kkt_satisfied(d1, d2, l1, l2, &f, RESIDUAL_TOL) {
        return Err(RldError::NoConvergence { residual: merit(&f) });
    }
    let saturated = d1.abs() >= l1 - 1e-9 || d2.abs() >= l2 - 1e-9;
    let price = p.alpha1 * d1 + p.alpha2 * d2 + norm.recourse_mean(d1, d2)?;
    Ok(TwoBusEquilibrium {
        delta1: d1,
        delta2: d2,
        price,
        saturated,
        residual: f,
        iterations,
    })
}

/// Box-constrained stationarity: interior coordinates need F ~ 0; a
/// coordinate at its lower clamp is optimal when F <= tol (cost rises
/// inward), at its upper clamp when F >= -tol.
fn kkt_satisfied(d1: f64, d2: f64, l1: f64, l2: f64, f: &[f64; 2], tol: f64) -> bool {
    let ok = |d: f64, l: f64, fi: f64| {
        if d <= -l + 1e-12 {
            fi <= tol
        } else if d >= l - 1e-12 {
            fi >= -tol
        } else {
            fi.abs() <= tol
        }
    };
    ok(d1, l1, f[0]) && ok(d2, l2, f[1])
}

enum Coordinate {
    First,
    Second,
}

/// Solves one stationarity equation in its own coordinate with the other
/// held fixed; both are strictly decreasing, so bisection is safe. Roots
/// outside the clamp interval land on the nearer clamp.
fn solve_coordinate(
    norm: &Normalized,
    which: Coordinate,
    other: f64,
    lo: f64,
    hi: f64,
) -> Result<f64, RldError> {
    let eval = |x: f64| -> Result<f64, RldError> {
        let f = match which {
            Coordinate::First => norm.residuals(x, other)?,
            Coordinate::Second => norm.residuals(other, x)?,
        };
        Ok(match which {
            Coordinate::First => f[0],
            Coordinate::Second => f[1],
        })
    };
    let (mut lo, mut hi) = (lo, hi);
    if eval(lo)? <= 0.0 {
        return Ok(lo);
    }
    if eval(hi)? >= 0.0 {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Aggregation weights of the single-congestion reduction: gamma_i is the
/// fraction of a marginal error at bus i that the upstream side of the
/// congested branch must absorb when the branch flow is held fixed.
///
/// Requires the congested branch to be fundamental coordinate 0 of `fs`
/// (see `build_flow_structure_with_leading_branch`). The weights come from
/// one (n-1)x(n-1) linear solve per interior bus, all sharing one
/// factorization.
pub fn gamma_weights(
    net: &Network,
    fs: &FlowStructure,
    congested_branch: usize,
    direction: FlowDirection,
) -> Result<DVector<f64>, RldError> {
    if fs.tree_branches.first() != Some(&congested_branch) {
        return Err(RldError::Domain(
            "congested branch must be fundamental coordinate 0 of the flow structure".into(),
        ));
    }
    let n = net.n();
    let b = &net.branches()[congested_branch];
    let (up, down) = match direction {
        FlowDirection::Forward => (b.from, b.to),
        FlowDirection::Reverse => (b.to, b.from),
    };
    let mut gamma = DVector::zeros(n);
    gamma[up] = 1.0;
    gamma[down] = 0.0;
    if n == 2 {
        return Ok(gamma);
    }

    let interior: Vec<usize> = (0..n).filter(|&i| i != up && i != down).collect();
    let k = n - 1;
    // Row 0 pins the congested fundamental flow to zero; the rest are the
    // injection rows of the interior buses.
    let mut a = DMatrix::zeros(k, k);
    a[(0, 0)] = 1.0;
    for (r, &i) in interior.iter().enumerate() {
        for j in 0..k {
            a[(r + 1, j)] = fs.injection_map[(i, j)];
        }
    }
    let lu = a.lu();
    let up_row = fs.injection_map.row(up).transpose();
    for (r, &i) in interior.iter().enumerate() {
        let mut rhs = DVector::zeros(k);
        rhs[r + 1] = -1.0;
        let f_tilde = lu.solve(&rhs).ok_or(RldError::SingularSystem)?;
        gamma[i] = up_row.dot(&f_tilde);
    }
    Ok(gamma)
}

/// Which effective-price formula the reduction uses for the second
/// (downstream) reduced bus when a generator's weight splits across both
/// sides.
///
/// `MatrixInverse` prices the reduced buses so that the two-bus stage-1
/// cost reproduces the per-bus cost exactly (the weight matrix inverse;
/// equals the endpoint locational marginal prices). `TheoremText` applies
/// alpha_k / gamma_k - gamma_k * alpha_1 as stated in the source theorem.
/// The forms disagree for split weights; the brute-force oracle test picks
/// the one that matches the true optimum, and `MatrixInverse` is the
/// default because it wins that comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectivePriceForm {
    MatrixInverse,
    TheoremText,
}

/// Reduces a network with exactly one congested branch to the equivalent
/// two-bus problem, using the certified effective-price form.
pub fn reduce_to_two_bus(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    nominal: &OpfResult,
) -> Result<TwoBusProblem, RldError> {
    reduce_to_two_bus_with_form(net, fs, costs, forecast, nominal, EffectivePriceForm::MatrixInverse)
}

/// `reduce_to_two_bus` with an explicit choice of effective-price form.
pub fn reduce_to_two_bus_with_form(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    nominal: &OpfResult,
    form: EffectivePriceForm,
) -> Result<TwoBusProblem, RldError> {
    if nominal.congested.len() > 1 {
        return Err(RldError::MultipleCongestion);
    }
    let Some(&(branch, direction)) = nominal.congested.first() else {
        return Err(RldError::UnsupportedPattern(
            "no congested branch; use the uncongested aggregation".into(),
        ));
    };
    let n = net.n();
    let b = &net.branches()[branch];
    let (up, down) = match direction {
        FlowDirection::Forward => (b.from, b.to),
        FlowDirection::Reverse => (b.to, b.from),
    };

    // The reduction treats every bus beyond the endpoints as recourse
    // territory; their real-time prices must not undercut the endpoints.
    let beta_up = costs.beta[up];
    let beta_down = costs.beta[down];
    let min_other = (0..n)
        .filter(|&i| i != up && i != down)
        .map(|i| costs.beta[i])
        .fold(f64::INFINITY, f64::min);
    if beta_up.max(beta_down) > min_other + 1e-12 {
        return Err(RldError::UnsupportedPattern(format!(
            "real-time prices at the congested endpoints ({beta_up}, {beta_down}) \
             exceed another bus's price {min_other}"
        )));
    }

    // Gamma needs the congested branch as fundamental coordinate 0.
    let fs_pinned;
    let fs_gamma = if fs.tree_branches.first() == Some(&branch) {
        fs
    } else {
        fs_pinned = build_flow_structure_with_leading_branch(net, branch)?;
        &fs_pinned
    };
    let gamma = gamma_weights(net, fs_gamma, branch, direction)?;

    // Aggregated error covariance of (gamma . e, (1-gamma) . e).
    let gamma_bar = DVector::from_fn(n, |i, _| 1.0 - gamma[i]);
    let sg = &forecast.corr * &gamma;
    let sgb = &forecast.corr * &gamma_bar;
    let cov = Matrix2::new(gamma.dot(&sg), gamma_bar.dot(&sg), gamma.dot(&sgb), gamma_bar.dot(&sgb));

    let generators: Vec<usize> = (0..n).filter(|&i| nominal.generation[i] > 1e-6).collect();
    if generators.is_empty() {
        return Err(RldError::UnsupportedPattern(
            "no nominal generation to perturb".into(),
        ));
    }
    if generators.len() > 2 {
        return Err(RldError::UnsupportedPattern(format!(
            "{} buses generate in the nominal solution; the reduction supports at most two",
            generators.len()
        )));
    }

    // Free disposal per side: a bus shedding power at the nominal optimum
    // absorbs its side's errors for free.
    let outflow = &fs.incidence * &nominal.flows;
    let shed_tol = 1e-6 * (1.0 + forecast.d_hat.amax());
    let mut relief = SideRelief::default();
    for i in 0..n {
        let slack = nominal.generation[i] - forecast.d_hat[i] - outflow[i];
        if slack > shed_tol {
            if gamma[i] > 1e-6 {
                relief.upstream = true;
            }
            if gamma_bar[i] > 1e-6 {
                relief.downstream = true;
            }
        }
    }

    let (alpha1, alpha2, delta_map) = match generators.as_slice() {
        &[only] => {
            let w = gamma[only];
            let a_eff = costs.alpha[only];
            (
                a_eff,
                a_eff,
                DeltaMap::SingleGenerator { bus: only, weight: w, relief },
            )
        }
        &[p, q] => {
            if relief.upstream || relief.downstream {
                return Err(RldError::UnsupportedPattern(
                    "nominal shedding alongside two generating buses".into(),
                ));
            }
            // Side-1 generator is the one with the larger upstream weight.
            let (j, k) = if gamma[p] >= gamma[q] { (p, q) } else { (q, p) };
            let (gj, gk) = (gamma[j], gamma[k]);
            let det = gj - gk;
            if det.abs() <= 1e-9 {
                return Err(RldError::UnsupportedPattern(format!(
                    "generating buses share the side weight {gj}; sides are inseparable"
                )));
            }
            let inverse_map =
                Matrix2::new((1.0 - gk) / det, -gk / det, -(1.0 - gj) / det, gj / det);
            let (a1, a2) = match form {
                EffectivePriceForm::MatrixInverse => {
                    let aj = costs.alpha[j];
                    let ak = costs.alpha[k];
                    (
                        (aj * (1.0 - gk) - ak * (1.0 - gj)) / det,
                        (ak * gj - aj * gk) / det,
                    )
                }
                EffectivePriceForm::TheoremText => {
                    if gk <= 1e-9 {
                        return Err(RldError::Domain(
                            "theorem-text price form requires a strictly positive split weight"
                                .into(),
                        ));
                    }
                    let aj = costs.alpha[j];
                    let ak = costs.alpha[k];
                    (aj, ak / gk - gk * aj)
                }
            };
            (a1, a2, DeltaMap::TwoGenerators { buses: (j, k), inverse_map })
        }
        _ => unreachable!(),
    };

    Ok(TwoBusProblem {
        alpha1,
        alpha2,
        beta1: beta_up,
        beta2: beta_down,
        cov,
        gamma,
        delta_map,
    })
}

/// Full network risk-limiting dispatch.
#[derive(Debug, Clone)]
pub struct RldDispatch {
    /// Day-ahead schedule max(0, nominal + sigma_e * delta).
    pub g_star: DVector<f64>,
    /// Reserve perturbation per bus in units of sigma_e; zero wherever the
    /// nominal schedule does not generate.
    pub delta: DVector<f64>,
    pub nominal: OpfResult,
    /// Analytic marginal integration cost per MW of error scale.
    pub price_of_uncertainty: f64,
    /// Set when any reserve coordinate hit the +-8 sigma clamp.
    pub saturated: bool,
}

/// Runs the dispatch pipeline: nominal OPF, congestion-count dispatch
/// (uncongested aggregation, or single-congestion reduction plus
/// equilibrium), and the mapping back to bus-level reserves.
pub fn network_rld(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
) -> Result<RldDispatch, RldError> {
    let nominal = solve_nda_opf(net, fs, costs, &forecast.d_hat)?;
    network_rld_from_nominal(net, fs, costs, forecast, nominal)
}

/// `network_rld` continuing from an externally obtained nominal solution
/// (for example one adopted from a published reference schedule).
pub fn network_rld_from_nominal(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    nominal: OpfResult,
) -> Result<RldDispatch, RldError> {
    let n = net.n();
    if forecast.n() != n || costs.alpha.len() != n {
        return Err(RldError::Domain(format!(
            "forecast and costs sized {} and {} for {n} buses",
            forecast.n(),
            costs.alpha.len()
        )));
    }
    match nominal.congested.len() {
        0 => pooled_rld(costs, forecast, nominal),
        1 => congested_rld(net, fs, costs, forecast, nominal),
        _ => Err(RldError::UnsupportedPattern(format!(
            "{} congested lines; only zero or one is supported",
            nominal.congested.len()
        ))),
    }
}

/// Dispatch for a network whose lines never bind: the buses pool into one,
/// total reserve is sqrt(1' corr 1) * q_inv(alpha/beta) split equally over
/// the nominal generators (any split costs the same in the pooled model).
///
/// Also serves as the congestion-ignorant baseline when applied to a
/// congested nominal solution.
pub fn pooled_rld(
    costs: &CostModel,
    forecast: &Forecast,
    nominal: OpfResult,
) -> Result<RldDispatch, RldError> {
    let n = forecast.n();
    let generators: Vec<usize> = (0..n).filter(|&i| nominal.generation[i] > 1e-6).collect();
    let ones = DVector::from_element(n, 1.0);
    let agg_var = (&forecast.corr * &ones).dot(&ones).max(0.0);
    let sigma_agg = agg_var.sqrt();

    let mut delta = DVector::zeros(n);
    let mut price = 0.0;
    if !generators.is_empty() && sigma_agg > 1e-12 {
        let alpha_eff = generators
            .iter()
            .map(|&i| costs.alpha[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let beta_eff = costs.beta.iter().cloned().fold(f64::INFINITY, f64::min);
        check_price_pair(alpha_eff, beta_eff)?;
        let q = q_inv(alpha_eff / beta_eff)?;
        let total = sigma_agg * q;
        for &i in &generators {
            delta[i] = total / generators.len() as f64;
        }
        price = beta_eff * phi(q) * sigma_agg;
    }
    let g_star = schedule_from(&nominal.generation, &delta, forecast.sigma_e);
    Ok(RldDispatch {
        g_star,
        delta,
        nominal,
        price_of_uncertainty: price,
        saturated: false,
    })
}

fn congested_rld(
    net: &Network,
    fs: &FlowStructure,
    costs: &CostModel,
    forecast: &Forecast,
    nominal: OpfResult,
) -> Result<RldDispatch, RldError> {
    let n = net.n();
    let problem = reduce_to_two_bus(net, fs, costs, forecast, &nominal)?;
    let norm = Normalized::new(&problem)?;
    let (s1, s2) = (norm.s1, norm.s2);
    let m = norm.m;

    let (d1, d2, price, saturated) = match &problem.delta_map {
        DeltaMap::TwoGenerators { .. } => {
            let eq = solve_two_bus_equilibrium(&problem)?;
            (eq.delta1, eq.delta2, eq.price, eq.saturated)
        }
        DeltaMap::SingleGenerator { bus, weight, relief } => {
            let w = *weight;
            let alpha_bus = costs.alpha[*bus];
            if relief.upstream && relief.downstream {
                (0.0, 0.0, 0.0, false)
            } else if relief.upstream {
                // Only downstream risk is priced; the generator delivers
                // (1 - w) MW there per MW of perturbation.
                if 1.0 - w <= 1e-9 {
                    return Err(RldError::UnsupportedPattern(
                        "upstream relief with a purely upstream generator".into(),
                    ));
                }
                let a_eff = alpha_bus / (1.0 - w);
                let mut dd2 = if a_eff < norm.beta2 && a_eff > 0.0 {
                    s2 * q_inv(a_eff / norm.beta2)?
                } else {
                    -DELTA_CLAMP * s2
                };
                let mut sat = false;
                if dd2.abs() >= DELTA_CLAMP * s2 {
                    dd2 = dd2.clamp(-DELTA_CLAMP * s2, DELTA_CLAMP * s2);
                    sat = true;
                }
                let d = dd2 / (1.0 - w);
                let price =
                    alpha_bus * d + norm.beta2 * s2 * pos_part_mean(dd2 / s2);
                (w * d, dd2, price, sat)
            } else if relief.downstream {
                // Only upstream risk is priced; backflow serves it at the
                // cheaper endpoint price.
                if w <= 1e-9 {
                    return Err(RldError::UnsupportedPattern(
                        "downstream relief with a purely downstream generator".into(),
                    ));
                }
                let a_eff = alpha_bus / w;
                let mut dd1 = if a_eff < m && a_eff > 0.0 {
                    s1 * q_inv(a_eff / m)?
                } else {
                    -DELTA_CLAMP * s1
                };
                let mut sat = false;
                if dd1.abs() >= DELTA_CLAMP * s1 {
                    dd1 = dd1.clamp(-DELTA_CLAMP * s1, DELTA_CLAMP * s1);
                    sat = true;
                }
                let d = dd1 / w;
                let price = alpha_bus * d + m * s1 * pos_part_mean(dd1 / s1);
                (dd1, (1.0 - w) * d, price, sat)
            } else {
                // One generator, no relief: minimize the stage cost along
                // delta' = (w d, (1 - w) d). The derivative in d is
                // alpha_bus - w m P(...) - (1 - w)(...) and is increasing.
                let mut hi = f64::INFINITY;
                if w > 1e-12 {
                    hi = hi.min(DELTA_CLAMP * s1 / w);
                }
                if 1.0 - w > 1e-12 {
                    hi = hi.min(DELTA_CLAMP * s2 / (1.0 - w));
                }
                let lo = -hi;
                let dcost = |d: f64| -> Result<f64, RldError> {
                    let f = norm.residuals(w * d, (1.0 - w) * d)?;
                    // grad C along the line; F = -grad of the 2-D cost.
                    Ok(alpha_bus - w * (f[0] + norm.alpha1) - (1.0 - w) * (f[1] + norm.alpha2))
                };
                // dcost is increasing; reuse the decreasing-root helper on
                // its negation.
                let neg = |d: f64| dcost(d).map(|v| -v);
                let d = bisect_decreasing(&neg, lo, hi)?;
                let sat = d <= lo + 1e-12 || d >= hi - 1e-12;
                let price =
                    alpha_bus * d + norm.recourse_mean(w * d, (1.0 - w) * d)?;
                (w * d, (1.0 - w) * d, price, sat)
            }
        }
    };

    let delta = problem.bus_deltas(n, d1, d2);
    let g_star = schedule_from(&nominal.generation, &delta, forecast.sigma_e);
    Ok(RldDispatch {
        g_star,
        delta,
        nominal,
        price_of_uncertainty: price,
        saturated,
    })
}

/// Root of a strictly decreasing function on [lo, hi], landing on the
/// nearer endpoint when the root lies outside.
fn bisect_decreasing(
    f: &dyn Fn(f64) -> Result<f64, RldError>,
    lo: f64,
    hi: f64,
) -> Result<f64, RldError> {
    let (mut lo, mut hi) = (lo, hi);
    if f(lo)? <= 0.0 {
        return Ok(lo);
    }
    if f(hi)? >= 0.0 {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn schedule_from(nominal_g: &DVector<f64>, delta: &DVector<f64>, sigma_e: f64) -> DVector<f64> {
    DVector::from_fn(nominal_g.len(), |i, _| {
        (nominal_g[i] + sigma_e * delta[i]).max(0.0)
    })
}
