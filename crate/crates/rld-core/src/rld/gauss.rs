//! Standard-normal special functions used by the analytic dispatch layer.
//!
//! Everything is expressed through three primitives: the density `phi`, the
//! tail probability `q_fn` (complementary CDF), and the inverse tail
//! `q_inv`. On top of those sit the bivariate orthant probability
//! P(Z1 > a, Z2 > b) and the partial expectations E[(Z1 - a)^+ 1(Z2 > b)]
//! that the two-bus price formula needs.
//!
//! Accuracy targets: `q_fn`/`phi` are correct to f64 roundoff, the
//! roundtrip |q_fn(q_inv(p)) - p| stays below 1e-10 across p in
//! [1e-8, 1 - 1e-8], and the orthant probability is accurate to 1e-7
//! absolute (in practice far better away from |rho| ~ 1).

use std::sync::OnceLock;

use super::RldError;

const FRAC_1_SQRT_2PI: f64 = 0.39894228040143267794;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal tail probability Q(x) = P(Z > x).
pub fn q_fn(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Complementary error function, accurate to f64 roundoff.
///
/// Small arguments use the alternating Maclaurin series of erf, where
/// cancellation is negligible; large arguments use the classical continued
/// fraction evaluated with the modified Lentz algorithm. Both pieces are
/// derived from first principles, so correctness is checked directly
/// against high-precision reference values in the test suite.
fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 1.5 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

/// erf(x) by its Maclaurin series; reliable for |x| <= 1.5.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0_f64;
    loop {
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
        n += 1.0;
        if n > 200.0 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
/// for x >= 1.5, evaluated with modified Lentz iteration.
fn erfc_continued_fraction(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x.max(tiny);
    let mut c = f;
    let mut d = 0.0_f64;
    let mut k = 1.0_f64;
    for _ in 0..300 {
        let a = 0.5 * k;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
        k += 1.0;
    }
    // f now approximates x + K(a_k / x), the reciprocal of the CF value.
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Inverse tail probability: the x with Q(x) = p.
///
/// A rational initial estimate is polished with Newton steps on `q_fn`
/// itself, so the final accuracy is limited only by `q_fn`'s roundoff.
pub fn q_inv(p: f64) -> Result<f64, RldError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RldError::Domain(format!(
            "q_inv requires p in (0, 1), got {p}"
        )));
    }
    let mut x = -norm_inv_cdf_estimate(p.min(1.0 - p));
    if p > 0.5 {
        x = -x;
    }
    // Two damped-free Newton refinements; quadratic convergence makes the
    // second a no-op except in the far tails.
    for _ in 0..3 {
        let f = q_fn(x) - p;
        let d = phi(x);
        if d <= 0.0 {
            break;
        }
        let step = f / d;
        x += step;
        if step.abs() < 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

/// Rational estimate of the lower-tail normal quantile for p <= 0.5
/// (Acklam's approximation, |error| ~ 1e-9 before refinement).
fn norm_inv_cdf_estimate(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Cached Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre_64() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| compute_gauss_legendre(64))
}

/// Nodes as roots of the Legendre polynomial P_n found by Newton iteration,
/// weights 2 / ((1 - x^2) P_n'(x)^2).
fn compute_gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        rule.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    rule
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0_f64;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Orthant probability P(Z1 > a, Z2 > b) for standard bivariate normal
/// variables with correlation `rho`.
///
/// Uses the identity d/d(rho) P = phi2(a, b; rho) integrated along
/// rho = sin(theta), where the integrand is bounded for all |rho| <= 1:
/// P = Q(a)Q(b) + (1/2pi) * Int_0^{asin rho} exp(-(a^2 + b^2
///   - 2 a b sin t) / (2 cos^2 t)) dt.
/// For |rho| > 0.925 the panels refine geometrically toward the endpoint,
/// where the integrand develops a boundary layer.
pub fn bivariate_orthant(a: f64, b: f64, rho: f64) -> Result<f64, RldError> {
    if !(-1.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(RldError::Domain(format!(
            "bivariate_orthant requires |rho| <= 1, got {rho}"
        )));
    }
    if rho >= 1.0 - 5e-16 {
        return Ok(q_fn(a.max(b)));
    }
    if rho <= -1.0 + 5e-16 {
        return Ok((q_fn(a) - q_fn(-b)).max(0.0));
    }

    let theta_end = rho.asin();
    let mut boundaries = vec![0.0_f64];
    if rho.abs() > 0.925 {
        // Geometric refinement toward theta_end.
        let theta_safe = 0.925_f64.asin() * theta_end.signum();
        boundaries.push(theta_safe);
        let mut gap = theta_end - theta_safe;
        for _ in 0..6 {
            gap *= 0.5;
            boundaries.push(theta_end - gap);
        }
    }
    boundaries.push(theta_end);

    let rule = gauss_legendre_64();
    let quad = a * a + b * b;
    let mut integral = 0.0;
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut panel = 0.0;
        for &(node, weight) in rule {
            let theta = mid + half * node;
            let (sin_t, cos_t) = theta.sin_cos();
            let expo = -(quad - 2.0 * a * b * sin_t) / (2.0 * cos_t * cos_t);
            panel += weight * expo.exp();
        }
        integral += panel * half;
    }
    let p = q_fn(a) * q_fn(b) + integral / (2.0 * std::f64::consts::PI);
    Ok(p.clamp(0.0, 1.0))
}

/// E[Z1 * 1(Z1 > a, Z2 > b)] for standard bivariate normals with
/// correlation `rho`: phi(a) Q((b - rho a)/s) + rho phi(b) Q((a - rho b)/s)
/// with s = sqrt(1 - rho^2).
pub fn mean_in_orthant(a: f64, b: f64, rho: f64) -> Result<f64, RldError> {
    if !(-1.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(RldError::Domain(format!(
            "mean_in_orthant requires |rho| <= 1, got {rho}"
        )));
    }
    let s2 = 1.0 - rho * rho;
    if s2 <= 5e-16 {
        // Z2 = rho * Z1 exactly; the joint event collapses to a half-line.
        return if rho > 0.0 {
            Ok(phi(a.max(b)))
        } else {
            let hi = -b;
            if a < hi {
                Ok(phi(a) - phi(hi))
            } else {
                Ok(0.0)
            }
        };
    }
    let s = s2.sqrt();
    Ok(phi(a) * q_fn((b - rho * a) / s) + rho * phi(b) * q_fn((a - rho * b) / s))
}

/// E[(Z1 - a)^+ 1(Z2 > b)] = E[Z1 1(Z1 > a, Z2 > b)] - a P(Z1 > a, Z2 > b).
pub fn pos_part_mean_given_tail(a: f64, b: f64, rho: f64) -> Result<f64, RldError> {
    Ok(mean_in_orthant(a, b, rho)? - a * bivariate_orthant(a, b, rho)?)
}

/// E[(Z - a)^+] = phi(a) - a Q(a).
pub fn pos_part_mean(a: f64) -> f64 {
    phi(a) - a * q_fn(a)
}
