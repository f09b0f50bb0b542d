//! Optimality certificates for the simplex solver. For linear programs the
//! Karush-Kuhn-Tucker conditions are necessary and sufficient, so checking
//! stationarity, complementary slackness, and strong duality on random
//! feasible instances certifies returned solutions without a second solver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rld_core::lp::{solve_lp, LinearProgram, LpSolution, LpStatus};

const TOL: f64 = 1e-8;

/// Builds a random LP guaranteed feasible (constraints generated around a
/// random interior point) and bounded (nonnegative objective over a box).
fn random_instance(rng: &mut ChaCha8Rng) -> LinearProgram {
    let n = rng.random_range(2..6);
    let m_ineq = rng.random_range(1..7);
    let m_eq = rng.random_range(0..3.min(n));

    let x0 = DVector::from_fn(n, |_, _| rng.random_range(0.0..3.0));
    let mut lp = LinearProgram::new(n);
    lp.objective = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
    lp.bounds = (0..n)
        .map(|_| (Some(0.0), Some(rng.random_range(4.0..10.0))))
        .collect();

    lp.ineq_matrix = DMatrix::from_fn(m_ineq, n, |_, _| rng.random_range(-1.0..1.0));
    lp.ineq_rhs = &lp.ineq_matrix * &x0
        + DVector::from_fn(m_ineq, |_, _| rng.random_range(0.1..2.0));

    if m_eq > 0 {
        lp.eq_matrix = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
        lp.eq_rhs = &lp.eq_matrix * &x0;
    }
    lp
}

/// Checks the full KKT system at the reported solution.
fn assert_kkt(lp: &LinearProgram, sol: &LpSolution, label: &str) {
    let x = &sol.primal;
    let n = x.len();
    let scale = 1.0 + lp.objective.amax() + x.amax();

    // Primal feasibility.
    if lp.eq_matrix.nrows() > 0 {
        let r = &lp.eq_matrix * x - &lp.eq_rhs;
        assert!(r.amax() <= TOL * scale, "{label}: equality violation {}", r.amax());
    }
    let slack = if lp.ineq_matrix.nrows() > 0 {
        let s = &lp.ineq_rhs - &lp.ineq_matrix * x;
        assert!(s.min() >= -TOL * scale, "{label}: inequality violation {}", -s.min());
        s
    } else {
        DVector::zeros(0)
    };
    for j in 0..n {
        let (lo, hi) = lp.bounds[j];
        if let Some(l) = lo {
            assert!(x[j] >= l - TOL * scale, "{label}: lower bound violated at {j}");
        }
        if let Some(h) = hi {
            assert!(x[j] <= h + TOL * scale, "{label}: upper bound violated at {j}");
        }
    }

    // Dual feasibility and complementary slackness.
    for r in 0..slack.len() {
        let mu = sol.dual_ineq[r];
        assert!(mu >= -TOL, "{label}: negative inequality dual {mu}");
        assert!(
            mu * slack[r] <= TOL * scale * 10.0,
            "{label}: complementary slackness broken at row {r}: mu={mu}, slack={}",
            slack[r]
        );
    }

    // Stationarity: c + G'mu - A'nu - dual_bounds = 0.
    let mut grad = lp.objective.clone();
    if lp.ineq_matrix.nrows() > 0 {
        grad += lp.ineq_matrix.transpose() * &sol.dual_ineq;
    }
    if lp.eq_matrix.nrows() > 0 {
        grad -= lp.eq_matrix.transpose() * &sol.dual_eq;
    }
    grad -= &sol.dual_bounds;
    assert!(grad.amax() <= TOL * scale * 10.0, "{label}: stationarity residual {}", grad.amax());

    // Bound duals must respect activity and sign.
    for j in 0..n {
        let db = sol.dual_bounds[j];
        let (lo, hi) = lp.bounds[j];
        let at_lo = lo.map(|l| (x[j] - l).abs() <= 1e-6 * scale).unwrap_or(false);
        let at_hi = hi.map(|h| (x[j] - h).abs() <= 1e-6 * scale).unwrap_or(false);
        if !at_lo && !at_hi {
            assert!(db.abs() <= TOL * scale, "{label}: interior variable {j} has bound dual {db}");
        }
        if at_lo && !at_hi {
            assert!(db >= -TOL * scale, "{label}: lower-bound dual sign at {j}: {db}");
        }
        if at_hi && !at_lo {
            assert!(db <= TOL * scale, "{label}: upper-bound dual sign at {j}: {db}");
        }
    }

    // Strong duality: dual objective equals primal objective.
    let mut dual_obj = sol.dual_eq.dot(&lp.eq_rhs) - sol.dual_ineq.dot(&lp.ineq_rhs);
    for j in 0..n {
        let db = sol.dual_bounds[j];
        if db > 0.0 {
            dual_obj += db * lp.bounds[j].0.unwrap_or(0.0);
        } else if db < 0.0 {
            dual_obj += db * lp.bounds[j].1.unwrap_or(0.0);
        }
    }
    assert!(
        (dual_obj - sol.objective_value).abs() <= TOL * (1.0 + sol.objective_value.abs()) * 10.0,
        "{label}: duality gap {} vs {}",
        dual_obj,
        sol.objective_value
    );
}

#[test]
fn random_instances_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(314159);
    let mut solved = 0;
    while solved < 200 {
        let lp = random_instance(&mut rng);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal, "constructed-feasible LP not solved");
        assert_kkt(&lp, &sol, &format!("instance {solved}"));
        solved += 1;
    }
}

#[test]
fn transportation_instance_has_known_duals() {
    // min x1 + 2 x2 subject to x1 + x2 >= 5 (as -x1 - x2 <= -5), x >= 0:
    // optimum at (5, 0) with cost 5 and shadow price 1 on the demand row.
    let mut lp = LinearProgram::new(2);
    lp.objective = DVector::from_vec(vec![1.0, 2.0]);
    lp.ineq_matrix = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
    lp.ineq_rhs = DVector::from_vec(vec![-5.0]);
    lp.bounds = vec![(Some(0.0), None), (Some(0.0), None)];
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    assert!((sol.objective_value - 5.0).abs() <= 1e-9);
    assert!((sol.primal[0] - 5.0).abs() <= 1e-9);
    assert!((sol.dual_ineq[0] - 1.0).abs() <= 1e-9);
}

#[test]
fn equality_duals_price_the_rhs() {
    // min 3x + y subject to x + y = 4, x - y <= 0, 0 <= x,y <= 10.
    // Optimum: y as large as possible -> x = 0 is blocked by x >= 0 only;
    // cost 3x + y with x + y = 4 gives cost 2x + 4, so x = 0, y = 4.
    let mut lp = LinearProgram::new(2);
    lp.objective = DVector::from_vec(vec![3.0, 1.0]);
    lp.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    lp.eq_rhs = DVector::from_vec(vec![4.0]);
    lp.ineq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    lp.ineq_rhs = DVector::from_vec(vec![0.0]);
    lp.bounds = vec![(Some(0.0), Some(10.0)), (Some(0.0), Some(10.0))];
    let sol = solve_lp(&lp).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    assert!((sol.primal[0]).abs() <= 1e-9);
    assert!((sol.primal[1] - 4.0).abs() <= 1e-9);
    assert!((sol.objective_value - 4.0).abs() <= 1e-9);
    // Marginal unit of rhs is served by y at cost 1.
    assert!((sol.dual_eq[0] - 1.0).abs() <= 1e-9);
    assert_kkt(&lp, &sol, "equality pricing");
}

#[test]
fn degenerate_vertices_still_certify() {
    // Multiple constraints meet at the optimum; duals may not be unique
    // but must still satisfy KKT.
    let mut rng = ChaCha8Rng::seed_from_u64(271828);
    for k in 0..50 {
        let n = 3;
        let mut lp = LinearProgram::new(n);
        lp.objective = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        // Duplicate and scaled rows create degeneracy at the vertex.
        let row = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
        let mut m = DMatrix::zeros(3, n);
        for j in 0..n {
            m[(0, j)] = -row[j];
            m[(1, j)] = -2.0 * row[j];
            m[(2, j)] = -row[j] - 0.0;
        }
        lp.ineq_matrix = m;
        lp.ineq_rhs = DVector::from_vec(vec![-1.0, -2.0, -1.0]);
        lp.bounds = vec![(Some(0.0), Some(5.0)); n];
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_kkt(&lp, &sol, &format!("degenerate {k}"));
    }
}

#[test]
fn reports_unbounded_and_infeasible() {
    let mut lp = LinearProgram::new(1);
    lp.objective = DVector::from_vec(vec![-1.0]);
    lp.bounds = vec![(Some(0.0), None)];
    assert_eq!(solve_lp(&lp).unwrap().status, LpStatus::Unbounded);

    let mut lp = LinearProgram::new(1);
    lp.objective = DVector::from_vec(vec![1.0]);
    lp.ineq_matrix = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
    lp.ineq_rhs = DVector::from_vec(vec![1.0, -2.0]);
    lp.bounds = vec![(Some(0.0), None)];
    assert_eq!(solve_lp(&lp).unwrap().status, LpStatus::Infeasible);
}
