//! Dense linear programming for the dispatch layer.
//!
//! A revised simplex method with Bland's anti-cycling rule, sized for the
//! small LPs optimal power flow generates (tens of rows). The solver
//! returns primal values, equality duals, inequality multipliers, and
//! bound multipliers, all mapped back to the caller's formulation.
//!
//! Tolerances used throughout: pivots below 1e-11 are treated as zero,
//! feasibility is enforced to 1e-8, and downstream "active constraint"
//! classification uses 1e-6.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const PIVOT_TOL: f64 = 1e-11;
pub const FEAS_TOL: f64 = 1e-8;
pub const ACTIVE_TOL: f64 = 1e-6;

const RC_TOL: f64 = 1e-9;
const MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("malformed program: {0}")]
    Malformed(String),
}

/// min objective . x subject to eq_matrix x = eq_rhs,
/// ineq_matrix x <= ineq_rhs, and per-variable bounds.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// (lower, upper) per variable; `None` means unbounded on that side.
    pub bounds: Vec<(Option<f64>, Option<f64>)>,
}

impl LinearProgram {
    /// A program with `n` free variables and no constraints; callers fill
    /// in the pieces they need.
    pub fn new(n: usize) -> Self {
        LinearProgram {
            objective: DVector::zeros(n),
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            bounds: vec![(None, None); n],
        }
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.objective.len();
        if self.eq_matrix.ncols() != n && self.eq_matrix.nrows() > 0 {
            return Err(LpError::Malformed("eq_matrix column count".into()));
        }
        if self.ineq_matrix.ncols() != n && self.ineq_matrix.nrows() > 0 {
            return Err(LpError::Malformed("ineq_matrix column count".into()));
        }
        if self.eq_matrix.nrows() != self.eq_rhs.len() {
            return Err(LpError::Malformed("eq_rhs length".into()));
        }
        if self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return Err(LpError::Malformed("ineq_rhs length".into()));
        }
        if self.bounds.len() != n {
            return Err(LpError::Malformed("bounds length".into()));
        }
        let finite = self
            .eq_rhs
            .iter()
            .chain(self.ineq_rhs.iter())
            .chain(self.objective.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(LpError::Malformed("non-finite coefficient".into()));
        }
        for (l, u) in &self.bounds {
            if let (Some(l), Some(u)) = (l, u) {
                if l > u {
                    return Err(LpError::Malformed(format!("empty bound [{l}, {u}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Solution in the caller's formulation.
///
/// Sign conventions: `dual_eq[r]` is the change of optimal cost per unit
/// of eq_rhs[r]; `dual_ineq[r]` >= 0 is the classical multiplier of row r
/// (cost falls by dual_ineq[r] per unit of slack added to the rhs);
/// `dual_bounds[j]` is the change of optimal cost per unit of the active
/// bound of variable j (>= 0 at a lower bound, <= 0 at an upper bound, 0
/// when the variable is interior).
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub dual_ineq: DVector<f64>,
    pub dual_bounds: DVector<f64>,
    pub objective_value: f64,
}

/// How each user variable was rewritten into nonnegative standard columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = lower + col
    Shifted { col: usize, lower: f64 },
    /// x = upper - col
    Negated { col: usize, upper: f64 },
    /// x = pos - neg
    Split { pos: usize, neg: usize },
}

struct Standard {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    /// Flip sign applied to each row (so user duals can be recovered).
    row_flip: Vec<f64>,
    var_map: Vec<VarMap>,
    /// Row index of the upper-bound constraint added for doubly bounded
    /// variable j, if any.
    bound_row: Vec<Option<usize>>,
}

/// Rewrites the program as min c.x, A x = b, x >= 0, b >= 0, recording the
/// bookkeeping needed to map primal and dual values back.
fn to_standard(lp: &LinearProgram) -> Standard {
    let n = lp.objective.len();
    let n_eq = lp.eq_matrix.nrows();
    let n_in = lp.ineq_matrix.nrows();

    // Upper bounds on shifted variables become extra inequality rows.
    let mut extra_rows: Vec<(usize, f64)> = Vec::new();
    let mut var_map = Vec::with_capacity(n);
    let mut n_cols = 0usize;
    for (j, &(l, u)) in lp.bounds.iter().enumerate() {
        match (l, u) {
            (Some(l), Some(u)) => {
                var_map.push(VarMap::Shifted { col: n_cols, lower: l });
                extra_rows.push((j, u));
                n_cols += 1;
            }
            (Some(l), None) => {
                var_map.push(VarMap::Shifted { col: n_cols, lower: l });
                n_cols += 1;
            }
            (None, Some(u)) => {
                var_map.push(VarMap::Negated { col: n_cols, upper: u });
                n_cols += 1;
            }
            (None, None) => {
                var_map.push(VarMap::Split { pos: n_cols, neg: n_cols + 1 });
                n_cols += 2;
            }
        }
    }
    let n_rows = n_eq + n_in + extra_rows.len();
    let n_slacks = n_in + extra_rows.len();
    let mut a = DMatrix::zeros(n_rows, n_cols + n_slacks);
    let mut b = DVector::zeros(n_rows);
    let mut c = DVector::zeros(n_cols + n_slacks);

    // Structural columns, with bound substitutions folded into the rhs.
    let fill_row = |a: &mut DMatrix<f64>,
                        b: &mut DVector<f64>,
                        row: usize,
                        coeffs: &dyn Fn(usize) -> f64,
                        rhs: f64| {
        let mut r = rhs;
        for (j, vm) in var_map.iter().enumerate() {
            let v = coeffs(j);
            if v == 0.0 {
                continue;
            }
            match *vm {
                VarMap::Shifted { col, lower } => {
                    a[(row, col)] = v;
                    r -= v * lower;
                }
                VarMap::Negated { col, upper } => {
                    a[(row, col)] = -v;
                    r -= v * upper;
                }
                VarMap::Split { pos, neg } => {
                    a[(row, pos)] = v;
                    a[(row, neg)] = -v;
                }
            }
        }
        b[row] = r;
    };

    for r in 0..n_eq {
        fill_row(&mut a, &mut b, r, &|j| lp.eq_matrix[(r, j)], lp.eq_rhs[r]);
    }
    for r in 0..n_in {
        fill_row(&mut a, &mut b, n_eq + r, &|j| lp.ineq_matrix[(r, j)], lp.ineq_rhs[r]);
    }
    for (k, &(j, u)) in extra_rows.iter().enumerate() {
        let row = n_eq + n_in + k;
        fill_row(&mut a, &mut b, row, &|jj| if jj == j { 1.0 } else { 0.0 }, u);
    }

    // Slacks for every inequality row (including bound rows).
    for k in 0..n_slacks {
        a[(n_eq + k, n_cols + k)] = 1.0;
    }

    for (j, vm) in var_map.iter().enumerate() {
        let q = lp.objective[j];
        match *vm {
            VarMap::Shifted { col, .. } => c[col] = q,
            VarMap::Negated { col, .. } => c[col] = -q,
            VarMap::Split { pos, neg } => {
                c[pos] = q;
                c[neg] = -q;
            }
        }
    }

    // Normalize to b >= 0, remembering flips for dual recovery.
    let mut row_flip = vec![1.0; n_rows];
    for r in 0..n_rows {
        if b[r] < 0.0 {
            row_flip[r] = -1.0;
            b[r] = -b[r];
            for j in 0..a.ncols() {
                a[(r, j)] = -a[(r, j)];
            }
        }
    }

    let mut bound_row = vec![None; n];
    for (k, &(j, _)) in extra_rows.iter().enumerate() {
        bound_row[j] = Some(n_eq + n_in + k);
    }

    Standard { a, b, c, row_flip, var_map, bound_row }
}

/// Revised simplex working state over an explicit basis inverse.
struct Simplex {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    xb: DVector<f64>,
    /// Columns at or beyond this index (artificials) never enter the basis.
    n_eligible: usize,
}

enum RunOutcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    /// Bland's rule simplex loop on the current costs.
    fn run(&mut self) -> Result<RunOutcome, LpError> {
        let rows = self.a.nrows();
        for _ in 0..MAX_ITER {
            // y = c_B' B^-1, then reduced costs c_j - y a_j.
            let mut y = DVector::zeros(rows);
            for i in 0..rows {
                let cb = self.c[self.basis[i]];
                if cb != 0.0 {
                    for r in 0..rows {
                        y[r] += cb * self.binv[(i, r)];
                    }
                }
            }
            let mut entering = None;
            for j in 0..self.n_eligible {
                if self.basis.contains(&j) {
                    continue;
                }
                let rc = self.c[j] - y.dot(&self.a.column(j).into_owned());
                if rc < -RC_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else {
                return Ok(RunOutcome::Optimal);
            };
            let d = &self.binv * self.a.column(j);
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for i in 0..rows {
                if d[i] > PIVOT_TOL {
                    let ratio = self.xb[i] / d[i];
                    let better = match leave {
                        None => true,
                        Some(cur) => {
                            ratio < best_ratio - 1e-12
                                || (ratio < best_ratio + 1e-12
                                    && self.basis[i] < self.basis[cur])
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(i);
                    }
                }
            }
            let Some(r) = leave else {
                return Ok(RunOutcome::Unbounded);
            };
            let theta = best_ratio.max(0.0);
            // Pivot: eta-update of the inverse and the basic values.
            let piv = d[r];
            for i in 0..rows {
                if i == r {
                    continue;
                }
                let factor = d[i] / piv;
                if factor != 0.0 {
                    for k in 0..rows {
                        let v = self.binv[(r, k)] * factor;
                        self.binv[(i, k)] -= v;
                    }
                    self.xb[i] -= theta * d[i];
                    if self.xb[i] < 0.0 {
                        self.xb[i] = 0.0;
                    }
                }
            }
            for k in 0..rows {
                self.binv[(r, k)] /= piv;
            }
            self.xb[r] = theta;
            self.basis[r] = j;
        }
        Err(LpError::NumericalFailure("simplex iteration limit".into()))
    }

    /// Refactorizes the basis from original columns, replacing the drifted
    /// inverse, basic values, and duals with LU-accurate ones.
    fn refactor(&mut self) -> Result<DVector<f64>, LpError> {
        let rows = self.a.nrows();
        let mut bmat = DMatrix::zeros(rows, rows);
        for (i, &j) in self.basis.iter().enumerate() {
            bmat.set_column(i, &self.a.column(j));
        }
        let lu = bmat.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| LpError::NumericalFailure("singular basis".into()))?;
        self.binv = inv;
        self.xb = &self.binv * &self.b;
        for v in self.xb.iter_mut() {
            if *v < 0.0 && *v > -FEAS_TOL {
                *v = 0.0;
            }
        }
        // y solves B' y = c_B.
        let mut cb = DVector::zeros(rows);
        for (i, &j) in self.basis.iter().enumerate() {
            cb[i] = self.c[j];
        }
        let y = bmat
            .transpose()
            .lu()
            .solve(&cb)
            .ok_or_else(|| LpError::NumericalFailure("singular basis transpose".into()))?;
        Ok(y)
    }
}

/// Solves the program. Status is `Optimal`, `Infeasible`, or `Unbounded`;
/// errors are reserved for numerical breakdown. Deterministic for
/// identical inputs.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let n = lp.objective.len();
    let std_form = to_standard(lp);
    let rows = std_form.a.nrows();
    let n_std = std_form.a.ncols();

    if rows == 0 {
        // Only bounds: each variable sits at whichever bound helps, and the
        // problem is unbounded if a helpful direction has no bound.
        return solve_bounds_only(lp);
    }

    // Crash basis: prefer the row's slack (when its sign survived the rhs
    // flip), otherwise any exact unit column, otherwise an artificial.
    let mut basis: Vec<usize> = Vec::with_capacity(rows);
    let mut used = vec![false; n_std];
    let mut artificial_rows: Vec<usize> = Vec::new();
    for r in 0..rows {
        let mut chosen = None;
        for j in 0..n_std {
            if used[j] {
                continue;
            }
            if (std_form.a[(r, j)] - 1.0).abs() < 1e-12 {
                let clean = (0..rows).all(|i| i == r || std_form.a[(i, j)].abs() < 1e-12);
                if clean {
                    // Prefer zero-cost columns so the crash start is cheap.
                    if std_form.c[j] == 0.0 {
                        chosen = Some(j);
                        break;
                    }
                    if chosen.is_none() {
                        chosen = Some(j);
                    }
                }
            }
        }
        match chosen {
            Some(j) => {
                used[j] = true;
                basis.push(j);
            }
            None => {
                artificial_rows.push(r);
                basis.push(usize::MAX); // patched below
            }
        }
    }

    let need_phase1 = !artificial_rows.is_empty();
    let mut a = std_form.a.clone();
    let mut c_phase = if need_phase1 {
        DVector::zeros(n_std + artificial_rows.len())
    } else {
        std_form.c.clone()
    };
    if need_phase1 {
        a = a.insert_columns(n_std, artificial_rows.len(), 0.0);
        for (k, &r) in artificial_rows.iter().enumerate() {
            a[(r, n_std + k)] = 1.0;
            c_phase[n_std + k] = 1.0;
            basis[r] = n_std + k;
        }
    }

    let mut sx = Simplex {
        a,
        b: std_form.b.clone(),
        c: c_phase,
        basis,
        binv: DMatrix::zeros(rows, rows),
        xb: DVector::zeros(rows),
        n_eligible: n_std,
    };
    sx.refactor()?;

    if need_phase1 {
        match sx.run()? {
            RunOutcome::Unbounded => {
                return Err(LpError::NumericalFailure("phase 1 unbounded".into()));
            }
            RunOutcome::Optimal => {}
        }
        let infeas: f64 = sx
            .basis
            .iter()
            .zip(sx.xb.iter())
            .filter(|(&j, _)| j >= n_std)
            .map(|(_, &v)| v)
            .sum();
        if infeas > 1e-7 {
            return Ok(infeasible_solution(lp));
        }
        // Drive basic artificials (now at zero) out of the basis; rows with
        // no eligible pivot are redundant and harmless at level zero.
        for i in 0..rows {
            if sx.basis[i] < n_std {
                continue;
            }
            let row_in_binv: Vec<f64> = (0..rows).map(|k| sx.binv[(i, k)]).collect();
            let mut replacement = None;
            for j in 0..n_std {
                if sx.basis.contains(&j) {
                    continue;
                }
                let mut val = 0.0;
                for r in 0..rows {
                    val += row_in_binv[r] * sx.a[(r, j)];
                }
                if val.abs() > 1e-9 {
                    replacement = Some(j);
                    break;
                }
            }
            if let Some(j) = replacement {
                sx.basis[i] = j;
                sx.refactor()?;
            }
        }
        // Phase 2 costs; artificial columns (beyond n_eligible) keep zero
        // cost and are barred from entering.
        let mut c2 = DVector::zeros(sx.a.ncols());
        for j in 0..n_std {
            c2[j] = std_form.c[j];
        }
        sx.c = c2;
    }

    match sx.run()? {
        RunOutcome::Unbounded => {
            return Ok(LpSolution {
                status: LpStatus::Unbounded,
                primal: DVector::zeros(n),
                dual_eq: DVector::zeros(lp.eq_matrix.nrows()),
                dual_ineq: DVector::zeros(lp.ineq_matrix.nrows()),
                dual_bounds: DVector::zeros(n),
                objective_value: f64::NEG_INFINITY,
            });
        }
        RunOutcome::Optimal => {}
    }

    let y = sx.refactor()?;

    // Standard-form primal, then user-variable recovery.
    let mut x_std = DVector::zeros(n_std);
    for (i, &j) in sx.basis.iter().enumerate() {
        if j < n_std {
            x_std[j] = sx.xb[i];
        }
    }
    let mut primal = DVector::zeros(n);
    for (j, vm) in std_form.var_map.iter().enumerate() {
        primal[j] = match *vm {
            VarMap::Shifted { col, lower } => lower + x_std[col],
            VarMap::Negated { col, upper } => upper - x_std[col],
            VarMap::Split { pos, neg } => x_std[pos] - x_std[neg],
        };
    }

    // Duals back in user space. dObj/d(user rhs_r) = row_flip_r * y_r.
    let n_eq = lp.eq_matrix.nrows();
    let n_in = lp.ineq_matrix.nrows();
    let mut dual_eq = DVector::zeros(n_eq);
    for r in 0..n_eq {
        dual_eq[r] = std_form.row_flip[r] * y[r];
    }
    let mut dual_ineq = DVector::zeros(n_in);
    for r in 0..n_in {
        let shadow = std_form.row_flip[n_eq + r] * y[n_eq + r];
        dual_ineq[r] = (-shadow).max(0.0);
    }

    // Bound multipliers from reduced costs of the representative columns.
    let mut dual_bounds = DVector::zeros(n);
    for (j, vm) in std_form.var_map.iter().enumerate() {
        let rc_of = |col: usize| -> f64 {
            let mut v = std_form.c[col];
            for r in 0..rows {
                v -= y[r] * std_form.a[(r, col)];
            }
            v
        };
        dual_bounds[j] = match *vm {
            VarMap::Shifted { col, .. } => rc_of(col),
            VarMap::Negated { col, .. } => -rc_of(col),
            VarMap::Split { .. } => 0.0,
        };
        // A doubly bounded variable carries the upper-bound row's shadow
        // price as well; the column's reduced cost alone is the lower
        // multiplier.
        if let Some(row) = std_form.bound_row[j] {
            dual_bounds[j] += std_form.row_flip[row] * y[row];
        }
    }
    // A variable away from its bound has no bound multiplier.
    for (j, &(l, u)) in lp.bounds.iter().enumerate() {
        let at_lower = l.map_or(false, |l| (primal[j] - l).abs() <= ACTIVE_TOL);
        let at_upper = u.map_or(false, |u| (primal[j] - u).abs() <= ACTIVE_TOL);
        if !at_lower && !at_upper {
            dual_bounds[j] = 0.0;
        }
    }

    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal: primal.clone(),
        dual_eq,
        dual_ineq,
        dual_bounds,
        objective_value: lp.objective.dot(&primal),
    })
}

fn infeasible_solution(lp: &LinearProgram) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        primal: DVector::zeros(lp.objective.len()),
        dual_eq: DVector::zeros(lp.eq_matrix.nrows()),
        dual_ineq: DVector::zeros(lp.ineq_matrix.nrows()),
        dual_bounds: DVector::zeros(lp.objective.len()),
        objective_value: f64::NAN,
    }
}

/// Constraint-free case: minimize over the box alone.
fn solve_bounds_only(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.objective.len();
    let mut primal = DVector::zeros(n);
    let mut dual_bounds = DVector::zeros(n);
    for j in 0..n {
        let q = lp.objective[j];
        let (l, u) = lp.bounds[j];
        if q > 0.0 {
            match l {
                Some(l) => {
                    primal[j] = l;
                    dual_bounds[j] = q;
                }
                None => {
                    return Ok(LpSolution {
                        status: LpStatus::Unbounded,
                        primal: DVector::zeros(n),
                        dual_eq: DVector::zeros(0),
                        dual_ineq: DVector::zeros(0),
                        dual_bounds: DVector::zeros(n),
                        objective_value: f64::NEG_INFINITY,
                    });
                }
            }
        } else if q < 0.0 {
            match u {
                Some(u) => {
                    primal[j] = u;
                    dual_bounds[j] = q;
                }
                None => {
                    return Ok(LpSolution {
                        status: LpStatus::Unbounded,
                        primal: DVector::zeros(n),
                        dual_eq: DVector::zeros(0),
                        dual_ineq: DVector::zeros(0),
                        dual_bounds: DVector::zeros(n),
                        objective_value: f64::NEG_INFINITY,
                    });
                }
            }
        } else {
            // Zero cost: rest at a bound if one exists, else at zero.
            primal[j] = l.unwrap_or_else(|| u.unwrap_or(0.0));
        }
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        primal: primal.clone(),
        dual_eq: DVector::zeros(0),
        dual_ineq: DVector::zeros(0),
        dual_bounds,
        objective_value: lp.objective.dot(&primal),
    })
}
