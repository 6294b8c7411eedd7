//! Dense two-phase simplex for small linear programs.
//!
//! Solves `min c.x` subject to linear constraints and `x >= 0`, at desk scale
//! (up to a few hundred variables and rows). Uses Bland's rule throughout, so
//! the pivot sequence is deterministic and cannot cycle. Infeasible and
//! unbounded programs are reported as distinct errors.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-10;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    LessEq,
    Eq,
    GreaterEq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coefficients: Vec<f64>,
    pub sense: ConstraintSense,
    pub rhs: f64,
}

impl Constraint {
    pub fn less_eq(coefficients: Vec<f64>, rhs: f64) -> Self {
        Self {
            coefficients,
            sense: ConstraintSense::LessEq,
            rhs,
        }
    }

    pub fn eq(coefficients: Vec<f64>, rhs: f64) -> Self {
        Self {
            coefficients,
            sense: ConstraintSense::Eq,
            rhs,
        }
    }

    pub fn greater_eq(coefficients: Vec<f64>, rhs: f64) -> Self {
        Self {
            coefficients,
            sense: ConstraintSense::GreaterEq,
            rhs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    num_vars: usize,
    art_start: usize,
    total: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        for v in &mut self.rows[row] {
            *v /= p;
        }
        for i in 0..self.rows.len() {
            if i == row {
                continue;
            }
            let f = self.rows[i][col];
            if f != 0.0 {
                for j in 0..=self.total {
                    self.rows[i][j] -= f * self.rows[row][j];
                }
            }
        }
        let f = self.cost[col];
        if f != 0.0 {
            for j in 0..=self.total {
                self.cost[j] -= f * self.rows[row][j];
            }
        }
        self.basis[row] = col;
    }

    /// Bland's rule pivot loop on the current cost row. `allow` filters the
    /// entering columns (used to ban artificials in phase 2).
    fn run(&mut self, allow: impl Fn(usize) -> bool) -> Result<()> {
        let max_iters = 10_000 + 100 * (self.rows.len() + self.total);
        for _ in 0..max_iters {
            let entering = (0..self.total).find(|&j| allow(j) && self.cost[j] < -COST_TOL);
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][col];
                if a > PIVOT_TOL {
                    let ratio = self.rows[i][self.total] / a;
                    let better = match leave {
                        None => true,
                        Some((best_i, best_r)) => {
                            ratio < best_r - PIVOT_TOL
                                || (ratio < best_r + PIVOT_TOL
                                    && self.basis[i] < self.basis[best_i])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((row, _)) => self.pivot(row, col),
                None => return Err(Error::LpUnbounded),
            }
        }
        Err(Error::InvalidConfig(
            "simplex exceeded its iteration limit".into(),
        ))
    }
}

/// Minimizes `objective . x` over `x >= 0` subject to `constraints`.
pub fn simplex_solve(objective: &[f64], constraints: &[Constraint]) -> Result<LpSolution> {
    let n = objective.len();
    for (i, c) in constraints.iter().enumerate() {
        if c.coefficients.len() != n {
            return Err(Error::InvalidConfig(format!(
                "constraint {i} has {} coefficients for {n} variables",
                c.coefficients.len()
            )));
        }
    }
    let m = constraints.len();

    // Normalize to nonnegative right-hand sides.
    let mut senses = Vec::with_capacity(m);
    let mut mat: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs = Vec::with_capacity(m);
    for c in constraints {
        let mut coeffs = c.coefficients.clone();
        let mut b = c.rhs;
        let mut sense = c.sense;
        if b < 0.0 {
            for v in &mut coeffs {
                *v = -*v;
            }
            b = -b;
            sense = match sense {
                ConstraintSense::LessEq => ConstraintSense::GreaterEq,
                ConstraintSense::Eq => ConstraintSense::Eq,
                ConstraintSense::GreaterEq => ConstraintSense::LessEq,
            };
        }
        senses.push(sense);
        mat.push(coeffs);
        rhs.push(b);
    }

    let num_slack = senses
        .iter()
        .filter(|s| !matches!(s, ConstraintSense::Eq))
        .count();
    let num_art = senses
        .iter()
        .filter(|s| !matches!(s, ConstraintSense::LessEq))
        .count();
    let art_start = n + num_slack;
    let total = art_start + num_art;

    let mut rows = vec![vec![0.0; total + 1]; m];
    let mut basis = vec![0usize; m];
    let mut slack_i = 0;
    let mut art_i = 0;
    for i in 0..m {
        rows[i][..n].copy_from_slice(&mat[i]);
        rows[i][total] = rhs[i];
        match senses[i] {
            ConstraintSense::LessEq => {
                rows[i][n + slack_i] = 1.0;
                basis[i] = n + slack_i;
                slack_i += 1;
            }
            ConstraintSense::GreaterEq => {
                rows[i][n + slack_i] = -1.0;
                slack_i += 1;
                rows[i][art_start + art_i] = 1.0;
                basis[i] = art_start + art_i;
                art_i += 1;
            }
            ConstraintSense::Eq => {
                rows[i][art_start + art_i] = 1.0;
                basis[i] = art_start + art_i;
                art_i += 1;
            }
        }
    }

    let mut t = Tableau {
        rows,
        cost: vec![0.0; total + 1],
        basis,
        num_vars: n,
        art_start,
        total,
    };

    // Phase 1: minimize the sum of artificial variables.
    if num_art > 0 {
        for j in art_start..total {
            t.cost[j] = 1.0;
        }
        for i in 0..m {
            if t.basis[i] >= art_start {
                for j in 0..=total {
                    let v = t.rows[i][j];
                    t.cost[j] -= v;
                }
            }
        }
        t.run(|_| true)?;
        let phase1 = -t.cost[total];
        if phase1 > FEAS_TOL {
            return Err(Error::LpInfeasible);
        }
        // Degenerate-pivot remaining artificials out of the basis where possible.
        for i in 0..m {
            if t.basis[i] >= art_start {
                if let Some(j) = (0..art_start).find(|&j| t.rows[i][j].abs() > PIVOT_TOL) {
                    t.pivot(i, j);
                }
            }
        }
    }

    // Phase 2: original objective.
    t.cost = vec![0.0; total + 1];
    t.cost[..n].copy_from_slice(objective);
    for i in 0..m {
        let b = t.basis[i];
        let f = t.cost[b];
        if f != 0.0 {
            for j in 0..=total {
                let v = t.rows[i][j];
                t.cost[j] -= f * v;
            }
        }
    }
    let art_start = t.art_start;
    t.run(|j| j < art_start)?;

    let mut x = vec![0.0; t.num_vars];
    for i in 0..m {
        if t.basis[i] < t.num_vars {
            x[t.basis[i]] = t.rows[i][t.total];
        }
    }
    let objective_value = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        x,
        objective: objective_value,
    })
}
