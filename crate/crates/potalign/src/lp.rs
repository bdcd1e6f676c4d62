//! Exact small-instance partial-OT linear program via dense two-phase simplex.
//!
//! Verification oracle for the entropic solvers at epsilon -> 0: minimize
//! <pi, C> subject to row sums <= p, column sums <= q, total mass = s,
//! pi >= 0, over nm structural variables. Deterministic pivoting: Bland's
//! smallest-index entering rule plus a lexicographic ratio test for the
//! leaving row, so oracle outputs are reproducible and cycle-free.

use crate::metric::CostMatrix;
use crate::solver::TransportPlan;
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Largest marginal size the oracle accepts.
pub const ORACLE_LIMIT: usize = 6;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-9;

/// Solution detail beyond the plan itself, used by oracle-agreement tests to
/// screen for unique, well-separated optima.
#[derive(Clone, Debug)]
pub struct LpSolution {
    pub plan: DenseTensor,
    pub objective: f64,
    /// Minimum reduced cost over nonbasic structural variables at optimality.
    /// Strictly positive values certify a unique vertex with that margin.
    pub min_reduced_cost: f64,
    /// Smallest basic structural value (degeneracy indicator).
    pub min_basic_value: f64,
    /// |dual| of each row inequality (reduced cost of its slack; 0 when the
    /// slack is basic, i.e. the constraint is inactive).
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
    /// Slack level of each row/column inequality at the optimum.
    pub row_slacks: Vec<f64>,
    pub col_slacks: Vec<f64>,
    pub pivots: usize,
}

impl LpSolution {
    /// True when every inequality is either clearly inactive (slack at least
    /// `slack_margin`) or strongly active (|dual| at least `dual_margin`).
    /// Near-degenerate constraint activity makes the entropic limit
    /// ill-separated, so oracle-agreement tests screen on this.
    pub fn well_separated(&self, slack_margin: f64, dual_margin: f64) -> bool {
        self.row_slacks
            .iter()
            .zip(&self.row_duals)
            .chain(self.col_slacks.iter().zip(&self.col_duals))
            .all(|(&slack, &dual)| slack >= slack_margin || dual >= dual_margin)
    }
}

struct Tableau {
    rows: usize,
    cols: usize, // without RHS
    t: Vec<f64>, // rows x (cols + 1), last column RHS
    basis: Vec<usize>,
}

impl Tableau {
    fn rhs(&self, r: usize) -> f64 {
        self.t[r * (self.cols + 1) + self.cols]
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * (self.cols + 1) + c]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let pv = self.t[pr * w + pc];
        for c in 0..w {
            self.t[pr * w + c] /= pv;
        }
        for r in 0..self.rows {
            if r == pr {
                continue;
            }
            let factor = self.t[r * w + pc];
            if factor == 0.0 {
                continue;
            }
            for c in 0..w {
                self.t[r * w + c] -= factor * self.t[pr * w + c];
            }
        }
        self.basis[pr] = pc;
    }

    /// Minimize c.x from the current basic feasible point. `barred` columns
    /// never enter. Returns the number of pivots performed.
    fn run(&mut self, cost: &[f64], barred: usize) -> Result<usize> {
        let mut pivots = 0;
        for _ in 0..20_000 {
            // Reduced costs d_j = c_j - c_B . column_j, recomputed exactly.
            let mut entering = None;
            for j in 0..self.cols {
                if j == barred || self.basis.contains(&j) {
                    continue;
                }
                let mut d = cost[j];
                for r in 0..self.rows {
                    let cb = cost[self.basis[r]];
                    if cb != 0.0 {
                        d -= cb * self.at(r, j);
                    }
                }
                if d < -COST_TOL {
                    entering = Some(j); // Bland: first (smallest) index
                    break;
                }
            }
            let Some(e) = entering else {
                return Ok(pivots);
            };

            // Lexicographic ratio test.
            let mut leave: Option<usize> = None;
            for r in 0..self.rows {
                let a = self.at(r, e);
                if a <= PIVOT_TOL {
                    continue;
                }
                match leave {
                    None => leave = Some(r),
                    Some(cur) => {
                        let ratio_new = self.rhs(r) / a;
                        let ratio_cur = self.rhs(cur) / self.at(cur, e);
                        let strictly_better = ratio_new < ratio_cur - PIVOT_TOL;
                        let tied_lex = (ratio_new - ratio_cur).abs() <= PIVOT_TOL
                            && self.lex_smaller(r, cur, e);
                        if strictly_better || tied_lex {
                            leave = Some(r);
                        }
                    }
                }
            }
            let Some(lr) = leave else {
                return Err(Error::Domain {
                    op: "simplex",
                    detail: "unbounded direction in a bounded transport program".into(),
                });
            };
            self.pivot(lr, e);
            pivots += 1;
        }
        Err(Error::Domain {
            op: "simplex",
            detail: "pivot limit exceeded".into(),
        })
    }

    /// True when row `a`, scaled by its pivot-column entry, is
    /// lexicographically smaller than row `b` scaled likewise.
    fn lex_smaller(&self, a: usize, b: usize, pivot_col: usize) -> bool {
        let pa = self.at(a, pivot_col);
        let pb = self.at(b, pivot_col);
        for c in 0..=self.cols {
            let va = self.t[a * (self.cols + 1) + c] / pa;
            let vb = self.t[b * (self.cols + 1) + c] / pb;
            if (va - vb).abs() > PIVOT_TOL {
                return va < vb;
            }
        }
        false
    }
}

/// Exact minimizer of the unregularized partial-OT LP.
pub fn exact_pot_lp(cost: &CostMatrix, p: &[f64], q: &[f64], s: f64) -> Result<TransportPlan> {
    let detail = exact_pot_lp_detailed(cost, p, q, s)?;
    Ok(TransportPlan::from_matrix(detail.plan, detail.pivots, true))
}

/// Exact LP solve with reduced-cost and degeneracy reporting.
pub fn exact_pot_lp_detailed(
    cost: &CostMatrix,
    p: &[f64],
    q: &[f64],
    s: f64,
) -> Result<LpSolution> {
    let (n, m) = cost.shape();
    if n > ORACLE_LIMIT || m > ORACLE_LIMIT {
        return Err(Error::OracleLimit {
            limit: ORACLE_LIMIT,
            n,
            m,
        });
    }
    if p.len() != n || q.len() != m {
        return Err(Error::ShapeMismatch {
            op: "exact_pot_lp",
            detail: format!("cost {n}x{m} vs p {} / q {}", p.len(), q.len()),
        });
    }
    let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
    if s < 0.0 || s > max_mass + 1e-12 {
        return Err(Error::InfeasibleMass { mass: s, max: max_mass });
    }
    if s == 0.0 {
        return Ok(LpSolution {
            plan: DenseTensor::zeros(&[n, m]),
            objective: 0.0,
            min_reduced_cost: 0.0,
            min_basic_value: 0.0,
            row_duals: vec![0.0; n],
            col_duals: vec![0.0; m],
            row_slacks: p.to_vec(),
            col_slacks: q.to_vec(),
            pivots: 0,
        });
    }

    let nm = n * m;
    let cols = nm + n + m + 1; // structural | row slacks | col slacks | artificial
    let rows = n + m + 1;
    let artificial = nm + n + m;
    let w = cols + 1;
    let mut t = vec![0.0; rows * w];

    for i in 0..n {
        for j in 0..m {
            t[i * w + (i * m + j)] = 1.0;
        }
        t[i * w + (nm + i)] = 1.0;
        t[i * w + cols] = p[i];
    }
    for j in 0..m {
        let r = n + j;
        for i in 0..n {
            t[r * w + (i * m + j)] = 1.0;
        }
        t[r * w + (nm + n + j)] = 1.0;
        t[r * w + cols] = q[j];
    }
    let mass_row = n + m;
    for v in 0..nm {
        t[mass_row * w + v] = 1.0;
    }
    t[mass_row * w + artificial] = 1.0;
    t[mass_row * w + cols] = s;

    let mut basis: Vec<usize> = (0..n).map(|i| nm + i).collect();
    basis.extend((0..m).map(|j| nm + n + j));
    basis.push(artificial);

    let mut tab = Tableau { rows, cols, t, basis };

    // Phase 1: drive the artificial variable to zero.
    let mut phase1 = vec![0.0; cols];
    phase1[artificial] = 1.0;
    let p1 = tab.run(&phase1, cols)?; // nothing barred in phase 1
    let infeasibility: f64 = tab
        .basis
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == artificial)
        .map(|(r, _)| tab.rhs(r))
        .sum();
    if infeasibility > 1e-9 {
        return Err(Error::InfeasibleMass { mass: s, max: max_mass });
    }

    // Phase 2: minimize the transport cost; the artificial never re-enters.
    let mut phase2 = vec![0.0; cols];
    phase2[..nm].copy_from_slice(cost.values().data());
    let p2 = tab.run(&phase2, artificial)?;

    let mut plan = DenseTensor::zeros(&[n, m]);
    let mut min_basic = f64::INFINITY;
    for r in 0..rows {
        let b = tab.basis[r];
        if b < nm {
            let v = tab.rhs(r).max(0.0);
            plan.set_at(b / m, b % m, v);
            min_basic = min_basic.min(v);
        }
    }
    let objective = crate::tensor::frobenius_dot(&plan, cost.values());

    let reduced_cost = |tab: &Tableau, j: usize| -> f64 {
        let mut d = phase2[j];
        for r in 0..rows {
            let cb = phase2[tab.basis[r]];
            if cb != 0.0 {
                d -= cb * tab.at(r, j);
            }
        }
        d
    };
    let mut min_reduced = f64::INFINITY;
    for j in 0..nm {
        if tab.basis.contains(&j) {
            continue;
        }
        min_reduced = min_reduced.min(reduced_cost(&tab, j));
    }
    if !min_reduced.is_finite() {
        min_reduced = 0.0;
    }
    if !min_basic.is_finite() {
        min_basic = 0.0;
    }

    // |dual| of each inequality from its slack column; slack level from the
    // basic solution.
    let slack_value = |tab: &Tableau, col: usize| -> f64 {
        tab.basis
            .iter()
            .position(|&b| b == col)
            .map(|r| tab.rhs(r))
            .unwrap_or(0.0)
    };
    let row_duals: Vec<f64> = (0..n).map(|i| reduced_cost(&tab, nm + i).max(0.0)).collect();
    let col_duals: Vec<f64> = (0..m)
        .map(|j| reduced_cost(&tab, nm + n + j).max(0.0))
        .collect();
    let row_slacks: Vec<f64> = (0..n).map(|i| slack_value(&tab, nm + i)).collect();
    let col_slacks: Vec<f64> = (0..m).map(|j| slack_value(&tab, nm + n + j)).collect();

    Ok(LpSolution {
        plan,
        objective,
        min_reduced_cost: min_reduced,
        min_basic_value: min_basic,
        row_duals,
        col_duals,
        row_slacks,
        col_slacks,
        pivots: p1 + p2,
    })
}
