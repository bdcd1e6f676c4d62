//! Entropic optimal transport solvers.
//!
//! Two problems are solved here, both in the log domain with max-subtracted
//! log-sum-exp throughout (naive scaling underflows at small epsilon):
//!
//! - balanced entropic OT ([`sinkhorn`]): minimize <pi, C> - eps H(pi) over
//!   couplings with exact marginals p, q;
//! - entropic partial OT ([`partial_ot`]): same objective over plans with
//!   row sums <= p, column sums <= q, and total mass exactly s, solved by
//!   Dykstra's algorithm in KL geometry, cycling over the three constraint
//!   sets with correction terms.
//!
//! A dummy-point route ([`partial_ot_dummy`]) reduces the partial problem to
//! a balanced solve on an augmented (n+1)x(m+1) instance and is kept as an
//! independent cross-check of the Dykstra formulation.
//!
//! Both solvers also exist as tape builders ([`sinkhorn_on_tape`],
//! [`partial_ot_on_tape`]) that unroll a fixed number of iterations for
//! reverse-mode differentiation; the iteration count is chosen from the
//! untaped solve and capped so backward tapes stay bounded.

use serde::{Deserialize, Serialize};

use crate::metric::CostMatrix;
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Entropic solver settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Entropy regularization coefficient, > 0.
    pub epsilon: f64,
    /// Mass to transport (absolute, in the same units as the marginals).
    pub mass: f64,
    pub max_iterations: usize,
    /// Marginal-violation threshold for convergence.
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.05,
            mass: 1.0,
            max_iterations: 10_000,
            tolerance: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn with_mass(mass: f64) -> Self {
        SolverConfig {
            mass,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// A (possibly incomplete) transport plan.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// n x m nonnegative coupling matrix.
    pub plan: DenseTensor,
    /// Total transported mass, sum of all plan entries.
    pub achieved_mass: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

impl TransportPlan {
    pub fn from_matrix(plan: DenseTensor, iterations_used: usize, converged: bool) -> Self {
        let achieved_mass = plan.total();
        TransportPlan {
            plan,
            achieved_mass,
            iterations_used,
            converged,
        }
    }

    /// Transport cost <pi, C> of this plan under a cost matrix.
    pub fn objective(&self, cost: &CostMatrix) -> f64 {
        crate::tensor::frobenius_dot(&self.plan, cost.values())
    }
}

/// Constraint-violation summary of a plan.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PlanDiagnostics {
    /// max_i max(0, row_sum_i - p_i)
    pub row_violation: f64,
    /// max_j max(0, col_sum_j - q_j)
    pub col_violation: f64,
    /// |total mass - s|
    pub mass_error: f64,
    /// -sum pi log pi with 0 log 0 = 0
    pub entropy: f64,
}

/// Violations and entropy of a plan against marginals p, q and mass s.
pub fn plan_diagnostics(plan: &DenseTensor, p: &[f64], q: &[f64], s: f64) -> PlanDiagnostics {
    let (n, m) = (plan.rows(), plan.cols());
    assert_eq!(n, p.len(), "plan rows vs p length");
    assert_eq!(m, q.len(), "plan cols vs q length");
    let mut row_violation: f64 = 0.0;
    for i in 0..n {
        let r: f64 = (0..m).map(|j| plan.at(i, j)).sum();
        row_violation = row_violation.max(r - p[i]);
    }
    let mut col_violation: f64 = 0.0;
    for j in 0..m {
        let c: f64 = (0..n).map(|i| plan.at(i, j)).sum();
        col_violation = col_violation.max(c - q[j]);
    }
    let entropy = -plan
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>();
    PlanDiagnostics {
        row_violation: row_violation.max(0.0),
        col_violation: col_violation.max(0.0),
        mass_error: (plan.total() - s).abs(),
        entropy,
    }
}

fn check_marginals(cost: &CostMatrix, p: &[f64], q: &[f64]) -> Result<(usize, usize)> {
    let (n, m) = cost.shape();
    if p.len() != n || q.len() != m {
        return Err(Error::ShapeMismatch {
            op: "solver",
            detail: format!("cost {n}x{m} vs p {} / q {}", p.len(), q.len()),
        });
    }
    if p.iter().chain(q.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain {
            op: "solver",
            detail: "marginals must be nonnegative and finite".into(),
        });
    }
    Ok((n, m))
}

fn lse(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

// ── Balanced entropic OT ─────────────────────────────────────────────

/// Log-domain Sinkhorn for balanced entropic OT.
///
/// Requires sum(p) = sum(q) within 1e-12. Non-convergence within
/// `max_iterations` is flagged on the returned plan, not thrown.
pub fn sinkhorn(cost: &CostMatrix, p: &[f64], q: &[f64], cfg: &SolverConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = check_marginals(cost, p, q)?;
    let sum_p: f64 = p.iter().sum();
    let sum_q: f64 = q.iter().sum();
    if (sum_p - sum_q).abs() > 1e-12 {
        return Err(Error::MarginalMismatch { sum_p, sum_q });
    }
    if sum_p == 0.0 {
        return Ok(TransportPlan::from_matrix(DenseTensor::zeros(&[n, m]), 0, true));
    }

    // Restrict to positive-marginal support; zero rows/columns carry nothing.
    let rows: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| q[j] > 0.0).collect();
    let pr: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let qr: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let (rn, rm) = (rows.len(), cols.len());
    let eps = cfg.epsilon;

    // log kernel restricted to the support
    let mut lk = vec![0.0; rn * rm];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            lk[a * rm + b] = -cost.values().at(i, j) / eps;
        }
    }
    let ln_p: Vec<f64> = pr.iter().map(|v| v.ln()).collect();
    let ln_q: Vec<f64> = qr.iter().map(|v| v.ln()).collect();

    // Dual potentials (divided by eps), updated alternately.
    let mut f = vec![0.0; rn];
    let mut g = vec![0.0; rm];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        for a in 0..rn {
            f[a] = ln_p[a] - lse((0..rm).map(|b| lk[a * rm + b] + g[b]));
        }
        for b in 0..rm {
            g[b] = ln_q[b] - lse((0..rn).map(|a| lk[a * rm + b] + f[a]));
        }
        // After the g update column marginals are exact; check rows.
        let mut err: f64 = 0.0;
        for a in 0..rn {
            let row: f64 = (0..rm).map(|b| (lk[a * rm + b] + f[a] + g[b]).exp()).sum();
            err = err.max((row - pr[a]).abs());
        }
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut plan = DenseTensor::zeros(&[n, m]);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            plan.set_at(i, j, (lk[a * rm + b] + f[a] + g[b]).exp());
        }
    }
    Ok(TransportPlan::from_matrix(plan, iterations, converged))
}

// ── Entropic partial OT (Dykstra) ────────────────────────────────────

/// Internal log-domain Dykstra state for the three-constraint partial
/// problem. One `cycle` projects onto {rows <= p}, {cols <= q}, {mass = s},
/// each with its Dykstra correction.
struct DykstraState {
    n: usize,
    m: usize,
    x: Vec<f64>,   // log plan
    e_row: Vec<f64>,
    e_col: Vec<f64>,
    e_mass: f64,
    ln_p: Vec<f64>,
    ln_q: Vec<f64>,
    ln_s: f64,
}

impl DykstraState {
    fn new(log_kernel: Vec<f64>, n: usize, m: usize, p: &[f64], q: &[f64], s: f64) -> Self {
        DykstraState {
            n,
            m,
            x: log_kernel,
            e_row: vec![0.0; n],
            e_col: vec![0.0; m],
            e_mass: 0.0,
            ln_p: p.iter().map(|v| v.ln()).collect(),
            ln_q: q.iter().map(|v| v.ln()).collect(),
            ln_s: s.ln(),
        }
    }

    fn cycle(&mut self) {
        let (n, m) = (self.n, self.m);
        // rows <= p
        for i in 0..n {
            let y_off = self.e_row[i];
            let r = lse((0..m).map(|j| self.x[i * m + j] + y_off));
            let shift = (self.ln_p[i] - r).min(0.0);
            for j in 0..m {
                self.x[i * m + j] += y_off + shift;
            }
            self.e_row[i] = -shift;
        }
        // cols <= q
        for j in 0..m {
            let y_off = self.e_col[j];
            let c = lse((0..n).map(|i| self.x[i * m + j] + y_off));
            let shift = (self.ln_q[j] - c).min(0.0);
            for i in 0..n {
                self.x[i * m + j] += y_off + shift;
            }
            self.e_col[j] = -shift;
        }
        // total mass = s
        let y_off = self.e_mass;
        let total = lse(self.x.iter().map(|v| v + y_off));
        let shift = self.ln_s - total;
        for v in self.x.iter_mut() {
            *v += y_off + shift;
        }
        self.e_mass = -shift;
    }

    fn violations(&self, p: &[f64], q: &[f64], s: f64) -> (f64, f64, f64) {
        let (n, m) = (self.n, self.m);
        let mut row: f64 = 0.0;
        let mut col_sums = vec![0.0; m];
        let mut total = 0.0;
        for i in 0..n {
            let mut r = 0.0;
            for j in 0..m {
                let v = self.x[i * m + j].exp();
                r += v;
                col_sums[j] += v;
                total += v;
            }
            row = row.max(r - p[i]);
        }
        let col = (0..m).map(|j| col_sums[j] - q[j]).fold(0.0, f64::max);
        (row.max(0.0), col, (total - s).abs())
    }
}

/// Entropic partial OT: minimize <pi, C> - eps H(pi) subject to
/// row sums <= p, column sums <= q, total mass = s.
pub fn partial_ot(cost: &CostMatrix, p: &[f64], q: &[f64], cfg: &SolverConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = check_marginals(cost, p, q)?;
    let s = cfg.mass;
    let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
    if s < 0.0 || s > max_mass + 1e-12 {
        return Err(Error::InfeasibleMass { mass: s, max: max_mass });
    }
    if s == 0.0 {
        return Ok(TransportPlan::from_matrix(DenseTensor::zeros(&[n, m]), 0, true));
    }

    // Zero-marginal rows and columns never carry mass; solve on the support.
    let rows: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| q[j] > 0.0).collect();
    let pr: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let qr: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let (rn, rm) = (rows.len(), cols.len());

    let mut lk = vec![0.0; rn * rm];
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            lk[a * rm + b] = -cost.values().at(i, j) / cfg.epsilon;
        }
    }

    let mut state = DykstraState::new(lk, rn, rm, &pr, &qr, s);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        state.cycle();
        let (rv, cv, me) = state.violations(&pr, &qr, s);
        if rv <= cfg.tolerance && cv <= cfg.tolerance && me <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut plan = DenseTensor::zeros(&[n, m]);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            plan.set_at(i, j, state.x[a * rm + b].exp());
        }
    }
    Ok(TransportPlan::from_matrix(plan, iterations, converged))
}

/// Number of Dykstra cycles an untaped solve uses at these settings, capped.
/// The taped unroll replays exactly this many cycles.
pub fn partial_ot_cycle_count(
    cost: &CostMatrix,
    p: &[f64],
    q: &[f64],
    cfg: &SolverConfig,
    cap: usize,
) -> Result<usize> {
    let solved = partial_ot(cost, p, q, cfg)?;
    Ok(solved.iterations_used.clamp(1, cap))
}

// ── Dummy-point cross-check route ────────────────────────────────────

/// Partial OT via dummy-point augmentation: append an absorbing row and
/// column with zero cost, run balanced Sinkhorn on the (n+1)x(m+1) instance
/// with marginals (p, sum q - s) and (q, sum p - s), truncate the real block.
pub fn partial_ot_dummy(
    cost: &CostMatrix,
    p: &[f64],
    q: &[f64],
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = check_marginals(cost, p, q)?;
    let s = cfg.mass;
    let sum_p: f64 = p.iter().sum();
    let sum_q: f64 = q.iter().sum();
    let max_mass = sum_p.min(sum_q);
    if s < 0.0 || s > max_mass + 1e-12 {
        return Err(Error::InfeasibleMass { mass: s, max: max_mass });
    }
    if s == 0.0 {
        return Ok(TransportPlan::from_matrix(DenseTensor::zeros(&[n, m]), 0, true));
    }

    let mut aug = DenseTensor::zeros(&[n + 1, m + 1]);
    for i in 0..n {
        for j in 0..m {
            aug.set_at(i, j, cost.values().at(i, j));
        }
    }
    let mut p_aug = p.to_vec();
    p_aug.push((sum_q - s).max(0.0));
    let mut q_aug = q.to_vec();
    q_aug.push((sum_p - s).max(0.0));

    // Equalize the augmented totals exactly (guards accumulated rounding).
    let tp: f64 = p_aug.iter().sum();
    let tq: f64 = q_aug.iter().sum();
    q_aug[m] += tp - tq;
    if q_aug[m] < 0.0 {
        q_aug[m] = 0.0;
    }

    let aug_cost = CostMatrix::new(aug)?;
    let solved = sinkhorn(&aug_cost, &p_aug, &q_aug, cfg)?;
    let mut block = DenseTensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            block.set_at(i, j, solved.plan.at(i, j));
        }
    }
    Ok(TransportPlan::from_matrix(
        block,
        solved.iterations_used,
        solved.converged,
    ))
}

// ── Taped (unrolled) solver builders ─────────────────────────────────

/// Ln of marginal entries as a tape constant; requires strictly positive
/// marginals (training marginals are uniform 1/b).
fn ln_constant(tape: &mut Tape, values: &[f64], shape: [usize; 2]) -> Result<NodeId> {
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain {
            op: "solver_on_tape",
            detail: "taped solvers require strictly positive marginals".into(),
        });
    }
    let data: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    Ok(tape.constant(DenseTensor::from_vec(shape.to_vec(), data)?))
}

/// Unroll `cycles` Dykstra cycles of the partial-OT solve on the tape.
/// Returns the log-plan node; gradients flow through every cycle into the
/// cost node.
pub fn partial_ot_on_tape(
    tape: &mut Tape,
    cost: NodeId,
    p: &[f64],
    q: &[f64],
    cfg: &SolverConfig,
    cycles: usize,
) -> Result<NodeId> {
    cfg.validate()?;
    let (n, m) = (tape.value(cost).rows(), tape.value(cost).cols());
    if p.len() != n || q.len() != m {
        return Err(Error::ShapeMismatch {
            op: "partial_ot_on_tape",
            detail: format!("cost {n}x{m} vs p {} / q {}", p.len(), q.len()),
        });
    }
    let s = cfg.mass;
    let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
    if s <= 0.0 || s > max_mass + 1e-12 {
        return Err(Error::InfeasibleMass { mass: s, max: max_mass });
    }

    let ln_p = ln_constant(tape, p, [n, 1])?;
    let ln_q = ln_constant(tape, q, [1, m])?;
    let ln_s = tape.constant(DenseTensor::scalar(s.ln()));

    let mut x = tape.scale(cost, -1.0 / cfg.epsilon)?;
    let mut e_row = tape.constant(DenseTensor::zeros(&[n, 1]));
    let mut e_col = tape.constant(DenseTensor::zeros(&[1, m]));
    let mut e_mass = tape.constant(DenseTensor::scalar(0.0));

    for _ in 0..cycles {
        // rows <= p
        let y = {
            let b = tape.broadcast_cols(e_row, m)?;
            tape.add(x, b)?
        };
        let r = tape.logsumexp(y, 1)?;
        let gap = tape.sub(ln_p, r)?;
        let shift = tape.clamp_max(gap, 0.0)?;
        let bshift = tape.broadcast_cols(shift, m)?;
        x = tape.add(y, bshift)?;
        e_row = tape.scale(shift, -1.0)?;

        // cols <= q
        let y = {
            let b = tape.broadcast_rows(e_col, n)?;
            tape.add(x, b)?
        };
        let c = tape.logsumexp(y, 0)?;
        let gap = tape.sub(ln_q, c)?;
        let shift = tape.clamp_max(gap, 0.0)?;
        let bshift = tape.broadcast_rows(shift, n)?;
        x = tape.add(y, bshift)?;
        e_col = tape.scale(shift, -1.0)?;

        // mass = s
        let y = {
            let b = tape.broadcast_scalar(e_mass, n, m)?;
            tape.add(x, b)?
        };
        let row_lse = tape.logsumexp(y, 1)?;
        let total = tape.logsumexp(row_lse, 0)?;
        let shift = tape.sub(ln_s, total)?;
        let bshift = tape.broadcast_scalar(shift, n, m)?;
        x = tape.add(y, bshift)?;
        e_mass = tape.scale(shift, -1.0)?;
    }
    Ok(x)
}

/// Unroll `iterations` Sinkhorn rounds of the balanced solve on the tape.
/// Returns the log-plan node.
pub fn sinkhorn_on_tape(
    tape: &mut Tape,
    cost: NodeId,
    p: &[f64],
    q: &[f64],
    cfg: &SolverConfig,
    iterations: usize,
) -> Result<NodeId> {
    cfg.validate()?;
    let (n, m) = (tape.value(cost).rows(), tape.value(cost).cols());
    let sum_p: f64 = p.iter().sum();
    let sum_q: f64 = q.iter().sum();
    if (sum_p - sum_q).abs() > 1e-12 {
        return Err(Error::MarginalMismatch { sum_p, sum_q });
    }
    let ln_p = ln_constant(tape, p, [n, 1])?;
    let ln_q = ln_constant(tape, q, [1, m])?;

    let lk = tape.scale(cost, -1.0 / cfg.epsilon)?;
    let mut f = tape.constant(DenseTensor::zeros(&[n, 1]));
    let mut g = tape.constant(DenseTensor::zeros(&[1, m]));
    for _ in 0..iterations {
        let gb = tape.broadcast_rows(g, n)?;
        let a = tape.add(lk, gb)?;
        let ls = tape.logsumexp(a, 1)?;
        f = tape.sub(ln_p, ls)?;

        let fb = tape.broadcast_cols(f, m)?;
        let a = tape.add(lk, fb)?;
        let ls = tape.logsumexp(a, 0)?;
        g = tape.sub(ln_q, ls)?;
    }
    let fb = tape.broadcast_cols(f, m)?;
    let gb = tape.broadcast_rows(g, n)?;
    let sum_fg = tape.add(fb, gb)?;
    tape.add(lk, sum_fg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::CostMatrix;

    fn cost(rows: usize, cols: usize, v: Vec<f64>) -> CostMatrix {
        CostMatrix::new(DenseTensor::from_vec(vec![rows, cols], v).unwrap()).unwrap()
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let c = cost(2, 2, vec![0.0; 4]);
        let plan = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &SolverConfig::default()).unwrap();
        assert!(plan.converged);
        for i in 0..2 {
            for j in 0..2 {
                assert!((plan.plan.at(i, j) - 0.25).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_point_moves_all_mass() {
        let c = cost(1, 1, vec![0.3]);
        let plan = sinkhorn(&c, &[1.0], &[1.0], &SolverConfig::default()).unwrap();
        assert!((plan.plan.at(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_epsilon_recovers_diagonal() {
        let c = cost(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let cfg = SolverConfig {
            epsilon: 1e-3,
            ..Default::default()
        };
        let plan = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        assert!((plan.plan.at(0, 0) - 0.5).abs() < 1e-3);
        assert!(plan.plan.at(0, 1) < 1e-3);
        assert!(plan.plan.at(1, 0) < 1e-3);
    }

    #[test]
    fn marginal_mismatch_rejected() {
        let c = cost(2, 2, vec![0.0; 4]);
        let r = sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.6], &SolverConfig::default());
        assert!(matches!(r, Err(Error::MarginalMismatch { .. })));
    }

    #[test]
    fn partial_zero_mass_gives_zero_plan() {
        let c = cost(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let cfg = SolverConfig::with_mass(0.0);
        let plan = partial_ot(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        assert_eq!(plan.achieved_mass, 0.0);
        assert!(plan.converged);
    }

    #[test]
    fn partial_half_mass_prefers_cheap_diagonal() {
        let c = cost(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let cfg = SolverConfig {
            epsilon: 1e-3,
            mass: 0.5,
            ..Default::default()
        };
        let plan = partial_ot(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg).unwrap();
        assert!(plan.converged, "iterations {}", plan.iterations_used);
        assert!((plan.plan.at(0, 0) - 0.25).abs() < 1e-3, "plan {:?}", plan.plan);
        assert!((plan.plan.at(1, 1) - 0.25).abs() < 1e-3);
        assert!(plan.plan.at(0, 1) < 1e-6);
    }

    #[test]
    fn partial_infeasible_mass_rejected() {
        let c = cost(2, 2, vec![0.0; 4]);
        let cfg = SolverConfig::with_mass(2.0);
        let r = partial_ot(&c, &[0.5, 0.5], &[0.5, 0.5], &cfg);
        assert!(matches!(r, Err(Error::InfeasibleMass { .. })));
    }

    #[test]
    fn full_mass_partial_matches_sinkhorn() {
        let c = cost(2, 3, vec![0.2, 0.8, 0.4, 0.7, 0.1, 0.5]);
        let p = [0.6, 0.4];
        let q = [0.3, 0.3, 0.4];
        let cfg = SolverConfig::with_mass(1.0);
        let partial = partial_ot(&c, &p, &q, &cfg).unwrap();
        let balanced = sinkhorn(&c, &p, &q, &cfg).unwrap();
        assert!(partial.plan.max_abs_diff(&balanced.plan) < 1e-6);
    }

    #[test]
    fn entropy_of_product_coupling() {
        let plan = DenseTensor::filled(&[2, 2], 0.25);
        let d = plan_diagnostics(&plan, &[0.5, 0.5], &[0.5, 0.5], 1.0);
        assert!((d.entropy - 4.0_f64.ln()).abs() < 1e-12);
        assert!(d.mass_error < 1e-12);
    }

    #[test]
    fn taped_partial_matches_untaped() {
        let c = cost(3, 3, vec![0.3, 0.9, 0.2, 0.8, 0.1, 0.7, 0.4, 0.6, 0.5]);
        let p = [0.4, 0.3, 0.3];
        let q = [0.2, 0.5, 0.3];
        let cfg = SolverConfig {
            mass: 0.7,
            ..Default::default()
        };
        let solved = partial_ot(&c, &p, &q, &cfg).unwrap();
        assert!(solved.converged);

        let mut tape = Tape::new();
        let cn = tape.constant(c.values().clone());
        let log_plan =
            partial_ot_on_tape(&mut tape, cn, &p, &q, &cfg, solved.iterations_used).unwrap();
        let taped: Vec<f64> = tape.value(log_plan).data().iter().map(|v| v.exp()).collect();
        for (a, b) in taped.iter().zip(solved.plan.data()) {
            assert!((a - b).abs() < 1e-10, "taped {a} vs untaped {b}");
        }
    }

    #[test]
    fn taped_sinkhorn_matches_untaped() {
        let c = cost(2, 2, vec![0.1, 0.7, 0.6, 0.2]);
        let p = [0.5, 0.5];
        let q = [0.4, 0.6];
        let cfg = SolverConfig::default();
        let solved = sinkhorn(&c, &p, &q, &cfg).unwrap();
        assert!(solved.converged);

        let mut tape = Tape::new();
        let cn = tape.constant(c.values().clone());
        let log_plan = sinkhorn_on_tape(&mut tape, cn, &p, &q, &cfg, solved.iterations_used).unwrap();
        let taped: Vec<f64> = tape.value(log_plan).data().iter().map(|v| v.exp()).collect();
        for (a, b) in taped.iter().zip(solved.plan.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
