//! Shared helpers for integration tests.

#![allow(dead_code)]

use potalign::lp::{exact_pot_lp_detailed, LpSolution};
use potalign::metric::CostMatrix;
use potalign::rng::Rng;
use potalign::tensor::DenseTensor;

pub struct OracleInstance {
    pub cost: CostMatrix,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub s: f64,
    pub lp: LpSolution,
}

/// Random partial-OT instances with a unique, well-separated LP optimum:
/// nonbasic reduced costs and active-constraint duals bounded away from
/// zero, nondegenerate basis, and a strictly positive mass shadow price.
/// On such instances the entropic solutions collapse cleanly onto the LP
/// vertex as epsilon shrinks.
pub fn well_separated_instances(seed: u64, count: usize, max_side: usize) -> Vec<OracleInstance> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    let mut tried = 0;
    while out.len() < count {
        tried += 1;
        assert!(tried < 100_000, "instance generator exhausted");
        let n = 2 + rng.below(max_side - 1);
        let m = 2 + rng.below(max_side - 1);
        let cost = CostMatrix::new(
            DenseTensor::from_vec(vec![n, m], (0..n * m).map(|_| rng.range(0.1, 1.0)).collect())
                .unwrap(),
        )
        .unwrap();
        let p: Vec<f64> = (0..n).map(|_| rng.range(0.1, 1.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.range(0.1, 1.0)).collect();
        let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
        let s = 0.5 * max_mass;

        let lp = exact_pot_lp_detailed(&cost, &p, &q, s).unwrap();
        let lp_up = exact_pot_lp_detailed(&cost, &p, &q, (s + 0.02).min(max_mass)).unwrap();
        let shadow = (lp_up.objective - lp.objective) / 0.02;
        if lp.min_reduced_cost < 0.1
            || lp.min_basic_value < 0.02
            || shadow < 0.1
            || !lp.well_separated(0.02, 0.1)
        {
            continue;
        }
        out.push(OracleInstance { cost, p, q, s, lp });
    }
    out
}

/// Random feasible partial-OT instances with no separation screening.
pub fn random_instances(seed: u64, count: usize, max_side: usize) -> Vec<(CostMatrix, Vec<f64>, Vec<f64>, f64)> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let n = 2 + rng.below(max_side - 1);
            let m = 2 + rng.below(max_side - 1);
            let cost = CostMatrix::new(
                DenseTensor::from_vec(
                    vec![n, m],
                    (0..n * m).map(|_| rng.range(0.0, 1.0)).collect(),
                )
                .unwrap(),
            )
            .unwrap();
            let p: Vec<f64> = (0..n).map(|_| rng.range(0.05, 1.0)).collect();
            let q: Vec<f64> = (0..m).map(|_| rng.range(0.05, 1.0)).collect();
            let max_mass = p.iter().sum::<f64>().min(q.iter().sum::<f64>());
            let s = rng.range(0.05, 0.95) * max_mass;
            (cost, p, q, s)
        })
        .collect()
}
