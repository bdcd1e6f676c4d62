//! Property tests for the metric and solver invariants.

use proptest::prelude::*;

use potalign::loss::contrastive_loss;
use potalign::metric::{min_eigenvalue, pairwise_cost, project_psd, GroundMetric};
use potalign::solver::{partial_ot, plan_diagnostics, SolverConfig};
use potalign::metric::CostMatrix;
use potalign::tensor::DenseTensor;

fn finite_in(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL.prop_map(move |v| lo + (hi - lo) * (v.abs().fract()))
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn mahalanobis_identity_equals_euclidean(
        data in prop::collection::vec(finite_in(-3.0, 3.0), 12),
    ) {
        let a = DenseTensor::from_vec(vec![4, 3], data.clone()).unwrap();
        let m = GroundMetric::mahalanobis(DenseTensor::eye(3, 1.0)).unwrap();
        let c_m = pairwise_cost(&a, &a, &m).unwrap();
        let c_e = pairwise_cost(&a, &a, &GroundMetric::Euclidean).unwrap();
        prop_assert!(c_m.values().max_abs_diff(c_e.values()) < 1e-12);
    }

    #[test]
    fn self_cost_matrix_is_symmetric(
        data in prop::collection::vec(finite_in(-2.0, 2.0), 8),
        seeds in prop::collection::vec(finite_in(-1.0, 1.0), 4),
    ) {
        let a = DenseTensor::from_vec(vec![4, 2], data).unwrap();
        // Random PSD matrix g g^T + small identity.
        let g = DenseTensor::from_vec(vec![2, 2], seeds).unwrap();
        let mut m = DenseTensor::eye(2, 0.1);
        for i in 0..2 {
            for j in 0..2 {
                let v = m.at(i, j) + (0..2).map(|k| g.at(i, k) * g.at(j, k)).sum::<f64>();
                m.set_at(i, j, v);
            }
        }
        for metric in [GroundMetric::Euclidean, GroundMetric::mahalanobis(m).unwrap()] {
            let c = pairwise_cost(&a, &a, &metric).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((c.values().at(i, j) - c.values().at(j, i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn psd_projection_is_psd_and_idempotent(
        data in prop::collection::vec(finite_in(-2.0, 2.0), 16),
    ) {
        let m = DenseTensor::from_vec(vec![4, 4], data).unwrap();
        let once = project_psd(&m).unwrap();
        prop_assert!(min_eigenvalue(&once).unwrap() >= -1e-10);
        let twice = project_psd(&once).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-10);
    }

    #[test]
    fn contrastive_invariant_under_row_rescaling(
        data in prop::collection::vec(finite_in(-2.0, 2.0), 6),
        scale in finite_in(0.5, 4.0),
    ) {
        // Keep rows away from zero norm.
        let adjusted: Vec<f64> = data.iter().map(|v| v + 2.5f64.copysign(*v)).collect();
        let a = DenseTensor::from_vec(vec![3, 2], adjusted.clone()).unwrap();
        let b = DenseTensor::from_vec(vec![3, 2], adjusted.iter().rev().cloned().collect()).unwrap();
        let scaled = DenseTensor::from_vec(vec![3, 2], adjusted.iter().map(|v| v * scale).collect()).unwrap();
        let (l1, _) = contrastive_loss(&a, &b, 0.2).unwrap();
        let (l2, _) = contrastive_loss(&scaled, &b, 0.2).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9, "loss changed under rescaling: {} vs {}", l1, l2);
    }

    #[test]
    fn partial_plans_feasible_under_random_inputs(
        cost_data in prop::collection::vec(finite_in(0.0, 1.0), 9),
        p in prop::collection::vec(finite_in(0.1, 1.0), 3),
        q in prop::collection::vec(finite_in(0.1, 1.0), 3),
        frac in finite_in(0.1, 0.9),
    ) {
        let cost = CostMatrix::new(DenseTensor::from_vec(vec![3, 3], cost_data).unwrap()).unwrap();
        let s = frac * p.iter().sum::<f64>().min(q.iter().sum::<f64>());
        let cfg = SolverConfig { mass: s, ..Default::default() };
        let plan = partial_ot(&cost, &p, &q, &cfg).unwrap();
        prop_assert!(plan.converged);
        let d = plan_diagnostics(&plan.plan, &p, &q, s);
        prop_assert!(d.row_violation <= 1e-9);
        prop_assert!(d.col_violation <= 1e-9);
        prop_assert!(d.mass_error <= 1e-9);
    }
}
