//! Finite-difference validation of every tape operation and of the
//! differentiable pipeline pieces (Mahalanobis costs, unrolled transport
//! solves, alignment losses).

use potalign::gradcheck::finite_diff_check;
use potalign::loss::{mpot_loss, GradMode, MpotSettings};
use potalign::metric::{pairwise_cost_on_tape, GroundMetric, TapedMetric};
use potalign::rng::Rng;
use potalign::solver::{partial_ot_on_tape, sinkhorn_on_tape, SolverConfig};
use potalign::tape::OpKind;
use potalign::tensor::DenseTensor;
use potalign::{NodeId, Tape};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Random tensor with entries in [lo, hi], kept `margin` away from `avoid`.
fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, avoid: Option<(f64, f64)>) -> DenseTensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v = rng.range(lo, hi);
        if let Some((center, margin)) = avoid {
            if (v - center).abs() < margin {
                continue;
            }
        }
        data.push(v);
    }
    DenseTensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Check d(sum(op(x...) * W))/dx against central differences, with a fixed
/// random weighting W so every output entry gets a distinct upstream
/// gradient.
fn check_op(kind: OpKind, inputs: Vec<DenseTensor>, rng: &mut Rng) -> f64 {
    // Probe the output shape.
    let out_shape = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.forward_op(kind, &ids).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = random_tensor(rng, &out_shape, -1.0, 1.0, None);
    finite_diff_check(
        |tape, ids| {
            let out = tape.forward_op(kind, ids)?;
            let w = tape.constant(weights.clone());
            let weighted = tape.mul(out, w)?;
            tape.sum(weighted)
        },
        &inputs,
        STEP,
    )
    .unwrap()
}

#[test]
fn every_op_kind_matches_finite_differences() {
    let mut rng = Rng::new(20240811);
    let cases_per_op = 100;
    let ops: Vec<(&str, Box<dyn Fn(&mut Rng) -> (OpKind, Vec<DenseTensor>)>)> = vec![
        (
            "add",
            Box::new(|r: &mut Rng| {
                (
                    OpKind::Add,
                    vec![
                        random_tensor(r, &[2, 3], -2.0, 2.0, None),
                        random_tensor(r, &[2, 3], -2.0, 2.0, None),
                    ],
                )
            }),
        ),
        (
            "sub",
            Box::new(|r| {
                (
                    OpKind::Sub,
                    vec![
                        random_tensor(r, &[3, 2], -2.0, 2.0, None),
                        random_tensor(r, &[3, 2], -2.0, 2.0, None),
                    ],
                )
            }),
        ),
        (
            "mul",
            Box::new(|r| {
                (
                    OpKind::Mul,
                    vec![
                        random_tensor(r, &[2, 2], -2.0, 2.0, None),
                        random_tensor(r, &[2, 2], -2.0, 2.0, None),
                    ],
                )
            }),
        ),
        (
            "div",
            Box::new(|r| {
                let denom = random_tensor(r, &[2, 2], -2.0, 2.0, Some((0.0, 0.3)));
                (
                    OpKind::Div,
                    vec![random_tensor(r, &[2, 2], -2.0, 2.0, None), denom],
                )
            }),
        ),
        (
            "matmul",
            Box::new(|r| {
                (
                    OpKind::Matmul,
                    vec![
                        random_tensor(r, &[3, 4], -1.5, 1.5, None),
                        random_tensor(r, &[4, 2], -1.5, 1.5, None),
                    ],
                )
            }),
        ),
        (
            "transpose",
            Box::new(|r| (OpKind::Transpose, vec![random_tensor(r, &[2, 4], -2.0, 2.0, None)])),
        ),
        (
            "exp",
            Box::new(|r| (OpKind::Exp, vec![random_tensor(r, &[2, 3], -2.0, 2.0, None)])),
        ),
        (
            "log",
            Box::new(|r| (OpKind::Log, vec![random_tensor(r, &[2, 3], 0.1, 3.0, None)])),
        ),
        (
            "sqrt",
            Box::new(|r| (OpKind::Sqrt, vec![random_tensor(r, &[2, 3], 0.1, 2.0, None)])),
        ),
        (
            "tanh",
            Box::new(|r| (OpKind::Tanh, vec![random_tensor(r, &[2, 3], -2.0, 2.0, None)])),
        ),
        (
            "sum",
            Box::new(|r| (OpKind::Sum, vec![random_tensor(r, &[3, 3], -2.0, 2.0, None)])),
        ),
        (
            "mean",
            Box::new(|r| (OpKind::Mean, vec![random_tensor(r, &[3, 3], -2.0, 2.0, None)])),
        ),
        (
            "softmax_rows",
            Box::new(|r| {
                (
                    OpKind::Softmax { axis: 1 },
                    vec![random_tensor(r, &[3, 4], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "softmax_cols",
            Box::new(|r| {
                (
                    OpKind::Softmax { axis: 0 },
                    vec![random_tensor(r, &[3, 4], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "logsumexp_rows",
            Box::new(|r| {
                (
                    OpKind::LogSumExp { axis: 1 },
                    vec![random_tensor(r, &[3, 4], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "logsumexp_cols",
            Box::new(|r| {
                (
                    OpKind::LogSumExp { axis: 0 },
                    vec![random_tensor(r, &[3, 4], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "concat_rows",
            Box::new(|r| {
                (
                    OpKind::Concat { axis: 0 },
                    vec![
                        random_tensor(r, &[2, 3], -2.0, 2.0, None),
                        random_tensor(r, &[1, 3], -2.0, 2.0, None),
                    ],
                )
            }),
        ),
        (
            "concat_cols",
            Box::new(|r| {
                (
                    OpKind::Concat { axis: 1 },
                    vec![
                        random_tensor(r, &[2, 2], -2.0, 2.0, None),
                        random_tensor(r, &[2, 3], -2.0, 2.0, None),
                    ],
                )
            }),
        ),
        (
            "slice",
            Box::new(|r| {
                (
                    OpKind::Slice {
                        axis: 1,
                        start: 1,
                        len: 2,
                    },
                    vec![random_tensor(r, &[3, 4], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "scale",
            Box::new(|r| {
                (
                    OpKind::Scale { factor: -1.7 },
                    vec![random_tensor(r, &[2, 3], -2.0, 2.0, None)],
                )
            }),
        ),
        (
            "clamp_min",
            Box::new(|r| {
                (
                    OpKind::ClampMin { bound: 0.35 },
                    vec![random_tensor(r, &[2, 3], -1.0, 1.0, Some((0.35, 1e-3)))],
                )
            }),
        ),
        (
            "clamp_max",
            Box::new(|r| {
                (
                    OpKind::ClampMax { bound: -0.2 },
                    vec![random_tensor(r, &[2, 3], -1.0, 1.0, Some((-0.2, 1e-3)))],
                )
            }),
        ),
    ];

    for (name, make) in &ops {
        let mut worst: f64 = 0.0;
        for _ in 0..cases_per_op {
            let (kind, inputs) = make(&mut rng);
            worst = worst.max(check_op(kind, inputs, &mut rng));
        }
        assert!(worst < TOL, "op {name}: worst relative error {worst:.3e}");
    }
}

#[test]
fn pairwise_mahalanobis_gradient_wrt_embeddings_and_metric() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
        let b = random_tensor(&mut rng, &[2, 4], -1.0, 1.0, None);
        // Random PSD interaction matrix G G^T + 0.3 I.
        let g = random_tensor(&mut rng, &[4, 4], -0.7, 0.7, None);
        let mut m = DenseTensor::eye(4, 0.3);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = m.at(i, j);
                for k in 0..4 {
                    acc += g.at(i, k) * g.at(j, k);
                }
                m.set_at(i, j, acc);
            }
        }
        let weights = random_tensor(&mut rng, &[3, 2], -1.0, 1.0, None);
        let err = finite_diff_check(
            |tape, ids| {
                let cost = pairwise_cost_on_tape(tape, ids[0], ids[1], &TapedMetric::Mahalanobis(ids[2]))?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(cost, w)?;
                tape.sum(weighted)
            },
            &[a, b, m],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn unrolled_partial_ot_gradient_wrt_cost() {
    let mut rng = Rng::new(99);
    let p = vec![1.0 / 3.0; 3];
    let q = vec![1.0 / 3.0; 3];
    let cfg = SolverConfig {
        epsilon: 0.1,
        mass: 0.7,
        ..Default::default()
    };
    for _ in 0..10 {
        let cost = random_tensor(&mut rng, &[3, 3], 0.05, 1.0, None);
        let weights = random_tensor(&mut rng, &[3, 3], -1.0, 1.0, None);
        let err = finite_diff_check(
            |tape, ids| {
                let log_plan = partial_ot_on_tape(tape, ids[0], &p, &q, &cfg, 40)?;
                let plan = tape.exp(log_plan)?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(plan, w)?;
                tape.sum(weighted)
            },
            &[cost],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn unrolled_sinkhorn_gradient_wrt_cost() {
    let mut rng = Rng::new(123);
    let p = vec![0.5, 0.3, 0.2];
    let q = vec![0.4, 0.6];
    let cfg = SolverConfig {
        epsilon: 0.1,
        ..Default::default()
    };
    for _ in 0..10 {
        let cost = random_tensor(&mut rng, &[3, 2], 0.05, 1.0, None);
        let weights = random_tensor(&mut rng, &[3, 2], -1.0, 1.0, None);
        let err = finite_diff_check(
            |tape, ids| {
                let log_plan = sinkhorn_on_tape(tape, ids[0], &p, &q, &cfg, 30)?;
                let plan = tape.exp(log_plan)?;
                let w = tape.constant(weights.clone());
                let weighted = tape.mul(plan, w)?;
                tape.sum(weighted)
            },
            &[cost],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn full_mpot_loss_gradient_on_b3_batch() {
    // KL(pi_hat || partial plan) through the Mahalanobis cost and the
    // unrolled solve, checked as one function of (volume embeddings, M).
    let mut rng = Rng::new(2024);
    let vol = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
    let slice_emb = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
    let text_emb = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
    let m = DenseTensor::eye(4, 1.0);

    let settings = MpotSettings {
        solver: SolverConfig {
            epsilon: 0.1,
            mass: 0.8,
            ..Default::default()
        },
        fixed_unroll: Some(40),
        ..Default::default()
    };
    let err = finite_diff_check(
        |tape, ids| {
            let nodes = potalign::loss::mpot_terms_on_tape(
                tape,
                ids[0],
                &slice_emb,
                &text_emb,
                &TapedMetric::Mahalanobis(ids[1]),
                &settings,
            )?;
            tape.add(nodes.kl_volume_slice, nodes.kl_volume_text)
        },
        &[vol.clone(), m.clone()],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "relative error {err:.3e}");

    // The standalone entry point agrees with a direct tape evaluation.
    let direct = mpot_loss(
        &vol,
        &slice_emb,
        &text_emb,
        &GroundMetric::Mahalanobis(m),
        &settings,
    )
    .unwrap();
    assert!(direct.alignment_total().is_finite());
    assert!(direct.grad_metric.is_some());
}

#[test]
fn detached_mode_value_matches_converged_unrolled() {
    let mut rng = Rng::new(5150);
    let vol = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
    let other = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, None);
    let solver = SolverConfig {
        epsilon: 0.1,
        mass: 0.8,
        ..Default::default()
    };
    let unrolled = mpot_loss(
        &vol,
        &other,
        &other,
        &GroundMetric::Euclidean,
        &MpotSettings {
            solver: solver.clone(),
            max_unroll: 100_000,
            ..Default::default()
        },
    )
    .unwrap();
    let detached = mpot_loss(
        &vol,
        &other,
        &other,
        &GroundMetric::Euclidean,
        &MpotSettings {
            solver,
            grad_mode: GradMode::Detached,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        (unrolled.alignment_total() - detached.alignment_total()).abs() < 1e-6,
        "unrolled {} vs detached {}",
        unrolled.alignment_total(),
        detached.alignment_total()
    );
}

#[test]
fn kl_of_unrolled_sinkhorn_matches_finite_differences() {
    // KL(identity plan || sinkhorn(C)) on a 2x2 instance.
    let mut rng = Rng::new(404);
    let p = vec![0.5, 0.5];
    let cfg = SolverConfig {
        epsilon: 0.1,
        ..Default::default()
    };
    for _ in 0..10 {
        let cost = random_tensor(&mut rng, &[2, 2], 0.05, 1.0, None);
        let err = finite_diff_check(
            |tape, ids| {
                let log_plan = sinkhorn_on_tape(tape, ids[0], &p, &p, &cfg, 30)?;
                potalign::loss::kl_identity_on_tape(tape, log_plan, 2)
            },
            &[cost],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = Rng::new(31);
    for _ in 0..10 {
        let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, Some((0.0, 0.05)));
        let b = random_tensor(&mut rng, &[3, 4], -1.0, 1.0, Some((0.0, 0.05)));
        let err = finite_diff_check(
            |tape, ids| potalign::loss::contrastive_on_tape(tape, ids[0], &b, 0.3),
            &[a],
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "relative error {err:.3e}");
    }
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let mut rng = Rng::new(47);
    let target = random_tensor(&mut rng, &[4, 3], 0.0, 1.0, None);
    let err = finite_diff_check(
        |tape, ids| {
            potalign::loss::reconstruction_on_tape(tape, std::slice::from_ref(&target), &[ids[0]])
        },
        &[random_tensor(&mut rng, &[4, 3], 0.0, 1.0, None)],
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "relative error {err:.3e}");
}
