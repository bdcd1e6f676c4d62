//! Alignment objectives: the KL-to-identity-plan loss over partial transport
//! plans, the InfoNCE contrastive baseline, and the reconstruction term.

use serde::{Deserialize, Serialize};

use crate::metric::{pairwise_cost_on_tape, GroundMetric, TapedMetric};
use crate::solver::{partial_ot, partial_ot_cycle_count, partial_ot_on_tape, SolverConfig, TransportPlan};
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// The b x b reference plan with 1/b on the diagonal: mini-batch items are
/// assumed paired index-to-index, with uniform weight.
#[derive(Clone, Debug)]
pub struct IdentityPlan {
    size: usize,
    matrix: DenseTensor,
}

impl IdentityPlan {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn matrix(&self) -> &DenseTensor {
        &self.matrix
    }
}

/// eye(b, 1/b); the mini-batch size must be at least 2.
pub fn identity_plan(b: usize) -> Result<IdentityPlan> {
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    Ok(IdentityPlan {
        size: b,
        matrix: DenseTensor::eye(b, 1.0 / b as f64),
    })
}

/// KL(pi_hat || pi) restricted to pi_hat's support (the diagonal), with the
/// standard 0 log(0/x) = 0 convention off-diagonal:
///
/// ```text
/// sum_i (1/b) ln((1/b) / pi_ii)
/// ```
pub fn kl_divergence(pi_hat: &IdentityPlan, pi: &TransportPlan) -> Result<f64> {
    let b = pi_hat.size;
    if pi.plan.rows() != b || pi.plan.cols() != b {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("identity plan {b}x{b} vs plan {:?}", pi.plan.shape()),
        });
    }
    let w = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let d = pi.plan.at(i, i);
        if d <= 0.0 {
            return Err(Error::Domain {
                op: "kl_divergence",
                detail: format!("plan diagonal entry {i} is {d}, support requires > 0"),
            });
        }
        total += w * (w / d).ln();
    }
    Ok(total)
}

/// Per-batch loss components. `total` is their unweighted sum.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl_volume_slice: f64,
    pub kl_volume_text: f64,
    pub reconstruction: f64,
}

impl LossBreakdown {
    pub fn new(kl_volume_slice: f64, kl_volume_text: f64, reconstruction: f64) -> Self {
        LossBreakdown {
            total: kl_volume_slice + kl_volume_text + reconstruction,
            kl_volume_slice,
            kl_volume_text,
            reconstruction,
        }
    }
}

/// Unweighted sum of the alignment and reconstruction terms.
pub fn total_loss(parts: &LossBreakdown) -> f64 {
    parts.kl_volume_slice + parts.kl_volume_text + parts.reconstruction
}

/// How gradients flow through the transport solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through the unrolled Dykstra cycles (the count actually
    /// used at convergence, capped at `max_unroll`).
    Unrolled,
    /// Ablation: treat the plans as constants; the alignment terms then carry
    /// no gradient.
    Detached,
}

/// Settings for the mPOT alignment terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpotSettings {
    pub solver: SolverConfig,
    /// Cap on unrolled cycles kept on the backward tape.
    pub max_unroll: usize,
    pub grad_mode: GradMode,
    /// Exact unroll count override. Finite-difference checks need the cycle
    /// count pinned so the loss stays a smooth function of the parameters.
    pub fixed_unroll: Option<usize>,
}

impl Default for MpotSettings {
    fn default() -> Self {
        MpotSettings {
            solver: SolverConfig::default(),
            max_unroll: 200,
            grad_mode: GradMode::Unrolled,
            fixed_unroll: None,
        }
    }
}

/// Tape nodes for the two alignment terms.
pub struct MpotNodes {
    pub kl_volume_slice: NodeId,
    pub kl_volume_text: NodeId,
    /// Dykstra cycles unrolled for each solve (slice, text).
    pub cycles: (usize, usize),
}

/// KL(pi_hat || exp(log_plan)) on the tape, from the log-domain plan:
/// -ln b - (1/b) sum_i log_plan_ii.
pub fn kl_identity_on_tape(tape: &mut Tape, log_plan: NodeId, b: usize) -> Result<NodeId> {
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let mut diag = Vec::with_capacity(b);
    for i in 0..b {
        diag.push(tape.diag_entry(log_plan, i)?);
    }
    let stacked = tape.concat(&diag, 0)?;
    let total = tape.sum(stacked)?;
    let scaled = tape.scale(total, -1.0 / b as f64)?;
    let neg_ln_b = tape.constant(DenseTensor::scalar(-(b as f64).ln()));
    tape.add(scaled, neg_ln_b)
}

/// Build the two mPOT alignment terms on an existing tape.
///
/// `volume` is the differentiable embedding block; `slice_emb` and
/// `text_emb` enter as constants (the 2D encoders are frozen). Marginals are
/// uniform 1/b on both sides; the transported mass is `settings.solver.mass`.
pub fn mpot_terms_on_tape(
    tape: &mut Tape,
    volume: NodeId,
    slice_emb: &DenseTensor,
    text_emb: &DenseTensor,
    metric: &TapedMetric,
    settings: &MpotSettings,
) -> Result<MpotNodes> {
    let b = tape.value(volume).rows();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if slice_emb.rows() != b || text_emb.rows() != b {
        return Err(Error::ShapeMismatch {
            op: "mpot_loss",
            detail: format!(
                "batch sizes differ: volume {b}, slice {}, text {}",
                slice_emb.rows(),
                text_emb.rows()
            ),
        });
    }
    let marginals = vec![1.0 / b as f64; b];

    let term = |tape: &mut Tape, target: &DenseTensor| -> Result<(NodeId, usize)> {
        let target_node = tape.constant(target.clone());
        let cost_node = pairwise_cost_on_tape(tape, volume, target_node, metric)?;
        let cost_values = crate::metric::CostMatrix::new(tape.value(cost_node).clone())?;
        match settings.grad_mode {
            GradMode::Unrolled => {
                let cycles = match settings.fixed_unroll {
                    Some(k) => k,
                    None => partial_ot_cycle_count(
                        &cost_values,
                        &marginals,
                        &marginals,
                        &settings.solver,
                        settings.max_unroll,
                    )?,
                };
                let log_plan =
                    partial_ot_on_tape(tape, cost_node, &marginals, &marginals, &settings.solver, cycles)?;
                Ok((kl_identity_on_tape(tape, log_plan, b)?, cycles))
            }
            GradMode::Detached => {
                let solved = partial_ot(&cost_values, &marginals, &marginals, &settings.solver)?;
                let log_data: Vec<f64> = solved
                    .plan
                    .data()
                    .iter()
                    .map(|&v| v.max(crate::tape::LOG_FLOOR).ln())
                    .collect();
                let log_plan =
                    tape.constant(DenseTensor::from_vec(vec![b, b], log_data)?);
                Ok((kl_identity_on_tape(tape, log_plan, b)?, solved.iterations_used))
            }
        }
    };

    let (kl_vs, c1) = term(tape, slice_emb)?;
    let (kl_vt, c2) = term(tape, text_emb)?;
    Ok(MpotNodes {
        kl_volume_slice: kl_vs,
        kl_volume_text: kl_vt,
        cycles: (c1, c2),
    })
}

/// Standalone mPOT alignment loss with gradients.
#[derive(Debug)]
pub struct MpotLoss {
    pub kl_volume_slice: f64,
    pub kl_volume_text: f64,
    /// Gradient w.r.t. the volume embeddings.
    pub grad_volume: DenseTensor,
    /// Gradient w.r.t. the interaction matrix (Mahalanobis metric only).
    pub grad_metric: Option<DenseTensor>,
}

impl MpotLoss {
    pub fn alignment_total(&self) -> f64 {
        self.kl_volume_slice + self.kl_volume_text
    }
}

/// Solve both partial plans and return the two KL terms plus gradients with
/// respect to the volume embeddings and the interaction matrix. Slice and
/// text embeddings are frozen.
pub fn mpot_loss(
    vol_emb: &DenseTensor,
    slice_emb: &DenseTensor,
    text_emb: &DenseTensor,
    metric: &GroundMetric,
    settings: &MpotSettings,
) -> Result<MpotLoss> {
    let mut tape = Tape::new();
    let volume = tape.param(vol_emb.clone());
    let (taped_metric, metric_node) = match metric {
        GroundMetric::Euclidean => (TapedMetric::Euclidean, None),
        GroundMetric::SquaredEuclidean => (TapedMetric::SquaredEuclidean, None),
        GroundMetric::Mahalanobis(m) => {
            let node = tape.param(m.clone());
            (TapedMetric::Mahalanobis(node), Some(node))
        }
    };
    let nodes = mpot_terms_on_tape(&mut tape, volume, slice_emb, text_emb, &taped_metric, settings)?;
    let total = tape.add(nodes.kl_volume_slice, nodes.kl_volume_text)?;
    let grads = tape.backward(total)?;
    Ok(MpotLoss {
        kl_volume_slice: tape.scalar_value(nodes.kl_volume_slice),
        kl_volume_text: tape.scalar_value(nodes.kl_volume_text),
        grad_volume: grads.expect(volume).clone(),
        grad_metric: metric_node.map(|id| grads.expect(id).clone()),
    })
}

// ── Contrastive baseline ─────────────────────────────────────────────

fn normalized_rows(t: &DenseTensor) -> Result<DenseTensor> {
    let (n, d) = (t.rows(), t.cols());
    let mut out = t.clone();
    for i in 0..n {
        let norm: f64 = (0..d).map(|j| t.at(i, j) * t.at(i, j)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
        for j in 0..d {
            out.set_at(i, j, t.at(i, j) / norm);
        }
    }
    Ok(out)
}

/// L2-normalize each row of a node on the tape.
fn normalize_rows_on_tape(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let (n, d) = (tape.value(a).rows(), tape.value(a).cols());
    for i in 0..n {
        let norm_sq: f64 = (0..d).map(|j| tape.value(a).at(i, j).powi(2)).sum();
        if norm_sq == 0.0 {
            return Err(Error::ZeroNormRow { row: i });
        }
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let r = tape.row(a, i)?;
        let sq = tape.mul(r, r)?;
        let total = tape.sum(sq)?;
        let norm = tape.sqrt(total)?;
        let norm_b = tape.broadcast_cols(norm, d)?;
        rows.push(tape.div(r, norm_b)?);
    }
    tape.concat(&rows, 0)
}

/// Symmetric InfoNCE on the tape: cosine logits over `tau`, cross-entropy
/// against the diagonal, averaged over both directions. The `b` side is a
/// frozen constant.
pub fn contrastive_on_tape(
    tape: &mut Tape,
    a: NodeId,
    b_emb: &DenseTensor,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = tape.value(a).rows();
    if b_emb.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("batch sizes differ: {n} vs {}", b_emb.rows()),
        });
    }
    let a_norm = normalize_rows_on_tape(tape, a)?;
    let b_norm = tape.constant(normalized_rows(b_emb)?);
    let b_t = tape.transpose(b_norm)?;
    let sim = tape.matmul(a_norm, b_t)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;

    let mut diag = Vec::with_capacity(n);
    for i in 0..n {
        diag.push(tape.diag_entry(logits, i)?);
    }
    let diag_col = tape.concat(&diag, 0)?; // [n,1]

    // a -> b direction: rows of the logit matrix.
    let lse_rows = tape.logsumexp(logits, 1)?; // [n,1]
    let gap_rows = tape.sub(lse_rows, diag_col)?;
    let loss_rows = tape.mean(gap_rows)?;

    // b -> a direction: columns.
    let lse_cols = tape.logsumexp(logits, 0)?; // [1,n]
    let lse_cols_t = tape.transpose(lse_cols)?;
    let gap_cols = tape.sub(lse_cols_t, diag_col)?;
    let loss_cols = tape.mean(gap_cols)?;

    let both = tape.add(loss_rows, loss_cols)?;
    tape.scale(both, 0.5)
}

/// Standalone symmetric InfoNCE loss; returns the loss value and its
/// gradient w.r.t. `emb_a` (the trainable side).
pub fn contrastive_loss(
    emb_a: &DenseTensor,
    emb_b: &DenseTensor,
    temperature: f64,
) -> Result<(f64, DenseTensor)> {
    let mut tape = Tape::new();
    let a = tape.param(emb_a.clone());
    let loss = contrastive_on_tape(&mut tape, a, emb_b, temperature)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads.expect(a).clone()))
}

// ── Reconstruction ───────────────────────────────────────────────────

/// Sum over the batch of (non-squared) L2 norms of the voxelwise
/// differences. The gradient at x_hat = x is zero (subgradient at the kink).
pub fn reconstruction_loss(x: &[DenseTensor], x_hat: &[DenseTensor]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            detail: format!("batch sizes differ: {} vs {}", x.len(), x_hat.len()),
        });
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "reconstruction_loss",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

/// Reconstruction term on the tape: `targets[i]` is the fixed input,
/// `predictions[i]` the differentiable reconstruction.
pub fn reconstruction_on_tape(
    tape: &mut Tape,
    targets: &[DenseTensor],
    predictions: &[NodeId],
) -> Result<NodeId> {
    assert_eq!(targets.len(), predictions.len());
    let mut norms = Vec::with_capacity(targets.len());
    for (t, &p) in targets.iter().zip(predictions) {
        let tn = tape.constant(t.clone());
        let diff = tape.sub(tn, p)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq)?;
        norms.push(tape.sqrt(total)?);
    }
    let stacked = tape.concat(&norms, 0)?;
    tape.sum(stacked)
}
