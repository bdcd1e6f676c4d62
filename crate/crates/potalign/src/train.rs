//! Training loop and evaluation.
//!
//! One step: draw a mini-batch, embed volumes through the encoder and the
//! plane-slice-aware transformer, take frozen slice/text embeddings, build
//! Mahalanobis cost matrices, solve the two partial transport plans, form
//! the KL alignment terms plus the reconstruction term, descend on all
//! learnable tensors, and re-project the interaction matrix onto the PSD
//! cone. Everything is a pure function of (config, dataset): identical seeds
//! give identical metric series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, save_tensors, CheckpointError};
use crate::loss::{
    contrastive_on_tape, mpot_terms_on_tape, reconstruction_on_tape, LossBreakdown, MpotSettings,
};
use crate::metric::{min_eigenvalue, pairwise_cost, project_psd, GroundMetric, TapedMetric};
use crate::psat::{
    decode_tokens_on_tape, encode_volume_on_tape, patchify, psat_forward_on_tape,
    tag_token_positions_on_tape, EncoderNodes, EncoderParams, PsatNodes, PsatParams, VolumeGrid,
};
use crate::rng::Rng;
use crate::solver::partial_ot;
use crate::synth::{batcher, World};
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Architecture dimensions for the toy model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub queries: usize,
    pub channels: usize,
    /// Output dimension; must match the frozen embedding dimension.
    pub out_dim: usize,
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Paper-scale reference uses 300 queries at channel width 512; the
        // toy defaults keep finite-difference sweeps fast.
        ModelConfig {
            queries: 8,
            channels: 32,
            out_dim: 16,
            patch: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent, theta <- theta - alpha * grad.
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossToggles {
    pub mpot: bool,
    pub contrastive: bool,
    pub reconstruction: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            mpot: true,
            contrastive: false,
            reconstruction: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMetric {
    /// Rank with the learned Mahalanobis metric (consistent with training).
    Learned,
    Euclidean,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub losses: LossToggles,
    pub mpot: MpotSettings,
    /// InfoNCE temperature for the contrastive baseline.
    pub temperature: f64,
    pub retrieval_metric: RetrievalMetric,
    /// Epoch cadence for checkpoint emission; 0 disables.
    pub checkpoint_every: usize,
    /// Stop when the epoch loss improves by less than 1e-5 (relative) over
    /// ten epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Toy defaults; the reference full-scale run uses alpha = 2e-5,
        // batch size 4, 300 epochs.
        let mut mpot = MpotSettings::default();
        mpot.solver.mass = 0.9;
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 50,
            seed: 1,
            optimizer: Optimizer::Sgd,
            losses: LossToggles::default(),
            mpot,
            temperature: 0.07,
            retrieval_metric: RetrievalMetric::Learned,
            checkpoint_every: 0,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.losses.mpot || self.losses.contrastive || self.losses.reconstruction) {
            return Err(Error::InvalidConfig("no loss term enabled".into()));
        }
        let s = self.mpot.solver.mass;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidConfig(format!(
                "solver mass {s} must lie in [0, 1] for unit batch marginals"
            )));
        }
        self.mpot.solver.validate()
    }
}

// ── Model parameters ─────────────────────────────────────────────────

/// All learnable tensors: encoder/decoder (theta), PSAT (psi), and the
/// metric interaction matrix M.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub psat: PsatParams,
    pub metric_m: DenseTensor,
}

impl ModelParams {
    /// Fresh parameters; M starts at the identity, so the first epoch's
    /// metric is exactly Euclidean.
    pub fn init(seed: u64, model: &ModelConfig, volume_side: usize) -> Result<Self> {
        let mut rng = Rng::new(seed).derive(0x9a7a);
        let encoder = EncoderParams::init(&mut rng, volume_side, model.patch, model.channels)?;
        let psat = PsatParams::init(
            &mut rng,
            model.queries,
            model.channels,
            model.out_dim,
            volume_side,
        );
        Ok(ModelParams {
            encoder,
            psat,
            metric_m: DenseTensor::eye(model.out_dim, 1.0),
        })
    }

    /// Named views in a fixed order (the checkpoint layout).
    pub fn named(&self) -> Vec<(String, DenseTensor)> {
        let e = &self.encoder;
        let p = &self.psat;
        let meta = DenseTensor::row(vec![
            e.side as f64,
            e.patch as f64,
            e.channels as f64,
            p.num_queries as f64,
            p.out_dim as f64,
            p.num_slices as f64,
        ]);
        vec![
            ("meta.dims".into(), meta),
            ("encoder.patch_w".into(), e.patch_w.clone()),
            ("encoder.patch_b".into(), e.patch_b.clone()),
            ("encoder.dec_w".into(), e.dec_w.clone()),
            ("encoder.dec_b".into(), e.dec_b.clone()),
            ("psat.queries".into(), p.queries.clone()),
            ("psat.self_wq".into(), p.self_wq.clone()),
            ("psat.self_wk".into(), p.self_wk.clone()),
            ("psat.self_wv".into(), p.self_wv.clone()),
            ("psat.self_wo".into(), p.self_wo.clone()),
            ("psat.cross_wq".into(), p.cross_wq.clone()),
            ("psat.cross_wk".into(), p.cross_wk.clone()),
            ("psat.cross_wv".into(), p.cross_wv.clone()),
            ("psat.cross_wo".into(), p.cross_wo.clone()),
            ("psat.pspe".into(), p.pspe.clone()),
            ("psat.mlp_w1".into(), p.mlp_w1.clone()),
            ("psat.mlp_b1".into(), p.mlp_b1.clone()),
            ("psat.mlp_w2".into(), p.mlp_w2.clone()),
            ("psat.mlp_b2".into(), p.mlp_b2.clone()),
            ("metric.m".into(), self.metric_m.clone()),
        ]
    }

    pub fn from_named(entries: &[(String, DenseTensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<DenseTensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint missing entry {name}")))
        };
        let meta = get("meta.dims")?;
        if meta.numel() != 6 {
            return Err(Error::InvalidConfig("malformed meta.dims entry".into()));
        }
        let d = meta.data();
        let (side, patch, channels) = (d[0] as usize, d[1] as usize, d[2] as usize);
        let (num_queries, out_dim, num_slices) = (d[3] as usize, d[4] as usize, d[5] as usize);
        Ok(ModelParams {
            encoder: EncoderParams {
                patch_w: get("encoder.patch_w")?,
                patch_b: get("encoder.patch_b")?,
                dec_w: get("encoder.dec_w")?,
                dec_b: get("encoder.dec_b")?,
                side,
                patch,
                channels,
            },
            psat: PsatParams {
                queries: get("psat.queries")?,
                self_wq: get("psat.self_wq")?,
                self_wk: get("psat.self_wk")?,
                self_wv: get("psat.self_wv")?,
                self_wo: get("psat.self_wo")?,
                cross_wq: get("psat.cross_wq")?,
                cross_wk: get("psat.cross_wk")?,
                cross_wv: get("psat.cross_wv")?,
                cross_wo: get("psat.cross_wo")?,
                pspe: get("psat.pspe")?,
                mlp_w1: get("psat.mlp_w1")?,
                mlp_b1: get("psat.mlp_b1")?,
                mlp_w2: get("psat.mlp_w2")?,
                mlp_b2: get("psat.mlp_b2")?,
                num_queries,
                channels,
                out_dim,
                num_slices,
            },
            metric_m: get("metric.m")?,
        })
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        let e = &mut self.encoder;
        let p = &mut self.psat;
        vec![
            &mut e.patch_w,
            &mut e.patch_b,
            &mut e.dec_w,
            &mut e.dec_b,
            &mut p.queries,
            &mut p.self_wq,
            &mut p.self_wk,
            &mut p.self_wv,
            &mut p.self_wo,
            &mut p.cross_wq,
            &mut p.cross_wk,
            &mut p.cross_wv,
            &mut p.cross_wo,
            &mut p.pspe,
            &mut p.mlp_w1,
            &mut p.mlp_b1,
            &mut p.mlp_w2,
            &mut p.mlp_b2,
            &mut self.metric_m,
        ]
    }
}

/// Bit-exact round-trip of parameters through the container format.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> std::result::Result<(), CheckpointError> {
    save_tensors(path, &params.named())
}

pub fn load_checkpoint(path: &Path) -> std::result::Result<ModelParams, CheckpointError> {
    let entries = load_tensors(path)?;
    ModelParams::from_named(&entries)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))
}

// ── Metrics ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub total: f64,
    pub kl_vs: f64,
    pub kl_vt: f64,
    pub rec: f64,
    pub top1_s: f64,
    pub top5_s: f64,
    pub top1_t: f64,
    pub top5_t: f64,
    pub gap: f64,
    pub mispair_mass: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,total,kl_vs,kl_vt,rec,top1_s,top5_s,top1_t,top5_t,gap,mispair_mass";

/// Metrics as CSV, with the resolved config and tool version embedded as
/// leading comment lines.
pub fn metrics_csv(records: &[MetricsRecord], config_json: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# {}\n", crate::TOOL_VERSION));
    out.push_str(&format!("# config {config_json}\n"));
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.total,
            r.kl_vs,
            r.kl_vt,
            r.rec,
            r.top1_s,
            r.top5_s,
            r.top1_t,
            r.top5_t,
            r.gap,
            r.mispair_mass
        ));
    }
    out
}

#[derive(Serialize)]
struct MetricsDocument<'a> {
    version: &'a str,
    format_version: u32,
    config: serde_json::Value,
    records: &'a [MetricsRecord],
    #[serde(rename = "final")]
    final_record: Option<&'a MetricsRecord>,
}

/// Metrics as a structured JSON document embedding the resolved config.
pub fn metrics_json(records: &[MetricsRecord], config_json: &str) -> String {
    let config: serde_json::Value =
        serde_json::from_str(config_json).unwrap_or(serde_json::Value::String(config_json.into()));
    let doc = MetricsDocument {
        version: crate::TOOL_VERSION,
        format_version: 1,
        config,
        records,
        final_record: records.last(),
    };
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Top-k retrieval accuracy: for each query row, rank target rows by metric
/// distance ascending (ties broken by lower index); a hit means the matching
/// index appears among the k nearest.
pub fn retrieval_eval(
    queries: &DenseTensor,
    targets: &DenseTensor,
    metric: &GroundMetric,
    k: usize,
) -> Result<f64> {
    let n = queries.rows();
    if targets.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "retrieval_eval",
            detail: format!("query count {n} vs target count {}", targets.rows()),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("k = {k} outside 1..={n}")));
    }
    let costs = pairwise_cost(queries, targets, metric)?;
    let mut hits = 0usize;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            costs
                .values()
                .at(i, a)
                .partial_cmp(&costs.values().at(i, b))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if order[..k].contains(&i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Euclidean norm of the difference between the means of the L2-normalized
/// rows of the two embedding blocks.
pub fn modality_gap(emb_a: &DenseTensor, emb_b: &DenseTensor) -> Result<f64> {
    let d = emb_a.cols();
    if emb_b.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "modality_gap",
            detail: format!("dims differ: {d} vs {}", emb_b.cols()),
        });
    }
    let mean_normalized = |t: &DenseTensor| -> Result<Vec<f64>> {
        let mut mean = vec![0.0; d];
        for i in 0..t.rows() {
            let norm: f64 = (0..d).map(|j| t.at(i, j) * t.at(i, j)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow { row: i });
            }
            for j in 0..d {
                mean[j] += t.at(i, j) / norm;
            }
        }
        for v in mean.iter_mut() {
            *v /= t.rows() as f64;
        }
        Ok(mean)
    };
    let ma = mean_normalized(emb_a)?;
    let mb = mean_normalized(emb_b)?;
    Ok(ma
        .iter()
        .zip(&mb)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Projected volume embedding for one triplet under the current parameters.
fn embed_volume(
    params: &ModelParams,
    volume: &VolumeGrid,
    plane: usize,
    slice_index: usize,
) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let enc = EncoderNodes::register(&mut tape, &params.encoder, false);
    let psat = PsatNodes::register(&mut tape, &params.psat, false);
    let tokens = encode_volume_on_tape(&mut tape, volume, &params.encoder, &enc)?;
    let tagged = tag_token_positions_on_tape(&mut tape, tokens, &params.encoder)?;
    let fwd = psat_forward_on_tape(&mut tape, tagged, &params.psat, &psat, plane, slice_index)?;
    Ok(tape.value(fwd.output).clone())
}

/// Stack the projected embeddings of every triplet in the world: [n, d].
pub fn embed_dataset(params: &ModelParams, world: &World) -> Result<DenseTensor> {
    let n = world.triplets.len();
    let d = params.psat.out_dim;
    let mut out = DenseTensor::zeros(&[n, d]);
    for (i, t) in world.triplets.iter().enumerate() {
        let e = embed_volume(params, &t.volume, t.plane, t.slice_index)?;
        for j in 0..d {
            out.set_at(i, j, e.at(0, j));
        }
    }
    Ok(out)
}

/// Frozen slice embeddings of every triplet: [n, d].
pub fn slice_embeddings(world: &World) -> Result<DenseTensor> {
    let n = world.triplets.len();
    let d = world.encoders.dim;
    let mut out = DenseTensor::zeros(&[n, d]);
    for (i, t) in world.triplets.iter().enumerate() {
        let e = world.encoders.image_embed(&t.slice_image)?;
        for j in 0..d {
            out.set_at(i, j, e.at(0, j));
        }
    }
    Ok(out)
}

/// Stored text embeddings of every triplet (mispairings included): [n, d].
pub fn text_embeddings(world: &World) -> DenseTensor {
    let n = world.triplets.len();
    let d = world.config.embed_dim;
    let mut out = DenseTensor::zeros(&[n, d]);
    for (i, t) in world.triplets.iter().enumerate() {
        for j in 0..d {
            out.set_at(i, j, t.text_embedding.at(0, j));
        }
    }
    out
}

/// Mean transported mass landing on mispaired text columns, over ordered
/// evaluation chunks of `chunk` items, solving the volume-to-text partial
/// plan at mass `s` on cost matrices from the given embeddings.
pub fn mispair_mass(
    vol_embs: &DenseTensor,
    text_embs: &DenseTensor,
    mispaired: &[bool],
    metric: &GroundMetric,
    chunk: usize,
    epsilon: f64,
    s: f64,
) -> Result<f64> {
    let n = vol_embs.rows();
    assert_eq!(mispaired.len(), n);
    if chunk < 2 || n < chunk {
        return Err(Error::BatchTooSmall(chunk));
    }
    let marginals = vec![1.0 / chunk as f64; chunk];
    let cfg = crate::solver::SolverConfig {
        epsilon,
        mass: s,
        ..Default::default()
    };
    let d = vol_embs.cols();
    let mut total = 0.0;
    let mut chunks = 0;
    let mut start = 0;
    while start + chunk <= n {
        let rows = |t: &DenseTensor| {
            DenseTensor::from_vec(
                vec![chunk, d],
                (start..start + chunk)
                    .flat_map(|i| t.data()[i * d..(i + 1) * d].to_vec())
                    .collect(),
            )
            .expect("sized from data")
        };
        let v = rows(vol_embs);
        let t = rows(text_embs);
        let cost = pairwise_cost(&v, &t, metric)?;
        let plan = partial_ot(&cost, &marginals, &marginals, &cfg)?;
        let mut mass = 0.0;
        for j in 0..chunk {
            if mispaired[start + j] {
                for i in 0..chunk {
                    mass += plan.plan.at(i, j);
                }
            }
        }
        total += mass;
        chunks += 1;
        start += chunk;
    }
    Ok(total / chunks as f64)
}

// ── Optimizer ────────────────────────────────────────────────────────

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }
}

fn apply_updates(
    params: &mut ModelParams,
    grads: &[DenseTensor],
    optimizer: Optimizer,
    lr: f64,
    adam: &mut AdamState,
) {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.tensors_mut().into_iter().zip(grads) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam => {
            adam.t += 1;
            let t = adam.t as f64;
            let bc1 = 1.0 - BETA1.powf(t);
            let bc2 = 1.0 - BETA2.powf(t);
            for (idx, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
                let m = &mut adam.m[idx];
                let v = &mut adam.v[idx];
                for ((pv, gv), (mv, vv)) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                    *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + EPS);
                }
            }
        }
    }
}

// ── Training ─────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    /// Minimum eigenvalue of M after every optimizer step.
    pub psd_min_eigenvalues: Vec<f64>,
}

/// Observer invoked after each epoch's evaluation, before any early stop.
pub type EpochObserver<'a> = &'a mut dyn FnMut(usize, &ModelParams, &MetricsRecord);

pub fn train(world: &World, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(world, model, cfg, &mut |_, _, _| {})
}

pub fn train_with_observer(
    world: &World,
    model: &ModelConfig,
    cfg: &TrainConfig,
    observer: EpochObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.out_dim != world.config.embed_dim {
        return Err(Error::InvalidConfig(format!(
            "model out_dim {} must match world embed_dim {}",
            model.out_dim, world.config.embed_dim
        )));
    }

    let mut params = ModelParams::init(cfg.seed, model, world.config.volume_side)?;
    let mut adam = AdamState::new(&params.named()[1..].iter().map(|(_, t)| t.numel()).collect::<Vec<_>>());
    let mut metrics = Vec::new();
    let mut psd_series = Vec::new();

    let slice_all = slice_embeddings(world)?;
    let text_all = text_embeddings(world);

    let b = cfg.batch_size;
    let marginal_mass = 1.0; // uniform 1/b marginals on both sides
    debug_assert!(cfg.mpot.solver.mass <= marginal_mass);

    let mut recent: Vec<f64> = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = batcher(&world.triplets, b, cfg.seed, epoch)?;
        let mut epoch_loss = LossBreakdown::default();
        let mut steps = 0usize;

        for (step, batch) in batches.iter().enumerate() {
            let breakdown = run_step(&mut params, batch, cfg, &mut adam, world).map_err(|e| {
                match e {
                    Error::Domain { .. } => Error::Diverged {
                        epoch,
                        step,
                        what: e.to_string(),
                    },
                    other => other,
                }
            })?;
            epoch_loss.total += breakdown.total;
            epoch_loss.kl_volume_slice += breakdown.kl_volume_slice;
            epoch_loss.kl_volume_text += breakdown.kl_volume_text;
            epoch_loss.reconstruction += breakdown.reconstruction;
            steps += 1;
            psd_series.push(min_eigenvalue(&params.metric_m)?);
        }
        let k = steps.max(1) as f64;

        // End-of-epoch evaluation on the full dataset.
        let vol_all = embed_dataset(&params, world)?;
        let metric = match cfg.retrieval_metric {
            RetrievalMetric::Learned => GroundMetric::Mahalanobis(params.metric_m.clone()),
            RetrievalMetric::Euclidean => GroundMetric::Euclidean,
        };
        let n = world.triplets.len();
        let top5_k = 5.min(n);
        let record = MetricsRecord {
            epoch,
            total: epoch_loss.total / k,
            kl_vs: epoch_loss.kl_volume_slice / k,
            kl_vt: epoch_loss.kl_volume_text / k,
            rec: epoch_loss.reconstruction / k,
            top1_s: retrieval_eval(&vol_all, &slice_all, &metric, 1)?,
            top5_s: retrieval_eval(&vol_all, &slice_all, &metric, top5_k)?,
            top1_t: retrieval_eval(&vol_all, &text_all, &metric, 1)?,
            top5_t: retrieval_eval(&vol_all, &text_all, &metric, top5_k)?,
            gap: modality_gap(&vol_all, &slice_all)?,
            mispair_mass: mispair_mass(
                &vol_all,
                &text_all,
                &world.triplets.iter().map(|t| t.mispaired).collect::<Vec<_>>(),
                &metric,
                b,
                cfg.mpot.solver.epsilon,
                cfg.mpot.solver.mass,
            )?,
        };
        observer(epoch, &params, &record);
        metrics.push(record);

        if cfg.early_stop {
            recent.push(record.total);
            if recent.len() > 10 {
                let old = recent[recent.len() - 11];
                let improvement = (old - record.total) / old.abs().max(1e-12);
                if improvement < 1e-5 {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        params,
        metrics,
        psd_min_eigenvalues: psd_series,
    })
}

/// Parameter nodes of one training step, in the fixed update order.
pub struct StepNodes {
    pub encoder: EncoderNodes,
    pub psat: PsatNodes,
    pub metric_m: NodeId,
}

impl StepNodes {
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let encoder = EncoderNodes::register(tape, &params.encoder, trainable);
        let psat = PsatNodes::register(tape, &params.psat, trainable);
        let metric_m = if trainable {
            tape.param(params.metric_m.clone())
        } else {
            tape.constant(params.metric_m.clone())
        };
        StepNodes {
            encoder,
            psat,
            metric_m,
        }
    }

    /// Node ids in the same order as `ModelParams::named` (without meta).
    pub fn ordered_ids(&self) -> Vec<NodeId> {
        vec![
            self.encoder.patch_w,
            self.encoder.patch_b,
            self.encoder.dec_w,
            self.encoder.dec_b,
            self.psat.queries,
            self.psat.self_wq,
            self.psat.self_wk,
            self.psat.self_wv,
            self.psat.self_wo,
            self.psat.cross_wq,
            self.psat.cross_wk,
            self.psat.cross_wv,
            self.psat.cross_wo,
            self.psat.pspe,
            self.psat.mlp_w1,
            self.psat.mlp_b1,
            self.psat.mlp_w2,
            self.psat.mlp_b2,
            self.metric_m,
        ]
    }
}

/// Build the full per-step objective on an existing tape: encoder, PSAT
/// projection, the enabled alignment terms, and the reconstruction term.
/// `params` provides the static dimensions; values come from `nodes`.
pub fn assemble_total_loss(
    tape: &mut Tape,
    params: &ModelParams,
    nodes: &StepNodes,
    batch: &crate::synth::TripletBatch,
    world: &World,
    cfg: &TrainConfig,
) -> Result<(NodeId, LossBreakdown)> {
    let b = batch.len();

    // Volume branch: encode, project, stack.
    let mut h_rows = Vec::with_capacity(b);
    let mut recon_targets = Vec::new();
    let mut recon_preds = Vec::new();
    for k in 0..b {
        let tokens =
            encode_volume_on_tape(tape, &batch.volumes[k], &params.encoder, &nodes.encoder)?;
        let tagged = tag_token_positions_on_tape(tape, tokens, &params.encoder)?;
        let fwd = psat_forward_on_tape(
            tape,
            tagged,
            &params.psat,
            &nodes.psat,
            batch.planes[k],
            batch.slice_indices[k],
        )?;
        h_rows.push(fwd.output);
        if cfg.losses.reconstruction {
            recon_targets.push(patchify(&batch.volumes[k], params.encoder.patch)?);
            recon_preds.push(decode_tokens_on_tape(tape, tokens, &nodes.encoder)?);
        }
    }
    let h = tape.concat(&h_rows, 0)?; // [b, out_dim]

    // Frozen targets.
    let d = params.psat.out_dim;
    let mut slice_emb = DenseTensor::zeros(&[b, d]);
    let mut text_emb = DenseTensor::zeros(&[b, d]);
    for k in 0..b {
        let se = world.encoders.image_embed(&batch.slices[k])?;
        for j in 0..d {
            slice_emb.set_at(k, j, se.at(0, j));
            text_emb.set_at(k, j, batch.text_embeddings[k].at(0, j));
        }
    }

    let mut term_nodes: Vec<NodeId> = Vec::new();
    let mut kl_vs_val = 0.0;
    let mut kl_vt_val = 0.0;
    let mut rec_val = 0.0;

    if cfg.losses.mpot {
        let taped_metric = TapedMetric::Mahalanobis(nodes.metric_m);
        let mpot = mpot_terms_on_tape(tape, h, &slice_emb, &text_emb, &taped_metric, &cfg.mpot)?;
        kl_vs_val = tape.scalar_value(mpot.kl_volume_slice);
        kl_vt_val = tape.scalar_value(mpot.kl_volume_text);
        term_nodes.push(mpot.kl_volume_slice);
        term_nodes.push(mpot.kl_volume_text);
    }
    if cfg.losses.contrastive {
        let c1 = contrastive_on_tape(tape, h, &slice_emb, cfg.temperature)?;
        let c2 = contrastive_on_tape(tape, h, &text_emb, cfg.temperature)?;
        kl_vs_val += tape.scalar_value(c1);
        kl_vt_val += tape.scalar_value(c2);
        term_nodes.push(c1);
        term_nodes.push(c2);
    }
    if cfg.losses.reconstruction {
        let rec = reconstruction_on_tape(tape, &recon_targets, &recon_preds)?;
        rec_val = tape.scalar_value(rec);
        term_nodes.push(rec);
    }

    let mut total = term_nodes[0];
    for &t in &term_nodes[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, LossBreakdown::new(kl_vs_val, kl_vt_val, rec_val)))
}

fn run_step(
    params: &mut ModelParams,
    batch: &crate::synth::TripletBatch,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    world: &World,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let nodes = StepNodes::register(&mut tape, params, true);
    let (total, breakdown) = assemble_total_loss(&mut tape, params, &nodes, batch, world, cfg)?;

    let total_val = tape.scalar_value(total);
    if !total_val.is_finite() {
        return Err(Error::Domain {
            op: "train_step",
            detail: format!("loss is {total_val}"),
        });
    }

    let grads = tape.backward(total)?;
    let grad_list: Vec<DenseTensor> = nodes
        .ordered_ids()
        .iter()
        .map(|&id| grads.expect(id).clone())
        .collect();
    apply_updates(params, &grad_list, cfg.optimizer, cfg.learning_rate, adam);

    // M is re-projected onto the PSD cone after every step.
    params.metric_m = project_psd(&params.metric_m)?;

    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};

    fn tiny_world() -> World {
        generate_world(&WorldConfig {
            n_subjects: 8,
            volume_side: 4,
            embed_dim: 6,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            queries: 3,
            channels: 8,
            out_dim: 6,
            patch: 2,
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let world = tiny_world();
        let out = train(&world, &tiny_model(), &tiny_train(0)).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = ModelParams::init(1, &tiny_model(), 4).unwrap();
        assert_eq!(out.params.metric_m.data(), fresh.metric_m.data());
        assert_eq!(out.params.psat.queries.data(), fresh.psat.queries.data());
    }

    #[test]
    fn identical_seeds_identical_metrics() {
        let world = tiny_world();
        let cfg = tiny_train(2);
        let a = train(&world, &tiny_model(), &cfg).unwrap();
        let b = train(&world, &tiny_model(), &cfg).unwrap();
        let csv_a = metrics_csv(&a.metrics, "{}");
        let csv_b = metrics_csv(&b.metrics, "{}");
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn psd_maintained_during_training() {
        let world = tiny_world();
        let out = train(&world, &tiny_model(), &tiny_train(2)).unwrap();
        assert!(!out.psd_min_eigenvalues.is_empty());
        for &e in &out.psd_min_eigenvalues {
            assert!(e >= -1e-10, "min eigenvalue {e}");
        }
    }

    #[test]
    fn retrieval_self_targets_are_perfect() {
        let q = DenseTensor::from_vec(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5]).unwrap();
        let acc = retrieval_eval(&q, &q, &GroundMetric::Euclidean, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn retrieval_rejects_oversized_k() {
        let q = DenseTensor::from_vec(vec![4, 2], vec![0.1; 8]).unwrap();
        assert!(retrieval_eval(&q, &q, &GroundMetric::Euclidean, 5).is_err());
    }

    #[test]
    fn retrieval_separable_clusters() {
        // Two tight clusters; each query's own target is nearest.
        let q = DenseTensor::from_vec(
            vec![4, 2],
            vec![0.0, 0.01, 0.0, -0.01, 5.0, 0.01, 5.0, -0.01],
        )
        .unwrap();
        let acc = retrieval_eval(&q, &q, &GroundMetric::Euclidean, 1).unwrap();
        assert!(acc >= 0.5);
    }

    #[test]
    fn modality_gap_closed_forms() {
        let a = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(modality_gap(&a, &a).unwrap(), 0.0);
        let b = DenseTensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let gap = modality_gap(&a, &b).unwrap();
        assert!((gap - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = ModelParams::init(3, &tiny_model(), 4).unwrap();
        let dir = std::env::temp_dir().join("potalign_test_ckpt");
        let path = dir.join("model.pota");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for ((n1, t1), (n2, t2)) in params.named().iter().zip(&loaded.named()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_header_matches_contract() {
        let csv = metrics_csv(&[], "{}");
        assert!(csv.lines().nth(2).unwrap().starts_with("epoch,total,kl_vs"));
    }

    #[test]
    fn reconstruction_only_descends_on_fixed_batch() {
        let world = tiny_world();
        let batch = &crate::synth::batcher(&world.triplets, 4, 1, 0).unwrap()[0];
        let mut params = ModelParams::init(2, &tiny_model(), 4).unwrap();
        let cfg = TrainConfig {
            losses: LossToggles {
                mpot: false,
                contrastive: false,
                reconstruction: true,
            },
            learning_rate: 1e-2,
            batch_size: 4,
            ..Default::default()
        };
        let sizes: Vec<usize> = params.named()[1..].iter().map(|(_, t)| t.numel()).collect();
        let mut adam = AdamState::new(&sizes);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let breakdown = run_step(&mut params, batch, &cfg, &mut adam, &world).unwrap();
            if first.is_none() {
                first = Some(breakdown.reconstruction);
            }
            last = breakdown.reconstruction;
        }
        let first = first.unwrap();
        assert!(
            last < first,
            "reconstruction loss did not descend: {first:.4} -> {last:.4}"
        );
    }
}
