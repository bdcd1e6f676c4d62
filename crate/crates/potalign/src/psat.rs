//! Toy-scale 3D encoder/decoder and the plane-slice-aware query transformer.
//!
//! The volume encoder patchifies a D^3 grid into non-overlapping cubes and
//! embeds each linearly; the decoder inverts the shape. The query transformer
//! runs learnable queries through one self-attention block, cross-attends to
//! the volume tokens, applies a per-query MLP, and mean-pools into a single
//! embedding in the frozen 2D space. A zero-initialized plane-slice position
//! table is added to both the queries and the volume tokens before attention.

use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseTensor;
use crate::{Error, Result};

/// Coronal, sagittal, axial.
pub const NUM_PLANES: usize = 3;

/// A cubic voxel grid with intensities in [0, 1].
#[derive(Clone, Debug)]
pub struct VolumeGrid {
    voxels: DenseTensor,
    side: usize,
}

impl VolumeGrid {
    pub fn new(voxels: DenseTensor) -> Result<Self> {
        let shape = voxels.shape().to_vec();
        if shape.len() != 3 || shape[0] != shape[1] || shape[1] != shape[2] {
            return Err(Error::ShapeMismatch {
                op: "volume_grid",
                detail: format!("cubic D x D x D grid required, got {shape:?}"),
            });
        }
        if voxels.data().iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
            return Err(Error::Domain {
                op: "volume_grid",
                detail: "voxel intensities must lie in [0, 1]".into(),
            });
        }
        let side = shape[0];
        Ok(VolumeGrid { voxels, side })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn voxels(&self) -> &DenseTensor {
        &self.voxels
    }

    pub fn at(&self, a: usize, b: usize, c: usize) -> f64 {
        let d = self.side;
        self.voxels.data()[a * d * d + b * d + c]
    }
}

// ── Volume encoder / decoder ─────────────────────────────────────────

/// Linear patch embedding and its decoding counterpart.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// patch_volume x channels
    pub patch_w: DenseTensor,
    pub patch_b: DenseTensor,
    /// channels x patch_volume
    pub dec_w: DenseTensor,
    pub dec_b: DenseTensor,
    pub side: usize,
    pub patch: usize,
    pub channels: usize,
}

impl EncoderParams {
    pub fn init(rng: &mut Rng, side: usize, patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 || side % patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "volume side {side} not divisible by patch side {patch}"
            )));
        }
        let pv = patch * patch * patch;
        let w_scale = 1.0 / (pv as f64).sqrt();
        let d_scale = 1.0 / (channels as f64).sqrt();
        Ok(EncoderParams {
            patch_w: DenseTensor::from_vec(
                vec![pv, channels],
                rng.normal_vec(pv * channels).iter().map(|v| v * w_scale).collect(),
            )?,
            patch_b: DenseTensor::zeros(&[1, channels]),
            dec_w: DenseTensor::from_vec(
                vec![channels, pv],
                rng.normal_vec(channels * pv).iter().map(|v| v * d_scale).collect(),
            )?,
            dec_b: DenseTensor::zeros(&[1, pv]),
            side,
            patch,
            channels,
        })
    }

    pub fn token_count(&self) -> usize {
        let g = self.side / self.patch;
        g * g * g
    }
}

/// Rearrange a volume into [tokens, patch^3] rows of non-overlapping cubes.
pub fn patchify(volume: &VolumeGrid, patch: usize) -> Result<DenseTensor> {
    let d = volume.side();
    if patch == 0 || d % patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "volume side {d} not divisible by patch side {patch}"
        )));
    }
    let g = d / patch;
    let pv = patch * patch * patch;
    let mut out = DenseTensor::zeros(&[g * g * g, pv]);
    for pa in 0..g {
        for pb in 0..g {
            for pc in 0..g {
                let t = (pa * g + pb) * g + pc;
                for a in 0..patch {
                    for b in 0..patch {
                        for c in 0..patch {
                            let u = (a * patch + b) * patch + c;
                            out.set_at(t, u, volume.at(pa * patch + a, pb * patch + b, pc * patch + c));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: [tokens, patch^3] rows back to a D^3 grid.
pub fn unpatchify(tokens: &DenseTensor, side: usize, patch: usize) -> Result<DenseTensor> {
    let g = side / patch;
    let pv = patch * patch * patch;
    if tokens.rows() != g * g * g || tokens.cols() != pv {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            detail: format!(
                "expected {} x {pv} tokens for side {side}, got {:?}",
                g * g * g,
                tokens.shape()
            ),
        });
    }
    let mut out = DenseTensor::zeros(&[side, side, side]);
    for pa in 0..g {
        for pb in 0..g {
            for pc in 0..g {
                let t = (pa * g + pb) * g + pc;
                for a in 0..patch {
                    for b in 0..patch {
                        for c in 0..patch {
                            let u = (a * patch + b) * patch + c;
                            let idx = (pa * patch + a) * side * side
                                + (pb * patch + b) * side
                                + (pc * patch + c);
                            out.data_mut()[idx] = tokens.at(t, u);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Encoder parameter nodes on a tape.
pub struct EncoderNodes {
    pub patch_w: NodeId,
    pub patch_b: NodeId,
    pub dec_w: NodeId,
    pub dec_b: NodeId,
}

impl EncoderNodes {
    pub fn register(tape: &mut Tape, params: &EncoderParams, trainable: bool) -> Self {
        let mut reg = |t: &DenseTensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderNodes {
            patch_w: reg(&params.patch_w),
            patch_b: reg(&params.patch_b),
            dec_w: reg(&params.dec_w),
            dec_b: reg(&params.dec_b),
        }
    }
}

/// Fixed sinusoidal position code over the token grid, cycling
/// (axis, phase, frequency) across channels. Tokens are otherwise pure
/// content embeddings and attention could not address locations in the
/// volume.
pub fn token_positional_encoding(grid: usize, channels: usize) -> DenseTensor {
    let t = grid * grid * grid;
    let mut out = DenseTensor::zeros(&[t, channels]);
    for pa in 0..grid {
        for pb in 0..grid {
            for pc in 0..grid {
                let token = (pa * grid + pb) * grid + pc;
                let coords = [pa as f64, pb as f64, pc as f64];
                for c in 0..channels {
                    let axis = c % 3;
                    let phase = (c / 3) % 2;
                    let freq = 1.0 + (c / 6) as f64;
                    let angle = coords[axis] * freq * std::f64::consts::PI / grid as f64;
                    let v = if phase == 0 { angle.sin() } else { angle.cos() };
                    out.set_at(token, c, 0.7 * v);
                }
            }
        }
    }
    out
}

/// Patchify and linearly embed a volume on the tape: [T, channels].
pub fn encode_volume_on_tape(
    tape: &mut Tape,
    volume: &VolumeGrid,
    params: &EncoderParams,
    nodes: &EncoderNodes,
) -> Result<NodeId> {
    let patches = tape.constant(patchify(volume, params.patch)?);
    let t = params.token_count();
    let lin = tape.matmul(patches, nodes.patch_w)?;
    let bias = tape.broadcast_rows(nodes.patch_b, t)?;
    tape.add(lin, bias)
}

/// Tag encoder tokens with the fixed position code before they feed
/// attention. The reconstruction path decodes the raw tokens; only the
/// alignment branch sees positions.
pub fn tag_token_positions_on_tape(
    tape: &mut Tape,
    tokens: NodeId,
    params: &EncoderParams,
) -> Result<NodeId> {
    let pe = tape.constant(token_positional_encoding(
        params.side / params.patch,
        params.channels,
    ));
    tape.add(tokens, pe)
}

/// Linearly decode tokens back to patch rows on the tape: [T, patch^3].
pub fn decode_tokens_on_tape(
    tape: &mut Tape,
    tokens: NodeId,
    nodes: &EncoderNodes,
) -> Result<NodeId> {
    let t = tape.value(tokens).rows();
    let lin = tape.matmul(tokens, nodes.dec_w)?;
    let bias = tape.broadcast_rows(nodes.dec_b, t)?;
    tape.add(lin, bias)
}

/// Untaped encode: token sequence for a volume.
pub fn encode_volume(volume: &VolumeGrid, params: &EncoderParams) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params, false);
    let out = encode_volume_on_tape(&mut tape, volume, params, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Untaped decode: reconstructed D^3 grid from a token sequence. The output
/// is a raw grid (reconstructions may leave [0, 1]).
pub fn decode_volume(tokens: &DenseTensor, params: &EncoderParams) -> Result<DenseTensor> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params, false);
    let tn = tape.constant(tokens.clone());
    let out = decode_tokens_on_tape(&mut tape, tn, &nodes)?;
    unpatchify(tape.value(out), params.side, params.patch)
}

// ── Plane-slice-aware transformer ────────────────────────────────────

/// Learnable queries, attention weights, plane-slice position table, and the
/// projection MLP.
#[derive(Clone, Debug)]
pub struct PsatParams {
    pub queries: DenseTensor,
    pub self_wq: DenseTensor,
    pub self_wk: DenseTensor,
    pub self_wv: DenseTensor,
    pub self_wo: DenseTensor,
    pub cross_wq: DenseTensor,
    pub cross_wk: DenseTensor,
    pub cross_wv: DenseTensor,
    pub cross_wo: DenseTensor,
    /// Plane-slice position table, stored row-major as [plane * num_slices
    /// + slice, channels]. Zero-initialized.
    pub pspe: DenseTensor,
    pub mlp_w1: DenseTensor,
    pub mlp_b1: DenseTensor,
    pub mlp_w2: DenseTensor,
    pub mlp_b2: DenseTensor,
    pub num_queries: usize,
    pub channels: usize,
    pub out_dim: usize,
    pub num_slices: usize,
}

impl PsatParams {
    pub fn init(
        rng: &mut Rng,
        num_queries: usize,
        channels: usize,
        out_dim: usize,
        num_slices: usize,
    ) -> Self {
        let c = channels;
        let scale = 1.0 / (c as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, s: f64| {
            DenseTensor::from_vec(
                vec![rows, cols],
                rng.normal_vec(rows * cols).iter().map(|v| v * s).collect(),
            )
            .expect("shape sized from data")
        };
        PsatParams {
            queries: mat(num_queries, c, 1.0),
            self_wq: mat(c, c, scale),
            self_wk: mat(c, c, scale),
            self_wv: mat(c, c, scale),
            self_wo: mat(c, c, scale),
            cross_wq: mat(c, c, scale),
            cross_wk: mat(c, c, scale),
            cross_wv: mat(c, c, scale),
            cross_wo: mat(c, c, scale),
            pspe: DenseTensor::zeros(&[NUM_PLANES * num_slices, c]),
            mlp_w1: mat(c, c, scale),
            mlp_b1: DenseTensor::zeros(&[1, c]),
            mlp_w2: mat(c, out_dim, scale),
            mlp_b2: DenseTensor::zeros(&[1, out_dim]),
            num_queries,
            channels,
            out_dim,
            num_slices,
        }
    }
}

/// Row of the plane-slice table for (plane, slice).
pub fn pspe_lookup(params: &PsatParams, plane: usize, slice_index: usize) -> Result<DenseTensor> {
    if plane >= NUM_PLANES || slice_index >= params.num_slices {
        return Err(Error::IndexOutOfRange {
            op: "pspe_lookup",
            detail: format!(
                "(plane {plane}, slice {slice_index}) outside {NUM_PLANES} x {}",
                params.num_slices
            ),
        });
    }
    Ok(params.pspe.row_at(plane * params.num_slices + slice_index))
}

/// PSAT parameter nodes on a tape.
pub struct PsatNodes {
    pub queries: NodeId,
    pub self_wq: NodeId,
    pub self_wk: NodeId,
    pub self_wv: NodeId,
    pub self_wo: NodeId,
    pub cross_wq: NodeId,
    pub cross_wk: NodeId,
    pub cross_wv: NodeId,
    pub cross_wo: NodeId,
    pub pspe: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

impl PsatNodes {
    pub fn register(tape: &mut Tape, params: &PsatParams, trainable: bool) -> Self {
        let mut reg = |t: &DenseTensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        PsatNodes {
            queries: reg(&params.queries),
            self_wq: reg(&params.self_wq),
            self_wk: reg(&params.self_wk),
            self_wv: reg(&params.self_wv),
            self_wo: reg(&params.self_wo),
            cross_wq: reg(&params.cross_wq),
            cross_wk: reg(&params.cross_wk),
            cross_wv: reg(&params.cross_wv),
            cross_wo: reg(&params.cross_wo),
            pspe: reg(&params.pspe),
            mlp_w1: reg(&params.mlp_w1),
            mlp_b1: reg(&params.mlp_b1),
            mlp_w2: reg(&params.mlp_w2),
            mlp_b2: reg(&params.mlp_b2),
        }
    }
}

/// Output node plus the attention-weight nodes, for inspection.
pub struct PsatForward {
    pub output: NodeId,
    pub self_attention: NodeId,
    pub cross_attention: NodeId,
}

/// One attention block: softmax(Q Wq (K Wk)^T / sqrt(C)) (V Wv) Wo.
fn attention_on_tape(
    tape: &mut Tape,
    queries: NodeId,
    keys_values: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    channels: usize,
) -> Result<(NodeId, NodeId)> {
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (channels as f64).sqrt())?;
    let attn = tape.softmax(scaled, 1)?;
    let ctx = tape.matmul(attn, v)?;
    let out = tape.matmul(ctx, wo)?;
    Ok((out, attn))
}

/// Full PSAT pipeline on the tape: inject the plane-slice embedding into
/// queries and volume tokens, self-attend over queries, cross-attend to the
/// tokens, project each query through the MLP, and mean-pool to [1, out_dim].
pub fn psat_forward_on_tape(
    tape: &mut Tape,
    volume_tokens: NodeId,
    params: &PsatParams,
    nodes: &PsatNodes,
    plane: usize,
    slice_index: usize,
) -> Result<PsatForward> {
    if plane >= NUM_PLANES || slice_index >= params.num_slices {
        return Err(Error::IndexOutOfRange {
            op: "psat_forward",
            detail: format!(
                "(plane {plane}, slice {slice_index}) outside {NUM_PLANES} x {}",
                params.num_slices
            ),
        });
    }
    let t = tape.value(volume_tokens).rows();
    let q_count = params.num_queries;
    let c = params.channels;

    let pspe_row = tape.slice(nodes.pspe, 0, plane * params.num_slices + slice_index, 1)?;
    let pspe_q = tape.broadcast_rows(pspe_row, q_count)?;
    let queries = tape.add(nodes.queries, pspe_q)?;
    let pspe_t = tape.broadcast_rows(pspe_row, t)?;
    let tokens = tape.add(volume_tokens, pspe_t)?;

    let (self_ctx, self_attn) = attention_on_tape(
        tape,
        queries,
        queries,
        nodes.self_wq,
        nodes.self_wk,
        nodes.self_wv,
        nodes.self_wo,
        c,
    )?;
    let self_out = tape.add(queries, self_ctx)?;
    let (cross_ctx, cross_attn) = attention_on_tape(
        tape,
        self_out,
        tokens,
        nodes.cross_wq,
        nodes.cross_wk,
        nodes.cross_wv,
        nodes.cross_wo,
        c,
    )?;
    let cross_out = tape.add(self_out, cross_ctx)?;

    let h1 = tape.matmul(cross_out, nodes.mlp_w1)?;
    let b1 = tape.broadcast_rows(nodes.mlp_b1, q_count)?;
    let h1b = tape.add(h1, b1)?;
    let act = tape.tanh(h1b)?;
    let h2 = tape.matmul(act, nodes.mlp_w2)?;
    let b2 = tape.broadcast_rows(nodes.mlp_b2, q_count)?;
    let per_query = tape.add(h2, b2)?; // [Q, out_dim]

    let pool = tape.constant(DenseTensor::filled(&[1, q_count], 1.0 / q_count as f64));
    let output = tape.matmul(pool, per_query)?;
    Ok(PsatForward {
        output,
        self_attention: self_attn,
        cross_attention: cross_attn,
    })
}

/// Untaped PSAT forward: projected embedding for one volume token sequence.
pub fn psat_forward(
    volume_tokens: &DenseTensor,
    params: &PsatParams,
    plane: usize,
    slice_index: usize,
) -> Result<DenseTensor> {
    Ok(psat_forward_traced(volume_tokens, params, plane, slice_index)?.0)
}

/// Attention weights captured from a forward pass.
pub struct PsatTrace {
    pub self_attention: DenseTensor,
    pub cross_attention: DenseTensor,
}

pub fn psat_forward_traced(
    volume_tokens: &DenseTensor,
    params: &PsatParams,
    plane: usize,
    slice_index: usize,
) -> Result<(DenseTensor, PsatTrace)> {
    let mut tape = Tape::new();
    let nodes = PsatNodes::register(&mut tape, params, false);
    let tokens = tape.constant(volume_tokens.clone());
    let fwd = psat_forward_on_tape(&mut tape, tokens, params, &nodes, plane, slice_index)?;
    Ok((
        tape.value(fwd.output).clone(),
        PsatTrace {
            self_attention: tape.value(fwd.self_attention).clone(),
            cross_attention: tape.value(fwd.cross_attention).clone(),
        },
    ))
}

// ── Frozen 2D encoders ───────────────────────────────────────────────

/// Deterministic stand-ins for the pre-aligned 2D vision/language encoders:
/// fixed random linear maps, seeded once per experiment, never updated.
#[derive(Clone, Debug)]
pub struct FrozenEncoders {
    img_w: DenseTensor,
    img_b: DenseTensor,
    mix_w: DenseTensor,
    mix_b: DenseTensor,
    pub side: usize,
    pub dim: usize,
}

impl FrozenEncoders {
    pub fn new(seed: u64, side: usize, dim: usize) -> Self {
        let mut rng = Rng::new(seed).derive(0x2dc0de);
        let s2 = side * side;
        let img_scale = 1.5 / (s2 as f64).sqrt();
        let img_w = DenseTensor::from_vec(
            vec![s2, dim],
            rng.normal_vec(s2 * dim).iter().map(|v| v * img_scale).collect(),
        )
        .expect("sized from data");
        let img_b = DenseTensor::from_vec(
            vec![1, dim],
            rng.normal_vec(dim).iter().map(|v| v * 0.1).collect(),
        )
        .expect("sized from data");
        // Text branch: near-identity mixing of the image embedding plus a
        // fixed offset, so paired embeddings stay correlated while the two
        // modalities occupy shifted regions.
        let mix_scale = 0.25 / (dim as f64).sqrt();
        let mut mix_w = DenseTensor::eye(dim, 1.0);
        for i in 0..dim {
            for j in 0..dim {
                let v = mix_w.at(i, j) + mix_scale * rng.normal();
                mix_w.set_at(i, j, v);
            }
        }
        let mix_b = DenseTensor::from_vec(
            vec![1, dim],
            rng.normal_vec(dim).iter().map(|v| v * 0.05).collect(),
        )
        .expect("sized from data");
        FrozenEncoders {
            img_w,
            img_b,
            mix_w,
            mix_b,
            side,
            dim,
        }
    }

    /// Image branch: flatten a D x D slice and project.
    pub fn image_embed(&self, slice: &DenseTensor) -> Result<DenseTensor> {
        let s2 = self.side * self.side;
        if slice.numel() != s2 {
            return Err(Error::ShapeMismatch {
                op: "image_embed",
                detail: format!("expected {s2} pixels, got {}", slice.numel()),
            });
        }
        let mut out = self.img_b.clone();
        for j in 0..self.dim {
            let mut acc = out.at(0, j);
            for i in 0..s2 {
                acc += slice.data()[i] * self.img_w.at(i, j);
            }
            out.set_at(0, j, acc);
        }
        Ok(out)
    }

    /// Text branch: fixed mixing of an image embedding. Noise, when modeled,
    /// is added by the data generator.
    pub fn text_embed(&self, image_embedding: &DenseTensor) -> Result<DenseTensor> {
        if image_embedding.numel() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "text_embed",
                detail: format!("expected {} dims, got {}", self.dim, image_embedding.numel()),
            });
        }
        let mut out = self.mix_b.clone();
        for j in 0..self.dim {
            let mut acc = out.at(0, j);
            for i in 0..self.dim {
                acc += image_embedding.data()[i] * self.mix_w.at(i, j);
            }
            out.set_at(0, j, acc);
        }
        Ok(out)
    }

    /// Bias of the image branch (the embedding of an all-zero input).
    pub fn image_bias(&self) -> &DenseTensor {
        &self.img_b
    }
}
