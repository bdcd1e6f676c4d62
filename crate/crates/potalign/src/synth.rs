//! Deterministic synthetic (volume, slice, text-embedding) triplets.
//!
//! Each subject draws a latent vector; the volume is a smooth mixture of
//! latent-parameterized Gaussian blobs, so slices at nearby indices stay
//! similar. One (plane, slice) pair is drawn per subject, the slice image is
//! the exact cross-section, and the text embedding is the frozen text branch
//! of the slice embedding plus optional Gaussian noise. A fraction rho of
//! subjects get the text embedding of a different subject, flagged as
//! mispaired — exactly floor(rho * n) of them, so tests have deterministic
//! denominators.

use serde::{Deserialize, Serialize};

use crate::psat::{FrozenEncoders, VolumeGrid, NUM_PLANES};
use crate::rng::Rng;
use crate::tensor::DenseTensor;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub latent_dim: usize,
    /// Volume side length D.
    pub volume_side: usize,
    /// Scale of the Gaussian noise added to text embeddings.
    pub noise_sigma: f64,
    /// Fraction of subjects whose text embedding is swapped, in [0, 1].
    pub misalignment_rate: f64,
    /// Dimension of the frozen 2D embedding space.
    pub embed_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            n_subjects: 200,
            latent_dim: 24,
            volume_side: 8,
            noise_sigma: 0.0,
            misalignment_rate: 0.0,
            embed_dim: 16,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("n_subjects must be positive".into()));
        }
        if self.volume_side < 2 {
            return Err(Error::InvalidConfig("volume_side must be at least 2".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.misalignment_rate) {
            return Err(Error::InvalidConfig(
                "misalignment_rate must lie in [0, 1]".into(),
            ));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "latent_dim and embed_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One synthetic subject.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub volume: VolumeGrid,
    /// D x D cross-section at (plane, slice_index).
    pub slice_image: DenseTensor,
    /// 1 x embed_dim text embedding.
    pub text_embedding: DenseTensor,
    pub plane: usize,
    pub slice_index: usize,
    pub mispaired: bool,
}

/// Generated dataset plus the frozen encoders that produced it.
pub struct World {
    pub triplets: Vec<Triplet>,
    pub encoders: FrozenEncoders,
    pub config: WorldConfig,
}

/// Cross-section of a volume: plane 0 slices axis 0 (coronal), plane 1 axis 1
/// (sagittal), plane 2 axis 2 (axial); `extract_slice(v, 2, j)[r][s] =
/// voxels[r][s][j]`.
pub fn extract_slice(volume: &VolumeGrid, plane: usize, index: usize) -> Result<DenseTensor> {
    let d = volume.side();
    if plane >= NUM_PLANES || index >= d {
        return Err(Error::IndexOutOfRange {
            op: "extract_slice",
            detail: format!("(plane {plane}, index {index}) outside {NUM_PLANES} x {d}"),
        });
    }
    let mut out = DenseTensor::zeros(&[d, d]);
    for r in 0..d {
        for s in 0..d {
            let v = match plane {
                0 => volume.at(index, r, s),
                1 => volume.at(r, index, s),
                _ => volume.at(r, s, index),
            };
            out.set_at(r, s, v);
        }
    }
    Ok(out)
}

const BLOBS: usize = 2;

/// Smooth subject volume built from three families of axis-aligned texture
/// patterns plus broad Gaussian blobs. Each family is constant along its own
/// axis (a high-contrast in-plane signature visible in every cross-section
/// of that orientation) and modulated only gently in depth, so adjacent
/// slices change slowly while different subjects stay far apart.
fn blob_volume(latent: &[f64], side: usize) -> VolumeGrid {
    let d = side as f64;
    let l = |i: usize| latent[i % latent.len()];
    let squash = |x: f64| 0.5 * (1.0 + (x / 1.5).tanh());

    let base_level = 0.4 + 0.2 * squash(l(0));
    // Subject texture: three wave families, each a function of one
    // coordinate extruded along the other two. Every cross-section of a
    // given orientation then shows the identical full-contrast in-plane
    // pattern (the two transverse families), while the slice index enters
    // only through the third family as a constant intensity shift.
    // Magnitudes are floored so no family vanishes for any subject.
    let taper = [1.0, 0.9, 0.7];
    let coeff = |axis: usize, k: usize| -> f64 {
        let v = l(1 + axis * 3 + k);
        let mag = taper[k] * (0.07 + 0.08 * (2.0 * squash(v.abs()) - 1.0));
        mag.copysign(v)
    };
    let full = std::f64::consts::PI / (d - 1.0);
    let wave = |axis: usize, x: f64| -> f64 {
        (0..3).map(|k| coeff(axis, k) * ((k + 1) as f64 * full * x).cos()).sum()
    };

    let mut wa = vec![0.0; side];
    let mut wb = vec![0.0; side];
    let mut wc = vec![0.0; side];
    for t in 0..side {
        wa[t] = wave(0, t as f64);
        wb[t] = wave(1, t as f64);
        wc[t] = wave(2, t as f64);
    }

    let mut data = vec![0.0; side * side * side];
    for a in 0..side {
        for b in 0..side {
            for c in 0..side {
                data[a * side * side + b * side + c] = base_level + wa[a] + wb[b] + wc[c];
            }
        }
    }
    for k in 0..BLOBS {
        let lb = |i: usize| latent[(10 + k * 5 + i) % latent.len()];
        let cx = 1.0 + (d - 2.0) * squash(lb(0));
        let cy = 1.0 + (d - 2.0) * squash(lb(1));
        let cz = 1.0 + (d - 2.0) * squash(lb(2));
        let sigma = d / 2.5 + d / 4.0 * squash(lb(3));
        let amp = 0.04 + 0.06 * squash(lb(4));
        let inv = 1.0 / (2.0 * sigma * sigma);
        for a in 0..side {
            for b in 0..side {
                for c in 0..side {
                    let dx = a as f64 - cx;
                    let dy = b as f64 - cy;
                    let dz = c as f64 - cz;
                    data[a * side * side + b * side + c] +=
                        amp * (-(dx * dx + dy * dy + dz * dz) * inv).exp();
                }
            }
        }
    }
    // Smooth range squash: keeps intensities inside (0, 1) without the hard
    // clamping that would collapse saturated slices into exact duplicates.
    for v in data.iter_mut() {
        *v = (0.5 + 0.45 * (2.0 * (*v - 0.5)).tanh()).clamp(0.0, 1.0);
    }
    VolumeGrid::new(DenseTensor::from_vec(vec![side, side, side], data).expect("sized from data"))
        .expect("squashed into [0, 1]")
}

/// Generate the full triplet dataset; a pure function of the config.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let encoders = FrozenEncoders::new(cfg.seed, cfg.volume_side, cfg.embed_dim);
    let master = Rng::new(cfg.seed);
    let mut subject_rng = master.derive(1);
    let mut noise_rng = master.derive(2);

    let mut triplets = Vec::with_capacity(cfg.n_subjects);
    for _ in 0..cfg.n_subjects {
        let latent = subject_rng.normal_vec(cfg.latent_dim);
        let volume = blob_volume(&latent, cfg.volume_side);
        let plane = subject_rng.below(NUM_PLANES);
        let slice_index = subject_rng.below(cfg.volume_side);
        let slice_image = extract_slice(&volume, plane, slice_index)?;
        let img_emb = encoders.image_embed(&slice_image)?;
        let mut text = encoders.text_embed(&img_emb)?;
        if cfg.noise_sigma > 0.0 {
            for v in text.data_mut().iter_mut() {
                *v += cfg.noise_sigma * noise_rng.normal();
            }
        }
        triplets.push(Triplet {
            volume,
            slice_image,
            text_embedding: text,
            plane,
            slice_index,
            mispaired: false,
        });
    }

    // Exact-count corruption: floor(rho * n) subjects receive the text
    // embedding of a different subject.
    let n = cfg.n_subjects;
    let k = (cfg.misalignment_rate * n as f64).floor() as usize;
    if k > 0 {
        let mut corrupt_rng = master.derive(3);
        let mut order: Vec<usize> = (0..n).collect();
        corrupt_rng.shuffle(&mut order);
        let originals: Vec<DenseTensor> =
            triplets.iter().map(|t| t.text_embedding.clone()).collect();
        for &pos in order.iter().take(k) {
            let donor = if n > 1 {
                let mut d = corrupt_rng.below(n - 1);
                if d >= pos {
                    d += 1;
                }
                d
            } else {
                pos
            };
            triplets[pos].text_embedding = originals[donor].clone();
            triplets[pos].mispaired = true;
        }
    }

    Ok(World {
        triplets,
        encoders,
        config: cfg.clone(),
    })
}

/// One mini-batch of aligned triplet arrays.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub indices: Vec<usize>,
    pub volumes: Vec<VolumeGrid>,
    pub slices: Vec<DenseTensor>,
    pub text_embeddings: Vec<DenseTensor>,
    pub planes: Vec<usize>,
    pub slice_indices: Vec<usize>,
    pub mispaired: Vec<bool>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic epoch batching: shuffle keyed by (seed, epoch), chunks of
/// `b`, final partial batch dropped.
pub fn batcher(dataset: &[Triplet], b: usize, seed: u64, epoch: usize) -> Result<Vec<TripletBatch>> {
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if dataset.len() < b {
        return Err(Error::InvalidConfig(format!(
            "dataset of {} is smaller than batch size {b}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Rng::new(seed).derive(0x6a7c4 + epoch as u64);
    rng.shuffle(&mut order);

    let mut batches = Vec::with_capacity(dataset.len() / b);
    for chunk in order.chunks(b) {
        if chunk.len() < b {
            break;
        }
        let mut batch = TripletBatch {
            indices: chunk.to_vec(),
            volumes: Vec::with_capacity(b),
            slices: Vec::with_capacity(b),
            text_embeddings: Vec::with_capacity(b),
            planes: Vec::with_capacity(b),
            slice_indices: Vec::with_capacity(b),
            mispaired: Vec::with_capacity(b),
        };
        for &i in chunk {
            let t = &dataset[i];
            batch.volumes.push(t.volume.clone());
            batch.slices.push(t.slice_image.clone());
            batch.text_embeddings.push(t.text_embedding.clone());
            batch.planes.push(t.plane);
            batch.slice_indices.push(t.slice_index);
            batch.mispaired.push(t.mispaired);
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ── Dataset container ────────────────────────────────────────────────

/// Serialize a generated world into the tensor container, one entry group
/// per triplet plus the world config. The frozen encoders are not stored;
/// they are reconstructed deterministically from the config seed on load.
pub fn dataset_entries(world: &World) -> Vec<(String, DenseTensor)> {
    let cfg = &world.config;
    let mut entries = vec![(
        "world.config".to_string(),
        DenseTensor::row(vec![
            cfg.seed as f64,
            cfg.n_subjects as f64,
            cfg.latent_dim as f64,
            cfg.volume_side as f64,
            cfg.noise_sigma,
            cfg.misalignment_rate,
            cfg.embed_dim as f64,
        ]),
    )];
    for (i, t) in world.triplets.iter().enumerate() {
        entries.push((format!("triplet.{i}.volume"), t.volume.voxels().clone()));
        entries.push((format!("triplet.{i}.slice"), t.slice_image.clone()));
        entries.push((format!("triplet.{i}.text"), t.text_embedding.clone()));
        entries.push((
            format!("triplet.{i}.meta"),
            DenseTensor::row(vec![
                t.plane as f64,
                t.slice_index as f64,
                if t.mispaired { 1.0 } else { 0.0 },
            ]),
        ));
    }
    entries
}

pub fn world_from_entries(entries: &[(String, DenseTensor)]) -> Result<World> {
    let get = |name: &str| -> Result<&DenseTensor> {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidConfig(format!("dataset missing entry {name}")))
    };
    let c = get("world.config")?;
    if c.numel() != 7 {
        return Err(Error::InvalidConfig("malformed world.config entry".into()));
    }
    let d = c.data();
    let config = WorldConfig {
        seed: d[0] as u64,
        n_subjects: d[1] as usize,
        latent_dim: d[2] as usize,
        volume_side: d[3] as usize,
        noise_sigma: d[4],
        misalignment_rate: d[5],
        embed_dim: d[6] as usize,
    };
    let encoders = FrozenEncoders::new(config.seed, config.volume_side, config.embed_dim);
    let mut triplets = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let meta = get(&format!("triplet.{i}.meta"))?;
        triplets.push(Triplet {
            volume: VolumeGrid::new(get(&format!("triplet.{i}.volume"))?.clone())?,
            slice_image: get(&format!("triplet.{i}.slice"))?.clone(),
            text_embedding: get(&format!("triplet.{i}.text"))?.clone(),
            plane: meta.data()[0] as usize,
            slice_index: meta.data()[1] as usize,
            mispaired: meta.data()[2] != 0.0,
        });
    }
    Ok(World {
        triplets,
        encoders,
        config,
    })
}

pub fn save_dataset(
    world: &World,
    path: &std::path::Path,
) -> std::result::Result<(), crate::checkpoint::CheckpointError> {
    crate::checkpoint::save_tensors(path, &dataset_entries(world))
}

pub fn load_dataset(path: &std::path::Path) -> std::result::Result<World, crate::checkpoint::CheckpointError> {
    let entries = crate::checkpoint::load_tensors(path)?;
    world_from_entries(&entries)
        .map_err(|e| crate::checkpoint::CheckpointError::Malformed(e.to_string()))
}
