//! Noise-tolerance benchmark: a full factorial over misalignment rates,
//! alignment losses, and seeds, with per-cell retrieval metrics and
//! mispaired-mass diagnostics.

use serde::Serialize;

use crate::metric::GroundMetric;
use crate::synth::{generate_world, WorldConfig};
use crate::train::{
    embed_dataset, mispair_mass, text_embeddings, train, LossToggles, ModelConfig, TrainConfig,
};
use crate::{Error, Result};

/// Alignment objective under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mpot,
    Contrastive,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "mpot" => Ok(LossKind::Mpot),
            "contrastive" => Ok(LossKind::Contrastive),
            other => Err(Error::InvalidConfig(format!("unknown loss kind '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Mpot => "mpot",
            LossKind::Contrastive => "contrastive",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub rhos: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    /// Parallel worker cap for independent cells.
    pub jobs: usize,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "rho, loss, and seed factor lists must be non-empty".into(),
            ));
        }
        if self.rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("rho values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One factorial cell's final measurements.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchCell {
    pub rho: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub top1_s: f64,
    pub top1_t: f64,
    pub gap: f64,
    /// Mass on mispaired columns at the configured (partial) mass.
    pub mispair_mass_partial: f64,
    /// Mass on mispaired columns re-solved at full mass on the same trained
    /// cost matrices.
    pub mispair_mass_full: f64,
}

/// Mean and standard deviation over seeds for one (rho, loss) pair.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchAggregate {
    pub rho: f64,
    pub loss: LossKind,
    pub seeds: usize,
    pub top1_s_mean: f64,
    pub top1_s_sd: f64,
    pub top1_t_mean: f64,
    pub top1_t_sd: f64,
    pub gap_mean: f64,
    pub mispair_mass_partial_mean: f64,
    pub mispair_mass_full_mean: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchTable {
    pub cells: Vec<BenchCell>,
    pub aggregates: Vec<BenchAggregate>,
}

impl BenchTable {
    /// Per-cell rows followed by per-(rho, loss) aggregate rows.
    pub fn to_csv(&self, config_json: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", crate::TOOL_VERSION));
        out.push_str(&format!("# config {config_json}\n"));
        out.push_str(
            "kind,rho,loss,seed,top1_s,top1_t,gap,mispair_mass_partial,mispair_mass_full,top1_s_sd\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "cell,{},{},{},{},{},{},{},{},\n",
                c.rho,
                c.loss.label(),
                c.seed,
                c.top1_s,
                c.top1_t,
                c.gap,
                c.mispair_mass_partial,
                c.mispair_mass_full
            ));
        }
        for a in &self.aggregates {
            out.push_str(&format!(
                "aggregate,{},{},{},{},{},{},{},{},{}\n",
                a.rho,
                a.loss.label(),
                a.seeds,
                a.top1_s_mean,
                a.top1_t_mean,
                a.gap_mean,
                a.mispair_mass_partial_mean,
                a.mispair_mass_full_mean,
                a.top1_s_sd
            ));
        }
        out
    }
}

fn run_cell(
    base_world: &WorldConfig,
    model: &ModelConfig,
    base_train: &TrainConfig,
    rho: f64,
    loss: LossKind,
    seed: u64,
) -> Result<BenchCell> {
    let world_cfg = WorldConfig {
        misalignment_rate: rho,
        seed,
        ..base_world.clone()
    };
    let world = generate_world(&world_cfg)?;

    let mut cfg = base_train.clone();
    cfg.seed = seed;
    cfg.losses = match loss {
        LossKind::Mpot => LossToggles {
            mpot: true,
            contrastive: false,
            reconstruction: base_train.losses.reconstruction,
        },
        LossKind::Contrastive => LossToggles {
            mpot: false,
            contrastive: true,
            reconstruction: base_train.losses.reconstruction,
        },
    };

    let out = train(&world, model, &cfg)?;
    let last = out
        .metrics
        .last()
        .copied()
        .ok_or_else(|| Error::InvalidConfig("bench requires at least one epoch".into()))?;

    // Mispaired-column mass at the configured partial mass and at full mass,
    // on the same trained embeddings and metric.
    let vol = embed_dataset(&out.params, &world)?;
    let text = text_embeddings(&world);
    let flags: Vec<bool> = world.triplets.iter().map(|t| t.mispaired).collect();
    let metric = GroundMetric::Mahalanobis(out.params.metric_m.clone());
    let partial = mispair_mass(
        &vol,
        &text,
        &flags,
        &metric,
        cfg.batch_size,
        cfg.mpot.solver.epsilon,
        cfg.mpot.solver.mass,
    )?;
    let full = mispair_mass(
        &vol,
        &text,
        &flags,
        &metric,
        cfg.batch_size,
        cfg.mpot.solver.epsilon,
        1.0,
    )?;

    Ok(BenchCell {
        rho,
        loss,
        seed,
        top1_s: last.top1_s,
        top1_t: last.top1_t,
        gap: last.gap,
        mispair_mass_partial: partial,
        mispair_mass_full: full,
    })
}

/// Run the full factorial (rho x loss x seed). Cells are independent; up to
/// `spec.jobs` run in parallel. Output order is deterministic regardless of
/// scheduling.
pub fn run_noise_bench(
    base_world: &WorldConfig,
    model: &ModelConfig,
    base_train: &TrainConfig,
    spec: &BenchSpec,
) -> Result<BenchTable> {
    spec.validate()?;
    let mut plan = Vec::new();
    for &rho in &spec.rhos {
        for &loss in &spec.losses {
            for &seed in &spec.seeds {
                plan.push((rho, loss, seed));
            }
        }
    }

    let jobs = spec.jobs.max(1).min(plan.len());
    let mut results: Vec<Option<Result<BenchCell>>> = (0..plan.len()).map(|_| None).collect();
    if jobs <= 1 {
        for (slot, &(rho, loss, seed)) in plan.iter().enumerate() {
            results[slot] = Some(run_cell(base_world, model, base_train, rho, loss, seed));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= plan.len() {
                        break;
                    }
                    let (rho, loss, seed) = plan[idx];
                    let cell = run_cell(base_world, model, base_train, rho, loss, seed);
                    slots.lock().unwrap()[idx] = Some(cell);
                });
            }
        });
    }

    let mut cells = Vec::with_capacity(plan.len());
    for r in results {
        cells.push(r.expect("every cell scheduled")?);
    }

    let mut aggregates = Vec::new();
    for &rho in &spec.rhos {
        for &loss in &spec.losses {
            let group: Vec<&BenchCell> = cells
                .iter()
                .filter(|c| c.rho == rho && c.loss == loss)
                .collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&BenchCell) -> f64| group.iter().map(|c| f(c)).sum::<f64>() / n;
            let top1_s_mean = mean(&|c| c.top1_s);
            let top1_t_mean = mean(&|c| c.top1_t);
            let sd_of = |m: f64, f: &dyn Fn(&BenchCell) -> f64| {
                (group.iter().map(|c| (f(c) - m).powi(2)).sum::<f64>() / n).sqrt()
            };
            aggregates.push(BenchAggregate {
                rho,
                loss,
                seeds: group.len(),
                top1_s_mean,
                top1_s_sd: sd_of(top1_s_mean, &|c| c.top1_s),
                top1_t_mean,
                top1_t_sd: sd_of(top1_t_mean, &|c| c.top1_t),
                gap_mean: mean(&|c| c.gap),
                mispair_mass_partial_mean: mean(&|c| c.mispair_mass_partial),
                mispair_mass_full_mean: mean(&|c| c.mispair_mass_full),
            });
        }
    }

    Ok(BenchTable { cells, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorial_row_counts() {
        let world = WorldConfig {
            n_subjects: 8,
            volume_side: 4,
            embed_dim: 6,
            ..Default::default()
        };
        let model = ModelConfig {
            queries: 3,
            channels: 8,
            out_dim: 6,
            patch: 2,
        };
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let spec = BenchSpec {
            rhos: vec![0.0, 0.25],
            losses: vec![LossKind::Mpot, LossKind::Contrastive],
            seeds: vec![1, 2, 3],
            jobs: 2,
        };
        let table = run_noise_bench(&world, &model, &train_cfg, &spec).unwrap();
        assert_eq!(table.cells.len(), 12);
        assert_eq!(table.aggregates.len(), 4);
        let csv = table.to_csv("{}");
        assert_eq!(csv.lines().filter(|l| l.starts_with("cell,")).count(), 12);
        assert_eq!(csv.lines().filter(|l| l.starts_with("aggregate,")).count(), 4);
    }

    #[test]
    fn empty_factor_lists_rejected() {
        let spec = BenchSpec {
            rhos: vec![],
            losses: vec![LossKind::Mpot],
            seeds: vec![1],
            jobs: 1,
        };
        assert!(spec.validate().is_err());
    }
}
