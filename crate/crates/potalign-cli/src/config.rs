//! Experiment configuration document: hierarchical sections with documented
//! defaults, unknown keys rejected, fully serialized into every output for
//! provenance.

use serde::{Deserialize, Serialize};

use potalign::loss::{GradMode, MpotSettings};
use potalign::solver::SolverConfig;
use potalign::synth::WorldConfig;
use potalign::train::{LossToggles, ModelConfig, Optimizer, RetrievalMetric, TrainConfig};

/// Training-section fields; the solver settings live in the shared `solver`
/// section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub losses: LossToggles,
    pub temperature: f64,
    pub retrieval_metric: RetrievalMetric,
    pub checkpoint_every: usize,
    pub early_stop: bool,
    pub max_unroll: usize,
    pub grad_mode: GradMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: t.optimizer,
            losses: t.losses,
            temperature: t.temperature,
            retrieval_metric: t.retrieval_metric,
            checkpoint_every: t.checkpoint_every,
            early_stop: t.early_stop,
            max_unroll: t.mpot.max_unroll,
            grad_mode: t.mpot.grad_mode,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory; when unset, the POTALIGN_OUT environment variable
    /// applies, then "runs".
    pub directory: Option<String>,
    pub prefix: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub solver: SolverConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| format!("config error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.world.validate().map_err(|e| e.to_string())?;
        self.solver.validate().map_err(|e| e.to_string())?;
        if self.model.out_dim != self.world.embed_dim {
            return Err(format!(
                "model.out_dim {} must equal world.embed_dim {}",
                self.model.out_dim, self.world.embed_dim
            ));
        }
        self.train_config().validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Assemble the library training config from the sections.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.train.seed,
            optimizer: self.train.optimizer,
            losses: self.train.losses,
            mpot: MpotSettings {
                solver: self.solver.clone(),
                max_unroll: self.train.max_unroll,
                grad_mode: self.train.grad_mode,
                fixed_unroll: None,
            },
            temperature: self.train.temperature,
            retrieval_metric: self.train.retrieval_metric,
            checkpoint_every: self.train.checkpoint_every,
            early_stop: self.train.early_stop,
        }
    }

    /// Fully resolved config as compact JSON, embedded in every artifact.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn output_dir(&self) -> std::path::PathBuf {
        match &self.output.directory {
            Some(d) => d.into(),
            None => std::env::var("POTALIGN_OUT").unwrap_or_else(|_| "runs".into()).into(),
        }
    }

    pub fn prefix(&self) -> &str {
        if self.output.prefix.is_empty() {
            "run"
        } else {
            &self.output.prefix
        }
    }
}
