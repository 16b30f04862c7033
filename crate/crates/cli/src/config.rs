//! Run configuration: a TOML file whose sections mirror the library
//! configs, overlaid by command-line flags.

use std::path::Path;

use anyhow::Context;
use avdf_core::corpus::CorpusSpec;
use avdf_core::features::FrontendConfig;
use avdf_core::model::ModelConfig;
use avdf_core::pipeline::PipelineConfig;
use avdf_core::train::TrainConfig;
use avdf_core::AvdfError;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small model sized for a laptop CPU.
    Desk,
    /// Full-size architecture and optimiser settings.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Fraction of each training class held out for early stopping.
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub mca_modes: Vec<avdf_core::model::McaMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        EvalConfig {
            threshold: p.threshold,
            val_fraction: p.val_fraction,
        }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        use avdf_core::model::McaMode;
        AblateConfig {
            seeds: vec![0, 1, 2],
            mca_modes: vec![McaMode::None, McaMode::Audio, McaMode::Video],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for corpus generation and training.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            seed: 0,
            corpus: CorpusSpec::default(),
            frontend: p.frontend,
            model: p.model,
            pretrain: p.pretrain,
            finetune: p.finetune,
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for `preset`, with the architecture and optimiser values
    /// replaced for the full-size configuration.
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig::default();
        if preset == Preset::Paper {
            let desk = ModelConfig::desk();
            c.model = ModelConfig {
                n_phonemes: desk.n_phonemes,
                video_dim: desk.video_dim,
                ..ModelConfig::paper()
            };
            for t in [&mut c.pretrain, &mut c.finetune] {
                let paper = TrainConfig::paper();
                t.learning_rate = paper.learning_rate;
                t.batch_size = paper.batch_size;
            }
        }
        c
    }

    /// Read `path` over the preset defaults. Missing keys keep their
    /// defaults; unknown keys are an error.
    pub fn load(path: Option<&Path>, preset: Preset) -> anyhow::Result<Self> {
        let base = RunConfig::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| AvdfError::io(path, e))
            .with_context(|| format!("reading config {}", path.display()))?;
        let overlay: toml::Value = toml::from_str(&text)
            .map_err(|e| AvdfError::Config(format!("{}: {e}", path.display())))?;
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| AvdfError::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        merged
            .try_into()
            .map_err(|e: toml::de::Error| AvdfError::Config(format!("{}: {}", path.display(), e.message())).into())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            frontend: self.frontend,
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            val_fraction: self.eval.val_fraction,
            threshold: self.eval.threshold,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable config: {e}"))
    }
}

/// Recursively overlay `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
