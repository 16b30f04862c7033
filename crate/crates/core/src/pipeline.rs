//! End-to-end runs: corpus preparation, pretraining, finetuning and
//! scenario evaluation, plus the pretraining/MCA ablation grid.

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, Corpus, Split};
use crate::dataset::{prepare_samples, real_only, split_validation, PreparedSample};
use crate::error::{AvdfError, Result};
use crate::eval::{evaluate_scenarios, ScenarioResult, DEFAULT_THRESHOLD, SCENARIOS};
use crate::features::FrontendConfig;
use crate::metrics::EvalReport;
use crate::model::{McaMode, Model, ModelConfig};
use crate::par::Execution;
use crate::train::{finetune_detection, pretrain_avsr, Stage, TrainConfig, TrainLog, TrainState};

/// Settings for a full two-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Fraction of each training class held out for early stopping.
    pub val_fraction: f64,
    pub threshold: f64,
    /// Master seed; stage seeds and initialisations derive from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::desk(),
            frontend: FrontendConfig::default(),
            pretrain: TrainConfig {
                max_steps: 150,
                ..TrainConfig::desk()
            },
            finetune: TrainConfig::desk(),
            val_fraction: 0.1,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(AvdfError::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(AvdfError::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Initialisation and training seeds for `stage`.
    pub fn stage_seeds(&self, stage: Stage) -> (u64, u64) {
        let base = derive_seed(self.seed, stage as u64 + 1);
        (derive_seed(base, 0), derive_seed(base, 1))
    }
}

/// The corpus split into model-ready train, validation and test sets.
pub struct PreparedCorpus {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl PreparedCorpus {
    /// Validation clips are drawn from the training split with a seed tied
    /// to the corpus, so every run on one corpus sees the same partition.
    pub fn new(corpus: &Corpus, frontend: &FrontendConfig, val_fraction: f64, exec: Execution) -> Result<Self> {
        let train = prepare_samples(&corpus.split(Split::Train), frontend, exec)?;
        let test = prepare_samples(&corpus.split(Split::Test), frontend, exec)?;
        let (train, val) = split_validation(train, val_fraction, corpus.spec.master_seed);
        Ok(PreparedCorpus { train, val, test })
    }
}

pub fn run_pretraining(
    data: &PreparedCorpus,
    cfg: &PipelineConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<Model> {
    let (init_seed, train_seed) = cfg.stage_seeds(Stage::Avsr);
    let reals = real_only(&data.train);
    if reals.is_empty() {
        return Err(AvdfError::InvalidInput("the training split holds no real clips".into()));
    }
    let mut state = TrainState::new(Stage::Avsr, Model::new(cfg.model.clone(), init_seed)?);
    let tc = TrainConfig { seed: train_seed, ..cfg.pretrain.clone() };
    pretrain_avsr(&mut state, &reals, &real_only(&data.val), &tc, exec, log)?;
    Ok(state.model)
}

/// A fresh detector, optionally seeded with a pretrained backbone.
pub fn detector_init(cfg: &PipelineConfig, pretrained: Option<&Model>) -> Result<Model> {
    let (init_seed, _) = cfg.stage_seeds(Stage::Detection);
    let mut model = Model::new(cfg.model.clone(), init_seed)?;
    if let Some(p) = pretrained {
        model.transfer_backbone(p)?;
    }
    Ok(model)
}

pub struct FinetuneOutcome {
    pub state: TrainState,
    pub detector: Model,
    pub history: Vec<EvalReport>,
}

pub fn run_finetuning(
    data: &PreparedCorpus,
    cfg: &PipelineConfig,
    init: Model,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<FinetuneOutcome> {
    let (_, train_seed) = cfg.stage_seeds(Stage::Detection);
    let tc = TrainConfig { seed: train_seed, ..cfg.finetune.clone() };
    let mut state = TrainState::new(Stage::Detection, init);
    let history = finetune_detection(&mut state, &data.train, &data.val, Some(&data.test), &tc, exec, log)?;
    Ok(FinetuneOutcome {
        detector: state.best_model(),
        state,
        history,
    })
}

pub struct PipelineOutcome {
    pub pretrained: Option<Model>,
    pub detector: Model,
    pub history: Vec<EvalReport>,
    pub results: Vec<ScenarioResult>,
}

/// Run both stages (pretraining only when `use_pretraining` is set) and then
/// score the test split under every presence scenario.
pub fn run_pipeline(
    data: &PreparedCorpus,
    cfg: &PipelineConfig,
    use_pretraining: bool,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let pretrained = if use_pretraining {
        Some(run_pretraining(data, cfg, exec, log)?)
    } else {
        None
    };
    let init = detector_init(cfg, pretrained.as_ref())?;
    let ft = run_finetuning(data, cfg, init, exec, log)?;
    let results = evaluate_scenarios(&ft.detector, &data.test, &SCENARIOS, cfg.threshold, exec)?;
    Ok(PipelineOutcome {
        pretrained,
        detector: ft.detector,
        history: ft.history,
        results,
    })
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub pretrained: bool,
    pub mca_mode: McaMode,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    /// Test OF1 in the audio-visual scenario.
    pub fn av_of1(&self) -> f64 {
        self.reports[0].of1
    }
}

/// Mean AV test OF1 per grid setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub pretrained: bool,
    pub mca_mode: McaMode,
    pub seeds: usize,
    pub mean_of1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

/// Train and evaluate every `{pretraining on, off} x mca_modes x seeds`
/// combination. One pretrained backbone per seed is shared across MCA modes.
pub fn run_ablation(
    data: &PreparedCorpus,
    base: &PipelineConfig,
    seeds: &[u64],
    mca_modes: &[McaMode],
    exec: Execution,
    log: &mut TrainLog,
) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() || mca_modes.is_empty() {
        return Err(AvdfError::Config("ablation needs at least one seed and one MCA mode".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = PipelineConfig { seed, ..base.clone() };
        let backbone = run_pretraining(data, &seeded, exec, log)?;
        for &mode in mca_modes {
            let mut cfg = seeded.clone();
            cfg.model.mca_mode = mode;
            for pretrained in [true, false] {
                let init = detector_init(&cfg, pretrained.then_some(&backbone))?;
                let ft = run_finetuning(data, &cfg, init, exec, log)?;
                let results = evaluate_scenarios(&ft.detector, &data.test, &SCENARIOS, cfg.threshold, exec)?;
                rows.push(AblationRow {
                    seed,
                    pretrained,
                    mca_mode: mode,
                    reports: results.into_iter().map(|r| r.report).collect(),
                });
            }
        }
    }
    let mut summary = Vec::new();
    for &mode in mca_modes {
        for pretrained in [true, false] {
            let cell: Vec<f64> = rows
                .iter()
                .filter(|r| r.mca_mode == mode && r.pretrained == pretrained)
                .map(AblationRow::av_of1)
                .collect();
            summary.push(AblationSummary {
                pretrained,
                mca_mode: mode,
                seeds: cell.len(),
                mean_of1: cell.iter().sum::<f64>() / cell.len() as f64,
            });
        }
    }
    Ok(AblationReport { rows, summary })
}
