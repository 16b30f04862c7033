//! Two-stage optimisation: AVSR pretraining with CTC, then detection
//! finetuning with modality dropout.
//!
//! Every random choice during training (batch order, dropped modalities,
//! dropout masks) is a pure function of `(seed, step, position in batch)`,
//! so a run resumed from a checkpoint continues exactly as if it had never
//! stopped.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, ParamGrads, ParamStore};
use crate::corpus::derive_seed;
use crate::dataset::PreparedSample;
use crate::error::{AvdfError, Result};
use crate::eval::{mean_detection_loss, phoneme_error_rate, score_samples, DEFAULT_THRESHOLD};
use crate::features::SampleFeatures;
use crate::losses::{count_ce, ctc_loss_and_grad, dual_bce, LossBreakdown, LossMask};
use crate::metrics::{report, EvalReport};
use crate::model::transformer::Dropout;
use crate::model::{Model, PresenceMask};
use crate::par::{map_range, Execution};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Avsr,
    Detection,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Avsr => "avsr",
            Stage::Detection => "detection",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Per-modality drop probability (detection stage only).
    pub modality_dropout: f64,
    pub ce_weight: f64,
    /// Weight of an auxiliary CTC term during detection finetuning; only
    /// real-audio/real-video clips contribute to it.
    pub aux_ctc_weight: f64,
    pub freeze_backbone: bool,
    /// Steps between validation passes (detection) in addition to the
    /// per-epoch phoneme error rate logged during pretraining.
    pub eval_every: u64,
    /// Validation passes without improvement before stopping; 0 disables
    /// early stopping.
    pub patience: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            modality_dropout: 0.2,
            ce_weight: 1.0,
            aux_ctc_weight: 0.0,
            freeze_backbone: false,
            eval_every: 50,
            patience: 8,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 12,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AvdfError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip > 0.0) {
            return bad("adam_eps and grad_clip must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.modality_dropout) {
            return bad(format!("modality_dropout must lie in [0, 0.5], got {}", self.modality_dropout));
        }
        if self.ce_weight < 0.0 || self.aux_ctc_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Draw the modalities to drop for one sample: each is dropped with
/// probability `rho` independently, redrawing whenever both would be.
pub fn draw_presence(rho: f64, rng: &mut impl Rng) -> PresenceMask {
    loop {
        let drop_audio = rng.gen::<f64>() < rho;
        let drop_video = rng.gen::<f64>() < rho;
        if !(drop_audio && drop_video) {
            return PresenceMask {
                audio: !drop_audio,
                video: !drop_video,
            };
        }
    }
}

/// Zero the dropped modality of each sample and report which slots the
/// loss must ignore.
pub fn apply_modality_dropout(
    batch: &[SampleFeatures],
    rho: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(SampleFeatures, PresenceMask, LossMask)>> {
    if !(0.0..=0.5).contains(&rho) {
        return Err(AvdfError::InvalidInput(format!("drop rate {rho} outside [0, 0.5]")));
    }
    Ok(batch
        .iter()
        .map(|f| {
            let p = draw_presence(rho, rng);
            let mut f = f.clone();
            if !p.audio {
                f.audio.as_mut_slice().fill(0.0);
            }
            if !p.video {
                f.video.as_mut_slice().fill(0.0);
            }
            (f, p, p.loss_mask())
        })
        .collect())
}

fn with_dropout<T>(model: &Model, seed: u64, f: impl FnOnce(&mut Option<Dropout<'_>>) -> T) -> T {
    let rate = model.config.dropout_rate;
    if rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut Some(Dropout { rate, rng: &mut rng }))
    } else {
        f(&mut None)
    }
}

/// CTC loss of one clip (both modalities present) and its gradient.
pub fn avsr_sample_grad(
    model: &Model,
    sample: &PreparedSample,
    dropout_seed: u64,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut g = Graph::new(&model.params);
    let logits = with_dropout(model, dropout_seed, |d| {
        model.forward_avsr(&mut g, &sample.features, PresenceMask::BOTH, d)
    })?;
    let (ctc, grad) = ctc_loss_and_grad(g.value(logits), &sample.transcript)?;
    let root = g.loss(logits, ctc, grad)?;
    Ok((LossBreakdown::ctc_only(ctc), g.backward(root)))
}

/// Weights of the detection objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionObjective {
    pub ce_weight: f64,
    pub aux_ctc_weight: f64,
}

impl From<&TrainConfig> for DetectionObjective {
    fn from(c: &TrainConfig) -> Self {
        DetectionObjective {
            ce_weight: c.ce_weight,
            aux_ctc_weight: c.aux_ctc_weight,
        }
    }
}

fn detection_graph<'p>(
    model: &'p Model,
    sample: &PreparedSample,
    presence: PresenceMask,
    objective: DetectionObjective,
    dropout_seed: u64,
) -> Result<(Graph<'p>, crate::autograd::Var, LossBreakdown)> {
    let mut g = Graph::new(&model.params);
    let (nodes, decoded) = with_dropout(model, dropout_seed, |d| {
        model.forward_detection(&mut g, &sample.features, presence, d)
    })?;
    let ml = g.value(nodes.modality_logits).row(0).to_vec();
    let cl = g.value(nodes.count_logits).row(0).to_vec();
    let (bce, bce_grad) = dual_bce([ml[0], ml[1]], sample.label, presence.loss_mask());
    let (ce, ce_grad) = count_ce([cl[0], cl[1], cl[2]], sample.label);
    let w = objective.ce_weight;
    let bce_node = g.loss(nodes.modality_logits, bce, Matrix::from_vec(1, 2, bce_grad.to_vec())?)?;
    let ce_node = g.loss(
        nodes.count_logits,
        w * ce,
        Matrix::from_vec(1, 3, ce_grad.iter().map(|x| w * x).collect())?,
    )?;
    let mut root = g.add(bce_node, ce_node)?;
    let mut breakdown = LossBreakdown {
        ctc: 0.0,
        bce,
        ce,
        total: bce + w * ce,
    };
    if objective.aux_ctc_weight > 0.0 && sample.label == crate::corpus::DualLabel::REAL {
        let logits = model.avsr_head(&mut g, decoded)?;
        let (ctc, mut grad) = ctc_loss_and_grad(g.value(logits), &sample.transcript)?;
        let a = objective.aux_ctc_weight;
        grad.scale_in_place(a);
        let node = g.loss(logits, a * ctc, grad)?;
        root = g.add(root, node)?;
        breakdown.ctc = ctc;
        breakdown.total += a * ctc;
    }
    Ok((g, root, breakdown))
}

/// Detection loss of one clip under `presence`, without gradients.
pub fn detection_sample_loss(
    model: &Model,
    sample: &PreparedSample,
    presence: PresenceMask,
    objective: DetectionObjective,
    dropout_seed: u64,
) -> Result<LossBreakdown> {
    Ok(detection_graph(model, sample, presence, objective, dropout_seed)?.2)
}

pub fn detection_sample_grad(
    model: &Model,
    sample: &PreparedSample,
    presence: PresenceMask,
    objective: DetectionObjective,
    dropout_seed: u64,
) -> Result<(LossBreakdown, ParamGrads)> {
    let (g, root, breakdown) = detection_graph(model, sample, presence, objective, dropout_seed)?;
    Ok((breakdown, g.backward(root)))
}

/// Adam moments, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Adam { step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched, moments included.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((p, m), v), &g) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Sample indices for `step`: consecutive batches walk through a fresh
/// seeded permutation of the data each epoch.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x0bad_5eed, epoch));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// JSON-lines training log, kept in memory and optionally mirrored to a
/// file. Records carry no timestamps, so identical runs log identical bytes.
#[derive(Default)]
pub struct TrainLog {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        TrainLog::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| AvdfError::io(path, e))?;
        Ok(TrainLog {
            lines: Vec::new(),
            file: Some(BufWriter::new(f)),
        })
    }

    /// Continue an existing log file, as when resuming a run.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AvdfError::io(path, e))?;
        Ok(TrainLog {
            lines: Vec::new(),
            file: Some(BufWriter::new(f)),
        })
    }

    pub fn emit(&mut self, record: serde_json::Value) -> Result<()> {
        let line = record.to_string();
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| AvdfError::io(Path::new("<train log>"), e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// Best-so-far tracking for early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub best_step: u64,
    /// Validation OF1 and mean validation loss of the best model.
    pub best_of1: f64,
    pub best_loss: f64,
    pub bad_evals: u64,
    pub best_params: ParamStore,
}

impl EarlyStop {
    fn improves(&self, of1: f64, loss: f64) -> bool {
        of1 > self.best_of1 || (of1 == self.best_of1 && loss < self.best_loss)
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub early_stop: Option<EarlyStop>,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(stage: Stage, model: Model) -> Self {
        let adam = Adam::new(&model.params);
        TrainState {
            stage,
            model,
            adam,
            step: 0,
            early_stop: None,
            stopped: false,
        }
    }

    /// Parameters to keep: the best validated ones when tracked.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(es) = &self.early_stop {
            m.params = es.best_params.clone();
        }
        m
    }
}

/// Summary of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub loss: f64,
    pub ctc: f64,
    pub bce: f64,
    pub ce: f64,
    pub grad_norm: f64,
    pub audio_dropped: usize,
    pub video_dropped: usize,
}

/// Average the per-sample gradients of one batch and apply an Adam update.
pub fn train_step(
    state: &mut TrainState,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<StepRecord> {
    if data.is_empty() {
        return Err(AvdfError::InvalidInput("no training samples".into()));
    }
    let step_seed = derive_seed(cfg.seed, state.step);
    let indices = batch_indices(cfg.seed, state.step, cfg.batch_size, data.len());
    let presences: Vec<PresenceMask> = match state.stage {
        Stage::Avsr => vec![PresenceMask::BOTH; indices.len()],
        Stage::Detection => {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            rng.set_stream(1);
            indices
                .iter()
                .map(|_| draw_presence(cfg.modality_dropout, &mut rng))
                .collect()
        }
    };
    let objective = DetectionObjective::from(cfg);
    let model = &state.model;
    let results = map_range(exec, indices.len(), |i| {
        let sample = &data[indices[i]];
        let dropout_seed = derive_seed(step_seed, 1000 + i as u64);
        match state.stage {
            Stage::Avsr => avsr_sample_grad(model, sample, dropout_seed),
            Stage::Detection => {
                detection_sample_grad(model, sample, presences[i], objective, dropout_seed)
            }
        }
        .map_err(|e| match e {
            AvdfError::InfeasibleTarget(m) => AvdfError::InfeasibleTarget(format!("{}: {m}", sample.id)),
            other => other,
        })
    });

    let mut grads = ParamGrads::empty(model.params.len());
    let mut losses = LossBreakdown::default();
    for r in results {
        let (l, g) = r?;
        losses.accumulate(&l);
        grads.merge(&g);
    }
    let inv = 1.0 / indices.len() as f64;
    grads.scale(inv);
    let losses = losses.scaled(inv);
    if !losses.is_finite() || !grads.all_finite() {
        return Err(AvdfError::Numeric(format!(
            "non-finite loss or gradient at {} step {}",
            state.stage, state.step
        )));
    }
    if cfg.freeze_backbone {
        let frozen: Vec<_> = model
            .params
            .iter()
            .filter(|(_, name, _)| Model::is_backbone(name))
            .map(|(id, _, _)| id)
            .collect();
        for id in frozen {
            grads.clear(id);
        }
    }
    let grad_norm = grads.global_norm();
    if grad_norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / grad_norm);
    }
    state.adam.update(&mut state.model.params, &grads, cfg);
    let record = StepRecord {
        stage: state.stage,
        step: state.step,
        loss: losses.total,
        ctc: losses.ctc,
        bce: losses.bce,
        ce: losses.ce,
        grad_norm,
        audio_dropped: presences.iter().filter(|p| !p.audio).count(),
        video_dropped: presences.iter().filter(|p| !p.video).count(),
    };
    state.step += 1;
    Ok(record)
}

fn log_step(log: &mut TrainLog, r: &StepRecord) -> Result<()> {
    let mut v = serde_json::to_value(r)?;
    v["event"] = json!("step");
    log.emit(v)
}

/// Run CTC pretraining up to `cfg.max_steps`, logging the validation
/// phoneme error rate whenever an epoch completes.
pub fn pretrain_avsr(
    state: &mut TrainState,
    train: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &TrainConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if state.stage != Stage::Avsr {
        return Err(AvdfError::Config("state is not an AVSR run".into()));
    }
    if train.is_empty() {
        return Err(AvdfError::InvalidInput("pretraining needs at least one real clip".into()));
    }
    if let Some(bad) = train.iter().find(|s| s.label != crate::corpus::DualLabel::REAL) {
        return Err(AvdfError::InvalidInput(format!("{} is not a real clip", bad.id)));
    }
    let n = train.len() as u64;
    let b = cfg.batch_size as u64;
    while state.step < cfg.max_steps {
        let record = train_step(state, train, cfg, exec)?;
        log_step(log, &record)?;
        let epoch_before = (state.step - 1) * b / n;
        let epoch_after = state.step * b / n;
        if epoch_after > epoch_before && !val.is_empty() {
            let per = phoneme_error_rate(&state.model, val, exec)?;
            log.emit(json!({"event": "epoch", "stage": "avsr", "epoch": epoch_after, "step": state.step, "val_per": per}))?;
        }
    }
    Ok(())
}

/// Fine-tune for detection, validating every `cfg.eval_every` steps. The
/// best parameters by validation OF1 (ties broken by lower loss) are kept
/// in the state's early-stop record. When `test` is given its AV report is
/// logged at each validation pass.
pub fn finetune_detection(
    state: &mut TrainState,
    train: &[PreparedSample],
    val: &[PreparedSample],
    test: Option<&[PreparedSample]>,
    cfg: &TrainConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    if state.stage != Stage::Detection {
        return Err(AvdfError::Config("state is not a detection run".into()));
    }
    if train.is_empty() {
        return Err(AvdfError::InvalidInput("no training samples".into()));
    }
    if val.is_empty() {
        return Err(AvdfError::InvalidInput("no validation samples".into()));
    }
    let mut history = Vec::new();
    while state.step < cfg.max_steps && !state.stopped {
        let record = train_step(state, train, cfg, exec)?;
        log_step(log, &record)?;
        if state.step % cfg.eval_every != 0 && state.step != cfg.max_steps {
            continue;
        }
        let val_scores = score_samples(&state.model, val, PresenceMask::BOTH, exec)?;
        let val_report = report(&val_scores, PresenceMask::BOTH, DEFAULT_THRESHOLD)?;
        let val_loss = mean_detection_loss(&val_scores);
        let improved = match &state.early_stop {
            None => true,
            Some(es) => es.improves(val_report.of1, val_loss),
        };
        if improved {
            state.early_stop = Some(EarlyStop {
                best_step: state.step,
                best_of1: val_report.of1,
                best_loss: val_loss,
                bad_evals: 0,
                best_params: state.model.params.clone(),
            });
        } else if let Some(es) = state.early_stop.as_mut() {
            es.bad_evals += 1;
            if cfg.patience > 0 && es.bad_evals >= cfg.patience {
                state.stopped = true;
            }
        }
        let mut rec = json!({
            "event": "eval",
            "stage": "detection",
            "step": state.step,
            "val_of1": val_report.of1,
            "val_loss": val_loss,
            "improved": improved,
        });
        if let Some(test) = test {
            let r = report(
                &score_samples(&state.model, test, PresenceMask::BOTH, exec)?,
                PresenceMask::BOTH,
                DEFAULT_THRESHOLD,
            )?;
            rec["test"] = serde_json::to_value(&r)?;
            history.push(r);
        }
        log.emit(rec)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
