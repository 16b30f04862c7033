//! Scoring a trained detector under the three presence scenarios.

use crate::dataset::PreparedSample;
use crate::error::{AvdfError, Result};
use crate::losses::{ctc_greedy_decode, edit_distance};
use crate::metrics::{report, EvalReport, ScoredSample};
use crate::model::{Model, PresenceMask};
use crate::par::{map_indexed, Execution};

/// Audio-visual, audio-only and video-only, in that order.
pub const SCENARIOS: [PresenceMask; 3] = [
    PresenceMask::BOTH,
    PresenceMask::AUDIO_ONLY,
    PresenceMask::VIDEO_ONLY,
];

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn score_samples(
    model: &Model,
    samples: &[PreparedSample],
    presence: PresenceMask,
    exec: Execution,
) -> Result<Vec<ScoredSample>> {
    presence.validate()?;
    map_indexed(exec, samples, |_, s| {
        let out = model.detect(&s.features, presence)?;
        Ok(ScoredSample {
            sample_id: s.id.clone(),
            p_audio_fake: out.p_audio_fake,
            p_video_fake: out.p_video_fake,
            fused_real_score: out.fused_real_score,
            count_probs: out.count_probs,
            label: s.label,
            scenario: presence,
        })
    })
    .into_iter()
    .collect()
}

/// A scenario's report together with the per-sample scores behind it.
#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub report: EvalReport,
    pub scores: Vec<ScoredSample>,
}

pub fn evaluate_scenarios(
    model: &Model,
    samples: &[PreparedSample],
    scenarios: &[PresenceMask],
    threshold: f64,
    exec: Execution,
) -> Result<Vec<ScenarioResult>> {
    if samples.is_empty() {
        return Err(AvdfError::InvalidInput("evaluation set is empty".into()));
    }
    scenarios
        .iter()
        .map(|&p| {
            let scores = score_samples(model, samples, p, exec)?;
            Ok(ScenarioResult {
                report: report(&scores, p, threshold)?,
                scores,
            })
        })
        .collect()
}

/// Mean binary cross-entropy of the supported slots plus the count
/// cross-entropy, recomputed from stored probabilities.
pub fn mean_detection_loss(scores: &[ScoredSample]) -> f64 {
    const FLOOR: f64 = 1e-12;
    let nll = |p: f64, fake: bool| -(if fake { p } else { 1.0 - p }).max(FLOOR).ln();
    let total: f64 = scores
        .iter()
        .map(|s| {
            let mut slots = Vec::with_capacity(2);
            if s.scenario.audio {
                slots.push(nll(s.p_audio_fake, s.label.audio_fake));
            }
            if s.scenario.video {
                slots.push(nll(s.p_video_fake, s.label.video_fake));
            }
            let bce = slots.iter().sum::<f64>() / slots.len().max(1) as f64;
            bce - s.count_probs[s.label.fake_count()].max(FLOOR).ln()
        })
        .sum();
    total / scores.len().max(1) as f64
}

/// Greedy-decode phoneme error rate: total edit distance over total
/// reference length.
pub fn phoneme_error_rate(model: &Model, samples: &[PreparedSample], exec: Execution) -> Result<f64> {
    let per_sample = map_indexed(exec, samples, |_, s| {
        let logits = model.transcribe_logits(&s.features)?;
        Ok::<_, AvdfError>((edit_distance(&ctc_greedy_decode(&logits), &s.transcript), s.transcript.len()))
    });
    let (mut errors, mut length) = (0usize, 0usize);
    for r in per_sample {
        let (e, l) = r?;
        errors += e;
        length += l;
    }
    if length == 0 {
        return Err(AvdfError::UndefinedMetric("no reference phonemes".into()));
    }
    Ok(errors as f64 / length as f64)
}
