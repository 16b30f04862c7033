//! Evaluation measures for dual-label detection.
//!
//! Every binary metric treats "fake" as the positive class. Scores fed to
//! AUC/EER are fake probabilities (for the fused clip-level score,
//! `1 - fused_real_score`).

use serde::{Deserialize, Serialize};

use crate::corpus::DualLabel;
use crate::error::{AvdfError, Result};
use crate::model::PresenceMask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `score >= threshold`.
pub fn binarize(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_pairs(preds: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (p, y) in preds {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// F1 with the zero-denominator case defined as 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    fn merge(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Suite {
    pub af1: f64,
    pub vf1: f64,
    /// Micro F1 pooling both slots.
    pub of1: f64,
    /// Mean of the per-slot F1 scores.
    pub cf1: f64,
    /// Per-slot F1 weighted by positive support.
    pub wf1: f64,
}

fn slot_confusions(preds: &[[bool; 2]], labels: &[DualLabel]) -> [Confusion; 2] {
    [0, 1].map(|m| {
        Confusion::from_pairs(
            preds
                .iter()
                .zip(labels)
                .map(|(p, y)| (p[m], y.as_array()[m])),
        )
    })
}

pub fn f1_suite(preds: &[[bool; 2]], labels: &[DualLabel]) -> Result<F1Suite> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(AvdfError::InvalidInput(format!(
            "f1_suite needs equal, nonzero lengths (got {} and {})",
            preds.len(),
            labels.len()
        )));
    }
    let [a, v] = slot_confusions(preds, labels);
    let (af1, vf1) = (a.f1(), v.f1());
    let support = a.support() + v.support();
    let wf1 = if support == 0 {
        0.0
    } else {
        (a.support() as f64 * af1 + v.support() as f64 * vf1) / support as f64
    };
    Ok(F1Suite {
        af1,
        vf1,
        of1: a.merge(&v).f1(),
        cf1: (af1 + vf1) / 2.0,
        wf1,
    })
}

fn check_binary(scores: &[f64], labels: &[bool], what: &str) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(AvdfError::InvalidInput(format!("{what}: length mismatch")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AvdfError::Numeric(format!("{what}: NaN score")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(AvdfError::UndefinedMetric(format!(
            "{what} needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    Ok((pos, neg))
}

/// ROC AUC as the Mann-Whitney statistic `P(s+ > s-) + ½ P(s+ = s-)`.
///
/// Computed exactly: the numerator `2·wins + ties` is accumulated as an
/// integer over tie groups of the sorted scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels, "roc_auc")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2 * pos * neg) as f64)
}

/// Operating points `(threshold, fpr, fnr)` for the thresholds `-inf`, the
/// midpoints between consecutive distinct scores, and `+inf`; a sample is
/// predicted positive when `score >= threshold`.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels, "operating_points")?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(f64::INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|thr| {
            let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= thr).count();
            let fn_ = scores.iter().zip(labels).filter(|(s, l)| **l && **s < thr).count();
            (thr, fp as f64 / neg as f64, fn_ as f64 / pos as f64)
        })
        .collect())
}

/// Equal error rate: where the FPR and FNR curves cross, linearly
/// interpolated between adjacent operating points.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = operating_points(scores, labels)?;
    for w in pts.windows(2) {
        let (_, f1, n1) = w[0];
        let (_, f2, n2) = w[1];
        let (d1, d2) = (f1 - n1, f2 - n2);
        if d1 == 0.0 {
            return Ok(f1);
        }
        if d1 > 0.0 && d2 <= 0.0 {
            let lambda = d1 / (d1 - d2);
            let fpr = f1 + lambda * (f2 - f1);
            let fnr = n1 + lambda * (n2 - n1);
            return Ok(0.5 * (fpr + fnr));
        }
    }
    // the last point (threshold +inf) always has fpr = 0, fnr = 1
    unreachable!("FPR - FNR goes from 1 to -1 across the sweep")
}

/// One clip's model outputs, as consumed by the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub p_audio_fake: f64,
    pub p_video_fake: f64,
    pub fused_real_score: f64,
    pub count_probs: [f64; 3],
    pub label: DualLabel,
    pub scenario: PresenceMask,
}

impl ScoredSample {
    pub fn predicted_count(&self) -> usize {
        (0..3)
            .max_by(|&a, &b| self.count_probs[a].total_cmp(&self.count_probs[b]))
            .unwrap_or(0)
    }
}

/// Metric bundle for one presence scenario. Fields that the scenario cannot
/// support (e.g. video metrics with audio only) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scenario: String,
    pub presence: PresenceMask,
    pub n_samples: usize,
    pub af1: Option<f64>,
    pub vf1: Option<f64>,
    pub of1: f64,
    pub cf1: f64,
    pub wf1: f64,
    pub aacc: Option<f64>,
    pub vacc: Option<f64>,
    pub auc_audio: Option<f64>,
    pub auc_video: Option<f64>,
    pub auc_fused: Option<f64>,
    pub eer_audio: Option<f64>,
    pub eer_video: Option<f64>,
    /// Rows: true fake count 0..2; columns: predicted count.
    pub count_confusion: [[u64; 3]; 3],
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(AvdfError::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compute every metric supported by `presence` over `scores`.
pub fn report(scores: &[ScoredSample], presence: PresenceMask, threshold: f64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(AvdfError::InvalidInput("no scored samples".into()));
    }
    let labels: Vec<DualLabel> = scores.iter().map(|s| s.label).collect();
    let preds: Vec<[bool; 2]> = scores
        .iter()
        .map(|s| [s.p_audio_fake >= threshold, s.p_video_fake >= threshold])
        .collect();
    let [ca, cv] = slot_confusions(&preds, &labels);
    let suite = f1_suite(&preds, &labels)?;
    let (of1, cf1, wf1) = match (presence.audio, presence.video) {
        (true, true) => (suite.of1, suite.cf1, suite.wf1),
        (true, false) => (suite.af1, suite.af1, suite.af1),
        _ => (suite.vf1, suite.vf1, suite.vf1),
    };
    let audio_labels: Vec<bool> = labels.iter().map(|l| l.audio_fake).collect();
    let video_labels: Vec<bool> = labels.iter().map(|l| l.video_fake).collect();
    let pa: Vec<f64> = scores.iter().map(|s| s.p_audio_fake).collect();
    let pv: Vec<f64> = scores.iter().map(|s| s.p_video_fake).collect();

    let mut count_confusion = [[0u64; 3]; 3];
    for s in scores {
        count_confusion[s.label.fake_count()][s.predicted_count()] += 1;
    }
    let (auc_audio, eer_audio) = if presence.audio {
        (defined(roc_auc(&pa, &audio_labels))?, defined(eer(&pa, &audio_labels))?)
    } else {
        (None, None)
    };
    let (auc_video, eer_video) = if presence.video {
        (defined(roc_auc(&pv, &video_labels))?, defined(eer(&pv, &video_labels))?)
    } else {
        (None, None)
    };
    let auc_fused = if presence.audio && presence.video {
        let fused: Vec<f64> = scores.iter().map(|s| 1.0 - s.fused_real_score).collect();
        let any: Vec<bool> = labels.iter().map(|l| l.fake_count() > 0).collect();
        defined(roc_auc(&fused, &any))?
    } else {
        None
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: presence.name().to_string(),
        presence,
        n_samples: scores.len(),
        af1: presence.audio.then_some(suite.af1),
        vf1: presence.video.then_some(suite.vf1),
        of1,
        cf1,
        wf1,
        aacc: presence.audio.then(|| ca.accuracy()),
        vacc: presence.video.then(|| cv.accuracy()),
        auc_audio,
        auc_video,
        auc_fused,
        eer_audio,
        eer_video,
        count_confusion,
    })
}

/// Per-sample scores as CSV; probabilities of absent modalities are left
/// empty.
pub fn scores_csv(scores: &[ScoredSample]) -> String {
    let opt = |present: bool, p: f64| if present { p.to_string() } else { String::new() };
    let mut out = String::from(
        "sample_id,scenario,audio_fake,video_fake,p_audio_fake,p_video_fake,fused_real_score,p_count0,p_count1,p_count2\n",
    );
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.sample_id,
            s.scenario.name(),
            s.label.audio_fake as u8,
            s.label.video_fake as u8,
            opt(s.scenario.audio, s.p_audio_fake),
            opt(s.scenario.video, s.p_video_fake),
            s.fused_real_score,
            s.count_probs[0],
            s.count_probs[1],
            s.count_probs[2]
        ));
    }
    out
}
