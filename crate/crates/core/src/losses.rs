//! Training objectives.
//!
//! Each loss returns its value together with the gradient w.r.t. its logits,
//! so the model can attach it to the tape as a single node.

use serde::{Deserialize, Serialize};

use crate::corpus::DualLabel;
use crate::error::{AvdfError, Result};
use crate::tensor::Matrix;

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Minimum number of frames a CTC alignment of `target` needs.
pub fn ctc_min_frames(target: &[u16]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame logits
/// (`T × (C+1)`, blank is the last column), with its gradient w.r.t. the
/// logits.
pub fn ctc_loss_and_grad(logits: &Matrix, target: &[u16]) -> Result<(f64, Matrix)> {
    let (t_len, n_class) = logits.shape();
    if t_len == 0 || n_class < 2 {
        return Err(AvdfError::Shape(format!("ctc logits {:?}", logits.shape())));
    }
    if !logits.all_finite() {
        return Err(AvdfError::Numeric("NaN/inf in CTC logits".into()));
    }
    let blank = n_class - 1;
    if let Some(bad) = target.iter().find(|&&k| k as usize >= blank) {
        return Err(AvdfError::InvalidInput(format!(
            "target symbol {bad} collides with blank {blank} or exceeds the vocabulary"
        )));
    }
    let need = ctc_min_frames(target);
    if need > t_len {
        return Err(AvdfError::InfeasibleTarget(format!(
            "target needs {need} frames, only {t_len} available"
        )));
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &k in target {
        ext.push(k as usize);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = log_softmax_rows(logits);
    let ninf = f64::NEG_INFINITY;
    // skip transition s-2 -> s allowed for non-blank symbols that differ
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp.get(t, ext[s]) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_sum_exp(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(AvdfError::Numeric("CTC likelihood underflowed".into()));
    }

    // beta[t][s]: log-prob of emitting the rest of the target after frame t,
    // given the path is at s at frame t (current emission excluded).
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp.get(t + 1, ext[s2]);
            let mut b = next(s);
            if s + 1 < s_len {
                b = log_sum_exp(b, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_sum_exp(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = Matrix::zeros(t_len, n_class);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp.get(t, k).exp();
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                row[ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(logits: &Matrix, target: &[u16]) -> Result<f64> {
    ctc_loss_and_grad(logits, target).map(|(l, _)| l)
}

/// Greedy CTC decode: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &Matrix) -> Vec<u16> {
    let blank = logits.cols() - 1;
    let mut out = Vec::new();
    let mut prev = blank;
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let best = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap_or(blank);
        if best != blank && best != prev {
            out.push(best as u16);
        }
        prev = best;
    }
    out
}

/// Levenshtein distance, used for phoneme error rate.
pub fn edit_distance(a: &[u16], b: &[u16]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + (x != y) as usize)
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Which per-modality label terms are excluded from the BCE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub audio_masked: bool,
    pub video_masked: bool,
}

impl LossMask {
    pub const NONE: LossMask = LossMask {
        audio_masked: false,
        video_masked: false,
    };

    fn masked(self, m: usize) -> bool {
        [self.audio_masked, self.video_masked][m]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over the unmasked modalities; 0 when both are
/// masked. Masked logits get exactly zero gradient.
pub fn dual_bce(logits: [f64; 2], label: DualLabel, mask: LossMask) -> (f64, [f64; 2]) {
    let y = label.as_array().map(|b| b as u8 as f64);
    let active: Vec<usize> = (0..2).filter(|&m| !mask.masked(m)).collect();
    let mut grad = [0.0; 2];
    if active.is_empty() {
        return (0.0, grad);
    }
    let n = active.len() as f64;
    let mut loss = 0.0;
    for &m in &active {
        // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
        loss += softplus(logits[m]) - y[m] * logits[m];
        grad[m] = (sigmoid(logits[m]) - y[m]) / n;
    }
    (loss / n, grad)
}

/// Cross-entropy of the fake-count head against `label.fake_count()`.
pub fn count_ce(logits: [f64; 3], label: DualLabel) -> (f64, [f64; 3]) {
    let target = label.fake_count();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + z.ln();
    let mut grad = logits.map(|v| (v - lse).exp());
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub bce: f64,
    pub ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ctc_only(ctc: f64) -> Self {
        LossBreakdown {
            ctc,
            total: ctc,
            ..Default::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ctc.is_finite() && self.bce.is_finite() && self.ce.is_finite() && self.total.is_finite()
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.ctc += other.ctc;
        self.bce += other.bce;
        self.ce += other.ce;
        self.total += other.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.ctc *= s;
        self.bce *= s;
        self.ce *= s;
        self.total *= s;
        self
    }
}

/// `bce + ce_weight · ce`; with the default weight of 1 this is the plain
/// unweighted sum.
pub fn total_detection_loss(bce: f64, ce: f64, ce_weight: f64) -> LossBreakdown {
    LossBreakdown {
        ctc: 0.0,
        bce,
        ce,
        total: bce + ce_weight * ce,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn collapse(path: &[usize], blank: usize) -> Vec<u16> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != blank {
                out.push(k as u16);
            }
            prev = Some(k);
        }
        out
    }

    /// Sum over every alignment string that collapses to `target`.
    fn brute_force(logits: &Matrix, target: &[u16]) -> f64 {
        let (t_len, n) = logits.shape();
        let lp = log_softmax_rows(logits);
        let mut total = 0.0;
        for code in 0..n.pow(t_len as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..t_len)
                .map(|_| {
                    let k = c % n;
                    c /= n;
                    k
                })
                .collect();
            if collapse(&path, n - 1) == target {
                total += path.iter().enumerate().map(|(t, &k)| lp.get(t, k)).sum::<f64>().exp();
            }
        }
        -total.ln()
    }

    fn random_logits(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Matrix {
        Matrix::from_fn(t, n, |_, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn single_frame_single_symbol() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let lp = log_softmax_rows(&logits);
        assert!((ctc_loss(&logits, &[1]).unwrap() + lp.get(0, 1)).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.0, -0.5]]).unwrap();
        let lp = log_softmax_rows(&logits);
        let want = -(lp.get(0, 2) + lp.get(1, 2));
        assert!((ctc_loss(&logits, &[]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn three_frames_two_symbols_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits = random_logits(&mut rng, 3, 3);
            let got = ctc_loss(&logits, &[0, 1]).unwrap();
            assert!((got - brute_force(&logits, &[0, 1])).abs() <= 1e-9);
        }
    }

    #[test]
    fn repeated_symbols_need_a_separating_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_logits(&mut rng, 3, 3);
        assert!((ctc_loss(&logits, &[1, 1]).unwrap() - brute_force(&logits, &[1, 1])).abs() < 1e-9);
        let short = random_logits(&mut rng, 2, 3);
        assert!(matches!(ctc_loss(&short, &[1, 1]), Err(AvdfError::InfeasibleTarget(_))));
        assert!(matches!(ctc_loss(&short, &[0, 1, 0]), Err(AvdfError::InfeasibleTarget(_))));
    }

    #[test]
    fn rejects_nan_and_blank_in_target() {
        let mut logits = Matrix::zeros(2, 3);
        assert!(ctc_loss(&logits, &[2]).is_err());
        logits.set(1, 1, f64::NAN);
        assert!(matches!(ctc_loss(&logits, &[0]), Err(AvdfError::Numeric(_))));
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t, target) in [(5usize, vec![0u16, 2, 2]), (4, vec![1]), (3, vec![])] {
            let logits = random_logits(&mut rng, t, 4);
            let (_, grad) = ctc_loss_and_grad(&logits, &target).unwrap();
            let h = 1e-6;
            for i in 0..logits.len() {
                let mut p = logits.clone();
                p.as_mut_slice()[i] += h;
                let mut m = logits.clone();
                m.as_mut_slice()[i] -= h;
                let fd = (ctc_loss(&p, &target).unwrap() - ctc_loss(&m, &target).unwrap()) / (2.0 * h);
                let an = grad.as_slice()[i];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) <= 1e-4, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn ctc_is_shift_invariant_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random_logits(&mut rng, 4, 4);
        let mut shifted = logits.clone();
        for (t, c) in [(0usize, 5.0), (2, -3.0), (3, 100.0)] {
            shifted.row_mut(t).iter_mut().for_each(|v| *v += c);
        }
        let a = ctc_loss(&logits, &[0, 2]).unwrap();
        let b = ctc_loss(&shifted, &[0, 2]).unwrap();
        assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn greedy_decode_collapses() {
        // argmax path: 0 0 blank 0 1 1 -> [0, 0, 1]
        let path = [0usize, 0, 2, 0, 1, 1];
        let logits = Matrix::from_fn(6, 3, |t, k| if k == path[t] { 1.0 } else { 0.0 });
        assert_eq!(ctc_greedy_decode(&logits), vec![0, 0, 1]);
        assert_eq!(edit_distance(&[0, 0, 1], &[0, 1]), 1);
        assert_eq!(edit_distance(&[], &[3, 4]), 2);
    }

    #[test]
    fn dual_bce_values() {
        let (l, _) = dual_bce([0.0, 0.0], DualLabel::REAL, LossMask::NONE);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let (l, _) = dual_bce([2.0, -1.0], DualLabel::new(true, false), LossMask::NONE);
        let want = 0.5 * (-(sigmoid(2.0)).ln() - (1.0 - sigmoid(-1.0)).ln());
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.220095).abs() < 5e-7);
    }

    #[test]
    fn masked_audio_is_ignored_exactly() {
        let mask = LossMask {
            audio_masked: true,
            video_masked: false,
        };
        let label = DualLabel::new(true, true);
        let (ref_l, ref_g) = dual_bce([0.0, 0.7], label, mask);
        for a in [-30.0, -1.0, 0.0, 4.0, 1e3] {
            let (l, g) = dual_bce([a, 0.7], label, mask);
            assert_eq!(l, ref_l);
            assert_eq!(g, [0.0, ref_g[1]]);
        }
        let video_only = softplus(0.7) - 0.7;
        assert_eq!(ref_l, video_only);
        let both = LossMask {
            audio_masked: true,
            video_masked: true,
        };
        assert_eq!(dual_bce([3.0, 3.0], label, both), (0.0, [0.0, 0.0]));
    }

    #[test]
    fn count_ce_values() {
        let (l, _) = count_ce([0.0; 3], DualLabel::new(true, false));
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert_eq!(
            count_ce([0.3, -0.2, 1.0], DualLabel::new(true, false)),
            count_ce([0.3, -0.2, 1.0], DualLabel::new(false, true))
        );
        let (l, _) = count_ce([0.0, 0.0, 50.0], DualLabel::new(true, true));
        assert!(l < 1e-20);
    }

    #[test]
    fn small_loss_gradients_match_finite_differences() {
        let h = 1e-6;
        let z = [0.4, -1.3];
        let label = DualLabel::new(false, true);
        let (_, g) = dual_bce(z, label, LossMask::NONE);
        for m in 0..2 {
            let mut p = z;
            p[m] += h;
            let mut q = z;
            q[m] -= h;
            let fd = (dual_bce(p, label, LossMask::NONE).0 - dual_bce(q, label, LossMask::NONE).0) / (2.0 * h);
            assert!((fd - g[m]).abs() < 1e-8);
        }
        let z = [0.4, -1.3, 0.2];
        let (_, g) = count_ce(z, label);
        for m in 0..3 {
            let mut p = z;
            p[m] += h;
            let mut q = z;
            q[m] -= h;
            let fd = (count_ce(p, label).0 - count_ce(q, label).0) / (2.0 * h);
            assert!((fd - g[m]).abs() < 1e-8);
        }
    }

    #[test]
    fn total_is_the_plain_sum() {
        let (b, _) = dual_bce([2.0, -1.0], DualLabel::new(true, false), LossMask::NONE);
        let (c, _) = count_ce([0.0; 3], DualLabel::new(true, false));
        let t = total_detection_loss(b, c, 1.0);
        assert_eq!(t.total, b + c);
        assert!((t.total - (0.220095 + 3f64.ln())).abs() < 1e-6);
    }
}
