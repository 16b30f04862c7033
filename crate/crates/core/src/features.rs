//! Acoustic and visual front ends.
//!
//! 16 kHz audio becomes a 321-bin magnitude spectrogram (640-sample Hann
//! window, 160-sample hop). Every 4 acoustic frames are concatenated into
//! one 1284-wide row so the audio runs at the 25 fps video rate; a learned
//! linear map on each group then plays the role of a stride-4 convolution
//! with kernel width 4.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::AVSample;
use crate::error::{AvdfError, Result};
use crate::tensor::Matrix;

pub const WINDOW: usize = 640;
pub const HOP: usize = 160;
pub const N_BINS: usize = WINDOW / 2 + 1;
pub const FRAMES_PER_VIDEO_FRAME: usize = 4;
pub const ALIGNED_WIDTH: usize = FRAMES_PER_VIDEO_FRAME * N_BINS;

const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// `T_a × 321` magnitudes.
    pub frames: Matrix,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Use `ln(1e-6 + |X|)` instead of `|X|`.
    pub log_spec: bool,
    /// Per-utterance mean/std normalisation of the spectrogram.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            log_spec: false,
            normalize: true,
        }
    }
}

fn hann() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / WINDOW as f64).cos())
        .collect()
}

/// Magnitude STFT. Frame `t` covers samples `[160t, 160t + 640)`, zero
/// padded past the end; there are `ceil(len / 160)` frames.
pub fn stft_spectrogram(waveform: &[f32]) -> Result<Spectrogram> {
    if waveform.len() < WINDOW {
        return Err(AvdfError::InvalidInput(format!(
            "waveform of {} samples is shorter than one {WINDOW}-sample window",
            waveform.len()
        )));
    }
    let n_frames = waveform.len().div_ceil(HOP);
    let window = hann();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(n_frames, N_BINS);
    for t in 0..n_frames {
        let start = t * HOP;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = waveform.get(start + n).map_or(0.0, |&v| v as f64);
            *slot = Complex::new(x * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = buf[k].norm();
        }
    }
    Ok(Spectrogram { frames: out })
}

/// Pad (with zero frames) or truncate to exactly `4 · frames` acoustic
/// frames, then concatenate consecutive groups of 4.
pub fn align_audio_frames(spect: &Spectrogram, frames: usize) -> Result<Matrix> {
    let t_a = spect.n_frames();
    let want = FRAMES_PER_VIDEO_FRAME * frames;
    if frames == 0 || t_a.abs_diff(want) > FRAMES_PER_VIDEO_FRAME {
        return Err(AvdfError::Alignment(format!(
            "{t_a} acoustic frames cannot align to {frames} video frames"
        )));
    }
    let mut out = Matrix::zeros(frames, ALIGNED_WIDTH);
    for a in 0..want.min(t_a) {
        let (row, group) = (a / FRAMES_PER_VIDEO_FRAME, a % FRAMES_PER_VIDEO_FRAME);
        out.row_mut(row)[group * N_BINS..(group + 1) * N_BINS]
            .copy_from_slice(spect.frames.row(a));
    }
    Ok(out)
}

fn normalize_in_place(m: &mut Matrix) {
    let n = m.len() as f64;
    let mean = m.sum() / n;
    let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    m.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = (*v - mean) / std);
}

/// Waveform to `frames × 1284` aligned acoustic rows.
pub fn audio_features(waveform: &[f32], frames: usize, cfg: &FrontendConfig) -> Result<Matrix> {
    let mut spect = stft_spectrogram(waveform)?;
    if cfg.log_spec {
        spect
            .frames
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (LOG_FLOOR + *v).ln());
    }
    if cfg.normalize {
        normalize_in_place(&mut spect.frames);
    }
    align_audio_frames(&spect, frames)
}

/// Visual rows as an `f64` matrix.
pub fn video_features(sample: &AVSample) -> Matrix {
    let data = sample.video_rows.iter().map(|&v| v as f64).collect();
    Matrix::from_vec(sample.frames, sample.video_dim, data).expect("validated sample")
}

/// Both modalities of one clip, at the video frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    pub audio: Matrix,
    pub video: Matrix,
}

impl SampleFeatures {
    pub fn frames(&self) -> usize {
        self.audio.rows()
    }

    pub fn from_sample(sample: &AVSample, cfg: &FrontendConfig) -> Result<Self> {
        sample.validate()?;
        Ok(SampleFeatures {
            audio: audio_features(&sample.waveform, sample.frames, cfg)?,
            video: video_features(sample),
        })
    }
}

fn frontend(g: &mut Graph, x: Var, w: Var, b: Var, what: &str) -> Result<Var> {
    let (xv, wv) = (g.value(x), g.value(w));
    if xv.cols() != wv.rows() || g.value(b).shape() != (1, wv.cols()) {
        return Err(AvdfError::Shape(format!(
            "{what} front end: input width {} vs params {:?}",
            xv.cols(),
            wv.shape()
        )));
    }
    if !xv.all_finite() {
        return Err(AvdfError::Numeric(format!("{what} features contain NaN/inf")));
    }
    g.linear(x, w, Some(b))
}

/// Row-wise affine map `1284 → d_model`.
pub fn audio_frontend(g: &mut Graph, aligned: Var, w: Var, b: Var) -> Result<Var> {
    frontend(g, aligned, w, b, "audio")
}

/// Row-wise affine map `D_vraw → d_model`.
pub fn video_frontend(g: &mut Graph, rows: Var, w: Var, b: Var) -> Result<Var> {
    frontend(g, rows, w, b, "video")
}
