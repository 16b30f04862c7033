//! Two-stage audio-visual network.
//!
//! ```text
//! audio rows ─ frontend ─ encoder ─┐               ┌─ CTC head            (stage 1)
//!                                  ├─ MCA ─ joint ─┤
//! video rows ─ frontend ─ encoder ─┘    decoder    └─ FCD ─ TAM ─ heads   (stage 2)
//! ```
//!
//! A missing modality is modelled as a zero embedding: its encoder is
//! skipped, the adapter sees a zero vector (the L2 guard keeps that at zero)
//! and the joint decoder receives zeros in that half of the concatenation.

mod init;
pub mod transformer;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{AvdfError, Result};
use crate::features::{self, SampleFeatures, ALIGNED_WIDTH};
use crate::losses::{sigmoid, LossMask};
use crate::tensor::Matrix;

pub use init::Initializer;
use transformer::{add_positional, dense, register_stack, run_stack, Dropout};

/// Guard in `x / max(‖x‖₂, ε)`.
pub const L2_EPS: f64 = 1e-8;
const TOKEN_STD: f64 = 0.02;

/// Parameter-name prefixes carried over from stage 1 into stage 2.
pub const BACKBONE_PREFIXES: [&str; 5] = [
    "audio_frontend.",
    "video_frontend.",
    "audio_encoder.",
    "video_encoder.",
    "joint.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

/// Which embedding the modality compensation adapter augments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McaMode {
    None,
    #[default]
    Audio,
    Video,
}

impl std::str::FromStr for McaMode {
    type Err = AvdfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(McaMode::None),
            "audio" => Ok(McaMode::Audio),
            "video" => Ok(McaMode::Video),
            other => Err(AvdfError::Config(format!("unknown MCA mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for McaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            McaMode::None => "none",
            McaMode::Audio => "audio",
            McaMode::Video => "video",
        })
    }
}

/// Modalities available for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresenceMask {
    pub audio: bool,
    pub video: bool,
}

impl PresenceMask {
    pub const BOTH: PresenceMask = PresenceMask {
        audio: true,
        video: true,
    };
    pub const AUDIO_ONLY: PresenceMask = PresenceMask {
        audio: true,
        video: false,
    };
    pub const VIDEO_ONLY: PresenceMask = PresenceMask {
        audio: false,
        video: true,
    };

    pub fn new(audio: bool, video: bool) -> Result<Self> {
        let p = PresenceMask { audio, video };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(self) -> Result<()> {
        if !self.audio && !self.video {
            return Err(AvdfError::InvalidInput("both modalities absent".into()));
        }
        Ok(())
    }

    /// Absent modalities have their label term masked.
    pub fn loss_mask(self) -> LossMask {
        LossMask {
            audio_masked: !self.audio,
            video_masked: !self.video,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.audio, self.video) {
            (true, true) => "audio-visual",
            (true, false) => "audio-only",
            (false, true) => "video-only",
            (false, false) => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub layers_audio_enc: usize,
    pub layers_video_enc: usize,
    pub layers_joint_dec: usize,
    pub layers_fcd: usize,
    pub layers_tam: usize,
    /// Non-blank phoneme classes; the CTC blank is index `n_phonemes`.
    pub n_phonemes: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub dropout_rate: f64,
    pub mca_mode: McaMode,
    /// Add positional encodings to the classifier's token sequence.
    pub dlc_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small preset sized for CPU training.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            layers_audio_enc: 2,
            layers_video_enc: 2,
            layers_joint_dec: 2,
            layers_fcd: 1,
            layers_tam: 1,
            n_phonemes: 40,
            audio_dim: ALIGNED_WIDTH,
            video_dim: 64,
            dropout_rate: 0.0,
            mca_mode: McaMode::Audio,
            dlc_positional: true,
        }
    }

    /// Full-size preset: 512-wide, 6/6/6 backbone layers, 1 FCD and 2 TAM
    /// layers.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            layers_audio_enc: 6,
            layers_video_enc: 6,
            layers_joint_dec: 6,
            layers_fcd: 1,
            layers_tam: 2,
            n_phonemes: 40,
            audio_dim: ALIGNED_WIDTH,
            video_dim: 512,
            dropout_rate: 0.1,
            mca_mode: McaMode::Audio,
            dlc_positional: true,
        }
    }

    pub fn blank_id(&self) -> usize {
        self.n_phonemes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AvdfError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.n_phonemes == 0 || self.audio_dim == 0 || self.video_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Same parameter shapes (everything except dropout and the adapter
    /// mode, which do not change the parameter set).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            dropout_rate: 0.0,
            mca_mode: McaMode::None,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Tape handles for the classifier outputs.
#[derive(Clone, Copy, Debug)]
pub struct DlcNodes {
    /// 1×2, index 0 audio, index 1 video.
    pub modality_logits: Var,
    /// 1×3 over fake counts 0, 1, 2.
    pub count_logits: Var,
    /// 1×d temporal-token output.
    pub embedding: Var,
    /// FCD output, `(T+1) × d`.
    pub fcd_sequence: Var,
    /// TAM output, `(T+2) × d`.
    pub sequence: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub p_audio_fake: f64,
    pub p_video_fake: f64,
    pub count_probs: [f64; 3],
    pub fused_real_score: f64,
    pub embedding: Vec<f64>,
    pub modality_logits: [f64; 2],
    /// Whether each per-modality probability is backed by an observed input.
    pub supported: [bool; 2],
}

impl DetectionOutput {
    pub fn from_logits(
        modality_logits: [f64; 2],
        count_logits: [f64; 3],
        embedding: Vec<f64>,
        presence: PresenceMask,
    ) -> Self {
        let [pa, pv] = modality_logits.map(sigmoid);
        let max = count_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp = count_logits.map(|v| (v - max).exp());
        let z: f64 = exp.iter().sum();
        let count_probs = exp.map(|v| v / z);
        let fused_real_score = match (presence.audio, presence.video) {
            (true, true) => (1.0 - pa) * (1.0 - pv),
            (true, false) => 1.0 - pa,
            _ => 1.0 - pv,
        };
        DetectionOutput {
            p_audio_fake: pa,
            p_video_fake: pv,
            count_probs,
            fused_real_score,
            embedding,
            modality_logits,
            supported: [presence.audio, presence.video],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Initializer::new(seed);
        let c = &config;
        let (d, ff) = (c.d_model, c.d_ff);
        let mut s = ParamStore::new();
        init.linear(&mut s, "audio_frontend", c.audio_dim, d);
        init.linear(&mut s, "video_frontend", c.video_dim, d);
        register_stack(&mut s, &init, "audio_encoder", c.layers_audio_enc, d, ff);
        register_stack(&mut s, &init, "video_encoder", c.layers_video_enc, d, ff);
        init.linear(&mut s, "joint.proj", 2 * d, d);
        register_stack(&mut s, &init, "joint.stack", c.layers_joint_dec, d, ff);
        init.linear(&mut s, "avsr_head", d, c.n_phonemes + 1);
        init.linear(&mut s, "mca", 2 * d, d);
        init.token(&mut s, "dlc.t_fake", d, TOKEN_STD);
        init.token(&mut s, "dlc.t_temp", d, TOKEN_STD);
        register_stack(&mut s, &init, "dlc.fcd", c.layers_fcd, d, ff);
        register_stack(&mut s, &init, "dlc.tam", c.layers_tam, d, ff);
        init.linear(&mut s, "dlc.mlp_y.hidden", d, d);
        init.linear(&mut s, "dlc.mlp_y.out", d, 2);
        init.linear(&mut s, "dlc.mlp_p.hidden", d, d);
        init.linear(&mut s, "dlc.mlp_p.out", d, 3);
        Ok(Model { config, params: s })
    }

    /// Rebuild from stored tensors, checking every name and shape against a
    /// freshly initialised model of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(AvdfError::Config(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                reference.params.len()
            )));
        }
        let mut ordered = ParamStore::new();
        for (_, name, want) in reference.params.iter() {
            let got = params
                .by_name(name)
                .ok_or_else(|| AvdfError::Config(format!("missing parameter {name}")))?;
            if got.shape() != want.shape() {
                return Err(AvdfError::Config(format!(
                    "parameter {name}: shape {:?}, config expects {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
            ordered.insert(name, got.clone());
        }
        Ok(Model {
            config,
            params: ordered,
        })
    }

    pub fn is_backbone(name: &str) -> bool {
        BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// Copy every backbone tensor from `source`; returns how many were copied.
    pub fn transfer_backbone(&mut self, source: &Model) -> Result<usize> {
        if !self.config.same_architecture(&source.config) {
            return Err(AvdfError::Config(
                "checkpoint architecture differs from model config".into(),
            ));
        }
        let mut n = 0;
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if Model::is_backbone(&name) {
                let src = source
                    .params
                    .by_name(&name)
                    .ok_or_else(|| AvdfError::Config(format!("checkpoint lacks {name}")))?;
                *self.params.get_mut(id) = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    fn check_features(&self, f: &SampleFeatures) -> Result<()> {
        let t = f.audio.rows();
        if t == 0 || f.video.rows() != t {
            return Err(AvdfError::Shape(format!(
                "audio has {} frames, video {}",
                t,
                f.video.rows()
            )));
        }
        if f.audio.cols() != self.config.audio_dim || f.video.cols() != self.config.video_dim {
            return Err(AvdfError::Shape(format!(
                "feature widths ({}, {}) vs config ({}, {})",
                f.audio.cols(),
                f.video.cols(),
                self.config.audio_dim,
                self.config.video_dim
            )));
        }
        Ok(())
    }

    /// Front end plus unimodal encoder: `T × raw` rows to `T × d` embeddings.
    pub fn encode(
        &self,
        g: &mut Graph,
        raw: Var,
        which: Modality,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let (front, stack, layers) = match which {
            Modality::Audio => ("audio_frontend", "audio_encoder", self.config.layers_audio_enc),
            Modality::Video => ("video_frontend", "video_encoder", self.config.layers_video_enc),
        };
        if g.value(raw).rows() == 0 {
            return Err(AvdfError::InvalidInput("empty feature sequence".into()));
        }
        let w = g.param_named(&format!("{front}.w"));
        let b = g.param_named(&format!("{front}.b"));
        let x = match which {
            Modality::Audio => features::audio_frontend(g, raw, w, b)?,
            Modality::Video => features::video_frontend(g, raw, w, b)?,
        };
        self.encode_features(g, x, stack, layers, dropout)
    }

    /// Positional encoding plus transformer stack over front-end output.
    pub fn encode_features(
        &self,
        g: &mut Graph,
        x: Var,
        stack: &str,
        layers: usize,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        if !g.value(x).all_finite() {
            return Err(AvdfError::Numeric("NaN/inf entering encoder".into()));
        }
        let x = add_positional(g, x)?;
        run_stack(g, x, stack, layers, self.config.n_heads, dropout)
    }

    /// Modality compensation: `c = e + θ(L2n(e_a) ⧺ L2n(e_v))` applied to the
    /// modality selected by `mode`; the other embedding passes through.
    pub fn compensate(&self, g: &mut Graph, e_a: Var, e_v: Var, mode: McaMode) -> Result<(Var, Var)> {
        if g.value(e_a).shape() != g.value(e_v).shape() {
            return Err(AvdfError::Shape(format!(
                "compensate: audio {:?} vs video {:?}",
                g.value(e_a).shape(),
                g.value(e_v).shape()
            )));
        }
        if mode == McaMode::None {
            return Ok((e_a, e_v));
        }
        let na = g.l2_normalize_rows(e_a, L2_EPS);
        let nv = g.l2_normalize_rows(e_v, L2_EPS);
        let cat = g.concat_cols(na, nv)?;
        let residual = dense(g, cat, "mca")?;
        Ok(match mode {
            McaMode::Audio => (g.add(e_a, residual)?, e_v),
            McaMode::Video => (e_a, g.add(e_v, residual)?),
            McaMode::None => unreachable!(),
        })
    }

    /// Frame-wise concatenation, projection to `d`, then the joint stack.
    /// Absent modalities contribute zeros whatever their embedding holds.
    pub fn joint_decode(
        &self,
        g: &mut Graph,
        c_a: Var,
        c_v: Var,
        presence: PresenceMask,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        presence.validate()?;
        let (t, d) = g.value(c_a).shape();
        if g.value(c_v).shape() != (t, d) {
            return Err(AvdfError::Shape("joint_decode length mismatch".into()));
        }
        let a = if presence.audio { c_a } else { g.input(Matrix::zeros(t, d)) };
        let v = if presence.video { c_v } else { g.input(Matrix::zeros(t, d)) };
        let cat = g.concat_cols(a, v)?;
        let x = dense(g, cat, "joint.proj")?;
        let x = add_positional(g, x)?;
        run_stack(
            g,
            x,
            "joint.stack",
            self.config.layers_joint_dec,
            self.config.n_heads,
            dropout,
        )
    }

    /// `T × (C+1)` CTC logits; the last column is the blank.
    pub fn avsr_head(&self, g: &mut Graph, decoded: Var) -> Result<Var> {
        dense(g, decoded, "avsr_head")
    }

    fn mlp(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = dense(g, x, &format!("{name}.hidden"))?;
        let h = g.gelu(h);
        dense(g, h, &format!("{name}.out"))
    }

    /// Dual-label classifier. The fake-aware token is prepended and the
    /// sequence runs through FCD; the temporal token is prepended to that
    /// and the result runs through TAM. Row 0 (temporal token) feeds the
    /// per-modality head, row 1 (fake-aware token) the fake-count head.
    pub fn dlc_forward(
        &self,
        g: &mut Graph,
        decoded: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<DlcNodes> {
        let c = &self.config;
        if g.value(decoded).rows() == 0 {
            return Err(AvdfError::InvalidInput("empty decoded sequence".into()));
        }
        let t_fake = g.param_named("dlc.t_fake");
        let t_temp = g.param_named("dlc.t_temp");
        let mut x = g.concat_rows(t_fake, decoded)?;
        if c.dlc_positional {
            x = add_positional(g, x)?;
        }
        let seq_temp = run_stack(g, x, "dlc.fcd", c.layers_fcd, c.n_heads, dropout)?;
        let x = g.concat_rows(t_temp, seq_temp)?;
        let seq = run_stack(g, x, "dlc.tam", c.layers_tam, c.n_heads, dropout)?;
        let temporal = g.row(seq, 0)?;
        let fake_aware = g.row(seq, 1)?;
        let modality_logits = self.mlp(g, temporal, "dlc.mlp_y")?;
        let count_logits = self.mlp(g, fake_aware, "dlc.mlp_p")?;
        Ok(DlcNodes {
            modality_logits,
            count_logits,
            embedding: temporal,
            fcd_sequence: seq_temp,
            sequence: seq,
        })
    }

    fn embeddings(
        &self,
        g: &mut Graph,
        f: &SampleFeatures,
        presence: PresenceMask,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, Var)> {
        self.check_features(f)?;
        presence.validate()?;
        let (t, d) = (f.frames(), self.config.d_model);
        let e_a = if presence.audio {
            let x = g.input(f.audio.clone());
            self.encode(g, x, Modality::Audio, dropout)?
        } else {
            g.input(Matrix::zeros(t, d))
        };
        let e_v = if presence.video {
            let x = g.input(f.video.clone());
            self.encode(g, x, Modality::Video, dropout)?
        } else {
            g.input(Matrix::zeros(t, d))
        };
        Ok((e_a, e_v))
    }

    /// Stage-1 forward: CTC logits from both modalities.
    pub fn forward_avsr(
        &self,
        g: &mut Graph,
        f: &SampleFeatures,
        presence: PresenceMask,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let (e_a, e_v) = self.embeddings(g, f, presence, dropout)?;
        let decoded = self.joint_decode(g, e_a, e_v, presence, dropout)?;
        self.avsr_head(g, decoded)
    }

    /// Stage-2 forward. Also returns the decoded sequence for optional
    /// auxiliary CTC supervision.
    pub fn forward_detection(
        &self,
        g: &mut Graph,
        f: &SampleFeatures,
        presence: PresenceMask,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(DlcNodes, Var)> {
        let (e_a, e_v) = self.embeddings(g, f, presence, dropout)?;
        let (c_a, c_v) = self.compensate(g, e_a, e_v, self.config.mca_mode)?;
        let decoded = self.joint_decode(g, c_a, c_v, presence, dropout)?;
        Ok((self.dlc_forward(g, decoded, dropout)?, decoded))
    }

    /// Inference: probabilities and fused score for one clip.
    pub fn detect(&self, f: &SampleFeatures, presence: PresenceMask) -> Result<DetectionOutput> {
        let mut g = Graph::new(&self.params);
        let (nodes, _) = self.forward_detection(&mut g, f, presence, &mut None)?;
        let ml = g.value(nodes.modality_logits).row(0);
        let cl = g.value(nodes.count_logits).row(0);
        let out = DetectionOutput::from_logits(
            [ml[0], ml[1]],
            [cl[0], cl[1], cl[2]],
            g.value(nodes.embedding).row(0).to_vec(),
            presence,
        );
        if !(out.p_audio_fake.is_finite() && out.p_video_fake.is_finite()) {
            return Err(AvdfError::Numeric("non-finite detection output".into()));
        }
        Ok(out)
    }

    /// Stage-1 inference: CTC logits for one clip.
    pub fn transcribe_logits(&self, f: &SampleFeatures) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let logits = self.forward_avsr(&mut g, f, PresenceMask::BOTH, &mut None)?;
        Ok(g.value(logits).clone())
    }
}
