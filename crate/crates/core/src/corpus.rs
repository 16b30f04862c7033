//! Synthetic audio-visual speech corpus.
//!
//! Real clips share one latent phoneme stream between audio and video. A
//! fake modality is re-synthesised from an independent per-frame phoneme
//! stream, so each stream is plausible on its own but the cross-modal
//! speech correlation is gone.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AvdfError, Result};
use crate::par::{self, Execution};

pub const SAMPLE_RATE: usize = 16_000;
/// Audio samples per 25 fps video frame (40 ms at 16 kHz).
pub const SAMPLES_PER_FRAME: usize = 640;
/// Frequency resolution of a 640-point DFT at 16 kHz.
pub const HZ_PER_BIN: f64 = SAMPLE_RATE as f64 / SAMPLES_PER_FRAME as f64;
pub const MIN_FRAMES: usize = 4;
/// Largest vocabulary whose tone map stays injective inside the low band.
pub const MAX_PHONEMES: usize = 150;

const LOW_BAND_FIRST_BIN: usize = 6;
const HIGH_BAND_FIRST_BIN: usize = 170;
const LOW_AMPLITUDE: f64 = 0.5;
const HIGH_AMPLITUDE: f64 = 0.25;
const PROJECTION_SEED: u64 = 0x5eed_a11d_0f1c_e000;

const MAGIC: &[u8; 4] = b"AVDS";
const FORMAT_VERSION: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Phoneme transcript over a vocabulary of `vocab` non-blank symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSeq {
    ids: Vec<u16>,
    vocab: usize,
}

impl PhonemeSeq {
    pub fn new(ids: Vec<u16>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(AvdfError::InvalidInput("empty phoneme sequence".into()));
        }
        if vocab == 0 || vocab > u16::MAX as usize {
            return Err(AvdfError::InvalidInput(format!("vocabulary size {vocab}")));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(AvdfError::InvalidInput(format!(
                "phoneme id {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(PhonemeSeq { ids, vocab })
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stretch the transcript uniformly over `frames` frames.
    pub fn frame_schedule(&self, frames: usize) -> Vec<u16> {
        let l = self.ids.len();
        (0..frames).map(|f| self.ids[f * l / frames]).collect()
    }
}

/// Per-modality fake flags. Index 0 is audio, index 1 is video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DualLabel {
    pub audio_fake: bool,
    pub video_fake: bool,
}

impl DualLabel {
    pub const REAL: DualLabel = DualLabel::new(false, false);

    pub const fn new(audio_fake: bool, video_fake: bool) -> Self {
        DualLabel {
            audio_fake,
            video_fake,
        }
    }

    /// Number of fake modalities, in `{0, 1, 2}`.
    pub fn fake_count(self) -> usize {
        self.audio_fake as usize + self.video_fake as usize
    }

    pub fn as_array(self) -> [bool; 2] {
        [self.audio_fake, self.video_fake]
    }

    pub fn class(self) -> LabelClass {
        match (self.audio_fake, self.video_fake) {
            (false, false) => LabelClass::RR,
            (false, true) => LabelClass::RF,
            (true, false) => LabelClass::FR,
            (true, true) => LabelClass::FF,
        }
    }

    pub fn bits(self) -> u32 {
        self.audio_fake as u32 | (self.video_fake as u32) << 1
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        (bits < 4).then(|| DualLabel::new(bits & 1 == 1, bits & 2 == 2))
    }
}

/// Four-way category; the first letter is audio, the second video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelClass {
    RR,
    RF,
    FR,
    FF,
}

impl LabelClass {
    pub const ALL: [LabelClass; 4] = [LabelClass::RR, LabelClass::RF, LabelClass::FR, LabelClass::FF];

    pub fn label(self) -> DualLabel {
        match self {
            LabelClass::RR => DualLabel::new(false, false),
            LabelClass::RF => DualLabel::new(false, true),
            LabelClass::FR => DualLabel::new(true, false),
            LabelClass::FF => DualLabel::new(true, true),
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelClass::RR => "RR",
            LabelClass::RF => "RF",
            LabelClass::FR => "FR",
            LabelClass::FF => "FF",
        };
        f.write_str(s)
    }
}

/// One audio-visual clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AVSample {
    pub sample_id: String,
    /// 16 kHz mono, exactly `frames * 640` samples.
    pub waveform: Vec<f32>,
    /// Row-major `frames × video_dim` visual features.
    pub video_rows: Vec<f32>,
    pub frames: usize,
    pub video_dim: usize,
    pub transcript: PhonemeSeq,
    pub label: DualLabel,
    pub seed: u64,
}

impl AVSample {
    pub fn video_row(&self, t: usize) -> &[f32] {
        &self.video_rows[t * self.video_dim..(t + 1) * self.video_dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES {
            return Err(AvdfError::InvalidInput(format!(
                "{}: {} frames, need at least {MIN_FRAMES}",
                self.sample_id, self.frames
            )));
        }
        if self.waveform.len() != self.frames * SAMPLES_PER_FRAME
            || self.video_rows.len() != self.frames * self.video_dim
        {
            return Err(AvdfError::InvalidInput(format!(
                "{}: payload lengths disagree with {} frames",
                self.sample_id, self.frames
            )));
        }
        if !self.waveform.iter().chain(&self.video_rows).all(|v| v.is_finite()) {
            return Err(AvdfError::InvalidInput(format!(
                "{}: non-finite values",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Samples per label class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub rr: usize,
    pub rf: usize,
    pub fr: usize,
    pub ff: usize,
}

impl ClassCounts {
    pub fn uniform(n: usize) -> Self {
        ClassCounts {
            rr: n,
            rf: n,
            fr: n,
            ff: n,
        }
    }

    pub fn get(&self, class: LabelClass) -> usize {
        match class {
            LabelClass::RR => self.rr,
            LabelClass::RF => self.rf,
            LabelClass::FR => self.fr,
            LabelClass::FF => self.ff,
        }
    }

    pub fn total(&self) -> usize {
        self.rr + self.rf + self.fr + self.ff
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub counts: ClassCounts,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_phonemes: usize,
    pub video_dim: usize,
    pub noise_std: f64,
    /// Per-frame probability that a real video frame follows the shared
    /// phoneme schedule (otherwise a random phoneme is shown).
    pub correlation_strength: f64,
    pub master_seed: u64,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            counts: ClassCounts::uniform(200),
            min_frames: 8,
            max_frames: 16,
            n_phonemes: 40,
            video_dim: 64,
            noise_std: 0.1,
            correlation_strength: 1.0,
            master_seed: 0,
            test_fraction: 0.15,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AvdfError::Config(m));
        if self.counts.total() == 0 {
            return bad("corpus has zero samples".into());
        }
        if self.min_frames < MIN_FRAMES || self.max_frames < self.min_frames {
            return bad(format!(
                "frame range [{}, {}] invalid (minimum {MIN_FRAMES})",
                self.min_frames, self.max_frames
            ));
        }
        if !(2..=MAX_PHONEMES).contains(&self.n_phonemes) {
            return bad(format!(
                "n_phonemes {} outside [2, {MAX_PHONEMES}]",
                self.n_phonemes
            ));
        }
        if self.video_dim == 0 {
            return bad("video_dim must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        if !(self.correlation_strength > 0.0 && self.correlation_strength <= 1.0) {
            return bad(format!(
                "correlation_strength {} outside (0, 1]",
                self.correlation_strength
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {}", self.test_fraction));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser; used to derive independent per-sample seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Spacing, in DFT bins, between neighbouring phoneme tones.
fn bin_spacing(vocab: usize) -> usize {
    (MAX_PHONEMES / vocab).max(1)
}

/// DFT bins `(low, high)` of the two tones voicing `id`. The low tone is
/// louder, so it is the frame's dominant bin; the map is injective in it.
pub fn phoneme_bins(id: u16, vocab: usize) -> (usize, usize) {
    let s = bin_spacing(vocab);
    let id = id as usize;
    let low = LOW_BAND_FIRST_BIN + s * id;
    let high = HIGH_BAND_FIRST_BIN + s * ((7 * id + 3) % vocab);
    (low, high)
}

/// Inverse of the low-band tone map.
pub fn phoneme_for_bin(bin: usize, vocab: usize) -> Option<u16> {
    let s = bin_spacing(vocab);
    let off = bin.checked_sub(LOW_BAND_FIRST_BIN)?;
    (off % s == 0 && off / s < vocab).then(|| (off / s) as u16)
}

/// Fixed visual embedding table (`vocab × dim`), shared by every sample.
pub fn projection_table(vocab: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream(PROJECTION_SEED ^ (vocab as u64) << 32 ^ dim as u64, 0);
    (0..vocab * dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_stream(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Vec<u16> {
    (0..frames).map(|_| rng.gen_range(0..vocab) as u16).collect()
}

/// Draw a transcript for a clip of `frames` frames: length in
/// `[ceil(frames/4), frames/2]`, no immediately repeated phoneme.
pub fn random_transcript(rng: &mut impl Rng, frames: usize, vocab: usize) -> Result<PhonemeSeq> {
    let lo = frames.div_ceil(4).max(1);
    let hi = (frames / 2).max(lo);
    let len = rng.gen_range(lo..=hi);
    let mut ids = Vec::with_capacity(len);
    let mut prev: Option<u16> = None;
    for _ in 0..len {
        let id = match prev {
            None => rng.gen_range(0..vocab) as u16,
            Some(p) => {
                let r = rng.gen_range(0..vocab - 1) as u16;
                if r >= p {
                    r + 1
                } else {
                    r
                }
            }
        };
        ids.push(id);
        prev = Some(id);
    }
    PhonemeSeq::new(ids, vocab)
}

/// Render one clip. Deterministic in `(transcript, label, frames, spec, seed)`.
pub fn synthesize_sample(
    sample_id: impl Into<String>,
    transcript: &PhonemeSeq,
    label: DualLabel,
    frames: usize,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<AVSample> {
    let vocab = spec.n_phonemes;
    if transcript.vocab() != vocab {
        return Err(AvdfError::InvalidInput(format!(
            "transcript vocabulary {} differs from corpus vocabulary {vocab}",
            transcript.vocab()
        )));
    }
    if frames < MIN_FRAMES {
        return Err(AvdfError::InvalidInput(format!(
            "{frames} frames, need at least {MIN_FRAMES}"
        )));
    }
    if transcript.len() > frames {
        return Err(AvdfError::InvalidInput(format!(
            "transcript of {} phonemes does not fit {frames} frames",
            transcript.len()
        )));
    }
    let schedule = transcript.frame_schedule(frames);

    let audio_ids = if label.audio_fake {
        random_stream(&mut stream(seed, 1), frames, vocab)
    } else {
        schedule.clone()
    };
    let video_ids = if label.video_fake {
        random_stream(&mut stream(seed, 2), frames, vocab)
    } else {
        let mut rng = stream(seed, 3);
        schedule
            .iter()
            .map(|&id| {
                if spec.correlation_strength >= 1.0 || rng.gen::<f64>() < spec.correlation_strength {
                    id
                } else {
                    rng.gen_range(0..vocab) as u16
                }
            })
            .collect()
    };

    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| AvdfError::Config(format!("noise_std: {e}")))?;

    let mut rng = stream(seed, 4);
    let tau = std::f64::consts::TAU;
    let mut phase_low: f64 = rng.gen_range(0.0..tau);
    let mut phase_high: f64 = rng.gen_range(0.0..tau);
    let mut waveform = Vec::with_capacity(frames * SAMPLES_PER_FRAME);
    for &id in &audio_ids {
        let (lb, hb) = phoneme_bins(id, vocab);
        let step_low = tau * lb as f64 * HZ_PER_BIN / SAMPLE_RATE as f64;
        let step_high = tau * hb as f64 * HZ_PER_BIN / SAMPLE_RATE as f64;
        for _ in 0..SAMPLES_PER_FRAME {
            let mut s = LOW_AMPLITUDE * phase_low.sin() + HIGH_AMPLITUDE * phase_high.sin();
            if spec.noise_std > 0.0 {
                s += noise.sample(&mut rng);
            }
            waveform.push(s as f32);
            phase_low = (phase_low + step_low) % tau;
            phase_high = (phase_high + step_high) % tau;
        }
    }

    let table = projection_table(vocab, spec.video_dim);
    let mut rng = stream(seed, 5);
    let mut video_rows = Vec::with_capacity(frames * spec.video_dim);
    for &id in &video_ids {
        let base = &table[id as usize * spec.video_dim..(id as usize + 1) * spec.video_dim];
        for &v in base {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            video_rows.push((v + n) as f32);
        }
    }

    Ok(AVSample {
        sample_id: sample_id.into(),
        waveform,
        video_rows,
        frames,
        video_dim: spec.video_dim,
        transcript: transcript.clone(),
        label,
        seed,
    })
}

/// Phoneme voiced in each video frame, read back from the dominant STFT bin.
/// `None` where the dominant bin is not a phoneme tone.
pub fn decode_audio_schedule(sample: &AVSample) -> Result<Vec<Option<u16>>> {
    let spec = crate::features::stft_spectrogram(&sample.waveform)?;
    let vocab = sample.transcript.vocab();
    Ok((0..sample.frames)
        .map(|t| {
            let row = spec.frames.row(4 * t);
            let (bin, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
            phoneme_for_bin(bin, vocab)
        })
        .collect())
}

/// Phoneme whose projection is nearest to each video row.
pub fn decode_video_schedule(sample: &AVSample) -> Vec<u16> {
    let vocab = sample.transcript.vocab();
    let dim = sample.video_dim;
    let table = projection_table(vocab, dim);
    (0..sample.frames)
        .map(|t| {
            let row = sample.video_row(t);
            (0..vocab)
                .map(|id| {
                    let d: f64 = table[id * dim..(id + 1) * dim]
                        .iter()
                        .zip(row)
                        .map(|(a, &b)| (a - b as f64).powi(2))
                        .sum();
                    (id as u16, d)
                })
                .fold((0u16, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    /// `[audio_fake, video_fake]` as 0/1.
    pub label: [u8; 2],
    pub frames: usize,
    pub split: Split,
}

impl ManifestEntry {
    pub fn dual_label(&self) -> DualLabel {
        DualLabel::new(self.label[0] != 0, self.label[1] != 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub spec: CorpusSpec,
    pub samples: Vec<ManifestEntry>,
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<AVSample>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&AVSample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .zip(&self.splits)
                .map(|(s, split)| ManifestEntry {
                    id: s.sample_id.clone(),
                    path: sample_path(&s.sample_id),
                    label: [s.label.audio_fake as u8, s.label.video_fake as u8],
                    frames: s.frames,
                    split: *split,
                })
                .collect(),
        }
    }

    /// Load every sample listed in `manifest.json` under `dir`.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest = read_manifest(dir)?;
        let samples = par::map_indexed(Execution::Parallel, &manifest.samples, |_, e| {
            let s = read_sample(&dir.join(&e.path))?;
            if s.sample_id != e.id || s.label != e.dual_label() || s.frames != e.frames {
                return Err(AvdfError::Corrupt {
                    path: dir.join(&e.path),
                    reason: "sample disagrees with manifest".into(),
                });
            }
            Ok(s)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            spec: manifest.spec,
            splits: manifest.samples.iter().map(|e| e.split).collect(),
            samples,
        })
    }
}

fn sample_path(id: &str) -> String {
    format!("samples/{id}.avs")
}

/// Split assignment: a seeded shuffle, the first `round(n * test_fraction)`
/// indices go to test.
pub fn assign_splits(n: usize, test_fraction: f64, master_seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(master_seed, 9));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut splits = vec![Split::Train; n];
    for &i in order.iter().take(n_test) {
        splits[i] = Split::Test;
    }
    splits
}

/// Build the whole corpus in memory. A pure function of `spec`.
pub fn synthesize_corpus(spec: &CorpusSpec, exec: Execution) -> Result<Corpus> {
    spec.validate()?;
    let mut jobs = Vec::with_capacity(spec.counts.total());
    for class in LabelClass::ALL {
        for i in 0..spec.counts.get(class) {
            jobs.push((class, i));
        }
    }
    let samples = par::map_indexed(exec, &jobs, |index, &(class, i)| {
        let seed = derive_seed(spec.master_seed, index as u64);
        let mut rng = stream(seed, 0);
        let frames = rng.gen_range(spec.min_frames..=spec.max_frames);
        let transcript = random_transcript(&mut rng, frames, spec.n_phonemes)?;
        synthesize_sample(
            format!("{class}-{i:05}"),
            &transcript,
            class.label(),
            frames,
            spec,
            seed,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let splits = assign_splits(samples.len(), spec.test_fraction, spec.master_seed);
    Ok(Corpus {
        spec: spec.clone(),
        samples,
        splits,
    })
}

/// Synthesize the corpus and write it under `dir` (`manifest.json` plus
/// `samples/*.avs`). Returns the manifest path.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<PathBuf> {
    let corpus = synthesize_corpus(spec, Execution::Parallel)?;
    write_corpus(&corpus, dir)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| AvdfError::io(&samples_dir, e))?;
    par::map_indexed(Execution::Parallel, &corpus.samples, |_, s| {
        write_sample(s, &dir.join(sample_path(&s.sample_id)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&corpus.manifest())?;
    write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| AvdfError::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_slice(&bytes).map_err(|e| AvdfError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(AvdfError::Format {
            path,
            reason: format!("manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// Write via a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| AvdfError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| AvdfError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| AvdfError::io(&tmp, e))?;
    f.sync_all().map_err(|e| AvdfError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AvdfError::io(path, e))
}

/// Serialise a sample into the `.avs` layout:
///
/// ```text
/// "AVDS" | version u8 | frames u32 | vocab u32 | video_dim u32 |
/// transcript_len u32 | label_bits u32 | id_len u32 | seed u64 | id bytes |
/// waveform f32[frames*640] | video f32[frames*video_dim] | transcript u16[len]
/// ```
/// All integers and floats little-endian.
pub fn encode_sample(s: &AVSample) -> Vec<u8> {
    let id = s.sample_id.as_bytes();
    let mut out = Vec::with_capacity(
        37 + id.len() + 4 * (s.waveform.len() + s.video_rows.len()) + 2 * s.transcript.len(),
    );
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for v in [
        s.frames as u32,
        s.transcript.vocab() as u32,
        s.video_dim as u32,
        s.transcript.len() as u32,
        s.label.bits(),
        id.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.extend_from_slice(id);
    for v in s.waveform.iter().chain(&s.video_rows) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in s.transcript.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<AVSample> {
    let format = |reason: &str| AvdfError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let corrupt = |reason: String| AvdfError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(format("bad magic bytes"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(format(&format!("unsupported version {}", bytes[4])));
    }
    const HEADER: usize = 5 + 6 * 4 + 8;
    if bytes.len() < HEADER {
        return Err(corrupt("truncated header".into()));
    }
    let u32_at = |i: usize| {
        let o = 5 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let (frames, vocab, video_dim, tlen, bits, id_len) =
        (u32_at(0), u32_at(1), u32_at(2), u32_at(3), u32_at(4), u32_at(5));
    let seed = u64::from_le_bytes(bytes[29..37].try_into().expect("8 bytes"));
    let label = DualLabel::from_bits(bits as u32).ok_or_else(|| corrupt(format!("label bits {bits}")))?;

    let n_wave = frames
        .checked_mul(SAMPLES_PER_FRAME)
        .ok_or_else(|| corrupt("frame count overflow".into()))?;
    let n_video = frames
        .checked_mul(video_dim)
        .ok_or_else(|| corrupt("video size overflow".into()))?;
    let expected = HEADER as u128 + id_len as u128 + 4 * (n_wave + n_video) as u128 + 2 * tlen as u128;
    if bytes.len() as u128 != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut pos = HEADER;
    let sample_id = std::str::from_utf8(&bytes[pos..pos + id_len])
        .map_err(|e| corrupt(format!("sample id: {e}")))?
        .to_string();
    pos += id_len;
    let mut floats = |n: usize| {
        let v: Vec<f32> = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * n;
        v
    };
    let waveform = floats(n_wave);
    let video_rows = floats(n_video);
    let ids = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let transcript = PhonemeSeq::new(ids, vocab).map_err(|e| corrupt(e.to_string()))?;
    let sample = AVSample {
        sample_id,
        waveform,
        video_rows,
        frames,
        video_dim,
        transcript,
        label,
        seed,
    };
    sample.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(sample)
}

pub fn write_sample(sample: &AVSample, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sample(sample))
}

pub fn read_sample(path: &Path) -> Result<AVSample> {
    let bytes = fs::read(path).map_err(|e| AvdfError::io(path, e))?;
    decode_sample(&bytes, path)
}
