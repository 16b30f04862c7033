//! Model-ready samples: cached front-end inputs plus labels and transcripts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{derive_seed, AVSample, DualLabel, LabelClass};
use crate::error::Result;
use crate::features::{FrontendConfig, SampleFeatures};
use crate::par::{map_indexed, Execution};

/// One clip with its feature matrices computed once up front.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub label: DualLabel,
    pub transcript: Vec<u16>,
    pub features: SampleFeatures,
}

impl PreparedSample {
    pub fn from_sample(sample: &AVSample, cfg: &FrontendConfig) -> Result<Self> {
        Ok(PreparedSample {
            id: sample.sample_id.clone(),
            label: sample.label,
            transcript: sample.transcript.ids().to_vec(),
            features: SampleFeatures::from_sample(sample, cfg)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }
}

pub fn prepare_samples(
    samples: &[&AVSample],
    cfg: &FrontendConfig,
    exec: Execution,
) -> Result<Vec<PreparedSample>> {
    map_indexed(exec, samples, |_, s| PreparedSample::from_sample(s, cfg))
        .into_iter()
        .collect()
}

/// Move a class-stratified `fraction` of `samples` into a held-out
/// validation set. The choice depends only on `seed` and the input order.
pub fn split_validation(
    samples: Vec<PreparedSample>,
    fraction: f64,
    seed: u64,
) -> (Vec<PreparedSample>, Vec<PreparedSample>) {
    let mut held_out = vec![false; samples.len()];
    for class in LabelClass::ALL {
        let mut members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label.class() == class)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class.label().bits() as u64));
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * fraction).round() as usize;
        for &i in &members[..take] {
            held_out[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in samples.into_iter().zip(held_out) {
        if h {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

/// Samples whose audio and video are both real.
pub fn real_only(samples: &[PreparedSample]) -> Vec<PreparedSample> {
    samples
        .iter()
        .filter(|s| s.label == DualLabel::REAL)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn dummy(i: usize, label: DualLabel) -> PreparedSample {
        PreparedSample {
            id: format!("s{i}"),
            label,
            transcript: vec![0],
            features: SampleFeatures {
                audio: Matrix::zeros(2, 1),
                video: Matrix::zeros(2, 1),
            },
        }
    }

    #[test]
    fn validation_split_is_stratified_and_disjoint() {
        let samples: Vec<_> = (0..80)
            .map(|i| dummy(i, DualLabel::from_bits((i % 4) as u32).unwrap()))
            .collect();
        let (train, val) = split_validation(samples, 0.1, 3);
        assert_eq!(train.len() + val.len(), 80);
        assert_eq!(val.len(), 8);
        for class in LabelClass::ALL {
            assert_eq!(val.iter().filter(|s| s.label.class() == class).count(), 2);
        }
        let (_, again) = split_validation(
            (0..80).map(|i| dummy(i, DualLabel::from_bits((i % 4) as u32).unwrap())).collect(),
            0.1,
            3,
        );
        let ids = |v: &[PreparedSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&val), ids(&again));
        assert!(val.iter().all(|v| train.iter().all(|t| t.id != v.id)));
    }
}
