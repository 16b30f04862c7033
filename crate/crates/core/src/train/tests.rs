use super::*;
use crate::corpus::{synthesize_corpus, ClassCounts, CorpusSpec, DualLabel};
use crate::dataset::{prepare_samples, real_only};
use crate::features::FrontendConfig;
use crate::model::ModelConfig;

fn tiny_data() -> Vec<PreparedSample> {
    let spec = CorpusSpec {
        counts: ClassCounts::uniform(3),
        min_frames: 6,
        max_frames: 8,
        n_phonemes: 6,
        video_dim: 8,
        ..CorpusSpec::default()
    };
    let corpus = synthesize_corpus(&spec, Execution::Sequential).unwrap();
    let refs: Vec<_> = corpus.samples.iter().collect();
    prepare_samples(&refs, &FrontendConfig::default(), Execution::Sequential).unwrap()
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        layers_audio_enc: 1,
        layers_video_enc: 1,
        layers_joint_dec: 1,
        layers_fcd: 1,
        layers_tam: 1,
        n_phonemes: 6,
        video_dim: 8,
        ..ModelConfig::desk()
    };
    Model::new(cfg, seed).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_steps: 6,
        eval_every: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn dropout_never_removes_both_and_hits_one_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 30_000;
    let mut audio_dropped = 0;
    for _ in 0..n {
        let p = draw_presence(0.5, &mut rng);
        assert!(p.audio || p.video);
        audio_dropped += usize::from(!p.audio);
    }
    let frac = audio_dropped as f64 / n as f64;
    assert!((frac - 1.0 / 3.0).abs() < 0.01, "{frac}");
    assert_eq!(draw_presence(0.0, &mut rng), PresenceMask::BOTH);
}

#[test]
fn applied_dropout_zeroes_the_dropped_stream() {
    let data = tiny_data();
    let feats: Vec<_> = data.iter().map(|s| s.features.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = apply_modality_dropout(&feats, 0.5, &mut rng).unwrap();
    for ((f, p, mask), orig) in out.iter().zip(&feats) {
        assert_eq!(mask.audio_masked, !p.audio);
        assert_eq!(mask.video_masked, !p.video);
        if p.audio {
            assert_eq!(f.audio, orig.audio);
        } else {
            assert!(f.audio.as_slice().iter().all(|&x| x == 0.0));
        }
        if !p.video {
            assert!(f.video.as_slice().iter().all(|&x| x == 0.0));
        }
    }
    assert!(apply_modality_dropout(&feats, 0.7, &mut rng).is_err());
}

#[test]
fn batches_cover_each_epoch_exactly_once() {
    let n = 10;
    let mut seen = Vec::new();
    for step in 0..5 {
        seen.extend(batch_indices(4, step, 2, n));
    }
    let mut sorted = seen.clone();
    sorted.sort();
    assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    assert_eq!(batch_indices(4, 3, 2, n), batch_indices(4, 3, 2, n));
    // a batch may straddle two epochs
    assert_eq!(batch_indices(4, 1, 7, n).len(), 7);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.insert("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
    let mut grads = ParamGrads::empty(1);
    grads.accumulate(id, &Matrix::from_vec(1, 2, vec![0.3, -2.0]).unwrap());
    let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::desk() };
    let mut adam = Adam::new(&store);
    adam.update(&mut store, &grads, &cfg);
    let w = store.get(id).as_slice();
    assert!((w[0] - 0.9).abs() < 1e-6);
    assert!((w[1] + 0.9).abs() < 1e-6);
}

#[test]
fn one_step_lowers_the_batch_loss() {
    let data = tiny_data();
    let reals = real_only(&data);
    let cfg = TrainConfig { batch_size: reals.len(), learning_rate: 1e-3, ..TrainConfig::desk() };
    let mut state = TrainState::new(Stage::Avsr, tiny_model(1));
    let first = train_step(&mut state, &reals, &cfg, Execution::Parallel).unwrap();
    let mut probe = state.clone();
    let second = train_step(&mut probe, &reals, &cfg, Execution::Parallel).unwrap();
    assert!(second.loss < first.loss, "{} -> {}", first.loss, second.loss);

    let cfg = TrainConfig { batch_size: data.len(), modality_dropout: 0.0, ..cfg };
    let mut state = TrainState::new(Stage::Detection, tiny_model(2));
    let first = train_step(&mut state, &data, &cfg, Execution::Parallel).unwrap();
    let second = train_step(&mut state, &data, &cfg, Execution::Parallel).unwrap();
    assert!(second.loss < first.loss, "{} -> {}", first.loss, second.loss);
}

#[test]
fn detection_gradient_matches_finite_differences() {
    let data = tiny_data();
    let model = tiny_model(3);
    let obj = DetectionObjective { ce_weight: 0.7, aux_ctc_weight: 0.5 };
    let sample = data.iter().find(|s| s.label == DualLabel::REAL).unwrap();
    for presence in [PresenceMask::BOTH, PresenceMask::VIDEO_ONLY] {
        let (_, grads) = detection_sample_grad(&model, sample, presence, obj, 0).unwrap();
        for name in ["dlc.mlp_p.out.w", "mca.w", "joint.proj.w", "video_encoder.0.attn.q.w"] {
            let id = model.params.id(name).unwrap_or_else(|| panic!("{name}"));
            let analytic = grads.get(id).map(|g| g.as_slice()[1]).unwrap_or(0.0);
            let h = 1e-5;
            let mut plus = model.clone();
            plus.params.get_mut(id).as_mut_slice()[1] += h;
            let mut minus = model.clone();
            minus.params.get_mut(id).as_mut_slice()[1] -= h;
            let lp = detection_sample_loss(&plus, sample, presence, obj, 0).unwrap().total;
            let lm = detection_sample_loss(&minus, sample, presence, obj, 0).unwrap().total;
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 + 1e-4 * numeric.abs(),
                "{name} {presence:?}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn frozen_backbone_stays_put() {
    let data = tiny_data();
    let cfg = TrainConfig { freeze_backbone: true, ..tiny_cfg() };
    let mut state = TrainState::new(Stage::Detection, tiny_model(4));
    let before = state.model.clone();
    train_step(&mut state, &data, &cfg, Execution::Sequential).unwrap();
    for (id, name, value) in state.model.params.iter() {
        let unchanged = value == before.params.get(id);
        // the transcription head takes no part in detection
        let expected = Model::is_backbone(name) || name.starts_with("avsr_head");
        assert_eq!(unchanged, expected, "{name}");
    }
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let run = |exec| {
        let mut state = TrainState::new(Stage::Detection, tiny_model(5));
        for _ in 0..3 {
            train_step(&mut state, &data, &cfg, exec).unwrap();
        }
        state.model.params
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn finetune_logs_are_reproducible_and_track_the_best() {
    let data = tiny_data();
    let (train, val) = crate::dataset::split_validation(data.clone(), 0.34, 0);
    let cfg = tiny_cfg();
    let run = || {
        let mut state = TrainState::new(Stage::Detection, tiny_model(6));
        let mut log = TrainLog::in_memory();
        let hist = finetune_detection(&mut state, &train, &val, Some(&data), &cfg, Execution::Parallel, &mut log)
            .unwrap();
        (state, log.lines().to_vec(), hist)
    };
    let (state, lines, hist) = run();
    assert_eq!(lines, run().1);
    assert_eq!(hist.len(), 2);
    assert_eq!(lines.len(), 6 + 2);
    let es = state.early_stop.as_ref().unwrap();
    assert!(es.best_step == 3 || es.best_step == 6);
    assert_eq!(state.best_model().params, es.best_params);
    for l in &lines {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}

#[test]
fn pretraining_rejects_fake_clips_and_empty_sets() {
    let data = tiny_data();
    let cfg = tiny_cfg();
    let mut state = TrainState::new(Stage::Avsr, tiny_model(7));
    let mut log = TrainLog::in_memory();
    let err = pretrain_avsr(&mut state, &data, &[], &cfg, Execution::Sequential, &mut log).unwrap_err();
    assert!(matches!(err, AvdfError::InvalidInput(_)));
    let err = pretrain_avsr(&mut state, &[], &[], &cfg, Execution::Sequential, &mut log).unwrap_err();
    assert!(matches!(err, AvdfError::InvalidInput(_)));

    let reals = real_only(&data);
    pretrain_avsr(&mut state, &reals, &reals, &cfg, Execution::Sequential, &mut log).unwrap();
    assert_eq!(state.step, cfg.max_steps);
    assert!(log.lines().iter().any(|l| l.contains("val_per")));
}

#[test]
fn non_finite_parameters_surface_as_numeric_errors() {
    let data = tiny_data();
    let mut model = tiny_model(8);
    let id = model.params.id("dlc.mlp_y.out.w").unwrap();
    model.params.get_mut(id).as_mut_slice()[0] = f64::NAN;
    let mut state = TrainState::new(Stage::Detection, model);
    let err = train_step(&mut state, &data, &tiny_cfg(), Execution::Sequential).unwrap_err();
    assert!(matches!(err, AvdfError::Numeric(_)), "{err:?}");
}
