use avdf_core::checkpoint::{self, Dtype};
use avdf_core::corpus::{generate_corpus, ClassCounts, Corpus, CorpusSpec};
use avdf_core::eval::SCENARIOS;
use avdf_core::model::{Model, ModelConfig};
use avdf_core::par::Execution;
use avdf_core::pipeline::{detector_init, run_pipeline, PipelineConfig, PreparedCorpus};
use avdf_core::train::{train_step, Stage, TrainConfig, TrainLog, TrainState};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        layers_audio_enc: 1,
        layers_video_enc: 1,
        layers_joint_dec: 1,
        layers_fcd: 1,
        layers_tam: 1,
        n_phonemes: 10,
        video_dim: 16,
        ..ModelConfig::desk()
    };
    cfg.pretrain.max_steps = 10;
    cfg.finetune.max_steps = 20;
    cfg.finetune.eval_every = 10;
    cfg.val_fraction = 0.2;
    cfg
}

fn small_corpus(dir: &std::path::Path) -> Corpus {
    let spec = CorpusSpec {
        counts: ClassCounts::uniform(10),
        n_phonemes: 10,
        video_dim: 16,
        ..CorpusSpec::default()
    };
    generate_corpus(&spec, dir).unwrap();
    Corpus::load(dir).unwrap()
}

#[test]
fn corpus_on_disk_drives_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    assert_eq!(corpus.samples.len(), 40);
    let cfg = small_config();
    let data = PreparedCorpus::new(&corpus, &cfg.frontend, cfg.val_fraction, Execution::Parallel).unwrap();
    let mut log = TrainLog::in_memory();
    let out = run_pipeline(&data, &cfg, true, Execution::Parallel, &mut log).unwrap();
    assert!(out.pretrained.is_some());
    assert_eq!(out.results.len(), SCENARIOS.len());
    assert_eq!(out.history.len(), 2);
    for r in &out.results {
        assert_eq!(r.report.n_samples, data.test.len());
        let rows: u64 = r.report.count_confusion.iter().flatten().sum();
        assert_eq!(rows as usize, data.test.len());
    }
    assert!(log.lines().iter().any(|l| l.contains("\"val_per\"")));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(&dir.path().join("corpus"));
    let cfg = small_config();
    let data = PreparedCorpus::new(&corpus, &cfg.frontend, cfg.val_fraction, Execution::Sequential).unwrap();
    let tc = TrainConfig { seed: 5, ..cfg.finetune.clone() };
    let init = detector_init(&cfg, None).unwrap();

    let mut straight = TrainState::new(Stage::Detection, init.clone());
    let mut straight_records = Vec::new();
    for _ in 0..22 {
        straight_records.push(train_step(&mut straight, &data.train, &tc, Execution::Parallel).unwrap());
    }

    let mut first = TrainState::new(Stage::Detection, init);
    for _ in 0..11 {
        train_step(&mut first, &data.train, &tc, Execution::Parallel).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &first, Some(&tc), Dtype::F64, serde_json::Value::Null).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.train_config.as_ref(), Some(&tc));
    let mut resumed = loaded.state;
    assert_eq!(resumed.step, 11);
    for expected in &straight_records[11..] {
        let got = train_step(&mut resumed, &data.train, &tc, Execution::Sequential).unwrap();
        assert_eq!(&got, expected);
    }
    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn pretrained_and_fresh_differ_only_in_the_backbone() {
    let cfg = small_config();
    let pretrained = Model::new(cfg.model.clone(), 999).unwrap();
    let fresh = detector_init(&cfg, None).unwrap();
    let warm = detector_init(&cfg, Some(&pretrained)).unwrap();
    for ((_, name, f), (_, _, w)) in fresh.params.iter().zip(warm.params.iter()) {
        assert_eq!(f.shape(), w.shape());
        if Model::is_backbone(name) {
            assert_eq!(w, pretrained.params.by_name(name).unwrap(), "{name}");
            // biases and LayerNorm gains start equal whatever the seed
            if name.ends_with(".w") {
                assert_ne!(f, w, "{name}");
            }
        } else {
            assert_eq!(f, w, "{name}");
        }
    }
}

#[test]
fn mismatched_backbone_is_rejected() {
    let cfg = small_config();
    let other = Model::new(ModelConfig { d_model: 8, ..cfg.model.clone() }, 1).unwrap();
    assert!(matches!(
        detector_init(&cfg, Some(&other)),
        Err(avdf_core::AvdfError::Config(_))
    ));
}
