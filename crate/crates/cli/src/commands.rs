use std::path::{Path, PathBuf};

use anyhow::Context;
use avdf_core::checkpoint::{self, Dtype};
use avdf_core::corpus::{generate_corpus, read_sample, write_atomic, Corpus, Split};
use avdf_core::dataset::{prepare_samples, real_only};
use avdf_core::eval::{evaluate_scenarios, SCENARIOS};
use avdf_core::features::{FrontendConfig, SampleFeatures};
use avdf_core::metrics::{scores_csv, REPORT_SCHEMA_VERSION};
use avdf_core::model::{Model, PresenceMask};
use avdf_core::par::Execution;
use avdf_core::pipeline::{detector_init, run_ablation, PreparedCorpus};
use avdf_core::train::{finetune_detection, pretrain_avsr, Stage, TrainConfig, TrainLog, TrainState};
use avdf_core::AvdfError;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{
    AblateArgs, Cli, Command, EvalArgs, ExportArgs, FinetuneArgs, GenCorpusArgs, PredictArgs,
    PresenceArg, PretrainArgs, ScenarioArg, SplitArg, TrainFlags,
};

struct Ctx {
    config: RunConfig,
    seed_override: bool,
    exec: Execution,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.corpus.master_seed = seed;
    }
    let ctx = Ctx {
        config,
        seed_override: cli.seed.is_some(),
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(ctx, a),
        Command::Pretrain(a) => pretrain(ctx, a),
        Command::Finetune(a) => finetune(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Predict(a) => predict(ctx, a),
        Command::Ablate(a) => ablate(ctx, a),
        Command::ExportEmbeddings(a) => export_embeddings(ctx, a),
    }
}

fn log_config(config: &RunConfig) {
    log::info!("resolved configuration:\n{}", config.to_toml());
}

fn config_json(config: &RunConfig) -> Value {
    serde_json::to_value(config).unwrap_or(Value::Null)
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

/// Record the corpus actually used; the model's input dimensions follow it.
fn adopt_corpus(config: &mut RunConfig, corpus: &Corpus) {
    config.corpus = corpus.spec.clone();
    config.model.n_phonemes = corpus.spec.n_phonemes;
    config.model.video_dim = corpus.spec.video_dim;
}

fn check_corpus_fits(model: &Model, corpus: &Corpus) -> anyhow::Result<()> {
    if model.config.n_phonemes != corpus.spec.n_phonemes || model.config.video_dim != corpus.spec.video_dim {
        return Err(AvdfError::Config(format!(
            "model expects {} phonemes and {}-dim video, corpus has {} and {}",
            model.config.n_phonemes, model.config.video_dim, corpus.spec.n_phonemes, corpus.spec.video_dim
        ))
        .into());
    }
    Ok(())
}

fn apply_train_flags(t: &mut TrainConfig, f: &TrainFlags) {
    if let Some(s) = f.steps {
        t.max_steps = s;
    }
    if let Some(lr) = f.lr {
        t.learning_rate = lr;
    }
    if let Some(b) = f.batch {
        t.batch_size = b;
    }
}

fn open_log(flags: &TrainFlags) -> anyhow::Result<(TrainLog, PathBuf)> {
    let path = flags.log.clone().unwrap_or_else(|| flags.out.with_extension("jsonl"));
    let log = if flags.resume.is_some() {
        TrainLog::append_to(&path)?
    } else {
        TrainLog::to_file(&path)?
    };
    Ok((log, path))
}

/// Load a resumable state, checking that it belongs to `stage` and to the
/// configured architecture.
fn resume_state(path: &Path, stage: Stage, config: &RunConfig) -> anyhow::Result<(TrainState, Option<u64>)> {
    let ckpt = checkpoint::load(path).with_context(|| format!("resuming from {}", path.display()))?;
    if ckpt.state.stage != stage {
        return Err(AvdfError::Config(format!("{} is a {} checkpoint, not {stage}", path.display(), ckpt.state.stage)).into());
    }
    if !ckpt.state.model.config.same_architecture(&config.model) {
        return Err(AvdfError::Config(format!("{} holds a different architecture", path.display())).into());
    }
    Ok((ckpt.state, ckpt.train_config.map(|t| t.seed)))
}

/// The frontend a checkpoint was trained with, if recorded.
fn checkpoint_frontend(metadata: &Value, fallback: FrontendConfig) -> FrontendConfig {
    serde_json::from_value(metadata["config"]["frontend"].clone()).unwrap_or(fallback)
}

fn gen_corpus(mut ctx: Ctx, a: GenCorpusArgs) -> anyhow::Result<()> {
    let c = &mut ctx.config.corpus;
    if let Some(n) = a.per_class {
        c.counts = avdf_core::corpus::ClassCounts::uniform(n);
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $( if let Some(v) = a.$flag { c.$field = v; } )* };
    }
    set!(min_frames => min_frames, max_frames => max_frames, phonemes => n_phonemes,
         video_dim => video_dim, noise_std => noise_std, correlation => correlation_strength,
         test_fraction => test_fraction);
    c.validate()?;
    log_config(&ctx.config);
    let manifest = generate_corpus(&ctx.config.corpus, &a.out)?;
    println!("{}", json!({"manifest": manifest, "samples": ctx.config.corpus.counts.total()}));
    Ok(())
}

fn pretrain(mut ctx: Ctx, a: PretrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.train.corpus)?;
    adopt_corpus(&mut ctx.config, &corpus);
    apply_train_flags(&mut ctx.config.pretrain, &a.train);
    let pipeline = ctx.config.pipeline();
    pipeline.validate()?;
    log_config(&ctx.config);

    let (init_seed, mut train_seed) = pipeline.stage_seeds(Stage::Avsr);
    let mut state = match &a.train.resume {
        Some(p) => {
            let (state, seed) = resume_state(p, Stage::Avsr, &ctx.config)?;
            train_seed = seed.unwrap_or(train_seed);
            state
        }
        None => TrainState::new(Stage::Avsr, Model::new(ctx.config.model.clone(), init_seed)?),
    };
    let data = PreparedCorpus::new(&corpus, &ctx.config.frontend, ctx.config.eval.val_fraction, ctx.exec)?;
    let reals = real_only(&data.train);
    let tc = TrainConfig { seed: train_seed, ..ctx.config.pretrain.clone() };
    let (mut log, log_path) = open_log(&a.train)?;
    pretrain_avsr(&mut state, &reals, &real_only(&data.val), &tc, ctx.exec, &mut log)?;
    let meta = json!({"config": config_json(&ctx.config), "corpus": a.train.corpus});
    checkpoint::save(&a.train.out, &state, Some(&tc), Dtype::F64, meta)?;
    println!("{}", json!({"checkpoint": a.train.out, "log": log_path, "step": state.step}));
    Ok(())
}

fn finetune(mut ctx: Ctx, a: FinetuneArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.train.corpus)?;
    adopt_corpus(&mut ctx.config, &corpus);
    apply_train_flags(&mut ctx.config.finetune, &a.train);
    if let Some(m) = a.mca {
        ctx.config.model.mca_mode = m;
    }
    if let Some(r) = a.rho {
        ctx.config.finetune.modality_dropout = r;
    }
    if a.freeze_backbone {
        ctx.config.finetune.freeze_backbone = true;
    }
    let pipeline = ctx.config.pipeline();
    pipeline.validate()?;
    log_config(&ctx.config);

    let (_, mut train_seed) = pipeline.stage_seeds(Stage::Detection);
    let mut state = match &a.train.resume {
        Some(p) => {
            let (mut state, seed) = resume_state(p, Stage::Detection, &ctx.config)?;
            train_seed = seed.unwrap_or(train_seed);
            state.model.config.mca_mode = ctx.config.model.mca_mode;
            state.stopped = false;
            state
        }
        None => {
            let pretrained = if a.init == "fresh" {
                None
            } else {
                let path = Path::new(&a.init);
                let (model, stage) = checkpoint::load_model(path, Some(&ctx.config.model))
                    .with_context(|| format!("loading pretrained backbone {}", path.display()))?;
                if stage != Stage::Avsr {
                    log::warn!("{} is a {stage} checkpoint; using its backbone anyway", path.display());
                }
                Some(model)
            };
            TrainState::new(Stage::Detection, detector_init(&pipeline, pretrained.as_ref())?)
        }
    };
    let data = PreparedCorpus::new(&corpus, &ctx.config.frontend, ctx.config.eval.val_fraction, ctx.exec)?;
    let tc = TrainConfig { seed: train_seed, ..ctx.config.finetune.clone() };
    let (mut log, log_path) = open_log(&a.train)?;
    let history = finetune_detection(&mut state, &data.train, &data.val, Some(&data.test), &tc, ctx.exec, &mut log)?;
    let meta = json!({"config": config_json(&ctx.config), "corpus": a.train.corpus, "init": a.init});
    checkpoint::save(&a.train.out, &state, Some(&tc), Dtype::F64, meta)?;
    println!(
        "{}",
        json!({
            "checkpoint": a.train.out,
            "log": log_path,
            "step": state.step,
            "best_step": state.early_stop.as_ref().map(|e| e.best_step),
            "evaluations": history.len(),
        })
    );
    Ok(())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    }
}

fn load_detector(path: &Path) -> anyhow::Result<(Model, Value)> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.state.stage != Stage::Detection {
        return Err(AvdfError::Config(format!("{} is not a detection checkpoint", path.display())).into());
    }
    Ok((ckpt.state.best_model(), ckpt.metadata))
}

fn eval(ctx: Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let (model, meta) = load_detector(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    check_corpus_fits(&model, &corpus)?;
    let frontend = checkpoint_frontend(&meta, ctx.config.frontend);
    let threshold = a.threshold.unwrap_or(ctx.config.eval.threshold);
    let scenarios: Vec<PresenceMask> = match a.scenario {
        ScenarioArg::All => SCENARIOS.to_vec(),
        ScenarioArg::Av => vec![PresenceMask::BOTH],
        ScenarioArg::Audio => vec![PresenceMask::AUDIO_ONLY],
        ScenarioArg::Video => vec![PresenceMask::VIDEO_ONLY],
    };
    let samples = prepare_samples(&corpus.split(split_of(a.split)), &frontend, ctx.exec)?;
    let results = evaluate_scenarios(&model, &samples, &scenarios, threshold, ctx.exec)?;
    let out = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "checkpoint": a.checkpoint,
        "corpus": a.corpus,
        "split": format!("{:?}", a.split).to_lowercase(),
        "threshold": threshold,
        "config": meta.get("config").cloned().unwrap_or_else(|| config_json(&ctx.config)),
        "reports": results.iter().map(|r| &r.report).collect::<Vec<_>>(),
    });
    if let Some(csv) = &a.csv {
        let scores: Vec<_> = results.iter().flat_map(|r| r.scores.iter().cloned()).collect();
        write_atomic(csv, scores_csv(&scores).as_bytes())?;
    }
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

fn predict(ctx: Ctx, a: PredictArgs) -> anyhow::Result<()> {
    let (model, meta) = load_detector(&a.checkpoint)?;
    let sample = read_sample(&a.sample)?;
    if sample.transcript.vocab() != model.config.n_phonemes || sample.video_dim != model.config.video_dim {
        return Err(AvdfError::Config("sample dimensions do not match the checkpoint".into()).into());
    }
    let presence = match a.presence {
        PresenceArg::Av => PresenceMask::BOTH,
        PresenceArg::Audio => PresenceMask::AUDIO_ONLY,
        PresenceArg::Video => PresenceMask::VIDEO_ONLY,
    };
    let features = SampleFeatures::from_sample(&sample, &checkpoint_frontend(&meta, ctx.config.frontend))?;
    let out = model.detect(&features, presence)?;
    let mut line = json!({
        "sample_id": sample.sample_id,
        "presence": presence.name(),
        "count_probs": out.count_probs,
        "fused_real_score": out.fused_real_score,
    });
    if presence.audio {
        line["p_audio_fake"] = json!(out.p_audio_fake);
    }
    if presence.video {
        line["p_video_fake"] = json!(out.p_video_fake);
    }
    println!("{line}");
    Ok(())
}

fn ablate(mut ctx: Ctx, a: AblateArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    adopt_corpus(&mut ctx.config, &corpus);
    if let Some(s) = a.seeds {
        ctx.config.ablate.seeds = s;
    } else if ctx.seed_override {
        ctx.config.ablate.seeds = vec![ctx.config.seed];
    }
    if let Some(m) = a.mca {
        ctx.config.ablate.mca_modes = m;
    }
    let pipeline = ctx.config.pipeline();
    pipeline.validate()?;
    log_config(&ctx.config);
    let data = PreparedCorpus::new(&corpus, &ctx.config.frontend, ctx.config.eval.val_fraction, ctx.exec)?;
    let mut log = match &a.log {
        Some(p) => TrainLog::to_file(p)?,
        None => TrainLog::in_memory(),
    };
    let report = run_ablation(&data, &pipeline, &ctx.config.ablate.seeds, &ctx.config.ablate.mca_modes, ctx.exec, &mut log)?;
    for s in &report.summary {
        log::info!(
            "mca={} pretrained={} seeds={} mean OF1 {:.4}",
            s.mca_mode, s.pretrained, s.seeds, s.mean_of1
        );
    }
    let mean = |on: bool| {
        let v: Vec<f64> = report.rows.iter().filter(|r| r.pretrained == on).map(|r| r.av_of1()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let out = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config_json(&ctx.config),
        "rows": report.rows,
        "summary": report.summary,
        "mean_of1_pretrained": mean(true),
        "mean_of1_fresh": mean(false),
    });
    write_json(&a.out, &out)?;
    println!("{}", json!({"report": a.out, "runs": report.rows.len()}));
    Ok(())
}

fn export_embeddings(ctx: Ctx, a: ExportArgs) -> anyhow::Result<()> {
    let (model, meta) = load_detector(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    check_corpus_fits(&model, &corpus)?;
    let frontend = checkpoint_frontend(&meta, ctx.config.frontend);
    let samples = prepare_samples(&corpus.split(split_of(a.split)), &frontend, ctx.exec)?;
    let d = model.config.d_model;
    let mut csv = String::from("sample_id,category");
    for i in 0..d {
        csv.push_str(&format!(",e{i}"));
    }
    csv.push('\n');
    let rows = avdf_core::par::map_indexed(ctx.exec, &samples, |_, s| {
        model.detect(&s.features, PresenceMask::BOTH).map(|o| o.embedding)
    });
    for (s, r) in samples.iter().zip(rows) {
        let emb = r?;
        csv.push_str(&format!("{},{}", s.id, s.label.class()));
        for x in emb {
            csv.push_str(&format!(",{x}"));
        }
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;
    println!("{}", json!({"embeddings": a.out, "rows": samples.len(), "width": d}));
    Ok(())
}
