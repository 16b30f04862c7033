use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn avdf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avdf"))
        .current_dir(dir)
        .env_remove("AVDF_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn avdf")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.trim()).expect("JSON on stdout")
}

/// A small corpus plus a briefly trained detector, built once per test.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        ok(&avdf(p, &["gen-corpus", "--out", "corpus", "--per-class", "6", "--phonemes", "12", "--video-dim", "16"]));
        ok(&avdf(p, &["pretrain", "--corpus", "corpus", "--out", "pre.ckpt", "--steps", "4"]));
        ok(&avdf(p, &["finetune", "--corpus", "corpus", "--out", "det.ckpt", "--init", "pre.ckpt", "--steps", "6"]));
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn sample_file(&self) -> PathBuf {
        let mut files: Vec<_> = std::fs::read_dir(self.path().join("corpus/samples"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files.remove(0)
    }
}

#[test]
fn corpus_generation_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = |out: &'static str| ["gen-corpus", "--out", out, "--per-class", "3", "--seed", "4"];
    ok(&avdf(p, &args("a")));
    ok(&avdf(p, &args("b")));
    let read = |d: &str| std::fs::read(p.join(d).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let manifest: Value = serde_json::from_slice(&read("a")).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 12);
    assert_eq!(manifest["spec"]["master_seed"], 4);

    let out = Command::new(env!("CARGO_BIN_EXE_avdf"))
        .current_dir(p)
        .env("AVDF_SEED", "4")
        .env("RUST_LOG", "warn")
        .args(["gen-corpus", "--out", "c", "--per-class", "3"])
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read("a"), read("c"));
}

#[test]
fn training_evaluation_and_export() {
    let fx = Fixture::new();
    let p = fx.path();

    let all = ok(&avdf(p, &["eval", "--checkpoint", "det.ckpt", "--corpus", "corpus"]));
    let reports = all["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(all["schema_version"], 1);
    assert!(reports.iter().all(|r| r["schema_version"] == 1));

    let audio = ok(&avdf(
        p,
        &["eval", "--checkpoint", "det.ckpt", "--corpus", "corpus", "--scenario", "audio", "--csv", "s.csv"],
    ));
    let reports = audio["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0]["scenario"], "audio-only");
    assert!(reports[0]["vf1"].is_null());
    let csv = std::fs::read_to_string(p.join("s.csv")).unwrap();
    let n_test = reports[0]["n_samples"].as_u64().unwrap() as usize;
    assert_eq!(csv.lines().count(), n_test + 1);

    let sample = fx.sample_file();
    let video = ok(&avdf(
        p,
        &["predict", "--checkpoint", "det.ckpt", "--sample", sample.to_str().unwrap(), "--presence", "video"],
    ));
    assert!(video.get("p_audio_fake").is_none());
    assert!(video["p_video_fake"].is_number());
    let both = ok(&avdf(p, &["predict", "--checkpoint", "det.ckpt", "--sample", sample.to_str().unwrap()]));
    let probs: f64 = both["count_probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-9);

    ok(&avdf(p, &["export-embeddings", "--checkpoint", "det.ckpt", "--corpus", "corpus", "--out", "emb.csv"]));
    let emb = std::fs::read_to_string(p.join("emb.csv")).unwrap();
    let lines: Vec<&str> = emb.lines().collect();
    assert_eq!(lines.len(), n_test + 1);
    assert_eq!(lines[0].split(',').count(), 2 + 64);
    for row in &lines[1..] {
        let category = row.split(',').nth(1).unwrap();
        assert!(["RR", "RF", "FR", "FF"].contains(&category));
        assert_eq!(row.split(',').count(), 2 + 64);
    }
}

#[test]
fn resume_continues_the_step_counter() {
    let fx = Fixture::new();
    let p = fx.path();
    let out = ok(&avdf(
        p,
        &["finetune", "--corpus", "corpus", "--out", "det2.ckpt", "--resume", "det.ckpt", "--steps", "9", "--log", "det.jsonl"],
    ));
    assert_eq!(out["step"], 9);
    let log = std::fs::read_to_string(p.join("det.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["event"] == "step")
        .map(|v| v["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..9).collect::<Vec<_>>());
}

#[test]
fn ablation_covers_the_grid() {
    let fx = Fixture::new();
    let p = fx.path();
    let cfg = "[pretrain]\nmax_steps = 2\n[finetune]\nmax_steps = 3\n";
    std::fs::write(p.join("quick.toml"), cfg).unwrap();
    ok(&avdf(p, &["--config", "quick.toml", "ablate", "--corpus", "corpus", "--out", "abl.json", "--seeds", "7"]));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p.join("abl.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r["seed"] == 7));
    for r in rows {
        let av = &r["reports"][0];
        assert!(av["of1"].is_number() && av["cf1"].is_number() && av["wf1"].is_number());
    }
    assert_eq!(report["summary"].as_array().unwrap().len(), 6);
}

#[test]
fn paper_preset_sets_architecture_and_optimiser() {
    let fx = Fixture::new();
    let p = fx.path();
    ok(&avdf(p, &["--preset", "paper", "finetune", "--corpus", "corpus", "--out", "paper.ckpt", "--steps", "0"]));
    let ckpt = avdf_core::checkpoint::load(&p.join("paper.ckpt")).unwrap();
    let m = &ckpt.state.model.config;
    assert_eq!(
        (m.layers_audio_enc, m.layers_video_enc, m.layers_joint_dec, m.layers_fcd, m.layers_tam),
        (6, 6, 6, 1, 2)
    );
    let t = ckpt.train_config.unwrap();
    assert_eq!((t.learning_rate, t.batch_size), (1e-5, 12));
}

#[test]
fn exit_codes_classify_failures() {
    let fx = Fixture::new();
    let p = fx.path();
    let code = |args: &[&str]| avdf(p, args).status.code();

    assert_eq!(code(&["pretrain", "--corpus", "missing", "--out", "x.ckpt"]), Some(3));
    assert_eq!(code(&["predict", "--checkpoint", "det.ckpt", "--sample", "corpus/manifest.json"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "pre.ckpt", "--corpus", "corpus"]), Some(2));
    std::fs::write(p.join("bad.toml"), "[train]\nlr = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "eval", "--checkpoint", "det.ckpt", "--corpus", "corpus"]), Some(2));
    assert_eq!(code(&["finetune", "--corpus", "corpus", "--out", "y.ckpt", "--rho", "0.9"]), Some(2));
    assert_eq!(code(&["frobnicate"]), Some(2));

    // a poisoned checkpoint makes training blow up numerically
    let mut ckpt = avdf_core::checkpoint::load(&p.join("det.ckpt")).unwrap();
    let id = ckpt.state.model.params.id("dlc.mlp_y.out.w").unwrap();
    ckpt.state.model.params.get_mut(id).as_mut_slice()[0] = f64::NAN;
    avdf_core::checkpoint::save(
        &p.join("nan.ckpt"),
        &ckpt.state,
        ckpt.train_config.as_ref(),
        avdf_core::checkpoint::Dtype::F64,
        ckpt.metadata,
    )
    .unwrap();
    assert_eq!(
        code(&["finetune", "--corpus", "corpus", "--out", "z.ckpt", "--resume", "nan.ckpt", "--steps", "8"]),
        Some(4)
    );
}
