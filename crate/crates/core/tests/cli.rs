//! The `robin` binary: outputs, run records and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use robin::container::{self, Array};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_robin")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Synthetic data plus a briefly trained stage-1 checkpoint.
fn trained(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["synthdata", "--count", "4", "--seed", "2", "--out", s(&data)]);
    ok(&["train", "--manifest", s(&data.join("manifest.jsonl")), "--steps", "5", "--out", s(&dir.join("run"))]);
    dir.join("run/checkpoint.bin")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&["train", "--steps", "-1", "--manifest", "m", "--out", "o"]).0, 1);
    assert_eq!(code(&["generate"]).0, 1);
    assert_eq!(code(&["nonsense"]).0, 1);
    assert_eq!(code(&["--config", "preset:huge", "synthdata", "--out", "x"]).0, 1);
    assert_eq!(code(&["--help"]).0, 0);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let run = ckpt.parent().unwrap();
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 5);
    let cfg = robin::config::Config::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.train.steps, 5);
}

#[test]
fn generate_outputs_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("gen");
    ok(&["generate", "--checkpoint", s(&ckpt), "--prompt", "soft rain piano", "--patches", "3", "--seed", "4", "--out", s(&out)]);
    let latents = container::read(&out.join("latents.bin")).unwrap();
    assert_eq!(latents.shape, vec![12, 8]);
    let wave = container::read(&out.join("waveform.bin")).unwrap();
    assert_eq!(wave.shape, vec![12 * 8]);
    let run = json(&out.join("run.json"));
    assert_eq!(run["seed"], 4);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(run["prompt"], "soft rain piano");
    let timings = json(&out.join("timings.json"));
    assert_eq!(timings["per_patch_ms"].as_array().unwrap().len(), 3);
    assert_eq!(timings["config_hash"], run["config_hash"]);
}

#[test]
fn video_only_uses_fallback_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synthdata", "--count", "2", "--seed", "2", "--out", s(&data)]);
    let vdata = dir.path().join("vdata");
    ok(&["synthdata", "--mode", "text_video", "--count", "2", "--seed", "2", "--out", s(&vdata)]);
    ok(&["train", "--manifest", s(&data.join("manifest.jsonl")), "--steps", "2", "--out", s(&dir.path().join("s1"))]);
    let s1 = dir.path().join("s1/checkpoint.bin");
    ok(&[
        "train", "--manifest", s(&vdata.join("manifest.jsonl")), "--stage", "2", "--init", s(&s1), "--steps", "2", "--out",
        s(&dir.path().join("s2")),
    ]);
    let video = vdata.join("video/ex0000.bin");
    let out = dir.path().join("gen");
    ok(&["generate", "--checkpoint", s(&dir.path().join("s2/checkpoint.bin")), "--video", s(&video), "--patches", "2", "--out", s(&out)]);
    assert_eq!(json(&out.join("run.json"))["prompt"], robin::cli::FALLBACK_PROMPT);
}

#[test]
fn incompatible_checkpoint_names_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let cfg = dir.path().join("wide.toml");
    std::fs::write(&cfg, "[model]\nd = 64\n").unwrap();
    let (c, err) = code(&["--config", s(&cfg), "generate", "--checkpoint", s(&ckpt), "--prompt", "x", "--out", s(&dir.path().join("g"))]);
    assert_eq!(c, 2);
    let arch = robin::checkpoint::Checkpoint::load(&ckpt).unwrap().arch_hash();
    let wide = robin::config::Config::load(&cfg).unwrap().arch_hash();
    assert!(err.contains(&arch) && err.contains(&wide), "{err}");
}

#[test]
fn stage_mismatches_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let vdata = dir.path().join("v");
    ok(&["synthdata", "--mode", "text_video", "--count", "2", "--out", s(&vdata)]);
    let (c, err) = code(&["train", "--manifest", s(&vdata.join("manifest.jsonl")), "--steps", "1", "--out", s(&dir.path().join("r"))]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("stage 1"), "{err}");
}

#[test]
fn eval_writes_metrics_and_judge_means() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = robin::Rng::new(3);
    for name in ["real", "fake", "paired"] {
        let a = Array::new(vec![12, 4], rng.normals(48)).unwrap();
        container::write(&dir.path().join(format!("{name}.bin")), &a).unwrap();
    }
    let mut judges = Vec::new();
    for (i, score) in [2, 3, 4].iter().enumerate() {
        let mut m = serde_json::Map::new();
        m.insert("global_analysis".into(), "fits".into());
        for a in robin::eval::AXES {
            m.insert(a.into(), (*score).into());
        }
        for f in ["video_theme", "audio_theme", "video_emotion", "audio_emotion"] {
            m.insert(f.into(), "warm".into());
        }
        let p = dir.path().join(format!("j{i}.json"));
        std::fs::write(&p, serde_json::Value::Object(m).to_string()).unwrap();
        judges.push(p);
    }
    let out = dir.path().join("eval");
    let d = dir.path();
    let mut args = vec![
        "eval".to_string(), "--real".into(), s(&d.join("real.bin")).into(), "--fake".into(), s(&d.join("fake.bin")).into(),
        "--paired".into(), s(&d.join("paired.bin")).into(), "--out".into(), s(&out).into(), "--judge".into(),
    ];
    args.extend(judges.iter().map(|p| s(p).to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    let metrics = json(&out.join("metrics.json"));
    let mut keys: Vec<&String> = metrics.as_object().unwrap().keys().collect();
    keys.sort();
    let mut want: Vec<&str> = robin::eval::REPORT_KEYS.to_vec();
    want.sort_unstable();
    assert_eq!(keys, want);
    assert!(metrics["ib"].is_number());
    assert_eq!(json(&out.join("judge.json"))["rhythmic_sync"], 3.0);
    assert!(json(&out.join("eval_run.json"))["extractors"].is_object());
}

#[test]
fn malformed_judges_are_listed_per_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, "{\"rhythmic_sync\": 0}").unwrap();
    std::fs::write(&b, "not json").unwrap();
    let (c, err) = code(&["eval", "--judge", s(&a), s(&b), "--out", s(&dir.path().join("e"))]);
    assert_eq!(c, 2);
    assert!(err.contains("a.json: rhythmic_sync:"), "{err}");
    assert!(err.contains("b.json: json:"), "{err}");
}

#[test]
fn bench_reports_every_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("bench");
    let table = ok(&["bench", "--checkpoint", s(&ckpt), "--euler-steps", "2,4", "--repeats", "2", "--patches", "2", "--out", s(&out)]);
    assert!(table.contains("euler_steps"));
    let b = json(&out.join("bench.json"));
    assert_eq!(b["rows"].as_array().unwrap().len(), 2);
    assert_eq!(b["rows"][1]["euler_steps"], 4);
    assert_eq!(code(&["bench", "--checkpoint", s(&ckpt), "--euler-steps", "0", "--out", s(&out)]).0, 1);
}

#[test]
fn bad_manifest_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synthdata", "--count", "2", "--out", s(&data)]);
    let m = data.join("manifest.jsonl");
    let mut text = std::fs::read_to_string(&m).unwrap();
    text.push_str("{\"id\": \"broken\"}\n");
    std::fs::write(&m, text).unwrap();
    let (c, err) = code(&["train", "--manifest", s(&m), "--steps", "1", "--out", s(&dir.path().join("r"))]);
    assert_eq!(c, 2);
    assert!(err.contains("manifest.jsonl:3:"), "{err}");
}
