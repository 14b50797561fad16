//! The `robin` command line.
//!
//! ```text
//! robin synthdata --mode text_only --count 8 --seed 7 --out data/
//! robin train     --manifest data/manifest.jsonl --stage 1 --steps 3000 --out run1/
//! robin train     --manifest v/manifest.jsonl --stage 2 --init run1/checkpoint.bin --out run2/
//! robin generate  --checkpoint run1/checkpoint.bin --prompt "calm piano" --patches 4 --out gen/
//! robin eval      --real gen/reference.bin --fake gen/generated.bin --judge j1.json --out eval/
//! robin bench     --checkpoint run1/checkpoint.bin --euler-steps 10,20,40 --repeats 3 --out bench/
//! ```
//!
//! Configuration comes from `--config <file.toml>` (or `preset:desk`,
//! `preset:paper`); flags override it. Commands that read a checkpoint fall
//! back to the `config.toml` written next to it by `train`.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or validation,
//! 3 internal failure. Log verbosity is read from `ROBIN_LOG`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::{short_hash, Checkpoint};
use crate::codec::Codec;
use crate::config::Config;
use crate::container::{self, Array};
use crate::data::{self, tokenize, Example, SynthMode, TextTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::eval::{aggregate_judges, evaluate, parse_judge, EmbeddingSet, EvalInputs};
use crate::generator::{generate, GenerationRequest, GenerationResult};
use crate::model::RobinModel;
use crate::trainer::{eval_loss, stage1_trainer, stage2_trainer, windowed_means};

/// Prompt used when only video is given.
pub const FALLBACK_PROMPT: &str = "Generate aligned music for the video";

#[derive(Debug, Parser)]
#[command(name = "robin", version, about = "Text/video-conditioned latent music generation")]
pub struct Cli {
    /// TOML config file, or `preset:desk` / `preset:paper`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset and its manifest.
    Synthdata(SynthArgs),
    /// Train stage 1 (text only) or stage 2 (video finetuning).
    Train(TrainArgs),
    /// Generate latents and a waveform from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated against reference samples; validate judge reports.
    Eval(EvalArgs),
    /// Time generation at several Euler step counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "text_only")]
    pub mode: String,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub stage: u8,
    /// Stage-1 checkpoint to finetune from (required for stage 2).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Replace every video feature by zeros (ablation control).
    #[arg(long)]
    pub zero_video: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Video features, a `[t, d_v]` container.
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Condition on examples from a manifest instead of a prompt.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Only this manifest example (default: all of them).
    #[arg(long)]
    pub example: Option<String>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub euler_steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Replace every text id by the null token (ablation).
    #[arg(long)]
    pub zero_text: bool,
    /// Replace video features by zeros (ablation).
    #[arg(long)]
    pub zero_video: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference samples, `[N, ...]` container.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Generated samples, paired row by row with `--real`.
    #[arg(long)]
    pub fake: Option<PathBuf>,
    /// External embeddings of the paired modality, `[N, D]`.
    #[arg(long)]
    pub paired: Option<PathBuf>,
    /// Judge responses, one JSON document per file.
    #[arg(long, num_args = 1..)]
    pub judge: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
    pub euler_steps: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 4)]
    pub patches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Errors are printed to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synthdata(a) => cmd_synthdata(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Generate(a) => cmd_generate(config, a),
        Command::Eval(a) => cmd_eval(config, a),
        Command::Bench(a) => cmd_bench(config, a),
    }
}

fn load_config(path: Option<&Path>, beside: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => match beside.and_then(Path::parent).map(|d| d.join("config.toml")) {
            Some(p) if p.is_file() => Config::load(&p),
            _ => Ok(Config::default()),
        },
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    write_text(path, &s)
}

pub fn cmd_synthdata(config: Option<&Path>, a: SynthArgs) -> Result<()> {
    let cfg = load_config(config, None)?;
    let mode: SynthMode = a.mode.parse()?;
    if a.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    mkdir(&a.out)?;
    let m = data::synth_task(a.seed, a.count, mode, cfg.synth_dims(), &a.out)?;
    println!("wrote {} records to {}", m.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

fn load_examples(manifest: &Path, cfg: &Config) -> Result<Vec<Example>> {
    data::load_manifest(manifest)?.load_examples(cfg.model.vocab)
}

pub fn cmd_train(config: Option<&Path>, a: TrainArgs) -> Result<()> {
    if a.stage == 2 && a.init.is_none() {
        return Err(Error::Usage("stage 2 requires --init <stage-1 checkpoint>".into()));
    }
    if !(1..=2).contains(&a.stage) {
        return Err(Error::Usage(format!("--stage must be 1 or 2, got {}", a.stage)));
    }
    let mut cfg = load_config(config, a.init.as_deref())?;
    cfg.train.stage = a.stage;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.patch_size {
        cfg.model.patch_size = p;
    }
    cfg.validate()?;
    let mut examples = load_examples(&a.manifest, &cfg)?;
    if a.zero_video {
        for e in &mut examples {
            e.video = e.video.as_ref().map(VideoFeatures::zeroed);
        }
    }
    let hash = cfg.hash();
    let mut trainer = match &a.init {
        None => stage1_trainer(examples, cfg.model, cfg.codec.k, cfg.train, cfg.flow)?,
        Some(p) => {
            let init = Checkpoint::load(p)?;
            init.check_compatible(&cfg.arch_hash(), &hash)?;
            stage2_trainer(examples, &init, cfg.train, cfg.flow)?
        }
    };
    let start = Instant::now();
    trainer.run()?;
    mkdir(&a.out)?;
    trainer.checkpoint(&hash).save(&a.out.join("checkpoint.bin"))?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    let mut log = String::new();
    for r in &trainer.log {
        log.push_str(&serde_json::to_string(r).expect("log serializes"));
        log.push('\n');
    }
    write_text(&a.out.join("train_log.jsonl"), &log)?;
    let windows = windowed_means(&trainer.losses, 50.min(trainer.losses.len().max(1)));
    let final_eval = eval_loss(&trainer.model, trainer.examples(), &cfg.flow, 4, cfg.train.seed)?;
    println!(
        "stage {} trained {} steps in {:.1}s; first/last window loss {:.4} / {:.4}; eval loss {:.4}; config {hash}",
        a.stage,
        trainer.step(),
        start.elapsed().as_secs_f64(),
        windows.first().copied().unwrap_or(f64::NAN),
        windows.last().copied().unwrap_or(f64::NAN),
        final_eval
    );
    Ok(())
}

/// Model, codec and config for a checkpoint, after the compatibility check.
fn open_checkpoint(config: Option<&Path>, ckpt: &Path, patch_size: Option<usize>) -> Result<(Config, RobinModel, Codec)> {
    let mut cfg = load_config(config, Some(ckpt))?;
    if let Some(p) = patch_size {
        cfg.model.patch_size = p;
    }
    cfg.validate()?;
    let c = Checkpoint::load(ckpt)?;
    c.check_compatible(&cfg.arch_hash(), &cfg.hash())?;
    let model = c.build_model()?;
    let codec = Codec::new(cfg.codec)?;
    Ok((cfg, model, codec))
}

fn read_video(path: &Path) -> Result<VideoFeatures> {
    let a = container::read(path)?;
    if a.shape.len() != 2 {
        return Err(Error::Data(format!("{}: video features must be [t, d_v]", path.display())));
    }
    VideoFeatures::new(a.data, a.shape[0], a.shape[1])
}

/// Content hash, so run records do not depend on where files live.
fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(short_hash(&bytes))
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn cmd_generate(config: Option<&Path>, a: GenerateArgs) -> Result<()> {
    let (cfg, model, codec) = open_checkpoint(config, &a.checkpoint, a.patch_size)?;
    let mut flow = cfg.flow;
    if let Some(s) = a.euler_steps {
        flow.euler_steps = s;
    }
    if let Some(s) = a.cfg_scale {
        flow.cfg_scale = s;
    }
    flow.validate()?;
    let p = cfg.model.patch_size;
    let default_patches = cfg.data.frames.div_ceil(p);
    let n_patches = a.patches.unwrap_or(default_patches);
    if n_patches == 0 {
        return Err(Error::Usage("--patches must be at least 1".into()));
    }
    mkdir(&a.out)?;
    let ablate = |text: TextTokens, video: Option<VideoFeatures>| {
        let text = if a.zero_text { text.zeroed() } else { text };
        let video = if a.zero_video { video.map(|v| v.zeroed()) } else { video };
        (text, video)
    };
    let base = json!({
        "checkpoint_sha": file_hash(&a.checkpoint)?,
        "config_hash": cfg.hash(),
        "arch_hash": cfg.arch_hash(),
        "seed": a.seed,
        "n_patches": n_patches,
        "patch_size": p,
        "euler_steps": flow.euler_steps,
        "cfg_scale": flow.cfg_scale,
        "zero_text": a.zero_text,
        "zero_video": a.zero_video,
    });

    if let Some(manifest) = &a.manifest {
        let mut examples = load_examples(manifest, &cfg)?;
        if let Some(id) = &a.example {
            examples.retain(|e| &e.id == id);
            if examples.is_empty() {
                return Err(Error::Usage(format!("no example `{id}` in {}", manifest.display())));
            }
        }
        let (mut gen, mut refs) = (Vec::new(), Vec::new());
        let mut timings = Vec::new();
        let mut ids = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            let (text, video) = ablate(ex.text.clone(), ex.video.clone());
            let req = GenerationRequest {
                text,
                video,
                n_patches,
                flow,
                seed: a.seed.wrapping_add(i as u64),
            };
            let r = generate(&model, &codec, &req)?;
            let mut reference = crate::codec::patchify(&ex.latents, p)?.data;
            reference.resize(r.patches.data.len(), 0.0);
            gen.extend_from_slice(&r.patches.data);
            refs.extend_from_slice(&reference);
            timings.push(r.per_patch_timings.iter().map(|d| ms(*d)).collect::<Vec<_>>());
            ids.push(ex.id.clone());
            if examples.len() == 1 {
                write_outputs(&a.out, &r)?;
            }
        }
        let frames = n_patches * p;
        let shape = vec![examples.len(), frames, model.k];
        container::write(&a.out.join("generated.bin"), &Array::new(shape.clone(), gen.clone())?)?;
        container::write(&a.out.join("reference.bin"), &Array::new(shape, refs.clone())?)?;
        let mae = gen.iter().zip(&refs).map(|(g, r)| (g - r).abs()).sum::<f64>() / gen.len() as f64;
        let mut run = base;
        run["manifest_sha"] = json!(file_hash(manifest)?);
        run["examples"] = json!(ids);
        run["latent_mae"] = json!(mae);
        write_json(&a.out.join("run.json"), &run)?;
        write_json(&a.out.join("timings.json"), &json!({
            "config_hash": cfg.hash(),
            "seed": a.seed,
            "per_patch_ms": timings,
        }))?;
        println!("generated {} examples; latent MAE vs reference {mae:.4}", examples.len());
        return Ok(());
    }

    let video = a.video.as_deref().map(read_video).transpose()?;
    let prompt = match (&a.prompt, &video) {
        (Some(p), _) => p.clone(),
        (None, Some(_)) => FALLBACK_PROMPT.to_string(),
        (None, None) => return Err(Error::Usage("give --prompt, --video or --manifest".into())),
    };
    let text = tokenize(&prompt, cfg.model.vocab)?;
    let (text, video) = ablate(text, video);
    let req = GenerationRequest {
        text: text.clone(),
        video,
        n_patches,
        flow,
        seed: a.seed,
    };
    let r = generate(&model, &codec, &req)?;
    write_outputs(&a.out, &r)?;
    let mut run = base;
    run["prompt"] = json!(prompt);
    run["text_ids"] = json!(text.ids);
    run["video_sha"] = json!(a.video.as_deref().map(file_hash).transpose()?);
    run["samples"] = json!(r.waveform.samples.len());
    write_json(&a.out.join("run.json"), &run)?;
    write_json(&a.out.join("timings.json"), &json!({
        "config_hash": cfg.hash(),
        "seed": a.seed,
        "per_patch_ms": r.per_patch_timings.iter().map(|d| ms(*d)).collect::<Vec<_>>(),
    }))?;
    println!("generated {} samples into {}", r.waveform.samples.len(), a.out.display());
    Ok(())
}

fn write_outputs(dir: &Path, r: &GenerationResult) -> Result<()> {
    let m = &r.patches;
    container::write(&dir.join("latents.bin"), &Array::new(vec![m.n * m.p, m.k], m.data.clone())?)?;
    container::write(
        &dir.join("waveform.bin"),
        &Array::new(vec![r.waveform.samples.len()], r.waveform.samples.clone())?,
    )
}

pub fn cmd_eval(config: Option<&Path>, a: EvalArgs) -> Result<()> {
    let cfg = load_config(config, None)?;
    // Judge files are validated first so a bad corpus writes nothing.
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for path in &a.judge {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match parse_judge(&text) {
            Ok(r) => reports.push(r),
            Err(Error::Validation(msgs)) => {
                for m in msgs {
                    failures.push(format!("{}: {m}", path.display()));
                }
            }
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("{f}");
        }
        return Err(Error::Validation(failures));
    }
    if a.real.is_none() && a.fake.is_none() && a.judge.is_empty() {
        return Err(Error::Usage("give --real and --fake, and/or --judge files".into()));
    }
    mkdir(&a.out)?;
    match (&a.real, &a.fake) {
        (Some(r), Some(f)) => {
            let real = EmbeddingSet::from_array(&container::read(r)?, "real")?;
            let fake = EmbeddingSet::from_array(&container::read(f)?, "fake")?;
            let paired = match &a.paired {
                Some(p) => Some(EmbeddingSet::from_array(&container::read(p)?, "paired")?),
                None => None,
            };
            let (report, extractors) = evaluate(
                &EvalInputs {
                    real: &real,
                    fake: &fake,
                    paired: paired.as_ref(),
                },
                &cfg.eval,
            )?;
            let v = serde_json::to_value(&report).expect("report serializes");
            write_json(&a.out.join("metrics.json"), &v)?;
            write_json(&a.out.join("eval_run.json"), &json!({
                "config_hash": cfg.hash(),
                "extractors": extractors.ids(),
                "kl_direction": "KL(reference || generated)",
                "density_k": cfg.eval.density_k,
                "is_splits": cfg.eval.is_splits,
            }))?;
            println!("{}", serde_json::to_string(&v).expect("report serializes"));
        }
        (None, None) => {}
        _ => return Err(Error::Usage("--real and --fake go together".into())),
    }
    if !reports.is_empty() {
        let means = aggregate_judges(&reports)?;
        write_json(&a.out.join("judge.json"), &means.to_json())?;
        println!("{}", means.to_json());
    }
    Ok(())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One bench row: wall times of `repeats` generations at one step count.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub euler_steps: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Mean wall time per patch position.
    pub per_patch_ms: Vec<f64>,
}

/// Times generation for each step count in `steps`, `repeats` times each,
/// after one untimed warmup run.
pub fn bench_rows(model: &RobinModel, codec: &Codec, cfg: &Config, steps: &[usize], repeats: usize, patches: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 || steps.is_empty() {
        return Err(Error::Usage("bench needs at least one step count and one repeat".into()));
    }
    let text = tokenize(FALLBACK_PROMPT, cfg.model.vocab)?;
    let video = model
        .has_video()
        .then(|| VideoFeatures::new(vec![0.0; cfg.data.video_frames * cfg.model.d_v], cfg.data.video_frames, cfg.model.d_v))
        .transpose()?;
    let request = |euler_steps| GenerationRequest {
        text: text.clone(),
        video: video.clone(),
        n_patches: patches,
        flow: crate::refiner::FlowConfig { euler_steps, ..cfg.flow },
        seed,
    };
    generate(model, codec, &request(steps[0]))?;
    steps
        .iter()
        .map(|&s| {
            let mut totals = Vec::with_capacity(repeats);
            let mut per_patch = vec![0.0; patches];
            for _ in 0..repeats {
                let start = Instant::now();
                let r = generate(model, codec, &request(s))?;
                totals.push(ms(start.elapsed()));
                for (acc, d) in per_patch.iter_mut().zip(&r.per_patch_timings) {
                    *acc += ms(*d) / repeats as f64;
                }
            }
            let mean = totals.iter().sum::<f64>() / repeats as f64;
            Ok(BenchRow {
                euler_steps: s,
                repeats,
                mean_ms: mean,
                median_ms: median(&mut totals),
                per_patch_ms: per_patch,
            })
        })
        .collect()
}

pub fn cmd_bench(config: Option<&Path>, a: BenchArgs) -> Result<()> {
    let (cfg, model, codec) = open_checkpoint(config, &a.checkpoint, None)?;
    if a.euler_steps.contains(&0) {
        return Err(Error::Usage("--euler-steps values must be positive".into()));
    }
    let rows = bench_rows(&model, &codec, &cfg, &a.euler_steps, a.repeats, a.patches, a.seed)?;
    println!("{:>11} {:>7} {:>10} {:>10} {:>12}", "euler_steps", "repeats", "mean_ms", "median_ms", "ms_per_step");
    for r in &rows {
        println!(
            "{:>11} {:>7} {:>10.2} {:>10.2} {:>12.3}",
            r.euler_steps,
            r.repeats,
            r.mean_ms,
            r.median_ms,
            r.median_ms / r.euler_steps as f64
        );
    }
    mkdir(&a.out)?;
    write_json(&a.out.join("bench.json"), &json!({
        "config_hash": cfg.hash(),
        "seed": a.seed,
        "patches": a.patches,
        "rows": rows,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("robin").chain(args.iter().copied()))
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(code(&["--help"]), 0);
        assert_eq!(code(&["train", "--steps", "-1", "--manifest", "m", "--out", "o"]), 1);
        assert_eq!(code(&["frobnicate"]), 1);
    }

    #[test]
    fn synthdata_count_zero_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        assert_eq!(code(&["synthdata", "--count", "0", "--out", out.to_str().unwrap()]), 1);
        assert_eq!(code(&["synthdata", "--mode", "video_only", "--out", out.to_str().unwrap()]), 1);
    }

    #[test]
    fn stage_two_without_init_is_usage_error() {
        assert_eq!(code(&["train", "--stage", "2", "--manifest", "m", "--out", "o"]), 1);
    }

    #[test]
    fn missing_manifest_is_internal_io() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("missing.jsonl");
        assert_eq!(code(&["train", "--manifest", m.to_str().unwrap(), "--out", "o"]), 3);
    }

    #[test]
    fn bad_judge_file_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("j.json");
        std::fs::write(&j, "{\"rhythmic_sync\": 6}").unwrap();
        let out = dir.path().join("e");
        assert_eq!(code(&["eval", "--judge", j.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
        assert!(!out.exists());
    }
}
