//! Two-stage training: text-only pretraining, then video finetuning with a
//! freshly initialized video projection.
//!
//! One step: sample a batch of example indices from the training stream,
//! average the teacher-forced losses, backpropagate, clip the global gradient
//! norm, and apply AdamW with a warmup-then-cosine learning rate. The
//! training stream, the step counter and the optimizer moments all live in
//! the checkpoint, so a resumed run continues bit-exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, MOMENT_M, MOMENT_V};
use crate::container::Array;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::generator::teacher_forced_loss;
use crate::model::{ModelConfig, RobinModel};
use crate::nn::ParamStore;
use crate::refiner::FlowConfig;
use crate::tensor::{no_grad, Tensor};
use crate::Rng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Log a record every this many steps (and at the last step).
    pub eval_every: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            steps: 3000,
            batch_size: 4,
            peak_lr: 6e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 50,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// Stage-1 budget at full scale.
    pub fn paper_stage1() -> Self {
        TrainConfig {
            stage: 1,
            steps: 120_000,
            batch_size: 8,
            peak_lr: 1e-3,
            eval_every: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn paper_stage2() -> Self {
        TrainConfig {
            stage: 2,
            peak_lr: 1e-4,
            ..TrainConfig::paper_stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("train.stage must be 1 or 2, got {}", self.stage)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("train.warmup_frac must lie in [0, 1), got {}", self.warmup_frac)));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("train.peak_lr must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("train.batch_size and train.eval_every must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("train.weight_decay and train.grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_frac * steps`, then cosine
/// decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.steps as f64;
    let s = (step as f64).min(total);
    let warm = cfg.warmup_frac * total;
    if s < warm {
        return cfg.peak_lr * s / warm;
    }
    if total <= warm {
        return cfg.peak_lr;
    }
    let progress = (s - warm) / (total - warm);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far (for bias correction).
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. `grads[i] = None` counts as zero.
pub fn adamw_step(
    store: &ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for ((name, _), g) in store.iter().zip(grads) {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, (_, p)) in store.iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = grads[i].as_deref();
        p.with_data_mut(|w| {
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                w[j] -= lr * weight_decay * w[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        });
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct Trainer {
    pub model: RobinModel,
    pub cfg: TrainConfig,
    pub flow: FlowConfig,
    examples: Vec<Example>,
    adam: AdamState,
    rng: Rng,
    step: usize,
    /// Per-step batch losses.
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

fn check_examples(examples: &[Example], stage: u8) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for e in examples {
        match (stage, e.video.is_some()) {
            (1, true) => {
                return Err(Error::Data(format!(
                    "example `{}` carries video features but stage 1 is text-only",
                    e.id
                )))
            }
            (2, false) => {
                return Err(Error::Data(format!("example `{}` has no video features for stage 2", e.id)))
            }
            _ => {}
        }
    }
    Ok(())
}

impl Trainer {
    /// A fresh run on `model`, whose stage must match `cfg.stage`.
    pub fn new(model: RobinModel, examples: Vec<Example>, cfg: TrainConfig, flow: FlowConfig, rng: Rng) -> Result<Trainer> {
        cfg.validate()?;
        flow.validate()?;
        if model.stage() != cfg.stage {
            return Err(Error::Contract(format!(
                "model is stage {} but the run is configured for stage {}",
                model.stage(),
                cfg.stage
            )));
        }
        check_examples(&examples, cfg.stage)?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            cfg,
            flow,
            examples,
            adam,
            rng,
            step: 0,
            losses: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(ckpt: &Checkpoint, examples: Vec<Example>, cfg: TrainConfig, flow: FlowConfig) -> Result<Trainer> {
        let model = ckpt.build_model()?;
        let mut t = Trainer::new(model, examples, cfg, flow, Rng::from_state(ckpt.rng))?;
        for (i, (name, p)) in t.model.params().iter().enumerate() {
            let get = |prefix: &str| {
                ckpt.record(&format!("{prefix}{name}"))
                    .filter(|a| a.data.len() == p.numel())
                    .map(|a| a.data.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for `{name}`")))
            };
            t.adam.m[i] = get(MOMENT_M)?;
            t.adam.v[i] = get(MOMENT_V)?;
        }
        t.step = ckpt.step as usize;
        t.adam.t = ckpt.step;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Parameters, moments, step and stream position.
    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.step as u64, config_hash, self.rng.state());
        for (prefix, bufs) in [(MOMENT_M, &self.adam.m), (MOMENT_V, &self.adam.v)] {
            for ((name, p), buf) in self.model.params().iter().zip(bufs) {
                c.records.push((
                    format!("{prefix}{name}"),
                    Array::new(p.shape().to_vec(), buf.clone()).expect("moment matches parameter"),
                ));
            }
        }
        c
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let start = Instant::now();
        let store = self.model.params();
        store.zero_grad();
        let batch: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.below(self.examples.len())).collect();
        let mut total: Option<Tensor> = None;
        for &i in &batch {
            let l = teacher_forced_loss(&self.model, &self.examples[i], &self.flow, &mut self.rng)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        let loss = total.expect("batch is non-empty").scale(1.0 / batch.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Contract(format!("loss became non-finite at step {}", self.step)));
        }
        loss.backward()?;
        let mut grads: Vec<Option<Vec<f64>>> = store.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in store.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = lr_at(self.step, &self.cfg);
        adamw_step(store, &grads, &mut self.adam, lr, self.cfg.weight_decay)?;
        self.step += 1;
        self.losses.push(value);
        if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
            self.log.push(LogRecord {
                step: self.step,
                loss: value,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            });
            log::info!("step {} loss {value:.5} lr {lr:.2e}", self.step);
        }
        Ok(value)
    }

    /// Trains until `target` steps have been taken in total.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        while self.step < target.min(self.cfg.steps) {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.steps)
    }
}

/// Root seed split: model initialization, then the training stream.
fn seeds(seed: u64) -> (u64, Rng) {
    let mut root = Rng::new(seed);
    let init = root.next_u64();
    (init, root.fork())
}

/// Builds a stage-1 model and trainer from scratch.
pub fn stage1_trainer(
    examples: Vec<Example>,
    model_cfg: ModelConfig,
    k: usize,
    cfg: TrainConfig,
    flow: FlowConfig,
) -> Result<Trainer> {
    if cfg.stage != 1 {
        return Err(Error::Config("stage-1 training needs train.stage = 1".into()));
    }
    let (init_seed, rng) = seeds(cfg.seed);
    let model = RobinModel::new(model_cfg, k, init_seed)?;
    Trainer::new(model, examples, cfg, flow, rng)
}

/// Loads a stage-1 checkpoint, adds a fresh video projection and starts a
/// stage-2 run with fresh optimizer state.
pub fn stage2_trainer(examples: Vec<Example>, init: &Checkpoint, cfg: TrainConfig, flow: FlowConfig) -> Result<Trainer> {
    if cfg.stage != 2 {
        return Err(Error::Config("stage-2 training needs train.stage = 2".into()));
    }
    if init.stage != 1 {
        return Err(Error::Checkpoint(format!(
            "stage-2 training starts from a stage-1 checkpoint, got stage {}",
            init.stage
        )));
    }
    let mut model = init.build_model()?;
    let (_, mut rng) = seeds(cfg.seed);
    let mut proj_rng = rng.fork();
    model.add_video_projection(&mut proj_rng)?;
    Trainer::new(model, examples, cfg, flow, rng)
}

pub fn train_stage1(
    examples: Vec<Example>,
    model_cfg: ModelConfig,
    k: usize,
    cfg: TrainConfig,
    flow: FlowConfig,
    config_hash: &str,
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let mut t = stage1_trainer(examples, model_cfg, k, cfg, flow)?;
    t.run()?;
    Ok((t.checkpoint(config_hash), t.log))
}

pub fn train_stage2(
    examples: Vec<Example>,
    init: &Checkpoint,
    cfg: TrainConfig,
    flow: FlowConfig,
    config_hash: &str,
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let mut t = stage2_trainer(examples, init, cfg, flow)?;
    t.run()?;
    Ok((t.checkpoint(config_hash), t.log))
}

/// Mean teacher-forced loss over `examples` and `draws` noise draws, with
/// conditioning never dropped. Uses its own stream so it does not disturb
/// training.
pub fn eval_loss(model: &RobinModel, examples: &[Example], flow: &FlowConfig, draws: usize, seed: u64) -> Result<f64> {
    let _guard = no_grad();
    let flow = FlowConfig { cond_drop_prob: 0.0, ..*flow };
    let mut rng = Rng::new(seed);
    let mut sum = 0.0;
    for _ in 0..draws {
        for e in examples {
            sum += teacher_forced_loss(model, e, &flow, &mut rng)?.item();
        }
    }
    Ok(sum / (draws * examples.len()) as f64)
}

/// Means of consecutive non-overlapping windows of `w` losses.
pub fn windowed_means(losses: &[f64], w: usize) -> Vec<f64> {
    losses.chunks_exact(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}
