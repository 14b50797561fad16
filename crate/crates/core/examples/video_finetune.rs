//! Two-stage training: text-only pretraining, then finetuning with video
//! features. Compares against a control finetuned on zeroed video and
//! against inference with the text removed.
//!
//!     cargo run --release --example video_finetune -- [stage1_steps] [stage2_steps]

use robin::codec::{patchify, Codec};
use robin::config::Config;
use robin::data::{synth_examples, Example, SynthMode};
use robin::generator::{generate, GenerationRequest};
use robin::model::RobinModel;
use robin::refiner::FlowConfig;
use robin::trainer::{train_stage1, train_stage2, TrainConfig};

fn mean_mae(model: &RobinModel, codec: &Codec, examples: &[Example], flow: FlowConfig, zero_text: bool) -> robin::Result<f64> {
    let p = model.cfg.patch_size;
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let text = if zero_text { ex.text.zeroed() } else { ex.text.clone() };
        let req = GenerationRequest {
            text,
            video: ex.video.clone(),
            n_patches: ex.latents.n_frames() / p,
            flow,
            seed: i as u64,
        };
        let out = generate(model, codec, &req)?;
        let target = patchify(&ex.latents, p)?;
        total += out.patches.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / target.data.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn main() -> robin::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("step count")).collect();
    let cfg = Config::desk();
    let dims = cfg.synth_dims();
    let codec = Codec::new(cfg.codec)?;
    let stage1 = TrainConfig { steps: args.first().copied().unwrap_or(3000), ..cfg.train };
    let stage2 = TrainConfig { stage: 2, steps: args.get(1).copied().unwrap_or(1500), ..cfg.train };

    let text_only = synth_examples(1, 8, SynthMode::TextOnly, dims)?;
    let (init, _) = train_stage1(text_only, cfg.model, cfg.codec.k, stage1, cfg.flow, &cfg.hash())?;

    let paired = synth_examples(1, 8, SynthMode::TextVideo, dims)?;
    let blind: Vec<Example> = paired
        .iter()
        .map(|e| Example { video: e.video.as_ref().map(|v| v.zeroed()), ..e.clone() })
        .collect();
    let (with_video, _) = train_stage2(paired.clone(), &init, stage2, cfg.flow, &cfg.hash())?;
    let (control, _) = train_stage2(blind.clone(), &init, stage2, cfg.flow, &cfg.hash())?;
    let with_video = with_video.build_model()?;
    let control = control.build_model()?;

    let conditioned = mean_mae(&with_video, &codec, &paired, cfg.flow, false)?;
    let no_text = mean_mae(&with_video, &codec, &paired, cfg.flow, true)?;
    let ctrl = mean_mae(&control, &codec, &blind, cfg.flow, false)?;
    println!("video-finetuned, conditioned:  latent MAE {conditioned:.4}");
    println!("video-finetuned, text removed: latent MAE {no_text:.4}");
    println!("zeroed-video control:          latent MAE {ctrl:.4}");
    Ok(())
}
