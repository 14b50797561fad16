//! Stage-1 training on the synthetic text-only task, then generation on
//! every training prompt.
//!
//!     cargo run --release --example train_text_to_music -- [steps] [peak_lr] [cfg_scale]

use robin::codec::{patchify, Codec};
use robin::config::Config;
use robin::data::{synth_examples, SynthMode};
use robin::generator::{generate, GenerationRequest};
use robin::trainer::{eval_loss, stage1_trainer};

fn main() -> robin::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = Config::desk();
    if let Some(s) = args.first() {
        cfg.train.steps = s.parse().expect("steps");
    }
    if let Some(lr) = args.get(1) {
        cfg.train.peak_lr = lr.parse().expect("peak_lr");
    }
    if let Some(s) = args.get(2) {
        cfg.flow.cfg_scale = s.parse().expect("cfg_scale");
    }
    let examples = synth_examples(1, 8, SynthMode::TextOnly, cfg.synth_dims())?;
    let mut t = stage1_trainer(examples.clone(), cfg.model, cfg.codec.k, cfg.train, cfg.flow)?;
    let initial = eval_loss(&t.model, &examples, &cfg.flow, 8, 99)?;
    println!("step 0 eval loss {initial:.4}");
    let start = std::time::Instant::now();
    let every = (cfg.train.steps / 10).max(1);
    while t.step() < cfg.train.steps {
        t.run_until(t.step() + every)?;
        let l = eval_loss(&t.model, &examples, &cfg.flow, 8, 99)?;
        println!(
            "step {} eval loss {l:.4} ({:.1}% of initial) {:.0}s",
            t.step(),
            100.0 * l / initial,
            start.elapsed().as_secs_f64()
        );
    }

    let codec = Codec::new(cfg.codec)?;
    let p = cfg.model.patch_size;
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let req = GenerationRequest {
            text: ex.text.clone(),
            video: None,
            n_patches: cfg.data.frames / p,
            flow: cfg.flow,
            seed: i as u64,
        };
        let out = generate(&t.model, &codec, &req)?;
        let target = patchify(&ex.latents, p)?;
        let mae = out.patches.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / target.data.len() as f64;
        println!("{}: latent MAE {mae:.4}", ex.id);
        total += mae;
    }
    println!("mean latent MAE {:.4}", total / examples.len() as f64);
    Ok(())
}
