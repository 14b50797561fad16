//! Generate latents and a waveform from a checkpoint written by
//! `robin train`, or from an untrained model when none is given.
//!
//!     cargo run --release --example generate -- [checkpoint.bin] ["prompt"]

use robin::checkpoint::Checkpoint;
use robin::codec::Codec;
use robin::config::Config;
use robin::data::tokenize;
use robin::generator::{generate, GenerationRequest};
use robin::model::RobinModel;

fn main() -> robin::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = Config::desk();
    let model = match args.first() {
        Some(path) => Checkpoint::load(path.as_ref())?.build_model()?,
        None => RobinModel::new(cfg.model, cfg.codec.k, 0)?,
    };
    let prompt = args.get(1).map_or("gentle guitar at dusk", String::as_str);
    let req = GenerationRequest {
        text: tokenize(prompt, model.cfg.vocab)?,
        video: None,
        n_patches: 4,
        flow: cfg.flow,
        seed: 11,
    };
    let out = generate(&model, &Codec::new(cfg.codec)?, &req)?;
    println!("{} patches of {}x{} -> {} samples", out.patches.n, out.patches.p, out.patches.k, out.waveform.samples.len());
    for (i, d) in out.per_patch_timings.iter().enumerate() {
        println!("patch {i}: {:.2} ms", d.as_secs_f64() * 1e3);
    }
    Ok(())
}
