//! Train briefly and generate at several patch sizes; the structural
//! bookkeeping (patch count, frames, waveform length) must hold for each.

use robin::codec::Codec;
use robin::config::Config;
use robin::data::{synth_examples, SynthMode};
use robin::generator::{generate, GenerationRequest};
use robin::model::ModelConfig;
use robin::trainer::{eval_loss, stage1_trainer, TrainConfig};

fn main() -> robin::Result<()> {
    let base = Config::desk();
    let examples = synth_examples(3, 8, SynthMode::TextOnly, base.synth_dims())?;
    let codec = Codec::new(base.codec)?;
    println!("{:>3} {:>8} {:>7} {:>8} {:>10}", "p", "patches", "frames", "samples", "eval_loss");
    for p in [4, 8, 16] {
        let model_cfg = ModelConfig { patch_size: p, ..base.model };
        let train = TrainConfig { steps: 300, ..base.train };
        let mut t = stage1_trainer(examples.clone(), model_cfg, base.codec.k, train, base.flow)?;
        t.run()?;
        let n = base.data.frames / p;
        let req = GenerationRequest {
            text: examples[0].text.clone(),
            video: None,
            n_patches: n,
            flow: base.flow,
            seed: 0,
        };
        let out = generate(&t.model, &codec, &req)?;
        let loss = eval_loss(&t.model, &examples, &base.flow, 4, 0)?;
        println!("{p:>3} {:>8} {:>7} {:>8} {loss:>10.4}", out.patches.n, out.patches.n * p, out.waveform.samples.len());
    }
    Ok(())
}
