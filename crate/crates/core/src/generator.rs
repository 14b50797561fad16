//! Patch-by-patch generation and its teacher-forced training loss.
//!
//! Generation step `i`: encode the patches produced so far, plan, then sample
//! patch `i` with the refiner conditioned on the plan and on patch `i - 1`
//! (the learned `bos` patch for the first step). The history is re-encoded
//! from scratch every step. After the last step the patches are joined and
//! decoded to a waveform.

use std::time::{Duration, Instant};

use crate::codec::{patchify, unpatchify, Codec, PatchSequence, Waveform};
use crate::data::{Example, TextTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::model::RobinModel;
use crate::refiner::{euler_sample, flow_loss, FlowConfig, VelocityModel};
use crate::tensor::{no_grad, Tensor};
use crate::Rng;

/// Sample rate attached to decoded waveforms.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub text: TextTokens,
    pub video: Option<VideoFeatures>,
    pub n_patches: usize,
    pub flow: FlowConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub patches: PatchSequence,
    pub waveform: Waveform,
    pub per_patch_timings: Vec<Duration>,
}

pub fn generate(model: &RobinModel, codec: &Codec, req: &GenerationRequest) -> Result<GenerationResult> {
    generate_with(model, &model.refiner, codec, req)
}

/// [`generate`] with a substitute velocity model.
pub fn generate_with(
    model: &RobinModel,
    refiner: &dyn VelocityModel,
    codec: &Codec,
    req: &GenerationRequest,
) -> Result<GenerationResult> {
    if req.n_patches == 0 {
        return Err(Error::Contract("n_patches must be at least 1".into()));
    }
    if codec.spec().k != model.k {
        return Err(Error::Config(format!(
            "codec has {} channels but the model expects {}",
            codec.spec().k,
            model.k
        )));
    }
    req.flow.validate()?;
    let _guard = no_grad();
    let (p, k) = (model.cfg.patch_size, model.k);
    let mut rng = Rng::new(req.seed);
    let mut patches: Vec<Vec<f64>> = Vec::with_capacity(req.n_patches);
    let mut timings = Vec::with_capacity(req.n_patches);
    for i in 0..req.n_patches {
        let start = Instant::now();
        let history: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        let plan = model.ar.plan(&req.text, req.video.as_ref(), &history)?;
        let prev = match patches.last() {
            Some(m) => Tensor::new(m.clone(), &[p, k])?,
            None => model.bos.detach(),
        };
        let m = euler_sample(refiner, &plan.e_p, &prev, &req.flow, &mut rng)?.to_vec();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Generation {
                index: i,
                reason: "sampled patch contains non-finite values".into(),
            });
        }
        patches.push(m);
        timings.push(start.elapsed());
    }
    let patches = PatchSequence::from_patches(&patches, p, k)?;
    let waveform = codec.decode(&unpatchify(&patches), SAMPLE_RATE)?;
    Ok(GenerationResult {
        patches,
        waveform,
        per_patch_timings: timings,
    })
}

/// Mean flow-matching loss over every patch of `example`, with the history
/// taken from the ground truth. One planner pass covers all patches.
pub fn teacher_forced_loss(model: &RobinModel, example: &Example, flow: &FlowConfig, rng: &mut Rng) -> Result<Tensor> {
    teacher_forced_loss_with(model, &model.refiner, example, flow, rng)
}

pub fn teacher_forced_loss_with(
    model: &RobinModel,
    refiner: &dyn VelocityModel,
    example: &Example,
    flow: &FlowConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (p, k) = (model.cfg.patch_size, model.k);
    if example.latents.k != k {
        return Err(Error::Data(format!(
            "example `{}` has {} latent channels, model expects {k}",
            example.id, example.latents.k
        )));
    }
    let m = patchify(&example.latents, p)?;
    let history: Vec<&[f64]> = (0..m.n - 1).map(|j| m.patch(j)).collect();
    let plan = model.ar.plan(&example.text, example.video.as_ref(), &history)?;
    let prefix = plan.seg.prefix();
    let mut total: Option<Tensor> = None;
    for i in 0..m.n {
        let ctx = plan.e_p.slice_rows(0, prefix + i)?;
        let prev = if i == 0 {
            model.bos.clone()
        } else {
            Tensor::new(m.patch(i - 1).to_vec(), &[p, k])?
        };
        let x0 = Tensor::new(m.patch(i).to_vec(), &[p, k])?;
        let l = flow_loss(refiner, &x0, &ctx, &prev, flow, rng)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one patch").scale(1.0 / m.n as f64))
}
