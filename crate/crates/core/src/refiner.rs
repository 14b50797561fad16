//! Patch refinement by conditional flow matching.
//!
//! Rectified schedule: `x_t = (1 - t) x0 + t eps`, so the regression target
//! is `eps - x0`. Training draws `t = sigmoid(z)` with `z ~ N(0, 1)`.
//! Sampling integrates from noise at `t = 1` to data at `t = 0` with
//! `x <- x - h v`, where `v` is the classifier-free guided velocity
//! `v_u + s (v_c - v_u)`.
//!
//! The velocity network ([`LocDit`]) reads the token sequence
//! `[context rows] ++ [previous patch frames] ++ [noisy patch frames]` with
//! full attention and per-block adaptive layer norm driven by the timestep.
//! Dropping the condition swaps the context rows for a learned null row; the
//! previous patch is always kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Mlp, SelfAttention, LN_EPS};
use crate::tensor::{no_grad, sinusoidal, AttentionMask, Tensor};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub euler_steps: usize,
    pub cfg_scale: f64,
    pub cond_drop_prob: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            euler_steps: 20,
            cfg_scale: 2.0,
            cond_drop_prob: 0.1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.euler_steps == 0 {
            return Err(Error::Config("euler_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config(format!(
                "cond_drop_prob must lie in [0, 1), got {}",
                self.cond_drop_prob
            )));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

pub fn alpha(t: f64) -> f64 {
    1.0 - t
}

pub fn sigma(t: f64) -> f64 {
    t
}

/// Logit-normal timestep, strictly inside `(0, 1)`.
pub fn sample_t(rng: &mut Rng) -> f64 {
    let t = 1.0 / (1.0 + (-rng.normal()).exp());
    t.clamp(1e-9, 1.0 - 1e-9)
}

/// A velocity field over one patch. `ctx = None` is the unconditional
/// (dropped) branch.
pub trait VelocityModel {
    fn velocity(&self, x_t: &Tensor, t: f64, ctx: Option<&Tensor>, prev: &Tensor) -> Result<Tensor>;
}

/// Flow-matching loss for one patch. Draw order from `rng`: timestep, drop
/// decision, noise.
pub fn flow_loss(
    model: &dyn VelocityModel,
    x0: &Tensor,
    ctx: &Tensor,
    prev: &Tensor,
    flow: &FlowConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let t = sample_t(rng);
    let drop = rng.uniform() < flow.cond_drop_prob;
    let eps = rng.normals(x0.numel());
    let x0v = x0.to_vec();
    let x_t: Vec<f64> = x0v.iter().zip(&eps).map(|(x, e)| alpha(t) * x + sigma(t) * e).collect();
    let target: Vec<f64> = x0v.iter().zip(&eps).map(|(x, e)| e - x).collect();
    let x_t = Tensor::new(x_t, x0.shape())?;
    let target = Tensor::new(target, x0.shape())?;
    let v = model.velocity(&x_t, t, (!drop).then_some(ctx), prev)?;
    let diff = v.sub(&target)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Guided Euler integration from `t = 1` to `t = 0`. With `cfg_scale == 1`
/// the unconditional branch is skipped.
pub fn euler_sample(
    model: &dyn VelocityModel,
    ctx: &Tensor,
    prev: &Tensor,
    flow: &FlowConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    flow.validate()?;
    let _guard = no_grad();
    let shape = prev.shape().to_vec();
    let mut x = rng.normals(prev.numel());
    let h = 1.0 / flow.euler_steps as f64;
    for s in 0..flow.euler_steps {
        let t = 1.0 - s as f64 * h;
        let xt = Tensor::new(x.clone(), &shape)?;
        let vc = model.velocity(&xt, t, Some(ctx), prev)?.to_vec();
        let v: Vec<f64> = if flow.cfg_scale == 1.0 {
            vc
        } else {
            let vu = model.velocity(&xt, t, None, prev)?.to_vec();
            vu.iter().zip(&vc).map(|(u, c)| u + flow.cfg_scale * (c - u)).collect()
        };
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= h * vi;
        }
    }
    Tensor::new(x, &shape)
}

/// Segment ids inside the refiner's token sequence.
const SEG_CTX: usize = 0;
const SEG_PREV: usize = 1;
const SEG_NOISY: usize = 2;

/// Block with timestep-modulated pre-norms and gated residuals.
#[derive(Clone)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: SelfAttention,
    pub mlp: Mlp,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    let n = x.layernorm(None, None, LN_EPS)?;
    n.mul(&scale.add_scalar(1.0).expand_rows(rows)?)?
        .add(&shift.expand_rows(rows)?)
}

impl DitBlock {
    fn new(init: &mut Init<'_>, d: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        Ok(DitBlock {
            modulation: Linear::new(&mut init.sub("modulation"), d, 6 * d),
            attn: SelfAttention::new(&mut init.sub("attn"), d, heads)?,
            mlp: Mlp::new(&mut init.sub("mlp"), d, d * mlp_mult),
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let d = x.shape()[1];
        let rows = x.shape()[0];
        let m = self.modulation.forward(cond)?;
        let part = |i: usize| m.slice_cols(i * d, d);
        let (sh1, sc1, g1, sh2, sc2, g2) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?, part(5)?);
        let a = self.attn.forward(&modulate(x, &sh1, &sc1)?, mask)?;
        let x = x.add(&a.mul(&g1.expand_rows(rows)?)?)?;
        let f = self.mlp.forward(&modulate(&x, &sh2, &sc2)?)?;
        x.add(&f.mul(&g2.expand_rows(rows)?)?)
    }
}

/// The velocity network.
#[derive(Clone)]
pub struct LocDit {
    pub frame_in: Linear,
    pub ctx_in: Linear,
    pub seg_emb: Tensor,
    pub t_fc1: Linear,
    pub t_fc2: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_mod: Linear,
    pub out: Linear,
    /// Stand-in for the context rows when the condition is dropped.
    pub null: Tensor,
    pub heads: usize,
}

impl LocDit {
    pub fn new(init: &mut Init<'_>, k: usize, d: usize, layers: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| DitBlock::new(&mut init.sub(&format!("layer{i}")), d, heads, mlp_mult))
            .collect::<Result<_>>()?;
        Ok(LocDit {
            frame_in: Linear::new(&mut init.sub("frame_in"), k, d),
            ctx_in: Linear::new(&mut init.sub("ctx_in"), d, d),
            seg_emb: init.normal("seg_emb", &[3, d], 1.0),
            t_fc1: Linear::new(&mut init.sub("t_fc1"), d, d),
            t_fc2: Linear::new(&mut init.sub("t_fc2"), d, d),
            blocks,
            final_mod: Linear::new(&mut init.sub("final_mod"), d, 2 * d),
            // Small output scale keeps the initial loss near the zero-field value.
            out: Linear::with_std(&mut init.sub("out"), d, k, 0.1 / (d as f64).sqrt()),
            null: init.normal("null", &[1, d], 1.0),
            heads,
        })
    }

    pub fn d(&self) -> usize {
        self.frame_in.d_out()
    }

    pub fn k(&self) -> usize {
        self.frame_in.d_in()
    }

    fn timestep_embedding(&self, t: f64) -> Result<Tensor> {
        let e = sinusoidal(&[t * 1000.0], self.d());
        self.t_fc2.forward(&self.t_fc1.forward(&e)?.gelu())
    }

    fn embed(&self, x: &Tensor, seg: usize) -> Result<Tensor> {
        let rows = x.shape()[0];
        let positions: Vec<f64> = (0..rows).map(|i| i as f64).collect();
        x.add(&Tensor::embedding(&self.seg_emb, &vec![seg; rows])?)?
            .add(&sinusoidal(&positions, self.d()))
    }
}

impl VelocityModel for LocDit {
    fn velocity(&self, x_t: &Tensor, t: f64, ctx: Option<&Tensor>, prev: &Tensor) -> Result<Tensor> {
        let k = self.k();
        if x_t.rank() != 2 || x_t.shape()[1] != k || prev.shape() != x_t.shape() {
            return Err(Error::Shape {
                op: "velocity",
                lhs: x_t.shape().to_vec(),
                rhs: prev.shape().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
        }
        let ctx = ctx.unwrap_or(&self.null);
        if ctx.rank() != 2 || ctx.shape()[1] != self.d() {
            return Err(Error::Shape {
                op: "velocity context",
                lhs: ctx.shape().to_vec(),
                rhs: vec![0, self.d()],
            });
        }
        let p = x_t.shape()[0];
        let c = ctx.shape()[0];
        let tokens = Tensor::concat_rows(&[
            self.embed(&self.ctx_in.forward(ctx)?, SEG_CTX)?,
            self.embed(&self.frame_in.forward(prev)?, SEG_PREV)?,
            self.embed(&self.frame_in.forward(x_t)?, SEG_NOISY)?,
        ])?;
        let cond = self.timestep_embedding(t)?.gelu();
        let mask = AttentionMask::full(c + 2 * p);
        let mut h = tokens;
        for b in &self.blocks {
            h = b.forward(&h, &cond, &mask)?;
        }
        let h = h.slice_rows(c + p, p)?;
        let d = self.d();
        let fm = self.final_mod.forward(&cond)?;
        let h = modulate(&h, &fm.slice_cols(0, d)?, &fm.slice_cols(d, d)?)?;
        self.out.forward(&h)
    }
}
