//! The autoregressive planner.
//!
//! Video features are projected into the model width, text ids are embedded,
//! and past latent patches are encoded one vector per patch. The three
//! streams are concatenated (video, text, history), tagged with segment and
//! sinusoidal position embeddings and run through the semantic transformer
//! under a prefix-causal mask: the conditioning prefix attends freely within
//! itself, history positions attend to the prefix and to earlier history.
//! The result `E_s` passes a scalar quantization bottleneck to give `E_d`,
//! and a residual transformer adds back detail: `E_p = E_d + RITE(E_d)`.
//!
//! Because every stage is causal over history positions, a single pass over
//! the full history yields, in its first `prefix + i - 1` rows, exactly the
//! planning context for patch `i`.

use std::cell::RefCell;

use crate::data::{TextTokens, VideoFeatures};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, TransformerStack};
use crate::tensor::{sinusoidal, AttentionMask, Tensor};

/// Segment ids for the segment embedding table.
pub const SEG_VIDEO: usize = 0;
pub const SEG_TEXT: usize = 1;
pub const SEG_HISTORY: usize = 2;

/// `f_v = f_clip W + b`, mapping `[t, d_v]` features to `[t, d]`.
#[derive(Clone)]
pub struct ProjectionLayer {
    pub linear: Linear,
}

impl ProjectionLayer {
    pub fn new(init: &mut Init<'_>, d_v: usize, d: usize) -> Self {
        ProjectionLayer {
            linear: Linear::new(init, d_v, d),
        }
    }

    pub fn d_v(&self) -> usize {
        self.linear.d_in()
    }
}

pub fn project_video(f_clip: &VideoFeatures, proj: &ProjectionLayer) -> Result<Tensor> {
    if f_clip.d_v != proj.d_v() {
        return Err(Error::Shape {
            op: "project_video",
            lhs: vec![f_clip.t, f_clip.d_v],
            rhs: proj.linear.weight.shape().to_vec(),
        });
    }
    let x = Tensor::new(f_clip.data.clone(), &[f_clip.t, f_clip.d_v])?;
    proj.linear.forward(&x)
}

/// One embedding per past patch: flattened patch `[p*k] -> d`, then a causal
/// transformer over the patch sequence. No positional encoding is added here.
#[derive(Clone)]
pub struct AudioLatentEncoder {
    pub in_proj: Linear,
    pub layers: TransformerStack,
}

impl AudioLatentEncoder {
    pub fn new(init: &mut Init<'_>, patch_width: usize, d: usize, layers: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        Ok(AudioLatentEncoder {
            in_proj: Linear::new(&mut init.sub("in_proj"), patch_width, d),
            layers: TransformerStack::new(&mut init.sub("layers"), layers, d, heads, mlp_mult)?,
        })
    }

    pub fn patch_width(&self) -> usize {
        self.in_proj.d_in()
    }

    /// `[h, d]` for `h` history patches, `None` when the history is empty.
    pub fn encode_history(&self, patches: &[&[f64]]) -> Result<Option<Tensor>> {
        if patches.is_empty() {
            return Ok(None);
        }
        let w = self.patch_width();
        if let Some(bad) = patches.iter().find(|m| m.len() != w) {
            return Err(Error::Shape {
                op: "encode_history",
                lhs: vec![bad.len()],
                rhs: vec![w],
            });
        }
        let x = Tensor::new(patches.concat(), &[patches.len(), w])?;
        let h = self.in_proj.forward(&x)?;
        Ok(Some(self.layers.forward(&h, &AttentionMask::causal(patches.len()))?))
    }
}

/// Lengths of the three fused segments, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segmentation {
    pub video: usize,
    pub text: usize,
    pub history: usize,
}

impl Segmentation {
    /// Video plus text: the bidirectional conditioning prefix.
    pub fn prefix(&self) -> usize {
        self.video + self.text
    }

    pub fn len(&self) -> usize {
        self.prefix() + self.history
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_of(&self, pos: usize) -> usize {
        if pos < self.video {
            SEG_VIDEO
        } else if pos < self.prefix() {
            SEG_TEXT
        } else {
            SEG_HISTORY
        }
    }

    /// Row of history patch `j` (0-based).
    pub fn history_row(&self, j: usize) -> usize {
        self.prefix() + j
    }
}

#[derive(Clone)]
pub struct SemanticLm {
    pub tok_emb: Tensor,
    pub seg_emb: Tensor,
    pub layers: TransformerStack,
    pub ln_out: LayerNorm,
}

impl SemanticLm {
    pub fn new(init: &mut Init<'_>, vocab: usize, d: usize, layers: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        Ok(SemanticLm {
            tok_emb: init.normal("tok_emb", &[vocab, d], 1.0),
            seg_emb: init.normal("seg_emb", &[3, d], 1.0),
            layers: TransformerStack::new(&mut init.sub("layers"), layers, d, heads, mlp_mult)?,
            ln_out: LayerNorm::new(&mut init.sub("ln_out"), d),
        })
    }

    pub fn d(&self) -> usize {
        self.tok_emb.shape()[1]
    }

    pub fn vocab(&self) -> usize {
        self.tok_emb.shape()[0]
    }

    pub fn embed_text(&self, text: &TextTokens) -> Result<Tensor> {
        if text.vocab_size > self.vocab() {
            return Err(Error::Contract(format!(
                "text vocabulary {} exceeds model vocabulary {}",
                text.vocab_size,
                self.vocab()
            )));
        }
        Tensor::embedding(&self.tok_emb, &text.ids)
    }

    /// Concatenates video, text and history rows, then adds segment and
    /// sinusoidal position embeddings.
    pub fn fuse(&self, f_v: Option<&Tensor>, f_t: &Tensor, f_a: Option<&Tensor>) -> Result<(Tensor, Segmentation)> {
        let seg = Segmentation {
            video: f_v.map_or(0, |t| t.shape()[0]),
            text: f_t.shape()[0],
            history: f_a.map_or(0, |t| t.shape()[0]),
        };
        let parts: Vec<Tensor> = f_v.into_iter().chain(Some(f_t)).chain(f_a).cloned().collect();
        let x = Tensor::concat_rows(&parts)?;
        let n = seg.len();
        let seg_ids: Vec<usize> = (0..n).map(|i| seg.segment_of(i)).collect();
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = x
            .add(&Tensor::embedding(&self.seg_emb, &seg_ids)?)?
            .add(&sinusoidal(&positions, self.d()))?;
        Ok((x, seg))
    }

    pub fn forward(&self, fused: &Tensor, seg: &Segmentation) -> Result<Tensor> {
        let mask = AttentionMask::prefix_causal(seg.len(), seg.prefix());
        self.ln_out.forward(&self.layers.forward(fused, &mask)?)
    }
}

/// How the bottleneck treats its input; anything but `Off` exists for
/// finite-difference checking of parameters upstream of the rounding.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum FsqProbe {
    #[default]
    Off,
    /// Quantize normally and remember `q(z) - z` for each call.
    Record,
    /// Replace quantization by `z + c` with the recorded offsets `c`, in call
    /// order. Same value at the recording point, smooth in `z`, and the
    /// gradient equals the straight-through one.
    Replay,
}

#[derive(Default)]
struct ProbeState {
    mode: FsqProbe,
    offsets: Vec<Vec<f64>>,
    cursor: usize,
}

pub struct FsqLayer {
    pub down: Linear,
    pub up: Linear,
    pub delta: f64,
    pub levels: u32,
    probe: RefCell<ProbeState>,
}

impl Clone for FsqLayer {
    fn clone(&self) -> Self {
        FsqLayer {
            down: self.down.clone(),
            up: self.up.clone(),
            delta: self.delta,
            levels: self.levels,
            probe: RefCell::default(),
        }
    }
}

/// Bottleneck coordinates (on the grid) and the up-projected `E_d`.
pub struct FsqOutput {
    pub bottleneck: Tensor,
    pub e_d: Tensor,
}

impl FsqLayer {
    pub fn new(init: &mut Init<'_>, d: usize, d_q: usize, delta: f64, levels: u32) -> Result<Self> {
        if !(delta > 0.0) || levels == 0 {
            return Err(Error::Config(format!(
                "quantizer needs delta > 0 and levels >= 1, got {delta} and {levels}"
            )));
        }
        Ok(FsqLayer {
            down: Linear::new(&mut init.sub("down"), d, d_q),
            up: Linear::new(&mut init.sub("up"), d_q, d),
            delta,
            levels,
            probe: RefCell::default(),
        })
    }

    pub fn set_probe(&self, mode: FsqProbe) {
        let mut p = self.probe.borrow_mut();
        if mode == FsqProbe::Record {
            p.offsets.clear();
        }
        p.mode = mode;
        p.cursor = 0;
    }

    pub fn forward(&self, e_s: &Tensor) -> Result<FsqOutput> {
        let z = self.down.forward(e_s)?;
        let mut p = self.probe.borrow_mut();
        let bottleneck = match p.mode {
            FsqProbe::Off => z.quantize_ste(self.delta, self.levels)?,
            FsqProbe::Record => {
                let q = z.quantize_ste(self.delta, self.levels)?;
                let c = q.data().iter().zip(z.data().iter()).map(|(a, b)| a - b).collect();
                p.offsets.push(c);
                q
            }
            FsqProbe::Replay => {
                let c = p.offsets.get(p.cursor).cloned().ok_or_else(|| {
                    Error::Contract("quantizer replay ran past the recorded calls".into())
                })?;
                p.cursor += 1;
                z.add(&Tensor::new(c, z.shape())?)?
            }
        };
        drop(p);
        let e_d = self.up.forward(&bottleneck)?;
        Ok(FsqOutput { bottleneck, e_d })
    }
}

/// `RITE(E_d) = out(ln(blocks(E_d)))`, the residual branch of the planner.
#[derive(Clone)]
pub struct RiteEncoder {
    pub layers: TransformerStack,
    pub ln: LayerNorm,
    pub out: Linear,
}

impl RiteEncoder {
    pub fn new(init: &mut Init<'_>, d: usize, layers: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        Ok(RiteEncoder {
            layers: TransformerStack::new(&mut init.sub("layers"), layers, d, heads, mlp_mult)?,
            ln: LayerNorm::new(&mut init.sub("ln"), d),
            out: Linear::new(&mut init.sub("out"), d, d),
        })
    }

    pub fn residual(&self, e_d: &Tensor, seg: &Segmentation) -> Result<Tensor> {
        let mask = AttentionMask::prefix_causal(seg.len(), seg.prefix());
        self.out.forward(&self.ln.forward(&self.layers.forward(e_d, &mask)?)?)
    }

    /// `E_p = E_d + RITE(E_d)`.
    pub fn plan(&self, e_d: &Tensor, seg: &Segmentation) -> Result<Tensor> {
        e_d.add(&self.residual(e_d, seg)?)
    }
}

/// Everything one planner pass produces.
pub struct Plan {
    pub seg: Segmentation,
    pub e_s: Tensor,
    pub bottleneck: Tensor,
    pub e_d: Tensor,
    pub e_p: Tensor,
}

#[derive(Clone)]
pub struct ArHead {
    pub video_proj: Option<ProjectionLayer>,
    pub audio: AudioLatentEncoder,
    pub semantic: SemanticLm,
    pub fsq: FsqLayer,
    pub rite: RiteEncoder,
}

impl ArHead {
    pub fn plan(&self, text: &TextTokens, video: Option<&VideoFeatures>, history: &[&[f64]]) -> Result<Plan> {
        let f_v = match (video, &self.video_proj) {
            (Some(v), Some(proj)) => Some(project_video(v, proj)?),
            (Some(_), None) => {
                return Err(Error::Contract(
                    "video features given to a model without a video projection (stage 1)".into(),
                ))
            }
            (None, _) => None,
        };
        let f_t = self.semantic.embed_text(text)?;
        let f_a = self.audio.encode_history(history)?;
        let (fused, seg) = self.semantic.fuse(f_v.as_ref(), &f_t, f_a.as_ref())?;
        let e_s = self.semantic.forward(&fused, &seg)?;
        let FsqOutput { bottleneck, e_d } = self.fsq.forward(&e_s)?;
        let e_p = self.rite.plan(&e_d, &seg)?;
        Ok(Plan {
            seg,
            e_s,
            bottleneck,
            e_d,
            e_p,
        })
    }
}
