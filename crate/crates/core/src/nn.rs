//! Parameter storage and the layers shared by every transformer in the model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{AttentionMask, Tensor};
use crate::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Named trainable leaves in registration order. Names are stable and
/// slash-separated, e.g. `semantic/layer0/attn/wq/weight`.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Tensor {
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initializer whose names live under `name/`.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = self.rng.normals(n).into_iter().map(|v| v * std).collect();
        let t = Tensor::param(data, shape).expect("valid parameter shape");
        let full = self.full_name(name);
        self.store.insert(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        let t = Tensor::param(vec![value; n], shape).expect("valid parameter shape");
        let full = self.full_name(name);
        self.store.insert(full, t)
    }
}

/// `y = x W + b` on `[rows, in]` inputs.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights `N(0, 1/in)`, zero bias.
    pub fn new(init: &mut Init<'_>, d_in: usize, d_out: usize) -> Self {
        Self::with_std(init, d_in, d_out, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std(init: &mut Init<'_>, d_in: usize, d_out: usize, std: f64) -> Self {
        Linear {
            weight: init.normal("weight", &[d_in, d_out], std),
            bias: init.constant("bias", &[d_out], 0.0),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rows = x.shape()[0];
        x.matmul(&self.weight)?.add(&self.bias.expand_rows(rows)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, d: usize) -> Self {
        LayerNorm {
            gain: init.constant("gain", &[d], 1.0),
            bias: init.constant("bias", &[d], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layernorm(Some(&self.gain), Some(&self.bias), LN_EPS)
    }
}

/// Query/key/value/output projections around [`Tensor::attention`].
#[derive(Clone)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide model width {d}")));
        }
        Ok(SelfAttention {
            wq: Linear::new(&mut init.sub("wq"), d, d),
            wk: Linear::new(&mut init.sub("wk"), d, d),
            wv: Linear::new(&mut init.sub("wv"), d, d),
            wo: Linear::new(&mut init.sub("wo"), d, d),
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        self.wo.forward(&Tensor::attention(&q, &k, &v, mask, self.heads)?)
    }
}

#[derive(Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, d: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(&mut init.sub("fc1"), d, hidden),
            fc2: Linear::new(&mut init.sub("fc2"), hidden, d),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&mut init.sub("ln1"), d),
            attn: SelfAttention::new(&mut init.sub("attn"), d, heads)?,
            ln2: LayerNorm::new(&mut init.sub("ln2"), d),
            mlp: Mlp::new(&mut init.sub("mlp"), d, d * mlp_mult),
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        x.add(&self.mlp.forward(&self.ln2.forward(&x)?)?)
    }
}

/// A stack of [`TransformerBlock`]s sharing one mask.
#[derive(Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(init: &mut Init<'_>, layers: usize, d: usize, heads: usize, mlp_mult: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(&mut init.sub(&format!("layer{i}")), d, heads, mlp_mult))
            .collect::<Result<_>>()?;
        Ok(TransformerStack { blocks })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, mask)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_hierarchical_and_ordered() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init::new(&mut store, &mut rng);
        TransformerStack::new(&mut init.sub("stack"), 2, 8, 2, 2).unwrap();
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "stack/layer0/ln1/gain");
        assert!(names.contains(&"stack/layer1/mlp/fc2/bias"));
        assert_eq!(store.len(), 2 * (2 + 8 + 2 + 4));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init::new(&mut store, &mut rng);
        assert!(SelfAttention::new(&mut init, 10, 4).is_err());
    }

    #[test]
    fn block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let x = Tensor::new(rng.normals(40), &[5, 8]).unwrap();
        let mut init = Init::new(&mut store, &mut rng);
        let b = TransformerBlock::new(&mut init, 8, 2, 2).unwrap();
        let y = b.forward(&x, &AttentionMask::causal(5)).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
    }
}
