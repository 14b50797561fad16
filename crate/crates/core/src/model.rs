//! The full model: planner, refiner and the learned first-step patch.

use serde::{Deserialize, Serialize};

use crate::ar_head::{ArHead, AudioLatentEncoder, FsqLayer, ProjectionLayer, RiteEncoder, SemanticLm};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};
use crate::refiner::LocDit;
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model width shared by every transformer.
    pub d: usize,
    /// Width of the quantization bottleneck.
    pub d_q: usize,
    pub heads: usize,
    pub n_sem: usize,
    pub n_rite: usize,
    pub n_ale: usize,
    pub n_dit: usize,
    pub mlp_mult: usize,
    pub vocab: usize,
    pub d_v: usize,
    /// Latent frames per patch.
    pub patch_size: usize,
    pub fsq_levels: u32,
    pub fsq_delta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_q: 16,
            heads: 4,
            n_sem: 2,
            n_rite: 1,
            n_ale: 1,
            n_dit: 2,
            mlp_mult: 2,
            vocab: 32,
            d_v: 8,
            patch_size: 4,
            fsq_levels: 4,
            fsq_delta: 0.25,
        }
    }
}

impl ModelConfig {
    /// Width and depth used at full scale.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d: 1024,
            d_q: 256,
            heads: 16,
            n_sem: 24,
            n_rite: 8,
            n_ale: 2,
            n_dit: 8,
            mlp_mult: 4,
            vocab: 32_000,
            d_v: 768,
            patch_size: 16,
            fsq_levels: 4,
            fsq_delta: 0.25,
        }
    }

    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 16,
            d_q: 4,
            heads: 2,
            n_sem: 1,
            n_rite: 1,
            n_ale: 1,
            n_dit: 1,
            mlp_mult: 2,
            vocab: 16,
            d_v: 4,
            patch_size: 4,
            fsq_levels: 4,
            fsq_delta: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_q", self.d_q),
            ("heads", self.heads),
            ("mlp_mult", self.mlp_mult),
            ("vocab", self.vocab),
            ("d_v", self.d_v),
            ("patch_size", self.patch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.heads ({}) must divide model.d ({})",
                self.heads, self.d
            )));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config("model.d must be even for sinusoidal encodings".into()));
        }
        if self.fsq_levels == 0 || !(self.fsq_delta > 0.0) {
            return Err(Error::Config("model.fsq_levels and model.fsq_delta must be positive".into()));
        }
        Ok(())
    }
}

pub struct RobinModel {
    pub cfg: ModelConfig,
    /// Latent channels per frame.
    pub k: usize,
    pub store: ParamStore,
    pub ar: ArHead,
    pub refiner: LocDit,
    /// `m_0`, the previous patch seen by the first generation step.
    pub bos: Tensor,
}

impl RobinModel {
    /// A stage-1 model (no video projection) initialized from `seed`.
    pub fn new(cfg: ModelConfig, k: usize, seed: u64) -> Result<RobinModel> {
        cfg.validate()?;
        if k == 0 {
            return Err(Error::Config("latent channels k must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let c = &cfg;
        let ar = ArHead {
            video_proj: None,
            audio: AudioLatentEncoder::new(&mut init.sub("audio"), c.patch_size * k, c.d, c.n_ale, c.heads, c.mlp_mult)?,
            semantic: SemanticLm::new(&mut init.sub("semantic"), c.vocab, c.d, c.n_sem, c.heads, c.mlp_mult)?,
            fsq: FsqLayer::new(&mut init.sub("fsq"), c.d, c.d_q, c.fsq_delta, c.fsq_levels)?,
            rite: RiteEncoder::new(&mut init.sub("rite"), c.d, c.n_rite, c.heads, c.mlp_mult)?,
        };
        let refiner = LocDit::new(&mut init.sub("refiner"), k, c.d, c.n_dit, c.heads, c.mlp_mult)?;
        let bos = init.constant("bos", &[c.patch_size, k], 0.0);
        Ok(RobinModel {
            cfg,
            k,
            store,
            ar,
            refiner,
            bos,
        })
    }

    pub fn has_video(&self) -> bool {
        self.ar.video_proj.is_some()
    }

    /// 1 without a video projection, 2 with one.
    pub fn stage(&self) -> u8 {
        if self.has_video() {
            2
        } else {
            1
        }
    }

    /// Adds a freshly initialized video projection (stage 2). Its parameters
    /// are registered after every existing one.
    pub fn add_video_projection(&mut self, rng: &mut Rng) -> Result<()> {
        if self.has_video() {
            return Err(Error::Contract("model already has a video projection".into()));
        }
        let mut init = Init::new(&mut self.store, rng);
        self.ar.video_proj = Some(ProjectionLayer::new(&mut init.sub("video_proj"), self.cfg.d_v, self.cfg.d));
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn patch_width(&self) -> usize {
        self.cfg.patch_size * self.k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_one_has_no_video_parameters() {
        let m = RobinModel::new(ModelConfig::default(), 8, 1).unwrap();
        assert_eq!(m.stage(), 1);
        assert!(m.params().iter().all(|(n, _)| !n.starts_with("video_proj")));
        assert!(m.params().get("bos").is_some());
        assert!(m.params().get("refiner/null").is_some());
    }

    #[test]
    fn adding_projection_appends_parameters() {
        let mut m = RobinModel::new(ModelConfig::default(), 8, 1).unwrap();
        let before: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
        m.add_video_projection(&mut Rng::new(2)).unwrap();
        let after: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(after[..before.len()], before[..]);
        assert_eq!(&after[before.len()..], ["video_proj/weight", "video_proj/bias"]);
        assert_eq!(m.stage(), 2);
        assert!(m.add_video_projection(&mut Rng::new(2)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = RobinModel::new(ModelConfig::tiny(), 4, 5).unwrap();
        let b = RobinModel::new(ModelConfig::tiny(), 4, 5).unwrap();
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(RobinModel::new(bad, 8, 0), Err(Error::Config(_))));
        let bad = ModelConfig { patch_size: 0, ..ModelConfig::default() };
        assert!(RobinModel::new(bad, 8, 0).is_err());
    }
}
