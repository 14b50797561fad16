//! Run configuration: a TOML file with one table per concern. Every key has
//! a default and unknown keys are rejected.
//!
//! ```toml
//! [model]
//! d = 32
//! d_q = 16
//! heads = 4
//! n_sem = 2
//! n_rite = 1
//! n_ale = 1
//! n_dit = 2
//! mlp_mult = 2
//! vocab = 32
//! d_v = 8
//! patch_size = 4
//! fsq_levels = 4
//! fsq_delta = 0.25
//!
//! [codec]
//! frame_size = 8
//! k = 8
//! seed = 1592639710
//!
//! [flow]
//! euler_steps = 20
//! cfg_scale = 2.0
//! cond_drop_prob = 0.1
//!
//! [train]
//! stage = 1
//! steps = 3000
//! batch_size = 4
//! peak_lr = 0.006
//! warmup_frac = 0.1
//! weight_decay = 0.01
//! seed = 0
//! eval_every = 50
//! grad_clip = 1.0
//!
//! [data]
//! text_len = 4
//! video_frames = 4
//! frames = 16
//!
//! [eval]
//! density_k = 3
//! is_splits = 1
//! classes = 10
//!
//! [paths]
//! out = "runs"
//! ```
//!
//! The config hash (first 16 hex digits of SHA-256 over the canonical
//! serialization) is recorded in every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{short_hash, Architecture};
use crate::codec::CodecSpec;
use crate::data::SynthDims;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refiner::FlowConfig;
use crate::trainer::TrainConfig;

/// Sizes of the synthetic task that are not fixed by the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub text_len: usize,
    pub video_frames: usize,
    /// Latent frames per example.
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            text_len: 4,
            video_frames: 4,
            frames: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbours for density/coverage.
    pub density_k: usize,
    pub is_splits: usize,
    /// Classes of the built-in classifier used for KL and IS.
    pub classes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            density_k: 3,
            is_splits: 1,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub codec: CodecSpec,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Config {
    /// The desk-scale defaults.
    pub fn desk() -> Self {
        Config::default()
    }

    /// Full-scale dimensions and budget. Far too large to run here; kept so
    /// the numbers live in one place.
    pub fn paper() -> Self {
        Config {
            model: ModelConfig::paper_scale(),
            codec: CodecSpec { frame_size: 64, k: 64, ..CodecSpec::default() },
            train: TrainConfig::paper_stage1(),
            ..Config::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML file, or a named preset written as `preset:<name>`.
    pub fn load(path: &Path) -> Result<Self> {
        if let Some(name) = path.to_str().and_then(|s| s.strip_prefix("preset:")) {
            return Config::preset(name);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        crate::codec::Codec::new(self.codec)?;
        self.flow.validate()?;
        self.train.validate()?;
        if self.data.text_len == 0 || self.data.video_frames == 0 || self.data.frames == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if self.eval.density_k == 0 || self.eval.is_splits == 0 || self.eval.classes < 2 {
            return Err(Error::Config("eval.density_k and eval.is_splits must be positive, eval.classes >= 2".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        short_hash(self.to_toml().as_bytes())
    }

    /// Hash of everything the parameter layout depends on.
    pub fn arch_hash(&self) -> String {
        Architecture {
            model: self.model,
            k: self.codec.k,
            video: false,
        }
        .hash()
    }

    pub fn synth_dims(&self) -> SynthDims {
        SynthDims {
            vocab: self.model.vocab,
            text_len: self.data.text_len,
            video_frames: self.data.video_frames,
            d_v: self.model.d_v,
            frames: self.data.frames,
            k: self.codec.k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn documented_example_parses_to_defaults() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(Config::from_toml(&doc).unwrap(), Config::default());
    }

    #[test]
    fn serialization_roundtrips() {
        let c = Config::paper();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[model]\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(Config::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(Config::from_toml("[model]\nheads = 5\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[flow]\neuler_steps = 0\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[train]\nwarmup_frac = 1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.arch_hash(), b.arch_hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn presets() {
        assert_eq!(Config::load(Path::new("preset:desk")).unwrap(), Config::desk());
        assert_eq!(Config::preset("paper").unwrap().model.d, 1024);
        assert!(Config::preset("huge").is_err());
    }
}
