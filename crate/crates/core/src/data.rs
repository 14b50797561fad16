//! Synthetic paired conditioning/target data and manifest I/O.
//!
//! Targets are a deterministic function of the conditioning, so a model that
//! learns the mapping can be checked against ground truth:
//!
//! * every vocabulary id owns a seeded signature, a `[frames, k]` Gaussian
//!   array; the text part of a target is the sum of the signatures of its
//!   ids divided by `sqrt(len)`;
//! * in text+video mode each example also draws video features `[t, d_v]`,
//!   and a fixed seeded readout maps the flattened features to a
//!   `[frames, k]` video part. Text and video parts are mixed with weight
//!   `1/sqrt(2)` each, and prompts are shared between pairs of examples so
//!   the video part cannot be recovered from text alone.
//!
//! Manifests are JSON Lines, one record per line with fields `id`,
//! `text_ids`, optional `video_path` and `latent_path`; paths are relative to
//! the manifest's directory and point at [`crate::container`] files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::LatentSequence;
use crate::container::{self, Array};
use crate::error::{Error, Result};
use crate::Rng;

/// Token id reserved for "no text"; synthetic prompts never use it.
pub const NULL_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
}

impl TextTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<TextTokens> {
        if ids.is_empty() {
            return Err(Error::Data("text needs at least one token".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(TextTokens { ids, vocab_size })
    }

    /// Same length, every id replaced by [`NULL_TOKEN`].
    pub fn zeroed(&self) -> TextTokens {
        TextTokens {
            ids: vec![NULL_TOKEN; self.ids.len()],
            vocab_size: self.vocab_size,
        }
    }
}

/// Framewise visual features, row-major `[t, d_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub data: Vec<f64>,
    pub t: usize,
    pub d_v: usize,
}

impl VideoFeatures {
    pub fn new(data: Vec<f64>, t: usize, d_v: usize) -> Result<VideoFeatures> {
        if t == 0 || d_v == 0 || data.len() != t * d_v {
            return Err(Error::Data(format!(
                "{} video values do not form [{t}, {d_v}]",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("video features must be finite".into()));
        }
        Ok(VideoFeatures { data, t, d_v })
    }

    pub fn zeroed(&self) -> VideoFeatures {
        VideoFeatures {
            data: vec![0.0; self.data.len()],
            t: self.t,
            d_v: self.d_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: TextTokens,
    pub video: Option<VideoFeatures>,
    pub latents: LatentSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    TextOnly,
    TextVideo,
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthMode::TextOnly => "text_only",
            SynthMode::TextVideo => "text_video",
        })
    }
}

impl std::str::FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" => Ok(SynthMode::TextOnly),
            "text_video" => Ok(SynthMode::TextVideo),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected text_only or text_video)"
            ))),
        }
    }
}

/// Sizes of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDims {
    pub vocab: usize,
    pub text_len: usize,
    pub video_frames: usize,
    pub d_v: usize,
    /// Latent frames per example.
    pub frames: usize,
    pub k: usize,
}

impl Default for SynthDims {
    fn default() -> Self {
        SynthDims {
            vocab: 32,
            text_len: 4,
            video_frames: 4,
            d_v: 8,
            frames: 16,
            k: 8,
        }
    }
}

impl SynthDims {
    fn validate(&self) -> Result<()> {
        let d = self;
        if d.vocab < 2 || d.text_len == 0 || d.video_frames == 0 || d.d_v == 0 || d.frames == 0 || d.k == 0 {
            return Err(Error::Config(format!(
                "synthetic dims must be positive with vocab >= 2, got {d:?}"
            )));
        }
        Ok(())
    }
}

/// Builds `count` examples in memory.
pub fn synth_examples(seed: u64, count: usize, mode: SynthMode, dims: SynthDims) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::Usage("count must be at least 1".into()));
    }
    dims.validate()?;
    let width = dims.frames * dims.k;
    let mut rng = Rng::new(seed);
    // Signatures and readout are drawn first and in the same order for both
    // modes, so text-only and text+video tasks with one seed share them.
    let signatures: Vec<Vec<f64>> = (0..dims.vocab).map(|_| rng.normals(width)).collect();
    let vin = dims.video_frames * dims.d_v;
    let readout_std = 1.0 / (vin as f64).sqrt();
    let readout: Vec<f64> = rng.normals(vin * width).into_iter().map(|v| v * readout_std).collect();

    let mut prompt_rng = rng.fork();
    let mut video_rng = rng.fork();
    let pool = match mode {
        SynthMode::TextOnly => count,
        SynthMode::TextVideo => count.div_ceil(2),
    };
    let prompts: Vec<Vec<usize>> = (0..pool)
        .map(|_| {
            (0..dims.text_len)
                .map(|_| 1 + prompt_rng.below(dims.vocab - 1))
                .collect()
        })
        .collect();

    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let ids = prompts[j % pool].clone();
        let video = match mode {
            SynthMode::TextOnly => None,
            SynthMode::TextVideo => Some(VideoFeatures::new(
                video_rng.normals(vin),
                dims.video_frames,
                dims.d_v,
            )?),
        };
        let text = TextTokens::new(ids, dims.vocab)?;
        let latents = synth_target(&signatures, &readout, &text, video.as_ref(), width);
        out.push(Example {
            id: format!("ex{j:04}"),
            text,
            video,
            latents: LatentSequence::new(latents, dims.k)?,
        });
    }
    Ok(out)
}

fn synth_target(
    signatures: &[Vec<f64>],
    readout: &[f64],
    text: &TextTokens,
    video: Option<&VideoFeatures>,
    width: usize,
) -> Vec<f64> {
    let mut target = vec![0.0; width];
    let text_scale = 1.0 / (text.ids.len() as f64).sqrt();
    for &id in &text.ids {
        for (t, s) in target.iter_mut().zip(&signatures[id]) {
            *t += s * text_scale;
        }
    }
    if let Some(v) = video {
        let mix = std::f64::consts::FRAC_1_SQRT_2;
        for t in target.iter_mut() {
            *t *= mix;
        }
        for (i, &f) in v.data.iter().enumerate() {
            let row = &readout[i * width..(i + 1) * width];
            for (t, r) in target.iter_mut().zip(row) {
                *t += mix * f * r;
            }
        }
    }
    target
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub text_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_path: Option<String>,
    pub latent_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory that record paths are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Reads every referenced container into memory.
    pub fn load_examples(&self, vocab_size: usize) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| {
                let lat = container::read(&self.resolve(&r.latent_path))?;
                if lat.shape.len() != 2 {
                    return Err(Error::Data(format!(
                        "{}: latents must be [frames, k], got {:?}",
                        r.latent_path, lat.shape
                    )));
                }
                let video = match &r.video_path {
                    Some(p) => {
                        let v = container::read(&self.resolve(p))?;
                        if v.shape.len() != 2 {
                            return Err(Error::Data(format!(
                                "{p}: video features must be [t, d_v], got {:?}",
                                v.shape
                            )));
                        }
                        Some(VideoFeatures::new(v.data, v.shape[0], v.shape[1])?)
                    }
                    None => None,
                };
                let k = lat.shape[1];
                Ok(Example {
                    id: r.id.clone(),
                    text: TextTokens::new(r.text_ids.clone(), vocab_size)
                        .map_err(|e| Error::Data(format!("record `{}`: {e}", r.id)))?,
                    video,
                    latents: LatentSequence::new(lat.data, k)?,
                })
            })
            .collect()
    }
}

/// Writes example files under `dir` (`latents/<id>.bin`, `video/<id>.bin`)
/// and the manifest at `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, examples: &[Example]) -> Result<Manifest> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("latents"))?;
    if examples.iter().any(|e| e.video.is_some()) {
        mkdir(&dir.join("video"))?;
    }
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let latent_path = format!("latents/{}.bin", ex.id);
        container::write(
            &dir.join(&latent_path),
            &Array::new(vec![ex.latents.n_frames(), ex.latents.k], ex.latents.frames.clone())?,
        )?;
        let video_path = match &ex.video {
            Some(v) => {
                let p = format!("video/{}.bin", ex.id);
                container::write(&dir.join(&p), &Array::new(vec![v.t, v.d_v], v.data.clone())?)?;
                Some(p)
            }
            None => None,
        };
        records.push(Record {
            id: ex.id.clone(),
            text_ids: ex.text.ids.clone(),
            video_path,
            latent_path,
        });
    }
    let manifest = Manifest {
        records,
        base_dir: dir.to_path_buf(),
    };
    save_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Generates a synthetic task and writes it to `dir`.
pub fn synth_task(seed: u64, count: usize, mode: SynthMode, dims: SynthDims, dir: &Path) -> Result<Manifest> {
    let examples = synth_examples(seed, count, mode, dims)?;
    write_dataset(dir, &examples)
}

pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in &m.records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a manifest, enforcing unique ids and existing referenced files.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{lineno}: malformed record: {e}", path.display())))?;
        if let Some(first) = seen.insert(r.id.clone(), lineno) {
            return Err(Error::Data(format!(
                "{}: duplicate id `{}` on lines {first} and {lineno}",
                path.display(),
                r.id
            )));
        }
        for rel in std::iter::once(&r.latent_path).chain(r.video_path.iter()) {
            let p = base_dir.join(rel);
            if !p.is_file() {
                return Err(Error::Data(format!(
                    "{}:{lineno}: referenced file {} does not exist",
                    path.display(),
                    p.display()
                )));
            }
        }
        records.push(r);
    }
    Ok(Manifest { records, base_dir })
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashing word tokenizer: lowercase alphanumeric words mapped into
/// `1..vocab_size` by FNV-1a. Id 0 is never produced.
pub fn tokenize(prompt: &str, vocab_size: usize) -> Result<TextTokens> {
    if vocab_size < 2 {
        return Err(Error::Config("tokenizer needs a vocabulary of at least 2".into()));
    }
    let ids: Vec<usize> = prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| 1 + (fnv1a(&w.to_lowercase()) % (vocab_size as u64 - 1)) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::Usage(format!("prompt `{prompt}` has no words")));
    }
    TextTokens::new(ids, vocab_size)
}
