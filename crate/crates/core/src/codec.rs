//! Latent codec and patching.
//!
//! The codec is a fixed orthogonal linear map applied to non-overlapping
//! frames of `frame_size` samples, producing `k = frame_size` latent
//! channels per frame. The matrix is the Q factor of a Gaussian matrix drawn
//! from the codec seed, with column signs fixed so that R has a positive
//! diagonal. Being orthogonal, the codec is exactly invertible and preserves
//! energy up to rounding.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSpec {
    pub frame_size: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for CodecSpec {
    fn default() -> Self {
        CodecSpec {
            frame_size: 8,
            k: 8,
            seed: 0x5eed_c0de,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
        if samples.is_empty() {
            return Err(Error::Data("waveform is empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("waveform sample {i} is not finite")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }
}

/// Latent frames, row-major `[frames, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub frames: Vec<f64>,
    pub k: usize,
    /// Waveform samples the frames stand for before right-padding; decoding
    /// trims to this length.
    pub source_len: usize,
}

impl LatentSequence {
    pub fn new(frames: Vec<f64>, k: usize) -> Result<LatentSequence> {
        if k == 0 || frames.is_empty() || !frames.len().is_multiple_of(k) {
            return Err(Error::Data(format!(
                "{} latent values do not form frames of {k} channels",
                frames.len()
            )));
        }
        Ok(LatentSequence {
            source_len: 0,
            frames,
            k,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.k
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.k..(i + 1) * self.k]
    }
}

/// Latent patches, row-major `[n, p, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub data: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub source_len: usize,
}

impl PatchSequence {
    pub fn patch(&self, i: usize) -> &[f64] {
        let w = self.p * self.k;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn from_patches(patches: &[Vec<f64>], p: usize, k: usize) -> Result<PatchSequence> {
        if patches.is_empty() || patches.iter().any(|m| m.len() != p * k) {
            return Err(Error::Data(format!("patches must be non-empty [{p}, {k}] blocks")));
        }
        Ok(PatchSequence {
            data: patches.concat(),
            n: patches.len(),
            p,
            k,
            source_len: 0,
        })
    }
}

/// Frame-level orthogonal codec built from a [`CodecSpec`].
#[derive(Debug, Clone)]
pub struct Codec {
    spec: CodecSpec,
    // [k, frame_size], row-major
    matrix: Vec<f64>,
}

impl Codec {
    pub fn new(spec: CodecSpec) -> Result<Codec> {
        if spec.frame_size == 0 || spec.k != spec.frame_size {
            return Err(Error::Config(format!(
                "codec needs k == frame_size > 0, got k={} frame_size={}",
                spec.k, spec.frame_size
            )));
        }
        let n = spec.frame_size;
        let mut rng = Rng::new(spec.seed);
        let g = DMatrix::from_row_slice(n, n, &rng.normals(n * n));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                matrix[i * n + j] = q[(i, j)];
            }
        }
        Ok(Codec { spec, matrix })
    }

    pub fn spec(&self) -> CodecSpec {
        self.spec
    }

    /// The `[k, frame_size]` encode matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Right-pads with zeros to a whole number of frames and maps each frame
    /// `w` to `Q w`.
    pub fn encode(&self, w: &Waveform) -> Result<LatentSequence> {
        if w.samples.is_empty() {
            return Err(Error::Data("cannot encode an empty waveform".into()));
        }
        let n = self.spec.frame_size;
        let frames = w.samples.len().div_ceil(n);
        let mut padded = w.samples.clone();
        padded.resize(frames * n, 0.0);
        let mut out = vec![0.0; frames * n];
        for f in 0..frames {
            let src = &padded[f * n..(f + 1) * n];
            for i in 0..n {
                let row = &self.matrix[i * n..(i + 1) * n];
                out[f * n + i] = row.iter().zip(src).map(|(a, b)| a * b).sum();
            }
        }
        Ok(LatentSequence {
            frames: out,
            k: n,
            source_len: w.samples.len(),
        })
    }

    /// Maps each frame `z` to `Qᵀ z` and trims to the recorded source length
    /// (all frames when none is recorded).
    pub fn decode(&self, z: &LatentSequence, sample_rate: u32) -> Result<Waveform> {
        let n = self.spec.frame_size;
        if z.k != n {
            return Err(Error::Shape {
                op: "decode",
                lhs: vec![z.n_frames(), z.k],
                rhs: vec![n, n],
            });
        }
        let frames = z.n_frames();
        let mut out = vec![0.0; frames * n];
        for f in 0..frames {
            let src = z.frame(f);
            for (i, &zi) in src.iter().enumerate() {
                let row = &self.matrix[i * n..(i + 1) * n];
                for j in 0..n {
                    out[f * n + j] += row[j] * zi;
                }
            }
        }
        if z.source_len > 0 && z.source_len <= out.len() {
            out.truncate(z.source_len);
        }
        Waveform::new(out, sample_rate)
    }
}

/// Cuts frames into patches of `p`, right-padding with zero frames.
pub fn patchify(z: &LatentSequence, p: usize) -> Result<PatchSequence> {
    if p == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let n = z.n_frames().div_ceil(p);
    let mut data = z.frames.clone();
    data.resize(n * p * z.k, 0.0);
    Ok(PatchSequence {
        data,
        n,
        p,
        k: z.k,
        source_len: z.source_len,
    })
}

/// Concatenates patches back along the frame axis (padding included).
pub fn unpatchify(m: &PatchSequence) -> LatentSequence {
    LatentSequence {
        frames: m.data.clone(),
        k: m.k,
        source_len: m.source_len,
    }
}
