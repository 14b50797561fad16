//! Encode a waveform to latent frames, cut into patches, and back.

use robin::codec::{patchify, unpatchify, Codec, CodecSpec, Waveform};

fn main() -> robin::Result<()> {
    let codec = Codec::new(CodecSpec::default())?;
    let samples: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
    let w = Waveform::new(samples, 16_000)?;

    let z = codec.encode(&w)?;
    let m = patchify(&z, 4)?;
    println!("{} samples -> {} frames x {} channels -> {} patches of {}", w.samples.len(), z.n_frames(), z.k, m.n, m.p);

    let back = codec.decode(&unpatchify(&m), 16_000)?;
    let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("roundtrip max error {err:.1e}");
    Ok(())
}
