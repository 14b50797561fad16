//! Distribution metrics on two Gaussian clouds.

use robin::config::EvalConfig;
use robin::eval::{evaluate, frechet_distance, EmbeddingSet, EvalInputs};
use robin::Rng;

fn main() -> robin::Result<()> {
    let mut rng = Rng::new(4);
    let real = EmbeddingSet::new(rng.normals(500 * 4), 4, "real")?;
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let fake = EmbeddingSet::new(rng.normals(500 * 4).iter().map(|v| v + shift).collect(), 4, "fake")?;
        let fd = frechet_distance(&real, &fake)?;
        let (report, _) = evaluate(&EvalInputs { real: &real, fake: &fake, paired: None }, &EvalConfig::default())?;
        println!(
            "shift {shift}: FD {fd:.3} (expected {:.3}), density {:.3}, coverage {:.3}, KL {:.4}",
            4.0 * shift * shift,
            report.density,
            report.coverage,
            report.kl
        );
    }
    Ok(())
}
