use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::error::{Error, Result};
use crate::eval::featurize::{Featurizer, LinearFeaturizer, SoftmaxClassifier};
use crate::eval::metrics::{
    cosine_alignment, density_coverage, frechet_distance, inception_score, kl_divergence, EmbeddingSet,
};

/// Keys of the metric report, in output order.
pub const REPORT_KEYS: [&str; 8] = ["fad", "fd", "kl", "is_mean", "is_std", "ib", "density", "coverage"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub fad: f64,
    pub fd: f64,
    pub kl: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub ib: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Raw samples to score. Rows of `real` and `fake` are paired for KL;
/// `paired`, when given, holds externally computed embeddings of the other
/// modality for the alignment score.
pub struct EvalInputs<'a> {
    pub real: &'a EmbeddingSet,
    pub fake: &'a EmbeddingSet,
    pub paired: Option<&'a EmbeddingSet>,
}

/// The built-in extractors, all seeded random maps over flattened samples.
pub struct Extractors {
    pub fad: LinearFeaturizer,
    pub fd: LinearFeaturizer,
    pub classifier: SoftmaxClassifier,
    pub ib: LinearFeaturizer,
}

impl Extractors {
    pub fn new(d_in: usize, classes: usize, ib_dim: usize) -> Self {
        Extractors {
            fad: LinearFeaturizer::new(0xfad, d_in, 8),
            fd: LinearFeaturizer::new(0xfd, d_in, 16),
            classifier: SoftmaxClassifier::new(0xc1a55, d_in, classes),
            ib: LinearFeaturizer::new(0x1b, d_in, ib_dim),
        }
    }

    pub fn ids(&self) -> serde_json::Value {
        serde_json::json!({
            "fad": self.fad.id(),
            "fd": self.fd.id(),
            "classifier": self.classifier.id(),
            "ib": self.ib.id(),
        })
    }
}

pub fn evaluate(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<(MetricReport, Extractors)> {
    let (real, fake) = (inputs.real, inputs.fake);
    if real.dim != fake.dim {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![real.n, real.dim],
            rhs: vec![fake.n, fake.dim],
        });
    }
    if real.n != fake.n {
        return Err(Error::Data(format!(
            "reference and generated sets must be paired, got {} and {} rows",
            real.n, fake.n
        )));
    }
    let ib_dim = inputs.paired.map_or(8, |p| p.dim);
    let ex = Extractors::new(real.dim, cfg.classes, ib_dim);

    let (fad_real, fad_fake) = (ex.fad.embed_set(real)?, ex.fad.embed_set(fake)?);
    let fad = frechet_distance(&fad_real, &fad_fake)?;
    let fd = frechet_distance(&ex.fd.embed_set(real)?, &ex.fd.embed_set(fake)?)?;

    let p_ref = ex.classifier.classify_set(real)?;
    let p_gen = ex.classifier.classify_set(fake)?;
    let kl = kl_divergence(&p_ref, &p_gen)?;
    let (is_mean, is_std) = inception_score(&p_gen, cfg.is_splits)?;

    let ib_fake = ex.ib.embed_set(fake)?;
    let ib = match inputs.paired {
        Some(p) => cosine_alignment(&ib_fake, p)?,
        None => cosine_alignment(&ib_fake, &ex.ib.embed_set(real)?)?,
    };
    let (density, coverage) = density_coverage(&fad_real, &fad_fake, cfg.density_k)?;
    Ok((
        MetricReport {
            fad,
            fd,
            kl,
            is_mean,
            is_std,
            ib,
            density,
            coverage,
        },
        ex,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn set(seed: u64, n: usize, d: usize) -> EmbeddingSet {
        EmbeddingSet::new(Rng::new(seed).normals(n * d), d, "s").unwrap()
    }

    #[test]
    fn identical_sets() {
        let a = set(1, 12, 6);
        let (r, _) = evaluate(&EvalInputs { real: &a, fake: &a, paired: None }, &EvalConfig::default()).unwrap();
        assert!(r.fad <= 1e-8 && r.fd <= 1e-8);
        assert_eq!(r.coverage, 1.0);
        assert!(r.kl.abs() < 1e-15);
        assert!((r.ib - 1.0).abs() < 1e-12);
        assert!(r.is_mean >= 1.0);
    }

    #[test]
    fn report_has_exactly_the_documented_keys() {
        let (a, b) = (set(1, 10, 4), set(2, 10, 4));
        let (r, _) = evaluate(&EvalInputs { real: &a, fake: &b, paired: None }, &EvalConfig::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut want = REPORT_KEYS.to_vec();
        want.sort();
        let mut got = keys.clone();
        got.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn unpaired_sets_are_rejected() {
        let (a, b) = (set(1, 10, 4), set(2, 9, 4));
        assert!(evaluate(&EvalInputs { real: &a, fake: &b, paired: None }, &EvalConfig::default()).is_err());
    }

    #[test]
    fn external_paired_embeddings_set_the_alignment_width() {
        let (a, b) = (set(1, 10, 4), set(2, 10, 4));
        let p = set(3, 10, 5);
        let (r, ex) = evaluate(&EvalInputs { real: &a, fake: &b, paired: Some(&p) }, &EvalConfig::default()).unwrap();
        assert!((-1.0..=1.0).contains(&r.ib));
        assert_eq!(ex.ib.d_out, 5);
    }
}
