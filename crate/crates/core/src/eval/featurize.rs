use crate::error::{Error, Result};
use crate::eval::metrics::{ClassDistribution, EmbeddingSet};
use crate::Rng;

/// Maps raw samples (flattened latents) to embedding vectors.
pub trait Featurizer {
    /// Identifies the extractor in reports; numbers are comparable only
    /// between runs with the same id.
    fn id(&self) -> String;
    fn embed(&self, sample: &[f64]) -> Result<Vec<f64>>;

    fn embed_set(&self, samples: &EmbeddingSet) -> Result<EmbeddingSet> {
        let rows = samples.rows().map(|r| self.embed(r)).collect::<Result<Vec<_>>>()?;
        EmbeddingSet::from_rows(&rows, format!("{}:{}", self.id(), samples.label))
    }
}

/// `x -> x W`, `W ~ N(0, 1/d_in)` drawn from a seed.
#[derive(Debug, Clone)]
pub struct LinearFeaturizer {
    pub seed: u64,
    pub d_in: usize,
    pub d_out: usize,
    weights: Vec<f64>,
}

impl LinearFeaturizer {
    pub fn new(seed: u64, d_in: usize, d_out: usize) -> Self {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        let weights = Rng::new(seed).normals(d_in * d_out).into_iter().map(|v| v * std).collect();
        LinearFeaturizer {
            seed,
            d_in,
            d_out,
            weights,
        }
    }
}

impl Featurizer for LinearFeaturizer {
    fn id(&self) -> String {
        format!("linear-{}x{}-seed{}", self.d_in, self.d_out, self.seed)
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Shape {
                op: "featurize",
                lhs: vec![x.len()],
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let mut out = vec![0.0; self.d_out];
        for (i, xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }
}

/// Softmax over a seeded random linear map: the stand-in class predictor
/// for KL and IS.
#[derive(Debug, Clone)]
pub struct SoftmaxClassifier {
    pub logits: LinearFeaturizer,
}

impl SoftmaxClassifier {
    pub fn new(seed: u64, d_in: usize, classes: usize) -> Self {
        SoftmaxClassifier {
            logits: LinearFeaturizer::new(seed, d_in, classes),
        }
    }

    pub fn id(&self) -> String {
        format!("softmax-{}", self.logits.id())
    }

    pub fn classify(&self, x: &[f64]) -> Result<ClassDistribution> {
        let z = self.logits.embed(x)?;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        ClassDistribution::new(e.iter().map(|v| v / s).collect())
    }

    pub fn classify_set(&self, s: &EmbeddingSet) -> Result<Vec<ClassDistribution>> {
        s.rows().map(|r| self.classify(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn featurizer_is_seeded_and_linear() {
        let f = LinearFeaturizer::new(3, 4, 2);
        let g = LinearFeaturizer::new(3, 4, 2);
        let x = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(f.embed(&x).unwrap(), g.embed(&x).unwrap());
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (f.embed(&x).unwrap(), f.embed(&x2).unwrap());
        for (a, b) in a.iter().zip(&b) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        assert!(f.embed(&[1.0]).is_err());
    }

    #[test]
    fn classifier_outputs_distributions() {
        let c = SoftmaxClassifier::new(1, 3, 5);
        let d = c.classify(&[100.0, -50.0, 3.0]).unwrap();
        assert_eq!(d.classes(), 5);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
