use nalgebra::{DMatrix, DVector};

use crate::container::Array;
use crate::error::{Error, Result};

/// `n` vectors of width `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<f64>, dim: usize, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if dim == 0 || vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{label}: {} values do not form rows of width {dim}",
                vectors.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{label}: value {i} is not finite")));
        }
        Ok(EmbeddingSet {
            n: vectors.len() / dim,
            vectors,
            dim,
            label,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data(format!("{label}: rows have different widths")));
        }
        EmbeddingSet::new(rows.concat(), dim, label)
    }

    /// Rows are the leading axis; everything else is flattened.
    pub fn from_array(a: &Array, label: impl Into<String>) -> Result<Self> {
        EmbeddingSet::new(a.data.clone(), a.row_len(), label)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.vectors)
    }
}

/// Mean and unbiased covariance.
fn gaussian_fit(s: &EmbeddingSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = s.matrix();
    let mean = DVector::from_iterator(s.dim, (0..s.dim).map(|j| x.column(j).mean()));
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (s.n as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix, negative
/// eigenvalues clamped to 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between `N(mu_a, cov_a)` and `N(mu_b, cov_b)`:
/// `|mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))`, with a
/// `1e-10` ridge on both covariances.
pub fn frechet_from_stats(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let d = mu_a.len();
    let ridge = DMatrix::<f64>::identity(d, d) * 1e-10;
    let ca = cov_a + &ridge;
    let cb = cov_b + &ridge;
    let ra = sqrtm_psd(&ca);
    let inner = &ra * &cb * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0)
}

pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Shape {
            op: "frechet_distance",
            lhs: vec![a.n, a.dim],
            rhs: vec![b.n, b.dim],
        });
    }
    if a.n < 2 || b.n < 2 {
        return Err(Error::Data(format!(
            "Fréchet distance needs at least 2 vectors per set, got {} and {}",
            a.n, b.n
        )));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    Ok(frechet_from_stats(&ma, &ca, &mb, &cb))
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("class distribution is empty".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Data("class probabilities must be finite and non-negative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("class probabilities sum to {s}, not 1")));
        }
        Ok(ClassDistribution { probs })
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

const KL_FLOOR: f64 = 1e-10;

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / q.max(KL_FLOOR)).ln())
        .sum()
}

/// Mean over pairs of `KL(p_i || q_i)`, with `q` floored at `1e-10`.
pub fn kl_divergence(p_set: &[ClassDistribution], q_set: &[ClassDistribution]) -> Result<f64> {
    if p_set.len() != q_set.len() || p_set.is_empty() {
        return Err(Error::Data(format!(
            "KL needs equally many non-zero paired distributions, got {} and {}",
            p_set.len(),
            q_set.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, q)) in p_set.iter().zip(q_set).enumerate() {
        if p.classes() != q.classes() {
            return Err(Error::Data(format!(
                "pair {i}: {} vs {} classes",
                p.classes(),
                q.classes()
            )));
        }
        total += kl(&p.probs, &q.probs);
    }
    Ok(total / p_set.len() as f64)
}

/// `exp(mean_x KL(p(y|x) || p(y)))` per contiguous split; returns the mean
/// and population standard deviation over splits.
pub fn inception_score(dists: &[ClassDistribution], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::Data("inception score needs at least one split".into()));
    }
    let n = dists.len();
    if n < splits {
        return Err(Error::Data(format!("{n} distributions cannot form {splits} splits")));
    }
    let c = dists[0].classes();
    if dists.iter().any(|d| d.classes() != c) {
        return Err(Error::Data("distributions have different class counts".into()));
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &dists[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; c];
            for d in part {
                for (m, p) in marginal.iter_mut().zip(&d.probs) {
                    *m += p / part.len() as f64;
                }
            }
            let mean_kl = part.iter().map(|d| kl(&d.probs, &marginal)).sum::<f64>() / part.len() as f64;
            mean_kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-NN manifold density and coverage. A real point's radius is the distance
/// to its k-th nearest other real point; a point at exactly the radius counts
/// as inside.
pub fn density_coverage(real: &EmbeddingSet, fake: &EmbeddingSet, k: usize) -> Result<(f64, f64)> {
    if real.dim != fake.dim {
        return Err(Error::Shape {
            op: "density_coverage",
            lhs: vec![real.n, real.dim],
            rhs: vec![fake.n, fake.dim],
        });
    }
    if k == 0 || k >= real.n {
        return Err(Error::Data(format!(
            "k = {k} needs 1 <= k < number of real points ({})",
            real.n
        )));
    }
    let radii: Vec<f64> = (0..real.n)
        .map(|i| {
            let mut d: Vec<f64> = (0..real.n)
                .filter(|&j| j != i)
                .map(|j| dist(real.row(i), real.row(j)))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut inside = 0usize;
    let mut covered = vec![false; real.n];
    for f in fake.rows() {
        for (i, r) in real.rows().enumerate() {
            if dist(f, r) <= radii[i] {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k * fake.n) as f64;
    let coverage = covered.iter().filter(|c| **c).count() as f64 / real.n as f64;
    Ok((density, coverage))
}

/// Mean cosine similarity of paired rows.
pub fn cosine_alignment(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim != b.dim || a.n != b.n {
        return Err(Error::Shape {
            op: "cosine_alignment",
            lhs: vec![a.n, a.dim],
            rhs: vec![b.n, b.dim],
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..a.n {
        let (x, y) = (a.row(i), b.row(i));
        let (nx, ny) = (norm(x), norm(y));
        if nx == 0.0 {
            return Err(Error::Data(format!("{}: vector {i} has zero norm", a.label)));
        }
        if ny == 0.0 {
            return Err(Error::Data(format!("{}: vector {i} has zero norm", b.label)));
        }
        total += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
    }
    Ok(total / a.n as f64)
}
