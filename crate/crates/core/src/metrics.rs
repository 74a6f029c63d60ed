//! Evaluation measures comparing inferred to ground-truth networks and
//! epidemic parameters, plus the uniform random baseline.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::epidemic::PathogenParams;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// All measures for one inferred network; `pr_auc` is absent when the ground
/// truth is weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub spectral_similarity: f64,
    pub pearson: f64,
    pub jaccard: f64,
    pub pr_auc: Option<f64>,
    pub rmse_beta: f64,
    pub rmse_inv_gamma: f64,
    pub sparsity_index: f64,
}

/// Cosine similarity of the two eigenvalue spectra (real parts, sorted
/// descending). Either spectrum being numerically zero yields 0.
pub fn spectral_similarity(a: &Mat, a_hat: &Mat) -> Result<f64> {
    if a.shape() != a_hat.shape() || a.rows != a.cols {
        return Err(Error::ShapeMismatch {
            op: "spectral_similarity",
            lhs: a.shape(),
            rhs: a_hat.shape(),
        });
    }
    let la = eigenvalue_embedding(a)?;
    let lb = eigenvalue_embedding(a_hat)?;
    let na: f64 = la.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = lb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Ok(0.0);
    }
    let dot: f64 = la.iter().zip(&lb).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

fn eigenvalue_embedding(m: &Mat) -> Result<Vec<f64>> {
    let n = m.rows;
    let dm = DMatrix::from_row_slice(n, n, &m.data);
    let schur = nalgebra::linalg::Schur::try_new(dm, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::EigenFailure("Schur iteration did not converge".into()))?;
    let mut re: Vec<f64> = schur.complex_eigenvalues().iter().map(|c| c.re).collect();
    re.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(re)
}

/// Pearson correlation over all n^2 entries of both matrices. A constant
/// matrix has no correlation to speak of; that degenerate case returns 0.
pub fn pearson(a: &Mat, a_hat: &Mat) -> Result<f64> {
    if a.shape() != a_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: a.shape(),
            rhs: a_hat.shape(),
        });
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = a_hat.data.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.data.iter().zip(&a_hat.data) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va < 1e-300 || vb < 1e-300 {
        log::warn!("pearson on a constant matrix; returning 0");
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Weighted Jaccard: sum of elementwise minima over sum of maxima, diagonal
/// excluded. Two all-zero matrices are identical, hence 1.
pub fn jaccard(a: &Mat, a_hat: &Mat) -> Result<f64> {
    if a.shape() != a_hat.shape() || a.rows != a.cols {
        return Err(Error::ShapeMismatch {
            op: "jaccard",
            lhs: a.shape(),
            rhs: a_hat.shape(),
        });
    }
    let n = a.rows;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            num += a[(i, j)].min(a_hat[(i, j)]);
            den += a[(i, j)].max(a_hat[(i, j)]);
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Area under the precision-recall curve for ranked off-diagonal link
/// recovery against a binary truth. Equal scores are grouped so tie order
/// cannot matter.
pub fn pr_auc(a_binary: &Mat, scores: &Mat) -> Result<f64> {
    if a_binary.shape() != scores.shape() || a_binary.rows != a_binary.cols {
        return Err(Error::ShapeMismatch {
            op: "pr_auc",
            lhs: a_binary.shape(),
            rhs: scores.shape(),
        });
    }
    let n = a_binary.rows;
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n * (n - 1));
    let mut positives = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = a_binary[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::DomainError {
                    op: "pr_auc",
                    msg: format!("ground truth entry {v} is not binary"),
                });
            }
            let label = v == 1.0;
            positives += label as usize;
            pairs.push((scores[(i, j)], label));
        }
    }
    if positives == 0 {
        return Err(Error::DomainError {
            op: "pr_auc",
            msg: "ground truth has no links".into(),
        });
    }
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());

    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut prev_precision: Option<f64> = None;
    let mut idx = 0;
    while idx < pairs.len() {
        let score = pairs[idx].0;
        while idx < pairs.len() && pairs[idx].0 == score {
            if pairs[idx].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        // The curve starts at recall 0 with the first group's precision.
        let prev_p = prev_precision.unwrap_or(precision);
        auc += (recall - prev_recall) * 0.5 * (precision + prev_p);
        prev_recall = recall;
        prev_precision = Some(precision);
    }
    Ok(auc)
}

/// Points of the precision-recall curve, one per tie group, for plotting.
pub fn pr_curve(a_binary: &Mat, scores: &Mat) -> Result<Vec<(f64, f64)>> {
    let n = a_binary.rows;
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n * (n - 1));
    let mut positives = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let label = a_binary[(i, j)] != 0.0;
                positives += label as usize;
                pairs.push((scores[(i, j)], label));
            }
        }
    }
    if positives == 0 {
        return Err(Error::DomainError {
            op: "pr_curve",
            msg: "ground truth has no links".into(),
        });
    }
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut idx = 0;
    while idx < pairs.len() {
        let score = pairs[idx].0;
        while idx < pairs.len() && pairs[idx].0 == score {
            if pairs[idx].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push((
            tp as f64 / positives as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    Ok(points)
}

/// RMSE of the node-mean epidemic parameters against truth, across
/// pathogens. Recovery rates are compared as infectious periods 1/gamma.
pub fn rmse_params(
    beta_hat: &Mat,
    gamma_hat: &Mat,
    truth: &[PathogenParams],
) -> Result<(f64, f64)> {
    let k = truth.len();
    if beta_hat.rows != k || gamma_hat.rows != k || beta_hat.cols != gamma_hat.cols {
        return Err(Error::ShapeMismatch {
            op: "rmse_params",
            lhs: beta_hat.shape(),
            rhs: gamma_hat.shape(),
        });
    }
    let n = beta_hat.cols as f64;
    let mut sq_beta = 0.0;
    let mut sq_inv_gamma = 0.0;
    for (l, params) in truth.iter().enumerate() {
        let beta_mean = beta_hat.row(l).iter().sum::<f64>() / n;
        let gamma_mean = gamma_hat.row(l).iter().sum::<f64>() / n;
        sq_beta += (beta_mean - params.beta).powi(2);
        sq_inv_gamma += (1.0 / gamma_mean - 1.0 / params.gamma).powi(2);
    }
    Ok(((sq_beta / k as f64).sqrt(), (sq_inv_gamma / k as f64).sqrt()))
}

/// Hoyer sparsity index over all N = n^2 entries, in [0, 1]; a zero matrix
/// is maximally sparse by convention.
pub fn sparsity_index(m: &Mat) -> f64 {
    let n = m.data.len() as f64;
    let l1: f64 = m.data.iter().map(|v| v.abs()).sum();
    let l2: f64 = m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return 1.0;
    }
    (n.sqrt() - l1 / l2) / (n.sqrt() - 1.0)
}

/// Uniform(0, 1) scores off the diagonal, unit diagonal; the RND baseline.
pub fn random_baseline(n: usize, rng_seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = if i == j { 1.0 } else { rng.random::<f64>() };
        }
    }
    m
}

/// True when the nonzero entries take more than one distinct value, i.e. the
/// network carries real weights rather than one uniform rate.
pub fn is_weighted_truth(a: &Mat) -> bool {
    let mut first_nonzero: Option<f64> = None;
    for &v in &a.data {
        if v != 0.0 {
            match first_nonzero {
                None => first_nonzero = Some(v),
                Some(w) if w != v => return true,
                _ => {}
            }
        }
    }
    false
}
