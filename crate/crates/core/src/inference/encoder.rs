//! Topology encoders producing the inferred infection matrix.
//!
//! The deep encoder embeds every node-pathogen daily-case series with shared
//! linear maps, scores node pairs by per-channel cosine similarity of the
//! embeddings, and squashes the fused score plus a learnable bias through a
//! sigmoid. The fast encoder parameterizes the matrix entries directly.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;

const COSINE_EPSILON: f64 = 1e-12;

/// Learnable parameters of the deep topology encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DtiParams {
    /// (z*c) x T series embedding for the source role.
    pub w_u: Mat,
    pub b_u: Mat,
    /// (z*c) x T series embedding for the target role.
    pub w_v: Mat,
    pub b_v: Mat,
    /// 1 x c channel fusion.
    pub w_f: Mat,
    /// n x n infection bias.
    pub z_b: Mat,
    /// Symmetrization logit.
    pub zeta: Mat,
}

impl DtiParams {
    pub fn init(n: usize, t_days: usize, z: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = |std: f64, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).unwrap();
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| dist.sample(rng)).collect(),
            )
        };
        let embed_std = 1.0 / (t_days as f64).sqrt();
        DtiParams {
            w_u: normal(embed_std, z * c, t_days, rng),
            b_u: Mat::zeros(1, 1),
            w_v: normal(embed_std, z * c, t_days, rng),
            b_v: Mat::zeros(1, 1),
            w_f: normal(1.0 / (c as f64).sqrt(), 1, c, rng),
            z_b: normal(0.1, n, n, rng),
            zeta: Mat::zeros(1, 1),
        }
    }
}

/// Tape handles for one epoch's DTI leaves.
pub struct DtiVars {
    pub w_u: Var,
    pub b_u: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_f: Var,
    pub z_b: Var,
    pub zeta: Var,
}

impl DtiParams {
    pub fn leaves(&self, tape: &mut Tape) -> DtiVars {
        DtiVars {
            w_u: tape.leaf(&self.w_u),
            b_u: tape.leaf(&self.b_u),
            w_v: tape.leaf(&self.w_v),
            b_v: tape.leaf(&self.b_v),
            w_f: tape.leaf(&self.w_f),
            z_b: tape.leaf(&self.z_b),
            zeta: tape.leaf(&self.zeta),
        }
    }
}

/// Learnable parameters of the fast topology encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FtiParams {
    /// n x n entry logits.
    pub w_z: Mat,
}

impl FtiParams {
    pub fn init(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).unwrap();
        FtiParams {
            w_z: Mat::from_vec(n, n, (0..n * n).map(|_| dist.sample(rng)).collect()),
        }
    }
}

/// Off-diagonal mask and identity used to pin the diagonal at one.
fn diagonal_masks(tape: &mut Tape, n: usize) -> (Var, Var) {
    let mut off = Mat::filled(n, n, 1.0);
    for i in 0..n {
        off[(i, i)] = 0.0;
    }
    let off = tape.constant(&off);
    let eye = Mat::identity(n);
    let eye = tape.constant(&eye);
    (off, eye)
}

/// Deep encoder forward pass.
///
/// `series` is the observed daily-case tensor laid out pathogen-major as a
/// (k*n) x T constant: row l*n + i holds node i's series for pathogen l.
/// Returns the inferred infection matrix with unit diagonal; off-diagonal
/// entries live in (0, 1).
pub fn dti_forward(
    tape: &mut Tape,
    series: Var,
    params: &DtiVars,
    n: usize,
    k: usize,
    z: usize,
    c: usize,
    symmetrize: bool,
) -> Result<Var> {
    let (rows, t_days) = tape.shape(series);
    if rows != n * k {
        return Err(Error::ShapeMismatch {
            op: "dti_forward",
            lhs: (rows, t_days),
            rhs: (n * k, t_days),
        });
    }
    if tape.shape(params.w_u) != (z * c, t_days) || tape.shape(params.w_f) != (1, c) {
        return Err(Error::ShapeMismatch {
            op: "dti_forward",
            lhs: tape.shape(params.w_u),
            rhs: (z * c, t_days),
        });
    }

    // Embeddings for every node-pathogen series at once: (k*n) x (z*c).
    let w_u_t = tape.transpose(params.w_u);
    let w_v_t = tape.transpose(params.w_v);
    let eu_raw = tape.matmul(series, w_u_t)?;
    let eu = tape.add(eu_raw, params.b_u)?;
    let ev_raw = tape.matmul(series, w_v_t)?;
    let ev = tape.add(ev_raw, params.b_v)?;

    let eps = tape.scalar_constant(COSINE_EPSILON);
    let one = tape.scalar_constant(1.0);
    let inv_k = tape.scalar_constant(1.0 / k as f64);

    // Mean over pathogens of the per-channel cosine similarities, fused by
    // the channel weights, accumulated as a running sum.
    let mut fused: Option<Var> = None;
    for l in 0..k {
        let u_l = tape.slice_rows(eu, l * n, (l + 1) * n)?;
        let v_l = tape.slice_rows(ev, l * n, (l + 1) * n)?;
        for ch in 0..c {
            let u = tape.slice_cols(u_l, ch * z, (ch + 1) * z)?;
            let v = tape.slice_cols(v_l, ch * z, (ch + 1) * z)?;
            let dots = {
                let v_t = tape.transpose(v);
                tape.matmul(u, v_t)?
            };
            let nu = {
                let sq = tape.mul(u, u)?;
                let s = tape.sum_axis(sq, 1)?;
                tape.sqrt(s)?
            };
            let nv = {
                let sq = tape.mul(v, v)?;
                let s = tape.sum_axis(sq, 1)?;
                tape.sqrt(s)?
            };
            let nv_t = tape.transpose(nv);
            let outer = tape.matmul(nu, nv_t)?;
            let denom = tape.add(outer, eps)?;
            let sim = tape.div(dots, denom)?;
            let w_ch = tape.slice_cols(params.w_f, ch, ch + 1)?;
            let weighted = tape.mul(sim, w_ch)?;
            fused = Some(match fused {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
    }
    let fused = fused.expect("k and c are positive");
    let averaged = tape.mul(fused, inv_k)?;

    let biased = tape.add(averaged, params.z_b)?;
    let squashed = tape.sigmoid(biased);
    let (off_mask, eye) = diagonal_masks(tape, n);
    let off = tape.mul(squashed, off_mask)?;
    let z_hat = tape.add(off, eye)?;

    if !symmetrize {
        return Ok(z_hat);
    }
    // Blend with the transpose; the mixing weight is learned.
    let s = tape.sigmoid(params.zeta);
    let z_t = tape.transpose(z_hat);
    let w1 = tape.mul(z_hat, s)?;
    let s_c = tape.sub(one, s)?;
    let w2 = tape.mul(z_t, s_c)?;
    let blended = tape.add(w1, w2)?;
    Ok(blended)
}

/// Fast encoder forward pass: sigmoid of the entry logits, unit diagonal.
pub fn fti_forward(tape: &mut Tape, w_z: Var) -> Result<Var> {
    let (n, cols) = tape.shape(w_z);
    if n != cols {
        return Err(Error::ShapeMismatch {
            op: "fti_forward",
            lhs: (n, cols),
            rhs: (n, n),
        });
    }
    let squashed = tape.sigmoid(w_z);
    let (off_mask, eye) = diagonal_masks(tape, n);
    let off = tape.mul(squashed, off_mask)?;
    tape.add(off, eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn series_tensor(n: usize, k: usize, t: usize, f: impl Fn(usize, usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(k * n, t);
        for l in 0..k {
            for i in 0..n {
                for d in 0..t {
                    m[(l * n + i, d)] = f(i, l, d);
                }
            }
        }
        m
    }

    fn forward(
        params: &DtiParams,
        series: &Mat,
        n: usize,
        k: usize,
        z: usize,
        c: usize,
        symmetrize: bool,
    ) -> Mat {
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let x = tape.constant(series);
        let out = dti_forward(&mut tape, x, &vars, n, k, z, c, symmetrize).unwrap();
        tape.value_mat(out)
    }

    #[test]
    fn dti_diagonal_is_exactly_one() {
        let (n, k, t, z, c) = (4, 2, 10, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = DtiParams::init(n, t, z, c, &mut rng);
        let series = series_tensor(n, k, t, |i, l, d| ((i + 1) * (l + 1)) as f64 * 0.01 + d as f64 * 1e-3);
        let z_hat = forward(&params, &series, n, k, z, c, true);
        for i in 0..n {
            assert_eq!(z_hat[(i, i)], 1.0);
            for j in 0..n {
                assert!(z_hat[(i, j)] > 0.0 && z_hat[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn identical_series_and_shared_weights_give_unit_similarity() {
        let (n, k, t, z, c) = (2, 1, 8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = DtiParams::init(n, t, z, c, &mut rng);
        params.w_v = params.w_u.clone();
        params.b_v = params.b_u.clone();
        params.z_b = Mat::zeros(n, n);
        // Both nodes share one series; every cosine similarity is 1, so the
        // off-diagonal entries collapse to sigmoid(sum of fusion weights).
        let series = series_tensor(n, k, t, |_, _, d| 0.05 + 0.01 * d as f64);
        let z_hat = forward(&params, &series, n, k, z, c, false);
        let expect = {
            let s: f64 = params.w_f.data.iter().sum();
            1.0 / (1.0 + (-s).exp())
        };
        assert!((z_hat[(0, 1)] - expect).abs() < 1e-9, "{} vs {expect}", z_hat[(0, 1)]);
        assert!((z_hat[(1, 0)] - expect).abs() < 1e-9);
    }

    #[test]
    fn symmetrization_blends_with_transpose() {
        let (n, k, t, z, c) = (3, 2, 12, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = DtiParams::init(n, t, z, c, &mut rng);
        let series = series_tensor(n, k, t, |i, l, d| {
            0.01 * ((i * 7 + l * 3 + d) % 5) as f64 + 0.001 * i as f64
        });

        // zeta = 0 averages the matrix with its transpose: exactly symmetric.
        params.zeta = Mat::zeros(1, 1);
        let sym = forward(&params, &series, n, k, z, c, true);
        assert!(sym.is_symmetric(1e-15));

        // A huge zeta keeps the pre-symmetrization matrix.
        params.zeta = Mat::from_vec(1, 1, vec![80.0]);
        let raw = forward(&params, &series, n, k, z, c, false);
        let kept = forward(&params, &series, n, k, z, c, true);
        assert!(raw.max_abs_diff(&kept) < 1e-12);

        // And the zeta = 0 output is the exact average of raw and transpose.
        params.zeta = Mat::zeros(1, 1);
        let avg = forward(&params, &series, n, k, z, c, true);
        for i in 0..n {
            for j in 0..n {
                let expect = 0.5 * (raw[(i, j)] + raw[(j, i)]);
                assert!((avg[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fti_zero_logits_give_half_off_diagonal() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Mat::zeros(3, 3));
        let z_hat = fti_forward(&mut tape, w).unwrap();
        let m = tape.value_mat(z_hat);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.5 };
                assert_eq!(m[(i, j)], expect);
            }
        }
    }

    #[test]
    fn fti_large_negative_logits_approach_identity() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Mat::filled(3, 3, -60.0));
        let z_hat = fti_forward(&mut tape, w).unwrap();
        let m = tape.value_mat(z_hat);
        assert!(m.max_abs_diff(&Mat::identity(3)) < 1e-20);
    }

    #[test]
    fn fti_gradient_reaches_all_off_diagonal_logits() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Mat::zeros(3, 3));
        let z_hat = fti_forward(&mut tape, w).unwrap();
        let s = tape.sum_all(z_hat);
        tape.backward(s).unwrap();
        let g = tape.grad(w);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(g[i * 3 + j], 0.0, "diagonal logit must be inert");
                } else {
                    assert!((g[i * 3 + j] - 0.25).abs() < 1e-12);
                }
            }
        }
    }
}
