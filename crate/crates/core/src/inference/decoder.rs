//! Decoders reconstructing daily new cases from the inferred infection
//! matrix and epidemic parameters.
//!
//! The fast decoder is teacher-forced: susceptible levels come from the
//! cumulative observed cases and infectious levels from a geometric recovery
//! sum over the observed cases, so every day is reconstructed in one batched
//! pass with no dependence on earlier predictions. Day 0 of the series is
//! the exogenous seeding and is passed through unchanged.
//!
//! The sequential decoder rolls the epidemic forward from explicit initial
//! state, feeding its own predictions back in; it serves as the correctness
//! oracle for the fast path.

use crate::autodiff::{Tape, Var};
use crate::epidemic::EpidemicDataset;
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Tape handles produced by [`efb_forward`].
pub struct EfbOutputs {
    /// Reconstructed daily new cases, one (T, n) matrix per pathogen.
    pub preds: Vec<Var>,
    /// Teacher-forced susceptible levels at the end of each day, (T, n).
    pub s_bar: Vec<Var>,
    /// Teacher-forced infectious levels at the end of each day, (T, n).
    pub i_hat: Vec<Var>,
}

/// Lower-triangular ones, including the diagonal.
pub fn cumulative_matrix(t_days: usize) -> Mat {
    let mut l = Mat::zeros(t_days, t_days);
    for t in 0..t_days {
        for s in 0..=t {
            l[(t, s)] = 1.0;
        }
    }
    l
}

/// Fast forward-backward reconstruction.
///
/// `series` holds one (T, n) time-major constant per pathogen; `beta` and
/// `gamma` are (k, n) with gamma strictly inside (0, 1).
pub fn efb_forward(
    tape: &mut Tape,
    series: &[Var],
    z_hat: Var,
    beta: Var,
    gamma: Var,
) -> Result<EfbOutputs> {
    let k = series.len();
    if k == 0 {
        return Err(Error::InvalidSpec("no pathogen series".into()));
    }
    let (t_days, n) = tape.shape(series[0]);
    if tape.shape(beta) != (k, n) || tape.shape(gamma) != (k, n) {
        return Err(Error::ShapeMismatch {
            op: "efb_forward",
            lhs: tape.shape(beta),
            rhs: (k, n),
        });
    }
    if tape.shape(z_hat) != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "efb_forward",
            lhs: tape.shape(z_hat),
            rhs: (n, n),
        });
    }
    for &g in tape.data(gamma) {
        if !(0.0 < g && g < 1.0) {
            return Err(Error::GammaOutOfRange { value: g });
        }
    }

    let one = tape.scalar_constant(1.0);
    let l_matrix = cumulative_matrix(t_days);
    let l_const = tape.constant(&l_matrix);
    // Row 0 selects the observed seeding day; the rest keep the model.
    let mut keep_first = Mat::zeros(t_days, n);
    let mut keep_rest = Mat::filled(t_days, n, 1.0);
    for j in 0..n {
        keep_first[(0, j)] = 1.0;
        keep_rest[(0, j)] = 0.0;
    }
    let keep_first = tape.constant(&keep_first);
    let keep_rest = tape.constant(&keep_rest);

    let mut outputs = EfbOutputs {
        preds: Vec::with_capacity(k),
        s_bar: Vec::with_capacity(k),
        i_hat: Vec::with_capacity(k),
    };
    for (l, &x) in series.iter().enumerate() {
        if tape.shape(x) != (t_days, n) {
            return Err(Error::ShapeMismatch {
                op: "efb_forward",
                lhs: tape.shape(x),
                rhs: (t_days, n),
            });
        }
        let beta_l = tape.slice_rows(beta, l, l + 1)?;
        let gamma_l = tape.slice_rows(gamma, l, l + 1)?;

        // Susceptible after each day: 1 - cumulative cases.
        let cum = tape.matmul(l_const, x)?;
        let s_bar = tape.sub(one, cum)?;
        // Infectious after each day: geometric recovery-weighted sum.
        let decay = tape.sub(one, gamma_l)?;
        let i_hat = tape.decay_filter(decay, x)?;

        // Day t uses the state at the start of day t.
        let s_prev = tape.shift_rows(s_bar, 1.0);
        let i_prev = tape.shift_rows(i_hat, 0.0);

        let driven = tape.mul(i_prev, beta_l)?;
        let neg = tape.neg(driven);
        let decayed = tape.exp(neg);
        let rate = tape.sub(one, decayed)?;
        // Coupling first, susceptibles second, matching the state update.
        let mixed = tape.matmul(rate, z_hat)?;
        let local = tape.mul(s_prev, mixed)?;

        let modeled = tape.mul(local, keep_rest)?;
        let seeded = tape.mul(x, keep_first)?;
        let pred = tape.add(modeled, seeded)?;

        outputs.preds.push(pred);
        outputs.s_bar.push(s_bar);
        outputs.i_hat.push(i_hat);
    }
    Ok(outputs)
}

/// Convenience wrapper: reconstruct a dataset's series on a throwaway tape,
/// returning one (T, n) matrix per pathogen.
pub fn efb_reconstruct(
    dataset: &EpidemicDataset,
    z: &Mat,
    beta: &Mat,
    gamma: &Mat,
) -> Result<Vec<Mat>> {
    let mut tape = Tape::new();
    let series: Vec<Var> = (0..dataset.k)
        .map(|l| {
            let x = series_time_major(dataset, l);
            tape.constant(&x)
        })
        .collect();
    let z_c = tape.constant(z);
    let b_c = tape.constant(beta);
    let g_c = tape.constant(gamma);
    let out = efb_forward(&mut tape, &series, z_c, b_c, g_c)?;
    Ok(out.preds.iter().map(|&v| tape.value_mat(v)).collect())
}

/// One pathogen's observed series as a (T, n) time-major matrix.
pub fn series_time_major(dataset: &EpidemicDataset, pathogen: usize) -> Mat {
    let mut x = Mat::zeros(dataset.t_days, dataset.n);
    for i in 0..dataset.n {
        for t in 0..dataset.t_days {
            x[(t, i)] = dataset.delta(i, pathogen, t);
        }
    }
    x
}

const STABILITY_SLACK: f64 = 1e-9;

/// Sequential rollout decoder. `first_day`, `s0` and `i0` are (k, n); the
/// result is one (T, n) matrix per pathogen.
pub fn esc_forward(
    first_day: &Mat,
    z: &Mat,
    beta: &Mat,
    gamma: &Mat,
    s0: &Mat,
    i0: &Mat,
    t_days: usize,
) -> Result<Vec<Mat>> {
    let (k, n) = first_day.shape();
    for (name, m) in [("z", z.shape() == (n, n)), ("beta", beta.shape() == (k, n)),
        ("gamma", gamma.shape() == (k, n)), ("s0", s0.shape() == (k, n)), ("i0", i0.shape() == (k, n))]
    {
        if !m {
            return Err(Error::DomainError {
                op: "esc_forward",
                msg: format!("{name} has an inconsistent shape"),
            });
        }
    }
    for &g in &gamma.data {
        if !(0.0 < g && g < 1.0) {
            return Err(Error::GammaOutOfRange { value: g });
        }
    }
    let mut outputs = Vec::with_capacity(k);
    for l in 0..k {
        let mut out = Mat::zeros(t_days, n);
        let mut s: Vec<f64> = s0.row(l).to_vec();
        let mut infectious: Vec<f64> = i0.row(l).to_vec();
        let betas = beta.row(l);
        let gammas = gamma.row(l);

        let x0 = first_day.row(l);
        for j in 0..n {
            out[(0, j)] = x0[j];
            s[j] -= x0[j];
            infectious[j] = (1.0 - gammas[j]) * infectious[j] + x0[j];
        }
        check(&mut s, 0)?;
        check(&mut infectious, 0)?;

        for t in 1..t_days {
            let mut coupled = vec![0.0; n];
            for i in 0..n {
                let alpha = 1.0 - (-betas[i] * infectious[i]).exp();
                if alpha == 0.0 {
                    continue;
                }
                for (j, cv) in coupled.iter_mut().enumerate() {
                    *cv += alpha * z[(i, j)];
                }
            }
            for j in 0..n {
                let x = s[j] * coupled[j];
                out[(t, j)] = x;
                s[j] -= x;
                infectious[j] = (1.0 - gammas[j]) * infectious[j] + x;
            }
            check(&mut s, t)?;
            check(&mut infectious, t)?;
        }
        outputs.push(out);
    }
    Ok(outputs)
}

fn check(x: &mut [f64], t: usize) -> Result<()> {
    for v in x.iter_mut() {
        if *v < -STABILITY_SLACK || *v > 1.0 + STABILITY_SLACK {
            return Err(Error::UnstableStep { t, value: *v });
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(())
}

/// Ground-truth inputs for oracle runs: constant parameter rows and the
/// seeding impulses of a simulated dataset.
pub fn ground_truth_inputs(dataset: &EpidemicDataset) -> (Mat, Mat, Mat, Mat, Mat) {
    let (n, k) = (dataset.n, dataset.k);
    let mut beta = Mat::zeros(k, n);
    let mut gamma = Mat::zeros(k, n);
    let mut first_day = Mat::zeros(k, n);
    for (l, p) in dataset.params_truth.iter().enumerate() {
        for j in 0..n {
            beta[(l, j)] = p.beta;
            gamma[(l, j)] = p.gamma;
            first_day[(l, j)] = dataset.delta(j, l, 0);
        }
    }
    let s0 = Mat::filled(k, n, 1.0);
    let i0 = Mat::zeros(k, n);
    (first_day, beta, gamma, s0, i0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epidemic::{infection_matrix, sample_pathogens, simulate, PathogenParams};
    use crate::graphgen::{assign_mobility, generate, GraphModel, GraphSpec};

    fn tiny_dataset(series: &[f64]) -> EpidemicDataset {
        EpidemicDataset {
            n: 1,
            k: 1,
            t_days: series.len(),
            delta_s: series.to_vec(),
            traces: None,
            params_truth: vec![PathogenParams {
                beta: 1.0,
                gamma: 0.5,
                seed_node: 0,
                seed_fraction: series[0],
            }],
            network_truth: None,
        }
    }

    fn efb_outputs(dataset: &EpidemicDataset, gamma: f64) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let x = series_time_major(dataset, 0);
        let x_c = tape.constant(&x);
        let z = tape.constant(&Mat::identity(1));
        let beta = tape.constant(&Mat::filled(1, 1, 1.0));
        let gamma = tape.constant(&Mat::filled(1, 1, gamma));
        let out = efb_forward(&mut tape, &[x_c], z, beta, gamma).unwrap();
        (
            tape.data(out.s_bar[0]).to_vec(),
            tape.data(out.i_hat[0]).to_vec(),
        )
    }

    #[test]
    fn susceptible_is_one_minus_cumulative_cases() {
        let ds = tiny_dataset(&[0.1, 0.05]);
        let (s_bar, _) = efb_outputs(&ds, 0.5);
        assert!((s_bar[0] - 0.9).abs() < 1e-15);
        assert!((s_bar[1] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn infectious_is_recovery_weighted_sum() {
        let ds = tiny_dataset(&[0.1, 0.05]);
        let (_, i_hat) = efb_outputs(&ds, 0.5);
        assert!((i_hat[0] - 0.1).abs() < 1e-15);
        assert!((i_hat[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_recovery_accumulates_all_cases() {
        let ds = tiny_dataset(&[0.1, 0.05, 0.2]);
        let (_, i_hat) = efb_outputs(&ds, 1e-12);
        let expect = [0.1, 0.15 - 0.1 * 1e-12, 0.35];
        for (a, e) in i_hat.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn gamma_outside_unit_interval_rejected() {
        let ds = tiny_dataset(&[0.1, 0.05]);
        let mut tape = Tape::new();
        let x = series_time_major(&ds, 0);
        let x_c = tape.constant(&x);
        let z = tape.constant(&Mat::identity(1));
        let beta = tape.constant(&Mat::filled(1, 1, 1.0));
        let gamma = tape.constant(&Mat::filled(1, 1, 1.0));
        assert!(matches!(
            efb_forward(&mut tape, &[x_c], z, beta, gamma),
            Err(Error::GammaOutOfRange { .. })
        ));
    }

    #[test]
    fn esc_identity_coupling_confines_the_epidemic() {
        let n = 4;
        let mut first_day = Mat::zeros(1, n);
        first_day[(0, 2)] = 0.01;
        let z = Mat::identity(n);
        let beta = Mat::filled(1, n, 1.2);
        let gamma = Mat::filled(1, n, 0.2);
        let s0 = Mat::filled(1, n, 1.0);
        let i0 = Mat::zeros(1, n);
        let out = esc_forward(&first_day, &z, &beta, &gamma, &s0, &i0, 30).unwrap();
        for t in 0..30 {
            for j in 0..n {
                if j != 2 {
                    assert_eq!(out[0][(t, j)], 0.0);
                }
            }
        }
        assert!(out[0][(5, 2)] > 0.0);
    }

    #[test]
    fn both_decoders_reproduce_the_simulator() {
        let spec = GraphSpec::synthetic(GraphModel::Rgg, 12, 4.0, 21);
        let net = assign_mobility(&generate(&spec).unwrap(), 0.01).unwrap();
        let pathogens = sample_pathogens(&net, 2, 4);
        let ds = simulate(&net, &pathogens, 60, true, true).unwrap();
        let z = infection_matrix(&net).z;
        let (first_day, beta, gamma, s0, i0) = ground_truth_inputs(&ds);

        let esc = esc_forward(&first_day, &z, &beta, &gamma, &s0, &i0, ds.t_days).unwrap();
        let efb = efb_reconstruct(&ds, &z, &beta, &gamma).unwrap();
        for l in 0..ds.k {
            let truth = series_time_major(&ds, l);
            let esc_err = esc[l].max_abs_diff(&truth);
            let efb_err = efb[l].max_abs_diff(&truth);
            assert!(esc_err < 1e-12, "pathogen {l}: esc error {esc_err}");
            assert!(efb_err < 1e-8, "pathogen {l}: efb error {efb_err}");
        }
    }

    #[test]
    fn efb_infectious_matches_simulator_trace() {
        let spec = GraphSpec::synthetic(GraphModel::Ws, 10, 4.0, 2);
        let net = assign_mobility(&generate(&spec).unwrap(), 0.01).unwrap();
        let pathogens = sample_pathogens(&net, 1, 8);
        let ds = simulate(&net, &pathogens, 50, true, true).unwrap();
        let z = infection_matrix(&net).z;
        let (_, beta, gamma, _, _) = ground_truth_inputs(&ds);

        let mut tape = Tape::new();
        let x = series_time_major(&ds, 0);
        let x_c = tape.constant(&x);
        let z_c = tape.constant(&z);
        let b_c = tape.constant(&beta);
        let g_c = tape.constant(&gamma);
        let out = efb_forward(&mut tape, &[x_c], z_c, b_c, g_c).unwrap();
        let i_hat = tape.value_mat(out.i_hat[0]);
        let tr = ds.traces.as_ref().unwrap();
        // i_hat row t is the infectious level at the end of day t, i.e. the
        // trace at step t + 1.
        for t in 0..ds.t_days {
            for node in 0..ds.n {
                let sim = tr.i[(node * ds.k) * (ds.t_days + 1) + t + 1];
                assert!(
                    (i_hat[(t, node)] - sim).abs() < 1e-8,
                    "t {t} node {node}: {} vs {sim}",
                    i_hat[(t, node)]
                );
            }
        }
    }
}
