//! Randomized property tests over the core invariants.

use proptest::prelude::*;

use epitopo::autodiff::Tape;
use epitopo::epidemic::{infection_matrix, mobility_from_infection, simulate, PathogenParams};
use epitopo::graphgen::{assign_mobility, generate, GraphModel, GraphSpec};
use epitopo::linalg::Mat;
use epitopo::metrics::sparsity_index;

fn model_strategy() -> impl Strategy<Value = GraphModel> {
    prop_oneof![
        Just(GraphModel::Er),
        Just(GraphModel::Ba),
        Just(GraphModel::Ws),
        Just(GraphModel::Rgg),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn infection_matrix_inverts_for_any_network(
        model in model_strategy(),
        n in 6usize..24,
        seed in 0u64..1000,
        pop_scale in 1e3f64..1e7,
    ) {
        let spec = GraphSpec::synthetic(model, n, 3.0, seed);
        let mut net = assign_mobility(&generate(&spec).unwrap(), 0.01).unwrap();
        for (i, p) in net.p.iter_mut().enumerate() {
            *p = pop_scale * (1.0 + 0.3 * ((i % 5) as f64));
        }
        let z = infection_matrix(&net);
        let a = mobility_from_infection(&z, &net.p).unwrap();
        prop_assert!(a.max_abs_diff(&net.a) < 1e-10);

        // Off-diagonal sparsity pattern is inherited exactly.
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    prop_assert_eq!(net.a[(i, j)] != 0.0, z.z[(i, j)] != 0.0);
                }
            }
        }
    }

    #[test]
    fn simulation_conserves_and_is_monotone(
        seed in 0u64..500,
        beta in 0.3f64..2.5,
        gamma in 0.05f64..0.9,
        seed_fraction in 1e-6f64..0.05,
        use_approx in any::<bool>(),
    ) {
        let spec = GraphSpec::synthetic(GraphModel::Ws, 12, 4.0, seed);
        let net = assign_mobility(&generate(&spec).unwrap(), 0.01).unwrap();
        let params = PathogenParams { beta, gamma, seed_node: (seed % 12) as usize, seed_fraction };
        let ds = simulate(&net, &[params], 60, use_approx, true).unwrap();
        prop_assert!(ds.delta_s.iter().all(|&v| v >= 0.0));
        let tr = ds.traces.as_ref().unwrap();
        for node in 0..12 {
            let mut prev_s = f64::INFINITY;
            let mut prev_r = -1.0;
            for step in 0..tr.steps {
                let idx = node * tr.steps + step;
                prop_assert!((tr.s[idx] + tr.i[idx] + tr.r[idx] - 1.0).abs() < 1e-9);
                prop_assert!(tr.s[idx] <= prev_s + 1e-12);
                prop_assert!(tr.r[idx] >= prev_r - 1e-12);
                prev_s = tr.s[idx];
                prev_r = tr.r[idx];
            }
            let total: f64 = ds.series(node, 0).iter().sum();
            prop_assert!(total <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn decay_filter_matches_power_matrix_route(
        p_val in 0.01f64..0.999,
        series in proptest::collection::vec(0.0f64..0.2, 3..12),
    ) {
        let t_len = series.len();
        let x_mat = Mat::from_vec(t_len, 1, series);
        let mut b_mat = Mat::zeros(t_len, t_len);
        let mut mask = Mat::zeros(t_len, t_len);
        for t in 0..t_len {
            for s in 0..=t {
                b_mat[(t, s)] = (t - s) as f64;
                mask[(t, s)] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let p1 = tape.leaf(&Mat::from_vec(1, 1, vec![p_val]));
        let kernel = tape.scalar_power_base(p1, &b_mat).unwrap();
        let mask_c = tape.constant(&mask);
        let masked = tape.mul(kernel, mask_c).unwrap();
        let x1 = tape.constant(&x_mat);
        let via_matrix = tape.matmul(masked, x1).unwrap();

        let p2 = tape.leaf(&Mat::from_vec(1, 1, vec![p_val]));
        let x2 = tape.constant(&x_mat);
        let via_filter = tape.decay_filter(p2, x2).unwrap();

        for (a, b) in tape.data(via_matrix).iter().zip(tape.data(via_filter)) {
            prop_assert!((a - b).abs() < 1e-11, "{} vs {}", a, b);
        }
        let s1 = tape.sum_all(via_matrix);
        let s2 = tape.sum_all(via_filter);
        tape.backward(s1).unwrap();
        tape.backward(s2).unwrap();
        let g1 = tape.grad(p1)[0];
        let g2 = tape.grad(p2)[0];
        prop_assert!((g1 - g2).abs() < 1e-9 * g1.abs().max(1.0));
    }

    #[test]
    fn sparsity_index_is_scale_invariant_and_bounded(
        values in proptest::collection::vec(-3.0f64..3.0, 4..30),
        scale in 0.01f64..100.0,
    ) {
        let m = Mat::from_vec(1, values.len(), values);
        let s = sparsity_index(&m);
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&s));
        let mut scaled = m.clone();
        scaled.data.iter_mut().for_each(|v| *v *= scale);
        prop_assert!((sparsity_index(&scaled) - s).abs() < 1e-9);
    }
}
