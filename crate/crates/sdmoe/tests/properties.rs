//! Randomized property checks over the core numeric contracts: factorization
//! fidelity, gradient-split algebra, routing invariances, backward-pass
//! linearity, and spectral-energy bookkeeping.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdmoe::decoupled::{init_decoupled, InitSpec};
use sdmoe::linalg::{gaussian, gram_defect, matmul, matmul_transb, projector, svd, Matrix};
use sdmoe::metrics::energy_cdf;
use sdmoe::moe::{
    init_layer, layer_backward, layer_forward, route_from_logits, ExpertGrads, LayerGrads,
    MoeConfig, Variant,
};

fn finite_matrix(
    max_rows: usize,
    max_cols: usize,
) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-100.0f64..100.0, r * c),
        )
    })
}

proptest! {
    #[test]
    fn svd_reconstructs_any_finite_matrix((rows, cols, data) in finite_matrix(12, 10)) {
        let a = Matrix::new(rows, cols, data).unwrap();
        let f = svd(&a).unwrap();
        let p = rows.min(cols);
        prop_assert_eq!(f.sigma.len(), p);

        let mut us = f.u.clone();
        for (j, &s) in f.sigma.iter().enumerate() {
            for r in 0..rows {
                let v = us.get(r, j) * s;
                us.set(r, j, v);
            }
        }
        let recon = matmul_transb(&us, &f.v).unwrap();
        let err = a.minus(&recon).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-9 * (a.frobenius_norm() + 1e-30), "reconstruction off by {err:e}");
        prop_assert!(gram_defect(&f.u).unwrap() <= 1e-9);
        prop_assert!(gram_defect(&f.v).unwrap() <= 1e-9);
        for w in f.sigma.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        if let Some(last) = f.sigma.last() {
            prop_assert!(*last >= 0.0);
        }
    }
}

fn split_case() -> impl Strategy<Value = (usize, usize, usize, u64, Vec<f64>)> {
    (2usize..=12, 2usize..=12).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            1..r.min(c),
            any::<u64>(),
            prop::collection::vec(-100.0f64..100.0, r * c),
        )
    })
}

proptest! {
    #[test]
    fn gradient_split_sums_back_and_stays_complementary(
        (rows, cols, k, seed, data) in split_case()
    ) {
        let dl = init_decoupled(
            rows,
            cols,
            &InitSpec { seed, scale: 0.1, k, n_experts: 2 },
            16,
        )
        .unwrap();
        let g = Matrix::new(rows, cols, data).unwrap();
        let (g_c, g_u) = dl.split_gradient(&g).unwrap();
        let scale = g.max_abs() + 1.0;

        let back = g.minus(&g_c.plus(&g_u).unwrap()).unwrap().max_abs();
        prop_assert!(back <= 1e-12 * scale, "halves do not sum back: {back:e}");

        let pu = projector(dl.basis_u());
        let pv = projector(dl.basis_v());
        prop_assert!(matmul(&pu, &g_u).unwrap().max_abs() <= 1e-10 * scale);
        prop_assert!(matmul(&g_u, &pv).unwrap().max_abs() <= 1e-10 * scale);

        // The shared half carries everything the retained subspaces can see:
        // projecting it the same way leaves g_c - P_U·g - (I-P_U)·g·P_V = 0.
        let pug = matmul(&pu, &g).unwrap();
        let rest = g.minus(&pug).unwrap();
        let expected_c = pug.plus(&matmul(&rest, &pv).unwrap()).unwrap();
        let c_err = g_c.minus(&expected_c).unwrap().max_abs();
        prop_assert!(c_err <= 1e-12 * scale, "shared half off by {c_err:e}");
    }
}

fn routing_case() -> impl Strategy<Value = (usize, usize, usize, Vec<i32>, Vec<i32>)> {
    (1usize..=8, 2usize..=6).prop_flat_map(|(tokens, experts)| {
        (
            Just(tokens),
            Just(experts),
            1..=experts,
            prop::collection::vec(-240i32..240, tokens * experts),
            prop::collection::vec(-400i32..400, tokens),
        )
    })
}

proptest! {
    #[test]
    fn routing_ignores_per_token_logit_shifts(
        (tokens, experts, top_n, raw, raw_shift) in routing_case()
    ) {
        // Eighth-integer grids keep every sum exactly representable, so the
        // shifted logits preserve comparisons (and ties) bit for bit.
        let logits: Vec<f64> = raw.iter().map(|&v| v as f64 / 8.0).collect();
        let base = Matrix::new(tokens, experts, logits.clone()).unwrap();
        let shifted_data: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| v + raw_shift[i / experts] as f64 / 8.0)
            .collect();
        let shifted = Matrix::new(tokens, experts, shifted_data).unwrap();

        let r1 = route_from_logits(&base, top_n).unwrap();
        let r2 = route_from_logits(&shifted, top_n).unwrap();
        prop_assert_eq!(&r1.selected, &r2.selected);
        for t in 0..tokens {
            for (w1, w2) in r1.weights[t].iter().zip(&r2.weights[t]) {
                prop_assert!((w1 - w2).abs() <= 1e-12, "weights moved under a shift");
            }
            for e in 0..experts {
                let d = (r1.probs.get(t, e) - r2.probs.get(t, e)).abs();
                prop_assert!(d <= 1e-12, "probabilities moved under a shift");
            }
            let total: f64 = r1.weights[t].iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "weights must renormalize to 1");
        }
    }
}

fn grad_pair(a: &ExpertGrads) -> [&Matrix; 3] {
    [&a.gate_proj, &a.up_proj, &a.down_proj]
}

fn assert_scaled(tag: &str, a: &Matrix, b: &Matrix, c: f64) -> Result<(), TestCaseError> {
    let diff = a.scaled(c).minus(b).unwrap().max_abs();
    let bound = 1e-12 * (1.0 + b.max_abs());
    prop_assert!(diff <= bound, "{tag}: scaling by {c} drifts by {diff:e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn backward_is_linear_in_the_upstream_gradient(
        seed in 0u64..1_000,
        dy_data in prop::collection::vec(-100.0f64..100.0, 4 * 8),
        pow in -2i32..=2,
        use_sd in any::<bool>(),
    ) {
        let cfg = MoeConfig {
            d_model: 8,
            d_ff: 8,
            n_experts: 3,
            top_n: 2,
            variant: if use_sd { Variant::Sd } else { Variant::Baseline },
            k: 2,
            aux_coef: 0.01,
            include_shared_expert: false,
        };
        let params = init_layer(&cfg, 16, seed).unwrap();
        let x = gaussian(4, 8, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD), 1.0);
        let (_, cache) = layer_forward(&params, &x).unwrap();

        let dy = Matrix::new(4, 8, dy_data).unwrap();
        let c = 2f64.powi(pow);
        let (g1, dx1): (LayerGrads, Matrix) = layer_backward(&params, &cache, &dy).unwrap();
        let (g2, dx2) = layer_backward(&params, &cache, &dy.scaled(c)).unwrap();

        assert_scaled("w_gate", &g1.w_gate, &g2.w_gate, c)?;
        assert_scaled("dx", &dx1, &dx2, c)?;
        for (e, (a, b)) in g1.experts.iter().zip(&g2.experts).enumerate() {
            for (m1, m2) in grad_pair(a).into_iter().zip(grad_pair(b)) {
                assert_scaled(&format!("expert {e}"), m1, m2, c)?;
            }
        }
    }
}

proptest! {
    #[test]
    fn energy_profile_matches_its_prefix_sums(
        mut sigma in prop::collection::vec(0.0f64..100.0, 1..=12)
    ) {
        sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        prop_assume!(total > 0.0);

        let cdf = energy_cdf(&sigma).unwrap();
        prop_assert_eq!(cdf.len(), sigma.len());
        let mut acc = 0.0;
        for (i, (&s, &c)) in sigma.iter().zip(&cdf).enumerate() {
            acc += s * s;
            let expected = acc / total;
            prop_assert!((c - expected).abs() <= 1e-12, "entry {i}: {c} vs {expected}");
            if i > 0 {
                prop_assert!(c >= cdf[i - 1] - 1e-15, "profile must be monotone");
            }
        }
        prop_assert!((cdf.last().unwrap() - 1.0).abs() <= 1e-12);
    }
}
