//! Invariants of quantization, expansion, bounds and cost, checked against
//! hand-written oracles.

mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rex::bounds::{
    compose_add, compose_concat, lemma1_bound, lemma2_bound, network_bound, spectral_norm_of,
    BoundOptions, BranchBound,
};
use rex::cost::{layer_bops, model_bops, LayerCostParams};
use rex::expansion::{
    allocate_budget, expand_model, expand_weights, expand_weights_sparse, reconstruct, ExpandConfig,
};
use rex::inference::{fixed_point_multiplier, rounding_shift};
use rex::quant::{compute_scale, dequantize, quantize, QuantConfig};
use rex::Tensor;

use common::{grid_max, oracle_expand, oracle_quantize, random_mlp, ulp, with_ulps};

fn matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..=12, 1usize..=12)
        .prop_flat_map(|(r, c)| (Just(r), prop::collection::vec(-100.0f64..100.0, r * c)))
}

fn tensor(rows: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, data.len() / rows], data.to_vec()).unwrap()
}

fn bits() -> impl Strategy<Value = u8> {
    prop::sample::select(vec![2u8, 3, 4, 5, 8])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantization_matches_oracle((rows, w) in matrix(), b in bits()) {
        let cfg = QuantConfig::new(b).unwrap();
        let t = tensor(rows, &w);
        let scales = compute_scale(&t, &cfg).unwrap();
        let deq = dequantize(&quantize(&t, &scales, &cfg).unwrap());
        let (oracle_scales, oracle_deq) = oracle_quantize(&w, rows, b);
        prop_assert_eq!(scales, oracle_scales);
        prop_assert_eq!(deq.data(), &oracle_deq[..]);
    }

    #[test]
    fn expansion_matches_oracle((rows, w) in matrix(), b in bits(), k in 1usize..=5) {
        let residues = expand_weights(&tensor(rows, &w), &QuantConfig::new(b).unwrap(), k).unwrap();
        let (scales, partials) = oracle_expand(&w, rows, b, k);
        for (r, s) in residues.iter().zip(&scales) {
            prop_assert_eq!(&r.q.scales, s);
        }
        let recon = reconstruct(&residues).unwrap();
        prop_assert_eq!(recon.data(), &partials[k - 1][..]);
    }

    #[test]
    fn per_channel_bound_dominates_error((rows, w) in matrix(), b in bits(), k in 1usize..=5) {
        let residues = expand_weights(&tensor(rows, &w), &QuantConfig::new(b).unwrap(), k).unwrap();
        let per_order: Vec<Vec<f64>> = residues.iter().map(|r| r.q.scales.clone()).collect();
        let bound = lemma1_bound(&per_order, b, k).unwrap();
        let recon = reconstruct(&residues).unwrap();
        let cols = w.len() / rows;
        let m = grid_max(b);
        for (i, (a, v)) in w.iter().zip(recon.data()).enumerate() {
            let expected = per_order[0][i / cols] / (2.0 * m.powi(k as i32 - 1));
            prop_assert!((bound[i / cols] - expected).abs() <= ulp(expected));
            prop_assert!((a - v).abs() <= with_ulps(bound[i / cols], 4));
        }
    }

    #[test]
    fn scales_decay_geometrically((rows, w) in matrix(), b in bits()) {
        let residues = expand_weights(&tensor(rows, &w), &QuantConfig::new(b).unwrap(), 4).unwrap();
        let m = grid_max(b);
        for pair in residues.windows(2) {
            for (s0, s1) in pair[0].q.scales.iter().zip(&pair[1].q.scales) {
                prop_assert!(*s1 == 1.0 || *s1 <= with_ulps(s0 / (2.0 * m), 4));
            }
        }
    }

    #[test]
    fn error_never_grows_with_order((rows, w) in matrix(), b in bits()) {
        let (_, partials) = oracle_expand(&w, rows, b, 4);
        let residues = expand_weights(&tensor(rows, &w), &QuantConfig::new(b).unwrap(), 4).unwrap();
        for k in 1..4 {
            let lo = reconstruct(&residues[..k]).unwrap();
            let hi = reconstruct(&residues[..k + 1]).unwrap();
            prop_assert_eq!(hi.data(), &partials[k][..]);
            for (i, a) in w.iter().enumerate() {
                let (e0, e1) = ((a - lo.data()[i]).abs(), (a - hi.data()[i]).abs());
                prop_assert!(e1 <= e0 + 4.0 * ulp(a.abs().max(e0)));
            }
        }
    }

    #[test]
    fn saturated_budget_equals_dense((rows, w) in matrix(), b in bits(), k in 2usize..=4) {
        let t = tensor(rows, &w);
        let cfg = QuantConfig::new(b).unwrap();
        let dense = expand_weights(&t, &cfg, k).unwrap();
        let sparse = expand_weights_sparse(&t, &cfg, k, (k - 1) as f64).unwrap();
        prop_assert_eq!(dense, sparse);
    }

    #[test]
    fn sparse_masks_leave_other_channels_alone(
        (rows, w) in matrix(), b in bits(), k in 2usize..=4, gamma in 0.0f64..2.0,
    ) {
        let t = tensor(rows, &w);
        let residues = expand_weights_sparse(&t, &QuantConfig::new(b).unwrap(), k, gamma).unwrap();
        let cols = w.len() / rows;
        prop_assert!(residues[0].mask.is_none());
        for r in &residues[1..] {
            for ch in 0..rows {
                if !r.is_kept(ch) {
                    prop_assert!(r.q.codes[ch * cols..(ch + 1) * cols].iter().all(|&c| c == 0));
                }
            }
        }
        let bound = lemma2_bound(&residues, b).unwrap();
        let recon = reconstruct(&residues).unwrap();
        for (i, (a, v)) in w.iter().zip(recon.data()).enumerate() {
            prop_assert!((a - v).abs() <= with_ulps(bound[i / cols], 4));
        }
    }

    #[test]
    fn spectral_norm_matches_svd(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let data = common::random_matrix(&mut r, rows, cols);
        let est = spectral_norm_of(&data, rows, cols);
        let svd = DMatrix::from_row_slice(rows, cols, &data).singular_values().max();
        prop_assert!(est.converged);
        prop_assert!((est.value - svd).abs() <= 1e-6 * svd.max(1e-300));
    }

    #[test]
    fn composition_ignores_branch_order(mut v in prop::collection::vec(0.0f64..10.0, 1..8)) {
        let (add, cat) = (compose_add(&v), compose_concat(&v));
        v.reverse();
        prop_assert!((compose_add(&v) - add).abs() <= 1e-12 * add.max(1.0));
        prop_assert_eq!(compose_concat(&v), cat);
        let tree = BranchBound::Add(v.iter().map(|&x| BranchBound::Leaf(x)).collect());
        prop_assert!((tree.evaluate() - add).abs() <= 1e-12 * add.max(1.0));
        prop_assert!(cat <= add);
    }

    #[test]
    fn budgets_respect_total_and_cap(total in 0.0f64..3.0, layers in 1usize..10, k in 2usize..5) {
        let g = allocate_budget(total, layers, k).unwrap();
        let cap = (k - 1) as f64;
        prop_assert!(g.iter().all(|&x| x >= 0.0 && x <= cap + 1e-12));
        let sum: f64 = g.iter().sum();
        let want = (total * layers as f64).min(cap * layers as f64);
        prop_assert!((sum - want).abs() <= 1e-9 * want.max(1.0));
        prop_assert!(g.windows(2).all(|p| p[0] <= p[1] + 1e-12));
    }

    #[test]
    fn fc_cost_is_linear_in_kept_fraction(n in 1usize..512, b in 2u8..=8, f in 0.0f64..=1.0) {
        let base = layer_bops(&LayerCostParams::fc(n, n, b, 1, &[])).unwrap();
        let with = layer_bops(&LayerCostParams::fc(n, n, b, 2, &[f])).unwrap();
        let expected = base.int_ops * (1.0 + f);
        prop_assert!((with.int_ops - expected).abs() <= 1e-9 * expected.max(1.0));
        prop_assert_eq!(with.float_ops, base.float_ops);
    }

    #[test]
    fn rounding_shift_matches_exact_division(v in -(1i64 << 50)..(1i64 << 50), n in 0u32..20) {
        let exact = (v as f64 / 2f64.powi(n as i32)).round_ties_even();
        prop_assert_eq!(rounding_shift(v as i128, n), exact as i128);
    }

    #[test]
    fn multiplier_is_accurate(scale in 1e-12f64..1e6) {
        let m = fixed_point_multiplier(scale).unwrap();
        prop_assert!((1i64 << 30..=1i64 << 31).contains(&m.mantissa));
        prop_assert!((m.value() - scale).abs() <= scale * 2f64.powi(-31));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_cost_is_sum_of_layers(seed in 0u64..1000, b in 2u8..=8, k in 1usize..=3) {
        let model = random_mlp(seed, 24);
        let em = expand_model(&model, &ExpandConfig { budget: Some(0.5), ..ExpandConfig::dense(b, k) }).unwrap();
        let report = model_bops(&em).unwrap();
        let total: f64 = report.layers.iter().map(|l| l.bops.total).sum();
        prop_assert!((report.total - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn weights_only_bound_shrinks_with_order(seed in 0u64..1000) {
        let model = random_mlp(seed, 24);
        let opts = BoundOptions::default();
        let u: Vec<f64> = [1usize, 2, 3]
            .iter()
            .map(|&k| {
                let cfg = ExpandConfig { act_bits: None, ..ExpandConfig::dense(8, k) };
                network_bound(&model, &expand_model(&model, &cfg).unwrap(), &opts).unwrap().u
            })
            .collect();
        prop_assert!(u[1] < u[0] && u[2] < u[1], "{:?}", u);
    }

    #[test]
    fn empirical_error_stays_below_bound(seed in 0u64..1000, b in prop::sample::select(vec![3u8, 4, 8]), k in 1usize..=3) {
        let model = random_mlp(seed, 16);
        let em = expand_model(&model, &ExpandConfig::dense(b, k)).unwrap();
        let report = rex::bounds::bound_report(&model, &em, &BoundOptions::default(), 300, seed).unwrap();
        prop_assert!(report.is_sound(), "{:?} > {}", report.u_empirical, report.u);
    }
}
