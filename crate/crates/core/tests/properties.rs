use memmamba::fidelity::{eclmf_pair, etmf, etmf_delta};
use memmamba::numerics::{
    block_max_pool, matmul, normal_equation_residual, ridge_fit, softmax_slice,
};
use memmamba::ssm::{contribution_bound, empirical_contribution, ssm_scan};
use memmamba::tasks::{gen_copy, gen_passkey, PasskeyVocab};
use memmamba::theory::{bibo_bound, pooling_error_check, recall_bounds};
use memmamba::{LayerTrace, SsmParams, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / a.norm().max(b.norm()).max(1e-300)
}

/// Stable diagonal SSM with `‖A‖ < 1`.
fn ssm_params(ds: usize, d: usize) -> impl Strategy<Value = SsmParams> {
    (prop::collection::vec(-0.95f64..0.95, ds), matrix(ds, d), matrix(d, ds))
        .prop_map(|(a, b, c)| SsmParams::new(Tensor::vector(a), b, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(rel_diff(&left, &right) < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax_slice(&v, 1.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax_slice(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_max_dominates_its_rows(n in 1usize..20, w in 1usize..6, seed in any::<u64>()) {
        let h = Tensor::matrix(n, 3, (0..3 * n).map(|i| ((i as u64 ^ seed) % 97) as f64 - 48.0).collect()).unwrap();
        let s = block_max_pool(&h, w).unwrap();
        for i in 0..n {
            for j in 0..3 {
                prop_assert!(s.get2(i / w, j) >= h.get2(i, j));
            }
        }
    }

    #[test]
    fn ridge_solves_normal_equations(x in matrix(30, 4), y in matrix(30, 3), lambda in 1e-6f64..1.0) {
        let fit = ridge_fit(&x, &y, lambda).unwrap();
        prop_assert!(normal_equation_residual(&x, &y, &fit.w, lambda).unwrap() < 1e-8);
    }

    #[test]
    fn contribution_never_exceeds_bound(p in ssm_params(4, 3), probe in prop::collection::vec(-3.0f64..3.0, 3)) {
        let (a, b) = (p.a_norm(), p.b_norm().unwrap());
        prop_assume!(a > 0.0);
        let x = probe.iter().map(|v| v * v).sum::<f64>().sqrt();
        for k in 0..64u32 {
            let emp = empirical_contribution(&p, k as usize, &probe).unwrap();
            prop_assert!(emp <= contribution_bound(a, b, x, k).unwrap() + 1e-9, "k={k}");
        }
    }

    #[test]
    fn scalar_contribution_is_exact(a in 0.05f64..0.99, b in -3.0f64..3.0, x in -3.0f64..3.0, k in 0usize..64) {
        let p = SsmParams::new(Tensor::vector(vec![a]), Tensor::matrix(1, 1, vec![b]).unwrap(), Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let emp = empirical_contribution(&p, k, &[x]).unwrap();
        prop_assert!((emp - a.powi(k as i32) * (b * x).abs()).abs() <= 1e-12);
    }

    #[test]
    fn bounded_inputs_keep_state_bounded(p in ssm_params(4, 3), xs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..200)) {
        let x_bound = xs.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let x = Tensor::from_rows(&xs).unwrap();
        let (h, _) = ssm_scan(&p, &x, &[0.0; 4]).unwrap();
        let bound = bibo_bound(p.a_norm(), p.b_norm().unwrap(), x_bound, 0.0, 0.0).unwrap();
        for t in 0..h.rows() {
            let n = h.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= bound + 1e-9);
        }
    }

    #[test]
    fn scan_is_linear_from_zero(p in ssm_params(3, 2), x in matrix(12, 2), y in matrix(12, 2), s in -2.0f64..2.0, r in -2.0f64..2.0) {
        let combo = Tensor::matrix(12, 2, x.data().iter().zip(y.data()).map(|(a, b)| s * a + r * b).collect()).unwrap();
        let (_, yx) = ssm_scan(&p, &x, &[0.0; 3]).unwrap();
        let (_, yy) = ssm_scan(&p, &y, &[0.0; 3]).unwrap();
        let (_, yc) = ssm_scan(&p, &combo, &[0.0; 3]).unwrap();
        let want = Tensor::matrix(12, 2, yx.data().iter().zip(yy.data()).map(|(a, b)| s * a + r * b).collect()).unwrap();
        prop_assert!(yc.max_abs_diff(&want) <= 1e-9 * (1.0 + want.norm()));
    }

    #[test]
    fn pooling_error_bound_holds(h in matrix(17, 4), w in 1usize..8) {
        prop_assert!(pooling_error_check(&h, w).unwrap().holds);
    }

    #[test]
    fn ssm_recall_falls_with_distance_and_pooled_recall_does_not(
        a in 0.1f64..0.999, b in 0.1f64..2.0, gamma in 0.5f64..2.0, k in 0u32..200, alpha in 0.1f64..1.0,
    ) {
        let (theta, delta) = (0.7 * gamma, 0.1 * gamma);
        let (m0, c0) = recall_bounds(a, b, gamma, theta, k, alpha, delta).unwrap();
        let (m1, c1) = recall_bounds(a, b, gamma, theta, k + 1, alpha, delta).unwrap();
        prop_assert!(m1 <= m0);
        prop_assert_eq!(c0, c1);
    }

    #[test]
    fn etmf_ignores_vocabulary_relabelling(seed in any::<u64>(), shift in 1usize..7) {
        let (v, d, n) = (7usize, 3usize, 10usize);
        let val = |i: usize| (((i as u64).wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 500.0 - 1.0;
        let emb = Tensor::matrix(v, d, (0..v * d).map(val).collect()).unwrap();
        let out = Tensor::matrix(v, d, (0..v * d).map(|i| val(i + 999)).collect()).unwrap();
        let tokens: Vec<usize> = (0..n).map(|i| (val(i + 5000).abs() * 100.0) as usize % v).collect();
        let hidden = Tensor::new(vec![1, n, d], (0..n * d).map(|i| val(i + 7000)).collect()).unwrap();
        let trace = LayerTrace { tokens: tokens.clone(), hidden: hidden.clone(), steps: Vec::new() };
        let perm = |t: usize| (t + shift) % v;
        let mut emb_p = Tensor::zeros(&[v, d]);
        let mut out_p = Tensor::zeros(&[v, d]);
        for t in 0..v {
            emb_p.row_mut(perm(t)).copy_from_slice(emb.row(t));
            out_p.row_mut(perm(t)).copy_from_slice(out.row(t));
        }
        let trace_p = LayerTrace { tokens: tokens.iter().map(|&t| perm(t)).collect(), hidden, steps: Vec::new() };
        let a = etmf(&[trace.clone()], &emb, &out, 1.0).unwrap();
        let b = etmf(&[trace_p], &emb_p, &out_p, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert_eq!(a, etmf(&[trace.clone()], &emb, &out, 1.0).unwrap());
        prop_assert_eq!(etmf_delta(&[trace.clone()], &emb, &out, 1.0, 3).unwrap(), etmf_delta(&[trace], &emb, &out, 1.0, 3).unwrap());
    }

    #[test]
    fn eclmf_falls_as_noise_grows(x in matrix(40, 3), w in matrix(3, 3), noise in matrix(40, 3)) {
        let y = matmul(&x, &w).unwrap();
        let mut last = f64::INFINITY;
        for s in [0.0, 0.1, 0.3, 1.0, 3.0] {
            let ys = Tensor::matrix(40, 3, y.data().iter().zip(noise.data()).map(|(a, b)| a + s * b).collect()).unwrap();
            let score = eclmf_pair(&x, &ys, 1e-9).unwrap();
            prop_assert!(score <= last + 1e-9, "s={s}: {score} > {last}");
            prop_assert_eq!(score, eclmf_pair(&x, &ys, 1e-9).unwrap());
            last = score;
        }
    }

    #[test]
    fn generators_are_pure(n in 8usize..200, vocab in 16usize..64, seed in any::<u64>()) {
        prop_assert_eq!(gen_passkey(n, vocab, seed).unwrap(), gen_passkey(n, vocab, seed).unwrap());
        let m = (n / 4).max(1);
        prop_assume!(2 * m + 2 <= n);
        prop_assert_eq!(gen_copy(n, m, vocab, seed).unwrap(), gen_copy(n, m, vocab, seed).unwrap());
    }

    #[test]
    fn passkey_never_collides_with_filler(n in 8usize..300, vocab in 16usize..64, seed in any::<u64>()) {
        let pv = PasskeyVocab::new(vocab).unwrap();
        prop_assert!(pv.filler <= pv.keys.start);
        let s = gen_passkey(n, vocab, seed).unwrap();
        prop_assert!(pv.keys.contains(&s.target[0]));
        for (i, &t) in s.tokens.iter().enumerate() {
            if i == s.meta.key_pos {
                prop_assert_eq!(t, s.target[0]);
            } else {
                prop_assert!(t < pv.filler || t == pv.marker || t == pv.query, "token {t} at {i}");
            }
        }
    }
}
