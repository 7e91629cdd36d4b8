use flylora::adapters::{backward_b, count_activated_params, lora_forward, FlyAdapter};
use flylora::linalg::{frobenius_inner, SeededStream};
use flylora::merging::{merge_weight_average, pairwise_task_orthogonality, MergeSpec};
use flylora::projection::make_sparse_projection;
use flylora::routing::{select_topk, BalanceState};
use flylora::{AdapterConfig, DenseMatrix, ProjectionSpec, SelectionMode, Variant};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, SeededStream::new(seed, 3).normal_vec(rows * cols)).unwrap()
}

fn fly(m: usize, n: usize, r: usize, k: usize, seed: u64) -> FlyAdapter {
    let cfg = AdapterConfig::new(Variant::FlyLora, m, n, r, k);
    let mut a = FlyAdapter::new(cfg, matrix(m, n, seed ^ 1), seed).unwrap();
    a.b = matrix(m, r, seed ^ 2);
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frobenius_self_inner_is_squared_norm(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let x = matrix(rows, cols, seed);
        let v = frobenius_inner(&x, &x).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - x.frobenius_norm().powi(2)).abs() <= 1e-12 * v.max(1.0));
    }

    #[test]
    fn projections_are_structured_and_reproducible(n in 4usize..200, r in 1usize..40, frac in 0.05f64..1.0, seed in any::<u64>()) {
        let p = ((frac * n as f64).round() as usize).clamp(1, n - 1);
        let spec = ProjectionSpec::new(n, r, p, seed).unwrap();
        let a = make_sparse_projection(&spec).unwrap();
        prop_assert_eq!(&a, &make_sparse_projection(&spec).unwrap());
        for i in 0..r {
            let (idx, _) = a.row(i);
            prop_assert_eq!(idx.len(), p);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&c| c < n));
        }
    }

    #[test]
    fn window_counts_are_conserved(r in 2usize..24, kf in 0.0f64..1.0, tokens in 1usize..60, seed in any::<u64>()) {
        let k = 1 + ((r - 1) as f64 * kf) as usize;
        let mut st = BalanceState::new(r, k, 1e-3).unwrap();
        let mut s = SeededStream::new(seed, 0);
        for _ in 0..tokens {
            let d = select_topk(&s.normal_vec(r), &st.bias, k, SelectionMode::Signed).unwrap();
            st.record_assignments(&d);
        }
        prop_assert_eq!(st.counts.iter().sum::<u64>(), (tokens * k) as u64);
    }

    #[test]
    fn full_selection_matches_dense_lora(m in 2usize..24, n in 2usize..64, rf in 0.0f64..1.0, seed in any::<u64>()) {
        let r = 1 + ((m.min(n) - 1) as f64 * rf) as usize;
        let ad = fly(m, n, r, r, seed);
        let x = SeededStream::new(seed, 9).normal_vec(n);
        let (y, _) = ad.forward(&x).unwrap();
        let want = lora_forward(&ad.base, &ad.b, &ad.a.to_dense(), ad.config.alpha, &x).unwrap();
        for (a, b) in y.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn exactly_k_terms_and_masked_gradient(m in 2usize..16, n in 4usize..48, rf in 0.0f64..1.0, kf in 0.0f64..1.0, seed in any::<u64>()) {
        let r = 1 + ((m.min(n) - 1) as f64 * rf) as usize;
        let k = 1 + ((r - 1) as f64 * kf) as usize;
        let ad = fly(m, n, r, k, seed);
        let mut s = SeededStream::new(seed, 11);
        let x = s.normal_vec(n);
        let up = s.normal_vec(m);
        let (_, d) = ad.forward(&x).unwrap();
        prop_assert_eq!(d.selected.len(), k);
        prop_assert_eq!(d.mask.iter().filter(|&&b| b).count(), k);
        let g = backward_b(&ad, &x, &up, &d).unwrap();
        let h = ad.a.spmv(&x).unwrap();
        let s = ad.config.scale();
        for j in 0..m {
            for i in 0..r {
                let dense = s * up[j] * h[i];
                let want = if d.mask[i] { dense } else { 0.0 };
                prop_assert_eq!(g.get(j, i).to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn param_ordering_below_the_router_break_even(d in 1u64..5000, r in 2u64..128, kf in 0.0f64..1.0, nf in 0.0f64..1.0) {
        let k = 1 + ((r - 2) as f64 * kf) as u64;
        // Split-LoRA's router term dN stays below LoRA's 2dr only while N < 2(r − k).
        let experts = 1 + ((2 * (r - k) - 2) as f64 * nf) as u64;
        let lora = count_activated_params(Variant::Lora, d, r, k, experts).unwrap();
        let split = count_activated_params(Variant::SplitLora, d, r, k, experts).unwrap();
        let flyc = count_activated_params(Variant::FlyLora, d, r, k, experts).unwrap();
        prop_assert!(flyc < split && split < lora, "{flyc} {split} {lora}");
    }

    #[test]
    fn merge_is_linear_and_orthogonality_symmetric(t in 2usize..5, seed in any::<u64>()) {
        let deltas: Vec<DenseMatrix> = (0..t).map(|i| matrix(6, 10, seed.wrapping_add(i as u64))).collect();
        let mut s = SeededStream::new(seed, 5);
        let w: Vec<f64> = (0..t).map(|_| s.uniform()).collect();
        let spec = MergeSpec::new(deltas.clone(), Some(w.clone())).unwrap();
        let merged = merge_weight_average(&spec);
        let x = s.normal_vec(10);
        let got = merged.matvec(&x).unwrap();
        let mut want = vec![0.0; 6];
        for (wi, d) in w.iter().zip(&deltas) {
            for (o, v) in want.iter_mut().zip(d.matvec(&x).unwrap()) {
                *o += wi * v;
            }
        }
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let (a, b) = (&deltas[0], &deltas[1]);
        prop_assert_eq!(
            pairwise_task_orthogonality(a, b).unwrap(),
            pairwise_task_orthogonality(b, a).unwrap()
        );
    }
}

#[test]
fn split_overtakes_lora_past_the_break_even() {
    let (d, r, k) = (64, 8, 4);
    let at = |e| count_activated_params(Variant::SplitLora, d, r, k, e).unwrap();
    let lora = count_activated_params(Variant::Lora, d, r, k, 1).unwrap();
    assert!(at(7) < lora);
    assert_eq!(at(8), lora);
}
