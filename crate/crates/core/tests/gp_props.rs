use deeppipe_core::gp::{self, KernelParams};
use proptest::prelude::*;

fn points(max_n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 1..max_n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictive_variance_nonnegative(
        x in points(12, 3),
        probe in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
        ls in 0.05f64..5.0,
        os in 0.1f64..3.0,
        noise in 2e-6f64..0.5,
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = (0..x.len()).map(|i| ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let k = KernelParams::from_values(ls, os, noise).unwrap();
        let state = gp::fit(&x, &y, &k).unwrap();
        for p in probe.iter().chain(&x) {
            let (m, v) = state.predict(p);
            prop_assert!(m.is_finite());
            prop_assert!(v >= 0.0);
            prop_assert!(v <= k.outputscale() + 1e-9);
        }
    }

    #[test]
    fn kernel_matrix_symmetric_with_outputscale_diagonal(x in points(10, 2), ls in 0.1f64..3.0) {
        let k = KernelParams::from_values(ls, 1.7, 0.01).unwrap();
        let m = gp::kernel_matrix(&x, &k);
        for i in 0..x.len() {
            prop_assert!((m[(i, i)] - 1.7).abs() < 1e-12);
            for j in 0..x.len() {
                prop_assert_eq!(m[(i, j)], m[(j, i)]);
                prop_assert!(m[(i, j)] <= 1.7 + 1e-12);
            }
        }
    }

    #[test]
    fn nll_agrees_with_fitted_state(x in points(10, 2), noise in 1e-4f64..0.3) {
        let y: Vec<f64> = x.iter().map(|r| r[0].sin() + r[1]).collect();
        let k = KernelParams::from_values(0.8, 1.2, noise).unwrap();
        let a = gp::nll(&x, &y, &k).unwrap();
        let b = gp::fit(&x, &y, &k).unwrap().nll();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        let g = gp::nll_grad(&x, &y, &k).unwrap();
        prop_assert!((g.value - a).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn many_duplicates_still_fit() {
    let x = vec![vec![0.5, 0.5]; 40];
    let y: Vec<f64> = (0..40).map(|i| (i % 3) as f64).collect();
    let k = KernelParams::from_values(1.0, 1.0, 2e-6).unwrap();
    let state = gp::fit(&x, &y, &k).unwrap();
    let (m, v) = state.predict(&[0.5, 0.5]);
    assert!((m - 1.0).abs() < 0.05, "mean {m}");
    assert!(v >= 0.0);
}
