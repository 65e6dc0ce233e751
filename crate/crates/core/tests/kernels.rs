use dkp::autodiff::{check_gradients, gradient_discrepancy, Tape};
use dkp::kernels::{apply_kernel, kernel_consistency_check, kernel_matrix, squared_distances, KernelSpec, ReluScale};
use dkp::linalg::cholesky_jittered;
use dkp::Matrix;
use proptest::prelude::*;

fn features(n: usize, d: usize, seed: u64) -> Matrix {
    Tape::new(seed).normal_matrix(n, d)
}

fn gram_of(f: &Matrix) -> Matrix {
    f.matmul(&f.transpose()).unwrap().scale(1.0 / f.cols() as f64)
}

fn specs() -> [KernelSpec; 4] {
    [
        KernelSpec::linear(),
        KernelSpec::squared_exponential(0.7),
        KernelSpec::arccos_relu(ReluScale::Expectation),
        KernelSpec::arccos_relu(ReluScale::Doubled),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_are_symmetric_and_factorizable(n in 2usize..9, d in 1usize..6, seed in any::<u64>()) {
        let g = gram_of(&features(n, d, seed));
        for spec in specs() {
            let k = kernel_matrix(&spec, &g).unwrap();
            prop_assert!(k.is_symmetric(1e-12));
            prop_assert!(cholesky_jittered(&k).is_ok());
        }
    }

    #[test]
    fn marginalization_and_permutation_commute(n in 2usize..8, d in 1usize..6, seed in any::<u64>()) {
        let g = gram_of(&features(n, d, seed));
        for spec in specs() {
            prop_assert!(kernel_consistency_check(&spec, &g).unwrap().exact());
        }
    }

    #[test]
    fn diagonal_conventions(n in 1usize..7, seed in any::<u64>()) {
        let g = gram_of(&features(n, 3, seed));
        let se = kernel_matrix(&KernelSpec::squared_exponential(1.3), &g).unwrap();
        let half = kernel_matrix(&KernelSpec::arccos_relu(ReluScale::Expectation), &g).unwrap();
        let full = kernel_matrix(&KernelSpec::arccos_relu(ReluScale::Doubled), &g).unwrap();
        for i in 0..n {
            prop_assert_eq!(se[(i, i)], 1.0);
            prop_assert!((half[(i, i)] - g[(i, i)] / 2.0).abs() < 1e-12);
            prop_assert!((full[(i, i)] - g[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_are_a_valid_metric_square(n in 2usize..7, seed in any::<u64>()) {
        let t = Tape::new(0);
        let r = squared_distances(t.constant(gram_of(&features(n, 4, seed)))).unwrap();
        let r = r.value();
        prop_assert!(r.is_symmetric(0.0));
        for i in 0..n {
            prop_assert_eq!(r[(i, i)], 0.0);
            for j in 0..n {
                prop_assert!(r[(i, j)] >= 0.0);
            }
        }
    }
}

#[test]
fn distances_match_feature_space() {
    let f = features(6, 5, 3);
    let g = gram_of(&f);
    let t = Tape::new(0);
    let r = squared_distances(t.constant(g)).unwrap();
    let scaled = f.scale(1.0 / (f.cols() as f64).sqrt());
    for i in 0..6 {
        for j in 0..6 {
            let d: f64 = (0..5).map(|c| (scaled[(i, c)] - scaled[(j, c)]).powi(2)).sum();
            assert!((r.value()[(i, j)] - d).abs() < 1e-12);
        }
    }
}

#[test]
fn named_consistency_cases() {
    let se = kernel_consistency_check(&KernelSpec::squared_exponential(1.0), &gram_of(&features(5, 7, 1))).unwrap();
    assert!(se.exact());
    let relu = kernel_consistency_check(&KernelSpec::arccos_relu(ReluScale::Expectation), &gram_of(&features(6, 8, 2))).unwrap();
    assert!(relu.exact());
    let perm = kernel_consistency_check(&KernelSpec::arccos_relu(ReluScale::Doubled), &gram_of(&features(4, 5, 3))).unwrap();
    assert_eq!(perm.permutation_max_diff, 0.0);
}

#[test]
fn gradients_of_every_family() {
    let g = gram_of(&features(5, 7, 4));
    let w = features(5, 5, 5);
    for spec in specs() {
        let (an, nu) = check_gradients(
            |t, v| {
                let k = apply_kernel(&spec, v[0].symmetrize()?)?;
                Ok(k.mul(t.constant(w.clone()))?.sum())
            },
            std::slice::from_ref(&g),
            0,
            1e-6,
        )
        .unwrap();
        assert!(gradient_discrepancy(&an, &nu) < 1e-4, "{spec:?}");
    }
}
