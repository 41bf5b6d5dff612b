use acsc::model::{forward, init_params_with_std, ModelDims};
use acsc::solvers::{csc_objective, ista_conv, lipschitz_upper_bound, soft_threshold, ConvIsta};
use acsc::tensor::{analysis_transform, synthesis_transform, toeplitz_from_bank};
use acsc::{FeatureMaps, FilterBank, Image, PaddingMode};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::from_vec(h, w, c, uniform(rng, h * w * c)).unwrap()
}

fn maps(rng: &mut ChaCha8Rng, h: usize, w: usize, m: usize) -> FeatureMaps {
    FeatureMaps::from_vec(h, w, m, uniform(rng, h * w * m)).unwrap()
}

fn bank(rng: &mut ChaCha8Rng, s: usize, cin: usize, cout: usize) -> FilterBank {
    FilterBank::from_vec(s, cin, cout, uniform(rng, s * s * cin * cout)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mode_of(circular: bool) -> PaddingMode {
    if circular {
        PaddingMode::Circular
    } else {
        PaddingMode::Zero
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analysis_and_synthesis_are_adjoint(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, m in 1usize..5, c in 1usize..3, k in 0usize..3, circular in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 2 * k + 1;
        let d = bank(&mut rng, s, m, c);
        let x = image(&mut rng, h, w, c);
        let z = maps(&mut rng, h, w, m);
        let mode = mode_of(circular);
        let lhs = dot(analysis_transform(&x, &d.transposed(), mode).unwrap().data(), z.data());
        let rhs = dot(x.data(), synthesis_transform(&z, &d, mode).unwrap().data());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300), "{lhs} vs {rhs}");
    }

    #[test]
    fn analysis_is_linear(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, m in 1usize..5, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = bank(&mut rng, 3, 1, m);
        let (x, y) = (image(&mut rng, h, w, 1), image(&mut rng, h, w, 1));
        let mix = Image::from_vec(h, w, 1, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = analysis_transform(&mix, &f, PaddingMode::Zero).unwrap();
        let ax = analysis_transform(&x, &f, PaddingMode::Zero).unwrap();
        let ay = analysis_transform(&y, &f, PaddingMode::Zero).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(ax.data()).zip(ay.data()) {
            prop_assert!((l - (a * p + b * q)).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn circular_analysis_commutes_with_shifts(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, dy in -20isize..20, dx in -20isize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = bank(&mut rng, 5, 1, 3);
        let x = image(&mut rng, h, w, 1);
        let a = analysis_transform(&x.shifted(dy, dx), &f, PaddingMode::Circular).unwrap();
        let b = analysis_transform(&x, &f, PaddingMode::Circular).unwrap().shifted(dy, dx);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn transforms_match_toeplitz_matrices(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8, m in 1usize..4, circular in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = mode_of(circular);
        let d = bank(&mut rng, 3, m, 1);
        let dict = toeplitz_from_bank(&d, h, w, mode).unwrap();
        let z = maps(&mut rng, h, w, m);
        let x = image(&mut rng, h, w, 1);
        let syn = synthesis_transform(&z, &d, mode).unwrap();
        for (a, b) in syn.data().iter().zip(dict.apply(&z.to_map_major())) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let ana = analysis_transform(&x, &d.transposed(), mode).unwrap().to_map_major();
        for (a, b) in ana.iter().zip(dict.apply_transpose(x.data())) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn codes_are_exactly_sparse_and_reproducible(seed in any::<u64>()) {
        let dims = ModelDims { filter_size: 5, maps: 6, channels: 1, unroll: 3 };
        let p = init_params_with_std(seed, dims, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = image(&mut rng, 9, 10, 1);
        let a = forward(&x, &p, None, PaddingMode::Zero).unwrap();
        let b = forward(&x, &p, None, PaddingMode::Zero).unwrap();
        prop_assert_eq!(&a.code, &b.code);
        let zeros = a.code.data().iter().filter(|v| **v == 0.0).count();
        prop_assert_eq!(a.sparsity, zeros as f64 / a.code.data().len() as f64);
    }
}

#[test]
fn ista_objective_never_increases() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = bank(&mut rng, 3, 3, 1);
        let x = image(&mut rng, 8, 8, 1);
        let l = lipschitz_upper_bound(&d, 8, 8, 5000, 1e-12, PaddingMode::Zero).unwrap().value;
        let rep = ista_conv(&x, &d, &ConvIsta { lambda: 0.1, max_iters: 200, lipschitz: Some(l), ..Default::default() }).unwrap();
        for pair in rep.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "seed {seed}: {} > {}", pair[1], pair[0]);
        }
        let last = csc_objective(&x, &rep.code, &d, 0.1, None, PaddingMode::Zero).unwrap();
        assert!((last - rep.objective_history.last().unwrap()).abs() <= 1e-12 * last.max(1.0));
    }
}

#[test]
fn converged_code_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = bank(&mut rng, 3, 2, 1);
    let x = image(&mut rng, 7, 6, 1);
    let l = lipschitz_upper_bound(&d, 7, 6, 5000, 1e-12, PaddingMode::Zero).unwrap().value;
    let lambda = 0.05;
    let rep = ista_conv(&x, &d, &ConvIsta { lambda, max_iters: 200_000, lipschitz: Some(l), ..Default::default() }).unwrap();
    assert!(rep.converged);
    let recon = synthesis_transform(&rep.code, &d, PaddingMode::Zero).unwrap();
    let resid = Image::from_vec(7, 6, 1, x.data().iter().zip(recon.data()).map(|(a, b)| a - b).collect()).unwrap();
    let grad = analysis_transform(&resid, &d.transposed(), PaddingMode::Zero).unwrap();
    let stepped = FeatureMaps::from_vec(7, 6, 2, rep.code.data().iter().zip(grad.data()).map(|(z, g)| z + g / l).collect()).unwrap();
    let next = soft_threshold(&stepped, &[lambda / l; 2]).unwrap();
    for (a, b) in next.data().iter().zip(rep.code.data()) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn larger_lambda_never_adds_nonzeros() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let d = bank(&mut rng, 3, 3, 1);
        let x = image(&mut rng, 8, 8, 1);
        let l = lipschitz_upper_bound(&d, 8, 8, 5000, 1e-12, PaddingMode::Zero).unwrap().value;
        let mut prev = usize::MAX;
        for lambda in [0.1, 0.2, 0.4, 0.8, 1.6] {
            let rep = ista_conv(&x, &d, &ConvIsta { lambda, max_iters: 200_000, lipschitz: Some(l), ..Default::default() }).unwrap();
            assert!(rep.converged);
            let nnz = rep.code.data().iter().filter(|v| **v != 0.0).count();
            assert!(nnz <= prev, "seed {seed}, lambda {lambda}: {nnz} > {prev}");
            prev = nnz;
        }
    }
}

#[test]
fn lipschitz_bound_matches_dense_eigenvalue() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let d = bank(&mut rng, 3, 2, 1);
        let dict = toeplitz_from_bank(&d, 6, 6, PaddingMode::Zero).unwrap();
        let mat = DMatrix::from_row_slice(dict.rows(), dict.cols(), dict.data());
        let gram = mat.transpose() * &mat;
        let top = gram.symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let est = lipschitz_upper_bound(&d, 6, 6, 20_000, 1e-14, PaddingMode::Zero).unwrap();
        assert!(((est.eigenvalue - top) / top).abs() <= 1e-6, "{} vs {top}", est.eigenvalue);
        assert!((est.value - 1.01 * est.eigenvalue).abs() <= 1e-12 * est.value);
        assert!(est.value >= top);
    }
}
