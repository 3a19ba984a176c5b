use mame_core::numerics::Tensor;
use mame_core::ssm::kernel::{scan_forward, ScanDims};
use mame_core::ssm::{discretize, selective_scan, BlockDims, Direction, DirectionParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_step_scan_by_hand() {
    // A = -1, Δ = ln 2: Ā = 1/2 and B̄ = (1 - 1/2)·B = 1/2
    let dims = ScanDims { tokens: 2, inner: 1, state: 1 };
    let ln2 = std::f64::consts::LN_2;
    let (y, _) = scan_forward(&[1.0, 0.0], &[ln2, ln2], &[1.0, 1.0], &[1.0, 1.0], &[-1.0], dims, false, false);
    assert!((y[0] - 0.5).abs() < 1e-15);
    assert!((y[1] - 0.25).abs() < 1e-15);
    // the same pair scanned right to left only sees the first token last
    let (y, _) = scan_forward(&[1.0, 0.0], &[ln2, ln2], &[1.0, 1.0], &[1.0, 1.0], &[-1.0], dims, true, false);
    assert!((y[0] - 0.5).abs() < 1e-15);
    assert_eq!(y[1], 0.0);
}

#[test]
fn palindrome_with_shared_parameters_mirrors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = BlockDims { embed: 6, inner: 6, state: 4, dt_rank: 2 };
    let p = DirectionParams::<Tensor<f64>>::init(&mut rng, dims);
    let n = 9;
    let half = Tensor::<f64>::random_uniform(&mut rng, &[n, 6], -1.0, 1.0);
    let data: Vec<f64> = (0..n).flat_map(|t| half.row(t.min(n - 1 - t)).to_vec()).collect();
    let x = Tensor::from_vec(&[n, 6], data).unwrap();
    let f = selective_scan(&x, &p, Direction::Forward).unwrap();
    let b = selective_scan(&x, &p, Direction::Backward).unwrap();
    for t in 0..n {
        for (u, v) in f.y.row(t).iter().zip(b.y.row(n - 1 - t)) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}

proptest! {
    #[test]
    fn abar_in_unit_interval_and_decreasing_in_step(a in -20.0f64..-0.01, d1 in 1e-4f64..1.0, k in 1.01f64..10.0) {
        let (abar1, _) = discretize(&[a], &[1.0], d1).unwrap();
        let (abar2, _) = discretize(&[a], &[1.0], d1 * k).unwrap();
        prop_assert!(abar1[0] > 0.0 && abar1[0] < 1.0);
        prop_assert!(abar2[0] < abar1[0]);
    }

    #[test]
    fn scan_output_shape_and_positive_steps(n in 1usize..20, inner in 1usize..6, state in 1usize..5, seed in any::<u64>(), backward in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DirectionParams::<Tensor<f64>>::init(&mut rng, BlockDims { embed: inner, inner, state, dt_rank: 1 });
        let x = Tensor::<f64>::random_uniform(&mut rng, &[n, inner], -3.0, 3.0);
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        let out = selective_scan(&x, &p, dir).unwrap();
        prop_assert_eq!(out.y.shape(), &[n, inner]);
        prop_assert_eq!(out.delta.shape(), &[n, inner]);
        prop_assert!(out.delta.data().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn fixed_coefficient_scan_is_linear_in_x(n in 1usize..12, seed in any::<u64>(), s in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ScanDims { tokens: n, inner: 2, state: 3 };
        let u = |rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64| Tensor::<f64>::random_uniform(rng, &[len], lo, hi).data().to_vec();
        let (x1, x2) = (u(&mut rng, 2 * n, -1.0, 1.0), u(&mut rng, 2 * n, -1.0, 1.0));
        let delta = u(&mut rng, 2 * n, 0.01, 1.0);
        let (b, c) = (u(&mut rng, 3 * n, -1.0, 1.0), u(&mut rng, 3 * n, -1.0, 1.0));
        let a = u(&mut rng, 6, -4.0, -0.1);
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + s * q).collect();
        let run = |x: &[f64]| scan_forward(x, &delta, &b, &c, &a, dims, false, false).0;
        let (y1, y2, ym) = (run(&x1), run(&x2), run(&mix));
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (y1[i] + s * y2[i])).abs() < 1e-12);
        }
    }
}
