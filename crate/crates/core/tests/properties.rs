use ibss::frames::{construct_frame, frame_residuals, signed_permutations, FrameTolerances};
use ibss::generators::{make_toy_system, Mixing, ToyKind, ToySystemSpec};
use ibss::invariants::transform_correlations;
use ibss::moments::{moments_of, read_moment_field, write_moment_field, MomentField};
use ibss::pipeline::{run_bss, BssConfig};
use ibss::separability::{factorize_streams, FactorizationConfig, SourceStreams};
use ibss::tensor::SymTensor;
use ibss::trajectory::{read_binary, read_csv, write_binary, write_csv, Strategy as Cells, TimeSeries};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-2.0..2.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

/// Well-conditioned mixing: identity plus a bounded perturbation.
fn mixing(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-0.45..0.45f64, n * n)
        .prop_map(move |v| DMatrix::identity(n, n) + DMatrix::from_vec(n, n, v))
}

/// Independent non-Gaussian components with distinct kurtosis, mixed by `a`.
fn mixed_samples(a: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = a.nrows();
    (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..dim)
                .map(|k| match k % 3 {
                    0 => rng.random::<f64>() * 2.0 - 1.0,
                    1 => -rng.random::<f64>().ln(),
                    _ => rng.random::<f64>().powi(3),
                })
                .collect();
            (0..dim).map(|i| (0..dim).map(|j| a[(i, j)] * s[j]).sum()).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_transforms_compose(vals in proptest::collection::vec(-1.0..1.0f64, 10), a in matrix(3), b in matrix(3)) {
        let t = SymTensor::from_canonical(3, 3, vals);
        let lhs = t.transform(&b).transform(&a);
        let rhs = t.transform(&(&a * &b));
        for (x, y) in lhs.values().iter().zip(rhs.values()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn moments_scale_with_velocity(scale in 0.1..10.0f64, seed in 0u64..1000) {
        let v = mixed_samples(&DMatrix::identity(2, 2), 500, seed);
        let scaled: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
        let (m, ms) = (moments_of(&v, 4).unwrap(), moments_of(&scaled, 4).unwrap());
        for k in 2..=4 {
            for ((_, x), (_, y)) in m.order(k).unwrap().iter().zip(ms.order(k).unwrap().iter()) {
                prop_assert!((x * scale.powi(k as i32) - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn frames_whiten_and_diagonalise(a in mixing(3), seed in 0u64..1000) {
        let mt = moments_of(&mixed_samples(&a, 4000, seed), 4).unwrap();
        let frame = construct_frame(&mt, &FrameTolerances::default()).unwrap();
        let (white, off) = frame_residuals(&frame, &mt);
        prop_assert!(white <= 1e-10, "whitening residual {white}");
        prop_assert!(off <= 1e-8, "off-diagonal residual {off}");
    }

    /// Invariants of `A v` equal those of `v` up to relabelling the frame axes.
    #[test]
    fn invariants_survive_linear_maps(a in mixing(2), seed in 0u64..1000) {
        let v = mixed_samples(&DMatrix::identity(2, 2), 4000, seed);
        let av: Vec<Vec<f64>> = v.iter().map(|r| (0..2).map(|i| a[(i, 0)] * r[0] + a[(i, 1)] * r[1]).collect()).collect();
        let tol = FrameTolerances::default();
        let inv = |s: &[Vec<f64>]| {
            let mt = moments_of(s, 5).unwrap();
            transform_correlations(&construct_frame(&mt, &tol).unwrap(), &mt, 5).unwrap()
        };
        let (x, y) = (inv(&v), inv(&av));
        let gap = signed_permutations(2)
            .iter()
            .map(|q| {
                let r = y.relabel(q);
                (3..=5)
                    .flat_map(|k| x.order(k).unwrap().values().iter().zip(r.order(k).unwrap().values()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        prop_assert!(gap <= 1e-8, "gap {gap}");
    }

    /// The statistic sees standardised coordinates, so per-coordinate affine
    /// maps (reflections included) leave it unchanged.
    #[test]
    fn factorization_is_affine_invariant(
        scale in proptest::collection::vec(prop_oneof![-5.0..-0.2f64, 0.2..5.0f64], 2),
        shift in proptest::collection::vec(-10.0..10.0f64, 2),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let values: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let rates: Vec<Vec<f64>> = (0..n).map(|i| vec![values[i][0] - 0.5, rng.random::<f64>() + values[i][0]]).collect();
        let base = SourceStreams { d_a: 1, d_b: 1, values: values.clone(), rates: rates.clone() };
        let moved = SourceStreams {
            d_a: 1,
            d_b: 1,
            values: values.iter().map(|v| (0..2).map(|k| scale[k] * v[k] + shift[k]).collect()).collect(),
            rates: rates.iter().map(|r| (0..2).map(|k| scale[k] * r[k]).collect()).collect(),
        };
        let cfg = FactorizationConfig::default();
        let (s0, s1) = (factorize_streams(&base, &cfg).unwrap().statistic, factorize_streams(&moved, &cfg).unwrap().statistic);
        prop_assert!((s0 - s1).abs() <= 1e-9, "{s0} vs {s1}");
    }

    #[test]
    fn binary_series_round_trip(dim in 2usize..5, len in 3usize..50, dt in 1e-4..1.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..dim * len).map(|_| rng.random::<f64>() * 1e3 - 500.0).collect();
        let ts = TimeSeries::from_flat(dt, dim, data).unwrap();
        let mut buf = Vec::new();
        write_binary(&ts, &mut buf).unwrap();
        prop_assert_eq!(read_binary(&mut buf.as_slice()).unwrap(), ts);
    }

    #[test]
    fn csv_series_round_trip(dim in 2usize..5, len in 3usize..50, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..dim * len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let ts = TimeSeries::from_flat(0.25, dim, data).unwrap();
        let mut buf = Vec::new();
        write_csv(&ts, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.as_flat(), ts.as_flat());
        prop_assert_eq!(back.channel_names(), ts.channel_names());
        prop_assert!((back.dt() - ts.dt()).abs() < 1e-12);
    }

    #[test]
    fn moment_field_round_trip(cells in 1usize..5, seed in 0u64..1000) {
        let field = MomentField {
            cells: (0..cells).map(|c| moments_of(&mixed_samples(&DMatrix::identity(2, 2), 50, seed + c as u64), 5).unwrap()).collect(),
        };
        let mut buf = Vec::new();
        write_moment_field(&field, &mut buf).unwrap();
        prop_assert_eq!(read_moment_field(&mut buf.as_slice()).unwrap(), field);
    }
}

fn toy_cfg() -> BssConfig {
    BssConfig {
        strategy: Cells::Grid { cells_per_axis: 10 },
        min_count: Some(300),
        ..Default::default()
    }
}

#[test]
fn verdict_ignores_channel_order() {
    let toy = make_toy_system(&ToySystemSpec::separable(2), 200_000, 0.005).unwrap();
    let swapped = toy.observed.select_channels(&[1, 0]).unwrap();
    let cfg = toy_cfg();
    let a = run_bss(&toy.observed, &cfg).unwrap();
    let b = run_bss(&swapped, &cfg).unwrap();
    let stat = |o: &ibss::pipeline::BssOutput| o.winner().and_then(|c| c.factorization.as_ref()).map(|f| f.statistic);
    let (sa, sb) = (stat(&a).expect("separable"), stat(&b).expect("separable"));
    // The grid is the same up to transposition; only summation order differs.
    assert!((sa - sb).abs() <= 1e-6, "{sa} vs {sb}");
}

#[test]
fn linearity_is_scale_covariant() {
    let spec = ToySystemSpec {
        kind: ToyKind::LinearMix,
        mixing: Mixing::Matrix(vec![vec![1.0, 0.6], vec![-0.4, 1.0]]),
        ..ToySystemSpec::separable(1)
    };
    let toy = make_toy_system(&spec, 200_000, 0.005).unwrap();
    let doubled = TimeSeries::from_flat(
        toy.observed.dt(),
        2,
        toy.observed.as_flat().iter().map(|x| 2.0 * x).collect(),
    )
    .unwrap();
    let cfg = toy_cfg();
    let cov = |ts: &TimeSeries| run_bss(ts, &cfg).unwrap().linearity.unwrap().unwrap().direction_cov;
    let (a, b) = (cov(&toy.observed), cov(&doubled));
    assert!((a - b).abs() <= 1e-6 * (1.0 + a), "{a} vs {b}");
}
