use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Projects random points seen by two identity-intrinsics cameras related by
/// `x2 = R x1 + t`; returns matches and `[t]x R`.
fn two_view(seed: u64, n: usize) -> (Vec<Match>, Matrix3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Rotation3::from_euler_angles(
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.1..0.1),
    )
    .into_inner();
    let t = Vector3::new(
        rng.random_range(0.5..1.0),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(4.0..9.0),
        );
        let q = r * p + t;
        if q.z <= 0.5 {
            continue;
        }
        out.push(Match::new(
            NormPoint::new(p.x / p.z, p.y / p.z),
            NormPoint::new(q.x / q.z, q.y / q.z),
        ));
    }
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    (out, tx * r)
}

fn same_up_to_scale(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let a = a / a.norm();
    let b = b / b.norm();
    (a - b).norm().min((a + b).norm())
}

/// Point-line distance written out without matrix helpers.
fn oracle_distance(f: &Matrix3<f64>, a: NormPoint, b: NormPoint) -> f64 {
    let l0 = f[(0, 0)] * a.x + f[(0, 1)] * a.y + f[(0, 2)];
    let l1 = f[(1, 0)] * a.x + f[(1, 1)] * a.y + f[(1, 2)];
    let l2 = f[(2, 0)] * a.x + f[(2, 1)] * a.y + f[(2, 2)];
    (l0 * b.x + l1 * b.y + l2).abs() / (l0 * l0 + l1 * l1).sqrt()
}

fn translation_f(scale: f64) -> FundamentalMatrix {
    FundamentalMatrix::raw(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, scale, 0.0))
}

#[test]
fn hartley_identity_on_normalized_input() {
    let r = std::f64::consts::SQRT_2;
    let pts = [
        NormPoint::new(r, 0.0),
        NormPoint::new(-r, 0.0),
        NormPoint::new(0.0, r),
        NormPoint::new(0.0, -r),
    ];
    let (out, t) = hartley_normalize(&pts).unwrap();
    assert!((t - Matrix3::identity()).norm() < 1e-12);
    for (a, b) in out.iter().zip(&pts) {
        assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    }
}

#[test]
fn hartley_rejects_degenerate() {
    let p = NormPoint::new(0.3, 0.1);
    assert_eq!(hartley_normalize(&[p, p, p]), Err(GeometryError::Coincident));
    assert!(matches!(hartley_normalize(&[p]), Err(GeometryError::TooFew { .. })));
}

proptest! {
    #[test]
    fn hartley_centroid_radius_and_transform(seed in 0u64..10_000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<NormPoint> = (0..n)
            .map(|_| NormPoint::new(rng.random_range(-3.0..5.0), rng.random_range(-1.0..2.0)))
            .collect();
        let (out, t) = hartley_normalize(&pts).unwrap();
        let cx = out.iter().map(|p| p.x).sum::<f64>() / n as f64;
        let cy = out.iter().map(|p| p.y).sum::<f64>() / n as f64;
        prop_assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
        let mr = out.iter().map(|p| p.x.hypot(p.y)).sum::<f64>() / n as f64;
        prop_assert!((mr - std::f64::consts::SQRT_2).abs() < 1e-9);
        for (p, q) in pts.iter().zip(&out) {
            let h = t * p.homogeneous();
            prop_assert!((h.x / h.z - q.x).abs() < 1e-12);
            prop_assert!((h.y / h.z - q.y).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_scale_invariant(seed in 0u64..1000, exp in -3i32..=3) {
        let (matches, _) = two_view(seed, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let noisy: Vec<Match> = matches
            .iter()
            .map(|m| Match::new(m.p1, NormPoint::new(m.p2.x + rng.random_range(-0.01..0.01), m.p2.y)))
            .collect();
        let f = eight_point(&matches).unwrap();
        let scaled = FundamentalMatrix::raw(f.matrix() * 10f64.powi(exp));
        let a = reprojection_error(&f, &noisy).unwrap();
        let b = reprojection_error(&scaled, &noisy).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let da = epipolar_distance(&f, noisy[0].p1, noisy[0].p2).unwrap();
        let db = epipolar_distance(&scaled, noisy[0].p1, noisy[0].p2).unwrap();
        prop_assert!((da - db).abs() <= 1e-12 * da.max(1.0));
    }
}

#[test]
fn eight_point_recovers_known_f() {
    let (matches, truth) = two_view(11, 20);
    let f = eight_point(&matches).unwrap();
    assert!(same_up_to_scale(f.matrix(), &truth) < 1e-8);
    let max_res = matches
        .iter()
        .map(|m| f.residual(m.p1, m.p2).abs())
        .fold(0.0, f64::max);
    assert!(max_res < 1e-9, "{max_res}");
    assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
    assert!(f.matrix().determinant().abs() < 1e-12);
}

#[test]
fn eight_point_many_scenes() {
    for seed in 0..100 {
        let (matches, truth) = two_view(1000 + seed, 8 + (seed as usize % 30));
        let f = eight_point(&matches).unwrap();
        for m in &matches {
            assert!(f.residual(m.p1, m.p2).abs() < 1e-9, "seed {seed}");
        }
        assert!(same_up_to_scale(f.matrix(), &truth) < 1e-6, "seed {seed}");
    }
}

#[test]
fn eight_point_pure_translation() {
    // Camera moves along x: corresponding points share their row.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let matches: Vec<Match> = (0..15)
        .map(|_| {
            let (x, y, z) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..8.0),
            );
            Match::new(NormPoint::new(x / z, y / z), NormPoint::new((x + 1.0) / z, y / z))
        })
        .collect();
    let f = eight_point(&matches).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let expect = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -s, 0.0, s, 0.0);
    assert!(same_up_to_scale(f.matrix(), &expect) < 1e-9, "{}", f.matrix());
}

#[test]
fn eight_point_needs_eight() {
    let (matches, _) = two_view(3, 7);
    assert_eq!(
        eight_point(&matches),
        Err(GeometryError::TooFew { needed: 8, got: 7 })
    );
}

#[test]
fn eight_point_rejects_rank_deficient_design() {
    let m = Match::new(NormPoint::new(0.1, 0.2), NormPoint::new(0.3, 0.4));
    let mut matches = vec![m; 6];
    matches.push(Match::new(NormPoint::new(0.5, 0.2), NormPoint::new(0.3, 0.9)));
    matches.push(Match::new(NormPoint::new(-0.5, 0.2), NormPoint::new(0.1, 0.9)));
    assert_eq!(eight_point(&matches), Err(GeometryError::RankDeficient));
}

#[test]
fn epipolar_distance_examples() {
    let f = translation_f(1.0);
    let d0 = epipolar_distance(&f, NormPoint::new(0.0, 0.0), NormPoint::new(5.0, 0.0)).unwrap();
    assert_eq!(d0, 0.0);
    let d = epipolar_distance(&f, NormPoint::new(0.0, 0.0), NormPoint::new(5.0, 0.3)).unwrap();
    assert!((d - 0.3).abs() < 1e-15);
    let f10 = FundamentalMatrix::raw(f.matrix() * 10.0);
    let d10 = epipolar_distance(&f10, NormPoint::new(0.0, 0.0), NormPoint::new(5.0, 0.3)).unwrap();
    assert!((d10 - d).abs() < 1e-15);
}

#[test]
fn line_at_infinity_rejected() {
    let f = FundamentalMatrix::raw(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
    assert!(matches!(
        epipolar_distance(&f, NormPoint::new(0.2, 0.1), NormPoint::new(0.0, 0.0)),
        Err(GeometryError::LineAtInfinity { .. })
    ));
}

#[test]
fn reprojection_examples() {
    let (matches, truth) = two_view(2, 10);
    let f = FundamentalMatrix::new(truth).unwrap();
    assert!(reprojection_error(&f, &matches).unwrap() < 1e-12);
    // Forward distance |3ya - yb| = 0.3, backward |3ya - yb| / 3 = 0.1.
    let f3 = translation_f(3.0);
    let m = Match::new(NormPoint::new(0.0, 0.0), NormPoint::new(0.7, 0.3));
    let fwd = epipolar_distance(&f3, m.p1, m.p2).unwrap();
    let bwd = epipolar_distance(&f3.transpose(), m.p2, m.p1).unwrap();
    assert!((fwd - 0.3).abs() < 1e-15 && (bwd - 0.1).abs() < 1e-15);
    assert!((reprojection_error(&f3, &[m]).unwrap() - 0.2).abs() < 1e-15);
    assert!(reprojection_error(&f3, &[]).is_err());
}

#[test]
fn reprojection_matches_summation_oracle() {
    for seed in 0..20 {
        let (matches, truth) = two_view(seed, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let noisy: Vec<Match> = matches
            .iter()
            .map(|m| {
                Match::new(
                    m.p1,
                    NormPoint::new(
                        m.p2.x + rng.random_range(-0.02..0.02),
                        m.p2.y + rng.random_range(-0.02..0.02),
                    ),
                )
            })
            .collect();
        let f = FundamentalMatrix::new(truth).unwrap();
        let ft = f.matrix().transpose();
        let mut sum = 0.0;
        for m in &noisy {
            sum += oracle_distance(f.matrix(), m.p1, m.p2) + oracle_distance(&ft, m.p2, m.p1);
        }
        let oracle = sum / (2.0 * noisy.len() as f64);
        let got = reprojection_error(&f, &noisy).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");

        let swapped: Vec<Match> = noisy.iter().map(|m| m.swapped()).collect();
        let back = reprojection_error(&f.transpose(), &swapped).unwrap();
        assert!((got - back).abs() < 1e-12);

        let uniform: Vec<Match> = noisy
            .iter()
            .map(|m| Match::weighted(m.p1, m.p2, 0.37))
            .collect();
        assert!((sparse_distance(&uniform, &f).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn sparse_distance_examples() {
    let f = translation_f(1.0);
    let outlier = Match::weighted(NormPoint::new(0.0, 0.0), NormPoint::new(0.2, 0.4), 1.0);
    let exact = Match::weighted(NormPoint::new(0.1, 0.2), NormPoint::new(0.5, 0.2), 3.0);
    assert!((sparse_distance(&[outlier, exact], &f).unwrap() - 0.1).abs() < 1e-15);

    let noisy = Match::weighted(NormPoint::new(0.0, 0.1), NormPoint::new(0.3, 0.15), 1.0);
    let alone = sparse_distance(&[noisy, exact], &f).unwrap();
    let zeroed = Match {
        weight: Some(0.0),
        ..outlier
    };
    let with_zero = sparse_distance(&[noisy, zeroed, exact], &f).unwrap();
    assert_eq!(alone, with_zero);

    assert_eq!(
        sparse_distance(&[zeroed], &f),
        Err(GeometryError::ZeroWeight)
    );
    assert!(matches!(
        sparse_distance(&[Match::new(exact.p1, exact.p2)], &f),
        Err(GeometryError::Weight { index: 0, .. })
    ));
}

/// Inliers from `two_view` followed by outliers whose symmetric distance
/// under the true model is at least 1e-2.
fn contaminated(seed: u64, inliers: usize, outliers: usize) -> (Vec<Match>, Vec<bool>) {
    let (mut matches, truth) = two_view(seed, inliers);
    let f = FundamentalMatrix::new(truth).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let mut flags = vec![true; inliers];
    while flags.len() < inliers + outliers {
        let m = Match::new(
            NormPoint::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4)),
            NormPoint::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4)),
        );
        if symmetric_distance(&f, &m).unwrap() >= 1e-2 {
            matches.push(m);
            flags.push(false);
        }
    }
    (matches, flags)
}

#[test]
fn ransac_recovers_planted_inliers() {
    let (matches, truth) = contaminated(42, 70, 30);
    let cfg = RansacConfig {
        seed: 42,
        ..RansacConfig::default()
    };
    let out = ransac_fundamental(&matches, &cfg).unwrap();
    let r = out.consensus().expect("consensus");
    assert_eq!(r.inliers, truth);
    assert!(r.iterations <= cfg.max_iters);
    assert_eq!(ransac_fundamental(&matches, &cfg).unwrap(), out);
}

#[test]
fn ransac_all_exact() {
    let (matches, _) = two_view(8, 30);
    let out = ransac_fundamental(&matches, &RansacConfig::default()).unwrap();
    let r = out.consensus().unwrap();
    assert_eq!(r.inlier_count(), 30);
    assert_eq!(r.iterations, 1);
}

#[test]
fn ransac_weighted_ignores_zero_weight_outliers() {
    let (matches, truth) = contaminated(17, 70, 30);
    let weighted: Vec<Match> = matches
        .iter()
        .zip(&truth)
        .map(|(m, t)| Match::weighted(m.p1, m.p2, if *t { 0.8 } else { 0.0 }))
        .collect();
    let base = RansacConfig {
        seed: 3,
        ..RansacConfig::default()
    };
    let plain = ransac_fundamental(&weighted, &base).unwrap();
    let w = ransac_fundamental(
        &weighted,
        &RansacConfig {
            weighted: true,
            ..base.clone()
        },
    )
    .unwrap();
    assert_eq!(w.consensus().unwrap().inliers, truth);
    assert_eq!(plain.consensus().unwrap().inliers, w.consensus().unwrap().inliers);
    // Every weighted sample is clean, so the first hypothesis already has
    // the full inlier set and no later one can replace it.
    assert!(w.consensus().unwrap().iterations <= plain.consensus().unwrap().iterations);
}

#[test]
fn ransac_preconditions_and_no_consensus() {
    let (matches, _) = two_view(1, 7);
    assert!(matches!(
        ransac_fundamental(&matches, &RansacConfig::default()),
        Err(GeometryError::TooFew { .. })
    ));
    let (matches, _) = two_view(1, 12);
    assert!(matches!(
        ransac_fundamental(
            &matches,
            &RansacConfig {
                threshold: 0.0,
                ..RansacConfig::default()
            }
        ),
        Err(GeometryError::Threshold(_))
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random: Vec<Match> = (0..40)
        .map(|_| {
            Match::new(
                NormPoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                NormPoint::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            )
        })
        .collect();
    let out = ransac_fundamental(
        &random,
        &RansacConfig {
            threshold: 1e-9,
            max_iters: 50,
            ..RansacConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out, RansacOutcome::NoConsensus { iterations: 50 });
}

#[test]
fn ransac_is_seed_deterministic() {
    let (matches, _) = contaminated(9, 40, 20);
    let cfg = RansacConfig {
        seed: 77,
        ..RansacConfig::default()
    };
    let a = ransac_fundamental(&matches, &cfg).unwrap();
    let b = ransac_fundamental(&matches, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pixel_normalization_round_trip() {
    let p = NormPoint::from_pixel(0.0, 31.0, 48, 32);
    assert_eq!((p.x, p.y), (-1.0, 1.0));
    let (x, y) = NormPoint::from_pixel(12.5, 7.25, 48, 32).to_pixel(48, 32);
    assert!((x - 12.5).abs() < 1e-12 && (y - 7.25).abs() < 1e-12);
}
