//! Certification experiments for the static constructors: sampled
//! outputs are checked against the brute-force oracle on instances small
//! enough to enumerate, with empirical failure rates held below the
//! declared lambda. Also the union property: certified coresets of
//! disjoint parts certify their union at the same quality.

use num_bigint::BigUint;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dyncoreset::metric::{Objective, Point, Space, WeightedPoint};
use dyncoreset::oracle::{self, CertMode};
use dyncoreset::static_coreset::{CallParams, Constructor, ConstructorKind};
use dyncoreset::weights::{BoundedRational, DenomTag, WeightParams};

fn two_cluster_unit_points(n: usize, seed: u64) -> Vec<(Point, BigUint)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (cx, cy) = if i % 2 == 0 { (0.0, 0.0) } else { (25.0, 5.0) };
            (
                Point::new(i as u64, vec![cx + rng.gen_range(-2.0..2.0), cy + rng.gen_range(-2.0..2.0)]),
                BigUint::from(1u32),
            )
        })
        .collect()
}

fn as_weighted(items: &[(Point, BigUint)], denom: &DenomTag) -> Vec<WeightedPoint> {
    items
        .iter()
        .map(|(p, w)| WeightedPoint {
            point: p.clone(),
            weight: BoundedRational::new(w.clone(), denom.clone()),
        })
        .collect()
}

fn output_weighted(
    out: &dyncoreset::static_coreset::ConstructorOutput,
) -> Vec<WeightedPoint> {
    let mut denom = DenomTag::one();
    for f in &out.extra_denom {
        denom.push(*f);
    }
    as_weighted(&out.items, &denom)
}

/// 200 unit-weight points in 2 clusters, k=2: ring sampling certifies at
/// eps_s = 0.5 with empirical failure rate well under lambda_s over 200
/// seeds.
#[test]
fn rings_certifies_two_cluster_instances() {
    let space = Space::euclidean(2);
    let wp = WeightParams::new(2, 0.5);
    let eps_s = 0.5;
    let lambda_s = 0.1;
    let mut failures = 0usize;
    let mut sampled = 0usize;
    let seeds = 200u64;
    for seed in 0..seeds {
        let input = two_cluster_unit_points(200, 7_000 + seed);
        let mut ctor = Constructor::new(ConstructorKind::Rings, 0.5);
        ctor.size_const = 6e-3;
        let params = CallParams {
            k: 2,
            z: Objective::Median,
            eps_s,
            lambda_s,
            s_scale: 128,
            n_cap: 1024,
            seed,
            space: &space,
            weight_params: &wp,
        };
        let out = ctor.run(&input, &params).unwrap();
        if out.sampled {
            sampled += 1;
        }
        let report = oracle::certify_coreset(
            &space,
            &output_weighted(&out),
            &as_weighted(&input, &DenomTag::one()),
            eps_s,
            2,
            Objective::Median,
            CertMode::Exhaustive,
        )
        .unwrap();
        if !report.passed {
            failures += 1;
        }
    }
    assert_eq!(sampled, seeds as usize, "sampling never skipped here");
    // failure rate <= lambda_s with binomial slack
    assert!(failures <= 13, "{failures}/{seeds} failures at lambda_s=0.1");
}

/// 500 unit points, k=2: sensitivity sampling certifies at its declared
/// quality over 200 seeds (sampled-mode oracle keeps this fast).
#[test]
fn sensitivity_certifies_two_cluster_instances() {
    let space = Space::euclidean(2);
    let wp = WeightParams::new(2, 0.3);
    let eps_s = 0.3;
    let lambda_s = 0.1;
    let n_cap = 2048u64;
    // quality target: eps_s plus the declared grid-rounding slack
    // 2 * eps / log2(n_cap)
    let eps_total = eps_s + 2.0 * 0.3 / 11.0;
    let mut failures = 0usize;
    let seeds = 200u64;
    for seed in 0..seeds {
        let input = two_cluster_unit_points(500, 9_000 + seed);
        let mut ctor = Constructor::new(ConstructorKind::Sensitivity, 0.3);
        ctor.size_const = 2e-2;
        let params = CallParams {
            k: 2,
            z: Objective::Median,
            eps_s,
            lambda_s,
            s_scale: 256,
            n_cap,
            seed,
            space: &space,
            weight_params: &wp,
        };
        let out = ctor.run(&input, &params).unwrap();
        assert!(out.sampled);
        let report = oracle::certify_coreset(
            &space,
            &output_weighted(&out),
            &as_weighted(&input, &DenomTag::one()),
            eps_total,
            2,
            Objective::Median,
            CertMode::Sampled { count: 120, seed },
        )
        .unwrap();
        if !report.passed {
            failures += 1;
        }
    }
    assert!(failures <= 13, "{failures}/{seeds} failures at lambda_s=0.1");
}

/// Certified coresets of disjoint parts certify the union at the same
/// quality: built directly on small instances where the oracle can
/// enumerate everything.
#[test]
fn union_of_coresets_certifies_union() {
    let space = Space::euclidean(1);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let xs: Vec<(Point, BigRational)> = (0..12)
            .map(|i| {
                (
                    Point::new(i + trial * 100, vec![rng.gen_range(-10.0..10.0)]),
                    BigRational::from_integer(rng.gen_range(1..4i64).into()),
                )
            })
            .collect();
        let (x1, x2) = xs.split_at(6);
        // coresets via the weight-scaling trick: each part scaled by
        // (1 + eps) has worst deviation exactly eps
        let eps = BigRational::new(1.into(), 8.into());
        let scale = BigRational::from_integer(1.into()) + &eps;
        let c1: Vec<(Point, BigRational)> = x1
            .iter()
            .map(|(p, w)| (p.clone(), w * &scale))
            .collect();
        let c2: Vec<(Point, BigRational)> = x2
            .iter()
            .map(|(p, w)| (p.clone(), w * &scale))
            .collect();
        let union_c: Vec<(Point, BigRational)> =
            c1.iter().chain(&c2).cloned().collect();
        let union_x: Vec<(Point, BigRational)> =
            x1.iter().chain(x2).cloned().collect();
        let worst =
            oracle::exact_worst_deviation(&space, &union_c, &union_x, 2, Objective::Median)
                .unwrap();
        assert_eq!(worst, eps, "trial {trial}");
    }
}

/// The composed coreset-of-a-coreset bound, end to end through the
/// oracle on exact rationals.
#[test]
fn composition_certifies_at_composed_quality() {
    let space = Space::euclidean(1);
    let input: Vec<(Point, BigRational)> = (0..8)
        .map(|i| {
            (
                Point::new(i, vec![(i * i) as f64 * 0.5]),
                BigRational::from_integer(((i % 3) + 1).into()),
            )
        })
        .collect();
    let eps = BigRational::new(1.into(), 10.into());
    let delta = BigRational::new(1.into(), 5.into());
    assert!(
        oracle::certify_composition(&space, &input, &eps, &delta, 2, Objective::Means).unwrap()
    );
}
