use approx::relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tnbm::cvbm::polar_retract;
use tnbm::data::{snake_order, Dataset};
use tnbm::env::{environment_from_scratch, EnvironmentCache};
use tnbm::loss::{project_tangent, LocalProblem, RegMode};
use tnbm::mps::{enumerate_strings, Direction};
use tnbm::newton::retract;
use tnbm::tensor::{dot, max_abs_diff, norm};
use tnbm::Mps;

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn modes() -> impl Strategy<Value = RegMode> {
    prop_oneof![
        Just(RegMode::NONE),
        (1e-4f64..0.05, any::<bool>()).prop_map(|(e, a)| RegMode::smooth(e, a).unwrap()),
        (1e-3f64..0.1).prop_map(|b| RegMode::bias(b).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn canonicalization_keeps_every_amplitude(n in 2usize..6, chi in 1usize..4, seed in any::<u64>(), center_frac in 0.0f64..1.0) {
        let mps = Mps::random(n, 2, chi, seed).unwrap();
        let center = ((n as f64 * center_frac) as usize).min(n - 1);
        let moved = mps.canonicalize(center).unwrap();
        prop_assert_eq!(moved.center(), Some(center));
        prop_assert!(moved.gauge_defect().unwrap() < 1e-10);
        for x in enumerate_strings(n, 2) {
            let (a, b) = (mps.amplitude(&x).unwrap(), moved.amplitude(&x).unwrap());
            prop_assert!((a - b).abs() < 1e-10, "{:?}: {} vs {}", x, a, b);
        }
    }

    #[test]
    fn hessian_vector_product_matches_the_dense_hessian(dim in 2usize..12, ns in 1usize..8, seed in any::<u64>(), mode in modes()) {
        let t = unit(gaussian(seed, dim));
        let envs = gaussian(seed ^ 1, dim * ns);
        let raw: Vec<f64> = gaussian(seed ^ 2, ns).iter().map(|g| g.abs() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let p = LocalProblem::new(t, envs, weights).unwrap();
        prop_assume!(p.singular_sample(mode).is_none());
        let dense = p.hess_dense(mode).unwrap();
        let v = gaussian(seed ^ 3, dim);
        let via_dense: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| dense[(i, j)] * v[j]).sum()).collect();
        let via_hvp = p.hvp(mode, &v).unwrap();
        let scale = via_dense.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!(max_abs_diff(&via_dense, &via_hvp) <= 1e-9 * scale);
    }

    #[test]
    fn projection_is_idempotent_and_retraction_lands_on_the_sphere(dim in 1usize..20, seed in any::<u64>(), size in 0.0f64..10.0) {
        let t = unit(gaussian(seed, dim));
        let v: Vec<f64> = gaussian(seed ^ 1, dim).iter().map(|x| x * size).collect();
        let once = project_tangent(&t, &v).unwrap();
        let twice = project_tangent(&t, &once.components).unwrap();
        prop_assert!(max_abs_diff(&once.components, &twice.components) < 1e-12 * (1.0 + size));
        prop_assert!(dot(&t, &once.components).abs() < 1e-12 * (1.0 + size));
        let next = retract(&t, &once).unwrap();
        prop_assert!(relative_eq!(norm(&next), 1.0, epsilon = 1e-12));
    }

    #[test]
    fn snake_order_visits_every_pixel_once(rows in 1usize..12, cols in 1usize..12) {
        let order = snake_order(rows, cols);
        prop_assert_eq!(order.len(), rows * cols);
        let mut seen = vec![false; rows * cols];
        for &(r, c) in &order {
            prop_assert!(!seen[r * cols + c]);
            seen[r * cols + c] = true;
        }
        for pair in order.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            prop_assert_eq!(a.0.abs_diff(b.0) + a.1.abs_diff(b.1), 1);
        }
    }

    #[test]
    fn dataset_text_round_trips(strings in prop::collection::vec(prop::collection::vec(0u8..3, 5), 1..10), counts in prop::collection::vec(1u32..20, 10)) {
        let records: Vec<(Vec<u8>, f64)> = strings.iter().cloned().zip(counts.iter().map(|&c| c as f64)).collect();
        let data = Dataset::from_weighted(3, records).unwrap();
        let mut buf = Vec::new();
        data.write_text(&mut buf).unwrap();
        let back = Dataset::read_text(3, buf.as_slice()).unwrap();
        prop_assert_eq!(back.samples(), data.samples());
        for (a, b) in back.weights().iter().zip(data.weights()) {
            prop_assert!(relative_eq!(*a, *b, max_relative = 1e-12));
        }
    }

    #[test]
    fn cached_environments_track_the_center(n in 2usize..7, chi in 1usize..4, seed in any::<u64>(), moves in prop::collection::vec(any::<bool>(), 1..12)) {
        let mut mps = Mps::random(n, 2, chi, seed).unwrap().canonicalize(0).unwrap();
        let strings: Vec<Vec<u8>> = enumerate_strings(n, 2).take(5).collect();
        let data = Dataset::uniform(2, strings).unwrap();
        let mut cache = EnvironmentCache::new(&mps, data.to_inputs()).unwrap();
        for right in moves {
            let c = cache.active_site();
            let direction = match (right, c) {
                (_, 0) => Direction::Right,
                (_, c) if c + 1 == n => Direction::Left,
                (true, _) => Direction::Right,
                (false, _) => Direction::Left,
            };
            cache.move_center(&mut mps, direction).unwrap();
            prop_assert_eq!(mps.center(), Some(cache.active_site()));
            for x in 0..data.len() {
                let cached = cache.reduced_environment(x).unwrap();
                let fresh = environment_from_scratch(&mps, cache.inputs(), x, cache.active_site());
                prop_assert!(max_abs_diff(&cached, &fresh) < 1e-10);
            }
        }
    }

    #[test]
    fn polar_retraction_gives_orthonormal_columns(rows in 3usize..10, extra in 0usize..3, seed in any::<u64>()) {
        let cols = (rows - extra).max(1);
        let m = DMatrix::from_vec(rows, cols, gaussian(seed, rows * cols));
        let q = polar_retract(&m).unwrap();
        let defect = (q.transpose() * &q - DMatrix::<f64>::identity(cols, cols)).abs().max();
        prop_assert!(defect < 1e-12);
        let again = polar_retract(&q).unwrap();
        prop_assert!((again - &q).abs().max() < 1e-12);
    }
}
