//! Property tests for the structural invariants shared by every module.

use proptest::prelude::*;

use tensor_gp::bspline::build_basis;
use tensor_gp::metric::{build_metric, factorize, imed_distance, transform, MetricParams};
use tensor_gp::tensor::{canonical_index, voxel_coords, DesignTensor, GridShape};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_roundtrip_is_identity(
        v in 1usize..7, h in 1usize..7, w in 1usize..4, p in 1usize..3,
    ) {
        let shape = GridShape::new(v, h, w, p).unwrap();
        for alpha in 0..shape.voxel_count() {
            let (i, j, k) = voxel_coords(alpha, &shape).unwrap();
            prop_assert_eq!(canonical_index(i, j, k, &shape).unwrap(), alpha);
        }
    }

    #[test]
    fn basis_rows_sum_to_one(
        order in 1usize..6,
        extra in 0usize..18,
        hi in 10.0f64..200.0,
    ) {
        let num_basis = order + extra;
        let grid: Vec<f64> = (0..=40)
            .map(|i| if i == 40 { hi } else { hi * i as f64 / 40.0 })
            .collect();
        let basis = build_basis((0.0, hi), order, num_basis, &grid).unwrap();
        for i in 0..basis.matrix.nrows() {
            let s: f64 = basis.matrix.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10, "row {} sums to {}", i, s);
        }
    }

    #[test]
    fn transform_reproduces_quadratic_distance(
        seed in 0u64..1000,
        gamma in 0.2f64..3.0,
    ) {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let shape = GridShape::new(4, 3, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || DesignTensor::from_fn(shape, |_, _, _, _| rng.gen_range(1.1..2.3)).unwrap();
        let x = draw();
        let y = draw();
        let g = build_metric(&shape, &MetricParams::isotropic(gamma, 1)).unwrap();
        let t = factorize(&g).unwrap();
        let quad = imed_distance(&x, &y, &g).unwrap();
        let dz = transform(&x, &t).unwrap() - transform(&y, &t).unwrap();
        let trans = dz.norm_squared();
        prop_assert!((quad - trans).abs() <= 1e-8 * (1.0 + quad));
        prop_assert!(quad >= 0.0);
    }
}
