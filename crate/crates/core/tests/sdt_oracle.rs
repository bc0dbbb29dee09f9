#[path = "common/oracles.rs"]
mod oracles;

use mganet_core::{signed_distance, threshold_mask, BinaryMask, Geometry};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (2usize..7, 2usize..7, 2usize..7, prop::array::uniform3(0.5f64..2.5))
        .prop_flat_map(|(nx, ny, nz, sp)| {
            prop::collection::vec(0u8..2, nx * ny * nz).prop_map(move |d| {
                BinaryMask::new(Geometry::new([nx, ny, nz], sp).unwrap(), d).unwrap()
            })
        })
        .prop_filter("both classes present", |m| m.count() > 0 && m.count() < m.data().len())
}

proptest! {
    #[test]
    fn exact_transform_matches_exhaustive_search(m in mask_strategy()) {
        let sdt = signed_distance(&m, 1e6).unwrap();
        for (got, want) in sdt.data().iter().zip(oracles::brute_sdt(&m)) {
            prop_assert!((*got as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn zero_threshold_reproduces_the_mask(m in mask_strategy(), d_max in 0.1f64..6.0) {
        let back = threshold_mask(&signed_distance(&m, d_max).unwrap(), 0.0).unwrap();
        prop_assert_eq!(back.data(), m.data());
    }

    #[test]
    fn saturation_is_symmetric(m in mask_strategy(), d_max in 0.1f64..3.0) {
        let sdt = signed_distance(&m, d_max).unwrap();
        prop_assert!(sdt.data().iter().all(|v| v.abs() <= d_max as f32));
    }
}

#[test]
fn larger_thresholds_only_grow_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = oracles::random_mask(&mut rng, 10);
        let sdt = signed_distance(&m, 5.0).unwrap();
        let mut prev = threshold_mask(&sdt, 0.0).unwrap();
        for tau in [0.5, 1.0, 2.0, 3.0, 4.0] {
            let next = threshold_mask(&sdt, tau).unwrap();
            assert!(prev.is_subset_of(&next));
            prev = next;
        }
    }
}
