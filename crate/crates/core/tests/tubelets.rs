mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtcd::tubelets::{extract_tubelets, slic_segment};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn segments_partition_into_connected_pieces(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = common::random_volume(&mut rng, 0);
        let params = common::random_slic(&mut rng, vol.dims.cells());
        let masks = slic_segment(&vol, &params).unwrap();
        if let Err(e) = common::check_partition(&masks, vol.dims) {
            return Err(TestCaseError::fail(format!("{e} for {} with {params:?}", vol.dims)));
        }
    }
}

#[test]
fn two_region_fixture_is_recovered() {
    for seed in 0..20 {
        let iou = common::two_region_recovery(seed);
        assert!(iou >= 0.9, "seed {seed}: IoU {iou}");
    }
}

#[test]
fn tubelet_features_are_member_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vol = common::random_volume(&mut rng, 1);
    let params = common::random_slic(&mut rng, vol.dims.cells());
    for t in extract_tubelets(&vol, &params).unwrap() {
        let mask = t.mask.decode().unwrap();
        let cells: Vec<usize> = mask.cells().collect();
        assert_eq!(t.size, cells.len());
        for c in 0..vol.channels {
            let mean = cells.iter().map(|&i| vol.get(c, i) as f64).sum::<f64>() / cells.len() as f64;
            assert!((t.feature[c] - mean).abs() < 1e-9);
        }
    }
}

#[test]
fn segmentation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vol = common::random_volume(&mut rng, 2);
    let params = common::random_slic(&mut rng, vol.dims.cells());
    let a = slic_segment(&vol, &params).unwrap();
    let b = slic_segment(&vol, &params).unwrap();
    assert_eq!(a, b);
}
