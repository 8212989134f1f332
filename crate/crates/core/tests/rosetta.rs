mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtcd::fixtures::random_model_concepts;
use vtcd::concepts::{Concept, ConceptId};
use vtcd::rosetta::{mine, r_score, MiningParams, ModelConcepts, SupportBits};
use vtcd::store::{BinaryMask, DenseMask, Dims, SiteId};

fn videos(n: usize) -> Vec<String> {
    (0..n).map(|v| format!("clip{v}")).collect()
}

#[test]
fn extending_a_tuple_never_raises_its_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = Dims::new(2, 6, 6);
    let vids = videos(2);
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let masks: Vec<Vec<DenseMask>> = (0..n)
            .map(|_| {
                vids.iter()
                    .map(|_| DenseMask::from_bits(dims, (0..dims.cells()).map(|_| rng.random_bool(0.6)).collect()).unwrap())
                    .collect()
            })
            .collect();
        let bits: Vec<SupportBits> = masks.iter().map(|m| SupportBits::from_masks(&vids, m)).collect();
        let refs: Vec<&SupportBits> = bits.iter().collect();
        let full = r_score(&refs).unwrap();
        let prefix = r_score(&refs[..n - 1]).unwrap();
        assert!(full <= prefix, "{full} > {prefix}");
    }
}

#[test]
fn mining_equals_brute_force() {
    let dims = Dims::new(4, 8, 8);
    for (seed, epsilon, delta) in [(0, 0.15, 0.15), (1, 0.5, 0.1), (2, 0.3, 0.05), (3, 1.0, 0.2)] {
        let models = random_model_concepts(4, 20, dims, &videos(3), seed).unwrap();
        let got = mine(&models, &MiningParams { epsilon, delta }).unwrap();
        let want = common::brute_force_tuples(&models, epsilon, delta);
        assert_eq!(common::tuple_set(&got), want, "seed {seed}");
        assert_eq!(got.len(), want.len(), "duplicates in mined output");
        if seed > 0 {
            assert!(!want.is_empty(), "seed {seed} produced no tuples to compare");
        }
    }
}

fn one_concept_model(name: &str, cells: &[usize]) -> ModelConcepts {
    let dims = Dims::new(1, 1, 16);
    let mask = DenseMask::from_cells(dims, cells.iter().copied());
    ModelConcepts {
        model_id: name.into(),
        videos: videos(1),
        concepts: vec![Concept {
            id: ConceptId {
                site: SiteId::residual(name, 1).unwrap(),
                index: 0,
            },
            centroid: Vec::new(),
            members: Vec::new(),
            support: [("clip0".to_string(), BinaryMask::encode("clip0", &mask))].into(),
            dims,
        }],
        importance: vec![1.0],
    }
}

#[test]
fn pairwise_overlaps_without_a_common_cell() {
    // Cells 0..6 are shared by A and B, 6..9 by A and C, 9..11 by B and C,
    // cell 11 is A's alone. No cell lies in all three supports.
    let a: Vec<usize> = (0..9).chain([11]).collect();
    let b: Vec<usize> = (0..6).chain(9..11).collect();
    let c: Vec<usize> = (6..11).collect();
    let models = vec![one_concept_model("a", &a), one_concept_model("b", &b), one_concept_model("c", &c)];
    let tuples = mine(&models, &MiningParams { epsilon: 1.0, delta: 0.15 }).unwrap();
    let scores: Vec<(Vec<String>, f64)> = tuples.iter().map(|t| (t.models.clone(), t.r_score)).collect();
    let pair = |x: &str, y: &str| vec![x.to_string(), y.to_string()];
    assert_eq!(
        scores,
        vec![(pair("a", "b"), 6.0 / 12.0), (pair("a", "c"), 3.0 / 12.0), (pair("b", "c"), 2.0 / 11.0)]
    );
}

#[test]
fn mined_tuples_are_sorted_and_scored() {
    let mut models = random_model_concepts(3, 20, Dims::new(4, 8, 8), &videos(2), 5).unwrap();
    models.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    let got = mine(&models, &MiningParams { epsilon: 0.5, delta: 0.05 }).unwrap();
    for w in got.windows(2) {
        assert!(w[0].d > w[1].d || (w[0].d == w[1].d && w[0].r_score >= w[1].r_score));
    }
    assert!(got.iter().all(|t| t.r_score > 0.05 && t.d == t.concept_ids.len()));
}
