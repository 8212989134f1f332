//! Synthetic data with known answers: planted regions, planted concepts,
//! constructed transformer weights and a moving blob. Used by the examples,
//! the tests and `vtcd` when a backend spec names a fixture.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::{PlantedOracle, TaskTarget, ToyConfig, ToyTransformer};
use crate::concepts::{Concept, ConceptId};
use crate::error::Result;
use crate::importance::{MaskUnit, VideoTarget};
use crate::store::{BinaryMask, DenseMask, Dims, FeatureVolume, SiteId};

/// A volume split into two regions with different mean features.
/// Region A is the set of cells left of a per-frame boundary column that
/// drifts by at most one cell per frame.
pub fn two_region_volume(
    video_id: &str,
    site: &SiteId,
    dims: Dims,
    channels: usize,
    noise: f64,
    seed: u64,
) -> Result<(FeatureVolume, DenseMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (dims.w / 3).max(1);
    let hi = (2 * dims.w / 3).max(lo);
    let mut boundary = Vec::with_capacity(dims.t);
    let mut b = rng.random_range(lo..=hi);
    for _ in 0..dims.t {
        boundary.push(b);
        b = (b as i64 + rng.random_range(-1i64..=1)).clamp(lo as i64, hi as i64) as usize;
    }
    let region = DenseMask::from_fn(dims, |t, _, w| w < boundary[t]);
    let means: Vec<[f64; 2]> = (0..channels)
        .map(|c| if c % 2 == 0 { [1.0, -1.0] } else { [-0.5, 0.5] })
        .collect();
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut data = vec![0f32; channels * dims.cells()];
    for (c, mean) in means.iter().enumerate() {
        for cell in 0..dims.cells() {
            let m = if region.get(cell) { mean[0] } else { mean[1] };
            data[c * dims.cells() + cell] = (m + normal.sample(&mut rng)) as f32;
        }
    }
    Ok((FeatureVolume::new(video_id, site.clone(), channels, dims, data)?, region))
}

/// Everything needed to rank planted concepts against an oracle.
pub struct PlantedFixture {
    pub oracle: PlantedOracle,
    pub concepts: Vec<Concept>,
    pub units: Vec<MaskUnit>,
    pub videos: Vec<VideoTarget>,
    /// Share of the region each concept covers (0 for null concepts).
    pub coverage: Vec<f64>,
}

pub const PLANTED_MODEL: &str = "planted";
pub const PLANTED_LAYERS: u32 = 3;
pub const PLANTED_DEPTH: u32 = 2;

/// Planted oracle on a `1 x 4 x 10` grid whose region is the first 20 cells
/// (channel 0 = 1 there). Concept `i < proportions.len()` covers a
/// contiguous `proportions[i]` share of the region at the oracle's site;
/// the remaining concepts are nulls that split the non-region cells and sit
/// at the residual layers listed in `null_layers`.
pub fn planted_concepts(proportions: &[f64], null_layers: &[u32], n_videos: usize) -> Result<PlantedFixture> {
    let dims = Dims::new(1, 4, 10);
    let region_cells = 20usize;
    let site_at = |layer: u32| SiteId::residual(PLANTED_MODEL, layer);
    let oracle_site = site_at(PLANTED_DEPTH)?;
    let video_ids: Vec<String> = (0..n_videos.max(1)).map(|v| format!("planted{v:02}")).collect();

    let volumes = video_ids
        .iter()
        .map(|v| FeatureVolume::from_fn(v.clone(), oracle_site.clone(), 1, dims, |_, _, h, w| if h * 10 + w < 20 { 1.0 } else { 0.0 }))
        .collect::<Result<Vec<_>>>()?;
    let region = DenseMask::from_cells(dims, 0..region_cells);
    let regions: Vec<BinaryMask> = video_ids.iter().map(|v| BinaryMask::encode(v.clone(), &region)).collect();
    let oracle = PlantedOracle::new(PLANTED_MODEL, PLANTED_LAYERS, PLANTED_DEPTH, &volumes, &regions)?;

    let mut cell_sets: Vec<(u32, Vec<usize>)> = Vec::new();
    let mut coverage = Vec::new();
    let mut start = 0usize;
    for &p in proportions {
        let n = (p * region_cells as f64).round() as usize;
        let end = (start + n).min(region_cells);
        cell_sets.push((PLANTED_DEPTH, (start..end).collect()));
        coverage.push((end - start) as f64 / region_cells as f64);
        start = end;
    }
    let outside = dims.cells() - region_cells;
    let n_null = null_layers.len();
    for (k, &layer) in null_layers.iter().enumerate() {
        let a = region_cells + k * outside / n_null;
        let b = region_cells + (k + 1) * outside / n_null;
        cell_sets.push((layer, (a..b).collect()));
        coverage.push(0.0);
    }

    let mut per_site_index: BTreeMap<u32, usize> = BTreeMap::new();
    let mut concepts = Vec::new();
    for (layer, cells) in cell_sets {
        let index = per_site_index.entry(layer).or_insert(0);
        let mask = DenseMask::from_cells(dims, cells);
        concepts.push(Concept {
            id: ConceptId {
                site: site_at(layer)?,
                index: *index,
            },
            centroid: Vec::new(),
            members: Vec::new(),
            support: video_ids.iter().map(|v| (v.clone(), BinaryMask::encode(v.clone(), &mask))).collect(),
            dims,
        });
        *index += 1;
    }
    let units = concepts.iter().map(MaskUnit::concept).collect::<Result<Vec<_>>>()?;
    let videos = video_ids
        .into_iter()
        .map(|video_id| VideoTarget {
            video_id,
            target: TaskTarget::ScalarRegression { value: 1.0 },
        })
        .collect();
    Ok(PlantedFixture {
        oracle,
        concepts,
        units,
        videos,
        coverage,
    })
}

/// The standard fixture: the region split 0.5 / 0.3 / 0.2 across three
/// concepts, plus five null concepts at the oracle's site.
pub fn standard_planted() -> Result<PlantedFixture> {
    planted_concepts(&[0.5, 0.3, 0.2], &[PLANTED_DEPTH; 5], 2)
}

/// Random input patches for a toy model.
pub fn toy_inputs(config: &ToyConfig, n_videos: usize, seed: u64) -> Result<Vec<FeatureVolume>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let site = SiteId::residual("input", 1)?;
    (0..n_videos)
        .map(|v| {
            let data = (0..config.in_channels * config.grid.cells())
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            FeatureVolume::new(format!("clip{v:02}"), site.clone(), config.in_channels, config.grid, data)
        })
        .collect()
}

/// A toy model and its evaluation videos. Targets are the unmasked
/// regression outputs, so any change to the prediction is a drop.
pub struct ToyFixture {
    pub model: ToyTransformer,
    pub videos: Vec<VideoTarget>,
    /// Heads `(layer, head)` the construction singles out.
    pub planted_heads: Vec<(u32, u32)>,
}

/// Targets equal to the unmasked predictions: the argmax class when
/// `classes`, otherwise the regression output.
pub fn fidelity_targets(model: &ToyTransformer, classes: bool) -> Result<Vec<VideoTarget>> {
    use crate::backend::{MaskRequest, ModelBackend, Prediction};
    model
        .video_ids()
        .into_iter()
        .map(|video_id| {
            let probe = MaskRequest::unmasked(video_id.clone(), TaskTarget::ClassScore { class: 0 });
            let Prediction::Heads { class_logits, scalar, .. } = model.forward(&probe)? else {
                unreachable!("toy models emit heads");
            };
            let target = if classes {
                let best = (0..class_logits.len())
                    .max_by(|&a, &b| class_logits[a].total_cmp(&class_logits[b]))
                    .unwrap_or(0);
                TaskTarget::ClassScore { class: best }
            } else {
                TaskTarget::ScalarRegression { value: scalar }
            };
            Ok(VideoTarget { video_id, target })
        })
        .collect()
}

fn small_toy(seed: u64) -> ToyConfig {
    ToyConfig {
        model_id: "toy".into(),
        layers: 3,
        heads: 4,
        dim: 16,
        in_channels: 4,
        classes: 2,
        grid: Dims::new(2, 3, 3),
        seed,
    }
}

/// Zeroes the output-projection rows of a head: it still computes
/// attention, but nothing downstream reads it.
pub fn silence_head(model: &mut ToyTransformer, layer: u32, head: u32) {
    let dh = model.config().head_dim();
    let rows = head as usize * dh..(head as usize + 1) * dh;
    model.weights.layers[layer as usize - 1]
        .wo
        .slice_mut(ndarray::s![rows, ..])
        .fill(0.0);
}

/// Twelve heads (3 layers x 4). Every head emits a constant value vector
/// that its output projection writes onto its own residual coordinate; the
/// regression head sums those coordinates, and a large fixed offset keeps
/// the final LayerNorm close to linear. Heads in `decorative` have their
/// output projection zeroed, so nothing reads them.
pub fn decorative_heads_toy(decorative: &[(u32, u32)], seed: u64) -> Result<ToyFixture> {
    let config = small_toy(seed);
    let mut model = ToyTransformer::new(config.clone())?;
    let dh = config.head_dim();
    let d = config.dim;
    for l in 1..=config.layers {
        let layer = &mut model.weights.layers[l as usize - 1];
        layer.w2.fill(0.0);
        layer.b2.fill(0.0);
        layer.wv.fill(0.0);
        layer.bv.fill(1.0);
        layer.wo.fill(0.0);
        layer.bo.fill(0.0);
        for h in 0..config.heads {
            let coord = ((l - 1) * config.heads + h) as usize;
            layer.wo[[h as usize * dh, coord]] = 2.0;
        }
    }
    for j in 0..d {
        model.weights.layers[0].bo[j] = if j % 2 == 0 { 10.0 } else { -10.0 };
    }
    let n_heads = (config.layers * config.heads) as usize;
    model.weights.reg_w.fill(0.0);
    model.weights.reg_w.slice_mut(ndarray::s![0..n_heads]).fill(1.0);
    for &(l, h) in decorative {
        silence_head(&mut model, l, h);
    }
    for v in toy_inputs(&config, 3, seed ^ 0x5eed)? {
        model.add_video(v)?;
    }
    let videos = fidelity_targets(&model, false)?;
    Ok(ToyFixture {
        model,
        videos,
        planted_heads: decorative.to_vec(),
    })
}

/// A model whose prediction depends on exactly one head, (layer 1, head 0),
/// through its value path: every other head is silenced, the MLPs write
/// nothing, and the head's value bias carries a direction the class head
/// reads strongly. Targets are the unmasked predicted classes.
pub fn planted_dependency_toy(seed: u64) -> Result<ToyFixture> {
    let config = small_toy(seed);
    let mut model = ToyTransformer::new(config.clone())?;
    let dh = config.head_dim();
    for l in 1..=config.layers {
        for h in 0..config.heads {
            if (l, h) != (1, 0) {
                silence_head(&mut model, l, h);
            }
        }
        let layer = &mut model.weights.layers[l as usize - 1];
        layer.w2.fill(0.0);
        layer.b2.fill(0.0);
        layer.bo.fill(0.0);
    }
    let d = config.dim;
    // Head (1,0) emits a constant value vector; Wo maps it onto the first
    // half of the residual with positive sign and the second half negative.
    let layer = &mut model.weights.layers[0];
    layer.wv.slice_mut(ndarray::s![.., 0..dh]).fill(0.0);
    layer.bv.slice_mut(ndarray::s![0..dh]).fill(1.0);
    let mut block = layer.wo.slice_mut(ndarray::s![0..dh, ..]);
    block.fill(0.0);
    for j in 0..d {
        block[[0, j]] = if j < d / 2 { 3.0 } else { -3.0 };
    }
    model.weights.class_w.fill(0.0);
    for j in 0..d {
        let sign = if j < d / 2 { 1.0 } else { -1.0 };
        model.weights.class_w[[j, 0]] = sign;
        model.weights.class_w[[j, 1]] = -sign;
    }
    model.weights.class_b.fill(0.0);
    for v in toy_inputs(&config, 3, seed ^ 0x5eed)? {
        model.add_video(v)?;
    }
    let videos = fidelity_targets(&model, true)?;
    Ok(ToyFixture {
        model,
        videos,
        planted_heads: vec![(1, 0)],
    })
}

/// A `size`-cell square blob moving diagonally (one cell per frame, bouncing
/// off the borders) over a noisy background. Returns the volume and the track.
pub fn moving_blob(video_id: &str, site: &SiteId, dims: Dims, size: usize, seed: u64) -> Result<(FeatureVolume, DenseMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_h = dims.h.saturating_sub(size);
    let max_w = dims.w.saturating_sub(size);
    let (mut y, mut x) = (rng.random_range(0..=max_h), rng.random_range(0..=max_w));
    let (mut dy, mut dx) = (1i64, 1i64);
    let mut corners = Vec::with_capacity(dims.t);
    for _ in 0..dims.t {
        corners.push((y, x));
        if y as i64 + dy < 0 || y as i64 + dy > max_h as i64 {
            dy = -dy;
        }
        if x as i64 + dx < 0 || x as i64 + dx > max_w as i64 {
            dx = -dx;
        }
        y = (y as i64 + dy).clamp(0, max_h as i64) as usize;
        x = (x as i64 + dx).clamp(0, max_w as i64) as usize;
    }
    let track = DenseMask::from_fn(dims, |t, h, w| {
        let (cy, cx) = corners[t];
        (cy..cy + size).contains(&h) && (cx..cx + size).contains(&w)
    });
    let normal = Normal::new(0.0, 0.05).expect("valid noise");
    let channels = 3;
    let mut data = vec![0f32; channels * dims.cells()];
    for c in 0..channels {
        for cell in 0..dims.cells() {
            let base = match (track.get(cell), c) {
                (true, 0) => 1.0,
                (true, _) => 0.2,
                (false, 0) => 0.0,
                (false, _) => 0.6,
            };
            data[c * dims.cells() + cell] = (base + normal.sample(&mut rng)) as f32;
        }
    }
    Ok((FeatureVolume::new(video_id, site.clone(), channels, dims, data)?, track))
}

/// Random concept supports for Rosetta experiments: `n_models` models with
/// `per_model` concepts on `dims`, each support a random box in each video,
/// importance scores uniform in [0, 1).
pub fn random_model_concepts(
    n_models: usize,
    per_model: usize,
    dims: Dims,
    videos: &[String],
    seed: u64,
) -> Result<Vec<crate::rosetta::ModelConcepts>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_models);
    for m in 0..n_models {
        let model_id = format!("model{m}");
        let site = SiteId::residual(model_id.clone(), 1)?;
        let mut concepts = Vec::with_capacity(per_model);
        let mut importance = Vec::with_capacity(per_model);
        for index in 0..per_model {
            let mut support = BTreeMap::new();
            for v in videos {
                let [t, h, w] = dims.as_array().map(|e| {
                    let size = rng.random_range(1..=e.div_ceil(2));
                    let start = rng.random_range(0..=e - size);
                    start..start + size
                });
                let mask = DenseMask::from_fn(dims, |a, b, c| t.contains(&a) && h.contains(&b) && w.contains(&c));
                support.insert(v.clone(), BinaryMask::encode(v.clone(), &mask));
            }
            concepts.push(Concept {
                id: ConceptId {
                    site: site.clone(),
                    index,
                },
                centroid: Vec::new(),
                members: Vec::new(),
                support,
                dims,
            });
            importance.push(rng.random::<f64>());
        }
        out.push(crate::rosetta::ModelConcepts {
            model_id,
            videos: videos.to_vec(),
            concepts,
            importance,
        });
    }
    Ok(out)
}
