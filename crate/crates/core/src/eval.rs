//! Evaluation protocols: attribution curves, groundtruth agreement, concept
//! selection for tracking, head pruning and the random-crop baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{MaskRequest, ModelBackend, WithPermanentMasks};
use crate::concepts::{Concept, ConceptId};
use crate::error::{Error, Result};
use crate::importance::{ImportanceReport, MaskUnit, UnitKind, VideoTarget};
use crate::store::{DenseMask, Dims, FeatureVolume, SiteId};
use crate::tubelets::{pool_tubelet, Tubelet};

/// Removal fractions evaluated per curve.
pub const CURVE_STEPS: usize = 12;
/// Shuffles averaged for the random curve.
pub const RANDOM_SEEDS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Most important first.
    Positive,
    /// Least important first.
    Negative,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionCurve {
    pub direction: Direction,
    /// `(fraction removed, metric)`, fraction ascending from 0 to 1.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl AttributionCurve {
    fn new(direction: Direction, points: Vec<(f64, f64)>) -> Self {
        let auc = trapezoid(&points);
        AttributionCurve { direction, points, auc }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,metric\n");
        for (f, m) in &self.points {
            let _ = writeln!(out, "{f},{m}");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub positive: AttributionCurve,
    pub negative: AttributionCurve,
    pub random: AttributionCurve,
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Mean metric over videos with the given units masked together.
pub fn masked_metric(
    units: &[MaskUnit],
    members: &[usize],
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::InvalidParam("no videos to evaluate".into()));
    }
    let grid = backend.grid();
    let mut total = 0.0;
    for v in videos {
        let mut request = MaskRequest::unmasked(v.video_id.clone(), v.target.clone());
        for &i in members {
            units[i].apply_to(&mut request, grid)?;
        }
        total += backend.evaluate(&request)?;
    }
    Ok(total / videos.len() as f64)
}

/// Evenly spaced removal fractions `0, 1/(steps-1), .., 1` and the unit
/// count removed at each, `round(fraction * Q)`.
pub fn removal_schedule(steps: usize, q: usize) -> Vec<(f64, usize)> {
    let steps = steps.max(2);
    (0..steps)
        .map(|j| {
            let f = j as f64 / (steps - 1) as f64;
            (f, (f * q as f64).round() as usize)
        })
        .collect()
}

fn curve_for_order(
    order: &[usize],
    units: &[MaskUnit],
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    removal_schedule(steps, order.len())
        .into_iter()
        .map(|(f, n)| masked_metric(units, &order[..n], backend, videos).map(|m| (f, m)))
        .collect()
}

/// Cumulative removal curves in score order, reverse order and five seeded
/// shuffles (averaged pointwise).
pub fn attribution_curves(
    units: &[MaskUnit],
    report: &ImportanceReport,
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
    steps: usize,
    seed: u64,
) -> Result<Curves> {
    if report.scores.len() != units.len() {
        return Err(Error::InvalidParam(format!(
            "report ranks {} units, {} given",
            report.scores.len(),
            units.len()
        )));
    }
    let positive = report.ranking();
    let negative: Vec<usize> = positive.iter().rev().copied().collect();
    let (pos, (neg, rand_runs)) = rayon::join(
        || curve_for_order(&positive, units, backend, videos, steps),
        || {
            rayon::join(
                || curve_for_order(&negative, units, backend, videos, steps),
                || {
                    (0..RANDOM_SEEDS)
                        .map(|s| {
                            let mut order: Vec<usize> = (0..units.len()).collect();
                            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(s)));
                            curve_for_order(&order, units, backend, videos, steps)
                        })
                        .collect::<Result<Vec<_>>>()
                },
            )
        },
    );
    let rand_runs = rand_runs?;
    let random: Vec<(f64, f64)> = (0..rand_runs[0].len())
        .map(|j| {
            let m = rand_runs.iter().map(|r| r[j].1).sum::<f64>() / rand_runs.len() as f64;
            (rand_runs[0][j].0, m)
        })
        .collect();
    Ok(Curves {
        positive: AttributionCurve::new(Direction::Positive, pos?),
        negative: AttributionCurve::new(Direction::Negative, neg?),
        random: AttributionCurve::new(Direction::Random, random),
    })
}

/// Groundtruth masks of one category, keyed by video.
pub type Groundtruth = BTreeMap<String, DenseMask>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub category: String,
    pub concept: ConceptId,
    pub miou: f64,
}

/// For each category, the concept with the highest mean IoU over that
/// category's videos. Ties go to the lower concept id.
pub fn concept_gt_miou(concepts: &[Concept], groundtruth: &BTreeMap<String, Groundtruth>) -> Result<Vec<CategoryMatch>> {
    let mut out = Vec::new();
    for (category, per_video) in groundtruth {
        if per_video.is_empty() {
            return Err(Error::InvalidParam(format!("category {category} has no groundtruth videos")));
        }
        let mut best: Option<CategoryMatch> = None;
        for c in concepts {
            let mut sum = 0.0;
            for (video, gt) in per_video {
                if gt.dims != c.dims {
                    return Err(Error::Shape(format!(
                        "groundtruth {category}/{video} is {}, concept {} is {}",
                        gt.dims, c.id, c.dims
                    )));
                }
                sum += c.support_for(video)?.iou(gt)?;
            }
            let miou = sum / per_video.len() as f64;
            let better = match &best {
                None => true,
                Some(b) => miou > b.miou || (miou == b.miou && c.id < b.concept),
            };
            if better {
                best = Some(CategoryMatch {
                    category: category.clone(),
                    concept: c.id.clone(),
                    miou,
                });
            }
        }
        out.extend(best);
    }
    Ok(out)
}

/// The concept whose first-frame support best overlaps a first-frame query
/// mask. Ties go to the larger total support, then the lower id. `None` when
/// no concept touches the query.
pub fn select_best_concept(concepts: &[Concept], video_id: &str, query: &DenseMask) -> Result<Option<ConceptId>> {
    let mut best: Option<(f64, usize, &ConceptId)> = None;
    for c in concepts {
        let frame = c.support_for(video_id)?.frame(0);
        if frame.dims != query.dims {
            return Err(Error::Shape(format!("query is {}, first frame is {}", query.dims, frame.dims)));
        }
        if frame.intersection_count(query)? == 0 {
            continue;
        }
        let iou = frame.iou(query)?;
        let size = c.support_size();
        let better = match best {
            None => true,
            Some((bi, bs, bid)) => iou > bi || (iou == bi && (size > bs || (size == bs && &c.id < bid))),
        };
        if better {
            best = Some((iou, size, &c.id));
        }
    }
    Ok(best.map(|(_, _, id)| id.clone()))
}

/// IoU of a concept's support with a track over all frames of a video.
pub fn track_iou(concept: &Concept, video_id: &str, track: &DenseMask) -> Result<f64> {
    concept.support_for(video_id)?.iou(track)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Head ids, most important first.
    pub ranking: Vec<String>,
    pub keep_fraction: f64,
    pub keep: Vec<String>,
    pub drop: Vec<String>,
}

/// Keeps the top `round(keep_fraction * H)` heads by score.
pub fn prune_plan(report: &ImportanceReport, keep_fraction: f64) -> Result<PrunePlan> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParam(format!("keep fraction {keep_fraction} must lie in (0, 1]")));
    }
    if report.unit != UnitKind::Head {
        return Err(Error::InvalidParam("pruning needs a head report".into()));
    }
    let ranking: Vec<String> = report.ranking().into_iter().map(|i| report.units[i].clone()).collect();
    let n_keep = (keep_fraction * ranking.len() as f64).round() as usize;
    Ok(PrunePlan {
        keep: ranking[..n_keep].to_vec(),
        drop: ranking[n_keep..].to_vec(),
        ranking,
        keep_fraction,
    })
}

impl PrunePlan {
    /// Wraps a backend so every forward has the dropped heads masked.
    pub fn apply<B: ModelBackend>(&self, backend: B) -> Result<WithPermanentMasks<B>> {
        let grid = backend.grid();
        let known = backend.sites();
        let mut masks = BTreeMap::new();
        for id in &self.drop {
            let unit = head_unit_from_id(id)?;
            for (site, _) in unit.sites {
                if !known.contains(&site) {
                    return Err(Error::UnknownSite(site.to_string()));
                }
                masks.insert(site, DenseMask::full(grid));
            }
        }
        Ok(WithPermanentMasks { inner: backend, masks })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parses a head unit id of the form `model/L<layer>/H<head>`.
pub fn head_unit_from_id(id: &str) -> Result<MaskUnit> {
    let site: SiteId = format!("{id}/key").parse()?;
    let head = site.head.ok_or_else(|| Error::Site(format!("{id} names no head")))?;
    MaskUnit::head(&site.model_id, site.layer, head)
}

/// Mean unmasked metric over videos.
pub fn mean_metric(backend: &dyn ModelBackend, videos: &[VideoTarget]) -> Result<f64> {
    masked_metric(&[], &[], backend, videos)
}

/// Axis-aligned random boxes pooled like tubelets. Each box side is drawn
/// uniformly from `[ceil(e/8), max(1, floor(e/2))]` cells of the axis extent `e`,
/// its corner uniformly among positions that keep it inside the grid.
pub fn random_crop_baseline(volume: &FeatureVolume, n_crops: usize, seed: u64) -> Result<Vec<Tubelet>> {
    if n_crops == 0 {
        return Err(Error::InvalidParam("n_crops must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = volume.dims;
    (0..n_crops)
        .map(|_| {
            let [t, h, w] = dims.as_array().map(|e| {
                let lo = e.div_ceil(8).max(1);
                let hi = (e / 2).max(lo);
                let size = rng.random_range(lo..=hi);
                let start = rng.random_range(0..=e - size);
                start..start + size
            });
            let mask = DenseMask::from_fn(dims, |tt, hh, ww| t.contains(&tt) && h.contains(&hh) && w.contains(&ww));
            pool_tubelet(volume, &mask)
        })
        .collect()
}

/// Writes frame `t` as a binary PPM: channel 0 as a grey heatmap, support
/// cells tinted red at 50% opacity, each cell drawn as `scale x scale` pixels.
pub fn write_overlay_ppm(
    volume: &FeatureVolume,
    support: &DenseMask,
    t: usize,
    scale: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let dims = volume.dims;
    if support.dims != dims {
        return Err(Error::Shape(format!("support {} vs volume {}", support.dims, dims)));
    }
    if t >= dims.t || scale == 0 {
        return Err(Error::InvalidParam(format!("frame {t} at scale {scale} is not drawable")));
    }
    let frame: Vec<f32> = (0..dims.h * dims.w).map(|i| volume.get(0, t * dims.h * dims.w + i)).collect();
    let (lo, hi) = frame
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (width, height) = (dims.w * scale, dims.h * scale);
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            let (hh, ww) = (y / scale, x / scale);
            let grey = (frame[hh * dims.w + ww] - lo) / span * 255.0;
            let mut rgb = [grey; 3];
            if support.get(dims.index(t, hh, ww)) {
                rgb = [0.5 * grey + 127.5, 0.5 * grey, 0.5 * grey];
            }
            bytes.extend(rgb.map(|c| c.round().clamp(0.0, 255.0) as u8));
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Grid helper for callers building first-frame queries.
pub fn first_frame(dims: Dims) -> Dims {
    Dims::new(1, dims.h, dims.w)
}
