//! Causal importance of concepts and attention heads.
//!
//! Occlusion masks one unit at a time. CRIS (concept randomized importance
//! sampling) masks a random half of all units at once, `K` times, and credits
//! each unit with the metric drops of the samples it took part in:
//!
//! ```text
//! s_i = (1/K) * sum_k [D(y~, y) - D(y^_k, y)] * 1[i in C_k]
//! ```
//!
//! Units from different sites are masked together in one forward pass.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{MaskRequest, ModelBackend, TaskTarget};
use crate::concepts::Concept;
use crate::error::{Error, Result};
use crate::store::{DenseMask, Facet, SiteId};

/// Samples evaluated between checkpoints.
pub const CHECKPOINT_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Concept,
    Head,
}

/// How accumulated drops are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Divide by the number of samples `K`.
    #[default]
    DivideByK,
    /// Divide by the number of samples that contained the unit.
    InclusionNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    #[serde(rename = "K")]
    pub k: usize,
    pub fraction: f64,
    pub seed: u64,
    pub unit: UnitKind,
    #[serde(default)]
    pub estimator: Estimator,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            k: 4000,
            fraction: 0.5,
            seed: 0,
            unit: UnitKind::Concept,
            estimator: Estimator::DivideByK,
        }
    }
}

impl SamplingPlan {
    /// Units masked per sample: `floor(fraction * units)`.
    pub fn per_sample(&self, units: usize) -> usize {
        (self.fraction * units as f64).floor() as usize
    }

    pub fn validate(&self, units: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParam("K must be at least 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::InvalidParam(format!("fraction {} must lie in (0, 1)", self.fraction)));
        }
        if units == 0 {
            return Err(Error::InvalidParam("no units to rank".into()));
        }
        if self.per_sample(units) == 0 {
            return Err(Error::InvalidParam(format!(
                "fraction {} of {units} units masks nothing",
                self.fraction
            )));
        }
        Ok(())
    }

    /// The `K` index sets, each sorted ascending. Depends only on the seed.
    pub fn draws(&self, units: usize) -> Vec<Vec<usize>> {
        let m = self.per_sample(units);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.k)
            .map(|_| {
                let mut idx = sample(&mut rng, units, m).into_vec();
                idx.sort_unstable();
                idx
            })
            .collect()
    }
}

/// Which cells a unit covers at one site.
#[derive(Debug, Clone, PartialEq)]
pub enum Coverage {
    /// Every cell of every video.
    All,
    /// Per-video masks; videos without an entry are untouched.
    PerVideo(BTreeMap<String, DenseMask>),
}

/// Something that can be switched off: a concept or a whole head.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskUnit {
    pub id: String,
    pub layer: u32,
    pub sites: Vec<(SiteId, Coverage)>,
}

impl MaskUnit {
    pub fn concept(concept: &Concept) -> Result<Self> {
        let mut per_video = BTreeMap::new();
        for (video, mask) in &concept.support {
            per_video.insert(video.clone(), mask.decode()?);
        }
        Ok(MaskUnit {
            id: concept.id.to_string(),
            layer: concept.id.site.layer,
            sites: vec![(concept.id.site.clone(), Coverage::PerVideo(per_video))],
        })
    }

    /// Key, query and value of one head over the full grid.
    pub fn head(model_id: &str, layer: u32, head: u32) -> Result<Self> {
        let sites = [Facet::Key, Facet::Query, Facet::Value]
            .into_iter()
            .map(|f| SiteId::attention(model_id, layer, head, f).map(|s| (s, Coverage::All)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskUnit {
            id: format!("{model_id}/L{layer}/H{head}"),
            layer,
            sites,
        })
    }

    /// Adds this unit's masks for the request's video.
    pub fn apply_to(&self, request: &mut MaskRequest, grid: crate::store::Dims) -> Result<()> {
        for (site, coverage) in &self.sites {
            match coverage {
                Coverage::All => request.add_mask(site.clone(), &DenseMask::full(grid))?,
                Coverage::PerVideo(map) => {
                    if let Some(mask) = map.get(&request.video_id) {
                        request.add_mask(site.clone(), mask)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn concept_units(concepts: &[Concept]) -> Result<Vec<MaskUnit>> {
    concepts.iter().map(MaskUnit::concept).collect()
}

/// One unit per attention head the backend exposes, ordered by (layer, head).
pub fn head_units(backend: &dyn ModelBackend) -> Result<Vec<MaskUnit>> {
    let mut heads: Vec<(u32, u32)> = backend
        .sites()
        .iter()
        .filter_map(|s| s.head.map(|h| (s.layer, h)))
        .collect();
    heads.sort_unstable();
    heads.dedup();
    heads
        .into_iter()
        .map(|(l, h)| MaskUnit::head(backend.model_id(), l, h))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTarget {
    pub video_id: String,
    pub target: TaskTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub units: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub fraction: f64,
    pub seed: u64,
    /// Mean unmasked metric over videos.
    pub baseline_metric: f64,
    pub inclusion_counts: Vec<u64>,
    pub unit: UnitKind,
    pub estimator: Estimator,
}

impl ImportanceReport {
    /// Unit indices by descending score; ties keep unit order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }

    pub fn argmax(&self) -> Option<usize> {
        self.ranking().first().copied()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: ImportanceReport = serde_json::from_str(&text)?;
        if report.scores.len() != report.units.len() || report.inclusion_counts.len() != report.units.len() {
            return Err(Error::InvalidParam(format!("{}: score and unit counts differ", path.display())));
        }
        Ok(report)
    }
}

/// Unmasked metric for each video.
pub fn baseline(backend: &dyn ModelBackend, videos: &[VideoTarget]) -> Result<Vec<f64>> {
    videos
        .iter()
        .map(|v| backend.evaluate(&MaskRequest::unmasked(v.video_id.clone(), v.target.clone())))
        .collect()
}

fn check_units(units: &[MaskUnit], backend: &dyn ModelBackend, videos: &[VideoTarget]) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::InvalidParam("no videos to evaluate".into()));
    }
    let sites = backend.sites();
    for u in units {
        for (site, _) in &u.sites {
            if !sites.contains(site) {
                return Err(Error::UnknownSite(format!("{site} (unit {})", u.id)));
            }
        }
    }
    Ok(())
}

/// Mean over videos of the metric drop when `members` are masked together.
fn masked_drop(
    units: &[MaskUnit],
    members: &[usize],
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
    base: &[f64],
) -> Result<f64> {
    let grid = backend.grid();
    let mut total = 0.0;
    for (v, b) in videos.iter().zip(base) {
        let mut request = MaskRequest::unmasked(v.video_id.clone(), v.target.clone());
        for &i in members {
            units[i].apply_to(&mut request, grid)?;
        }
        total += b - backend.evaluate(&request)?;
    }
    Ok(total / videos.len() as f64)
}

/// Single-unit masking; `Q + 1` forwards per video.
pub fn occlusion(units: &[MaskUnit], backend: &dyn ModelBackend, videos: &[VideoTarget]) -> Result<ImportanceReport> {
    check_units(units, backend, videos)?;
    let base = baseline(backend, videos)?;
    let scores = (0..units.len())
        .into_par_iter()
        .map(|i| masked_drop(units, &[i], backend, videos, &base))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ImportanceReport {
        units: units.iter().map(|u| u.id.clone()).collect(),
        scores,
        k: units.len(),
        fraction: 0.0,
        seed: 0,
        baseline_metric: mean(&base),
        inclusion_counts: vec![1; units.len()],
        unit: UnitKind::Concept,
        estimator: Estimator::DivideByK,
    })
}

/// Resumable CRIS state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    plan: SamplingPlan,
    units: Vec<String>,
    completed: usize,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

pub fn cris(
    units: &[MaskUnit],
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
    plan: &SamplingPlan,
) -> Result<ImportanceReport> {
    cris_with_checkpoint(units, backend, videos, plan, None)
}

/// CRIS that records progress in `checkpoint` every [`CHECKPOINT_EVERY`]
/// samples and resumes from it when the plan and units match. Samples are
/// evaluated in parallel but accumulated in draw order, so the result is
/// identical for any worker count or resume point.
pub fn cris_with_checkpoint(
    units: &[MaskUnit],
    backend: &dyn ModelBackend,
    videos: &[VideoTarget],
    plan: &SamplingPlan,
    checkpoint: Option<&Path>,
) -> Result<ImportanceReport> {
    plan.validate(units.len())?;
    check_units(units, backend, videos)?;
    let ids: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    let base = baseline(backend, videos)?;
    let draws = plan.draws(units.len());

    let mut state = Checkpoint {
        plan: plan.clone(),
        units: ids.clone(),
        completed: 0,
        sums: vec![0.0; units.len()],
        counts: vec![0; units.len()],
    };
    if let Some(path) = checkpoint.filter(|p| p.exists()) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let saved: Checkpoint = serde_json::from_str(&text)?;
        if saved.plan == *plan && saved.units == ids && saved.completed <= plan.k {
            state = saved;
        }
    }

    while state.completed < plan.k {
        let end = (state.completed + CHECKPOINT_EVERY).min(plan.k);
        let drops = draws[state.completed..end]
            .par_iter()
            .map(|members| masked_drop(units, members, backend, videos, &base))
            .collect::<Result<Vec<f64>>>()?;
        for (members, drop) in draws[state.completed..end].iter().zip(drops) {
            for &i in members {
                state.sums[i] += drop;
                state.counts[i] += 1;
            }
        }
        state.completed = end;
        if let Some(path) = checkpoint {
            let text = serde_json::to_string(&state)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
    }

    let scores = state
        .sums
        .iter()
        .zip(&state.counts)
        .map(|(&s, &c)| match plan.estimator {
            Estimator::DivideByK => s / plan.k as f64,
            Estimator::InclusionNormalized if c == 0 => 0.0,
            Estimator::InclusionNormalized => s / c as f64,
        })
        .collect();
    Ok(ImportanceReport {
        units: ids,
        scores,
        k: plan.k,
        fraction: plan.fraction,
        seed: plan.seed,
        baseline_metric: mean(&base),
        inclusion_counts: state.counts,
        unit: plan.unit,
        estimator: plan.estimator,
    })
}

/// CRIS over every attention head of the backend.
pub fn head_importance(backend: &dyn ModelBackend, videos: &[VideoTarget], plan: &SamplingPlan) -> Result<ImportanceReport> {
    let units = head_units(backend)?;
    let plan = SamplingPlan {
        unit: UnitKind::Head,
        ..plan.clone()
    };
    cris(&units, backend, videos, &plan)
}

/// Mean normalised rank `1 - (r - 1)/(Q - 1)` of each layer's units, where
/// rank 1 is the highest score. Layers without units are absent.
pub fn per_layer_importance(report: &ImportanceReport, layers: &[u32]) -> Result<BTreeMap<u32, f64>> {
    if layers.len() != report.scores.len() {
        return Err(Error::InvalidParam(format!(
            "{} layer labels for {} units",
            layers.len(),
            report.scores.len()
        )));
    }
    let q = layers.len();
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (pos, &unit) in report.ranking().iter().enumerate() {
        let norm = if q > 1 { 1.0 - pos as f64 / (q - 1) as f64 } else { 1.0 };
        let e = acc.entry(layers[unit]).or_insert((0.0, 0));
        e.0 += norm;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
