//! Concepts shared across models.
//!
//! The R-score of a tuple of concepts from distinct models is the IoU of their
//! supports over all videos at once:
//!
//! ```text
//! R = |S_1 ∩ ... ∩ S_d| / |S_1 ∪ ... ∪ S_d|
//! ```
//!
//! Supports are first resampled to the per-axis coarsest grid among the
//! models. Mining keeps each model's most important concepts, scores all
//! cross-model pairs, and grows tuples one model at a time from concepts that
//! still take part in some tuple above the threshold. Adding a concept can
//! only shrink the intersection and grow the union, so this prunes nothing
//! that would pass.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::Concept;
use crate::error::{Error, Result};
use crate::store::{DenseMask, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    /// Share of each model's concepts kept by importance.
    pub epsilon: f64,
    /// R-scores must exceed this.
    pub delta: f64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            epsilon: 0.15,
            delta: 0.15,
        }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidParam(format!("epsilon {} must lie in (0, 1]", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidParam(format!("delta {} must lie in [0, 1)", self.delta)));
        }
        Ok(())
    }
}

/// One model's concepts and their importance scores.
#[derive(Debug, Clone)]
pub struct ModelConcepts {
    pub model_id: String,
    /// Videos the supports range over; must agree across models.
    pub videos: Vec<String>,
    pub concepts: Vec<Concept>,
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosettaTuple {
    pub models: Vec<String>,
    pub concept_ids: Vec<String>,
    pub d: usize,
    pub r_score: f64,
}

/// A concept's support over an ordered video list, flattened to one bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportBits {
    videos: Vec<String>,
    words: Vec<u64>,
}

impl SupportBits {
    /// Resamples each video's support to `grid`; videos outside the concept's
    /// support contribute empty masks.
    pub fn from_concept(concept: &Concept, videos: &[String], grid: Dims) -> Result<Self> {
        let masks = videos
            .iter()
            .map(|v| concept.support_for(v).map(|m| m.resample(grid)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_masks(videos, &masks))
    }

    pub fn from_masks(videos: &[String], masks: &[DenseMask]) -> Self {
        let mut sorted: Vec<(&String, &DenseMask)> = videos.iter().zip(masks).collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let total: usize = masks.iter().map(|m| m.dims.cells()).sum();
        let mut words = vec![0u64; total.div_ceil(64)];
        let mut offset = 0;
        for (_, m) in &sorted {
            for c in m.cells() {
                let bit = offset + c;
                words[bit / 64] |= 1 << (bit % 64);
            }
            offset += m.dims.cells();
        }
        SupportBits {
            videos: sorted.into_iter().map(|(v, _)| v.clone()).collect(),
            words,
        }
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Per-axis minimum of the given grids.
pub fn common_grid(grids: &[Dims]) -> Option<Dims> {
    grids.iter().copied().reduce(|a, b| Dims::new(a.t.min(b.t), a.h.min(b.h), a.w.min(b.w)))
}

/// Running intersection and union of a tuple's supports.
#[derive(Debug, Clone)]
struct Accum {
    and: Vec<u64>,
    or: Vec<u64>,
}

impl Accum {
    fn new(s: &SupportBits) -> Self {
        Accum {
            and: s.words.clone(),
            or: s.words.clone(),
        }
    }

    fn with(&self, s: &SupportBits) -> Self {
        Accum {
            and: self.and.iter().zip(&s.words).map(|(a, b)| a & b).collect(),
            or: self.or.iter().zip(&s.words).map(|(a, b)| a | b).collect(),
        }
    }

    fn score(&self) -> f64 {
        let inter: u64 = self.and.iter().map(|w| w.count_ones() as u64).sum();
        let union: u64 = self.or.iter().map(|w| w.count_ones() as u64).sum();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// R-score of supports that share one grid and video list.
pub fn r_score(supports: &[&SupportBits]) -> Result<f64> {
    let first = supports
        .first()
        .ok_or_else(|| Error::InvalidParam("r-score of an empty tuple".into()))?;
    for s in &supports[1..] {
        if s.videos != first.videos {
            return Err(Error::InvalidParam("supports range over different video sets".into()));
        }
        if s.words.len() != first.words.len() {
            return Err(Error::Shape("supports are on different grids".into()));
        }
    }
    let acc = supports[1..].iter().fold(Accum::new(first), |a, s| a.with(s));
    Ok(acc.score())
}

/// Indices of the top `epsilon` share of scores (at least one); every
/// concept tied with the last kept score is kept too.
pub fn top_fraction(scores: &[f64], epsilon: f64) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let keep = ((epsilon * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[keep - 1];
    (0..scores.len()).filter(|&i| scores[i] >= threshold).collect()
}

/// Kept concepts of every model, as `(model, concept, support)`.
pub struct Prepared {
    pub grid: Dims,
    pub models: Vec<String>,
    /// Per model: (concept index, concept id, support).
    pub kept: Vec<Vec<(usize, String, SupportBits)>>,
}

pub fn prepare(models: &[ModelConcepts], params: &MiningParams) -> Result<Prepared> {
    params.validate()?;
    if models.len() < 2 {
        return Err(Error::InvalidParam("mining needs at least two models".into()));
    }
    let mut ids = BTreeSet::new();
    for m in models {
        if !ids.insert(&m.model_id) {
            return Err(Error::InvalidParam(format!("model {} listed twice", m.model_id)));
        }
        if m.importance.len() != m.concepts.len() {
            return Err(Error::InvalidParam(format!(
                "model {}: {} scores for {} concepts",
                m.model_id,
                m.importance.len(),
                m.concepts.len()
            )));
        }
    }
    let videos: BTreeSet<&String> = models[0].videos.iter().collect();
    if models.iter().any(|m| m.videos.iter().collect::<BTreeSet<_>>() != videos) {
        return Err(Error::InvalidParam("models cover different video sets".into()));
    }
    let grids: Vec<Dims> = models.iter().flat_map(|m| m.concepts.iter().map(|c| c.dims)).collect();
    let grid = common_grid(&grids).unwrap_or(Dims::new(1, 1, 1));
    let videos: Vec<String> = videos.into_iter().cloned().collect();
    let kept = models
        .iter()
        .map(|m| {
            top_fraction(&m.importance, params.epsilon)
                .into_iter()
                .map(|i| {
                    let c = &m.concepts[i];
                    Ok((i, c.id.to_string(), SupportBits::from_concept(c, &videos, grid)?))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        grid,
        models: models.iter().map(|m| m.model_id.clone()).collect(),
        kept,
    })
}

/// A tuple under construction: `(model, kept index)` pairs in model order.
#[derive(Clone)]
struct Partial {
    members: Vec<(usize, usize)>,
    acc: Accum,
}

pub fn mine(models: &[ModelConcepts], params: &MiningParams) -> Result<Vec<RosettaTuple>> {
    let prep = prepare(models, params)?;
    Ok(mine_prepared(&prep, params.delta))
}

pub fn mine_prepared(prep: &Prepared, delta: f64) -> Vec<RosettaTuple> {
    let n_models = prep.kept.len();
    let pairs: Vec<(usize, usize, usize, usize)> = (0..n_models)
        .flat_map(|a| ((a + 1)..n_models).map(move |b| (a, b)))
        .flat_map(|(a, b)| {
            (0..prep.kept[a].len()).flat_map(move |i| (0..prep.kept[b].len()).map(move |j| (a, i, b, j)))
        })
        .collect();
    let mut frontier: Vec<Partial> = pairs
        .par_iter()
        .filter_map(|&(a, i, b, j)| {
            let acc = Accum::new(&prep.kept[a][i].2).with(&prep.kept[b][j].2);
            (acc.score() > delta).then(|| Partial {
                members: vec![(a, i), (b, j)],
                acc,
            })
        })
        .collect();

    let mut found = Vec::new();
    while !frontier.is_empty() {
        found.extend(frontier.iter().map(|p| to_tuple(prep, p)));
        let survivors: BTreeSet<(usize, usize)> = frontier.iter().flat_map(|p| p.members.iter().copied()).collect();
        frontier = frontier
            .par_iter()
            .flat_map_iter(|p| {
                let last = p.members.last().expect("tuples are non-empty").0;
                survivors
                    .iter()
                    .filter(move |(m, _)| *m > last)
                    .filter_map(move |&(m, i)| {
                        let acc = p.acc.with(&prep.kept[m][i].2);
                        (acc.score() > delta).then(|| {
                            let mut members = p.members.clone();
                            members.push((m, i));
                            Partial { members, acc }
                        })
                    })
            })
            .collect();
    }
    sort_tuples(&mut found);
    found
}

fn to_tuple(prep: &Prepared, p: &Partial) -> RosettaTuple {
    RosettaTuple {
        models: p.members.iter().map(|&(m, _)| prep.models[m].clone()).collect(),
        concept_ids: p.members.iter().map(|&(m, i)| prep.kept[m][i].1.clone()).collect(),
        d: p.members.len(),
        r_score: p.acc.score(),
    }
}

/// Orders by tuple size, then R-score (both descending), then concept ids.
pub fn sort_tuples(tuples: &mut [RosettaTuple]) {
    tuples.sort_by(|a, b| {
        b.d.cmp(&a.d)
            .then_with(|| b.r_score.partial_cmp(&a.r_score).unwrap_or(Ordering::Equal))
            .then_with(|| a.concept_ids.cmp(&b.concept_ids))
    });
}

pub fn write_tuples(tuples: &[RosettaTuple], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(tuples)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(cells: &[usize]) -> SupportBits {
        let grid = Dims::new(1, 4, 4);
        SupportBits::from_masks(&["v".to_string()], &[DenseMask::from_cells(grid, cells.iter().copied())])
    }

    #[test]
    fn r_score_examples() {
        let a = bits(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let b = bits(&[6, 7, 8, 9]);
        assert_eq!(r_score(&[&a, &a]).unwrap(), 1.0);
        assert_eq!(r_score(&[&a, &bits(&[10, 11])]).unwrap(), 0.0);
        assert_eq!(r_score(&[&a, &b]).unwrap(), 0.2);
        assert_eq!(r_score(&[&bits(&[]), &bits(&[])]).unwrap(), 0.0);
    }

    #[test]
    fn r_score_rejects_mismatched_videos() {
        let grid = Dims::new(1, 2, 2);
        let a = SupportBits::from_masks(&["v".into()], &[DenseMask::full(grid)]);
        let b = SupportBits::from_masks(&["w".into()], &[DenseMask::full(grid)]);
        assert!(r_score(&[&a, &b]).is_err());
    }

    #[test]
    fn top_fraction_keeps_ties() {
        assert_eq!(top_fraction(&[0.1, 0.9, 0.5, 0.9], 0.25), vec![1, 3]);
        assert_eq!(top_fraction(&[0.1, 0.2, 0.3], 0.01), vec![2]);
        assert_eq!(top_fraction(&[0.1, 0.2, 0.3], 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn common_grid_is_per_axis_min() {
        assert_eq!(
            common_grid(&[Dims::new(8, 4, 6), Dims::new(4, 8, 6)]),
            Some(Dims::new(4, 4, 6))
        );
    }

    #[test]
    fn params_validation() {
        assert!(MiningParams::default().validate().is_ok());
        assert!(MiningParams { epsilon: 0.0, delta: 0.1 }.validate().is_err());
        assert!(MiningParams { epsilon: 0.5, delta: 1.0 }.validate().is_err());
    }
}
