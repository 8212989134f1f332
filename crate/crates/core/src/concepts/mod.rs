//! Concept clustering: tubelets of one site, pooled across videos, are grouped
//! by convex NMF; the cluster count is chosen by silhouette.

mod cnmf;
mod io;

pub use cnmf::{cnmf, objective, CnmfConfig, CnmfResult, CnmfSolver};
pub use io::{load_all_concepts, load_concept_store, write_concept_store};

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{BinaryMask, DenseMask, Dims, SiteId};
use crate::tubelets::Tubelet;

/// Identifies a concept: its site and its index within that site's set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConceptId {
    pub site: SiteId,
    pub index: usize,
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.site, self.index)
    }
}

/// A discovered concept with its per-video support.
#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub id: ConceptId,
    pub centroid: Vec<f64>,
    /// Indices into the tubelet list the concept set was built from.
    pub members: Vec<usize>,
    /// Union of member tubelet masks, keyed by video id.
    pub support: BTreeMap<String, BinaryMask>,
    pub dims: Dims,
}

impl Concept {
    /// Dense support for one video; empty when the concept has no tubelet there.
    pub fn support_for(&self, video_id: &str) -> Result<DenseMask> {
        match self.support.get(video_id) {
            Some(m) => m.decode(),
            None => Ok(DenseMask::empty(self.dims)),
        }
    }

    pub fn support_size(&self) -> usize {
        self.support.values().map(BinaryMask::count).sum()
    }
}

/// Factorisation outcome for one site.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub site: SiteId,
    pub q: usize,
    pub centroids: Array2<f64>,
    pub weights: Array2<f64>,
    pub assignments: Array2<f64>,
    pub hard_assignment: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub objective: f64,
    pub selection: ClusterSelection,
}

/// Silhouette scan over candidate cluster counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub q: usize,
    /// `(Q, mean silhouette)`; `None` when the hard assignment used a single cluster.
    pub silhouettes: Vec<(usize, Option<f64>)>,
    /// Set when every tubelet feature is identical.
    pub degenerate: bool,
}

/// Silhouette threshold relative to the best count in the range.
pub const SILHOUETTE_THRESHOLD: f64 = 0.9;

/// Mean silhouette of a labelling under Euclidean distance. Points in
/// singleton clusters score 0. `None` when fewer than two clusters are used.
pub fn silhouette(data: &Array2<f64>, labels: &[usize]) -> Option<f64> {
    let m = data.nrows();
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return None;
    }
    let dist = |i: usize, j: usize| {
        data.row(i)
            .iter()
            .zip(data.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..m {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..m {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Some(total / m as f64)
}

/// Picks the cluster count: CNMF is fit for every `Q` in `[q_min, q_max]` and
/// the smallest `Q` whose silhouette reaches 0.9 of the best is returned,
/// together with its fit.
pub fn select_cluster_count(
    data: &Array2<f64>,
    q_min: usize,
    q_max: usize,
    config: &CnmfConfig,
) -> Result<(ClusterSelection, Option<CnmfResult>)> {
    let m = data.nrows();
    if q_min < 2 {
        return Err(Error::InvalidParam(format!("q_min {q_min} must be >= 2")));
    }
    if q_min > q_max {
        return Err(Error::InvalidParam(format!("empty range [{q_min}, {q_max}]")));
    }
    if q_min > m {
        return Err(Error::InvalidParam(format!("q_min {q_min} exceeds {m} tubelets")));
    }
    let q_max = q_max.min(m);
    let first = data.row(0);
    if data.rows().into_iter().all(|r| r == first) {
        let fit = cnmf(data, q_min, config)?;
        return Ok((
            ClusterSelection {
                q: q_min,
                silhouettes: Vec::new(),
                degenerate: true,
            },
            Some(fit),
        ));
    }

    let mut fits = Vec::new();
    let mut silhouettes = Vec::new();
    for q in q_min..=q_max {
        let fit = cnmf(data, q, config)?;
        let s = silhouette(data, &fit.hard_assignment());
        silhouettes.push((q, s));
        fits.push(fit);
    }
    let best = silhouettes.iter().filter_map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
    let chosen = if best == f64::NEG_INFINITY {
        0
    } else if best > 0.0 {
        silhouettes
            .iter()
            .position(|&(_, s)| s.is_some_and(|s| s >= SILHOUETTE_THRESHOLD * best))
            .expect("the maximiser qualifies")
    } else {
        silhouettes.iter().position(|&(_, s)| s == Some(best)).expect("maximiser exists")
    };
    let q = silhouettes[chosen].0;
    let fit = fits.swap_remove(chosen);
    Ok((
        ClusterSelection {
            q,
            silhouettes,
            degenerate: best == f64::NEG_INFINITY,
        },
        Some(fit),
    ))
}

/// Stacks tubelet features into the `M x C` matrix CNMF consumes.
pub fn feature_matrix(tubelets: &[Tubelet]) -> Result<Array2<f64>> {
    let c = tubelets
        .first()
        .map(|t| t.feature.len())
        .ok_or_else(|| Error::InvalidParam("no tubelets".into()))?;
    let mut data = Array2::zeros((tubelets.len(), c));
    for (i, t) in tubelets.iter().enumerate() {
        if t.feature.len() != c {
            return Err(Error::Shape(format!("tubelet {i} has {} channels, expected {c}", t.feature.len())));
        }
        data.row_mut(i).assign(&ndarray::ArrayView1::from(&t.feature));
    }
    Ok(data)
}

/// Clusters one site's tubelets (from any number of videos) into concepts.
/// Concepts that end up without members are dropped and the rest reindexed.
pub fn build_concepts(
    tubelets: &[Tubelet],
    q_range: (usize, usize),
    config: &CnmfConfig,
) -> Result<(ConceptSet, Vec<Concept>)> {
    let site = tubelets
        .first()
        .map(|t| t.site.clone())
        .ok_or_else(|| Error::InvalidParam("no tubelets".into()))?;
    if tubelets.len() < 2 || tubelets.len() < q_range.0 {
        return Err(Error::InvalidParam(format!(
            "{} tubelets cannot form at least {} concepts",
            tubelets.len(),
            q_range.0
        )));
    }
    if let Some(t) = tubelets.iter().find(|t| t.site != site) {
        return Err(Error::InvalidParam(format!("mixed sites {} and {}", site, t.site)));
    }
    let dims = tubelets[0].mask.dims;
    let data = feature_matrix(tubelets)?;
    let (selection, fit) = select_cluster_count(&data, q_range.0, q_range.1, config)?;
    let fit = fit.expect("selection always returns a fit");
    let hard = fit.hard_assignment();

    let used: Vec<usize> = (0..fit.assignments.ncols()).filter(|j| hard.contains(j)).collect();
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let hard_assignment: Vec<usize> = hard.iter().map(|j| remap[j]).collect();
    let weights = fit.weights.select(Axis(1), &used);
    let assignments = fit.assignments.select(Axis(1), &used);
    let centroids = fit.centroids.select(Axis(0), &used);
    let mut members = vec![Vec::new(); used.len()];
    for (i, &j) in hard_assignment.iter().enumerate() {
        members[j].push(i);
    }

    let mut concepts = Vec::with_capacity(used.len());
    for (index, member_list) in members.iter().enumerate() {
        let mut per_video: BTreeMap<String, DenseMask> = BTreeMap::new();
        for &i in member_list {
            let t = &tubelets[i];
            let mask = t.mask.decode()?;
            per_video
                .entry(t.video_id.clone())
                .or_insert_with(|| DenseMask::empty(dims))
                .union_with(&mask)?;
        }
        concepts.push(Concept {
            id: ConceptId {
                site: site.clone(),
                index,
            },
            centroid: centroids.row(index).to_vec(),
            members: member_list.clone(),
            support: per_video
                .into_iter()
                .map(|(v, m)| {
                    let rle = BinaryMask::encode(v.clone(), &m);
                    (v, rle)
                })
                .collect(),
            dims,
        });
    }

    let set = ConceptSet {
        site,
        q: used.len(),
        centroids,
        weights,
        assignments,
        hard_assignment,
        members,
        objective: fit.objective(),
        selection,
    };
    Ok((set, concepts))
}
