//! Tubelet proposals: SLIC superpixels computed in feature space over the
//! `T' x H' x W'` grid of one video, followed by average pooling of the
//! channel vectors inside each connected region.
//!
//! The clustering distance between a cell and a cluster centre is
//!
//! ```text
//! d^2 = |f - f_c|^2 / C + m^2 * |(p - p_c) / S|^2,   S = (cells / n_segments)^(1/3)
//! ```
//!
//! where `m` is the compactness. Both terms are normalised so that one
//! compactness value behaves similarly across models with different widths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{BinaryMask, DenseMask, Dims, FeatureVolume, SiteId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    pub min_size_fraction: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_segments: 12,
            compactness: 0.1,
            max_iters: 10,
            min_size_fraction: 0.05,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(Error::InvalidParam("n_segments must be >= 1".into()));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::InvalidParam(format!("compactness {} must be > 0", self.compactness)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParam("max_iters must be >= 1".into()));
        }
        if !(self.min_size_fraction > 0.0 && self.min_size_fraction < 1.0) {
            return Err(Error::InvalidParam(format!(
                "min_size_fraction {} must lie in (0, 1)",
                self.min_size_fraction
            )));
        }
        Ok(())
    }
}

/// A connected spatiotemporal region and its pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Tubelet {
    pub video_id: String,
    pub site: SiteId,
    pub mask: BinaryMask,
    pub feature: Vec<f64>,
    pub size: usize,
}

struct Center {
    pos: [f64; 3],
    feature: Vec<f64>,
}

/// Initial cluster centres: a regular grid, each centre nudged to the
/// lowest-gradient cell in its 3x3x3 neighbourhood.
pub fn slic_seeds(volume: &FeatureVolume, params: &SlicParams) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    let dims = volume.dims;
    if params.n_segments > dims.cells() {
        return Err(Error::InvalidParam(format!(
            "n_segments {} exceeds the {} cells of grid {dims}",
            params.n_segments,
            dims.cells()
        )));
    }
    let counts = grid_counts(dims, params.n_segments);
    let extents = dims.as_array();
    let axis_pos = |axis: usize, i: usize| (i as f64 + 0.5) * extents[axis] as f64 / counts[axis] as f64 - 0.5;

    let mut grid = Vec::with_capacity(counts.iter().product());
    for a in 0..counts[0] {
        for b in 0..counts[1] {
            for c in 0..counts[2] {
                grid.push([axis_pos(0, a), axis_pos(1, b), axis_pos(2, c)]);
            }
        }
    }
    // Trim evenly when no factorisation hits n_segments exactly.
    let total = grid.len();
    let seeds: Vec<[f64; 3]> = (0..params.n_segments).map(|i| grid[i * total / params.n_segments]).collect();

    let features = volume.cell_major();
    let ch = volume.channels;
    let gradient = feature_gradient(dims, ch, &features);
    Ok(seeds
        .into_iter()
        .map(|p| {
            let nearest = nearest_cell(dims, p);
            let (t0, h0, w0) = dims.coords(nearest);
            let mut best = (gradient[nearest], nearest);
            for t in t0.saturating_sub(1)..=(t0 + 1).min(dims.t - 1) {
                for h in h0.saturating_sub(1)..=(h0 + 1).min(dims.h - 1) {
                    for w in w0.saturating_sub(1)..=(w0 + 1).min(dims.w - 1) {
                        let idx = dims.index(t, h, w);
                        if gradient[idx] < best.0 {
                            best = (gradient[idx], idx);
                        }
                    }
                }
            }
            if best.1 == nearest {
                p
            } else {
                let (t, h, w) = dims.coords(best.1);
                [t as f64, h as f64, w as f64]
            }
        })
        .collect())
}

/// Per-axis seed counts whose product covers `n` with spacing as close to
/// isotropic as the grid allows. Ties prefer splitting later axes.
fn grid_counts(dims: Dims, n: usize) -> [usize; 3] {
    let extents = dims.as_array();
    let step = (dims.cells() as f64 / n as f64).cbrt();
    let mut best = ([1, 1, n.min(dims.w)], f64::INFINITY);
    for a in 1..=extents[0].min(n) {
        for b in 1..=extents[1].min(n) {
            for c in 1..=extents[2].min(n) {
                let product = a * b * c;
                if product < n {
                    continue;
                }
                let counts = [a, b, c];
                let aniso: f64 = (0..3)
                    .map(|i| (extents[i] as f64 / counts[i] as f64 / step).ln().powi(2))
                    .sum();
                let cost = 10.0 * (product - n) as f64 / n as f64 + aniso;
                if cost <= best.1 - 1e-12 || (cost < best.1 + 1e-12 && prefer_later(counts, best.0)) {
                    best = (counts, cost);
                }
                if product >= n {
                    break;
                }
            }
        }
    }
    best.0
}

fn prefer_later(candidate: [usize; 3], current: [usize; 3]) -> bool {
    candidate.iter().rev().cmp(current.iter().rev()) == std::cmp::Ordering::Greater
}

fn nearest_cell(dims: Dims, p: [f64; 3]) -> usize {
    let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    dims.index(clamp(p[0], dims.t), clamp(p[1], dims.h), clamp(p[2], dims.w))
}

fn feature_gradient(dims: Dims, ch: usize, features: &[f64]) -> Vec<f64> {
    let cell = |i: usize| &features[i * ch..(i + 1) * ch];
    (0..dims.cells())
        .map(|idx| {
            let (t, h, w) = dims.coords(idx);
            let pairs = [
                (dims.index(t.saturating_sub(1), h, w), dims.index((t + 1).min(dims.t - 1), h, w)),
                (dims.index(t, h.saturating_sub(1), w), dims.index(t, (h + 1).min(dims.h - 1), w)),
                (dims.index(t, h, w.saturating_sub(1)), dims.index(t, h, (w + 1).min(dims.w - 1))),
            ];
            pairs
                .iter()
                .map(|&(a, b)| cell(a).iter().zip(cell(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum()
        })
        .collect()
}

/// Runs SLIC and connectivity enforcement, returning one label per cell.
/// Labels are `0..k`, numbered by each region's first cell in `(t, h, w)` order.
pub fn slic_labels(volume: &FeatureVolume, params: &SlicParams) -> Result<Vec<usize>> {
    let seeds = slic_seeds(volume, params)?;
    let dims = volume.dims;
    let ch = volume.channels;
    let features = volume.cell_major();
    let cell_feature = |i: usize| &features[i * ch..(i + 1) * ch];
    let step = (dims.cells() as f64 / params.n_segments as f64).cbrt();
    let spatial_weight = (params.compactness / step).powi(2);

    let counts = grid_counts(dims, params.n_segments);
    let extents = dims.as_array();
    let window: [f64; 3] = std::array::from_fn(|a| 2.0 * extents[a] as f64 / counts[a] as f64);

    let mut centers: Vec<Center> = seeds
        .iter()
        .map(|&pos| Center {
            pos,
            feature: cell_feature(nearest_cell(dims, pos)).to_vec(),
        })
        .collect();

    let distance = |c: &Center, idx: usize, pos: [f64; 3]| {
        let df: f64 = cell_feature(idx)
            .iter()
            .zip(&c.feature)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / ch as f64;
        let dp: f64 = pos.iter().zip(&c.pos).map(|(a, b)| (a - b) * (a - b)).sum();
        df + spatial_weight * dp
    };

    let mut labels = vec![usize::MAX; dims.cells()];
    for _ in 0..params.max_iters {
        let mut changed = false;
        for (idx, label) in labels.iter_mut().enumerate() {
            let (t, h, w) = dims.coords(idx);
            let pos = [t as f64, h as f64, w as f64];
            let in_window = |c: &Center| (0..3).all(|a| (pos[a] - c.pos[a]).abs() <= window[a]);
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, c) in centers.iter().enumerate() {
                if in_window(c) {
                    let d = distance(c, idx, pos);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            if best.1 == usize::MAX {
                for (k, c) in centers.iter().enumerate() {
                    let d = distance(c, idx, pos);
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            if *label != best.1 {
                *label = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0usize, [0.0f64; 3], vec![0.0f64; ch]); centers.len()];
        for (idx, &label) in labels.iter().enumerate() {
            let (t, h, w) = dims.coords(idx);
            let s = &mut sums[label];
            s.0 += 1;
            s.1[0] += t as f64;
            s.1[1] += h as f64;
            s.1[2] += w as f64;
            for (acc, v) in s.2.iter_mut().zip(cell_feature(idx)) {
                *acc += v;
            }
        }
        for (c, (n, pos, feat)) in centers.iter_mut().zip(sums) {
            if n > 0 {
                let n = n as f64;
                c.pos = pos.map(|v| v / n);
                c.feature = feat.into_iter().map(|v| v / n).collect();
            }
        }
    }

    let min_size = params.min_size_fraction * dims.cells() as f64 / params.n_segments as f64;
    Ok(enforce_connectivity(dims, &labels, &features, ch, min_size, params.n_segments))
}

/// Splits labels into 6-connected components, folds components smaller than
/// `min_size` into the face-adjacent neighbour with the closest mean
/// feature, then keeps merging the smallest component the same way until at
/// most `max_regions` remain.
fn enforce_connectivity(
    dims: Dims,
    labels: &[usize],
    features: &[f64],
    ch: usize,
    min_size: f64,
    max_regions: usize,
) -> Vec<usize> {
    let n = dims.cells();
    let mut comp = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(cell) = stack.pop() {
            size += 1;
            for nb in dims.neighbors(cell) {
                if comp[nb] == usize::MAX && labels[nb] == labels[start] {
                    comp[nb] = id;
                    stack.push(nb);
                }
            }
        }
        sizes.push(size);
    }

    // Union-find over components; roots carry the merged size.
    let mut parent: Vec<usize> = (0..sizes.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    let mut sums = vec![vec![0.0f64; ch]; sizes.len()];
    for (cell, &c) in comp.iter().enumerate() {
        members[c].push(cell);
        for (acc, v) in sums[c].iter_mut().zip(&features[cell * ch..(cell + 1) * ch]) {
            *acc += v;
        }
    }
    let mut alive = sizes.len();

    let mut merge_smallest = |parent: &mut Vec<usize>, sizes: &mut Vec<usize>, pick: &dyn Fn(usize) -> bool| -> bool {
        let roots: Vec<usize> = (0..sizes.len()).filter(|&c| find(parent, c) == c).collect();
        let Some(&small) = roots
            .iter()
            .filter(|&&r| pick(sizes[r]))
            .min_by_key(|&&r| (sizes[r], members[r][0]))
        else {
            return false;
        };
        let gap = |r: usize| -> f64 {
            let (a, b) = (&sums[small], &sums[r]);
            let (na, nb) = (sizes[small] as f64, sizes[r] as f64);
            a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum()
        };
        // Closest mean feature; ties go to the larger, then earlier, region.
        let mut best: Option<(f64, usize)> = None;
        for &cell in &members[small] {
            for nb in dims.neighbors(cell) {
                let r = find(parent, comp[nb]);
                if r == small {
                    continue;
                }
                let d = gap(r);
                let better = best.is_none_or(|(bd, b)| {
                    d < bd || (d == bd && (sizes[r], std::cmp::Reverse(members[r][0])) > (sizes[b], std::cmp::Reverse(members[b][0])))
                });
                if better {
                    best = Some((d, r));
                }
            }
        }
        let Some((_, target)) = best else {
            return false;
        };
        parent[small] = target;
        sizes[target] += sizes[small];
        let moved_sum = std::mem::take(&mut sums[small]);
        for (acc, v) in sums[target].iter_mut().zip(moved_sum) {
            *acc += v;
        }
        let moved = std::mem::take(&mut members[small]);
        let merged = &mut members[target];
        merged.extend(moved);
        merged.sort_unstable();
        true
    };

    while alive > 1 && merge_smallest(&mut parent, &mut sizes, &|s| (s as f64) < min_size) {
        alive -= 1;
    }
    while alive > max_regions && merge_smallest(&mut parent, &mut sizes, &|_| true) {
        alive -= 1;
    }

    let mut relabel = vec![usize::MAX; sizes.len()];
    let mut next = 0;
    let mut out = vec![0; n];
    for cell in 0..n {
        let r = find(&mut parent, comp[cell]);
        if relabel[r] == usize::MAX {
            relabel[r] = next;
            next += 1;
        }
        out[cell] = relabel[r];
    }
    out
}

/// SLIC partition of one volume as binary masks, ordered by first cell.
pub fn slic_segment(volume: &FeatureVolume, params: &SlicParams) -> Result<Vec<BinaryMask>> {
    let labels = slic_labels(volume, params)?;
    Ok(masks_from_labels(volume.dims, &labels)
        .iter()
        .map(|m| BinaryMask::encode(volume.video_id.clone(), m))
        .collect())
}

fn masks_from_labels(dims: Dims, labels: &[usize]) -> Vec<DenseMask> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut masks = vec![DenseMask::empty(dims); k];
    for (cell, &l) in labels.iter().enumerate() {
        masks[l].set(cell, true);
    }
    masks
}

/// Average-pools the volume's channel vectors over a mask's support.
pub fn pool_tubelet(volume: &FeatureVolume, mask: &DenseMask) -> Result<Tubelet> {
    if mask.dims != volume.dims {
        return Err(Error::Shape(format!("mask grid {} vs volume grid {}", mask.dims, volume.dims)));
    }
    let size = mask.count();
    if size == 0 {
        return Err(Error::InvalidParam("cannot pool an empty mask".into()));
    }
    let mut feature = vec![0.0f64; volume.channels];
    for cell in mask.cells() {
        for (c, acc) in feature.iter_mut().enumerate() {
            *acc += volume.get(c, cell) as f64;
        }
    }
    for v in &mut feature {
        *v /= size as f64;
    }
    Ok(Tubelet {
        video_id: volume.video_id.clone(),
        site: volume.site.clone(),
        mask: BinaryMask::encode(volume.video_id.clone(), mask),
        feature,
        size,
    })
}

/// Tubelets of one video at one site.
pub fn extract_tubelets(volume: &FeatureVolume, params: &SlicParams) -> Result<Vec<Tubelet>> {
    let labels = slic_labels(volume, params)?;
    masks_from_labels(volume.dims, &labels)
        .iter()
        .map(|m| pool_tubelet(volume, m))
        .collect()
}
