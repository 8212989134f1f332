//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vtcd::backend::{ToyConfig, ToyTransformer, ToyWeights};
use vtcd::concepts::{write_concept_store, ClusterSelection, CnmfConfig, CnmfSolver, ConceptSet};
use vtcd::fixtures::{random_model_concepts, toy_inputs, two_region_volume, PlantedFixture};
use vtcd::importance::{Estimator, ImportanceReport, UnitKind};
use vtcd::rosetta::{ModelConcepts, RosettaTuple};
use vtcd::store::{BinaryMask, DenseMask, Dims, FeatureVolume, SiteId};
use vtcd::tubelets::{slic_segment, SlicParams};

// ---------------------------------------------------------------- tubelets

pub fn random_volume(rng: &mut ChaCha8Rng, tag: usize) -> FeatureVolume {
    let dims = Dims::new(rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
    let channels = rng.random_range(1..=16);
    let data: Vec<f32> = (0..channels * dims.cells()).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    FeatureVolume::new(format!("v{tag}"), SiteId::residual("m", 1).unwrap(), channels, dims, data).unwrap()
}

/// Random SLIC parameters valid for a grid of `cells` cells.
pub fn random_slic(rng: &mut ChaCha8Rng, cells: usize) -> SlicParams {
    SlicParams {
        n_segments: rng.random_range(1..=cells.min(20)),
        compactness: rng.random_range(0.01..2.0),
        max_iters: rng.random_range(1..=10),
        min_size_fraction: rng.random_range(0.01..0.3),
    }
}

/// Masks cover every cell exactly once and each is one 6-connected piece.
pub fn check_partition(masks: &[BinaryMask], dims: Dims) -> Result<(), String> {
    let mut owner = vec![usize::MAX; dims.cells()];
    for (k, m) in masks.iter().enumerate() {
        let dense = m.decode().map_err(|e| e.to_string())?;
        if dense.dims != dims {
            return Err(format!("mask {k} is {}, volume {dims}", dense.dims));
        }
        let cells: Vec<usize> = dense.cells().collect();
        if cells.is_empty() {
            return Err(format!("mask {k} is empty"));
        }
        for &c in &cells {
            if owner[c] != usize::MAX {
                return Err(format!("cell {c} in masks {} and {k}", owner[c]));
            }
            owner[c] = k;
        }
        let reached = flood(&dense, cells[0], dims);
        if reached != cells.len() {
            return Err(format!("mask {k}: {reached} of {} cells connected", cells.len()));
        }
    }
    match owner.iter().position(|&o| o == usize::MAX) {
        Some(c) => Err(format!("cell {c} unassigned")),
        None => Ok(()),
    }
}

fn flood(mask: &DenseMask, start: usize, dims: Dims) -> usize {
    let (hw, w) = (dims.h * dims.w, dims.w);
    let mut seen = vec![false; dims.cells()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 0;
    while let Some(c) = queue.pop_front() {
        count += 1;
        let (t, h, x) = (c / hw, (c % hw) / w, c % w);
        let mut next = Vec::with_capacity(6);
        if t > 0 {
            next.push(c - hw);
        }
        if t + 1 < dims.t {
            next.push(c + hw);
        }
        if h > 0 {
            next.push(c - w);
        }
        if h + 1 < dims.h {
            next.push(c + w);
        }
        if x > 0 {
            next.push(c - 1);
        }
        if x + 1 < dims.w {
            next.push(c + 1);
        }
        for n in next {
            if mask.get(n) && !seen[n] {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    count
}

/// IoU between the planted region and the union of tubelets lying mostly inside it.
pub fn two_region_recovery(seed: u64) -> f64 {
    let site = SiteId::residual("m", 1).unwrap();
    let (vol, region) = two_region_volume("v", &site, Dims::new(4, 8, 8), 4, 0.1, seed).unwrap();
    let masks = slic_segment(&vol, &SlicParams::default()).unwrap();
    let mut inside = DenseMask::empty(vol.dims);
    for m in masks {
        let d = m.decode().unwrap();
        if 2 * d.intersection_count(&region).unwrap() > d.count() {
            inside.union_with(&d).unwrap();
        }
    }
    inside.iou(&region).unwrap()
}

// ---------------------------------------------------------------- cnmf

pub fn random_matrix(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (m, c) = (rng.random_range(4..=20), rng.random_range(2..=8));
    Array2::from_shape_fn((m, c), |_| rng.random_range(-3.0..3.0))
}

/// Steps the solver, checking after every sweep that the objective did not
/// rise and that G and A satisfy their constraints.
pub fn check_cnmf_trace(data: &Array2<f64>, q: usize, seed: u64, sweeps: usize) -> Result<(), String> {
    let cfg = CnmfConfig { seed, ..CnmfConfig::default() };
    let mut solver = CnmfSolver::new(data, q, &cfg).map_err(|e| e.to_string())?;
    let mut prev = solver.objective();
    for it in 0..sweeps {
        let obj = solver.step();
        if obj > prev + 1e-6 {
            return Err(format!("sweep {it}: objective {prev} -> {obj}"));
        }
        let g = solver.weights();
        if g.iter().any(|&v| v < 0.0) || solver.assignments().iter().any(|&v| v < 0.0) {
            return Err(format!("sweep {it}: negative entry"));
        }
        for (j, col) in g.columns().into_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(format!("sweep {it}: column {j} sums to {s}"));
            }
        }
        prev = obj;
    }
    Ok(())
}

/// `copies` shuffled copies of `q` random distinct rows.
pub fn duplicated_rows(rng: &mut ChaCha8Rng, q: usize, c: usize, copies: usize) -> Array2<f64> {
    let points = Array2::from_shape_fn((q, c), |_| rng.random_range(-3.0..3.0));
    let mut order: Vec<usize> = (0..q * copies).map(|i| i % q).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Array2::from_shape_fn((order.len(), c), |(i, j)| points[[order[i], j]])
}

// ---------------------------------------------------------------- toy model

pub struct RefOutput {
    pub class_logits: Vec<f64>,
    pub seg_logits: Vec<f64>,
    pub scalar: f64,
}

fn matvec_rows(x: &[Vec<f64>], w: &Array2<f64>, b: &ndarray::Array1<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| b[j] + (0..w.nrows()).map(|i| row[i] * w[[i, j]]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Toy model with inflated weights so masks move the outputs visibly.
pub fn masking_toy(seed: u64) -> ToyTransformer {
    let config = ToyConfig {
        seed,
        grid: Dims::new(2, 3, 3),
        dim: 16,
        ..ToyConfig::default()
    };
    let mut weights = ToyWeights::random(&config).unwrap();
    for l in &mut weights.layers {
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
            w.mapv_inplace(|v| v * 10.0);
        }
    }
    let mut model = ToyTransformer::with_weights(config.clone(), weights).unwrap();
    for v in toy_inputs(&config, 3, seed + 100).unwrap() {
        model.add_video(v).unwrap();
    }
    model
}

/// Straight-line forward of the toy transformer with explicitly zeroed
/// tensors: `masks` maps `(layer, head or None for residual, facet)` site
/// strings to masked token sets.
pub fn reference_forward(model: &ToyTransformer, video_id: &str, masks: &BTreeMap<SiteId, DenseMask>) -> RefOutput {
    let cfg = model.config();
    let w = &model.weights;
    let video = model.video(video_id).unwrap();
    let n = cfg.grid.cells();
    let d = cfg.dim;
    let dh = d / cfg.heads as usize;

    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|tok| {
            (0..d)
                .map(|j| {
                    let pos = tok as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
                    let pe = if j % 2 == 0 { pos.sin() } else { pos.cos() };
                    let emb: f64 = (0..cfg.in_channels).map(|c| video.get(c, tok) as f64 * w.embed[[c, j]]).sum();
                    emb + w.embed_bias[j] + pe
                })
                .collect()
        })
        .collect();

    for (li, lw) in w.layers.iter().enumerate() {
        let layer = li as u32 + 1;
        let h = norm_rows(&x);
        let mut q = matvec_rows(&h, &lw.wq, &lw.bq);
        let mut k = matvec_rows(&h, &lw.wk, &lw.bk);
        let mut v = matvec_rows(&h, &lw.wv, &lw.bv);
        let mut attended = vec![vec![0.0; d]; n];
        for head in 0..cfg.heads {
            let cols = head as usize * dh..(head as usize + 1) * dh;
            for (facet, t) in [("query", &mut q), ("key", &mut k), ("value", &mut v)] {
                let site: SiteId = format!("{}/L{layer}/H{head}/{facet}", cfg.model_id).parse().unwrap();
                if let Some(m) = masks.get(&site) {
                    for tok in 0..n {
                        if m.get(tok) {
                            for c in cols.clone() {
                                t[tok][c] = 0.0;
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    attended[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        let out = matvec_rows(&attended, &lw.wo, &lw.bo);
        for i in 0..n {
            for j in 0..d {
                x[i][j] += out[i][j];
            }
        }
        let hidden: Vec<Vec<f64>> = matvec_rows(&norm_rows(&x), &lw.w1, &lw.b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let out = matvec_rows(&hidden, &lw.w2, &lw.b2);
        for i in 0..n {
            for j in 0..d {
                x[i][j] += out[i][j];
            }
        }
        let site: SiteId = format!("{}/L{layer}/residual", cfg.model_id).parse().unwrap();
        if let Some(m) = masks.get(&site) {
            for (tok, row) in x.iter_mut().enumerate() {
                if m.get(tok) {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    let z = norm_rows(&x);
    let pooled: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let class_logits = (0..cfg.classes)
        .map(|c| w.class_b[c] + (0..d).map(|j| pooled[j] * w.class_w[[j, c]]).sum::<f64>())
        .collect();
    let scalar = w.reg_b + (0..d).map(|j| pooled[j] * w.reg_w[j]).sum::<f64>();
    let seg_logits = z
        .iter()
        .map(|r| w.seg_b + (0..d).map(|j| r[j] * w.seg_w[j]).sum::<f64>())
        .collect();
    RefOutput {
        class_logits,
        seg_logits,
        scalar,
    }
}

/// Random masks on 1..=4 random sites, each cell masked with probability 0.4.
pub fn random_masks(rng: &mut ChaCha8Rng, sites: &[SiteId], grid: Dims) -> BTreeMap<SiteId, DenseMask> {
    let n_sites = rng.random_range(1..=4.min(sites.len()));
    sample(rng, sites.len(), n_sites)
        .into_iter()
        .map(|i| {
            let bits = (0..grid.cells()).map(|_| rng.random_bool(0.4)).collect();
            (sites[i].clone(), DenseMask::from_bits(grid, bits).unwrap())
        })
        .collect()
}

// ---------------------------------------------------------------- importance

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with tied ranks averaged.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Mean metric drop from removing each unit, averaged over every subset that contains it.
pub fn exhaustive_marginals(f: &PlantedFixture) -> Vec<f64> {
    let q = f.units.len();
    let table: Vec<f64> = (0..1u32 << q)
        .map(|set| {
            let members: Vec<usize> = (0..q).filter(|i| set >> i & 1 == 1).collect();
            vtcd::eval::masked_metric(&f.units, &members, &f.oracle, &f.videos).unwrap()
        })
        .collect();
    (0..q)
        .map(|i| {
            let with: Vec<u32> = (0..1u32 << q).filter(|s| s >> i & 1 == 1).collect();
            with.iter().map(|&s| table[(s & !(1 << i)) as usize] - table[s as usize]).sum::<f64>() / with.len() as f64
        })
        .collect()
}

// ---------------------------------------------------------------- rosetta

/// Top `ceil(eps * n)` scores, at least one, ties with the cut kept.
pub fn kept_indices(scores: &[f64], epsilon: f64) -> Vec<usize> {
    let n = ((epsilon * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cut = sorted[n - 1];
    (0..scores.len()).filter(|&i| scores[i] >= cut).collect()
}

/// Intersection over union of supports summed over videos; all concepts must share one grid.
pub fn r_score_dense(concepts: &[&vtcd::concepts::Concept], videos: &[String]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for v in videos {
        let masks: Vec<DenseMask> = concepts.iter().map(|c| c.support_for(v).unwrap()).collect();
        for cell in 0..masks[0].dims.cells() {
            let hits = masks.iter().filter(|m| m.get(cell)).count();
            inter += (hits == masks.len()) as usize;
            union += (hits > 0) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every tuple with one kept concept from each of at least two distinct
/// models whose R-score exceeds `delta`, as (concept ids, R).
pub fn brute_force_tuples(models: &[ModelConcepts], epsilon: f64, delta: f64) -> BTreeSet<(Vec<String>, u64)> {
    let kept: Vec<Vec<usize>> = models.iter().map(|m| kept_indices(&m.importance, epsilon)).collect();
    let videos = &models[0].videos;
    let mut out = BTreeSet::new();
    // Each model contributes nothing (0) or its kept concept number i (i + 1).
    let radix: Vec<usize> = kept.iter().map(|k| k.len() + 1).collect();
    let total: usize = radix.iter().product();
    for code in 0..total {
        let mut rest = code;
        let mut chosen = Vec::new();
        for (m, &r) in radix.iter().enumerate() {
            let digit = rest % r;
            rest /= r;
            if digit > 0 {
                chosen.push(&models[m].concepts[kept[m][digit - 1]]);
            }
        }
        if chosen.len() < 2 {
            continue;
        }
        let r = r_score_dense(&chosen, videos);
        if r > delta {
            out.insert((chosen.iter().map(|c| c.id.to_string()).collect(), r.to_bits()));
        }
    }
    out
}

pub fn tuple_set(tuples: &[RosettaTuple]) -> BTreeSet<(Vec<String>, u64)> {
    tuples.iter().map(|t| (t.concept_ids.clone(), t.r_score.to_bits())).collect()
}

// ---------------------------------------------------------------- cli

pub fn vtcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtcd"))
        .args(args)
        .env_remove("VTCD_JOBS")
        .output()
        .unwrap()
}

pub fn ok(args: &[&str]) {
    let out = vtcd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Paths whose bytes differ between two snapshots. `run.json` records the
/// input paths, which differ by construction.
pub fn differing(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| !k.ends_with("run.json") && a.get(*k) != b.get(*k))
        .map(|k| k.to_path_buf())
        .collect()
}

/// Writes four random models as concept stores plus reports; returns the
/// models and the matching `--concepts`/`--report` arguments.
pub fn write_rosetta_inputs(root: &Path) -> (Vec<ModelConcepts>, Vec<String>) {
    let videos: Vec<String> = (0..3).map(|v| format!("clip{v}")).collect();
    let models = random_model_concepts(4, 20, Dims::new(4, 8, 8), &videos, 2).unwrap();
    let mut args = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let dir = root.join(format!("m{i}"));
        let site = m.concepts[0].id.site.clone();
        let n = m.concepts.len();
        let set = ConceptSet {
            site,
            q: n,
            centroids: Array2::zeros((n, 1)),
            weights: Array2::zeros((0, n)),
            assignments: Array2::zeros((0, n)),
            hard_assignment: Vec::new(),
            members: vec![Vec::new(); n],
            objective: 0.0,
            selection: ClusterSelection {
                q: n,
                silhouettes: Vec::new(),
                degenerate: false,
            },
        };
        write_concept_store(dir.join("concepts"), &set, &m.concepts).unwrap();
        let report = ImportanceReport {
            units: m.concepts.iter().map(|c| c.id.to_string()).collect(),
            scores: m.importance.clone(),
            k: 1,
            fraction: 0.5,
            seed: 0,
            baseline_metric: 1.0,
            inclusion_counts: vec![0; n],
            unit: UnitKind::Concept,
            estimator: Estimator::DivideByK,
        };
        let path = dir.join("importance.json");
        report.write(&path).unwrap();
        args.extend(["--concepts".to_string(), dir.join("concepts").display().to_string()]);
        args.extend(["--report".to_string(), path.display().to_string()]);
    }
    (models, args)
}
