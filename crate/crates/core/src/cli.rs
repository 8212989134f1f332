//! The `vtcd` command line. Each subcommand reads its inputs from files,
//! writes everything under `--out` and records the resolved configuration
//! in `run.json`. Stages compose through those files only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{ModelBackend, RemoteBackend, ToyConfig, ToyTransformer};
use crate::concepts::{build_concepts, load_all_concepts, write_concept_store, CnmfConfig, Concept};
use crate::error::{Error, Result};
use crate::eval::{self, Groundtruth};
use crate::fixtures;
use crate::importance::{self, Estimator, ImportanceReport, SamplingPlan, VideoTarget};
use crate::rosetta::{self, MiningParams, ModelConcepts};
use crate::store::{BinaryMask, Manifest, SiteId};
use crate::tubelets::{extract_tubelets, SlicParams};

/// Seed recorded when the caller gives none.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "vtcd", version, about = "Concept discovery and importance ranking for video models")]
pub struct Cli {
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "vtcd-out")]
    pub out: PathBuf,
    /// Seed for every random choice; defaults to 0 and is always recorded.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap for parallel stages.
    #[arg(long, global = true, env = "VTCD_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment every video into tubelets and cluster them into concepts per site.
    Discover(DiscoverArgs),
    /// Rank concepts by masking random subsets of them.
    Rank(RankArgs),
    /// Rank attention heads and derive a pruning plan.
    Heads(HeadsArgs),
    /// Attribution curves for a concept ranking.
    Curves(CurvesArgs),
    /// Mine concepts shared across models.
    Rosetta(RosettaArgs),
    /// Match concepts against groundtruth masks.
    Validate(ValidateArgs),
    /// Write overlays, toy weights or toy feature volumes.
    Export(ExportArgs),
    /// Probe a remote model server.
    ServeCheck(ServeCheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated site ids; all manifest sites when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sites: Vec<String>,
    #[arg(long, default_value_t = 12)]
    pub segments: usize,
    #[arg(long, default_value_t = 0.1)]
    pub compactness: f64,
    #[arg(long, default_value_t = 10)]
    pub slic_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub min_size: f64,
    #[arg(long, default_value_t = 2)]
    pub q_min: usize,
    #[arg(long, default_value_t = 8)]
    pub q_max: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    DivideByK,
    InclusionNormalized,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::DivideByK => Estimator::DivideByK,
            EstimatorArg::InclusionNormalized => Estimator::InclusionNormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cris,
    Occlusion,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 4000)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value_t = EstimatorArg::DivideByK)]
    pub estimator: EstimatorArg,
}

impl SamplingArgs {
    fn plan(&self, seed: u64) -> SamplingPlan {
        SamplingPlan {
            k: self.k,
            fraction: self.fraction,
            seed,
            estimator: self.estimator.into(),
            ..SamplingPlan::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    /// Backend spec file (JSON).
    #[arg(long)]
    pub backend: PathBuf,
    /// Concept store written by `discover`; planted fixtures bring their own.
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, value_enum, default_value_t = Method::Cris)]
    pub method: Method,
    /// Keep a resumable checkpoint under the output directory.
    #[arg(long)]
    pub checkpoint: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct HeadsArgs {
    #[arg(long)]
    pub backend: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Share of heads kept by the pruning plan.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub keep: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurvesArgs {
    #[arg(long)]
    pub backend: PathBuf,
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    /// Importance report written by `rank`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = eval::CURVE_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RosettaArgs {
    /// One concept store per model, paired in order with `--report`.
    #[arg(long = "concepts", required = true)]
    pub concepts: Vec<PathBuf>,
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.15)]
    pub delta: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub concepts: PathBuf,
    /// JSON object mapping each category to a list of RLE masks.
    #[arg(long)]
    pub groundtruth: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    /// Concept store whose supports are drawn as overlays (needs `--manifest`).
    #[arg(long, requires = "manifest")]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Toy backend spec whose weights and/or feature volumes are written.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long, requires = "backend")]
    pub weights: bool,
    #[arg(long, requires = "backend")]
    pub features: bool,
    /// Pixels per grid cell in overlays.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeCheckArgs {
    #[arg(long)]
    pub endpoint: String,
    /// Expected model id; empty accepts any.
    #[arg(long, default_value = "")]
    pub model_id: String,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
}

/// Which model a run talks to, as stored in a backend spec file. Relative
/// paths inside the file resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Toy {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        fixture: Option<ToyFixtureKind>,
        #[serde(default)]
        config: Option<ToyConfig>,
        #[serde(default)]
        weights: Option<PathBuf>,
        #[serde(default = "default_videos")]
        videos: usize,
        #[serde(default)]
        targets: Option<PathBuf>,
    },
    Planted {
        fixture: PlantedKind,
    },
    Remote {
        endpoint: String,
        #[serde(default)]
        model_id: String,
        #[serde(default = "default_pool")]
        pool: usize,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        targets: PathBuf,
    },
}

fn default_videos() -> usize {
    4
}
fn default_pool() -> usize {
    4
}
fn default_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyFixtureKind {
    Decorative,
    Dependency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedKind {
    /// Three planted concepts covering 50/30/20% of the region plus five nulls.
    Standard,
    /// One planted concept and seven nulls.
    Single,
}

/// Heads the decorative fixture leaves unread.
pub const DECORATIVE_HEADS: [(u32, u32); 4] = [(1, 1), (2, 0), (2, 3), (3, 2)];

/// A backend ready to query, with its evaluation videos.
pub struct LoadedBackend {
    pub backend: Arc<dyn ModelBackend>,
    pub videos: Vec<VideoTarget>,
    /// Set for toy backends.
    pub toy: Option<Arc<ToyTransformer>>,
    /// Concepts a fixture ships with.
    pub concepts: Option<Vec<Concept>>,
}

impl BackendSpec {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(&self, base: &Path) -> Result<LoadedBackend> {
        match self {
            BackendSpec::Planted { fixture } => {
                let f = match fixture {
                    PlantedKind::Standard => fixtures::standard_planted()?,
                    PlantedKind::Single => fixtures::planted_concepts(&[1.0], &[fixtures::PLANTED_DEPTH; 7], 1)?,
                };
                Ok(LoadedBackend {
                    backend: Arc::new(f.oracle),
                    videos: f.videos,
                    toy: None,
                    concepts: Some(f.concepts),
                })
            }
            BackendSpec::Toy {
                seed,
                fixture,
                config,
                weights,
                videos,
                targets,
            } => {
                let (model, default_targets) = match fixture {
                    Some(kind) => {
                        let f = match kind {
                            ToyFixtureKind::Decorative => fixtures::decorative_heads_toy(&DECORATIVE_HEADS, *seed)?,
                            ToyFixtureKind::Dependency => fixtures::planted_dependency_toy(*seed)?,
                        };
                        (f.model, Some(f.videos))
                    }
                    None => {
                        let mut model = match weights {
                            Some(w) => ToyTransformer::import(base.join(w))?,
                            None => ToyTransformer::new(config.clone().unwrap_or_else(|| ToyConfig {
                                seed: *seed,
                                ..ToyConfig::default()
                            }))?,
                        };
                        let cfg = model.config().clone();
                        for v in fixtures::toy_inputs(&cfg, *videos, seed.wrapping_add(1))? {
                            model.add_video(v)?;
                        }
                        (model, None)
                    }
                };
                let videos = match (targets, default_targets) {
                    (Some(t), _) => read_targets(&base.join(t))?,
                    (None, Some(v)) => v,
                    (None, None) => fixtures::fidelity_targets(&model, false)?,
                };
                let model = Arc::new(model);
                Ok(LoadedBackend {
                    backend: model.clone(),
                    videos,
                    toy: Some(model),
                    concepts: None,
                })
            }
            BackendSpec::Remote {
                endpoint,
                model_id,
                pool,
                timeout_ms,
                targets,
            } => {
                let remote = RemoteBackend::connect(endpoint, model_id, *pool, Duration::from_millis(*timeout_ms))?;
                Ok(LoadedBackend {
                    backend: Arc::new(remote),
                    videos: read_targets(&base.join(targets))?,
                    toy: None,
                    concepts: None,
                })
            }
        }
    }
}

fn read_targets(path: &Path) -> Result<Vec<VideoTarget>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_backend(path: &Path) -> Result<(BackendSpec, LoadedBackend)> {
    let spec = BackendSpec::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let loaded = spec.load(base)?;
    Ok((spec, loaded))
}

/// Process exit code for an error: 3 for backend failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_backend() {
        3
    } else {
        2
    }
}

/// Runs a parsed command line, capping rayon at `--jobs` workers.
pub fn run(cli: Cli) -> Result<()> {
    match cli.jobs {
        Some(0) => Err(Error::InvalidParam("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?
            .install(|| dispatch(&cli)),
        None => dispatch(&cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::Discover(a) => discover(a, out, seed),
        Command::Rank(a) => rank(a, out, seed),
        Command::Heads(a) => heads(a, out, seed),
        Command::Curves(a) => curves(a, out, seed),
        Command::Rosetta(a) => rosetta_cmd(a, out, seed),
        Command::Validate(a) => validate(a, out, seed),
        Command::Export(a) => export(a, out, seed),
        Command::ServeCheck(a) => serve_check(a, out, seed),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run(out: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<()> {
    write_json(
        &out.join("run.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
        }),
    )
}

#[derive(Serialize)]
struct TubeletRecord<'a> {
    video_id: &'a str,
    size: usize,
    feature: &'a [f64],
    mask: &'a BinaryMask,
}

fn discover(a: &DiscoverArgs, out: &Path, seed: u64) -> Result<()> {
    let slic = SlicParams {
        n_segments: a.segments,
        compactness: a.compactness,
        max_iters: a.slic_iters,
        min_size_fraction: a.min_size,
    };
    slic.validate()?;
    if a.q_min < 1 || a.q_min > a.q_max {
        return Err(Error::InvalidParam(format!("q range {}..={} is empty", a.q_min, a.q_max)));
    }
    let cnmf = CnmfConfig {
        seed,
        ..CnmfConfig::default()
    };
    let manifest = Manifest::load(&a.manifest)?;
    let sites: Vec<SiteId> = if a.sites.is_empty() {
        manifest.sites.iter().map(|s| s.site.clone()).collect()
    } else {
        a.sites.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    write_run(
        out,
        "discover",
        seed,
        json!({ "args": a, "slic": slic, "cnmf": cnmf, "sites": sites }),
    )?;
    let concept_root = out.join("concepts");
    let tubelet_root = out.join("tubelets");
    fs::create_dir_all(&tubelet_root).map_err(|e| Error::io(&tubelet_root, e))?;
    for site in &sites {
        let volumes = manifest.site_volumes(site)?;
        let per_video = volumes
            .par_iter()
            .map(|v| extract_tubelets(v, &slic))
            .collect::<Result<Vec<_>>>()?;
        let tubelets: Vec<_> = per_video.into_iter().flatten().collect();
        let records: Vec<TubeletRecord> = tubelets
            .iter()
            .map(|t| TubeletRecord {
                video_id: &t.video_id,
                size: t.size,
                feature: &t.feature,
                mask: &t.mask,
            })
            .collect();
        write_json(&tubelet_root.join(format!("{}.json", site.slug())), &records)?;
        let q_max = a.q_max.min(tubelets.len().saturating_sub(1)).max(1);
        let q_min = a.q_min.min(q_max);
        let (set, concepts) = build_concepts(&tubelets, (q_min, q_max), &cnmf)?;
        write_concept_store(&concept_root, &set, &concepts)?;
        println!("{site}: {} tubelets, {} concepts", tubelets.len(), concepts.len());
    }
    Ok(())
}

fn concepts_for(path: Option<&Path>, loaded: &mut LoadedBackend) -> Result<Vec<Concept>> {
    match path {
        Some(p) => load_all_concepts(p),
        None => loaded
            .concepts
            .take()
            .ok_or_else(|| Error::InvalidParam("--concepts is required for this backend".into())),
    }
}

fn rank(a: &RankArgs, out: &Path, seed: u64) -> Result<()> {
    let (spec, mut loaded) = load_backend(&a.backend)?;
    let concepts = concepts_for(a.concepts.as_deref(), &mut loaded)?;
    let plan = a.sampling.plan(seed);
    write_run(out, "rank", seed, json!({ "args": a, "backend": spec, "plan": plan }))?;
    let units = importance::concept_units(&concepts)?;
    let backend = &*loaded.backend;
    let report = match a.method {
        Method::Cris => {
            let ckpt = a.checkpoint.then(|| out.join("rank.checkpoint.json"));
            importance::cris_with_checkpoint(&units, backend, &loaded.videos, &plan, ckpt.as_deref())?
        }
        Method::Occlusion => importance::occlusion(&units, backend, &loaded.videos)?,
    };
    report.write(out.join("importance.json"))?;
    if let Some(best) = report.argmax() {
        println!("top concept {} score {:.6}", report.units[best], report.scores[best]);
    }
    Ok(())
}

fn heads(a: &HeadsArgs, out: &Path, seed: u64) -> Result<()> {
    let (spec, loaded) = load_backend(&a.backend)?;
    let plan = a.sampling.plan(seed);
    write_run(out, "heads", seed, json!({ "args": a, "backend": spec, "plan": plan }))?;
    let backend = &*loaded.backend;
    let report = importance::head_importance(backend, &loaded.videos, &plan)?;
    report.write(out.join("heads.json"))?;
    let prune = eval::prune_plan(&report, a.keep)?;
    prune.write(out.join("prune_plan.json"))?;
    let before = eval::mean_metric(backend, &loaded.videos)?;
    let pruned = prune.apply(backend)?;
    let after = eval::mean_metric(&pruned, &loaded.videos)?;
    write_json(
        &out.join("prune_eval.json"),
        &json!({ "metric_before": before, "metric_after": after, "dropped": prune.drop }),
    )?;
    println!("kept {} of {} heads, metric {before:.6} -> {after:.6}", prune.keep.len(), prune.ranking.len());
    Ok(())
}

fn curves(a: &CurvesArgs, out: &Path, seed: u64) -> Result<()> {
    let (spec, mut loaded) = load_backend(&a.backend)?;
    let concepts = concepts_for(a.concepts.as_deref(), &mut loaded)?;
    write_run(out, "curves", seed, json!({ "args": a, "backend": spec }))?;
    let report = ImportanceReport::read(&a.report)?;
    let units = importance::concept_units(&concepts)?;
    if report.units != units.iter().map(|u| u.id.clone()).collect::<Vec<_>>() {
        return Err(Error::InvalidParam("report does not rank these concepts".into()));
    }
    let c = eval::attribution_curves(&units, &report, &*loaded.backend, &loaded.videos, a.steps, seed)?;
    c.positive.write_csv(out.join("positive.csv"))?;
    c.negative.write_csv(out.join("negative.csv"))?;
    c.random.write_csv(out.join("random.csv"))?;
    write_json(
        &out.join("auc.json"),
        &json!({ "positive": c.positive.auc, "negative": c.negative.auc, "random": c.random.auc }),
    )?;
    println!(
        "AUC positive {:.4} random {:.4} negative {:.4}",
        c.positive.auc, c.random.auc, c.negative.auc
    );
    Ok(())
}

fn rosetta_cmd(a: &RosettaArgs, out: &Path, seed: u64) -> Result<()> {
    if a.concepts.len() != a.reports.len() {
        return Err(Error::InvalidParam(format!(
            "{} concept stores but {} reports",
            a.concepts.len(),
            a.reports.len()
        )));
    }
    let params = MiningParams {
        epsilon: a.epsilon,
        delta: a.delta,
    };
    params.validate()?;
    write_run(out, "rosetta", seed, json!({ "args": a, "params": params }))?;
    let mut models = Vec::with_capacity(a.concepts.len());
    for (dir, report_path) in a.concepts.iter().zip(&a.reports) {
        let concepts = load_all_concepts(dir)?;
        let report = ImportanceReport::read(report_path)?;
        let ids: Vec<String> = concepts.iter().map(|c| c.id.to_string()).collect();
        if ids != report.units {
            return Err(Error::InvalidParam(format!(
                "{} does not rank the concepts in {}",
                report_path.display(),
                dir.display()
            )));
        }
        let model_id = concepts
            .first()
            .map(|c| c.id.site.model_id.clone())
            .ok_or_else(|| Error::InvalidParam(format!("{} holds no concepts", dir.display())))?;
        let mut videos: Vec<String> = concepts.iter().flat_map(|c| c.support.keys().cloned()).collect();
        videos.sort();
        videos.dedup();
        models.push(ModelConcepts {
            model_id,
            videos,
            concepts,
            importance: report.scores,
        });
    }
    let tuples = rosetta::mine(&models, &params)?;
    rosetta::write_tuples(&tuples, out.join("tuples.json"))?;
    println!("{} tuples", tuples.len());
    for t in tuples.iter().take(10) {
        println!("d={} R={:.1} {}", t.d, 100.0 * t.r_score, t.concept_ids.join(" "));
    }
    Ok(())
}

fn validate(a: &ValidateArgs, out: &Path, seed: u64) -> Result<()> {
    write_run(out, "validate", seed, json!({ "args": a }))?;
    let concepts = load_all_concepts(&a.concepts)?;
    let text = fs::read_to_string(&a.groundtruth).map_err(|e| Error::io(&a.groundtruth, e))?;
    let raw: BTreeMap<String, Vec<BinaryMask>> = serde_json::from_str(&text)?;
    let mut gt: BTreeMap<String, Groundtruth> = BTreeMap::new();
    for (category, masks) in raw {
        let mut per_video = Groundtruth::new();
        for m in masks {
            per_video.insert(m.video_id.clone(), m.decode()?);
        }
        gt.insert(category, per_video);
    }
    let matches = eval::concept_gt_miou(&concepts, &gt)?;
    write_json(&out.join("miou.json"), &matches)?;
    for m in &matches {
        println!("{}: {} mIoU {:.4}", m.category, m.concept, m.miou);
    }
    Ok(())
}

fn export(a: &ExportArgs, out: &Path, seed: u64) -> Result<()> {
    if a.concepts.is_none() && !a.weights && !a.features {
        return Err(Error::InvalidParam(
            "nothing to export: give --concepts with --manifest, or --weights/--features with --backend".into(),
        ));
    }
    write_run(out, "export", seed, json!({ "args": a }))?;
    if let (Some(dir), Some(manifest)) = (&a.concepts, &a.manifest) {
        let concepts = load_all_concepts(dir)?;
        let manifest = Manifest::load(manifest)?;
        let mut written = 0usize;
        for c in &concepts {
            let site_dir = out.join("overlays").join(c.id.site.slug());
            fs::create_dir_all(&site_dir).map_err(|e| Error::io(&site_dir, e))?;
            for video in c.support.keys() {
                let vi = manifest
                    .video_ids
                    .iter()
                    .position(|v| v == video)
                    .ok_or_else(|| Error::UnknownVideo(video.clone()))?;
                let volume = manifest.load_volume(vi, &c.id.site)?;
                let support = c.support_for(video)?;
                for t in 0..c.dims.t {
                    let name = format!("c{:03}_{video}_t{t:02}.ppm", c.id.index);
                    eval::write_overlay_ppm(&volume, &support, t, a.scale, site_dir.join(name))?;
                    written += 1;
                }
            }
        }
        println!("{written} overlays");
    }
    if a.weights || a.features {
        let path = a.backend.as_ref().expect("clap enforces --backend");
        let (_, loaded) = load_backend(path)?;
        let toy = loaded
            .toy
            .ok_or_else(|| Error::InvalidParam("weights and features export needs a toy backend".into()))?;
        if a.weights {
            toy.export(out.join("weights.json"))?;
        }
        if a.features {
            let mut volumes = Vec::new();
            for v in toy.video_ids() {
                volumes.extend(toy.site_features(&v)?);
            }
            Manifest::write_dataset(out.join("features"), &volumes)?;
            write_json(&out.join("features").join("targets.json"), &loaded.videos)?;
        }
    }
    Ok(())
}

fn serve_check(a: &ServeCheckArgs, out: &Path, seed: u64) -> Result<()> {
    write_run(out, "serve-check", seed, json!({ "args": a }))?;
    let remote = RemoteBackend::connect(&a.endpoint, &a.model_id, 1, Duration::from_millis(a.timeout_ms))?;
    let sites: Vec<String> = remote.sites().iter().map(|s| s.to_string()).collect();
    let grid = remote.grid();
    write_json(
        &out.join("handshake.json"),
        &json!({
            "model_id": remote.model_id(),
            "sites": sites,
            "grid": grid,
            "channels": remote.channels(),
        }),
    )?;
    println!("{} at {}: {} sites, grid {grid}", remote.model_id(), a.endpoint, sites.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_round_trips_with_defaults() {
        let spec: BackendSpec = serde_json::from_str(r#"{"kind":"remote","endpoint":"h:1","targets":"t.json"}"#).unwrap();
        match &spec {
            BackendSpec::Remote { pool, timeout_ms, .. } => assert_eq!((*pool, *timeout_ms), (4, 30_000)),
            other => panic!("{other:?}"),
        }
        let back: BackendSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn exit_codes_split_backend_from_config() {
        assert_eq!(exit_code(&Error::Transport("x".into())), 3);
        assert_eq!(exit_code(&Error::InvalidParam("x".into())), 2);
    }

    #[test]
    fn cli_parses_rank_defaults() {
        let cli = Cli::try_parse_from(["vtcd", "rank", "--backend", "b.json", "--out", "o"]).unwrap();
        let Command::Rank(a) = cli.command else { panic!() };
        assert_eq!((a.sampling.k, a.sampling.fraction), (4000, 0.5));
    }
}
