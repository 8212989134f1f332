use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{score_heads, MaskRequest, ModelBackend, Prediction, TaskTarget};
use crate::error::{Error, Result};
use crate::store::{DenseMask, Dims, Facet, FeatureVolume, SiteId};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub model_id: String,
    pub layers: u32,
    pub heads: u32,
    pub dim: usize,
    /// Channels of the input patch volumes.
    pub in_channels: usize,
    pub classes: usize,
    pub grid: Dims,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            model_id: "toy".into(),
            layers: 3,
            heads: 4,
            dim: 32,
            in_channels: 4,
            classes: 4,
            grid: Dims::new(2, 4, 4),
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.layers == 0 || self.heads == 0 {
            return bad("toy model needs at least one layer and one head".into());
        }
        if self.dim == 0 || self.dim % self.heads as usize != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.in_channels == 0 || self.classes == 0 {
            return bad("in_channels and classes must be positive".into());
        }
        if self.grid.cells() == 0 {
            return bad(format!("empty grid {}", self.grid));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads as usize
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.dim
    }
}

/// Parameters of one pre-norm block. Projections act on row vectors
/// (`x · W`); head `j` owns columns `j*dh..(j+1)*dh` of `wq`, `wk`, `wv`
/// and the same rows of `wo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayer {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWeights {
    pub embed: Array2<f64>,
    pub embed_bias: Array1<f64>,
    pub layers: Vec<ToyLayer>,
    pub class_w: Array2<f64>,
    pub class_b: Array1<f64>,
    pub seg_w: Array1<f64>,
    pub seg_b: f64,
    pub reg_w: Array1<f64>,
    pub reg_b: f64,
}

impl ToyWeights {
    /// Every parameter drawn from N(0, 0.02) in declaration order.
    pub fn random(config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng));
        let d = config.dim;
        let hid = config.mlp_hidden();
        let embed = mat(config.in_channels, d);
        let embed_bias = mat(1, d).remove_axis(Axis(0));
        let mut layers = Vec::with_capacity(config.layers as usize);
        for _ in 0..config.layers {
            layers.push(ToyLayer {
                wq: mat(d, d),
                bq: mat(1, d).remove_axis(Axis(0)),
                wk: mat(d, d),
                bk: mat(1, d).remove_axis(Axis(0)),
                wv: mat(d, d),
                bv: mat(1, d).remove_axis(Axis(0)),
                wo: mat(d, d),
                bo: mat(1, d).remove_axis(Axis(0)),
                w1: mat(d, hid),
                b1: mat(1, hid).remove_axis(Axis(0)),
                w2: mat(hid, d),
                b2: mat(1, d).remove_axis(Axis(0)),
            });
        }
        let class_w = mat(d, config.classes);
        let class_b = mat(1, config.classes).remove_axis(Axis(0));
        let seg_w = mat(1, d).remove_axis(Axis(0));
        let seg_b = mat(1, 1)[[0, 0]];
        let reg_w = mat(1, d).remove_axis(Axis(0));
        let reg_b = mat(1, 1)[[0, 0]];
        Ok(ToyWeights {
            embed,
            embed_bias,
            layers,
            class_w,
            class_b,
            seg_w,
            seg_b,
            reg_w,
            reg_b,
        })
    }

    fn check(&self, config: &ToyConfig) -> Result<()> {
        let d = config.dim;
        let hid = config.mlp_hidden();
        let mut ok = self.embed.dim() == (config.in_channels, d)
            && self.embed_bias.len() == d
            && self.layers.len() == config.layers as usize
            && self.class_w.dim() == (d, config.classes)
            && self.class_b.len() == config.classes
            && self.seg_w.len() == d
            && self.reg_w.len() == d;
        for l in &self.layers {
            ok &= [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|w| w.dim() == (d, d))
                && [&l.bq, &l.bk, &l.bv, &l.bo, &l.b2].iter().all(|b| b.len() == d)
                && l.w1.dim() == (d, hid)
                && l.b1.len() == hid
                && l.w2.dim() == (hid, d);
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("toy weights do not match config".into()))
        }
    }
}

/// Weight file written by [`ToyTransformer::export`]; the reference server
/// loads the same JSON.
#[derive(Serialize, Deserialize)]
struct ToyExport {
    format: String,
    config: ToyConfig,
    weights: ToyWeights,
}

const EXPORT_FORMAT: &str = "vtcd-toy-v1";

/// Deterministic pre-norm video transformer over `T'·H'·W'` tokens.
///
/// Per layer: `x += Attn(LN(x))`, `x += MLP(LN(x))`, then the residual site.
/// Positions use a fixed sinusoidal code on the flat token index, LayerNorm
/// has no affine parameters and GELU is the tanh approximation. The pooled
/// final representation feeds class and regression heads; each token feeds a
/// segmentation logit.
pub struct ToyTransformer {
    config: ToyConfig,
    pub weights: ToyWeights,
    positions: Array2<f64>,
    videos: BTreeMap<String, FeatureVolume>,
}

impl ToyTransformer {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let weights = ToyWeights::random(&config)?;
        Self::with_weights(config, weights)
    }

    pub fn with_weights(config: ToyConfig, weights: ToyWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        let positions = sinusoidal(config.grid.cells(), config.dim);
        Ok(ToyTransformer {
            config,
            weights,
            positions,
            videos: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn positions(&self) -> &Array2<f64> {
        &self.positions
    }

    /// Registers an input video (`in_channels` x grid patch features).
    pub fn add_video(&mut self, video: FeatureVolume) -> Result<()> {
        if video.channels != self.config.in_channels || video.dims != self.config.grid {
            return Err(Error::Shape(format!(
                "video {} is {}x{}, model expects {}x{}",
                video.video_id, video.channels, video.dims, self.config.in_channels, self.config.grid
            )));
        }
        self.videos.insert(video.video_id.clone(), video);
        Ok(())
    }

    pub fn video(&self, video_id: &str) -> Result<&FeatureVolume> {
        self.videos.get(video_id).ok_or_else(|| Error::UnknownVideo(video_id.to_string()))
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.keys().cloned().collect()
    }

    /// Unmasked features at every site for one video, in [`ModelBackend::sites`] order.
    pub fn site_features(&self, video_id: &str) -> Result<Vec<FeatureVolume>> {
        let mut out = Vec::new();
        self.run(self.video(video_id)?, &BTreeMap::new(), Some(&mut out))?;
        Ok(out)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = ToyExport {
            format: EXPORT_FORMAT.into(),
            config: self.config.clone(),
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ToyExport = serde_json::from_str(&text)?;
        if doc.format != EXPORT_FORMAT {
            return Err(Error::InvalidParam(format!("unknown weight format {:?}", doc.format)));
        }
        Self::with_weights(doc.config, doc.weights)
    }

    fn site(&self, layer: u32, head: Option<u32>, facet: Facet) -> SiteId {
        SiteId {
            model_id: self.config.model_id.clone(),
            layer,
            head,
            facet,
        }
    }

    fn capture(&self, out: &mut Vec<FeatureVolume>, video: &str, site: SiteId, rows: ndarray::ArrayView2<f64>) -> Result<()> {
        let (n, c) = rows.dim();
        let mut data = vec![0f32; n * c];
        for ((tok, ch), v) in rows.indexed_iter() {
            data[ch * n + tok] = *v as f32;
        }
        out.push(FeatureVolume::new(video, site, c, self.config.grid, data)?);
        Ok(())
    }

    fn run(
        &self,
        video: &FeatureVolume,
        masks: &BTreeMap<SiteId, DenseMask>,
        mut capture: Option<&mut Vec<FeatureVolume>>,
    ) -> Result<Prediction> {
        let cfg = &self.config;
        let n = cfg.grid.cells();
        let dh = cfg.head_dim();
        let w = &self.weights;

        let input = Array2::from_shape_fn((n, cfg.in_channels), |(tok, c)| video.get(c, tok) as f64);
        let mut x = input.dot(&w.embed) + &w.embed_bias + &self.positions;

        for (li, lw) in w.layers.iter().enumerate() {
            let layer = li as u32 + 1;
            let h = layer_norm(&x);
            let mut q = h.dot(&lw.wq) + &lw.bq;
            let mut k = h.dot(&lw.wk) + &lw.bk;
            let mut v = h.dot(&lw.wv) + &lw.bv;
            let mut attended = Array2::<f64>::zeros((n, cfg.dim));
            for head in 0..cfg.heads {
                let cols = s![.., head as usize * dh..(head as usize + 1) * dh];
                for (facet, t) in [(Facet::Query, &mut q), (Facet::Key, &mut k), (Facet::Value, &mut v)] {
                    let site = self.site(layer, Some(head), facet);
                    if let Some(m) = masks.get(&site) {
                        for tok in m.cells() {
                            t.slice_mut(s![tok, head as usize * dh..(head as usize + 1) * dh]).fill(0.0);
                        }
                    }
                    if let Some(out) = capture.as_deref_mut() {
                        self.capture(out, &video.video_id, site, t.slice(cols))?;
                    }
                }
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t()) / (dh as f64).sqrt();
                for mut row in scores.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|s| (s - max).exp());
                    let z = row.sum();
                    row /= z;
                }
                attended.slice_mut(cols).assign(&scores.dot(&vh));
            }
            x = x + attended.dot(&lw.wo) + &lw.bo;
            let hidden = (layer_norm(&x).dot(&lw.w1) + &lw.b1).mapv(gelu);
            x = x + hidden.dot(&lw.w2) + &lw.b2;

            let site = self.site(layer, None, Facet::Residual);
            if let Some(m) = masks.get(&site) {
                for tok in m.cells() {
                    x.row_mut(tok).fill(0.0);
                }
            }
            if let Some(out) = capture.as_deref_mut() {
                self.capture(out, &video.video_id, site, x.view())?;
            }
        }

        let z = layer_norm(&x);
        let pooled = z.mean_axis(Axis(0)).expect("non-empty grid");
        let class_logits = (pooled.dot(&w.class_w) + &w.class_b).to_vec();
        let scalar = pooled.dot(&w.reg_w) + w.reg_b;
        let seg_logits = z.dot(&w.seg_w).mapv(|l| l + w.seg_b).to_vec();
        Ok(Prediction::Heads {
            class_logits,
            seg_logits,
            scalar,
        })
    }
}

impl ModelBackend for ToyTransformer {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn sites(&self) -> Vec<SiteId> {
        let mut sites = Vec::new();
        for layer in 1..=self.config.layers {
            for head in 0..self.config.heads {
                for facet in [Facet::Query, Facet::Key, Facet::Value] {
                    sites.push(self.site(layer, Some(head), facet));
                }
            }
            sites.push(self.site(layer, None, Facet::Residual));
        }
        sites
    }

    fn grid(&self) -> Dims {
        self.config.grid
    }

    fn channels(&self) -> usize {
        self.config.dim
    }

    fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
        request.validate(&self.sites(), self.config.grid)?;
        self.run(self.video(&request.video_id)?, &request.masks, None)
    }

    fn metric(&self, prediction: &Prediction, target: &TaskTarget) -> Result<f64> {
        score_heads(prediction, target, self.config.grid)
    }
}

/// `pe[n, 2i] = sin(n / 10000^(2i/d))`, `pe[n, 2i+1] = cos(..)`.
pub(crate) fn sinusoidal(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let (mean, var) = moments(row.view());
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn moments(row: ArrayView1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyTransformer {
        let cfg = ToyConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            in_channels: 3,
            classes: 3,
            grid: Dims::new(1, 2, 3),
            ..ToyConfig::default()
        };
        let mut m = ToyTransformer::new(cfg).unwrap();
        let site = SiteId::residual("input", 1).unwrap();
        m.add_video(FeatureVolume::from_fn("v", site.clone(), 3, Dims::new(1, 2, 3), |c, _, h, w| (c + h * 3 + w) as f32 * 0.1).unwrap())
            .unwrap();
        m.add_video(FeatureVolume::from_fn("zero", site, 3, Dims::new(1, 2, 3), |_, _, _, _| 0.0).unwrap())
            .unwrap();
        m
    }

    fn target() -> TaskTarget {
        TaskTarget::ClassScore { class: 0 }
    }

    #[test]
    fn config_rejects_indivisible_dim() {
        let cfg = ToyConfig {
            dim: 10,
            heads: 3,
            ..ToyConfig::default()
        };
        assert!(ToyTransformer::new(cfg).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let req = MaskRequest::unmasked("zero", target());
        assert_eq!(m.forward(&req).unwrap(), m.forward(&req).unwrap());
        let again = model();
        assert_eq!(m.forward(&req).unwrap(), again.forward(&req).unwrap());
    }

    #[test]
    fn full_residual_mask_leaves_only_head_biases() {
        let m = model();
        let mut req = MaskRequest::unmasked("v", target());
        for site in m.sites().into_iter().filter(|s| s.facet == Facet::Residual) {
            req.add_mask(site, &DenseMask::full(m.grid())).unwrap();
        }
        let Prediction::Heads {
            class_logits,
            seg_logits,
            scalar,
        } = m.forward(&req).unwrap()
        else {
            panic!("toy emits heads");
        };
        assert_eq!(class_logits, m.weights.class_b.to_vec());
        assert_eq!(scalar, m.weights.reg_b);
        assert!(seg_logits.iter().all(|&l| l == m.weights.seg_b));
    }

    #[test]
    fn masking_is_idempotent_and_local() {
        let m = model();
        let site = SiteId::attention("toy", 1, 1, Facet::Key).unwrap();
        let mask = DenseMask::from_cells(m.grid(), [0, 4]);
        let mut once = MaskRequest::unmasked("v", target());
        once.add_mask(site.clone(), &mask).unwrap();
        let mut twice = once.clone();
        twice.add_mask(site, &mask).unwrap();
        assert_eq!(m.forward(&once).unwrap(), m.forward(&twice).unwrap());
        assert_ne!(m.forward(&once).unwrap(), m.forward(&MaskRequest::unmasked("v", target())).unwrap());

        let mut unknown = MaskRequest::unmasked("v", target());
        unknown.add_mask(SiteId::attention("toy", 1, 2, Facet::Key).unwrap(), &mask).unwrap();
        assert!(matches!(m.forward(&unknown), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn site_features_match_site_list() {
        let m = model();
        let feats = m.site_features("v").unwrap();
        let sites: Vec<_> = feats.iter().map(|f| f.site.clone()).collect();
        assert_eq!(sites, m.sites());
        assert_eq!(feats[0].channels, 4);
        assert_eq!(feats.last().unwrap().channels, 8);
    }

    #[test]
    fn export_round_trips() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        m.export(&path).unwrap();
        let back = ToyTransformer::import(&path).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158808).abs() < 1e-6);
    }
}
