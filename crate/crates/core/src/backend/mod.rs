//! The maskable-model contract and its implementations.
//!
//! A backend runs a layered model on one video while zeroing the features of
//! selected cells at selected sites, then scores the prediction against a
//! target. Scores are "higher is better" everywhere.

mod planted;
pub mod protocol;
mod remote;
mod toy;

pub use planted::{ConstantBackend, PlantedOracle};
pub use remote::{serve, spawn_server, RemoteBackend, ServerHandle};
pub use toy::{ToyConfig, ToyLayer, ToyTransformer, ToyWeights};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{BinaryMask, DenseMask, Dims, SiteId};

/// What the metric compares the prediction against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTarget {
    DenseMaskIou { groundtruth: BinaryMask },
    ClassScore { class: usize },
    ScalarRegression { value: f64 },
}

/// Masks to apply during one forward pass; at most one mask per site.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRequest {
    pub video_id: String,
    pub masks: BTreeMap<SiteId, DenseMask>,
    pub target: TaskTarget,
}

impl MaskRequest {
    pub fn unmasked(video_id: impl Into<String>, target: TaskTarget) -> Self {
        MaskRequest {
            video_id: video_id.into(),
            masks: BTreeMap::new(),
            target,
        }
    }

    /// Adds a mask, merging with any mask already present at the site.
    pub fn add_mask(&mut self, site: SiteId, mask: &DenseMask) -> Result<()> {
        match self.masks.get_mut(&site) {
            Some(existing) => existing.union_with(mask),
            None => {
                self.masks.insert(site, mask.clone());
                Ok(())
            }
        }
    }

    /// Checks every mask addresses a known site and matches the model grid.
    pub fn validate(&self, sites: &[SiteId], grid: Dims) -> Result<()> {
        for (site, mask) in &self.masks {
            if !sites.contains(site) {
                return Err(Error::UnknownSite(site.to_string()));
            }
            if mask.dims != grid {
                return Err(Error::Shape(format!("mask for {site} is {}, model grid is {grid}", mask.dims)));
            }
        }
        Ok(())
    }
}

/// Raw model output.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Class logits, per-token segmentation logits and a regression value.
    Heads {
        class_logits: Vec<f64>,
        seg_logits: Vec<f64>,
        scalar: f64,
    },
    Scalar(f64),
    /// Already scored remotely; the metric passes it through.
    Scored(f64),
}

/// A model that can be run with zeroed features at chosen sites.
pub trait ModelBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn sites(&self) -> Vec<SiteId>;

    /// Token grid shared by every site.
    fn grid(&self) -> Dims;

    /// Width of the residual stream.
    fn channels(&self) -> usize;

    fn forward(&self, request: &MaskRequest) -> Result<Prediction>;

    fn metric(&self, prediction: &Prediction, target: &TaskTarget) -> Result<f64>;

    fn evaluate(&self, request: &MaskRequest) -> Result<f64> {
        let prediction = self.forward(request)?;
        self.metric(&prediction, &request.target)
    }
}

macro_rules! forward_backend {
    ($ty:ty) => {
        impl<B: ModelBackend + ?Sized> ModelBackend for $ty {
            fn model_id(&self) -> &str {
                (**self).model_id()
            }
            fn sites(&self) -> Vec<SiteId> {
                (**self).sites()
            }
            fn grid(&self) -> Dims {
                (**self).grid()
            }
            fn channels(&self) -> usize {
                (**self).channels()
            }
            fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
                (**self).forward(request)
            }
            fn metric(&self, prediction: &Prediction, target: &TaskTarget) -> Result<f64> {
                (**self).metric(prediction, target)
            }
            fn evaluate(&self, request: &MaskRequest) -> Result<f64> {
                (**self).evaluate(request)
            }
        }
    };
}

forward_backend!(&B);
forward_backend!(Arc<B>);
forward_backend!(Box<B>);

/// Standard scoring of [`Prediction::Heads`] against any target kind.
pub fn score_heads(prediction: &Prediction, target: &TaskTarget, grid: Dims) -> Result<f64> {
    let (class_logits, seg_logits, scalar) = match prediction {
        Prediction::Heads {
            class_logits,
            seg_logits,
            scalar,
        } => (class_logits, seg_logits, *scalar),
        Prediction::Scored(m) => return Ok(*m),
        Prediction::Scalar(_) => return Err(Error::Backend("scalar prediction cannot be scored by head".into())),
    };
    match target {
        TaskTarget::ClassScore { class } => {
            if *class >= class_logits.len() {
                return Err(Error::InvalidParam(format!(
                    "class {class} out of range for {} classes",
                    class_logits.len()
                )));
            }
            let max = class_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = class_logits.iter().map(|l| (l - max).exp()).sum();
            Ok((class_logits[*class] - max).exp() / z)
        }
        TaskTarget::DenseMaskIou { groundtruth } => {
            let gt = groundtruth.decode()?;
            if gt.dims != grid {
                return Err(Error::Shape(format!("groundtruth {} vs grid {grid}", gt.dims)));
            }
            let pred = DenseMask::from_bits(grid, seg_logits.iter().map(|&l| l > 0.0).collect())?;
            pred.iou(&gt)
        }
        TaskTarget::ScalarRegression { value } => Ok(-(scalar - value).powi(2)),
    }
}

/// Adds fixed masks to every request; pruned heads are modelled this way.
pub struct WithPermanentMasks<B> {
    pub inner: B,
    pub masks: BTreeMap<SiteId, DenseMask>,
}

impl<B: ModelBackend> ModelBackend for WithPermanentMasks<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn sites(&self) -> Vec<SiteId> {
        self.inner.sites()
    }
    fn grid(&self) -> Dims {
        self.inner.grid()
    }
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
        let mut merged = request.clone();
        for (site, mask) in &self.masks {
            merged.add_mask(site.clone(), mask)?;
        }
        self.inner.forward(&merged)
    }
    fn metric(&self, prediction: &Prediction, target: &TaskTarget) -> Result<f64> {
        self.inner.metric(prediction, target)
    }
}
