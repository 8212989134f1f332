use std::collections::BTreeMap;

use super::{MaskRequest, ModelBackend, Prediction, TaskTarget};
use crate::error::{Error, Result};
use crate::store::{BinaryMask, DenseMask, Dims, FeatureVolume, SiteId};

/// Synthetic backend whose output depends only on a known region of channel 0
/// at one residual site:
///
/// ```text
/// metric = clamp(sum of channel-0 values over unmasked region cells / |region|, 0, 1)
/// ```
///
/// Masking `k` region cells of value 1 lowers the metric by exactly `k / |region|`.
pub struct PlantedOracle {
    model_id: String,
    layers: u32,
    site: SiteId,
    grid: Dims,
    channels: usize,
    regions: BTreeMap<String, DenseMask>,
    channel0: BTreeMap<String, Vec<f64>>,
}

impl PlantedOracle {
    /// `volumes` are the features at the designated site, one per video;
    /// `regions` holds one mask per video. The model exposes residual sites
    /// `1..=layers`; only `site_depth` is read.
    pub fn new(
        model_id: impl Into<String>,
        layers: u32,
        site_depth: u32,
        volumes: &[FeatureVolume],
        regions: &[BinaryMask],
    ) -> Result<Self> {
        let model_id = model_id.into();
        if site_depth == 0 || site_depth > layers {
            return Err(Error::InvalidParam(format!("site depth {site_depth} outside 1..={layers}")));
        }
        let site = SiteId::residual(model_id.clone(), site_depth)?;
        let grid = volumes
            .first()
            .map(|v| v.dims)
            .ok_or_else(|| Error::InvalidParam("planted oracle needs at least one video".into()))?;
        let mut channel0 = BTreeMap::new();
        for v in volumes {
            if v.dims != grid {
                return Err(Error::Shape(format!("video {} grid {} vs {grid}", v.video_id, v.dims)));
            }
            channel0.insert(v.video_id.clone(), (0..v.cells()).map(|c| v.get(0, c) as f64).collect());
        }
        let mut region_map = BTreeMap::new();
        for r in regions {
            if !channel0.contains_key(&r.video_id) {
                return Err(Error::UnknownVideo(r.video_id.clone()));
            }
            let dense = r.decode()?;
            if dense.dims != grid {
                return Err(Error::Shape(format!("region grid {} vs {grid}", dense.dims)));
            }
            region_map.insert(r.video_id.clone(), dense);
        }
        if let Some(v) = channel0.keys().find(|v| !region_map.contains_key(*v)) {
            return Err(Error::InvalidParam(format!("no region for video {v}")));
        }
        Ok(PlantedOracle {
            model_id,
            layers,
            site,
            grid,
            channels: volumes[0].channels,
            regions: region_map,
            channel0,
        })
    }

    pub fn site(&self) -> &SiteId {
        &self.site
    }

    pub fn region(&self, video_id: &str) -> Option<&DenseMask> {
        self.regions.get(video_id)
    }
}

impl ModelBackend for PlantedOracle {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn sites(&self) -> Vec<SiteId> {
        (1..=self.layers)
            .map(|l| SiteId::residual(self.model_id.clone(), l).expect("layer >= 1"))
            .collect()
    }

    fn grid(&self) -> Dims {
        self.grid
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
        request.validate(&self.sites(), self.grid)?;
        let region = self
            .regions
            .get(&request.video_id)
            .ok_or_else(|| Error::UnknownVideo(request.video_id.clone()))?;
        let values = &self.channel0[&request.video_id];
        let masked = request.masks.get(&self.site);
        let size = region.count();
        if size == 0 {
            return Ok(Prediction::Scalar(0.0));
        }
        let surviving: f64 = region
            .cells()
            .filter(|&c| !masked.is_some_and(|m| m.get(c)))
            .map(|c| values[c])
            .sum();
        Ok(Prediction::Scalar(surviving / size as f64))
    }

    fn metric(&self, prediction: &Prediction, _target: &TaskTarget) -> Result<f64> {
        match prediction {
            Prediction::Scalar(v) | Prediction::Scored(v) => Ok(v.clamp(0.0, 1.0)),
            Prediction::Heads { .. } => Err(Error::Backend("planted oracle emits scalars".into())),
        }
    }
}

/// A model whose metric ignores every feature.
pub struct ConstantBackend {
    pub model_id: String,
    pub sites: Vec<SiteId>,
    pub grid: Dims,
    pub value: f64,
}

impl ModelBackend for ConstantBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn sites(&self) -> Vec<SiteId> {
        self.sites.clone()
    }
    fn grid(&self) -> Dims {
        self.grid
    }
    fn channels(&self) -> usize {
        1
    }
    fn forward(&self, request: &MaskRequest) -> Result<Prediction> {
        request.validate(&self.sites, self.grid)?;
        Ok(Prediction::Scalar(self.value))
    }
    fn metric(&self, prediction: &Prediction, _target: &TaskTarget) -> Result<f64> {
        match prediction {
            Prediction::Scalar(v) | Prediction::Scored(v) => Ok(*v),
            Prediction::Heads { .. } => Err(Error::Backend("constant backend emits scalars".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(values: f32) -> PlantedOracle {
        let dims = Dims::new(1, 2, 4);
        let site = SiteId::residual("p", 2).unwrap();
        let vol = FeatureVolume::from_fn("v", site, 2, dims, |_, _, _, _| values).unwrap();
        let region = BinaryMask::encode("v", &DenseMask::from_cells(dims, [0, 1, 2, 3]));
        PlantedOracle::new("p", 3, 2, &[vol], &[region]).unwrap()
    }

    fn target() -> TaskTarget {
        TaskTarget::ScalarRegression { value: 0.0 }
    }

    #[test]
    fn unmasked_region_of_ones_scores_one() {
        let o = oracle(1.0);
        assert_eq!(o.evaluate(&MaskRequest::unmasked("v", target())).unwrap(), 1.0);
    }

    #[test]
    fn half_mask_halves_metric() {
        let o = oracle(1.0);
        let mut req = MaskRequest::unmasked("v", target());
        req.add_mask(o.site().clone(), &DenseMask::from_cells(o.grid(), [0, 1, 6])).unwrap();
        assert_eq!(o.evaluate(&req).unwrap(), 0.5);
    }

    #[test]
    fn other_sites_have_no_effect_and_unknown_sites_are_rejected() {
        let o = oracle(1.0);
        let mut req = MaskRequest::unmasked("v", target());
        req.add_mask(SiteId::residual("p", 1).unwrap(), &DenseMask::full(o.grid())).unwrap();
        assert_eq!(o.evaluate(&req).unwrap(), 1.0);
        req.add_mask(SiteId::residual("p", 4).unwrap(), &DenseMask::full(o.grid())).unwrap();
        assert!(matches!(o.evaluate(&req), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn metric_is_clamped() {
        assert_eq!(oracle(3.0).evaluate(&MaskRequest::unmasked("v", target())).unwrap(), 1.0);
        assert_eq!(oracle(-1.0).evaluate(&MaskRequest::unmasked("v", target())).unwrap(), 0.0);
    }
}
