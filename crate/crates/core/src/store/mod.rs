//! Feature volumes, binary masks and their on-disk formats.
//!
//! Volume files are little-endian binary:
//!
//! ```text
//! 0..4    magic "VTCD"
//! 4..8    version u32 = 1
//! 8       dtype u8 = 0 (f32)
//! 9       rank u8 = 4
//! 10..16  reserved, zero
//! 16..48  shape: 4 x u64 (C, T', H', W')
//! 48..    C*T'*H'*W' x f32, row-major (W' fastest)
//! ```
//!
//! Masks are stored as run-length encoded JSON, datasets as a JSON manifest.

mod manifest;
mod mask;
mod volume;

pub use manifest::{Manifest, SiteEntry};
pub use mask::{read_mask, write_mask, BinaryMask, DenseMask};
pub use volume::{read_volume, write_volume, FeatureVolume};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tensor of a layer a site addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Key,
    Query,
    Value,
    Residual,
}

impl Facet {
    pub fn is_attention(self) -> bool {
        !matches!(self, Facet::Residual)
    }

    fn as_str(self) -> &'static str {
        match self {
            Facet::Key => "key",
            Facet::Query => "query",
            Facet::Value => "value",
            Facet::Residual => "residual",
        }
    }
}

/// A maskable location inside a model: `(layer, head, facet)` for attention
/// tensors, `(layer, residual)` for the residual stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub model_id: String,
    pub layer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<u32>,
    pub facet: Facet,
}

impl SiteId {
    pub fn attention(model_id: impl Into<String>, layer: u32, head: u32, facet: Facet) -> Result<Self> {
        let site = SiteId {
            model_id: model_id.into(),
            layer,
            head: Some(head),
            facet,
        };
        site.validate()?;
        Ok(site)
    }

    pub fn residual(model_id: impl Into<String>, layer: u32) -> Result<Self> {
        let site = SiteId {
            model_id: model_id.into(),
            layer,
            head: None,
            facet: Facet::Residual,
        };
        site.validate()?;
        Ok(site)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer < 1 {
            return Err(Error::Site(format!("{self}: layers are numbered from 1")));
        }
        match (self.facet.is_attention(), self.head) {
            (true, None) => Err(Error::Site(format!("{self}: attention facet requires a head"))),
            (false, Some(_)) => Err(Error::Site(format!("{self}: residual sites carry no head"))),
            _ => Ok(()),
        }
    }

    /// Filesystem-safe rendering, e.g. `toy.L3.H0.key`.
    pub fn slug(&self) -> String {
        let model: String = self
            .model_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        match self.head {
            Some(h) => format!("{model}.L{}.H{h}.{}", self.layer, self.facet.as_str()),
            None => format!("{model}.L{}.{}", self.layer, self.facet.as_str()),
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "{}/L{}/H{}/{}", self.model_id, self.layer, h, self.facet.as_str()),
            None => write!(f, "{}/L{}/{}", self.model_id, self.layer, self.facet.as_str()),
        }
    }
}

impl FromStr for SiteId {
    type Err = Error;

    /// Parses the `Display` form: `model/L3/H0/key` or `model/L3/residual`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || Error::Site(format!("cannot parse site {s:?}"));
        let layer_of = |p: &str| p.strip_prefix('L').and_then(|n| n.parse::<u32>().ok()).ok_or_else(bad);
        let facet_of = |p: &str| match p {
            "key" => Ok(Facet::Key),
            "query" => Ok(Facet::Query),
            "value" => Ok(Facet::Value),
            "residual" => Ok(Facet::Residual),
            _ => Err(bad()),
        };
        let site = match parts.as_slice() {
            [model, layer, facet] => SiteId {
                model_id: model.to_string(),
                layer: layer_of(layer)?,
                head: None,
                facet: facet_of(facet)?,
            },
            [model, layer, head, facet] => SiteId {
                model_id: model.to_string(),
                layer: layer_of(layer)?,
                head: Some(head.strip_prefix('H').and_then(|n| n.parse().ok()).ok_or_else(bad)?),
                facet: facet_of(facet)?,
            },
            _ => return Err(bad()),
        };
        site.validate()?;
        Ok(site)
    }
}

/// Spatiotemporal grid extent `(T', H', W')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Dims { t, h, w }
    }

    pub const fn cells(&self) -> usize {
        self.t * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let w = idx % self.w;
        let h = (idx / self.w) % self.h;
        let t = idx / (self.w * self.h);
        (t, h, w)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// Face-adjacent (6-connected) neighbours of a cell.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (t, h, w) = self.coords(idx);
        let mut out = [usize::MAX; 6];
        if t > 0 {
            out[0] = self.index(t - 1, h, w);
        }
        if t + 1 < self.t {
            out[1] = self.index(t + 1, h, w);
        }
        if h > 0 {
            out[2] = self.index(t, h - 1, w);
        }
        if h + 1 < self.h {
            out[3] = self.index(t, h + 1, w);
        }
        if w > 0 {
            out[4] = self.index(t, h, w - 1);
        }
        if w + 1 < self.w {
            out[5] = self.index(t, h, w + 1);
        }
        out.into_iter().filter(|&n| n != usize::MAX)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}
