use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dims;
use crate::error::{Error, Result};

/// Run-length encoded boolean grid over `T' x H' x W'`.
///
/// Runs alternate starting with a run of `false` cells, which may be empty;
/// every later run is non-empty. That makes the encoding canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub video_id: String,
    pub dims: Dims,
    runs: Vec<u32>,
}

impl BinaryMask {
    pub fn from_runs(video_id: impl Into<String>, dims: Dims, runs: Vec<u32>) -> Result<Self> {
        validate_runs(dims, &runs)?;
        Ok(BinaryMask {
            video_id: video_id.into(),
            dims,
            runs,
        })
    }

    pub fn encode(video_id: impl Into<String>, grid: &DenseMask) -> Self {
        BinaryMask {
            video_id: video_id.into(),
            dims: grid.dims,
            runs: encode_runs(&grid.bits),
        }
    }

    pub fn decode(&self) -> Result<DenseMask> {
        validate_runs(self.dims, &self.runs)?;
        let mut bits = Vec::with_capacity(self.dims.cells());
        let mut value = false;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Ok(DenseMask { dims: self.dims, bits })
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    /// Number of set cells, computed from the runs.
    pub fn count(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }
}

fn encode_runs(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn validate_runs(dims: Dims, runs: &[u32]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Rle("no runs".into()));
    }
    if let Some(i) = runs.iter().skip(1).position(|&r| r == 0) {
        return Err(Error::Rle(format!("run {} is empty", i + 1)));
    }
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != dims.cells() as u64 {
        return Err(Error::Rle(format!("runs sum to {total}, grid {dims} has {} cells", dims.cells())));
    }
    Ok(())
}

/// Dense boolean grid used for set arithmetic on supports.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DenseMask {
    pub dims: Dims,
    bits: Vec<bool>,
}

impl DenseMask {
    pub fn empty(dims: Dims) -> Self {
        DenseMask {
            dims,
            bits: vec![false; dims.cells()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        DenseMask {
            dims,
            bits: vec![true; dims.cells()],
        }
    }

    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.cells() {
            return Err(Error::Shape(format!("{} bits for grid {dims}", bits.len())));
        }
        Ok(DenseMask { dims, bits })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let bits = (0..dims.cells())
            .map(|i| {
                let (t, h, w) = dims.coords(i);
                f(t, h, w)
            })
            .collect();
        DenseMask { dims, bits }
    }

    pub fn from_cells(dims: Dims, cells: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(dims);
        for c in cells {
            m.bits[c] = true;
        }
        m
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, cell: usize) -> bool {
        self.bits[cell]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, value: bool) {
        self.bits[cell] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    fn check_dims(&self, other: &DenseMask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("mask grids differ: {} vs {}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &DenseMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersect_with(&mut self, other: &DenseMask) -> Result<()> {
        self.check_dims(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= b;
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &DenseMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn union_count(&self, other: &DenseMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count())
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &DenseMask) -> Result<f64> {
        let inter = self.intersection_count(other)?;
        let union = self.union_count(other)?;
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Nearest-neighbour resampling onto `target` (cell centres map to source cells).
    pub fn resample(&self, target: Dims) -> DenseMask {
        if target == self.dims {
            return self.clone();
        }
        let src = self.dims;
        let map = |i: usize, n_dst: usize, n_src: usize| (((2 * i + 1) * n_src) / (2 * n_dst)).min(n_src - 1);
        DenseMask::from_fn(target, |t, h, w| {
            self.bits[src.index(map(t, target.t, src.t), map(h, target.h, src.h), map(w, target.w, src.w))]
        })
    }

    /// Frame `t` as a `1 x H' x W'` mask.
    pub fn frame(&self, t: usize) -> DenseMask {
        let dims = Dims::new(1, self.dims.h, self.dims.w);
        DenseMask::from_fn(dims, |_, h, w| self.bits[self.dims.index(t, h, w)])
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    video_id: String,
    dims: [usize; 3],
    runs: Vec<u32>,
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = MaskFile {
        video_id: mask.video_id.clone(),
        dims: mask.dims.as_array(),
        runs: mask.runs.clone(),
    };
    fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: MaskFile = serde_json::from_slice(&bytes)?;
    BinaryMask::from_runs(file.video_id, Dims::new(file.dims[0], file.dims[1], file.dims[2]), file.runs)
}
