use std::fs;
use std::path::Path;

use super::{Dims, SiteId};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VTCD";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const RANK: u8 = 4;
const HEADER_LEN: usize = 16 + 4 * 8;

/// One video's features at one site: a `C x T' x H' x W'` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub video_id: String,
    pub site: SiteId,
    pub channels: usize,
    pub dims: Dims,
    data: Vec<f32>,
}

impl FeatureVolume {
    pub fn new(video_id: impl Into<String>, site: SiteId, channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.t == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::Shape(format!("empty extent C={channels} dims={dims}")));
        }
        let expected = channels
            .checked_mul(dims.cells())
            .ok_or_else(|| Error::ShapeOverflow(vec![channels as u64, dims.t as u64, dims.h as u64, dims.w as u64]))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data holds {} values, shape {channels}x{dims} needs {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FeatureVolume {
            video_id: video_id.into(),
            site,
            channels,
            dims,
            data,
        })
    }

    /// Builds a volume by evaluating `f(channel, t, h, w)` at every entry.
    pub fn from_fn(
        video_id: impl Into<String>,
        site: SiteId,
        channels: usize,
        dims: Dims,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * dims.cells());
        for c in 0..channels {
            for t in 0..dims.t {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(c, t, h, w));
                    }
                }
            }
        }
        Self::new(video_id, site, channels, dims, data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cells(&self) -> usize {
        self.dims.cells()
    }

    #[inline]
    pub fn get(&self, channel: usize, cell: usize) -> f32 {
        self.data[channel * self.dims.cells() + cell]
    }

    /// Channel vector at one cell.
    pub fn cell_vector(&self, cell: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, cell)).collect()
    }

    /// Cell-major copy: `cells x channels`, as `f64`.
    pub fn cell_major(&self) -> Vec<f64> {
        let n = self.cells();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            let plane = &self.data[c * n..(c + 1) * n];
            for (cell, &v) in plane.iter().enumerate() {
                out[cell * self.channels + c] = v as f64;
            }
        }
        out
    }
}

/// Writes the volume grid in the binary layout documented on [`crate::store`].
pub fn write_volume(volume: &FeatureVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = volume.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    fs::write(path, encode(volume)).map_err(|e| Error::io(path, e))
}

fn encode(volume: &FeatureVolume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * volume.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(RANK);
    buf.extend_from_slice(&[0u8; 6]);
    for d in [volume.channels, volume.dims.t, volume.dims.h, volume.dims.w] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &volume.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Reads a volume file; the caller supplies the identity the file does not carry.
pub fn read_volume(path: impl AsRef<Path>, video_id: impl Into<String>, site: SiteId) -> Result<FeatureVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, video_id.into(), site)
}

fn decode(bytes: &[u8], video_id: String, site: SiteId) -> Result<FeatureVolume> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[8]));
    }
    if bytes[9] != RANK {
        return Err(Error::Shape(format!("rank {} unsupported, expected 4", bytes[9])));
    }
    let shape: Vec<u64> = (0..4)
        .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes")))
        .collect();
    let elements = shape
        .iter()
        .try_fold(1usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let (elements, payload) = elements.ok_or_else(|| Error::ShapeOverflow(shape.clone()))?;
    let found = bytes.len() - HEADER_LEN;
    if found < payload {
        return Err(Error::Truncated {
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(Error::Shape(format!("{} trailing bytes after payload", found - payload)));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .take(elements)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let dims = Dims::new(shape[1] as usize, shape[2] as usize, shape[3] as usize);
    FeatureVolume::new(video_id, site, shape[0] as usize, dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn site() -> SiteId {
        SiteId::residual("m", 1).unwrap()
    }

    #[test]
    fn scalar_volume_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let v = FeatureVolume::new("a", site(), 1, Dims::new(1, 1, 1), vec![0.0]).unwrap();
        write_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 52);
        assert_eq!(&bytes[0..4], b"VTCD");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 4);
        assert!(bytes[10..16].iter().all(|&b| b == 0));
        assert_eq!(read_volume(&path, "a", site()).unwrap(), v);
    }

    #[test]
    fn random_volume_is_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..4 * 2 * 3 * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v = FeatureVolume::new("a", site(), 4, Dims::new(2, 3, 3), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1"), dir.path().join("2"));
        write_volume(&v, &p1).unwrap();
        write_volume(&v, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(read_volume(&p1, "a", site()).unwrap(), v);
    }

    #[test]
    fn non_finite_rejected() {
        let err = FeatureVolume::new("a", site(), 1, Dims::new(1, 1, 2), vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(1)));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let v = FeatureVolume::new("a", site(), 8, Dims::new(1, 1, 1), vec![1.0; 8]).unwrap();
        let mut bytes = encode(&v);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong, "a".into(), site()), Err(Error::BadMagic(_))));
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode(&bytes, "a".into(), site()),
            Err(Error::Truncated { expected: 32, found: 28 })
        ));
    }

    #[test]
    fn version_and_overflow() {
        let v = FeatureVolume::new("a", site(), 1, Dims::new(1, 1, 1), vec![1.0]).unwrap();
        let mut bytes = encode(&v);
        bytes[4] = 2;
        assert!(matches!(decode(&bytes, "a".into(), site()), Err(Error::VersionMismatch(2))));
        let mut bytes = encode(&v);
        for i in 0..4 {
            bytes[16 + 8 * i..24 + 8 * i].copy_from_slice(&u64::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&bytes, "a".into(), site()), Err(Error::ShapeOverflow(_))));
    }
}
