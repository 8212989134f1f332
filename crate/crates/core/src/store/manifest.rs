use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_volume, write_volume, Dims, FeatureVolume, SiteId};
use crate::error::{Error, Result};

/// One site of a dataset: its shape and one volume file per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub site: SiteId,
    pub channels: usize,
    pub dims: Dims,
    /// Paths relative to the manifest directory, aligned with `video_ids`.
    pub files: Vec<PathBuf>,
}

/// Dataset manifest: ordered video ids and, per site, the stored volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub video_ids: Vec<String>,
    pub sites: Vec<SiteEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    /// Writes every volume under `dir` and a `manifest.json` describing them.
    ///
    /// Video order follows first appearance in `volumes`.
    pub fn write_dataset(dir: impl AsRef<Path>, volumes: &[FeatureVolume]) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut video_ids: Vec<String> = Vec::new();
        for v in volumes {
            if !video_ids.contains(&v.video_id) {
                video_ids.push(v.video_id.clone());
            }
        }
        let mut by_site: BTreeMap<SiteId, BTreeMap<String, &FeatureVolume>> = BTreeMap::new();
        for v in volumes {
            if by_site.entry(v.site.clone()).or_default().insert(v.video_id.clone(), v).is_some() {
                return Err(Error::Manifest(format!("duplicate volume for ({}, {})", v.video_id, v.site)));
            }
        }
        let mut sites = Vec::new();
        for (site, vols) in by_site {
            let first = vols.values().next().expect("non-empty");
            let mut files = Vec::new();
            for (vi, video) in video_ids.iter().enumerate() {
                let vol = vols
                    .get(video)
                    .ok_or_else(|| Error::Manifest(format!("site {site} has no volume for video {video}")))?;
                if vol.dims != first.dims || vol.channels != first.channels {
                    return Err(Error::Manifest(format!(
                        "site {site}: mixed dims {}x{} vs {}x{}",
                        vol.channels, vol.dims, first.channels, first.dims
                    )));
                }
                let rel = PathBuf::from(format!("{}.v{vi:04}.vol", site.slug()));
                write_volume(vol, dir.join(&rel))?;
                files.push(rel);
            }
            sites.push(SiteEntry {
                site,
                channels: first.channels,
                dims: first.dims,
                files,
            });
        }
        let manifest = Manifest {
            video_ids,
            sites,
            base_dir: dir.to_path_buf(),
        };
        manifest.validate()?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_slice(&bytes)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for v in &self.video_ids {
            if !seen.insert(v) {
                return Err(Error::Manifest(format!("duplicate video id {v}")));
            }
        }
        let mut sites = HashSet::new();
        for entry in &self.sites {
            entry.site.validate()?;
            if !sites.insert(&entry.site) {
                return Err(Error::Manifest(format!("site {} listed twice", entry.site)));
            }
            if entry.files.len() != self.video_ids.len() {
                return Err(Error::Manifest(format!(
                    "site {} lists {} files for {} videos",
                    entry.site,
                    entry.files.len(),
                    self.video_ids.len()
                )));
            }
            if entry.channels == 0 || entry.dims.cells() == 0 {
                return Err(Error::Manifest(format!("site {} has an empty extent", entry.site)));
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn entry(&self, site: &SiteId) -> Result<&SiteEntry> {
        self.sites
            .iter()
            .find(|e| &e.site == site)
            .ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    /// Loads one volume, checking it against the site's declared shape.
    pub fn load_volume(&self, video_index: usize, site: &SiteId) -> Result<FeatureVolume> {
        let entry = self.entry(site)?;
        let video = self
            .video_ids
            .get(video_index)
            .ok_or_else(|| Error::UnknownVideo(format!("index {video_index}")))?;
        let vol = read_volume(self.base_dir.join(&entry.files[video_index]), video.clone(), site.clone())?;
        if vol.dims != entry.dims || vol.channels != entry.channels {
            return Err(Error::Manifest(format!(
                "{}: stored shape {}x{} disagrees with manifest {}x{}",
                entry.files[video_index].display(),
                vol.channels,
                vol.dims,
                entry.channels,
                entry.dims
            )));
        }
        Ok(vol)
    }

    pub fn site_volumes(&self, site: &SiteId) -> Result<Vec<FeatureVolume>> {
        (0..self.video_ids.len()).map(|i| self.load_volume(i, site)).collect()
    }
}
