use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClusterSelection, Concept, ConceptId, ConceptSet};
use crate::error::{Error, Result};
use crate::store::{read_mask, write_mask, Dims, SiteId};

#[derive(Serialize, Deserialize)]
struct StoredSupport {
    video_id: String,
    file: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StoredConcept {
    index: usize,
    members: Vec<usize>,
    centroid: Vec<f64>,
    supports: Vec<StoredSupport>,
}

#[derive(Serialize, Deserialize)]
struct StoredSet {
    site: SiteId,
    #[serde(rename = "Q")]
    q: usize,
    objective: f64,
    dims: Dims,
    centroids: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
    selection: ClusterSelection,
    concepts: Vec<StoredConcept>,
}

const STORE_FILE: &str = "concepts.json";

/// Writes one site's concepts under `root/<site slug>/`: a JSON manifest plus
/// one RLE mask file per (concept, video). Returns the site directory.
pub fn write_concept_store(root: impl AsRef<Path>, set: &ConceptSet, concepts: &[Concept]) -> Result<PathBuf> {
    let dir = root.as_ref().join(set.site.slug());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dims = concepts
        .first()
        .map(|c| c.dims)
        .ok_or_else(|| Error::InvalidParam("no concepts to store".into()))?;
    let mut stored = Vec::with_capacity(concepts.len());
    for c in concepts {
        let mut supports = Vec::new();
        for (vi, (video, mask)) in c.support.iter().enumerate() {
            let file = PathBuf::from(format!("c{:03}_{vi:04}.mask.json", c.id.index));
            write_mask(mask, dir.join(&file))?;
            supports.push(StoredSupport {
                video_id: video.clone(),
                file,
            });
        }
        stored.push(StoredConcept {
            index: c.id.index,
            members: c.members.clone(),
            centroid: c.centroid.clone(),
            supports,
        });
    }
    let body = StoredSet {
        site: set.site.clone(),
        q: set.q,
        objective: set.objective,
        dims,
        centroids: set.centroids.rows().into_iter().map(|r| r.to_vec()).collect(),
        members: set.members.clone(),
        selection: set.selection.clone(),
        concepts: stored,
    };
    let path = dir.join(STORE_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Reads the concepts of one site directory written by [`write_concept_store`].
pub fn load_concept_store(site_dir: impl AsRef<Path>) -> Result<Vec<Concept>> {
    let dir = site_dir.as_ref();
    let path = dir.join(STORE_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let body: StoredSet = serde_json::from_slice(&bytes)?;
    body.site.validate()?;
    body.concepts
        .into_iter()
        .map(|c| {
            let mut support = BTreeMap::new();
            for s in c.supports {
                let mask = read_mask(dir.join(&s.file))?;
                if mask.dims != body.dims || mask.video_id != s.video_id {
                    return Err(Error::Manifest(format!("{} does not match its concept entry", s.file.display())));
                }
                support.insert(s.video_id, mask);
            }
            Ok(Concept {
                id: ConceptId {
                    site: body.site.clone(),
                    index: c.index,
                },
                centroid: c.centroid,
                members: c.members,
                support,
                dims: body.dims,
            })
        })
        .collect()
}

/// Loads every site directory under `root` that holds a concept store,
/// in directory-name order.
pub fn load_all_concepts(root: impl AsRef<Path>) -> Result<Vec<Concept>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(STORE_FILE).is_file())
        .collect();
    dirs.sort();
    let mut all = Vec::new();
    for d in dirs {
        all.extend(load_concept_store(&d)?);
    }
    Ok(all)
}
