//! Clusters tubelets from several videos into concepts and prints the
//! silhouette scan that chose the cluster count.
use vtcd::concepts::{build_concepts, CnmfConfig};
use vtcd::fixtures::two_region_volume;
use vtcd::store::{Dims, SiteId};
use vtcd::tubelets::{extract_tubelets, SlicParams};

fn main() -> vtcd::Result<()> {
    let site = SiteId::residual("demo", 2)?;
    let mut tubelets = Vec::new();
    for v in 0..4 {
        let (volume, _) = two_region_volume(&format!("clip{v}"), &site, Dims::new(4, 8, 8), 6, 0.05, v)?;
        tubelets.extend(extract_tubelets(&volume, &SlicParams::default())?);
    }
    let (set, concepts) = build_concepts(&tubelets, (2, 6), &CnmfConfig::default())?;
    for (q, s) in &set.selection.silhouettes {
        println!("Q={q} silhouette {s:?}");
    }
    println!("chose Q={}, objective {:.4}", set.q, set.objective);
    for c in &concepts {
        println!("{}: {} tubelets, {} cells", c.id, c.members.len(), c.support_size());
    }
    Ok(())
}
