//! Segments a two-region volume into tubelets and reports how well the best
//! tubelet union recovers the planted region.
use vtcd::fixtures::two_region_volume;
use vtcd::store::{DenseMask, Dims, SiteId};
use vtcd::tubelets::{extract_tubelets, SlicParams};

fn main() -> vtcd::Result<()> {
    let site = SiteId::residual("demo", 1)?;
    let (volume, region) = two_region_volume("clip", &site, Dims::new(4, 8, 8), 4, 0.1, 7)?;
    let tubelets = extract_tubelets(&volume, &SlicParams::default())?;
    println!("{} tubelets", tubelets.len());
    let mut inside = DenseMask::empty(volume.dims);
    for t in &tubelets {
        let mask = t.mask.decode()?;
        let overlap = mask.intersection_count(&region)?;
        println!("  size {:3}  overlap with region {:3}", t.size, overlap);
        if 2 * overlap > t.size {
            inside.union_with(&mask)?;
        }
    }
    println!("region IoU {:.3}", inside.iou(&region)?);
    Ok(())
}
