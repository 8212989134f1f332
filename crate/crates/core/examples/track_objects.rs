//! Picks the concept that best matches a first-frame query mask of a moving
//! blob and reports how well its support follows the blob through the clip.
use vtcd::concepts::{build_concepts, CnmfConfig};
use vtcd::eval::{select_best_concept, track_iou};
use vtcd::fixtures::moving_blob;
use vtcd::store::{Dims, SiteId};
use vtcd::tubelets::{extract_tubelets, SlicParams};

fn main() -> vtcd::Result<()> {
    let site = SiteId::residual("demo", 1)?;
    let dims = Dims::new(6, 10, 10);
    let mut tubelets = Vec::new();
    let mut tracks = Vec::new();
    for v in 0..3 {
        let video = format!("clip{v}");
        let (volume, track) = moving_blob(&video, &site, dims, 3, v)?;
        let params = SlicParams {
            n_segments: 16,
            ..SlicParams::default()
        };
        tubelets.extend(extract_tubelets(&volume, &params)?);
        tracks.push((video, track));
    }
    let (_, concepts) = build_concepts(&tubelets, (2, 6), &CnmfConfig::default())?;
    for (video, track) in &tracks {
        let Some(id) = select_best_concept(&concepts, video, &track.frame(0))? else {
            println!("{video}: no concept");
            continue;
        };
        let concept = concepts.iter().find(|c| c.id == id).expect("selected concept exists");
        println!("{video}: {id} tracks the blob with IoU {:.3}", track_iou(concept, video, track)?);
    }
    Ok(())
}
