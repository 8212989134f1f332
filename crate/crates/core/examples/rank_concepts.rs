//! Ranks planted concepts with CRIS and with single-concept occlusion.
use vtcd::fixtures::standard_planted;
use vtcd::importance::{cris, occlusion, SamplingPlan};

fn main() -> vtcd::Result<()> {
    let f = standard_planted()?;
    let plan = SamplingPlan {
        k: 2000,
        ..SamplingPlan::default()
    };
    let sampled = cris(&f.units, &f.oracle, &f.videos, &plan)?;
    let single = occlusion(&f.units, &f.oracle, &f.videos)?;
    println!("{:<28} {:>8} {:>9} {:>9}", "concept", "covers", "cris", "occlusion");
    for i in sampled.ranking() {
        println!(
            "{:<28} {:>8.2} {:>9.4} {:>9.4}",
            sampled.units[i], f.coverage[i], sampled.scores[i], single.scores[i]
        );
    }
    Ok(())
}
