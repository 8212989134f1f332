//! Ranks the heads of a toy model where four heads are never read, then
//! prunes the bottom third and checks the prediction is unchanged.
use vtcd::eval::{mean_metric, prune_plan};
use vtcd::fixtures::decorative_heads_toy;
use vtcd::importance::{head_importance, SamplingPlan};

fn main() -> vtcd::Result<()> {
    let f = decorative_heads_toy(&[(1, 1), (2, 0), (2, 3), (3, 2)], 0)?;
    let plan = SamplingPlan {
        k: 1000,
        ..SamplingPlan::default()
    };
    let report = head_importance(&f.model, &f.videos, &plan)?;
    for i in report.ranking() {
        println!("{:<12} {:.5}", report.units[i], report.scores[i]);
    }
    let prune = prune_plan(&report, 2.0 / 3.0)?;
    println!("dropping {:?}", prune.drop);
    let pruned = prune.apply(&f.model)?;
    println!(
        "metric {:.6} -> {:.6}",
        mean_metric(&f.model, &f.videos)?,
        mean_metric(&pruned, &f.videos)?
    );
    Ok(())
}
