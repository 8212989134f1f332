//! Removes planted concepts in importance order, reverse order and random
//! order, and prints the three curves with their areas.
use vtcd::eval::{attribution_curves, CURVE_STEPS};
use vtcd::fixtures::standard_planted;
use vtcd::importance::{cris, SamplingPlan};

fn main() -> vtcd::Result<()> {
    let f = standard_planted()?;
    let report = cris(&f.units, &f.oracle, &f.videos, &SamplingPlan::default())?;
    let curves = attribution_curves(&f.units, &report, &f.oracle, &f.videos, CURVE_STEPS, 0)?;
    for c in [&curves.positive, &curves.random, &curves.negative] {
        println!("{:?}: AUC {:.3}", c.direction, c.auc);
        print!("{}", c.to_csv());
    }
    Ok(())
}
