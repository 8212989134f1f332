//! Mines concepts shared across three models with random box supports.
use vtcd::fixtures::random_model_concepts;
use vtcd::rosetta::{mine, MiningParams};
use vtcd::store::Dims;

fn main() -> vtcd::Result<()> {
    let videos: Vec<String> = (0..3).map(|v| format!("clip{v}")).collect();
    let models = random_model_concepts(3, 20, Dims::new(4, 8, 8), &videos, 11)?;
    let params = MiningParams {
        epsilon: 0.3,
        delta: 0.15,
    };
    let tuples = mine(&models, &params)?;
    println!("{} tuples above R = {:.0}", tuples.len(), 100.0 * params.delta);
    for t in tuples.iter().take(10) {
        println!("d={} R={:5.1}  {}", t.d, 100.0 * t.r_score, t.concept_ids.join("  "));
    }
    Ok(())
}
