//! Serves a toy model over TCP on loopback and checks that masked forwards
//! through the client match the in-process model.
use std::sync::Arc;
use std::time::Duration;

use vtcd::backend::{spawn_server, MaskRequest, ModelBackend, RemoteBackend, TaskTarget, ToyConfig, ToyTransformer};
use vtcd::fixtures::toy_inputs;
use vtcd::store::DenseMask;

fn main() -> vtcd::Result<()> {
    let config = ToyConfig::default();
    let mut model = ToyTransformer::new(config.clone())?;
    for v in toy_inputs(&config, 2, 1)? {
        model.add_video(v)?;
    }
    let model = Arc::new(model);
    let server = spawn_server(model.clone())?;
    let remote = RemoteBackend::connect(&server.endpoint(), "toy", 2, Duration::from_secs(5))?;
    println!("connected to {}: {} sites, grid {}", remote.model_id(), remote.sites().len(), remote.grid());

    let grid = model.grid();
    for (i, site) in remote.sites().into_iter().step_by(7).enumerate() {
        let mut req = MaskRequest::unmasked("clip00", TaskTarget::ClassScore { class: i % config.classes });
        req.add_mask(site.clone(), &DenseMask::from_fn(grid, |t, h, w| (t + h + w + i) % 3 == 0))?;
        let (a, b) = (model.evaluate(&req)?, remote.evaluate(&req)?);
        println!("{site:<24} native {a:.6} remote {b:.6} diff {:.1e}", (a - b).abs());
    }
    Ok(())
}
