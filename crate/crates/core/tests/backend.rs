mod common;

use std::io::{BufRead, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtcd::backend::protocol::{read_frame, PROTOCOL_VERSION};
use vtcd::backend::{
    spawn_server, MaskRequest, ModelBackend, Prediction, RemoteBackend, TaskTarget, ToyTransformer,
};
use vtcd::fixtures::standard_planted;
use vtcd::store::{read_volume, Manifest};
use vtcd::Error;

#[test]
fn masked_forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0f64;
    let mut moved = 0;
    for pair in 0..50 {
        let model = common::masking_toy(pair % 5);
        let video = format!("clip{:02}", rng.random_range(0..3));
        let masks = common::random_masks(&mut rng, &model.sites(), model.grid());
        let mut req = MaskRequest::unmasked(video.clone(), TaskTarget::ClassScore { class: 0 });
        req.masks = masks.clone();
        let Prediction::Heads { class_logits, seg_logits, scalar } = model.forward(&req).unwrap() else {
            panic!("toy emits heads")
        };
        let r = common::reference_forward(&model, &video, &masks);
        let unmasked = common::reference_forward(&model, &video, &Default::default());
        if (unmasked.scalar - r.scalar).abs() > 1e-6 {
            moved += 1;
        }
        for (a, b) in class_logits.iter().chain(&seg_logits).zip(r.class_logits.iter().chain(&r.seg_logits)) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((scalar - r.scalar).abs());
    }
    assert!(worst < 1e-6, "max deviation {worst}");
    assert!(moved >= 25, "masks changed only {moved} of 50 outputs");
}

#[test]
fn remote_matches_native() {
    let model = Arc::new(common::masking_toy(3));
    let server = spawn_server(model.clone()).unwrap();
    let remote = RemoteBackend::connect(&server.endpoint(), "toy", 3, Duration::from_secs(5)).unwrap();
    assert_eq!(remote.sites(), model.sites());
    assert_eq!(remote.grid(), model.grid());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let mut req = MaskRequest::unmasked(format!("clip{:02}", i % 3), TaskTarget::ClassScore { class: i % 4 });
        req.masks = common::random_masks(&mut rng, &model.sites(), model.grid());
        let (a, b) = (model.evaluate(&req).unwrap(), remote.evaluate(&req).unwrap());
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let twice: Vec<f64> = (0..2)
        .map(|_| remote.evaluate(&MaskRequest::unmasked("clip00", TaskTarget::ClassScore { class: 1 })).unwrap())
        .collect();
    assert_eq!(twice[0], twice[1]);
}

#[test]
fn killed_server_surfaces_transport_error() {
    let mut server = spawn_server(Arc::new(common::masking_toy(1))).unwrap();
    let remote = RemoteBackend::connect(&server.endpoint(), "", 1, Duration::from_secs(2)).unwrap();
    let req = MaskRequest::unmasked("clip00", TaskTarget::ClassScore { class: 0 });
    remote.evaluate(&req).unwrap();
    server.shutdown();
    let err = remote.evaluate(&req).unwrap_err();
    assert!(matches!(err, Error::Transport(_) | Error::Protocol(_)), "{err}");
    assert!(err.is_backend());
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden_transcript.txt");

/// Client frames of the transcript; replies are recorded in the golden file.
fn transcript_requests() -> Vec<String> {
    let site = r#"{"model_id":"planted","layer":2,"facet":"residual"}"#;
    let regression = r#"{"kind":"scalar_regression","value":1.0}"#;
    vec![
        format!(r#"{{"type":"hello","version":{PROTOCOL_VERSION},"model_id":"planted"}}"#),
        format!(r#"{{"type":"forward","request_id":1,"video_id":"planted00","masks":[],"target":{regression}}}"#),
        format!(
            r#"{{"type":"forward","request_id":2,"video_id":"planted00","masks":[{{"site":{site},"rle":[0,10,30]}}],"target":{regression}}}"#
        ),
        format!(
            r#"{{"type":"forward","request_id":3,"video_id":"planted01","masks":[{{"site":{site},"rle":[5,20,15]}}],"target":{regression}}}"#
        ),
        "this is not json".to_string(),
        format!(r#"{{"type":"forward","request_id":4,"video_id":"nope","masks":[],"target":{regression}}}"#),
        format!(
            r#"{{"type":"forward","request_id":5,"video_id":"planted00","masks":[{{"site":{site},"rle":[3,3]}}],"target":{regression}}}"#
        ),
        r#"{"type":"hello","version":99,"model_id":"planted"}"#.to_string(),
        r#"{"type":"hello","version":1,"model_id":"other"}"#.to_string(),
    ]
}

fn replay() -> Vec<String> {
    let f = standard_planted().unwrap();
    let server = spawn_server(Arc::new(f.oracle)).unwrap();
    let mut stream = TcpStream::connect(server.addr()).unwrap();
    let mut lines = Vec::new();
    for req in transcript_requests() {
        let mut frame = (req.len() as u32).to_le_bytes().to_vec();
        frame.extend_from_slice(req.as_bytes());
        stream.write_all(&frame).unwrap();
        let reply = read_frame(&mut stream).unwrap().expect("server replies");
        lines.push(format!("> {req}"));
        lines.push(format!("< {}", String::from_utf8(reply).unwrap()));
    }
    lines
}

#[test]
fn golden_transcript_replays_byte_identically() {
    let got = replay();
    if std::env::var_os("VTCD_BLESS").is_some() {
        let mut f = std::fs::File::create(GOLDEN).unwrap();
        for l in &got {
            writeln!(f, "{l}").unwrap();
        }
    }
    let want: Vec<String> = std::io::BufReader::new(std::fs::File::open(GOLDEN).unwrap())
        .lines()
        .map(Result::unwrap)
        .collect();
    assert_eq!(got, want);
}

#[test]
fn exported_weights_and_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::masking_toy(2);
    model.export(dir.path().join("w.json")).unwrap();
    let mut back = ToyTransformer::import(dir.path().join("w.json")).unwrap();
    assert_eq!(back.weights, model.weights);
    for id in model.video_ids() {
        back.add_video(model.video(&id).unwrap().clone()).unwrap();
    }
    let req = MaskRequest::unmasked("clip01", TaskTarget::ClassScore { class: 2 });
    assert_eq!(back.evaluate(&req).unwrap(), model.evaluate(&req).unwrap());

    let mut volumes = Vec::new();
    for id in model.video_ids() {
        volumes.extend(model.site_features(&id).unwrap());
    }
    let manifest = Manifest::write_dataset(dir.path().join("features"), &volumes).unwrap();
    assert_eq!(manifest.sites.len(), model.sites().len());
    for entry in &manifest.sites {
        assert_eq!(entry.dims, model.grid());
        for (file, video) in entry.files.iter().zip(&manifest.video_ids) {
            let vol = read_volume(dir.path().join("features").join(file), video.clone(), entry.site.clone()).unwrap();
            let want = if entry.site.head.is_some() { model.config().head_dim() } else { model.channels() };
            assert_eq!((vol.channels, vol.dims), (want, model.grid()));
        }
    }
}
