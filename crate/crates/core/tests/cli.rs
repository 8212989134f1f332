mod common;

use std::fs;
use std::path::{Path, PathBuf};

use vtcd::rosetta::RosettaTuple;

fn toy_spec(dir: &Path) -> PathBuf {
    let path = dir.join("toy.json");
    fs::write(&path, r#"{"kind":"toy","seed":5,"videos":3}"#).unwrap();
    path
}

#[test]
fn discover_and_rank_are_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = toy_spec(tmp.path());
    let data = tmp.path().join("data");
    common::ok(&["--out", common::s(&data), "export", "--backend", common::s(&spec), "--features"]);
    let manifest = data.join("features").join("manifest.json");
    let mut runs = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "3")] {
        let out = tmp.path().join(run);
        let common = ["--out", common::s(&out), "--seed", "11", "--jobs", jobs];
        common::ok(&[&common[..], &["discover", "--manifest", common::s(&manifest), "--q-max", "4"]].concat());
        let concepts = out.join("concepts");
        common::ok(&[&common[..], &["rank", "--backend", common::s(&spec), "--concepts", common::s(&concepts), "--k", "200"]].concat());
        runs.push(common::snapshot(&out));
    }
    assert!(runs[0].contains_key(Path::new("importance.json")));
    assert_eq!(common::differing(&runs[0], &runs[1]), Vec::<PathBuf>::new());

    // A different seed changes the sampled masks.
    let other = tmp.path().join("c");
    common::ok(&["--out", common::s(&other), "--seed", "12", "rank", "--backend", common::s(&spec), "--concepts", common::s(&tmp.path().join("a/concepts")), "--k", "200"]);
    assert_ne!(fs::read(other.join("importance.json")).unwrap(), runs[0][Path::new("importance.json")]);
}

#[test]
fn planted_heads_and_curves_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("planted.json");
    fs::write(&spec, r#"{"kind":"planted","fixture":"standard"}"#).unwrap();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        common::ok(&["--out", common::s(&out), "rank", "--backend", common::s(&spec), "--k", "500"]);
        let report = out.join("importance.json");
        let curves = out.join("curves");
        common::ok(&["--out", common::s(&curves), "curves", "--backend", common::s(&spec), "--report", common::s(&report)]);
        runs.push(common::snapshot(&out));
    }
    assert_eq!(common::differing(&runs[0], &runs[1]), Vec::<PathBuf>::new());
    let auc: serde_json::Value = serde_json::from_slice(&runs[0][Path::new("curves/auc.json")]).unwrap();
    let get = |k: &str| auc[k].as_f64().unwrap();
    assert!(get("positive") < get("random") && get("random") < get("negative"), "{auc}");
}

#[test]
fn rosetta_cli_matches_brute_force_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (models, model_args) = common::write_rosetta_inputs(tmp.path());
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let mut args = vec!["--out".to_string(), out.display().to_string(), "rosetta".into(), "--epsilon".into(), "0.3".into(), "--delta".into(), "0.05".into()];
        args.extend(model_args.iter().cloned());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        common::ok(&refs);
        outputs.push(common::snapshot(&out));
    }
    assert_eq!(common::differing(&outputs[0], &outputs[1]), Vec::<PathBuf>::new());
    let tuples: Vec<RosettaTuple> = serde_json::from_slice(&outputs[0][Path::new("tuples.json")]).unwrap();
    assert_eq!(common::tuple_set(&tuples), common::brute_force_tuples(&models, 0.3, 0.05));
}

#[test]
fn exit_codes_separate_bad_input_from_backend_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let spec = toy_spec(tmp.path());
    let code = |args: &[&str]| common::vtcd(args).status.code();
    assert_eq!(code(&["--out", common::s(&out), "heads", "--backend", common::s(&spec), "--fraction", "1.5"]), Some(2));
    assert_eq!(code(&["--out", common::s(&out), "--jobs", "0", "heads", "--backend", common::s(&spec)]), Some(2));
    assert_eq!(code(&["--out", common::s(&out), "rank", "--backend", common::s(&tmp.path().join("missing.json"))]), Some(2));
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("127.0.0.1:{port}");
    assert_eq!(code(&["--out", common::s(&out), "serve-check", "--endpoint", &endpoint, "--timeout-ms", "500"]), Some(3));
}
