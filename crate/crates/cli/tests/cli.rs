use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use signmotion_core::dataset::{load_corpus, load_params, save_params};
use signmotion_core::fitting::Detections;
use signmotion_core::kinematics::{forward_kinematics, Camera, KinematicTree};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signmotion"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_corpus(dir: &Path) {
    ok(&["gen-data", "--seed", "3", "--out", p(dir), "--sentences", "30"]);
}

#[test]
fn generated_corpus_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_corpus(&a);
    small_corpus(&b);
    for name in ["manifest.jsonl", "skeleton.json", "generator.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(load_corpus(&a).unwrap().len(), 30);
}

#[test]
fn train_sample_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let ck = tmp.path().join("ck");
    ok(&["train", "--data", p(&data), "--epochs", "2", "--out", p(&ck)]);
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(ck.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);
    let final_dir = ck.join("final");

    let sample = |seed: &str, out: &Path| {
        ok(&["sample", "--checkpoint", p(&final_dir), "--text", "hello there", "--frames", "9", "--seed", seed, "--out", p(out)]);
    };
    let (a, b, c) = (tmp.path().join("a.bin"), tmp.path().join("b.bin"), tmp.path().join("c.bin"));
    sample("4", &a);
    sample("4", &b);
    sample("5", &c);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(load_params(&a).unwrap().frames(), 9);
    let joints: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a.joints.json")).unwrap()).unwrap();
    let positions = joints["positions"].as_array().unwrap();
    assert_eq!(positions.len(), 9);
    assert_eq!(positions[0].as_array().unwrap().len(), KinematicTree::default_signer().joint_count());

    let report = tmp.path().join("report.json");
    ok(&["evaluate", "--checkpoint", p(&final_dir), "--data", p(&data), "--split", "train", "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["body"]["MPJPE"].as_f64().unwrap() > 0.0);
}

#[test]
fn references_scored_against_themselves_are_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let report = tmp.path().join("report.json");
    ok(&["evaluate", "--generated", p(&data), "--data", p(&data), "--split", "train", "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for part in ["body", "left_hand", "right_hand"] {
        for metric in ["MPVPE", "MPJPE", "FID", "DTW"] {
            assert!(r[part][metric].as_f64().unwrap().abs() < 1e-9, "{part} {metric}");
        }
    }
}

#[test]
fn prior_and_fit_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_corpus(&data);
    let priors = tmp.path().join("priors");
    ok(&["fit-prior", "--data", p(&data), "--d", "3", "--out", p(&priors)]);
    assert!(priors.join("left_hand.json").exists());

    let tree = KinematicTree::default_signer();
    let mut seq = load_corpus(&data).unwrap().remove(0).params;
    let mut t = Array2::zeros((seq.frames(), 3));
    t.column_mut(2).fill(2.5);
    seq.translation = Some(t);
    let camera = Camera::from_intrinsics(600.0, 600.0, 320.0, 240.0).unwrap();
    let det = Detections::certain(camera.project_track(&forward_kinematics(&tree, &seq).unwrap()).unwrap()).unwrap();
    let (init, dets, cam) = (tmp.path().join("init.bin"), tmp.path().join("det.bin"), tmp.path().join("cam.json"));
    let mut noisy = seq.clone();
    noisy.hand_pose.mapv_inplace(|v| v + 0.05);
    save_params(&init, &noisy).unwrap();
    det.write(&dets).unwrap();
    fs::write(&cam, r#"{"fx": 600, "fy": 600, "cx": 320, "cy": 240}"#).unwrap();
    let out = tmp.path().join("fitted.bin");
    ok(&[
        "fit", "--init", p(&init), "--detections", p(&dets), "--camera", p(&cam), "--priors", p(&priors), "--out", p(&out),
    ]);
    assert_eq!(load_params(&out).unwrap().frames(), seq.frames());
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("fitted.trace.json")).unwrap()).unwrap();
    assert!(!trace.as_array().unwrap().is_empty());
}

#[test]
fn user_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["sample", "--checkpoint", p(&missing), "--text", "a", "--frames", "3", "--out", p(&tmp.path().join("x.bin"))]), 1);

    let data = tmp.path().join("data");
    small_corpus(&data);
    assert_eq!(code(&["ablate", "--variant", "bogus", "--data", p(&data), "--out", p(&tmp.path().join("ab"))]), 1);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&["train", "--data", p(&data), "--model-config", p(&bad), "--out", p(&tmp.path().join("ck"))]), 1);
    assert_eq!(code(&["train", "--data", p(&data), "--epochs", "0", "--out", p(&tmp.path().join("ck"))]), 1);
    assert_eq!(code(&["evaluate", "--generated", p(&data), "--data", p(&data), "--split", "nope", "--report", p(&bad)]), 1);
}
