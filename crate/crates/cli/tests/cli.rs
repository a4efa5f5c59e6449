use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use face3d::geometry::{apply_pose, rpy_to_rotation, Pose6, Rpy};
use face3d::shape::canonical_face_shape;
use nalgebra::{Matrix3, Vector2};
use serde_json::Value;

fn face3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_face3d")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = face3d(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// synth (train and test) -> train-posereg -> train-psm -> detect -> eval.
fn pipeline(root: &Path, seed: &str) -> PathBuf {
    let d = |name: &str| root.join(name);
    ok(&["--seed", seed, "--out", p(&d("train")), "synth", "--count", "120"]);
    ok(&["--seed", seed, "--out", p(&d("test")), "synth", "--count", "10", "--first", "120"]);
    let train = d("train").join("scenes.json");
    let test = d("test").join("scenes.json");
    ok(&["--seed", seed, "--out", p(&d("reg")), "train-posereg", "--scenes", p(&train)]);
    let regs = d("reg").join("regressors.json");
    ok(&["--seed", seed, "--out", p(&d("psm")), "train-psm", "--scenes", p(&train), "--regressors", p(&regs), "--epochs", "5"]);
    let model = d("psm").join("psm.json");
    ok(&["--seed", seed, "--out", p(&d("det")), "detect", "--scenes", p(&test), "--regressors", p(&regs), "--model", p(&model)]);
    let dets = d("det").join("detections.json");
    ok(&["--seed", seed, "--out", p(&d("eval")), "eval", "--scenes", p(&test), "--detections", p(&dets)]);
    d("eval")
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = pipeline(a.path(), "7");
    let eb = pipeline(b.path(), "7");
    for f in ["eval.json", "eval.csv"] {
        assert_eq!(fs::read(ea.join(f)).unwrap(), fs::read(eb.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(
        fs::read(a.path().join("det/detections.json")).unwrap(),
        fs::read(b.path().join("det/detections.json")).unwrap()
    );
    let report = read_json(&ea.join("eval.json"));
    assert!(report["candidates"]["faces"].as_u64().unwrap() > 0);
}

#[test]
fn eval_columns_follow_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let eval = pipeline(dir.path(), "3");
    let csv = fs::read_to_string(eval.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "stage,fp_lt_0.3,fp_lt_0.5,det_gt_0.5,det_gt_0.7,candidates,faces");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("candidates,"));
    assert!(rows[1].starts_with("faces,"));
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
}

#[test]
fn manifest_echoes_seed_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    ok(&["--seed", "11", "--out", p(&out), "synth", "--count", "2"]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["args"]["count"], 2);
    assert!(m["config"]["scene"]["miss_prob"].is_number());
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs, ["detections.jsonl", "features.json", "scenes.json"]);
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"scene": {"faces": [2, 2], "clutter_rate": 0.0}}"#).unwrap();
    let out = dir.path().join("s");
    ok(&["--config", p(&cfg), "--out", p(&out), "synth", "--count", "3"]);
    let scenes = read_json(&out.join("scenes.json"));
    for s in scenes["scenes"].as_array().unwrap() {
        assert_eq!(s["faces"].as_array().unwrap().len(), 2);
    }

    fs::write(&cfg, r#"{"scene": {"faces": [3, 1]}}"#).unwrap();
    let bad = face3d(&["--config", p(&cfg), "--out", p(&out), "synth"]);
    assert!(!bad.status.success());
    let err: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_config");

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert!(!face3d(&["--config", p(&cfg), "--out", p(&out), "synth"]).status.success());
}

#[test]
fn ablate_emits_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    ok(&["--seed", "5", "--out", p(&out), "ablate", "--train-scenes", "60", "--test-scenes", "8"]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 6 * 2);
    let rows = read_json(&out.join("ablation.json"));
    assert_eq!(rows["rows"].as_array().unwrap().len(), 12);
    let n_supp: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(n_supp, ["0", "0", "1", "1", "2", "2", "3", "3", "4", "4", "5", "5"]);
}

fn write_shape(dir: &Path) -> PathBuf {
    let path = dir.join("shape.json");
    fs::write(&path, canonical_face_shape().to_json().unwrap()).unwrap();
    path
}

fn annotation_csv(faces: &[(String, Pose6)]) -> String {
    let shape = canonical_face_shape();
    let mut csv = String::from("face_id,keypoint_name,x,y,visible\n");
    for (id, pose) in faces {
        for (name, q) in shape.keypoint_names.iter().zip(apply_pose(pose, &shape.points)) {
            csv += &format!("{id},{name},{:?},{:?},1\n", q.x, q.y);
        }
    }
    csv
}

fn fitted_poses(dir: &Path, csv: &str) -> Vec<Value> {
    let shape = write_shape(dir);
    let ann = dir.join("ann.csv");
    fs::write(&ann, csv).unwrap();
    let out = dir.join("fit");
    ok(&["--out", p(&out), "fit-pose", "--shape", p(&shape), "--annotations", p(&ann)]);
    read_json(&out.join("poses.json"))["poses"].as_array().unwrap().clone()
}

fn rotation(v: &Value) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| v[r][c].as_f64().unwrap())
}

#[test]
fn fit_pose_recovers_forward_constructed_faces() {
    let dir = tempfile::tempdir().unwrap();
    let truth: Vec<(String, Pose6)> = (0..12)
        .map(|i| {
            let t = i as f64;
            let rpy = Rpy::new(0.3 * (t * 0.7).sin(), 0.25 * (t * 1.3).cos(), 1.2 * (t * 0.9).sin());
            let pose = Pose6::new(Vector2::new(10.0 * t - 40.0, 3.0 * t), 0.5 + 0.3 * t, rpy_to_rotation(rpy)).unwrap();
            (format!("f{i}"), pose)
        })
        .collect();
    let poses = fitted_poses(dir.path(), &annotation_csv(&truth));
    assert_eq!(poses.len(), truth.len());
    for ((id, pose), fit) in truth.iter().zip(&poses) {
        assert_eq!(fit["face_id"], id.as_str());
        let tol = 1e-9 * pose.s.max(1.0);
        assert!((fit["u"][0].as_f64().unwrap() - pose.u.x).abs() < tol);
        assert!((fit["u"][1].as_f64().unwrap() - pose.u.y).abs() < tol);
        assert!((fit["s"].as_f64().unwrap() - pose.s).abs() < tol);
        assert!((rotation(&fit["rotation"]) - pose.rotation.matrix()).amax() < 1e-9);
    }
}

#[test]
fn fit_pose_of_model_coordinates_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let poses = fitted_poses(dir.path(), &annotation_csv(&[("id".into(), Pose6::identity())]));
    let fit = &poses[0];
    assert!(fit["u"][0].as_f64().unwrap().abs() < 1e-9);
    assert!(fit["u"][1].as_f64().unwrap().abs() < 1e-9);
    assert!((fit["s"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((rotation(&fit["rotation"]) - Matrix3::identity()).amax() < 1e-9);
    for k in ["roll", "pitch", "yaw"] {
        assert!(fit["rpy"][k].as_f64().unwrap().abs() < 1e-9);
    }
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let shape = write_shape(dir.path());
    let ann = dir.path().join("ann.csv");
    fs::write(&ann, "face_id,keypoint_name,x,y,visible\nf,eye_left,1,2,1\nf,eye_right,abc,2,1\n").unwrap();
    let out = face3d(&["--out", p(&dir.path().join("o")), "fit-pose", "--shape", p(&shape), "--annotations", p(&ann)]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert!(err["error"]["message"].as_str().unwrap().contains("line 3"), "{err}");
}

#[test]
fn missing_inputs_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = face3d(&["--out", p(&out), "eval", "--scenes", "missing.json", "--detections", "missing2.json"]);
    assert!(!res.status.success());
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_input");
    assert!(!out.exists());
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s");
    ok(&["--out", p(&s), "synth", "--count", "40"]);
    let scenes = s.join("scenes.json");
    let before = fs::read(&scenes).unwrap();
    ok(&["--out", p(&dir.path().join("r")), "train-posereg", "--scenes", p(&scenes), "--epochs", "2"]);
    assert_eq!(before, fs::read(&scenes).unwrap());
}

#[test]
fn learn_shape_writes_a_loadable_shape() {
    let dir = tempfile::tempdir().unwrap();
    let truth: Vec<(String, Pose6)> = (0..20)
        .map(|i| {
            let t = i as f64;
            let rpy = Rpy::new(0.2 * (t * 0.5).sin(), 0.3 * (t * 1.1).cos(), 1.0 * (t * 0.8).sin());
            (format!("f{i}"), Pose6::new(Vector2::new(t, -t), 2.0, rpy_to_rotation(rpy)).unwrap())
        })
        .collect();
    let ann = dir.path().join("ann.csv");
    fs::write(&ann, annotation_csv(&truth)).unwrap();
    let out = dir.path().join("learn");
    ok(&["--seed", "1", "--out", p(&out), "learn-shape", "--annotations", p(&ann)]);
    let shape = face3d::shape::ShapeModel::load(&out.join("shape.json")).unwrap();
    assert_eq!(shape.len(), 9);
    let report = read_json(&out.join("learn.json"));
    let trace: Vec<f64> = report["energy_trace"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(report["final_energy"].as_f64().unwrap() < 1e-12);
}
