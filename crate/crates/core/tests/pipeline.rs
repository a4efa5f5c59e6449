use std::collections::BTreeMap;
use std::io::BufReader;
use std::sync::OnceLock;

use face3d::candidates::{
    apply_support, detect_faces, generate_candidates, read_detections_jsonl, write_detections_jsonl, DetectionConfig,
    FaceCandidate,
};
use face3d::keypoints::KeypointType;
use face3d::pose_regression::{PoseRegConfig, PoseRegressor};
use face3d::psm::{train_psm, PsmTrainConfig, PsmWeights};
use face3d::shape::{canonical_face_shape, ShapeModel};
use face3d::synth::{
    gen_scene, gen_scenes, psm_examples, scene_candidates, train_regressors, Proposals, Scene, SceneSpec,
    SyntheticFeatures,
};

struct Setup {
    spec: SceneSpec,
    shape: ShapeModel,
    test: Vec<Scene>,
    regs: BTreeMap<KeypointType, PoseRegressor>,
    model: PsmWeights,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let spec = SceneSpec { seed: 21, ..Default::default() };
        let shape = canonical_face_shape();
        let train = gen_scenes(&spec, &shape, 0, 200).unwrap();
        let test = gen_scenes(&spec, &shape, 200, 20).unwrap();
        let regs = train_regressors(&train, &PoseRegConfig::default()).unwrap();
        let config = DetectionConfig { n_supp: 0, ..Default::default() };
        let cands: Vec<_> = train
            .iter()
            .map(|s| scene_candidates(s, &regs, &shape, &spec, &config, Proposals::All).unwrap())
            .collect();
        let examples = psm_examples(&train, &cands, &shape, &spec, &config).unwrap();
        let model = train_psm(&examples, &PsmTrainConfig { epochs: 8, ..Default::default() }, 5).unwrap();
        Setup { spec, shape, test, regs, model }
    })
}

#[test]
fn raising_the_support_threshold_only_removes_candidates() {
    let s = setup();
    for scene in &s.test {
        let source = SyntheticFeatures::new(scene, &s.shape, &s.spec).unwrap();
        let generated = generate_candidates(&scene.detections, &s.regs, &source, &s.shape).unwrap();
        let mut previous: Option<Vec<usize>> = None;
        for n_supp in 0..=9 {
            let config = DetectionConfig { n_supp, ..Default::default() };
            let ids: Vec<usize> =
                apply_support(generated.clone(), &scene.detections, &s.shape, &config).iter().map(|c| c.id).collect();
            if let Some(prev) = &previous {
                assert!(ids.iter().all(|i| prev.contains(i)), "scene {} n_supp {n_supp}", scene.index);
            }
            previous = Some(ids);
        }
    }
}

#[test]
fn detection_keeps_a_subset_of_scored_candidates() {
    let s = setup();
    let config = DetectionConfig::default();
    let mut found = 0;
    for scene in &s.test {
        let source = SyntheticFeatures::new(scene, &s.shape, &s.spec).unwrap();
        let out = detect_faces(&scene.detections, &s.regs, &s.model, &source, &s.shape, &config).unwrap();
        assert!(out.candidates.len() <= out.generated);
        assert!(out.candidates.iter().all(|c| c.support >= config.n_supp && c.score.is_finite()));
        let ids: Vec<usize> = out.candidates.iter().map(|c| c.id).collect();
        assert!(out.faces.iter().all(|f| ids.contains(&f.id) && f.score > config.tau));
        found += out.faces.len();
    }
    assert!(found > 0);
}

#[test]
fn detection_finds_most_faces() {
    let s = setup();
    let config = DetectionConfig::default();
    let (mut faces, mut hit) = (0, 0);
    for scene in &s.test {
        let source = SyntheticFeatures::new(scene, &s.shape, &s.spec).unwrap();
        let out = detect_faces(&scene.detections, &s.regs, &s.model, &source, &s.shape, &config).unwrap();
        let boxes: Vec<_> = out.faces.iter().map(FaceCandidate::bbox).collect();
        for f in &scene.faces {
            faces += 1;
            hit += usize::from(boxes.iter().any(|b| face3d::geometry::iou(b, &f.bbox) > 0.5));
        }
    }
    assert!(hit as f64 >= 0.8 * faces as f64, "{hit} of {faces}");
}

#[test]
fn scenes_are_pure_functions_of_spec_and_index() {
    let s = setup();
    let again = gen_scene(&s.spec, &s.shape, s.test[3].index).unwrap();
    assert_eq!(again, s.test[3]);
    let other = gen_scene(&SceneSpec { seed: 22, ..s.spec.clone() }, &s.shape, s.test[3].index).unwrap();
    assert_ne!(other, s.test[3]);
}

#[test]
fn detections_survive_jsonl() {
    let s = setup();
    let mut buf = Vec::new();
    for scene in &s.test {
        write_detections_jsonl(&mut buf, &scene.detections).unwrap();
    }
    let back = read_detections_jsonl(BufReader::new(buf.as_slice()), "mem").unwrap();
    let all: Vec<_> = s.test.iter().flat_map(|sc| sc.detections.clone()).collect();
    assert_eq!(back, all);
}

#[test]
fn malformed_jsonl_reports_the_line() {
    let text = "{\"id\":0,\"type\":\"eye_left\",\"x\":1,\"y\":2,\"scale\":1,\"score\":0.5}\nnot json\n";
    let err = read_detections_jsonl(BufReader::new(text.as_bytes()), "dets.jsonl").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn center_only_proposals_come_from_face_centers() {
    let s = setup();
    let config = DetectionConfig { n_supp: 0, ..Default::default() };
    for scene in s.test.iter().take(5) {
        let cands = scene_candidates(scene, &s.regs, &s.shape, &s.spec, &config, Proposals::CenterOnly).unwrap();
        assert!(cands.iter().all(|c| c.source == KeypointType::FaceCenter));
    }
}
