//! Seeded synthetic scenes and brute-force oracles.
//!
//! A scene holds posed copies of a rigid shape, noisy keypoint detections
//! with some misses and clutter, and a feature table in which every
//! detection's features are a fixed linear embedding of its true relative
//! pose plus noise.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{
    apply_support, candidate_feature_vector, candidate_ied, generate_candidates, DetectionConfig, DetectionIndex,
    FaceCandidate, FeatureSource, KeypointDetection,
};
use crate::error::{Error, Result};
use crate::geometry::{apply_pose, bounding_box, iou, rpy_to_rotation, Box2, Point2, Pose6, Rpy};
use crate::keypoints::{KeypointType, NUM_KEYPOINTS};
use crate::pose_regression::{
    encode_rel, train_pose_regressor, Anchor, PoseRegConfig, PoseRegressor, RegressionExample, RelPose,
};
use crate::psm::{FaceOverlap, TrainExample};
use crate::shape::ShapeModel;

/// Sub-seed for `label`, a fixed mix of the two.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a followed by a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: f64,
    pub height: f64,
    /// Inclusive range of faces per scene.
    pub faces: [usize; 2],
    /// Range of inter-eye distances in pixels.
    pub ied: [f64; 2],
    pub yaw: [f64; 2],
    pub pitch: [f64; 2],
    pub roll: [f64; 2],
    /// Detection position noise as a fraction of the IED.
    pub sigma: f64,
    pub miss_prob: f64,
    /// Expected number of clutter detections per scene.
    pub clutter_rate: f64,
    /// Length of detection feature vectors.
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Noise of the candidate evidence features.
    pub candidate_noise: f64,
    /// Seed of the per-type feature embeddings, shared by all scenes.
    pub embedding_seed: u64,
    pub scales_per_octave: usize,
    /// Face size covered by the finest pyramid level.
    pub min_size: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 480.0,
            height: 320.0,
            faces: [1, 4],
            ied: [16.0, 60.0],
            yaw: [-1.25, 1.25],
            pitch: [-0.3, 0.3],
            roll: [-0.3, 0.3],
            sigma: 0.02,
            miss_prob: 0.1,
            clutter_rate: 40.0,
            feature_dim: 16,
            feature_noise: 0.5,
            candidate_noise: 0.25,
            embedding_seed: 0,
            scales_per_octave: 4,
            min_size: 24.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("image size must be positive");
        }
        if self.faces[0] > self.faces[1] {
            return bad("face count range is reversed");
        }
        if !(self.ied[0] > 0.0 && self.ied[0] <= self.ied[1]) {
            return bad("IED range must be positive and ordered");
        }
        for r in [self.yaw, self.pitch, self.roll] {
            if !(r[0] <= r[1]) {
                return bad("angle ranges must be ordered");
            }
        }
        if self.pitch[0] <= -FRAC_PI_2 || self.pitch[1] >= FRAC_PI_2 {
            return bad("pitch must stay inside (-pi/2, pi/2)");
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return bad("miss probability must lie in [0, 1]");
        }
        let nonneg = [self.sigma, self.clutter_rate, self.feature_noise, self.candidate_noise];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("noise levels and clutter rate must be finite and >= 0");
        }
        if self.feature_dim == 0 || self.scales_per_octave == 0 || !(self.min_size > 0.0) {
            return bad("feature dimension, scales per octave and minimum size must be positive");
        }
        Ok(())
    }

    /// Pyramid scale `2^(k / scales_per_octave)`, `k >= 0`, nearest to a
    /// face of the given size.
    pub fn pyramid_scale(&self, size: f64) -> f64 {
        let n = self.scales_per_octave as f64;
        let k = (n * (size / self.min_size).log2()).round().max(0.0);
        (k / n).exp2()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFace {
    pub pose: Pose6,
    pub keypoints: Vec<Point2>,
    #[serde(rename = "box")]
    pub bbox: Box2,
    pub ied: f64,
    pub pyramid_scale: f64,
    /// Face keypoints (out of nine) with a detection.
    pub detected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub width: f64,
    pub height: f64,
    pub faces: Vec<GroundTruthFace>,
    pub detections: Vec<KeypointDetection>,
    /// Face each detection came from; `None` for clutter.
    pub detection_faces: Vec<Option<usize>>,
    /// Detection feature vectors, indexed by `feature_ref`.
    pub features: Vec<Vec<f64>>,
    /// Seed of the candidate-feature noise.
    pub noise_seed: u64,
}

impl Scene {
    pub fn face_boxes(&self) -> Vec<Box2> {
        self.faces.iter().map(|f| f.bbox).collect()
    }
}

/// Fixed `feature_dim x 6` embedding for every detection type.
pub fn embeddings(spec: &SceneSpec) -> BTreeMap<KeypointType, DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.embedding_seed);
    KeypointType::ALL
        .into_iter()
        .map(|k| {
            let e = DMatrix::from_fn(spec.feature_dim, 6, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            });
            (k, e)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shape column of every face keypoint type.
fn face_columns(shape: &ShapeModel) -> Result<Vec<usize>> {
    KeypointType::FACE
        .iter()
        .map(|k| shape.index_of(k.name()).ok_or_else(|| Error::InvalidInput(format!("shape lacks keypoint {k}"))))
        .collect()
}

fn random_pose(rng: &mut ChaCha8Rng, spec: &SceneSpec, shape: &ShapeModel, eye: f64) -> Result<Pose6> {
    let ied = uniform(rng, spec.ied);
    let rpy = Rpy::new(uniform(rng, spec.roll), uniform(rng, spec.pitch), uniform(rng, spec.yaw));
    let s = ied / eye;
    let reach = shape.points.column_iter().map(|c| c.norm()).fold(0.0, f64::max) * s;
    let lo = Vector2::new(reach.min(spec.width / 2.0), reach.min(spec.height / 2.0));
    let u = Vector2::new(
        uniform(rng, [lo.x, spec.width - lo.x]),
        uniform(rng, [lo.y, spec.height - lo.y]),
    );
    Pose6::from_rpy(u, s, rpy)
}

fn features_for(
    rng: &mut ChaCha8Rng,
    emb: &DMatrix<f64>,
    rel: &RelPose,
    noise: f64,
) -> Vec<f64> {
    let y = nalgebra::DVector::from_column_slice(&rel.0);
    let x = emb * y;
    x.iter().map(|v| v + noise * gaussian(rng)).collect()
}

/// Generates scene `index`; a pure function of `(spec, shape, index)`.
pub fn gen_scene(spec: &SceneSpec, shape: &ShapeModel, index: usize) -> Result<Scene> {
    spec.validate()?;
    let cols = face_columns(shape)?;
    let eye = shape.eye_distance()?;
    let emb = embeddings(spec);
    let seed = derive_seed(spec.seed, &format!("scene/{index}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_faces = rng.gen_range(spec.faces[0]..=spec.faces[1]);

    let mut faces: Vec<GroundTruthFace> = Vec::new();
    let mut attempts = 0;
    while faces.len() < n_faces && attempts < 50 * n_faces.max(1) {
        attempts += 1;
        let pose = random_pose(&mut rng, spec, shape, eye)?;
        let keypoints = apply_pose(&pose, &shape.points);
        let bbox = bounding_box(&keypoints).expect("shape has keypoints");
        if faces.iter().any(|f| iou(&f.bbox, &bbox) > 0.1) {
            continue;
        }
        let size = bbox.width().max(bbox.height());
        faces.push(GroundTruthFace {
            pose,
            ied: candidate_ied(&pose, shape)?,
            keypoints,
            bbox,
            pyramid_scale: spec.pyramid_scale(size),
            detected: 0,
        });
    }

    let mut detections = Vec::new();
    let mut detection_faces = Vec::new();
    let mut features = Vec::new();
    let true_score = Normal::new(1.0, 0.5).expect("valid normal");
    for (fi, face) in faces.iter_mut().enumerate() {
        for kind in KeypointType::ALL {
            let keep = rng.gen::<f64>() >= spec.miss_prob;
            let noise = Vector2::new(gaussian(&mut rng), gaussian(&mut rng)) * (spec.sigma * face.ied);
            let score = true_score.sample(&mut rng);
            if !keep {
                continue;
            }
            let truth = match kind.model_index() {
                Some(i) => face.keypoints[cols[i]],
                None => face.bbox.center(),
            };
            if kind != KeypointType::FaceCenter {
                face.detected += 1;
            }
            let p = truth + noise;
            let anchor = Anchor::from_detection(p, face.pyramid_scale)?;
            let rel = encode_rel(&face.pose, &anchor)?;
            let x = features_for(&mut rng, &emb[&kind], &rel, spec.feature_noise);
            detections.push(KeypointDetection {
                scene: index,
                id: detections.len(),
                kind,
                x: p.x,
                y: p.y,
                scale: face.pyramid_scale,
                score,
                feature_ref: Some(features.len()),
            });
            detection_faces.push(Some(fi));
            features.push(x);
        }
    }

    let clutter = if spec.clutter_rate > 0.0 {
        Poisson::new(spec.clutter_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let clutter_score = Normal::new(-0.5, 0.5).expect("valid normal");
    for _ in 0..clutter {
        // features describe a face that is not there
        let fake = random_pose(&mut rng, spec, shape, eye)?;
        let kind = KeypointType::ALL[rng.gen_range(0..KeypointType::ALL.len())];
        let p = Point2::new(rng.gen_range(0.0..spec.width), rng.gen_range(0.0..spec.height));
        let fake_points = apply_pose(&fake, &shape.points);
        let size = bounding_box(&fake_points).map_or(spec.min_size, |b| b.width().max(b.height()));
        let scale = spec.pyramid_scale(size);
        let offset = fake.u - match kind.model_index() {
            Some(i) => fake_points[cols[i]].coords,
            None => bounding_box(&fake_points).expect("shape has keypoints").center().coords,
        };
        let pose = Pose6::new(p.coords + offset, fake.s, fake.rotation)?;
        let rel = encode_rel(&pose, &Anchor::from_detection(p, scale)?)?;
        let x = features_for(&mut rng, &emb[&kind], &rel, spec.feature_noise);
        detections.push(KeypointDetection {
            scene: index,
            id: detections.len(),
            kind,
            x: p.x,
            y: p.y,
            scale,
            score: clutter_score.sample(&mut rng),
            feature_ref: Some(features.len()),
        });
        detection_faces.push(None);
        features.push(x);
    }

    Ok(Scene {
        index,
        width: spec.width,
        height: spec.height,
        faces,
        detections,
        detection_faces,
        features,
        noise_seed: derive_seed(seed, "candidate-noise"),
    })
}

/// Scenes `first..first + count`, generated in parallel.
pub fn gen_scenes(spec: &SceneSpec, shape: &ShapeModel, first: usize, count: usize) -> Result<Vec<Scene>> {
    (first..first + count).into_par_iter().map(|i| gen_scene(spec, shape, i)).collect()
}

/// Outward surface directions used to decide whether a keypoint faces the
/// camera, in the canonical face frame.
fn keypoint_normal(kind: KeypointType) -> Vector3<f64> {
    let side = match kind {
        KeypointType::EyeLeft | KeypointType::NoseLeft | KeypointType::MouthLeft => -0.5,
        KeypointType::EyeRight | KeypointType::NoseRight | KeypointType::MouthRight => 0.5,
        KeypointType::EarLeft => -2.0,
        KeypointType::EarRight => 2.0,
        KeypointType::Chin | KeypointType::FaceCenter => 0.0,
    };
    Vector3::new(side, 0.0, 1.0).normalize()
}

/// Whether keypoint `kind` of a face posed with `rotation` faces the camera.
pub fn keypoint_visible(rotation: &Matrix3<f64>, kind: KeypointType) -> bool {
    (rotation * keypoint_normal(kind)).z > 0.1
}

/// Feature provider backed by a synthetic scene.
///
/// Candidate features are, per face keypoint, a Gaussian evidence score of
/// the distance (in IED units) to the nearest true keypoint of that type
/// that faces the camera, plus noise. Three pure-noise features follow.
pub struct SyntheticFeatures<'a> {
    scene: &'a Scene,
    shape_cols: Vec<usize>,
    noise: f64,
}

pub const CANDIDATE_FEATURES: usize = NUM_KEYPOINTS + 3;

impl<'a> SyntheticFeatures<'a> {
    pub fn new(scene: &'a Scene, shape: &ShapeModel, spec: &SceneSpec) -> Result<Self> {
        Ok(Self { scene, shape_cols: face_columns(shape)?, noise: spec.candidate_noise })
    }
}

impl FeatureSource for SyntheticFeatures<'_> {
    fn detection_features(&self, det: &KeypointDetection) -> Result<Vec<f64>> {
        det.feature_ref
            .and_then(|r| self.scene.features.get(r))
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("detection {} has no feature row", det.id)))
    }

    fn candidate_features(&self, cand: &FaceCandidate, _shape: &ShapeModel) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.scene.noise_seed,
            &format!("{}/{}", cand.detection, cand.source),
        ));
        let mut out = Vec::with_capacity(CANDIDATE_FEATURES);
        for (k, kind) in KeypointType::FACE.into_iter().enumerate() {
            let p = cand.keypoints[self.shape_cols[k]];
            let d = self
                .scene
                .faces
                .iter()
                .filter(|f| keypoint_visible(f.pose.rotation.matrix(), kind))
                .map(|f| (f.keypoints[self.shape_cols[k]] - p).norm() / cand.ied)
                .fold(f64::INFINITY, f64::min);
            let evidence = (-(d / 0.15).powi(2)).exp();
            out.push(evidence + self.noise * gaussian(&mut rng));
        }
        for _ in 0..3 {
            out.push(self.noise * gaussian(&mut rng));
        }
        Ok(out)
    }
}

/// Smallest residual of `B ~ 1 u^T + s A R` over rotations on a roll, pitch,
/// yaw grid of `grid_deg` degrees, with `u` and `s >= 0` solved in closed
/// form for each rotation. Rows of `a` and `b` are 3D points.
pub fn brute_force_rotation_fit(a: &DMatrix<f64>, b: &DMatrix<f64>, grid_deg: u32) -> Result<f64> {
    if grid_deg == 0 || 360 % grid_deg != 0 {
        return Err(Error::InvalidInput(format!("grid spacing {grid_deg} does not divide 360")));
    }
    if a.shape() != b.shape() || a.ncols() != 3 || a.nrows() == 0 {
        return Err(Error::InvalidInput("point sets must be matching p x 3 matrices".into()));
    }
    let center = |m: &DMatrix<f64>| {
        let mean = m.row_mean();
        let mut c = m.clone();
        for mut row in c.row_iter_mut() {
            row -= &mean;
        }
        c
    };
    let (ac, bc) = (center(a), center(b));
    let aa = ac.norm_squared();
    let bb = bc.norm_squared();
    let m = ac.transpose() * &bc;
    let step = f64::from(grid_deg).to_radians();
    let n_full = 360 / grid_deg as i64;
    let n_half = 90 / grid_deg as i64;
    let mut best = bb;
    for ir in 0..n_full {
        for ip in -n_half..=n_half {
            for iy in 0..n_full {
                let r = rpy_to_rotation(Rpy::new(ir as f64 * step, ip as f64 * step, iy as f64 * step));
                let t: f64 = r.matrix().iter().zip(m.iter()).map(|(x, y)| x * y).sum();
                let res = if t > 0.0 && aa > 0.0 { bb - t * t / aa } else { bb };
                best = best.min(res.max(0.0));
            }
        }
    }
    Ok(best)
}

/// Candidate evaluation in the layout of a detection-rate table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent of candidates whose best IoU with a face is below 0.3.
    pub fp_lt_03: f64,
    /// Percent of candidates whose best IoU with a face is below 0.5.
    pub fp_lt_05: f64,
    /// Percent of faces matched by some candidate with IoU above 0.5.
    pub det_gt_05: f64,
    /// Percent of faces matched by some candidate with IoU above 0.7.
    pub det_gt_07: f64,
    pub candidates: usize,
    pub faces: usize,
}

/// Raw counts behind an [`EvalReport`], summable over scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub candidates: usize,
    pub below_03: usize,
    pub below_05: usize,
    pub faces: usize,
    pub above_05: usize,
    pub above_07: usize,
}

impl std::ops::AddAssign for EvalCounts {
    fn add_assign(&mut self, o: Self) {
        self.candidates += o.candidates;
        self.below_03 += o.below_03;
        self.below_05 += o.below_05;
        self.faces += o.faces;
        self.above_05 += o.above_05;
        self.above_07 += o.above_07;
    }
}

impl EvalCounts {
    pub fn report(&self) -> EvalReport {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        EvalReport {
            fp_lt_03: pct(self.below_03, self.candidates),
            fp_lt_05: pct(self.below_05, self.candidates),
            det_gt_05: pct(self.above_05, self.faces),
            det_gt_07: pct(self.above_07, self.faces),
            candidates: self.candidates,
            faces: self.faces,
        }
    }
}

pub const EVAL_CSV_HEADER: &str = "fp_lt_0.3,fp_lt_0.5,det_gt_0.5,det_gt_0.7,candidates,faces";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{},{}",
            self.fp_lt_03, self.fp_lt_05, self.det_gt_05, self.det_gt_07, self.candidates, self.faces
        )
    }
}

/// Overlap counts of candidate boxes against ground-truth boxes of one scene.
pub fn evaluate_boxes(cands: &[Box2], truth: &[Box2]) -> EvalCounts {
    let mut c = EvalCounts { candidates: cands.len(), faces: truth.len(), ..Default::default() };
    for b in cands {
        let best = truth.iter().map(|t| iou(b, t)).fold(0.0, f64::max);
        c.below_03 += usize::from(best < 0.3);
        c.below_05 += usize::from(best < 0.5);
    }
    for t in truth {
        let best = cands.iter().map(|b| iou(b, t)).fold(0.0, f64::max);
        c.above_05 += usize::from(best > 0.5);
        c.above_07 += usize::from(best > 0.7);
    }
    c
}

/// Evaluates candidates of one scene by the boxes of their keypoints.
pub fn evaluate_candidates(cands: &[FaceCandidate], scene: &Scene) -> EvalReport {
    let boxes: Vec<Box2> = cands.iter().map(FaceCandidate::bbox).collect();
    evaluate_boxes(&boxes, &scene.face_boxes()).report()
}

/// Area under the ROC curve of positive versus negative scores; ties count
/// one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> f64 {
    if positive.is_empty() || negative.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> =
        positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Regression examples from the true detections of type `kind`.
pub fn regression_examples(scenes: &[Scene], kind: KeypointType) -> Result<Vec<RegressionExample>> {
    let mut out = Vec::new();
    for scene in scenes {
        for (d, face) in scene.detections.iter().zip(&scene.detection_faces) {
            let Some(fi) = face else { continue };
            if d.kind != kind {
                continue;
            }
            let x = d
                .feature_ref
                .and_then(|r| scene.features.get(r))
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("detection {} has no feature row", d.id)))?;
            let y = encode_rel(&scene.faces[*fi].pose, &d.anchor()?)?;
            out.push(RegressionExample { x, y });
        }
    }
    Ok(out)
}

/// Scorer training examples from candidates of several scenes.
///
/// Every scene contributes its candidates plus one candidate at each true
/// pose. Faces get ids unique across scenes and the image id is the scene
/// index.
pub fn psm_examples(
    scenes: &[Scene],
    candidates: &[Vec<FaceCandidate>],
    shape: &ShapeModel,
    spec: &SceneSpec,
    config: &DetectionConfig,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    let mut face_offset = 0;
    for (scene, cands) in scenes.iter().zip(candidates) {
        let source = SyntheticFeatures::new(scene, shape, spec)?;
        let index = DetectionIndex::new(&scene.detections);
        let truth: Vec<FaceCandidate> = scene
            .faces
            .iter()
            .enumerate()
            .map(|(i, f)| FaceCandidate {
                id: usize::MAX - i,
                pose: f.pose,
                keypoints: f.keypoints.clone(),
                ied: f.ied,
                support: 0,
                score: 0.0,
                detection: usize::MAX - i,
                source: KeypointType::FaceCenter,
            })
            .collect();
        let truth = apply_support(truth, &scene.detections, shape, &DetectionConfig { n_supp: 0, ..config.clone() });
        for c in cands.iter().chain(&truth) {
            let bbox = c.bbox();
            let overlaps = scene
                .faces
                .iter()
                .enumerate()
                .map(|(j, f)| FaceOverlap { face: face_offset + j, overlap: iou(&bbox, &f.bbox) })
                .filter(|o| o.overlap > 0.0)
                .collect();
            out.push(TrainExample {
                bbox,
                x: candidate_feature_vector(c, &index, &source, shape, config)?,
                theta: c.pose.yaw(),
                image_id: scene.index,
                overlaps,
            });
        }
        face_offset += scene.faces.len();
    }
    Ok(out)
}

/// Detection types that propose candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposals {
    /// The nine face keypoints and the face center.
    #[default]
    All,
    /// Face-center detections only.
    CenterOnly,
}

impl Proposals {
    pub fn admits(self, kind: KeypointType) -> bool {
        self == Proposals::All || kind == KeypointType::FaceCenter
    }
}

/// One regressor per detection type, trained on the true detections of
/// `scenes`.
pub fn train_regressors(scenes: &[Scene], config: &PoseRegConfig) -> Result<BTreeMap<KeypointType, PoseRegressor>> {
    KeypointType::ALL
        .into_par_iter()
        .map(|kind| {
            let examples = regression_examples(scenes, kind)?;
            if examples.is_empty() {
                return Err(Error::InsufficientData(format!("no training detections of type {kind}")));
            }
            Ok((kind, train_pose_regressor(&examples, kind, config)?))
        })
        .collect()
}

/// Support-pruned candidates of one scene, proposed by the admitted
/// detection types.
pub fn scene_candidates(
    scene: &Scene,
    regs: &BTreeMap<KeypointType, PoseRegressor>,
    shape: &ShapeModel,
    spec: &SceneSpec,
    config: &DetectionConfig,
    proposals: Proposals,
) -> Result<Vec<FaceCandidate>> {
    let source = SyntheticFeatures::new(scene, shape, spec)?;
    let proposing: Vec<KeypointDetection> =
        scene.detections.iter().filter(|d| proposals.admits(d.kind)).cloned().collect();
    let generated = generate_candidates(&proposing, regs, &source, shape)?;
    Ok(apply_support(generated, &scene.detections, shape, config))
}

/// Examples whose positive class depends on the parameter: feature `k`
/// separates positives from negatives only when `theta` lies in the `k`-th
/// of `m` equal parameter sectors, with the sign alternating by sector.
pub fn yaw_sensitive_examples(images: usize, per_image: usize, m: usize, noise: f64, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Box2::new(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)).expect("valid box");
    let mut out = Vec::with_capacity(images * per_image);
    for img in 0..images {
        for e in 0..per_image {
            let positive = e % 2 == 0;
            let theta = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
            let sector = (((theta + FRAC_PI_2) / std::f64::consts::PI * m as f64) as usize).min(m - 1);
            let sign = if sector % 2 == 0 { 1.0 } else { -1.0 };
            let x: Vec<f64> = (0..m)
                .map(|k| {
                    let signal = if k == sector && positive { sign } else { 0.0 };
                    signal + noise * gaussian(&mut rng)
                })
                .collect();
            let overlap = if positive { 0.9 } else { 0.0 };
            out.push(TrainExample {
                bbox: unit,
                x,
                theta,
                image_id: img,
                overlaps: vec![FaceOverlap { face: img * per_image + e, overlap }],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_fit::fit_rigid;
    use crate::shape::canonical_face_shape;

    fn quiet_spec() -> SceneSpec {
        SceneSpec { sigma: 0.0, miss_prob: 0.0, clutter_rate: 0.0, ..Default::default() }
    }

    #[test]
    fn noiseless_detections_sit_on_keypoints() {
        let shape = canonical_face_shape();
        let scene = gen_scene(&quiet_spec(), &shape, 3).unwrap();
        assert!(!scene.faces.is_empty());
        assert_eq!(scene.detections.len(), 10 * scene.faces.len());
        for (d, f) in scene.detections.iter().zip(&scene.detection_faces) {
            let face = &scene.faces[f.unwrap()];
            let truth = match d.kind.model_index() {
                Some(i) => face.keypoints[i],
                None => face.bbox.center(),
            };
            assert_eq!(d.position(), truth);
            assert_eq!(d.scale, face.pyramid_scale);
        }
        assert!(scene.faces.iter().all(|f| f.detected == 9));
    }

    #[test]
    fn scenes_are_deterministic() {
        let shape = canonical_face_shape();
        let spec = SceneSpec { seed: 11, ..Default::default() };
        let a = serde_json::to_string(&gen_scenes(&spec, &shape, 0, 5).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_scenes(&spec, &shape, 0, 5).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = serde_json::to_string(&gen_scenes(&SceneSpec { seed: 12, ..spec }, &shape, 0, 5).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn features_embed_relative_pose() {
        let shape = canonical_face_shape();
        let spec = SceneSpec { feature_noise: 0.0, ..quiet_spec() };
        let scene = gen_scene(&spec, &shape, 0).unwrap();
        let emb = embeddings(&spec);
        for (d, f) in scene.detections.iter().zip(&scene.detection_faces) {
            let rel = encode_rel(&scene.faces[f.unwrap()].pose, &d.anchor().unwrap()).unwrap();
            let x = &emb[&d.kind] * nalgebra::DVector::from_column_slice(&rel.0);
            let got = &scene.features[d.feature_ref.unwrap()];
            for (a, b) in got.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_scales_are_quantized() {
        let spec = SceneSpec::default();
        assert_eq!(spec.pyramid_scale(10.0), 1.0);
        assert_eq!(spec.pyramid_scale(24.0), 1.0);
        assert!((spec.pyramid_scale(48.0) - 2.0).abs() < 1e-15);
        assert!((spec.pyramid_scale(24.0 * 2f64.powf(0.26)) - 2f64.powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SceneSpec { miss_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(SceneSpec { faces: [3, 1], ..Default::default() }.validate().is_err());
    }

    fn random_rows(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, 3, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rotation_oracle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_rows(&mut rng, 6);
        assert!(brute_force_rotation_fit(&a, &a, 5).unwrap() < 1e-20);
        let r = rpy_to_rotation(Rpy::new(30f64.to_radians(), -45f64.to_radians(), 120f64.to_radians()));
        let mut b = &a * DMatrix::from_column_slice(3, 3, r.matrix().as_slice()) * 2.5;
        for mut row in b.row_iter_mut() {
            row += nalgebra::RowVector3::new(1.0, -2.0, 0.5);
        }
        assert!(brute_force_rotation_fit(&a, &b, 15).unwrap() < 1e-18);
        assert!(brute_force_rotation_fit(&a, &b, 7).is_err());
    }

    #[test]
    fn schonemann_beats_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let a = random_rows(&mut rng, 8);
            let b = random_rows(&mut rng, 8);
            let fit = fit_rigid(&a, &b).unwrap();
            assert!(fit.residual <= brute_force_rotation_fit(&a, &b, 10).unwrap() + 1e-12);
        }
    }

    #[test]
    fn evaluation_examples() {
        let shape = canonical_face_shape();
        let scene = gen_scene(&quiet_spec(), &shape, 1).unwrap();
        let exact: Vec<Box2> = scene.face_boxes();
        let r = evaluate_boxes(&exact, &exact).report();
        assert_eq!((r.fp_lt_03, r.fp_lt_05, r.det_gt_05, r.det_gt_07), (0.0, 0.0, 100.0, 100.0));
        let r = evaluate_boxes(&[], &exact).report();
        assert_eq!((r.fp_lt_03, r.fp_lt_05, r.det_gt_05, r.det_gt_07), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(EVAL_CSV_HEADER.split(',').take(4).collect::<Vec<_>>(), ["fp_lt_0.3", "fp_lt_0.5", "det_gt_0.5", "det_gt_0.7"]);
    }

    #[test]
    fn evaluation_matches_overlap_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.gen_range(0.0..100.0);
            let y = rng.gen_range(0.0..100.0);
            let w = rng.gen_range(5.0..40.0);
            Box2::new(Point2::new(x, y), Point2::new(x + w, y + w * rng.gen_range(0.8..1.2))).unwrap()
        };
        for _ in 0..100 {
            let cands: Vec<Box2> = (0..rng.gen_range(0..20)).map(|_| rand_box(&mut rng)).collect();
            let truth: Vec<Box2> = (0..rng.gen_range(1..5)).map(|_| rand_box(&mut rng)).collect();
            let m: Vec<Vec<f64>> = cands
                .iter()
                .map(|c| {
                    truth
                        .iter()
                        .map(|t| {
                            let ix = (c.max.x.min(t.max.x) - c.min.x.max(t.min.x)).max(0.0);
                            let iy = (c.max.y.min(t.max.y) - c.min.y.max(t.min.y)).max(0.0);
                            let inter = ix * iy;
                            inter / (c.area() + t.area() - inter)
                        })
                        .collect()
                })
                .collect();
            let c = evaluate_boxes(&cands, &truth);
            let below = |th: f64| m.iter().filter(|row| row.iter().all(|&v| v < th)).count();
            let above = |th: f64| (0..truth.len()).filter(|&j| m.iter().any(|row| row[j] > th)).count();
            assert_eq!((c.below_03, c.below_05), (below(0.3), below(0.5)));
            assert_eq!((c.above_05, c.above_07), (above(0.5), above(0.7)));
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0, 1.0], &[2.0, 3.0]), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
        // brute-force pair count
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..50).map(|_| (rng.gen_range(0.0..5.0) as f64).round()).collect();
        let n: Vec<f64> = (0..40).map(|_| (rng.gen_range(-1.0..4.0) as f64).round()).collect();
        let mut wins = 0.0;
        for a in &p {
            for b in &n {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        assert!((auc(&p, &n) - wins / (50.0 * 40.0)).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
    }

    #[test]
    fn visibility_follows_yaw() {
        let frontal = Matrix3::identity();
        assert!(KeypointType::FACE.iter().all(|&k| keypoint_visible(&frontal, k)));
        let turned = *rpy_to_rotation(Rpy::new(0.0, 0.0, 1.2)).matrix();
        let hidden: Vec<bool> = [KeypointType::EarLeft, KeypointType::EarRight]
            .iter()
            .map(|&k| keypoint_visible(&turned, k))
            .collect();
        assert_ne!(hidden[0], hidden[1]);
    }
}
