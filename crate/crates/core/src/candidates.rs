//! Face candidates from keypoint detections: pose proposals, keypoint
//! support, pose-aligned sampling grids, special features, scoring and
//! greedy non-maximal suppression.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_pose, bounding_box, iou, Box2, Point2, Point3, Pose6, Rotation3, Rpy};
use crate::keypoints::KeypointType;
use crate::pose_regression::{decode_rel, predict_rel, Anchor, PoseRegressor, RelPose};
use crate::psm::PsmWeights;
use crate::shape::ShapeModel;

/// Number of special features per candidate.
pub const NUM_SPECIAL_FEATURES: usize = 2 * KeypointType::ALL.len() + 1;

/// Projected tangent-plane area (per unit model area and unit scale) below
/// which a sampling grid is rejected.
const GRID_AREA_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointDetection {
    #[serde(default)]
    pub scene: usize,
    pub id: usize,
    #[serde(rename = "type")]
    pub kind: KeypointType,
    pub x: f64,
    pub y: f64,
    /// Pyramid scale the detection was found at.
    pub scale: f64,
    pub score: f64,
    /// Row of the detection's feature vector in the feature table.
    #[serde(default)]
    pub feature_ref: Option<usize>,
}

impl KeypointDetection {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn anchor(&self) -> Result<Anchor> {
        Anchor::from_detection(self.position(), self.scale)
    }
}

/// Reads one detection per line; blank lines are skipped.
pub fn read_detections_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<KeypointDetection>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: source.to_string(), line: n as u64 + 1, message };
        let det: KeypointDetection = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !(det.scale > 0.0) {
            return Err(parse_err(format!("scale must be positive, got {}", det.scale)));
        }
        out.push(det);
    }
    Ok(out)
}

pub fn write_detections_jsonl<W: Write>(mut writer: W, dets: &[KeypointDetection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Minimum support a candidate needs to survive pruning.
    pub n_supp: usize,
    /// Support radius as a fraction of the inter-eye distance.
    pub support_radius: f64,
    /// IoU at or above which NMS suppresses a candidate.
    pub overlap: f64,
    /// Minimum score of a kept face.
    pub tau: f64,
    pub scales_per_octave: usize,
    /// Smallest face size covered by the pyramid.
    pub min_size: f64,
    /// Cap of the distance special feature, as a fraction of the IED.
    pub distance_cap: f64,
    /// Floor of the score special feature, also used when no detection exists.
    pub score_floor: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            n_supp: 4,
            support_radius: 0.1,
            overlap: 0.5,
            tau: 0.0,
            scales_per_octave: 4,
            min_size: 24.0,
            distance_cap: 0.32,
            score_floor: -1.1,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.support_radius, self.distance_cap, self.min_size];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.scales_per_octave == 0 {
            return Err(Error::InvalidConfig("radius, cap, size and scales per octave must be positive".into()));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::InvalidConfig(format!("overlap must lie in (0, 1), got {}", self.overlap)));
        }
        if !self.tau.is_finite() || !self.score_floor.is_finite() {
            return Err(Error::InvalidConfig("tau and score floor must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceCandidate {
    pub id: usize,
    pub pose: Pose6,
    /// Keypoint locations in shape column order.
    pub keypoints: Vec<Point2>,
    /// Inter-eye distance of the posed 3D model.
    pub ied: f64,
    pub support: usize,
    pub score: f64,
    /// Detection the pose was proposed from.
    pub detection: usize,
    pub source: KeypointType,
}

impl FaceCandidate {
    pub fn bbox(&self) -> Box2 {
        bounding_box(&self.keypoints).expect("candidates have keypoints")
    }

    /// Center of the keypoint bounding box, the candidate's face-center
    /// location.
    pub fn center(&self) -> Point2 {
        self.bbox().center()
    }

    /// Location of keypoint `kind`, with the face center taken from the box.
    pub fn location(&self, kind: KeypointType, shape: &ShapeModel) -> Option<Point2> {
        match kind {
            KeypointType::FaceCenter => Some(self.center()),
            _ => shape.index_of(kind.name()).map(|i| self.keypoints[i]),
        }
    }

    pub fn to_record(&self) -> CandidateRecord {
        CandidateRecord {
            id: self.id,
            source: self.source,
            detection: self.detection,
            bbox: self.bbox(),
            u: [self.pose.u.x, self.pose.u.y],
            s: self.pose.s,
            rpy: self.pose.rpy().ok(),
            rotation: self.pose.rotation,
            keypoints: self.keypoints.iter().map(|p| [p.x, p.y]).collect(),
            ied: self.ied,
            support: self.support,
            score: self.score,
        }
    }
}

/// Serialized form of a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    pub source: KeypointType,
    pub detection: usize,
    #[serde(rename = "box")]
    pub bbox: Box2,
    pub u: [f64; 2],
    pub s: f64,
    /// Absent only at gimbal lock.
    pub rpy: Option<Rpy>,
    pub rotation: Rotation3,
    pub keypoints: Vec<[f64; 2]>,
    pub ied: f64,
    pub support: usize,
    pub score: f64,
}

impl CandidateRecord {
    pub fn to_candidate(&self) -> Result<FaceCandidate> {
        if self.keypoints.is_empty() {
            return Err(Error::InvalidInput(format!("candidate {} has no keypoints", self.id)));
        }
        Ok(FaceCandidate {
            id: self.id,
            pose: Pose6::new(nalgebra::Vector2::new(self.u[0], self.u[1]), self.s, self.rotation)?,
            keypoints: self.keypoints.iter().map(|p| Point2::new(p[0], p[1])).collect(),
            ied: self.ied,
            support: self.support,
            score: self.score,
            detection: self.detection,
            source: self.source,
        })
    }
}

/// Features of detections and candidates.
pub trait FeatureSource: Sync {
    /// Feature vector the pose regressors read for a detection.
    fn detection_features(&self, det: &KeypointDetection) -> Result<Vec<f64>>;

    /// Pose-dependent feature vector of a candidate, without the special
    /// features.
    fn candidate_features(&self, cand: &FaceCandidate, shape: &ShapeModel) -> Result<Vec<f64>>;
}

/// Inter-eye distance of `shape` under `pose`, measured in 3D.
pub fn candidate_ied(pose: &Pose6, shape: &ShapeModel) -> Result<f64> {
    Ok(pose.s * shape.eye_distance()?)
}

/// Builds candidates from relative poses supplied by `predict`.
///
/// A prediction of `None`, or one decoding to a nonpositive scale, drops the
/// detection.
pub fn generate_candidates_with<F>(dets: &[KeypointDetection], shape: &ShapeModel, predict: F) -> Result<Vec<FaceCandidate>>
where
    F: Fn(&KeypointDetection) -> Result<Option<RelPose>> + Sync,
{
    shape.eye_distance()?;
    let proposals: Vec<Result<Option<FaceCandidate>>> = dets
        .par_iter()
        .map(|det| {
            let Some(y) = predict(det)? else { return Ok(None) };
            let Some(pose) = decode_rel(&y, &det.anchor()?) else { return Ok(None) };
            Ok(Some(FaceCandidate {
                id: 0,
                pose,
                keypoints: apply_pose(&pose, &shape.points),
                ied: candidate_ied(&pose, shape)?,
                support: 0,
                score: 0.0,
                detection: det.id,
                source: det.kind,
            }))
        })
        .collect();
    let mut out = Vec::new();
    for p in proposals {
        if let Some(mut c) = p? {
            c.id = out.len();
            out.push(c);
        }
    }
    Ok(out)
}

/// One candidate per detection from the regressor of its type.
pub fn generate_candidates(
    dets: &[KeypointDetection],
    regs: &BTreeMap<KeypointType, PoseRegressor>,
    source: &dyn FeatureSource,
    shape: &ShapeModel,
) -> Result<Vec<FaceCandidate>> {
    if let Some(d) = dets.iter().find(|d| !regs.contains_key(&d.kind)) {
        return Err(Error::MissingRegressor(d.kind));
    }
    generate_candidates_with(dets, shape, |det| {
        let x = source.detection_features(det)?;
        predict_rel(&regs[&det.kind], &x).map(Some)
    })
}

/// Detections grouped by type and then by pyramid scale.
#[derive(Clone, Debug, Default)]
pub struct DetectionIndex<'a> {
    by_type: BTreeMap<KeypointType, Vec<&'a KeypointDetection>>,
    scales: Vec<f64>,
}

impl<'a> DetectionIndex<'a> {
    pub fn new(dets: &'a [KeypointDetection]) -> Self {
        let mut by_type: BTreeMap<KeypointType, Vec<&KeypointDetection>> = BTreeMap::new();
        for d in dets {
            by_type.entry(d.kind).or_default().push(d);
        }
        let mut scales: Vec<f64> = dets.iter().map(|d| d.scale).collect();
        scales.sort_by(f64::total_cmp);
        scales.dedup();
        Self { by_type, scales }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn of_type(&self, kind: KeypointType) -> &[&'a KeypointDetection] {
        self.by_type.get(&kind).map_or(&[], Vec::as_slice)
    }

    /// Closest detection of `kind` to `p`, ties going to the lower id.
    pub fn nearest(&self, kind: KeypointType, p: &Point2) -> Option<(&'a KeypointDetection, f64)> {
        self.of_type(kind)
            .iter()
            .map(|d| (*d, (d.position() - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
    }
}

/// Support of a candidate and its keypoints moved onto the supporting
/// detections.
///
/// At each pyramid scale, a keypoint counts when a detection of its type at
/// that scale lies within `support_radius * ied`. The scale with the most
/// support wins, the smallest scale breaking ties.
pub fn compute_support(
    cand: &FaceCandidate,
    index: &DetectionIndex,
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> (usize, Vec<Point2>) {
    let radius = config.support_radius * cand.ied;
    let kinds: Vec<Option<KeypointType>> = shape
        .keypoint_names
        .iter()
        .map(|n| n.parse::<KeypointType>().ok())
        .collect();
    let mut best: (usize, Vec<Point2>) = (0, cand.keypoints.clone());
    for &scale in index.scales() {
        let mut count = 0;
        let mut snapped = cand.keypoints.clone();
        for (i, p) in cand.keypoints.iter().enumerate() {
            let Some(kind) = kinds[i] else { continue };
            let hit = index
                .of_type(kind)
                .iter()
                .filter(|d| d.scale == scale)
                .map(|d| (d, (d.position() - p).norm()))
                .filter(|(_, dist)| *dist <= radius)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
            if let Some((d, _)) = hit {
                count += 1;
                snapped[i] = d.position();
            }
        }
        if count > best.0 {
            best = (count, snapped);
        }
    }
    best
}

/// Computes support for every candidate, snaps keypoints, and keeps those
/// with support at least `n_supp`.
pub fn apply_support(
    cands: Vec<FaceCandidate>,
    dets: &[KeypointDetection],
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> Vec<FaceCandidate> {
    let index = DetectionIndex::new(dets);
    let mut cands = cands;
    cands.par_iter_mut().for_each(|c| {
        let (support, snapped) = compute_support(c, &index, shape, config);
        c.support = support;
        c.keypoints = snapped;
    });
    cands.retain(|c| c.support >= config.n_supp);
    cands
}

/// Two features per keypoint type (nearest same-type detection distance as a
/// capped fraction of the IED, and its floored score) followed by the
/// support.
pub fn special_features(
    cand: &FaceCandidate,
    index: &DetectionIndex,
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> [f64; NUM_SPECIAL_FEATURES] {
    let mut out = [0.0; NUM_SPECIAL_FEATURES];
    for (t, kind) in KeypointType::ALL.into_iter().enumerate() {
        let nearest = cand.location(kind, shape).and_then(|p| index.nearest(kind, &p));
        let (dist, score) = match nearest {
            Some((d, dist)) => ((dist / cand.ied).min(config.distance_cap), d.score.max(config.score_floor)),
            None => (config.distance_cap, config.score_floor),
        };
        out[2 * t] = dist;
        out[2 * t + 1] = score;
    }
    out[NUM_SPECIAL_FEATURES - 1] = cand.support as f64;
    out
}

/// Full feature vector of a candidate: source features then special features.
pub fn candidate_feature_vector(
    cand: &FaceCandidate,
    index: &DetectionIndex,
    source: &dyn FeatureSource,
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> Result<Vec<f64>> {
    let mut x = source.candidate_features(cand, shape)?;
    x.extend_from_slice(&special_features(cand, index, shape, config));
    Ok(x)
}

/// Scores every candidate with `model` at its yaw.
pub fn score_candidates(
    cands: &mut [FaceCandidate],
    dets: &[KeypointDetection],
    model: &PsmWeights,
    source: &dyn FeatureSource,
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> Result<()> {
    let index = DetectionIndex::new(dets);
    cands.par_iter_mut().try_for_each(|c| {
        let x = candidate_feature_vector(c, &index, source, shape, config)?;
        c.score = model.score(&x, c.pose.yaw())?;
        Ok(())
    })
}

/// Greedy selection: repeatedly keep the best-scoring candidate above `tau`
/// and discard every candidate overlapping it with IoU at least `overlap`.
/// Equal scores go to the lower id.
pub fn nms(cands: &[FaceCandidate], tau: f64, overlap: f64) -> Vec<FaceCandidate> {
    let mut order: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].score > tau).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(cands[a].id.cmp(&cands[b].id)));
    let boxes: Vec<Box2> = cands.iter().map(FaceCandidate::bbox).collect();
    let mut alive = vec![true; cands.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if !alive[i] {
            continue;
        }
        kept.push(cands[i].clone());
        for &j in &order {
            if alive[j] && iou(&boxes[i], &boxes[j]) >= overlap {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Squared distance between a candidate's keypoints and its rigid
/// prediction, in units of squared IED.
pub fn coherence(cand: &FaceCandidate, shape: &ShapeModel) -> f64 {
    let predicted = apply_pose(&cand.pose, &shape.points);
    let r2: f64 = predicted.iter().zip(&cand.keypoints).map(|(a, b)| (a - b).norm_squared()).sum();
    r2 / (cand.ied * cand.ied)
}

/// Data term, coherence prior, and an infinite penalty when two faces
/// overlap with IoU at least `overlap`.
pub fn total_energy(faces: &[FaceCandidate], tau: f64, overlap: f64, shape: &ShapeModel) -> f64 {
    let boxes: Vec<Box2> = faces.iter().map(FaceCandidate::bbox).collect();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if iou(&boxes[i], &boxes[j]) >= overlap {
                return f64::INFINITY;
            }
        }
    }
    faces.iter().map(|f| tau - f.score + coherence(f, shape)).sum()
}

/// Tangent axes and normal at model keypoint `i`, from the plane through it
/// and its two nearest model keypoints. The normal points toward `+z`; the
/// first axis is the model `x` axis projected onto the plane.
pub fn tangent_frame(shape: &ShapeModel, i: usize) -> Result<[Vector3<f64>; 3]> {
    if shape.len() < 3 {
        return Err(Error::Degenerate("tangent plane needs three model keypoints".into()));
    }
    let r = shape.points.column(i).into_owned();
    let mut others: Vec<(usize, f64)> =
        (0..shape.len()).filter(|&j| j != i).map(|j| (j, (shape.points.column(j) - r).norm())).collect();
    others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let a = shape.points.column(others[0].0) - r;
    let b = shape.points.column(others[1].0) - r;
    let mut n = a.cross(&b);
    if n.norm() <= 1e-12 * a.norm() * b.norm() {
        return Err(Error::Degenerate(format!("keypoint {i} and its neighbours are collinear")));
    }
    n.normalize_mut();
    if n.z < 0.0 {
        n = -n;
    }
    let mut e1 = Vector3::x() - n * n.x;
    if e1.norm() < 1e-6 {
        e1 = Vector3::y() - n * n.y;
    }
    e1.normalize_mut();
    let e2 = n.cross(&e1);
    Ok([e1, e2, n])
}

/// `grid_n x grid_n` points on the tangent plane at model keypoint
/// `keypoint`, `spacing` model units apart, mapped through `pose`. Rows run
/// along the second tangent axis, columns along the first.
pub fn sampling_grid(
    pose: &Pose6,
    shape: &ShapeModel,
    keypoint: usize,
    grid_n: usize,
    spacing: f64,
) -> Result<Vec<Point2>> {
    if grid_n % 2 == 0 {
        return Err(Error::InvalidInput(format!("grid size must be odd, got {grid_n}")));
    }
    if keypoint >= shape.len() {
        return Err(Error::InvalidInput(format!("keypoint {keypoint} out of range")));
    }
    let [e1, e2, n] = tangent_frame(shape, keypoint)?;
    let facing = (pose.rotation.matrix() * n).z;
    if facing.abs() < GRID_AREA_TOL {
        return Err(Error::Degenerate(format!("tangent plane at keypoint {keypoint} is seen edge-on")));
    }
    let r = shape.points.column(keypoint).into_owned();
    let h = (grid_n / 2) as f64;
    let mut out = Vec::with_capacity(grid_n * grid_n);
    for row in 0..grid_n {
        for col in 0..grid_n {
            let (a, b) = (col as f64 - h, row as f64 - h);
            let p = r + (e1 * a + e2 * b) * spacing;
            out.push(pose.apply(&Point3::from(p)));
        }
    }
    Ok(out)
}

/// Candidates at each stage of detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub generated: usize,
    /// Scored candidates that passed support pruning.
    pub candidates: Vec<FaceCandidate>,
    /// Faces kept by non-maximal suppression.
    pub faces: Vec<FaceCandidate>,
}

/// Full detection on one image: proposals, support pruning, scoring, NMS.
pub fn detect_faces(
    dets: &[KeypointDetection],
    regs: &BTreeMap<KeypointType, PoseRegressor>,
    model: &PsmWeights,
    source: &dyn FeatureSource,
    shape: &ShapeModel,
    config: &DetectionConfig,
) -> Result<DetectionOutput> {
    config.validate()?;
    let generated = generate_candidates(dets, regs, source, shape)?;
    let count = generated.len();
    let mut candidates = apply_support(generated, dets, shape, config);
    score_candidates(&mut candidates, dets, model, source, shape, config)?;
    let faces = nms(&candidates, config.tau, config.overlap);
    Ok(DetectionOutput { generated: count, candidates, faces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rpy_to_rotation;
    use crate::pose_regression::encode_rel;
    use crate::shape::canonical_face_shape;
    use nalgebra::{Matrix3xX, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn det(id: usize, kind: KeypointType, p: Point2, scale: f64, score: f64) -> KeypointDetection {
        KeypointDetection { scene: 0, id, kind, x: p.x, y: p.y, scale, score, feature_ref: None }
    }

    fn candidate(pose: Pose6, shape: &ShapeModel) -> FaceCandidate {
        FaceCandidate {
            id: 0,
            pose,
            keypoints: apply_pose(&pose, &shape.points),
            ied: candidate_ied(&pose, shape).unwrap(),
            support: 0,
            score: 0.0,
            detection: 0,
            source: KeypointType::EyeLeft,
        }
    }

    fn test_pose() -> Pose6 {
        Pose6::from_rpy(Vector2::new(200.0, 150.0), 80.0, Rpy::new(0.1, -0.2, 0.4)).unwrap()
    }

    #[test]
    fn oracle_regressor_recovers_pose() {
        let shape = canonical_face_shape();
        let truth = test_pose();
        let p = apply_pose(&truth, &shape.points);
        let d = det(7, KeypointType::NoseLeft, p[2], 2.0, 1.0);
        let cands = generate_candidates_with(&[d], &shape, |d| Ok(Some(encode_rel(&truth, &d.anchor()?)?))).unwrap();
        assert_eq!(cands.len(), 1);
        let c = &cands[0];
        assert_eq!(c.detection, 7);
        assert!((c.pose.u - truth.u).norm() < 1e-9);
        assert!((c.pose.rotation.matrix() - truth.rotation.matrix()).norm() < 1e-12);
        for (a, b) in c.keypoints.iter().zip(&p) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!(coherence(c, &shape) < 1e-24);
        assert!((c.ied - truth.s * shape.eye_distance().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_and_rejected_proposals() {
        let shape = canonical_face_shape();
        assert!(generate_candidates_with(&[], &shape, |_| Ok(None)).unwrap().is_empty());
        let d = det(0, KeypointType::Chin, Point2::new(1.0, 1.0), 1.0, 0.0);
        let cands = generate_candidates_with(&[d.clone()], &shape, |_| Ok(Some(RelPose([0.0; 6])))).unwrap();
        assert!(cands.is_empty());
        let regs = BTreeMap::new();
        struct NoFeatures;
        impl FeatureSource for NoFeatures {
            fn detection_features(&self, _: &KeypointDetection) -> Result<Vec<f64>> {
                Ok(Vec::new())
            }
            fn candidate_features(&self, _: &FaceCandidate, _: &ShapeModel) -> Result<Vec<f64>> {
                Ok(Vec::new())
            }
        }
        assert!(matches!(generate_candidates(&[d], &regs, &NoFeatures, &shape), Err(Error::MissingRegressor(KeypointType::Chin))));
    }

    #[test]
    fn full_support_at_one_scale() {
        let shape = canonical_face_shape();
        let c = candidate(test_pose(), &shape);
        let dets: Vec<KeypointDetection> =
            KeypointType::FACE.iter().enumerate().map(|(i, &k)| det(i, k, c.keypoints[i], 2.0, 0.5)).collect();
        let index = DetectionIndex::new(&dets);
        let (support, snapped) = compute_support(&c, &index, &shape, &DetectionConfig::default());
        assert_eq!(support, 9);
        assert_eq!(snapped, c.keypoints);
    }

    #[test]
    fn support_radius_is_inclusive_at_one_tenth() {
        let shape = canonical_face_shape();
        let c = candidate(test_pose(), &shape);
        let config = DetectionConfig::default();
        let off = |f: f64| vec![det(0, KeypointType::Chin, c.keypoints[8] + Vector2::new(f * c.ied, 0.0), 1.0, 0.0)];
        let far = off(0.11);
        assert_eq!(compute_support(&c, &DetectionIndex::new(&far), &shape, &config).0, 0);
        let near = off(0.09);
        let (support, snapped) = compute_support(&c, &DetectionIndex::new(&near), &shape, &config);
        assert_eq!(support, 1);
        assert_eq!(snapped[8], near[0].position());
    }

    #[test]
    fn support_matches_brute_force() {
        let shape = canonical_face_shape();
        let config = DetectionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = candidate(test_pose(), &shape);
            let scales = [1.0, 1.189, 1.414];
            let dets: Vec<KeypointDetection> = (0..40)
                .map(|id| {
                    let i = rng.gen_range(0..9);
                    let jitter = Vector2::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)) * c.ied;
                    det(id, KeypointType::FACE[i], c.keypoints[i] + jitter, scales[rng.gen_range(0..3)], 0.0)
                })
                .collect();
            let (support, _) = compute_support(&c, &DetectionIndex::new(&dets), &shape, &config);
            let mut brute = 0;
            for &s in &scales {
                let mut count = 0;
                for i in 0..9 {
                    let mut hit = false;
                    for d in &dets {
                        if d.scale == s && d.kind == KeypointType::FACE[i] && (d.position() - c.keypoints[i]).norm() <= 0.1 * c.ied {
                            hit = true;
                        }
                    }
                    count += usize::from(hit);
                }
                brute = brute.max(count);
            }
            assert_eq!(support, brute);
        }
    }

    #[test]
    fn special_features_examples() {
        let shape = canonical_face_shape();
        let config = DetectionConfig::default();
        let mut c = candidate(test_pose(), &shape);
        c.support = 9;
        let mut dets: Vec<KeypointDetection> =
            KeypointType::FACE.iter().enumerate().map(|(i, &k)| det(i, k, c.keypoints[i], 1.0, 0.0)).collect();
        dets.push(det(9, KeypointType::FaceCenter, c.center(), 1.0, 0.0));
        let f = special_features(&c, &DetectionIndex::new(&dets), &shape, &config);
        assert!(f[..20].iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(f[20], 9.0);

        c.support = 0;
        let f = special_features(&c, &DetectionIndex::new(&[]), &shape, &config);
        for t in 0..10 {
            assert_eq!(f[2 * t], 0.32);
            assert_eq!(f[2 * t + 1], -1.1);
        }
        assert_eq!(f[20], 0.0);
    }

    #[test]
    fn special_features_match_brute_force() {
        let shape = canonical_face_shape();
        let config = DetectionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let c = candidate(test_pose(), &shape);
            let dets: Vec<KeypointDetection> = (0..15)
                .map(|id| {
                    let kind = KeypointType::ALL[rng.gen_range(0..10)];
                    let p = c.center() + Vector2::new(rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0));
                    det(id, kind, p, 1.0, rng.gen_range(-3.0..3.0))
                })
                .collect();
            let f = special_features(&c, &DetectionIndex::new(&dets), &shape, &config);
            for (t, kind) in KeypointType::ALL.into_iter().enumerate() {
                let loc = if kind == KeypointType::FaceCenter { c.center() } else { c.keypoints[t] };
                let mut best: Option<(f64, f64)> = None;
                for d in dets.iter().filter(|d| d.kind == kind) {
                    let dist = ((d.x - loc.x).powi(2) + (d.y - loc.y).powi(2)).sqrt();
                    if best.map_or(true, |b| dist < b.0) {
                        best = Some((dist, d.score));
                    }
                }
                let (dist, score) = best.map_or((0.32, -1.1), |(dd, s)| ((dd / c.ied).min(0.32), s.max(-1.1)));
                assert!((f[2 * t] - dist).abs() < 1e-12);
                assert_eq!(f[2 * t + 1], score);
            }
        }
    }

    fn boxed(id: usize, x: f64, y: f64, size: f64, score: f64) -> FaceCandidate {
        let keypoints = vec![Point2::new(x, y), Point2::new(x + size, y + size)];
        FaceCandidate {
            id,
            pose: Pose6::identity(),
            keypoints,
            ied: 1.0,
            support: 0,
            score,
            detection: id,
            source: KeypointType::FaceCenter,
        }
    }

    #[test]
    fn nms_examples() {
        // IoU of [0,10]^2 and [0,10]x[0,8.57..] style overlap around 0.6
        let a = boxed(0, 0.0, 0.0, 10.0, 5.0);
        let b = boxed(1, 2.5, 0.0, 10.0, 3.0);
        assert!(iou(&a.bbox(), &b.bbox()) > 0.5);
        let kept = nms(&[a.clone(), b], 0.0, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, 0);

        let c = boxed(2, 50.0, 50.0, 10.0, 2.0);
        let d = boxed(3, 0.0, 0.0, 10.0, -1.0);
        let kept = nms(&[a.clone(), c.clone(), d], 0.0, 0.5);
        assert_eq!(kept.iter().map(|f| f.id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn nms_ties_go_to_lower_id() {
        let a = boxed(4, 0.0, 0.0, 10.0, 1.0);
        let b = boxed(2, 1.0, 0.0, 10.0, 1.0);
        assert_eq!(nms(&[a, b], 0.0, 0.5)[0].id, 2);
    }

    #[test]
    fn total_energy_examples() {
        let shape = ShapeModel::new(Matrix3xX::from_column_slice(&[-0.5, 0.0, 0.0, 0.5, 0.0, 0.0]), vec!["eye_left".into(), "eye_right".into()]).unwrap();
        let pose = |x: f64| Pose6::new(Vector2::new(x, 0.0), 10.0, Rotation3::identity()).unwrap();
        let mut a = candidate(pose(0.0), &shape);
        a.score = 3.0;
        let mut b = candidate(pose(100.0), &shape);
        b.score = 2.0;
        b.keypoints[0].y += 1.0;
        let e = total_energy(&[a.clone(), b.clone()], 1.0, 0.5, &shape);
        assert!((e - ((1.0 - 3.0) + (1.0 - 2.0) + 1.0 / 100.0)).abs() < 1e-12);
        let clash = candidate(pose(0.0), &shape);
        assert_eq!(total_energy(&[a, clash], 1.0, 0.5, &shape), f64::INFINITY);
    }

    /// Keypoint 0 sits in the `z = 0` plane with its two nearest neighbours.
    fn planar_patch() -> ShapeModel {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 3.0]];
        ShapeModel::new(Matrix3xX::from_fn(4, |r, c| pts[c][r]), (0..4).map(|i| format!("k{i}")).collect()).unwrap()
    }

    #[test]
    fn identity_grid_is_axis_aligned() {
        let grid = sampling_grid(&Pose6::identity(), &planar_patch(), 0, 3, 1.0).unwrap();
        let mut expected = Vec::new();
        for b in -1..=1 {
            for a in -1..=1 {
                expected.push(Point2::new(a as f64, b as f64));
            }
        }
        for (g, e) in grid.iter().zip(&expected) {
            assert!((g - e).norm() < 1e-15);
        }
        assert!(sampling_grid(&Pose6::identity(), &planar_patch(), 0, 4, 1.0).is_err());
    }

    #[test]
    fn yawed_grid_is_foreshortened() {
        let shape = planar_patch();
        let pose = Pose6::new(Vector2::zeros(), 1.0, rpy_to_rotation(Rpy::new(0.0, 0.0, FRAC_PI_4))).unwrap();
        let grid = sampling_grid(&pose, &shape, 0, 3, 1.0).unwrap();
        let x_step = grid[5] - grid[4];
        let y_step = grid[7] - grid[4];
        assert!((x_step.norm() - FRAC_PI_4.cos()).abs() < 1e-12);
        assert!((y_step.norm() - 1.0).abs() < 1e-12);

        let edge_on = Pose6::new(Vector2::zeros(), 1.0, rpy_to_rotation(Rpy::new(0.0, 0.0, std::f64::consts::FRAC_PI_2))).unwrap();
        assert!(matches!(sampling_grid(&edge_on, &shape, 0, 3, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grid_center_is_projected_keypoint() {
        let shape = canonical_face_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pose = Pose6::from_rpy(
                Vector2::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)),
                rng.gen_range(1.0..100.0),
                Rpy::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-1.2..1.2)),
            )
            .unwrap();
            let i = rng.gen_range(0..9);
            match sampling_grid(&pose, &shape, i, 5, 0.05) {
                Ok(grid) => assert!((grid[12] - pose.apply(&shape.point(i))).norm() < 1e-9),
                Err(Error::Degenerate(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dets = vec![
            det(0, KeypointType::EyeLeft, Point2::new(1.5, 2.0), 1.189, 0.25),
            det(1, KeypointType::FaceCenter, Point2::new(-3.0, 4.0), 2.0, -0.5),
        ];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &dets).unwrap();
        assert_eq!(read_detections_jsonl(buf.as_slice(), "d.jsonl").unwrap(), dets);
        let bad = b"{\"id\":0,\"type\":\"eye_left\",\"x\":0,\"y\":0,\"scale\":1,\"score\":0}\nnot json\n";
        match read_detections_jsonl(&bad[..], "d.jsonl") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_round_trip() {
        let shape = canonical_face_shape();
        let mut c = candidate(test_pose(), &shape);
        c.score = 1.25;
        let r = c.to_record();
        let back: CandidateRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.to_candidate().unwrap(), c);
    }
}
