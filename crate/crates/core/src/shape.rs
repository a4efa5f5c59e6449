//! The rigid 3D keypoint model and its estimation from 2D annotations.
//!
//! Learning alternates two exact minimizations of
//! `E = sum_i |u_i 1 + s_i pi(R_i F) - P_i|^2` over the visible keypoints:
//! per-face projected rigid fits with `F` fixed, then a linear least-squares
//! solve for every column of `F` with the poses fixed.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX, SymmetricEigen, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose6, Rotation3};
use crate::keypoints::KeypointType;
use crate::rigid_fit::{fit_rigid_projection_with, projection_residual, ProjectionFitOptions};
use crate::SCHEMA_VERSION;

/// Relative eigenvalue floor below which the per-column normal equations are
/// treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// How a shape matrix was brought to canonical form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centered: bool,
    /// Frobenius norm of the centered matrix before rescaling.
    pub original_norm: f64,
    /// Whether the depth axis was flipped to put the nose in front.
    pub depth_flipped: bool,
}

/// A rigid `3 x L` keypoint configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub points: Matrix3xX<f64>,
    pub keypoint_names: Vec<String>,
    pub normalization: Normalization,
}

#[derive(Serialize, Deserialize)]
struct ShapeModelFile {
    schema_version: u32,
    keypoint_names: Vec<String>,
    /// Rows `x`, `y`, `z`.
    points: [Vec<f64>; 3],
    normalization: Normalization,
}

impl ShapeModel {
    pub fn new(points: Matrix3xX<f64>, keypoint_names: Vec<String>) -> Result<Self> {
        if points.ncols() != keypoint_names.len() {
            return Err(Error::DimensionMismatch {
                expected: keypoint_names.len(),
                got: points.ncols(),
            });
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("shape has non-finite coordinates".into()));
        }
        Ok(Self { points, keypoint_names, normalization: Normalization::default() })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn point(&self, i: usize) -> Point3 {
        Point3::from(self.points.column(i).into_owned())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }

    /// 3D distance between the two eyes in model units.
    pub fn eye_distance(&self) -> Result<f64> {
        let l = self.index_of(KeypointType::EyeLeft.name());
        let r = self.index_of(KeypointType::EyeRight.name());
        match (l, r) {
            (Some(l), Some(r)) => Ok((self.points.column(l) - self.points.column(r)).norm()),
            _ => Err(Error::InvalidInput("shape has no eye keypoints".into())),
        }
    }

    /// Centers the columns and rescales to unit Frobenius norm.
    pub fn normalized(mut self) -> Result<Self> {
        let mean: Vector3<f64> = self.points.column_mean();
        for mut c in self.points.column_iter_mut() {
            c -= mean;
        }
        let norm = self.points.norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("shape collapses to a point".into()));
        }
        self.points /= norm;
        self.normalization.centered = true;
        self.normalization.original_norm = norm;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ShapeModelFile {
            schema_version: SCHEMA_VERSION,
            keypoint_names: self.keypoint_names.clone(),
            points: [0, 1, 2].map(|r| self.points.row(r).iter().copied().collect()),
            normalization: self.normalization.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ShapeModelFile = serde_json::from_str(text)?;
        let l = file.keypoint_names.len();
        if file.points.iter().any(|r| r.len() != l) {
            return Err(Error::InvalidInput("shape rows differ in length".into()));
        }
        let points = Matrix3xX::from_fn(l, |r, c| file.points[r][c]);
        let mut shape = ShapeModel::new(points, file.keypoint_names)?;
        shape.normalization = file.normalization;
        Ok(shape)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Reference face with the eye, nose-side, mouth-corner, bottom-ear and chin
/// keypoints; `x` to the right, `y` down, `z` toward the camera.
pub fn canonical_face_shape() -> ShapeModel {
    #[rustfmt::skip]
    let raw = [
        [-0.50, 0.00, 0.00],
        [ 0.50, 0.00, 0.00],
        [-0.20, 0.55, 0.30],
        [ 0.20, 0.55, 0.30],
        [-0.35, 0.95, 0.10],
        [ 0.35, 0.95, 0.10],
        [-0.90, 0.50, -0.70],
        [ 0.90, 0.50, -0.70],
        [ 0.00, 1.40, 0.05],
    ];
    let points = Matrix3xX::from_fn(raw.len(), |r, c| raw[c][r]);
    let names = KeypointType::FACE.iter().map(|k| k.name().to_string()).collect();
    ShapeModel::new(points, names)
        .and_then(ShapeModel::normalized)
        .expect("canonical shape is valid")
}

/// One annotated face.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub face_id: String,
    /// `2 x L`, entries of invisible keypoints are ignored.
    pub points: Matrix2xX<f64>,
    pub visible: Vec<bool>,
}

impl Annotation {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    fn visible_columns(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }
}

/// Annotated faces sharing one keypoint ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub keypoint_names: Vec<String>,
    pub faces: Vec<Annotation>,
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationRow {
    face_id: String,
    keypoint_name: String,
    x: f64,
    y: f64,
    visible: String,
}

fn parse_visible(v: &str) -> Option<bool> {
    match v.trim() {
        "1" | "true" | "True" | "TRUE" => Some(true),
        "0" | "false" | "False" | "FALSE" => Some(false),
        _ => None,
    }
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let l = self.keypoint_names.len();
        for face in &self.faces {
            if face.points.ncols() != l || face.visible.len() != l {
                return Err(Error::DimensionMismatch { expected: l, got: face.points.ncols() });
            }
            if face.visible_count() < 4 {
                return Err(Error::InsufficientData(format!(
                    "face {} has {} visible keypoints, need 4",
                    face.face_id,
                    face.visible_count()
                )));
            }
            let finite = face.visible_columns().into_iter().all(|c| {
                face.points[(0, c)].is_finite() && face.points[(1, c)].is_finite()
            });
            if !finite {
                return Err(Error::InvalidInput(format!(
                    "face {} has non-finite coordinates",
                    face.face_id
                )));
            }
        }
        Ok(())
    }

    /// Reads `face_id,keypoint_name,x,y,visible` rows. With `names` given the
    /// columns follow that order and unknown names are rejected; otherwise
    /// keypoints are ordered by first appearance. Missing rows are invisible.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        source: &str,
        names: Option<&[String]>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut keypoint_names: Vec<String> = names.map(|n| n.to_vec()).unwrap_or_default();
        let mut face_order: Vec<String> = Vec::new();
        let mut entries: HashMap<(String, usize), (f64, f64, bool, u64)> = HashMap::new();

        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { path: source.to_string(), line: 1, message: e.to_string() })?
            .clone();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Parse {
                path: source.to_string(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let record: AnnotationRow = row.deserialize(Some(&headers)).map_err(|e| Error::Parse {
                path: source.to_string(),
                line,
                message: e.to_string(),
            })?;
            let parse_err = |message: String| Error::Parse { path: source.to_string(), line, message };
            let visible = parse_visible(&record.visible)
                .ok_or_else(|| parse_err(format!("bad visibility flag `{}`", record.visible)))?;
            let column = match keypoint_names.iter().position(|n| *n == record.keypoint_name) {
                Some(c) => c,
                None if names.is_none() => {
                    keypoint_names.push(record.keypoint_name.clone());
                    keypoint_names.len() - 1
                }
                None => {
                    return Err(parse_err(format!("unknown keypoint `{}`", record.keypoint_name)))
                }
            };
            if visible && !(record.x.is_finite() && record.y.is_finite()) {
                return Err(parse_err("non-finite coordinate".into()));
            }
            if !face_order.contains(&record.face_id) {
                face_order.push(record.face_id.clone());
            }
            let key = (record.face_id.clone(), column);
            if entries.insert(key, (record.x, record.y, visible, line)).is_some() {
                return Err(parse_err(format!(
                    "duplicate keypoint `{}` for face `{}`",
                    record.keypoint_name, record.face_id
                )));
            }
        }

        let l = keypoint_names.len();
        let faces = face_order
            .into_iter()
            .map(|face_id| {
                let mut points = Matrix2xX::zeros(l);
                let mut visible = vec![false; l];
                for c in 0..l {
                    if let Some(&(x, y, v, _)) = entries.get(&(face_id.clone(), c)) {
                        points[(0, c)] = x;
                        points[(1, c)] = y;
                        visible[c] = v;
                    }
                }
                Annotation { face_id, points, visible }
            })
            .collect();
        Ok(Self { keypoint_names, faces })
    }

    pub fn load_csv(path: &Path, names: Option<&[String]>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, &path.display().to_string(), names)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for face in &self.faces {
            for (c, name) in self.keypoint_names.iter().enumerate() {
                w.serialize(AnnotationRow {
                    face_id: face.face_id.clone(),
                    keypoint_name: name.clone(),
                    x: face.points[(0, c)],
                    y: face.points[(1, c)],
                    visible: if face.visible[c] { "1" } else { "0" }.to_string(),
                })
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn select_columns<const R: usize>(
    m: &nalgebra::Matrix<f64, nalgebra::Const<R>, nalgebra::Dyn, nalgebra::VecStorage<f64, nalgebra::Const<R>, nalgebra::Dyn>>,
    cols: &[usize],
) -> nalgebra::OMatrix<f64, nalgebra::Const<R>, nalgebra::Dyn> {
    nalgebra::OMatrix::<f64, nalgebra::Const<R>, nalgebra::Dyn>::from_fn(cols.len(), |r, c| m[(r, cols[c])])
}

/// Fits the pose of one face using its visible keypoints only.
pub fn fit_face_pose(
    model: &Matrix3xX<f64>,
    face: &Annotation,
    options: ProjectionFitOptions,
) -> Result<(Pose6, f64)> {
    let cols = face.visible_columns();
    let f = select_columns(model, &cols);
    let p = select_columns(&face.points, &cols);
    let fit = fit_rigid_projection_with(&f, &p, options)?;
    Ok((fit.pose, fit.residual))
}

fn face_energy(pose: &Pose6, model: &Matrix3xX<f64>, face: &Annotation) -> f64 {
    let cols = face.visible_columns();
    projection_residual(pose, &select_columns(model, &cols), &select_columns(&face.points, &cols))
}

/// Total reprojection energy over the visible keypoints of all faces.
pub fn shape_energy(poses: &[Pose6], model: &Matrix3xX<f64>, ann: &AnnotationSet) -> f64 {
    poses.iter().zip(&ann.faces).map(|(p, f)| face_energy(p, model, f)).sum()
}

/// Least-squares shape for fixed poses. Columns seen by a single face are
/// solved by pseudo-inverse when `allow_underdetermined`, and reported.
fn solve_shape(
    poses: &[Pose6],
    ann: &AnnotationSet,
    allow_underdetermined: bool,
) -> Result<(Matrix3xX<f64>, bool)> {
    if poses.len() != ann.faces.len() {
        return Err(Error::DimensionMismatch { expected: ann.faces.len(), got: poses.len() });
    }
    let l = ann.keypoint_names.len();
    let mut out = Matrix3xX::zeros(l);
    let mut underdetermined = false;
    for c in 0..l {
        let mut normal = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        let mut seen = 0usize;
        for (pose, face) in poses.iter().zip(&ann.faces) {
            if !face.visible[c] {
                continue;
            }
            seen += 1;
            let m = pose.linear_part();
            let target = Vector2::new(face.points[(0, c)], face.points[(1, c)]) - pose.u;
            normal += m.transpose() * m;
            rhs += m.transpose() * target;
        }
        if seen == 0 {
            return Err(Error::InsufficientData(format!(
                "keypoint `{}` is never visible",
                ann.keypoint_names[c]
            )));
        }
        let eig = SymmetricEigen::new(normal);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let column = if min > SINGULAR_TOL * max {
            normal.cholesky().map(|ch| ch.solve(&rhs)).ok_or_else(|| {
                Error::Degenerate(format!("normal equations for `{}`", ann.keypoint_names[c]))
            })?
        } else if seen == 1 && allow_underdetermined {
            underdetermined = true;
            let pinv = normal
                .pseudo_inverse(SINGULAR_TOL * max)
                .map_err(|e| Error::Degenerate(e.to_string()))?;
            pinv * rhs
        } else {
            return Err(Error::Degenerate(format!(
                "poses do not constrain the depth of `{}` (all views alike)",
                ann.keypoint_names[c]
            )));
        };
        out.set_column(c, &column);
    }
    Ok((out, underdetermined))
}

/// Exact minimizer of the reprojection energy in the shape with all poses
/// fixed. Invisible keypoints do not enter the sums.
pub fn shape_update_step(poses: &[Pose6], ann: &AnnotationSet) -> Result<Matrix3xX<f64>> {
    solve_shape(poses, ann, false).map(|(f, _)| f)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeLearnOptions {
    pub n_outer: usize,
    pub seed: u64,
    /// Independent random starting shapes; the run with the lowest final
    /// energy is returned.
    pub restarts: usize,
    /// Stop when an outer iteration improves the energy by less than this
    /// fraction.
    pub rel_tol: f64,
    pub projection: ProjectionFitOptions,
}

impl Default for ShapeLearnOptions {
    fn default() -> Self {
        Self {
            n_outer: 100,
            seed: 0,
            restarts: 4,
            rel_tol: 1e-10,
            projection: ProjectionFitOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapeLearnResult {
    pub shape: ShapeModel,
    pub poses: Vec<Pose6>,
    /// Energy after every half-step: pose fit, shape solve, pose fit, ...
    pub energy_trace: Vec<f64>,
    pub outer_iterations: usize,
    /// Index of the random start that produced this result.
    pub restart: usize,
    /// Final energy of every random start.
    pub restart_energies: Vec<f64>,
    /// Some keypoint was seen by a single face only, so its depth is a
    /// minimum-norm choice rather than determined by the data.
    pub underdetermined: bool,
}

impl ShapeLearnResult {
    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().expect("trace is never empty")
    }
}

/// Re-centers and rescales `model` in place, adjusting the poses so that every
/// projection stays the same.
fn fix_similarity_gauge(model: &mut Matrix3xX<f64>, poses: &mut [Pose6]) -> Result<f64> {
    let mean: Vector3<f64> = model.column_mean();
    for mut c in model.column_iter_mut() {
        c -= mean;
    }
    let norm = model.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("learned shape collapsed to a point".into()));
    }
    *model /= norm;
    for pose in poses.iter_mut() {
        pose.u += pose.linear_part() * mean;
        pose.s *= norm;
    }
    Ok(norm)
}

/// Rotates `model` into a face-aligned frame (eye axis along `x`, chin in the
/// `xy` half-plane with positive `y`) and mirrors the depth axis if the nose
/// ends up behind the eyes. Poses are updated so every projection is kept:
/// a frame rotation `Q` maps `R_i` to `R_i Q^T`, and the mirror
/// `D = diag(1, 1, -1)` maps `R_i` to `D R_i D`.
///
/// Returns whether the depth axis was mirrored. Shapes without eye and chin
/// keypoints are left as they are.
fn fix_orientation(model: &mut Matrix3xX<f64>, names: &[String], poses: &mut [Pose6]) -> bool {
    let find = |k: KeypointType| names.iter().position(|n| n == k.name());
    let (Some(el), Some(er), Some(chin)) =
        (find(KeypointType::EyeLeft), find(KeypointType::EyeRight), find(KeypointType::Chin))
    else {
        return false;
    };
    let x = model.column(er) - model.column(el);
    let down = model.column(chin) - (model.column(el) + model.column(er)) * 0.5;
    let y = down - x * (x.dot(&down) / x.norm_squared());
    if x.norm() == 0.0 || y.norm() == 0.0 {
        return false;
    }
    let (x, y) = (x.normalize(), y.normalize());
    let q = Matrix3::from_rows(&[x.transpose(), y.transpose(), x.cross(&y).transpose()]);
    *model = q * &*model;
    for pose in poses.iter_mut() {
        pose.rotation = Rotation3::from_matrix_unchecked(pose.rotation.matrix() * q.transpose());
    }

    let nose: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with("nose")).collect();
    if nose.is_empty() {
        return false;
    }
    let depth = nose.iter().map(|&i| model[(2, i)]).sum::<f64>() / nose.len() as f64;
    if depth >= 0.0 {
        return false;
    }
    model.row_mut(2).neg_mut();
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    for pose in poses.iter_mut() {
        pose.rotation = Rotation3::from_matrix_unchecked(flip * pose.rotation.matrix() * flip);
    }
    true
}

/// Learns a rigid shape from annotations.
///
/// Each start draws a `3 x L` shape from a unit Gaussian (all starts come from
/// one stream seeded with `options.seed`) and alternates pose and shape
/// half-steps until the energy stalls or `n_outer` iterations pass.
pub fn learn_shape(ann: &AnnotationSet, options: ShapeLearnOptions) -> Result<ShapeLearnResult> {
    ann.validate()?;
    if ann.faces.is_empty() {
        return Err(Error::InsufficientData("no annotated faces".into()));
    }
    if options.n_outer == 0 || options.restarts == 0 {
        return Err(Error::InvalidConfig("n_outer and restarts must be at least 1".into()));
    }
    let l = ann.keypoint_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let starts: Vec<Matrix3xX<f64>> = (0..options.restarts)
        .map(|_| Matrix3xX::from_fn(l, |_, _| StandardNormal.sample(&mut rng)))
        .collect();

    let runs: Vec<Result<ShapeLearnResult>> =
        starts.into_par_iter().map(|start| alternate(ann, start, &options)).collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let restart_energies: Vec<f64> = runs.iter().map(|r| r.final_energy()).collect();
    let (best, _) = restart_energies
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc });
    let mut result = runs.into_iter().nth(best).expect("at least one restart");
    result.restart = best;
    result.restart_energies = restart_energies;
    Ok(result)
}

fn alternate(
    ann: &AnnotationSet,
    mut model: Matrix3xX<f64>,
    options: &ShapeLearnOptions,
) -> Result<ShapeLearnResult> {
    let mut poses: Vec<Pose6> = Vec::new();
    let mut trace = Vec::new();
    let mut underdetermined = false;
    let mut previous: Option<f64> = None;
    let mut outer = 0;
    while outer < options.n_outer {
        outer += 1;
        // Pose half-step. A fresh fit replaces the previous pose only when it
        // does not raise that face's energy.
        let fitted: Vec<Result<(Pose6, f64)>> = ann
            .faces
            .par_iter()
            .enumerate()
            .map(|(i, face)| {
                let (pose, res) = fit_face_pose(&model, face, options.projection)?;
                if let Some(prev) = poses.get(i) {
                    let prev_res = face_energy(prev, &model, face);
                    if prev_res <= res {
                        return Ok((*prev, prev_res));
                    }
                }
                Ok((pose, res))
            })
            .collect();
        let fitted = fitted.into_iter().collect::<Result<Vec<_>>>()?;
        poses = fitted.iter().map(|(p, _)| *p).collect();
        trace.push(fitted.iter().map(|(_, r)| r).sum());

        // Shape half-step.
        let (next, under) = solve_shape(&poses, ann, ann.faces.len() == 1)?;
        underdetermined = under;
        model = next;
        fix_similarity_gauge(&mut model, &mut poses)?;
        let energy = shape_energy(&poses, &model, ann);
        trace.push(energy);

        let scale = ann.faces.iter().map(|f| f.points.norm_squared()).sum::<f64>();
        let stalled = previous.is_some_and(|before| before - energy <= options.rel_tol * before);
        if energy <= 1e-30 * scale || stalled {
            break;
        }
        previous = Some(energy);
    }

    let norm = fix_similarity_gauge(&mut model, &mut poses)?;
    let flipped = fix_orientation(&mut model, &ann.keypoint_names, &mut poses);
    let mut shape = ShapeModel::new(model, ann.keypoint_names.clone())?;
    shape.normalization = Normalization { centered: true, original_norm: norm, depth_flipped: flipped };
    Ok(ShapeLearnResult {
        shape,
        poses,
        energy_trace: trace,
        outer_iterations: outer,
        restart: 0,
        restart_energies: Vec::new(),
        underdetermined,
    })
}

/// Distance between two shapes after centering, scaling both to unit
/// Frobenius norm and rotating `b` onto `a` by the best proper rotation.
pub fn procrustes_distance(a: &Matrix3xX<f64>, b: &Matrix3xX<f64>) -> f64 {
    let canon = |m: &Matrix3xX<f64>| {
        let mean: Vector3<f64> = m.column_mean();
        let mut c = m.clone();
        for mut col in c.column_iter_mut() {
            col -= mean;
        }
        let n = c.norm();
        c / n
    };
    let (x, y) = (canon(a), canon(b));
    let cross: Matrix3<f64> = &x * y.transpose();
    let svd = cross.svd(true, true);
    let (mut u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if (u * v_t).determinant() < 0.0 {
        let weakest = svd.singular_values.argmin().0;
        u.column_mut(weakest).neg_mut();
    }
    let rot = u * v_t;
    (x - rot * y).norm()
}
