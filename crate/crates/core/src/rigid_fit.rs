//! Closed-form similarity fitting between point sets and iterative fitting of
//! a projected rigid pose with hidden depths.

use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3, Matrix3xX, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{Pose6, Rotation3};

/// Relative singular-value threshold used for the rank test on the source set.
const RANK_TOL: f64 = 1e-10;

/// Fitted scales below this fraction of `|B*| / |A*|` count as zero.
const SCALE_TOL: f64 = 1e-12;

/// Similarity transform `(u, s, R)` minimizing `|1 u^T + s A R - B|^2`, with
/// points stored as rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidFitResult {
    pub translation: DVector<f64>,
    pub scale: f64,
    pub rotation: DMatrix<f64>,
    /// Sum of squared errors of the fitted transform.
    pub residual: f64,
}

impl RigidFitResult {
    /// Applies the transform to the rows of `a`.
    pub fn transform(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = a * &self.rotation * self.scale;
        for mut row in out.row_iter_mut() {
            row += self.translation.transpose();
        }
        out
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

fn centered(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Schonemann's orthogonal Procrustes fit with scale.
///
/// `a` and `b` are `p x d` with one point per row. Both are column-centered,
/// `R = U V^T` comes from the SVD of `A*^T B*`, then
/// `s = tr(R^T A*^T B*) / tr(A*^T A*)` and `u = mean(B) - s mean(A) R`.
/// When `U V^T` is a reflection the column of `U` paired with the smallest
/// singular value is negated, so `det(R) = +1`.
pub fn fit_rigid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<RigidFitResult> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "point sets differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (p, d) = a.shape();
    if p < 3 || d == 0 {
        return Err(Error::InsufficientData(format!("need at least 3 points, got {p}")));
    }
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("point sets contain non-finite values".into()));
    }

    let mean_a = column_means(a);
    let mean_b = column_means(b);
    let a_c = centered(a, &mean_a);
    let b_c = centered(b, &mean_b);

    let sv_a = a_c.singular_values();
    let sv_max = sv_a.max();
    let rank = sv_a.iter().filter(|&&v| v > RANK_TOL * sv_max).count();
    if sv_max == 0.0 || rank + 1 < d {
        return Err(Error::Degenerate(format!(
            "source points span rank {rank}, need at least {}",
            d.saturating_sub(1)
        )));
    }

    let cross = a_c.transpose() * &b_c;
    let svd = cross.clone().svd(true, true);
    let mut u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut rotation = &u * &v_t;
    if rotation.determinant() < 0.0 {
        let weakest = svd.singular_values.argmin().0;
        u.column_mut(weakest).neg_mut();
        rotation = &u * &v_t;
    }

    let scale = (rotation.transpose() * &cross).trace() / (a_c.transpose() * &a_c).trace();
    let scale_floor = SCALE_TOL * (b_c.norm() / a_c.norm());
    if !(scale > scale_floor) {
        return Err(Error::Degenerate(format!("fitted scale {scale} is not positive")));
    }
    let translation = &mean_b - (rotation.transpose() * &mean_a) * scale;

    let mut fit = RigidFitResult { translation, scale, rotation, residual: 0.0 };
    fit.residual = (fit.transform(a) - b).norm_squared();
    Ok(fit)
}

/// Stopping rule for [`fit_rigid_projection_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionFitOptions {
    pub max_iter: usize,
    /// Stop once an iteration improves the residual by less than this
    /// fraction of its previous value.
    pub rel_tol: f64,
}

impl Default for ProjectionFitOptions {
    fn default() -> Self {
        Self { max_iter: 50, rel_tol: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionFit {
    pub pose: Pose6,
    /// `|u 1 + s pi(R F) - P|^2` of the returned pose.
    pub residual: f64,
    /// Projection residual after each iteration.
    pub trace: Vec<f64>,
}

/// Rounding uncertainty of a computed `residual` for targets `points`. Two
/// residuals closer than this cannot be ordered reliably.
pub fn residual_noise_floor(points: &Matrix2xX<f64>, residual: f64) -> f64 {
    let delta = 64.0 * f64::EPSILON * points.norm();
    delta * (2.0 * residual.max(0.0).sqrt() + delta)
}

/// Fits a projected rigid pose with the default options and `n_iter`
/// iterations at most.
pub fn fit_rigid_projection(
    model: &Matrix3xX<f64>,
    points: &Matrix2xX<f64>,
    n_iter: usize,
) -> Result<ProjectionFit> {
    fit_rigid_projection_with(
        model,
        points,
        ProjectionFitOptions { max_iter: n_iter, ..Default::default() },
    )
}

/// Finds `(u, s, R)` minimizing `|u 1 + s pi(R F) - P|^2`.
///
/// The unknown depths of the image points are carried as a third column of
/// the target `B = (P^T, z)`, initialized to zero. Each iteration fits a 3D
/// similarity from `F^T` to `B` and replaces `z` with the third column of
/// `s F^T R`.
pub fn fit_rigid_projection_with(
    model: &Matrix3xX<f64>,
    points: &Matrix2xX<f64>,
    options: ProjectionFitOptions,
) -> Result<ProjectionFit> {
    let l = model.ncols();
    if points.ncols() != l {
        return Err(Error::DimensionMismatch { expected: l, got: points.ncols() });
    }
    if l < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 points, got {l}")));
    }
    if options.max_iter == 0 {
        return Err(Error::InvalidConfig("iteration count must be at least 1".into()));
    }

    let source = DMatrix::from_fn(l, 3, |i, j| model[(j, i)]);
    let mut target = DMatrix::from_fn(l, 3, |i, j| if j < 2 { points[(j, i)] } else { 0.0 });

    let mut trace = Vec::with_capacity(options.max_iter);
    let mut best: Option<(RigidFitResult, f64)> = None;
    for _ in 0..options.max_iter {
        let fit = fit_rigid(&source, &target)?;
        let rotated = &source * &fit.rotation * fit.scale;
        let mut residual = 0.0;
        for i in 0..l {
            for j in 0..2 {
                let r = fit.translation[j] + rotated[(i, j)] - points[(j, i)];
                residual += r * r;
            }
        }
        trace.push(residual);
        for i in 0..l {
            target[(i, 2)] = rotated[(i, 2)];
        }
        let prev = best.as_ref().map(|b| b.1);
        if prev.map_or(true, |prev| residual <= prev) {
            best = Some((fit, residual));
        }
        if let Some(prev) = prev {
            // Also stops on an increase, which only happens at rounding level.
            if prev - residual <= options.rel_tol * prev {
                break;
            }
        }
        if residual == 0.0 {
            break;
        }
    }

    let (fit, residual) = best.expect("at least one iteration");
    let r: Matrix3<f64> = Matrix3::from_fn(|i, j| fit.rotation[(j, i)]);
    let pose = Pose6::new(
        Vector2::new(fit.translation[0], fit.translation[1]),
        fit.scale,
        Rotation3::from_matrix_unchecked(r),
    )?;
    Ok(ProjectionFit { pose, residual, trace })
}

/// Sum of squared reprojection errors of `pose` on the selected columns.
pub fn projection_residual(
    pose: &Pose6,
    model: &Matrix3xX<f64>,
    points: &Matrix2xX<f64>,
) -> f64 {
    let lin = pose.linear_part();
    let mut total = 0.0;
    for (f, p) in model.column_iter().zip(points.column_iter()) {
        let q = lin * f + pose.u;
        total += (q - p).norm_squared();
    }
    total
}
