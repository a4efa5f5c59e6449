//! Additive binned regression from feature vectors to a pose relative to a
//! detection anchor.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose6, Rpy};
use crate::keypoints::KeypointType;
use crate::psm::{bin_index, equal_width_edges, removal_schedule};

pub const DEFAULT_BINS: usize = 32;

/// `(u.x/s0 - x0, u.y/s0 - y0, s/s0, pitch, yaw, roll)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelPose(pub [f64; 6]);

/// Detection location `(x0, y0)` in units of its pyramid scale `s0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x0: f64,
    pub y0: f64,
    pub s0: f64,
}

impl Anchor {
    /// Anchor of a detection at `position` (base-image units) found at
    /// pyramid scale `scale`.
    pub fn from_detection(position: Point2, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("anchor scale must be positive, got {scale}")));
        }
        Ok(Self { x0: position.x / scale, y0: position.y / scale, s0: scale })
    }
}

pub fn encode_rel(pose: &Pose6, anchor: &Anchor) -> Result<RelPose> {
    if !(anchor.s0 > 0.0) {
        return Err(Error::InvalidInput("anchor scale must be positive".into()));
    }
    let r = pose.rpy()?;
    Ok(RelPose([
        pose.u.x / anchor.s0 - anchor.x0,
        pose.u.y / anchor.s0 - anchor.y0,
        pose.s / anchor.s0,
        r.pitch,
        r.yaw,
        r.roll,
    ]))
}

/// Pose encoded by `y`, or `None` when its scale is not positive.
pub fn decode_rel(y: &RelPose, anchor: &Anchor) -> Option<Pose6> {
    let [dx, dy, s, pitch, yaw, roll] = y.0;
    if !(s > 0.0 && s.is_finite() && anchor.s0 > 0.0) || y.0.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let u = Vector2::new((dx + anchor.x0) * anchor.s0, (dy + anchor.y0) * anchor.s0);
    Pose6::from_rpy(u, s * anchor.s0, Rpy::new(roll, pitch, yaw)).ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionExample {
    pub x: Vec<f64>,
    pub y: RelPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRegConfig {
    pub bins: usize,
    /// Features kept at the end; all of them when unset.
    pub features: Option<usize>,
    pub epochs: usize,
}

impl Default for PoseRegConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, features: None, epochs: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRegressor {
    pub keypoint: KeypointType,
    pub n_features: usize,
    pub active: Vec<usize>,
    /// Bin edges per active feature.
    pub edges: Vec<Vec<f64>>,
    /// Per active feature and bin, the 6-vector added to the prediction.
    pub z: Vec<Vec<[f64; 6]>>,
    /// Training R^2 per output dimension.
    pub r2: [f64; 6],
    pub loss_trace: Vec<f64>,
}

impl PoseRegressor {
    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != self.active.len() || self.z.len() != self.active.len() {
            return Err(Error::InvalidInput("one edge list and coefficient table per active feature".into()));
        }
        if self.active.windows(2).any(|w| w[0] >= w[1]) || self.active.last().is_some_and(|&i| i >= self.n_features) {
            return Err(Error::InvalidInput("active features must be increasing and in range".into()));
        }
        for (e, z) in self.edges.iter().zip(&self.z) {
            if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidInput("bin edges must be strictly increasing".into()));
            }
            if z.len() != e.len() - 1 {
                return Err(Error::InvalidInput("coefficient table must have one entry per bin".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn predict_rel(reg: &PoseRegressor, x: &[f64]) -> Result<RelPose> {
    if x.len() != reg.n_features {
        return Err(Error::DimensionMismatch { expected: reg.n_features, got: x.len() });
    }
    let mut y = [0.0; 6];
    for ((&f, e), z) in reg.active.iter().zip(&reg.edges).zip(&reg.z) {
        let zb = &z[bin_index(e, x[f])];
        for d in 0..6 {
            y[d] += zb[d];
        }
    }
    Ok(RelPose(y))
}

/// Coefficient of determination per output dimension. A constant target
/// counts as fully explained when it is reproduced to rounding.
pub fn r_squared(reg: &PoseRegressor, examples: &[RegressionExample]) -> Result<[f64; 6]> {
    let preds = examples.iter().map(|ex| predict_rel(reg, &ex.x)).collect::<Result<Vec<_>>>()?;
    let ys: Vec<[f64; 6]> = examples.iter().map(|ex| ex.y.0).collect();
    let ps: Vec<[f64; 6]> = preds.iter().map(|p| p.0).collect();
    Ok(r_squared_of(&ys, &ps))
}

fn r_squared_of(ys: &[[f64; 6]], preds: &[[f64; 6]]) -> [f64; 6] {
    let n = ys.len().max(1) as f64;
    let mut out = [0.0; 6];
    for d in 0..6 {
        let mean = ys.iter().map(|y| y[d]).sum::<f64>() / n;
        let ss_tot: f64 = ys.iter().map(|y| (y[d] - mean).powi(2)).sum();
        let ss_res: f64 = ys.iter().zip(preds).map(|(y, p)| (y[d] - p[d]).powi(2)).sum();
        let scale: f64 = ys.iter().map(|y| y[d] * y[d]).sum::<f64>() + 1.0;
        out[d] = if ss_tot > 1e-24 * scale {
            1.0 - ss_res / ss_tot
        } else if ss_res <= 1e-24 * scale {
            1.0
        } else {
            0.0
        };
    }
    out
}

fn feature_edges(examples: &[RegressionExample], f: usize, bins: usize) -> Vec<f64> {
    let (lo, hi) = examples
        .iter()
        .map(|ex| ex.x[f])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        equal_width_edges(lo, hi, bins)
    } else {
        equal_width_edges(lo - 0.5, lo + 0.5, bins)
    }
}

/// Fits a regressor by feature selection with annealing.
///
/// Each epoch refits every active feature's table to the per-bin mean of the
/// current residual, one feature at a time, then drops the features whose
/// centered tables move the predictions least. The loss after each epoch's
/// refit is recorded in `loss_trace`.
pub fn train_pose_regressor(
    examples: &[RegressionExample],
    keypoint: KeypointType,
    config: &PoseRegConfig,
) -> Result<PoseRegressor> {
    let n_features = examples.first().map(|ex| ex.x.len()).ok_or_else(|| Error::InsufficientData("no regression examples".into()))?;
    if examples.iter().any(|ex| ex.x.len() != n_features) {
        return Err(Error::InvalidInput("feature vectors differ in length".into()));
    }
    if config.bins == 0 || config.epochs == 0 || config.bins > u16::MAX as usize {
        return Err(Error::InvalidConfig("bins and epochs must be positive".into()));
    }
    let m = config.features.unwrap_or(n_features);
    if m == 0 || m > n_features {
        return Err(Error::InvalidConfig(format!("feature count must lie in 1..={n_features}, got {m}")));
    }
    let n = examples.len();
    let ys: Vec<[f64; 6]> = examples.iter().map(|ex| ex.y.0).collect();

    let mut active: Vec<usize> = (0..n_features).collect();
    let mut edges: Vec<Vec<f64>> = (0..n_features).map(|f| feature_edges(examples, f, config.bins)).collect();
    let mut bins: Vec<Vec<u16>> = (0..n_features)
        .map(|f| examples.iter().map(|ex| bin_index(&edges[f], ex.x[f]) as u16).collect())
        .collect();
    let mut z: Vec<Vec<[f64; 6]>> = vec![vec![[0.0; 6]; config.bins]; n_features];
    let mut pred = vec![[0.0; 6]; n];
    let mut trace = Vec::with_capacity(config.epochs);

    for (epoch, remove) in removal_schedule(n_features, m, config.epochs).into_iter().enumerate() {
        for a in 0..active.len() {
            let mut sums = vec![[0.0; 6]; config.bins];
            let mut counts = vec![0usize; config.bins];
            for j in 0..n {
                let b = bins[a][j] as usize;
                counts[b] += 1;
                for d in 0..6 {
                    sums[b][d] += ys[j][d] - pred[j][d] + z[a][b][d];
                }
            }
            let old = z[a].clone();
            for b in 0..config.bins {
                if counts[b] > 0 {
                    for d in 0..6 {
                        z[a][b][d] = sums[b][d] / counts[b] as f64;
                    }
                }
            }
            for j in 0..n {
                let b = bins[a][j] as usize;
                for d in 0..6 {
                    pred[j][d] += z[a][b][d] - old[b][d];
                }
            }
        }
        let loss: f64 = ys.iter().zip(&pred).map(|(y, p)| (0..6).map(|d| (y[d] - p[d]).powi(2)).sum::<f64>()).sum();
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        trace.push(loss);

        if remove > 0 {
            // centered contribution of each feature, and its mean
            let stats: Vec<(f64, [f64; 6])> = (0..active.len())
                .map(|a| {
                    let mut mean = [0.0; 6];
                    for j in 0..n {
                        for d in 0..6 {
                            mean[d] += z[a][bins[a][j] as usize][d] / n as f64;
                        }
                    }
                    let spread: f64 = (0..n)
                        .map(|j| (0..6).map(|d| (z[a][bins[a][j] as usize][d] - mean[d]).powi(2)).sum::<f64>())
                        .sum();
                    ((spread / n as f64).sqrt(), mean)
                })
                .collect();
            let mut order: Vec<usize> = (0..active.len()).collect();
            order.sort_by(|&p, &q| stats[p].0.total_cmp(&stats[q].0).then(active[p].cmp(&active[q])));
            let mut keep = vec![true; active.len()];
            for &a in &order[..remove] {
                keep[a] = false;
            }
            let first_kept = keep.iter().position(|&k| k).expect("at least one feature is kept");
            for a in (0..active.len()).filter(|&a| !keep[a]) {
                let mean = stats[a].1;
                for zb in z[first_kept].iter_mut() {
                    for d in 0..6 {
                        zb[d] += mean[d];
                    }
                }
                for j in 0..n {
                    let b = bins[a][j] as usize;
                    for d in 0..6 {
                        pred[j][d] -= z[a][b][d] - mean[d];
                    }
                }
            }
            let mut it = keep.iter();
            active.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            edges.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            bins.retain(|_| *it.next().unwrap());
            let mut it = keep.iter();
            z.retain(|_| *it.next().unwrap());
        }
    }

    let mut reg = PoseRegressor { keypoint, n_features, active, edges, z, r2: [0.0; 6], loss_trace: trace };
    reg.r2 = r_squared(&reg, examples)?;
    Ok(reg)
}
