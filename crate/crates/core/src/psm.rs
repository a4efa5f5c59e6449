//! Parameter-sensitive scoring models.
//!
//! A model holds one weight block per active feature. Linear blocks are
//! indexed by the parameter bin; nonlinear blocks by `(x bin, parameter bin)`
//! stored row-major as `j * theta_bins + k`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box2;

pub const LINEAR_THETA_BINS: usize = 16;
pub const NONLINEAR_THETA_BINS: usize = 9;
pub const DEFAULT_X_BINS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Lorenz,
    Logistic,
}

impl LossKind {
    pub fn value(self, x: f64) -> f64 {
        match self {
            LossKind::Lorenz => lorenz_loss(x),
            LossKind::Logistic => {
                // ln(1 + e^-x) without overflow
                if x > 0.0 {
                    (-x).exp().ln_1p()
                } else {
                    -x + x.exp().ln_1p()
                }
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            LossKind::Lorenz => lorenz_loss_derivative(x),
            LossKind::Logistic => -1.0 / (1.0 + x.exp()),
        }
    }
}

/// `ln(1 + (x-1)^2)` below 1, zero from 1 on.
pub fn lorenz_loss(x: f64) -> f64 {
    if x < 1.0 {
        let t = x - 1.0;
        (t * t).ln_1p()
    } else {
        0.0
    }
}

pub fn lorenz_loss_derivative(x: f64) -> f64 {
    if x < 1.0 {
        let t = x - 1.0;
        2.0 * t / (1.0 + t * t)
    } else {
        0.0
    }
}

/// `bins + 1` equally spaced edges from `lo` to `hi`.
pub fn equal_width_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Bin containing `v`; values outside the edges fall into the end bins.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1)
}

fn check_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(format!("{what} edges must be strictly increasing")));
    }
    Ok(())
}

/// Smoothness prior coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub s: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self { s: 1e-4, c: 1e-2, d: 1e-2 }
    }
}

/// Prior of one block with `theta_bins` columns; a linear block is the
/// single-row case, where the `d` term vanishes.
pub fn prior_penalty(w: &[f64], theta_bins: usize, prior: &Prior) -> f64 {
    let x_bins = w.len() / theta_bins;
    let at = |j: usize, k: usize| w[j * theta_bins + k];
    let mut total = prior.s * w.iter().map(|v| v * v).sum::<f64>();
    for j in 0..x_bins {
        for k in 1..theta_bins.saturating_sub(1) {
            let d2 = at(j, k + 1) + at(j, k - 1) - 2.0 * at(j, k);
            total += prior.c * d2 * d2;
        }
    }
    for k in 0..theta_bins {
        for j in 1..x_bins.saturating_sub(1) {
            let d2 = at(j + 1, k) + at(j - 1, k) - 2.0 * at(j, k);
            total += prior.d * d2 * d2;
        }
    }
    total
}

/// Adds `scale` times the gradient of [`prior_penalty`] to `out`.
pub fn prior_gradient(w: &[f64], theta_bins: usize, prior: &Prior, scale: f64, out: &mut [f64]) {
    let x_bins = w.len() / theta_bins;
    let idx = |j: usize, k: usize| j * theta_bins + k;
    for (o, v) in out.iter_mut().zip(w) {
        *o += scale * 2.0 * prior.s * v;
    }
    for j in 0..x_bins {
        for k in 1..theta_bins.saturating_sub(1) {
            let d2 = w[idx(j, k + 1)] + w[idx(j, k - 1)] - 2.0 * w[idx(j, k)];
            let g = scale * 2.0 * prior.c * d2;
            out[idx(j, k + 1)] += g;
            out[idx(j, k - 1)] += g;
            out[idx(j, k)] -= 2.0 * g;
        }
    }
    for k in 0..theta_bins {
        for j in 1..x_bins.saturating_sub(1) {
            let d2 = w[idx(j + 1, k)] + w[idx(j - 1, k)] - 2.0 * w[idx(j, k)];
            let g = scale * 2.0 * prior.d * d2;
            out[idx(j + 1, k)] += g;
            out[idx(j - 1, k)] += g;
            out[idx(j, k)] -= 2.0 * g;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsmTrainConfig {
    pub kind: ModelKind,
    pub loss: LossKind,
    /// Defaults to 16 for linear and 9 for nonlinear models.
    pub theta_bins: Option<usize>,
    pub x_bins: usize,
    pub prior: Prior,
    /// Weight of each negative example.
    pub mu: f64,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Features kept before the first removal; all features when unset.
    pub start_features: Option<usize>,
    /// Features left after the last epoch; `start_features` when unset.
    pub end_features: Option<usize>,
    pub epochs: usize,
}

impl Default for PsmTrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            loss: LossKind::Lorenz,
            theta_bins: None,
            x_bins: DEFAULT_X_BINS,
            prior: Prior::default(),
            mu: 1.0,
            momentum: 0.9,
            learning_rate: 1e-2,
            start_features: None,
            end_features: None,
            epochs: 20,
        }
    }
}

impl PsmTrainConfig {
    pub fn theta_bins(&self) -> usize {
        self.theta_bins.unwrap_or(match self.kind {
            ModelKind::Linear => LINEAR_THETA_BINS,
            ModelKind::Nonlinear => NONLINEAR_THETA_BINS,
        })
    }

    /// Start and end feature counts for a pool of `n_features`.
    pub fn feature_counts(&self, n_features: usize) -> Result<(usize, usize)> {
        let start = self.start_features.unwrap_or(n_features);
        let end = self.end_features.unwrap_or(start);
        if start > n_features || end > start || end == 0 {
            return Err(Error::InvalidConfig(format!(
                "feature counts must satisfy 1 <= end <= start <= {n_features}, got {start} -> {end}"
            )));
        }
        Ok((start, end))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.theta_bins() == 0 || self.x_bins == 0 {
            return Err(Error::InvalidConfig("bin counts must be positive".into()));
        }
        let p = &self.prior;
        if [p.s, p.c, p.d, self.mu, self.learning_rate].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("prior, mu and learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Features removed after each epoch so that `start - end` are gone after
/// `epochs` epochs, as evenly as integer counts allow.
pub fn removal_schedule(start: usize, end: usize, epochs: usize) -> Vec<usize> {
    let total = start - end;
    (1..=epochs).map(|e| total * e / epochs - total * (e - 1) / epochs).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsmWeights {
    pub kind: ModelKind,
    /// Length of the feature vectors the model scores.
    pub n_features: usize,
    pub theta_edges: Vec<f64>,
    /// Per active feature, nonlinear models only.
    pub x_edges: Vec<Vec<f64>>,
    pub active: Vec<usize>,
    pub blocks: Vec<Vec<f64>>,
    #[serde(default)]
    pub config: Option<PsmTrainConfig>,
    #[serde(default)]
    pub cost_trace: Vec<f64>,
}

impl PsmWeights {
    /// All-zero linear model over every feature.
    pub fn zeros_linear(n_features: usize, theta_bins: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            n_features,
            theta_edges: equal_width_edges(-FRAC_PI_2, FRAC_PI_2, theta_bins),
            x_edges: Vec::new(),
            active: (0..n_features).collect(),
            blocks: vec![vec![0.0; theta_bins]; n_features],
            config: None,
            cost_trace: Vec::new(),
        }
    }

    /// All-zero nonlinear model; `x_edges` holds one edge list per feature.
    pub fn zeros_nonlinear(theta_bins: usize, x_edges: Vec<Vec<f64>>) -> Result<Self> {
        let x_bins = x_edges.first().map_or(0, |e| e.len().saturating_sub(1));
        if x_edges.iter().any(|e| e.len() != x_bins + 1) {
            return Err(Error::InvalidInput("every feature needs the same number of x bins".into()));
        }
        let n = x_edges.len();
        let w = Self {
            kind: ModelKind::Nonlinear,
            n_features: n,
            theta_edges: equal_width_edges(-FRAC_PI_2, FRAC_PI_2, theta_bins),
            x_edges,
            active: (0..n).collect(),
            blocks: vec![vec![0.0; x_bins * theta_bins]; n],
            config: None,
            cost_trace: Vec::new(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn theta_bins(&self) -> usize {
        self.theta_edges.len() - 1
    }

    pub fn x_bins(&self) -> usize {
        match self.kind {
            ModelKind::Linear => 1,
            ModelKind::Nonlinear => self.x_edges.first().map_or(1, |e| e.len() - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_edges(&self.theta_edges, "theta")?;
        if self.blocks.len() != self.active.len() {
            return Err(Error::InvalidInput(format!(
                "{} weight blocks for {} active features",
                self.blocks.len(),
                self.active.len()
            )));
        }
        if self.active.windows(2).any(|w| w[0] >= w[1])
            || self.active.last().is_some_and(|&i| i >= self.n_features)
        {
            return Err(Error::InvalidInput("active features must be increasing and in range".into()));
        }
        if self.kind == ModelKind::Nonlinear {
            if self.x_edges.len() != self.active.len() {
                return Err(Error::InvalidInput("one x edge list per active feature required".into()));
            }
            for e in &self.x_edges {
                check_edges(e, "x")?;
            }
        }
        let len = self.x_bins() * self.theta_bins();
        if self.blocks.iter().any(|b| b.len() != len) || self.x_edges.iter().any(|e| e.len() != self.x_bins() + 1) {
            return Err(Error::InvalidInput(format!("weight blocks must have {len} entries")));
        }
        Ok(())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        Ok(())
    }

    /// Entry of block `b` that `x` and `theta` select, with the partial
    /// derivative of the score with respect to it.
    fn cell(&self, b: usize, x: &[f64], k: usize) -> (usize, f64) {
        let v = x[self.active[b]];
        match self.kind {
            ModelKind::Linear => (k, v),
            ModelKind::Nonlinear => (bin_index(&self.x_edges[b], v) * self.theta_bins() + k, 1.0),
        }
    }

    /// Score of `x` at parameter `theta` for either model kind.
    pub fn score(&self, x: &[f64], theta: f64) -> Result<f64> {
        self.check_len(x)?;
        Ok(self.score_unchecked(x, theta))
    }

    fn score_unchecked(&self, x: &[f64], theta: f64) -> f64 {
        let k = bin_index(&self.theta_edges, theta);
        (0..self.blocks.len())
            .map(|b| {
                let (i, dx) = self.cell(b, x, k);
                self.blocks[b][i] * dx
            })
            .sum()
    }

    pub fn prior(&self, prior: &Prior) -> f64 {
        self.blocks.iter().map(|w| prior_penalty(w, self.theta_bins(), prior)).sum()
    }

    /// Euclidean norm of every active block, in active order.
    pub fn importance(&self) -> Vec<f64> {
        self.blocks.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// `(feature, total variation across parameter bins)` for the `top`
    /// most varying features, largest first.
    pub fn total_variation(&self, top: usize) -> Vec<(usize, f64)> {
        let nb = self.theta_bins();
        let mut tv: Vec<(usize, f64)> = self
            .blocks
            .iter()
            .zip(&self.active)
            .map(|(w, &f)| {
                let t = w.chunks(nb).map(|row| row.windows(2).map(|p| (p[1] - p[0]).abs()).sum::<f64>()).sum();
                (f, t)
            })
            .collect();
        tv.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        tv.truncate(top);
        tv
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }
}

pub fn score_linear(w: &PsmWeights, x: &[f64], theta: f64) -> Result<f64> {
    if w.kind != ModelKind::Linear {
        return Err(Error::InvalidInput("expected a linear model".into()));
    }
    w.score(x, theta)
}

pub fn score_nonlinear(w: &PsmWeights, x: &[f64], theta: f64) -> Result<f64> {
    if w.kind != ModelKind::Nonlinear {
        return Err(Error::InvalidInput("expected a nonlinear model".into()));
    }
    w.score(x, theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceOverlap {
    pub face: usize,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    #[serde(rename = "box")]
    pub bbox: Box2,
    pub x: Vec<f64>,
    pub theta: f64,
    pub image_id: usize,
    /// Overlaps with the ground-truth faces of the same image; absent faces
    /// have overlap zero.
    pub overlaps: Vec<FaceOverlap>,
}

impl TrainExample {
    pub fn max_overlap(&self) -> f64 {
        self.overlaps.iter().map(|o| o.overlap).fold(0.0, f64::max)
    }
}

/// Loss weights of every example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleWeights {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Total positive weight per face, 1 for every face with a positive.
    pub face_totals: BTreeMap<usize, f64>,
    /// Faces that appear in some overlap but have no positive example.
    pub faces_without_positives: Vec<usize>,
}

pub fn example_weights(data: &[TrainExample], mu: f64) -> Result<ExampleWeights> {
    let mut s: BTreeMap<usize, f64> = BTreeMap::new();
    for ex in data {
        for o in &ex.overlaps {
            if !(0.0..=1.0).contains(&o.overlap) {
                return Err(Error::InvalidInput(format!("overlap {} outside [0, 1]", o.overlap)));
            }
            let e = s.entry(o.face).or_insert(0.0);
            if o.overlap > 0.5 {
                *e += 2.0 * o.overlap - 1.0;
            }
        }
    }
    let mut positive = vec![0.0; data.len()];
    let mut negative = vec![0.0; data.len()];
    let mut face_totals: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        for o in ex.overlaps.iter().filter(|o| o.overlap > 0.5) {
            let w = (2.0 * o.overlap - 1.0) / s[&o.face];
            positive[i] += w;
            *face_totals.entry(o.face).or_insert(0.0) += w;
        }
        if ex.max_overlap() < 0.3 {
            negative[i] = mu;
        }
    }
    let faces_without_positives = s.iter().filter(|(_, &v)| v == 0.0).map(|(&f, _)| f).collect();
    Ok(ExampleWeights { positive, negative, face_totals, faces_without_positives })
}

fn check_data(w: &PsmWeights, data: &[TrainExample]) -> Result<()> {
    for ex in data {
        w.check_len(&ex.x)?;
    }
    Ok(())
}

/// Weighted loss of all examples plus the prior of every active block.
pub fn training_cost(w: &PsmWeights, data: &[TrainExample], config: &PsmTrainConfig) -> Result<f64> {
    check_data(w, data)?;
    let weights = example_weights(data, config.mu)?;
    Ok(cost_with(w, data, &weights, config))
}

fn cost_with(w: &PsmWeights, data: &[TrainExample], weights: &ExampleWeights, config: &PsmTrainConfig) -> f64 {
    let loss: f64 = data
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let (p, n) = (weights.positive[i], weights.negative[i]);
            if p == 0.0 && n == 0.0 {
                return 0.0;
            }
            let s = w.score_unchecked(&ex.x, ex.theta);
            p * config.loss.value(s) + n * config.loss.value(-s)
        })
        .sum();
    loss + w.prior(&config.prior)
}

/// Adds `scale` times the loss gradient of the listed examples to `grad`
/// and returns how many of them carry a nonzero weight.
fn accumulate_loss_gradient(
    w: &PsmWeights,
    data: &[TrainExample],
    indices: &[usize],
    weights: &ExampleWeights,
    loss: LossKind,
    grad: &mut [Vec<f64>],
    scale: impl Fn(usize) -> f64,
) -> usize {
    let mut terms = 0;
    let mut coeffs = Vec::with_capacity(indices.len());
    for &i in indices {
        let (p, n) = (weights.positive[i], weights.negative[i]);
        if p == 0.0 && n == 0.0 {
            continue;
        }
        terms += usize::from(p > 0.0) + usize::from(n > 0.0);
        let s = w.score_unchecked(&data[i].x, data[i].theta);
        coeffs.push((i, p * loss.derivative(s) - n * loss.derivative(-s)));
    }
    let factor = scale(terms);
    for (i, a) in coeffs {
        let ex = &data[i];
        let k = bin_index(&w.theta_edges, ex.theta);
        for (b, g) in grad.iter_mut().enumerate() {
            let (cell, dx) = w.cell(b, &ex.x, k);
            g[cell] += factor * a * dx;
        }
    }
    terms
}

/// Gradient of [`training_cost`] with respect to every active block.
pub fn training_gradient(
    w: &PsmWeights,
    data: &[TrainExample],
    config: &PsmTrainConfig,
) -> Result<Vec<Vec<f64>>> {
    check_data(w, data)?;
    let weights = example_weights(data, config.mu)?;
    let mut grad: Vec<Vec<f64>> = w.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
    let all: Vec<usize> = (0..data.len()).collect();
    accumulate_loss_gradient(w, data, &all, &weights, config.loss, &mut grad, |_| 1.0);
    for (b, g) in w.blocks.iter().zip(grad.iter_mut()) {
        prior_gradient(b, w.theta_bins(), &config.prior, 1.0, g);
    }
    Ok(grad)
}

fn x_edges_from_data(data: &[TrainExample], n_features: usize, bins: usize) -> Vec<Vec<f64>> {
    (0..n_features)
        .map(|f| {
            let (lo, hi) = data
                .iter()
                .map(|ex| ex.x[f])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi > lo {
                equal_width_edges(lo, hi, bins)
            } else {
                equal_width_edges(lo - 0.5, lo + 0.5, bins)
            }
        })
        .collect()
}

/// Drops the `count` active features with the smallest block norm, ties
/// going to the lower feature index.
fn remove_features(w: &mut PsmWeights, velocity: &mut Vec<Vec<f64>>, count: usize) {
    if count == 0 {
        return;
    }
    let norms = w.importance();
    let mut order: Vec<usize> = (0..w.active.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(w.active[a].cmp(&w.active[b])));
    let mut keep = vec![true; w.active.len()];
    for &b in &order[..count] {
        keep[b] = false;
    }
    let mut it = keep.iter();
    w.active.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    w.blocks.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    velocity.retain(|_| *it.next().unwrap());
    if w.kind == ModelKind::Nonlinear {
        let mut it = keep.iter();
        w.x_edges.retain(|_| *it.next().unwrap());
    }
}

/// Trains a model by feature selection with annealing.
///
/// Every epoch is one pass of momentum SGD with one batch per image, in an
/// order shuffled from `seed`, followed by removal of the weakest features.
/// The cost after each epoch's updates is recorded in `cost_trace`.
pub fn train_psm(data: &[TrainExample], config: &PsmTrainConfig, seed: u64) -> Result<PsmWeights> {
    config.validate()?;
    let n_features = data.first().map(|ex| ex.x.len()).ok_or_else(|| Error::InsufficientData("no training examples".into()))?;
    let (start, end) = config.feature_counts(n_features)?;
    let theta_bins = config.theta_bins();
    let mut w = match config.kind {
        ModelKind::Linear => PsmWeights::zeros_linear(n_features, theta_bins),
        ModelKind::Nonlinear => {
            PsmWeights::zeros_nonlinear(theta_bins, x_edges_from_data(data, n_features, config.x_bins))?
        }
    };
    check_data(&w, data)?;
    let weights = example_weights(data, config.mu)?;
    if !weights.positive.iter().any(|&p| p > 0.0) || !weights.negative.iter().any(|&n| n > 0.0) {
        return Err(Error::InsufficientData("training needs positive and negative examples".into()));
    }

    let mut batches: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.iter().enumerate() {
        batches.entry(ex.image_id).or_default().push(i);
    }
    let batches: Vec<Vec<usize>> = batches.into_values().collect();
    let prior_scale = 1.0 / batches.len() as f64;

    let mut removals = removal_schedule(start, end, config.epochs);
    removals[0] += n_features - start;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity: Vec<Vec<f64>> = w.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for (epoch, &remove) in removals.iter().enumerate() {
        order.shuffle(&mut rng);
        for &bi in &order {
            let mut grad: Vec<Vec<f64>> = w.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
            accumulate_loss_gradient(&w, data, &batches[bi], &weights, config.loss, &mut grad, |terms| {
                1.0 / terms.max(1) as f64
            });
            for ((b, g), v) in w.blocks.iter_mut().zip(grad.iter_mut()).zip(velocity.iter_mut()) {
                prior_gradient(b, theta_bins, &config.prior, prior_scale, g);
                for ((wi, gi), vi) in b.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    *vi = config.momentum * *vi - config.learning_rate * gi;
                    *wi += *vi;
                }
            }
        }
        let cost = cost_with(&w, data, &weights, config);
        if !cost.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        trace.push(cost);
        remove_features(&mut w, &mut velocity, remove);
    }

    w.cost_trace = trace;
    w.config = Some(config.clone());
    Ok(w)
}
