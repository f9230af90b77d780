//! Weighted k-means ensembling of predicted modes and displacement metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::golfer::{ModelParams, Prediction};
use crate::numerics::{MaskBits, Matrix};
use crate::scene::{GoalConditioning, GoalPlacement, Scene};

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-12;

/// Trajectories (`T x 2` each) with non-negative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedTrajectorySet {
    pub trajectories: Vec<Matrix>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub centroids: Vec<Matrix>,
    pub probs: Vec<f64>,
    /// Cluster of each input trajectory.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Samples an index with probability proportional to `scores`; `None` if
/// they are all zero.
fn sample_proportional<R: Rng + ?Sized>(rng: &mut R, scores: &[f64]) -> Option<usize> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 {
            acc += s;
            last = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Weighted k-means++ seeding.
fn seed_centroids<R: Rng + ?Sized>(points: &[Vec<f64>], weights: &[f64], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut chosen = vec![false; points.len()];
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centroids.len() < k {
        let scores: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, &w)| {
                if centroids.is_empty() {
                    w
                } else {
                    w * nearest(p, &centroids).1
                }
            })
            .collect();
        let pick = sample_proportional(rng, &scores)
            .or_else(|| (0..points.len()).find(|&i| !chosen[i]))
            .expect("n >= k leaves an unchosen point");
        chosen[pick] = true;
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Lloyd's algorithm in the flattened `2T`-dimensional space with weighted
/// centroid updates and weighted k-means++ seeding.
///
/// A cluster with no members is re-seeded to the point with the largest
/// weighted squared distance to its centroid. A cluster whose members all
/// have zero weight takes their unweighted mean. Iteration stops when
/// assignments no longer change, when no centroid moves more than `tol`,
/// or after `max_iters` rounds; the returned centroids are always the
/// means of the returned assignments.
pub fn weighted_kmeans<R: Rng + ?Sized>(
    set: &WeightedTrajectorySet,
    k: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<EnsembleOutput> {
    let n = set.trajectories.len();
    if set.weights.len() != n {
        return Err(Error::dims("weighted_kmeans", (n, 1), (set.weights.len(), 1)));
    }
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "cannot form {k} clusters from {n} trajectories"
        )));
    }
    if set.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::DegenerateInput("weights must be finite and non-negative".into()));
    }
    if !set.weights.iter().any(|&w| w > 0.0) {
        return Err(Error::DegenerateInput("all weights are zero".into()));
    }
    let shape = set.trajectories[0].shape();
    if let Some(t) = set.trajectories.iter().find(|t| t.shape() != shape) {
        return Err(Error::dims("weighted_kmeans", shape, t.shape()));
    }
    let points: Vec<Vec<f64>> = set.trajectories.iter().map(|t| t.as_slice().to_vec()).collect();
    let w = &set.weights;

    let mut centroids = seed_centroids(&points, w, k, rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut members = vec![Vec::new(); k];
        for (i, &c) in assign.iter().enumerate() {
            members[c].push(i);
        }
        let mut moved: f64 = 0.0;
        let mut reseeded = false;
        for j in 0..k {
            let next: Vec<f64> = if members[j].is_empty() {
                reseeded = true;
                let far = (0..n)
                    .map(|i| (i, w[i] * sq_dist(&points[i], &centroids[assign[i]])))
                    .fold((0, -1.0), |b, (i, s)| if s > b.1 { (i, s) } else { b })
                    .0;
                points[far].clone()
            } else {
                weighted_mean(&points, w, &members[j])
            };
            moved = moved.max(sq_dist(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        let next_assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let stable = next_assign == assign;
        assign = next_assign;
        if !reseeded && (stable || moved <= tol) || iterations >= max_iters {
            if !stable {
                // keep centroids consistent with the final assignment
                centroids = recompute(&points, w, &assign, &centroids);
            }
            break;
        }
    }

    let mut probs = vec![0.0; k];
    for (i, &c) in assign.iter().enumerate() {
        probs[c] += w[i];
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(EnsembleOutput {
        centroids: centroids
            .into_iter()
            .map(|c| Matrix::from_vec(shape.0, shape.1, c).expect("flattened shape"))
            .collect(),
        probs,
        assignments: assign,
        iterations,
    })
}

fn recompute(points: &[Vec<f64>], w: &[f64], assign: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    old.iter()
        .enumerate()
        .map(|(j, c)| {
            let members: Vec<usize> = (0..points.len()).filter(|&i| assign[i] == j).collect();
            if members.is_empty() {
                c.clone()
            } else {
                weighted_mean(points, w, &members)
            }
        })
        .collect()
}

/// Weighted mean of `members`, or their plain mean if none carries weight.
/// Accumulated as offsets from the first weighted member, so a lone
/// weighted member is reproduced bit for bit.
fn weighted_mean(points: &[Vec<f64>], w: &[f64], members: &[usize]) -> Vec<f64> {
    let ws: f64 = members.iter().map(|&i| w[i]).sum();
    let weight = |i: usize| if ws > 0.0 { w[i] } else { 1.0 };
    let total = if ws > 0.0 { ws } else { members.len() as f64 };
    let anchor = *members.iter().find(|&&i| weight(i) > 0.0).expect("non-empty members");
    let base = &points[anchor];
    let mut acc = vec![0.0; base.len()];
    for &i in members {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        for ((a, x), b) in acc.iter_mut().zip(&points[i]).zip(base) {
            *a += wi * (x - b);
        }
    }
    base.iter().zip(&acc).map(|(b, a)| b + a / total).collect()
}

/// Pools every mode of every prediction, weighted by its probability, and
/// clusters them into `k` modes. Bitwise-identical trajectories are merged
/// first (weights summed) whenever at least `k` distinct ones remain, so
/// repeating a model leaves the result unchanged. Clusters come out in
/// order of decreasing probability.
pub fn ensemble_predict(predictions: &[Prediction], k: usize, seed: u64) -> Result<EnsembleOutput> {
    if predictions.is_empty() {
        return Err(Error::EmptySet("no predictions to ensemble".into()));
    }
    let total_modes: usize = predictions.iter().map(Prediction::k).sum();
    if total_modes < k {
        return Err(Error::Config(format!(
            "ensemble.k = {k} exceeds the {total_modes} pooled modes"
        )));
    }
    let mut set = WeightedTrajectorySet {
        trajectories: Vec::with_capacity(total_modes),
        weights: Vec::with_capacity(total_modes),
    };
    for p in predictions {
        set.trajectories.extend(p.means.iter().cloned());
        set.weights.extend(p.probs.iter().copied());
    }
    let mut merged = WeightedTrajectorySet {
        trajectories: Vec::new(),
        weights: Vec::new(),
    };
    for (t, &w) in set.trajectories.iter().zip(&set.weights) {
        match merged.trajectories.iter().position(|m| bits_equal(m, t)) {
            Some(i) => merged.weights[i] += w,
            None => {
                merged.trajectories.push(t.clone());
                merged.weights.push(w);
            }
        }
    }
    let input = if merged.trajectories.len() >= k { &merged } else { &set };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = weighted_kmeans(input, k, &mut rng, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| out.probs[b].total_cmp(&out.probs[a]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    Ok(EnsembleOutput {
        centroids: order.iter().map(|&j| out.centroids[j].clone()).collect(),
        probs: order.iter().map(|&j| out.probs[j]).collect(),
        assignments: out.assignments.iter().map(|&j| rank[j]).collect(),
        iterations: out.iterations,
    })
}

fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn displacement(m: &Matrix, gt: &Matrix, t: usize) -> f64 {
    let dx = m.get(t, 0) - gt.get(t, 0);
    let dy = m.get(t, 1) - gt.get(t, 1);
    (dx * dx + dy * dy).sqrt()
}

fn check_modes(modes: &[Matrix], gt: &Matrix, valid: &MaskBits) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::EmptySet("no predicted modes".into()));
    }
    if valid.dim() != gt.rows() || gt.cols() != 2 {
        return Err(Error::dims("metrics ground truth", gt.shape(), (valid.dim(), 2)));
    }
    if let Some(m) = modes.iter().find(|m| m.shape() != gt.shape()) {
        return Err(Error::dims("metrics", m.shape(), gt.shape()));
    }
    Ok(())
}

/// Average displacement of one mode over valid steps.
pub fn ade(mode: &Matrix, gt: &Matrix, valid: &MaskBits) -> Result<f64> {
    check_modes(std::slice::from_ref(mode), gt, valid)?;
    let n = valid.count_valid();
    if n == 0 {
        return Err(Error::EmptySet("no valid ground-truth step".into()));
    }
    Ok(valid.valid_indices().map(|t| displacement(mode, gt, t)).sum::<f64>() / n as f64)
}

/// Displacement of one mode at the last valid step.
pub fn fde(mode: &Matrix, gt: &Matrix, valid: &MaskBits) -> Result<f64> {
    check_modes(std::slice::from_ref(mode), gt, valid)?;
    let t = valid
        .last_valid()
        .ok_or_else(|| Error::EmptySet("no valid ground-truth step".into()))?;
    Ok(displacement(mode, gt, t))
}

pub fn min_ade(modes: &[Matrix], gt: &Matrix, valid: &MaskBits) -> Result<f64> {
    check_modes(modes, gt, valid)?;
    modes
        .iter()
        .map(|m| ade(m, gt, valid))
        .try_fold(f64::INFINITY, |acc, x| x.map(|x| acc.min(x)))
}

pub fn min_fde(modes: &[Matrix], gt: &Matrix, valid: &MaskBits) -> Result<f64> {
    check_modes(modes, gt, valid)?;
    modes
        .iter()
        .map(|m| fde(m, gt, valid))
        .try_fold(f64::INFINITY, |acc, x| x.map(|x| acc.min(x)))
}

/// One evaluated sample: predicted modes against the ground truth.
#[derive(Clone, Copy, Debug)]
pub struct MetricSample<'a> {
    pub modes: &'a [Matrix],
    pub gt: &'a Matrix,
    pub valid: &'a MaskBits,
}

/// Fraction of samples whose best final displacement exceeds `threshold_m`.
pub fn miss_rate(samples: &[MetricSample<'_>], threshold_m: f64) -> Result<f64> {
    if !(threshold_m > 0.0) {
        return Err(Error::Config("metrics.threshold_m must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySet("miss rate over an empty dataset".into()));
    }
    let mut misses = 0usize;
    for s in samples {
        if min_fde(s.modes, s.gt, s.valid)? > threshold_m {
            misses += 1;
        }
    }
    Ok(misses as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    pub miss_rate: f64,
    pub k: usize,
    pub threshold_m: f64,
}

impl MetricsReport {
    /// Dataset means of minADE and minFDE plus the miss rate.
    pub fn compute(samples: &[MetricSample<'_>], threshold_m: f64) -> Result<Self> {
        let miss_rate = miss_rate(samples, threshold_m)?;
        let (mut ade_sum, mut fde_sum) = (0.0, 0.0);
        for s in samples {
            ade_sum += min_ade(s.modes, s.gt, s.valid)?;
            fde_sum += min_fde(s.modes, s.gt, s.valid)?;
        }
        let n = samples.len() as f64;
        Ok(Self {
            num_samples: samples.len(),
            min_ade: ade_sum / n,
            min_fde: fde_sum / n,
            miss_rate,
            k: samples.iter().map(|s| s.modes.len()).max().unwrap_or(0),
            threshold_m,
        })
    }
}

/// Extrapolates the last observed ego velocity over the scene horizon.
/// A single observed point gives a stationary forecast.
pub fn constant_velocity(scene: &Scene) -> Matrix {
    let hist: Vec<(usize, [f64; 2])> = scene
        .ego
        .mask
        .valid_indices()
        .map(|i| (i, [scene.ego.tokens.get(i, 0), scene.ego.tokens.get(i, 1)]))
        .collect();
    let (i1, p1) = *hist.last().expect("validated scene has an ego point");
    let v = match hist.len() {
        1 => [0.0, 0.0],
        n => {
            let (i0, p0) = hist[n - 2];
            let gap = (i1 - i0) as f64;
            [(p1[0] - p0[0]) / gap, (p1[1] - p0[1]) / gap]
        }
    };
    let t = scene.horizon();
    let mut out = Matrix::zeros(t, 2);
    for k in 0..t {
        let s = (k + 1) as f64;
        out.set(k, 0, p1[0] + s * v[0]);
        out.set(k, 1, p1[1] + s * v[1]);
    }
    out
}

/// How the goal element is filled at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// Plain forecasting: every goal step hidden.
    FullyMasked,
    /// The final ground-truth step is revealed.
    FinalStep,
}

impl GoalMode {
    pub fn conditioning(self, scene: &Scene) -> GoalConditioning {
        let t = scene.horizon();
        match (self, scene.future_mask.last_valid()) {
            (GoalMode::FinalStep, Some(last)) => {
                GoalConditioning::reveal_step(&scene.future, last, GoalPlacement::AgentsSet)
            }
            _ => GoalConditioning::fully_masked(t, GoalPlacement::AgentsSet),
        }
    }
}

/// Model predictions for every scene.
pub fn predict_all(model: &ModelParams, scenes: &[Scene], goal: GoalMode) -> Result<Vec<Prediction>> {
    scenes
        .iter()
        .map(|s| model.forward(s, Some(&goal.conditioning(s))))
        .collect()
}

/// Metrics of per-scene mode sets against each scene's ground truth.
pub fn report_for(modes: &[Vec<Matrix>], scenes: &[Scene], threshold_m: f64) -> Result<MetricsReport> {
    if modes.len() != scenes.len() {
        return Err(Error::dims("report", (modes.len(), 1), (scenes.len(), 1)));
    }
    let samples: Vec<MetricSample<'_>> = modes
        .iter()
        .zip(scenes)
        .map(|(m, s)| MetricSample {
            modes: m,
            gt: &s.future,
            valid: &s.future_mask,
        })
        .collect();
    MetricsReport::compute(&samples, threshold_m)
}

/// Model metrics under `goal`.
pub fn evaluate_model(
    model: &ModelParams,
    scenes: &[Scene],
    goal: GoalMode,
    threshold_m: f64,
) -> Result<MetricsReport> {
    let modes: Vec<Vec<Matrix>> = predict_all(model, scenes, goal)?
        .into_iter()
        .map(|p| p.means)
        .collect();
    report_for(&modes, scenes, threshold_m)
}

/// Metrics of the constant-velocity baseline (a single mode).
pub fn evaluate_baseline(scenes: &[Scene], threshold_m: f64) -> Result<MetricsReport> {
    let modes: Vec<Vec<Matrix>> = scenes.iter().map(|s| vec![constant_velocity(s)]).collect();
    report_for(&modes, scenes, threshold_m)
}
