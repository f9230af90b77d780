//! Winner-take-all Gaussian mixture loss, the Adam optimizer and the
//! sample-wise training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::golfer::{GraphPrediction, ModelParams, Prediction};
use crate::numerics::{BackwardRule, Graph, MaskBits, Matrix, ParamStore, Var};
use crate::scene::{apply_goal_masking, Scene};

/// `ln(2π)`, the per-step NLL of a perfect unit-variance prediction.
pub const LOG_TWO_PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regression_nll: f64,
    pub classification_ce: f64,
    pub total: f64,
    pub winner_index: usize,
}

fn check_gt(gt: &Matrix, valid: &MaskBits, horizon: usize) -> Result<()> {
    if gt.shape() != (horizon, 2) || valid.dim() != horizon {
        return Err(Error::dims("ground truth", gt.shape(), (horizon, 2)));
    }
    Ok(())
}

/// Mean Euclidean distance over valid steps between a `T x 2` trajectory
/// (or a `1 x 2T` row in `x0 y0 x1 y1 ...` layout) and `gt`.
fn mean_distance(traj: &[f64], gt: &Matrix, valid: &MaskBits) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in valid.valid_indices() {
        let dx = traj[2 * t] - gt.get(t, 0);
        let dy = traj[2 * t + 1] - gt.get(t, 1);
        sum += (dx * dx + dy * dy).sqrt();
        n += 1;
    }
    sum / n as f64
}

/// Mode whose mean trajectory is closest to `gt` (lowest index on ties).
pub fn select_winner(pred: &Prediction, gt: &Matrix, valid: &MaskBits) -> Result<usize> {
    check_gt(gt, valid, pred.horizon())?;
    if !valid.any() {
        return Err(Error::EmptySet("winner selection without valid steps".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (k, m) in pred.means.iter().enumerate() {
        let dist = mean_distance(m.as_slice(), gt, valid);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    Ok(best.0)
}

fn counted_steps(valid: &MaskBits, exclusion: Option<usize>) -> Result<Vec<usize>> {
    let steps: Vec<usize> = valid.valid_indices().filter(|&t| Some(t) != exclusion).collect();
    if steps.is_empty() {
        return Err(Error::EmptySet("no counted steps for the regression loss".into()));
    }
    Ok(steps)
}

/// Mean over counted steps of the diagonal 2-D Gaussian negative log
/// density. `means` and `log_sigmas` use the row layout `x0 y0 x1 y1 ...`.
fn nll_row(means: &[f64], log_sigmas: &[f64], gt: &Matrix, steps: &[usize]) -> f64 {
    let mut sum = 0.0;
    for &t in steps {
        for a in 0..2 {
            let z = (gt.get(t, a) - means[2 * t + a]) * (-log_sigmas[2 * t + a]).exp();
            sum += 0.5 * z * z + log_sigmas[2 * t + a];
        }
        sum += LOG_TWO_PI;
    }
    sum / steps.len() as f64
}

/// Gaussian NLL of one mode (`T x 2` means and log-sigmas).
pub fn gmm_nll(
    means: &Matrix,
    log_sigmas: &Matrix,
    gt: &Matrix,
    valid: &MaskBits,
    exclusion: Option<usize>,
) -> Result<f64> {
    let t = gt.rows();
    check_gt(gt, valid, t)?;
    if means.shape() != (t, 2) || log_sigmas.shape() != (t, 2) {
        return Err(Error::dims("gmm_nll", means.shape(), log_sigmas.shape()));
    }
    let steps = counted_steps(valid, exclusion)?;
    Ok(nll_row(means.as_slice(), log_sigmas.as_slice(), gt, &steps))
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[winner]`.
pub fn classification_loss(logits: &[f64], winner: usize) -> Result<f64> {
    if winner >= logits.len() {
        return Err(Error::Config(format!(
            "winner {winner} out of range for {} modes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[winner])
}

pub fn total_loss(
    pred: &Prediction,
    gt: &Matrix,
    valid: &MaskBits,
    exclusion: Option<usize>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let w = select_winner(pred, gt, valid)?;
    let regression_nll = gmm_nll(&pred.means[w], &pred.log_sigmas[w], gt, valid, exclusion)?;
    let classification_ce = classification_loss(&pred.logits, w)?;
    Ok(LossBreakdown {
        regression_nll,
        classification_ce,
        total: regression_nll + lambda * classification_ce,
        winner_index: w,
    })
}

struct NllRule {
    winner: usize,
    gt: Matrix,
    steps: Vec<usize>,
}

impl BackwardRule for NllRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad_out: &Matrix) -> Vec<Matrix> {
        let (means, log_sigmas) = (inputs[0], inputs[1]);
        let mut gm = Matrix::zeros(means.rows(), means.cols());
        let mut gs = Matrix::zeros(log_sigmas.rows(), log_sigmas.cols());
        let scale = grad_out.get(0, 0) / self.steps.len() as f64;
        let (mu, ls) = (means.row(self.winner), log_sigmas.row(self.winner));
        let (gm_row, gs_row) = (gm.row_mut(self.winner), gs.row_mut(self.winner));
        for &t in &self.steps {
            for a in 0..2 {
                let i = 2 * t + a;
                let inv_var = (-2.0 * ls[i]).exp();
                let r = self.gt.get(t, a) - mu[i];
                gm_row[i] = -r * inv_var * scale;
                gs_row[i] = (1.0 - r * r * inv_var) * scale;
            }
        }
        vec![gm, gs]
    }
}

struct CrossEntropyRule {
    winner: usize,
}

impl BackwardRule for CrossEntropyRule {
    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad_out: &Matrix) -> Vec<Matrix> {
        let logits = inputs[0].row(0);
        let lse = log_sum_exp(logits);
        let g = grad_out.get(0, 0);
        let grad: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(k, &l)| g * ((l - lse).exp() - if k == self.winner { 1.0 } else { 0.0 }))
            .collect();
        vec![Matrix::row_vector(&grad)]
    }
}

/// Records the total loss on the tape. The winner is chosen from the
/// current values and receives no gradient of its own.
pub fn total_loss_graph(
    g: &mut Graph,
    pred: &GraphPrediction,
    gt: &Matrix,
    valid: &MaskBits,
    exclusion: Option<usize>,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let value = pred.value(g)?;
    let breakdown = total_loss(&value, gt, valid, exclusion, lambda)?;
    let steps = counted_steps(valid, exclusion)?;
    let nll = g.custom(
        &[pred.means, pred.log_sigmas],
        Matrix::filled(1, 1, breakdown.regression_nll),
        Box::new(NllRule {
            winner: breakdown.winner_index,
            gt: gt.clone(),
            steps,
        }),
    )?;
    let ce = g.custom(
        &[pred.logits],
        Matrix::filled(1, 1, breakdown.classification_ce),
        Box::new(CrossEntropyRule {
            winner: breakdown.winner_index,
        }),
    )?;
    let ce = g.scale(ce, lambda)?;
    Ok((g.add(nll, ce)?, breakdown))
}

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`,
/// which are then reset to zero.
pub fn optimizer_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Training(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient for `{}`", p.name)));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.as_mut_slice();
        let grads = p.grad.as_mut_slice();
        for (((w, gr), m), v) in values
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            let g = *gr;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            *gr = 0.0;
        }
    }
    Ok(())
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from `lr` towards zero at the last step.
    Linear,
}

impl LrSchedule {
    /// Rate for 0-based step `step` of `total`.
    pub fn rate(self, lr: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Linear => lr * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            other => Err(Error::Config(format!(
                "unknown learning-rate schedule `{other}` (expected constant or linear)"
            ))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            lambda: 1.0,
            mask_ratio: 0.85,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("train.lambda must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "train.mask_ratio = {} is outside [0, 1]",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// One loss-trace record: epoch means, `step` counting optimizer steps so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub step: u64,
    pub regression_nll: f64,
    pub classification_ce: f64,
    pub total: f64,
}

/// One forward/backward/update on a single scene.
pub fn train_step(
    model: &mut ModelParams,
    state: &mut OptimizerState,
    scene: &Scene,
    goal: Option<&crate::scene::GoalConditioning>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pred = model.forward_graph(&mut g, &model.store, scene, goal)?;
    let exclusion = goal.and_then(|gc| gc.exclusion_index);
    let (loss, breakdown) =
        total_loss_graph(&mut g, &pred, &scene.future, &scene.future_mask, exclusion, lambda)?;
    let grads = g.backward(loss, Matrix::filled(1, 1, 1.0))?;
    g.accumulate_into(&grads, &mut model.store);
    optimizer_step(&mut model.store, state)?;
    Ok(breakdown)
}

/// Trains `model` in place, one scene per step, visiting the dataset in a
/// seeded order each epoch. `on_epoch` sees every trace record as it is made.
pub fn train_model(
    model: &mut ModelParams,
    dataset: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TraceRecord),
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySet("training dataset is empty".into()));
    }
    let mut state = OptimizerState::new(&model.store, cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let total_steps = (cfg.epochs * dataset.len()) as u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut nll, mut ce, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let scene = &dataset[i];
            let gc = apply_goal_masking(&scene.future, &scene.future_mask, &mut mask_rng, cfg.mask_ratio)?;
            state.lr = cfg.lr_schedule.rate(cfg.lr, state.step, total_steps);
            let b = train_step(model, &mut state, scene, Some(&gc), cfg.lambda)
                .map_err(|e| Error::Training(format!("epoch {epoch}, sample {i}: {e}")))?;
            if !b.total.is_finite() {
                return Err(Error::Training(format!("epoch {epoch}, sample {i}: non-finite loss")));
            }
            nll += b.regression_nll;
            ce += b.classification_ce;
            total += b.total;
        }
        let n = dataset.len() as f64;
        let rec = TraceRecord {
            epoch,
            step: state.step,
            regression_nll: nll / n,
            classification_ce: ce / n,
            total: total / n,
        };
        on_epoch(&rec);
        trace.push(rec);
    }
    Ok(trace)
}

/// Fresh model from `model_cfg`, trained on `dataset`.
pub fn train(
    dataset: &[Scene],
    model_cfg: crate::golfer::GolferConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<TraceRecord>)> {
    let mut model = ModelParams::new(model_cfg)?;
    let trace = train_model(&mut model, dataset, cfg, |_| {})?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn pred_from(means: Vec<Matrix>, logits: Vec<f64>) -> Prediction {
        let t = means[0].rows();
        let k = means.len();
        Prediction {
            log_sigmas: vec![Matrix::zeros(t, 2); k],
            probs: vec![1.0 / k as f64; k],
            means,
            logits,
        }
    }

    #[test]
    fn closed_forms() {
        assert!((LOG_TWO_PI - (2.0 * PI).ln()).abs() < 1e-15);
        assert!((LOG_TWO_PI - 1.837877).abs() < 1e-6);
        let ce = classification_loss(&[0.3; 6], 2).unwrap();
        assert!((ce - 1.791759).abs() < 1e-6);
        assert!((ce - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn perfect_mode_costs_log_two_pi_per_step() {
        let gt = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 7.0]]);
        let nll = gmm_nll(&gt, &Matrix::zeros(3, 2), &gt, &MaskBits::all_valid(3), None).unwrap();
        assert!((nll - LOG_TWO_PI).abs() < 1e-15);
    }

    #[test]
    fn winner_uses_mean_distance() {
        let gt = Matrix::zeros(4, 2);
        let a = Matrix::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Matrix::from_vec(4, 2, vec![0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let p = pred_from(vec![a.clone(), b.clone()], vec![0.0, 0.0]);
        assert_eq!(select_winner(&p, &gt, &MaskBits::all_valid(4)).unwrap(), 0);
        let p = pred_from(vec![b, gt.clone()], vec![0.0, 0.0]);
        assert_eq!(select_winner(&p, &gt, &MaskBits::all_valid(4)).unwrap(), 1);
        // exact tie goes to the lower index
        let p = pred_from(vec![a.clone(), a], vec![0.0, 0.0]);
        assert_eq!(select_winner(&p, &gt, &MaskBits::all_valid(4)).unwrap(), 0);
    }

    #[test]
    fn empty_counted_set_is_an_error() {
        let gt = Matrix::zeros(2, 2);
        let valid = MaskBits(vec![false, true]);
        assert!(matches!(
            gmm_nll(&gt, &gt, &gt, &valid, Some(1)),
            Err(Error::EmptySet(_))
        ));
        let p = pred_from(vec![gt.clone()], vec![0.0]);
        assert!(select_winner(&p, &gt, &MaskBits::all_invalid(2)).is_err());
    }

    #[test]
    fn lambda_zero_is_pure_regression() {
        let gt = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let p = pred_from(vec![Matrix::zeros(2, 2), gt.clone()], vec![3.0, -1.0]);
        let b = total_loss(&p, &gt, &MaskBits::all_valid(2), None, 0.0).unwrap();
        assert_eq!(b.total, b.regression_nll);
        assert_eq!(b.winner_index, 1);
        let b2 = total_loss(&p, &gt, &MaskBits::all_valid(2), None, 0.5).unwrap();
        assert_eq!(b2.total, b2.regression_nll + 0.5 * b2.classification_ce);
    }

    #[test]
    fn cross_entropy_vanishes_with_confidence() {
        let mut prev = f64::INFINITY;
        for s in [0.0, 1.0, 5.0, 20.0, 50.0] {
            let ce = classification_loss(&[s, 0.0, 0.0], 0).unwrap();
            assert!(ce < prev);
            prev = ce;
        }
        assert!(prev < 1e-20);
        assert!(classification_loss(&[1e300, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn zero_grad_step_keeps_weights() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::filled(2, 2, 0.5));
        let before = store.clone();
        let mut st = OptimizerState::new(&store, 0.1);
        optimizer_step(&mut store, &mut st).unwrap();
        assert_eq!(store.iter().next().unwrap().value, before.iter().next().unwrap().value);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("decoder.w", Matrix::zeros(1, 1));
        store.get_mut(id).grad.set(0, 0, f64::NAN);
        let mut st = OptimizerState::new(&store, 0.1);
        match optimizer_step(&mut store, &mut st) {
            Err(Error::Training(m)) => assert!(m.contains("decoder.w")),
            other => panic!("{other:?}"),
        }
    }
}
