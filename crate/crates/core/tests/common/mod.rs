//! Dense reference implementations shared by the integration tests. Plain
//! loops, no tape.
#![allow(dead_code)]

use mnm_core::golfer::{Mlp, ModelParams};
use mnm_core::mnm::{MatchKind, MnmBlock, NormParams};
use mnm_core::numerics::{Activation, MaskBits, Matrix, ParamId, ParamStore};
use mnm_core::scene::{ElementKind, GoalPlacement, Scene, SceneElement};
use rand::Rng;

pub const EPS: f64 = 1e-5;

pub fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

pub fn ln(x: &Matrix, store: &ParamStore, norm: NormParams) -> Matrix {
    let gamma = store.value(norm.gamma).as_slice();
    let beta = store.value(norm.beta).as_slice();
    let d = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let mean = x.row(r).iter().sum::<f64>() / d;
        let var = x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        for c in 0..x.cols() {
            out.set(r, c, (x.get(r, c) - mean) / (var + EPS).sqrt() * gamma[c] + beta[c]);
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.add(b).unwrap()
}

pub fn ffn(s: &Matrix, store: &ParamStore, norm: NormParams, w_in: &Matrix, w_out: &Matrix, act: Activation) -> Matrix {
    let h = mm(&ln(s, store, norm), w_in).map(|v| act.apply(v));
    add(&mm(&h, w_out), s)
}

pub fn pool(x: &Matrix, mask: &MaskBits) -> Vec<f64> {
    (0..x.cols())
        .map(|c| {
            (0..x.rows())
                .filter(|&r| mask.is_valid(r))
                .map(|r| x.get(r, c))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Per-head pooled match, written head by head.
pub fn pooled_match(block: &MnmBlock, store: &ParamStore, c: &[f64], x: &Matrix) -> Matrix {
    let dh = block.config.head_dim();
    let mut out = Matrix::zeros(x.rows(), block.config.d);
    for h in 0..block.config.heads {
        for r in 0..x.rows() {
            let xs = &x.row(r)[h * dh..(h + 1) * dh];
            let cs = &c[h * dh..(h + 1) * dh];
            let joined: Vec<f64> = match block.config.matching {
                MatchKind::Concat => xs.iter().chain(cs).copied().collect(),
                MatchKind::Product => xs.iter().zip(cs).map(|(a, b)| a * b).collect(),
                MatchKind::AttentionMatmul => unreachable!(),
            };
            let projected = match block.match_proj.get(h) {
                Some(&w) => mm(&Matrix::row_vector(&joined), store.value(w)).into_vec(),
                None => joined,
            };
            out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&projected);
        }
    }
    out
}

pub fn oracle_basic_pool(block: &MnmBlock, store: &ParamStore, x: &Matrix, mask: &MaskBits) -> Matrix {
    let c = pool(&ln(x, store, block.norm_mix), mask);
    let s = add(&pooled_match(block, store, &c, x), x);
    ffn(&s, store, block.norm_ffn, store.value(block.w1), store.value(block.w2), block.config.activation)
}

pub fn oracle_query(
    block: &MnmBlock,
    store: &ParamStore,
    x: &Matrix,
    c: &[f64],
    mask: &MaskBits,
) -> (Matrix, Vec<f64>) {
    let q = block.query.unwrap();
    let s = add(&pooled_match(block, store, c, x), x);
    let c_new = Matrix::row_vector(&pool(&ln(&s, store, block.norm_mix), mask));
    let act = block.config.activation;
    let x_out = ffn(&s, store, block.norm_ffn, store.value(block.w1), store.value(block.w2), act);
    let c_out = ffn(&c_new, store, q.norm, store.value(q.w3), store.value(q.w4), act);
    (x_out, c_out.into_vec())
}

/// Pre-norm self-attention encoder layer with values taken from the raw
/// tokens and no output projection, written from the textbook definition.
pub fn transformer_layer(block: &MnmBlock, store: &ParamStore, x: &Matrix, mask: &MaskBits) -> Matrix {
    let (n, d) = x.shape();
    let heads = block.config.heads;
    let dh = d / heads;
    let xn = ln(x, store, block.norm_mix);
    let mut attn_out = Matrix::zeros(n, d);
    for h in 0..heads {
        for i in 0..n {
            if !mask.is_valid(i) {
                continue;
            }
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if mask.is_valid(j) {
                    let mut dot = 0.0;
                    for k in 0..dh {
                        dot += xn.get(i, h * dh + k) * xn.get(j, h * dh + k);
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for k in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += w[j] / z * x.get(j, h * dh + k);
                }
                attn_out.set(i, h * dh + k, acc);
            }
        }
    }
    let s = add(&attn_out, x);
    ffn(&s, store, block.norm_ffn, store.value(block.w1), store.value(block.w2), block.config.activation)
}

/// Adds uniform noise in `[-amp, amp)` to every stored weight.
pub fn perturb<R: Rng>(store: &mut ParamStore, rng: &mut R, amp: f64) {
    for i in 0..store.len() {
        for v in store.get_mut(ParamId(i)).value.as_mut_slice() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

pub fn affine(x: &Matrix, store: &ParamStore, w: ParamId, b: ParamId) -> Matrix {
    let mut y = mm(x, store.value(w));
    let bias = store.value(b);
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            y.set(r, c, y.get(r, c) + bias.get(0, c));
        }
    }
    y
}

pub fn mlp(x: &Matrix, store: &ParamStore, m: Mlp, act: Activation) -> Matrix {
    let h = affine(x, store, m.hidden.w, m.hidden.b).map(|v| act.apply(v));
    affine(&h, store, m.out.w, m.out.b)
}

fn metric_cols(kind: ElementKind) -> &'static [usize] {
    match kind {
        ElementKind::Road | ElementKind::Goal => &[0, 1],
        _ => &[0, 1, 2, 3],
    }
}

pub fn oracle_element(model: &ModelParams, e: &SceneElement) -> Vec<f64> {
    let store = &model.store;
    let mut tokens = e.tokens.clone();
    for r in 0..tokens.rows() {
        for &c in metric_cols(e.kind) {
            tokens.set(r, c, tokens.get(r, c) / model.config.position_scale);
        }
    }
    let proj = model.projections[e.kind.index()];
    let mut x = affine(&tokens, store, proj.tokens.w, proj.tokens.b);
    let mut c = affine(&e.context.to_row(), store, proj.context.w, proj.context.b).into_vec();
    for blk in &model.fe_blocks {
        (x, c) = oracle_query(blk, store, &x, &c, &e.mask);
    }
    pool(&x, &e.mask).iter().zip(&c).map(|(a, b)| a.max(*b)).collect()
}

pub fn oracle_interact(
    blocks: &[MnmBlock],
    store: &ParamStore,
    ego: &[f64],
    latents: &Matrix,
    mask: &MaskBits,
) -> Vec<f64> {
    let (mut x, mut c) = (latents.clone(), ego.to_vec());
    for b in blocks {
        (x, c) = oracle_query(b, store, &x, &c, mask);
    }
    c
}

fn oracle_set(model: &ModelParams, elements: &[&SceneElement], null: ParamId) -> (Matrix, MaskBits) {
    let d = model.config.d;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut mask = Vec::new();
    if !elements.iter().any(|e| e.mask.any()) {
        rows.push(model.store.value(null).as_slice().to_vec());
        mask.push(true);
    }
    for e in elements {
        if e.mask.any() {
            rows.push(oracle_element(model, e));
            mask.push(true);
        } else {
            rows.push(vec![0.0; d]);
            mask.push(false);
        }
    }
    let flat: Vec<f64> = rows.concat();
    (Matrix::from_vec(rows.len(), d, flat).unwrap(), MaskBits(mask))
}

pub fn oracle_scene(
    model: &ModelParams,
    scene: &Scene,
    goal: Option<(&SceneElement, GoalPlacement)>,
) -> Vec<f64> {
    let store = &model.store;
    let f_e = oracle_element(model, &scene.ego);
    let mut roads: Vec<&SceneElement> = scene.roads.iter().collect();
    let mut agents: Vec<&SceneElement> = scene.agents.iter().collect();
    match goal {
        Some((g, GoalPlacement::RoadsSet)) => roads.push(g),
        Some((g, GoalPlacement::AgentsSet)) => agents.push(g),
        None => {}
    }
    let (rl, rm) = oracle_set(model, &roads, model.null_road);
    let (al, am) = oracle_set(model, &agents, model.null_agent);
    let f_r = oracle_interact(&model.road_blocks, store, &f_e, &rl, &rm);
    let f_a = oracle_interact(&model.agent_blocks, store, &f_e, &al, &am);
    let joined = Matrix::row_vector(&[f_e, f_r, f_a].concat());
    mlp(&joined, store, model.fusion, model.config.activation).into_vec()
}

/// `(means, log_sigmas, logits, probs)` with means and log-sigmas as
/// `K` rows in `x0 y0 x1 y1 ...` layout.
pub fn oracle_decode(model: &ModelParams, f_enc: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let store = &model.store;
    let act = model.config.activation;
    let t2 = 2 * model.config.horizon;
    let f = Matrix::row_vector(f_enc);
    let mut means = Vec::new();
    let mut sigmas = Vec::new();
    for branch in &model.regression {
        let out = mlp(&f, store, *branch, act).into_vec();
        means.push(out[..t2].iter().map(|v| v * model.config.position_scale).collect());
        let shift = model.config.position_scale.ln();
        sigmas.push(out[t2..].iter().map(|v| (v + shift).clamp(-5.0, 5.0)).collect());
    }
    let logits = mlp(&f, store, model.classification, act).into_vec();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let probs = e.iter().map(|v| v / z).collect();
    (means, sigmas, logits, probs)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
