//! The full finite-difference gradient suite: every tape primitive, every
//! MnM block instantiation, the loss, and the model forward pass composed
//! with the total loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::golfer::{GolferConfig, GraphPrediction, ModelParams};
use crate::losstrain::total_loss_graph;
use crate::mnm::{MnmBlock, MnmConfig};
use crate::numerics::{
    gradient_check, gradient_check_params, random_matrix, Activation, GradCheckReport, Graph, MaskBits,
    Matrix, ParamStore, Var, LAYER_NORM_EPS,
};
use crate::scene::{
    apply_goal_masking, generate_synthetic_scene, scene_rng, GeneratorConfig, GoalConditioning,
};

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
}

impl SuiteEntry {
    fn new(name: impl Into<String>, report: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            max_rel_error: report.max_rel_error,
            coordinates_checked: report.coordinates_checked,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Runs every check. `model` sizes the block and composite checks; the
/// composite samples `per_tensor` coordinates of each parameter tensor
/// (`None` checks them all).
pub fn run_gradient_suite(model: &GolferConfig, seed: u64, per_tensor: Option<usize>) -> Result<Vec<SuiteEntry>> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = primitives(&mut rng)?;
    out.extend(blocks(model, &mut rng)?);
    out.push(loss(model, &mut rng)?);
    out.extend(composite(model, seed, per_tensor)?);
    Ok(out)
}

type Op = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn primitives(rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let m = |rng: &mut ChaCha8Rng, r, c| random_matrix(rng, r, c, 1.5);
    let mask = MaskBits(vec![true, false, true, true]);
    let rows = MaskBits(vec![true, true, false, true]);
    let cases: Vec<(&str, Box<Op>, Vec<Matrix>)> = vec![
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![m(rng, 3, 4), m(rng, 4, 2)]),
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![m(rng, 3, 4), m(rng, 3, 4)]),
        ("add_row", Box::new(|g, v| g.add_row(v[0], v[1])), vec![m(rng, 3, 4), m(rng, 1, 4)]),
        ("mul_row", Box::new(|g, v| g.mul_row(v[0], v[1])), vec![m(rng, 3, 4), m(rng, 1, 4)]),
        ("scale", Box::new(|g, v| g.scale(v[0], -0.7)), vec![m(rng, 3, 4)]),
        ("transpose", Box::new(|g, v| g.transpose(v[0])), vec![m(rng, 3, 4)]),
        (
            "layer_norm",
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
            vec![m(rng, 4, 6), m(rng, 1, 6), m(rng, 1, 6)],
        ),
        ("relu", Box::new(|g, v| g.activation(v[0], Activation::Relu)), vec![m(rng, 3, 4)]),
        ("gelu", Box::new(|g, v| g.activation(v[0], Activation::Gelu)), vec![m(rng, 3, 4)]),
        (
            "masked_max_pool",
            Box::new(move |g, v| g.masked_max_pool(v[0], &mask)),
            vec![m(rng, 4, 5)],
        ),
        (
            "masked_softmax_rows",
            Box::new(move |g, v| g.masked_softmax_rows(v[0], &MaskBits(vec![true, true, false, true]), &rows)),
            vec![m(rng, 4, 4)],
        ),
        ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[0], v[1]])), vec![m(rng, 3, 2), m(rng, 3, 4)]),
        ("concat_row", Box::new(|g, v| g.concat_row(v[0], v[1])), vec![m(rng, 3, 2), m(rng, 1, 3)]),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 2)), vec![m(rng, 3, 4)]),
        ("stack_rows", Box::new(|g, v| g.stack_rows(&[v[0], v[1]])), vec![m(rng, 1, 3), m(rng, 1, 3)]),
        ("max", Box::new(|g, v| g.max(v[0], v[1])), vec![m(rng, 3, 4), m(rng, 3, 4)]),
        ("clamp", Box::new(|g, v| g.clamp(v[0], -1.0, 1.0)), vec![m(rng, 3, 4)]),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, f, inputs)) in cases.into_iter().enumerate() {
        let report = gradient_check(|g, v| f(g, v), &inputs, i as u64)?;
        out.push(SuiteEntry::new(name, report));
    }
    Ok(out)
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, amp: f64) {
    for p in store.iter_mut() {
        for v in p.value.as_mut_slice() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

fn blocks(model: &GolferConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SuiteEntry>> {
    let d = model.d;
    let mut configs = Vec::new();
    for heads in [1, model.heads] {
        let fe = MnmConfig::feature_extractor(d, heads);
        let inter = MnmConfig::interaction(d, heads);
        let attn = MnmConfig::attention(d, heads);
        configs.push((format!("mnm.basic.pool_concat.h{heads}"), MnmConfig { query: false, ..fe }));
        configs.push((format!("mnm.basic.pool_product.h{heads}"), MnmConfig { query: false, ..inter }));
        configs.push((format!("mnm.query.pool_concat.h{heads}"), fe));
        configs.push((format!("mnm.query.pool_product.h{heads}"), inter));
        configs.push((format!("mnm.basic.attention.h{heads}"), attn));
        configs.push((format!("mnm.basic.attention_qk.h{heads}"), MnmConfig { learned_qk: true, ..attn }));
        if heads == model.heads {
            break;
        }
    }
    let mut out = Vec::new();
    for (name, config) in configs {
        let mut store = ParamStore::new();
        let block = MnmBlock::new(&mut store, "block", config, rng)?;
        perturb(&mut store, rng, 0.1);
        let x = random_matrix(rng, 5, d, 1.5);
        let c = random_matrix(rng, 1, d, 1.0);
        let mask = MaskBits(vec![true, true, false, true, true]);
        let apply = |g: &mut Graph, s: &ParamStore, x: Var, c: Var| -> Result<Var> {
            if config.query {
                let (xo, co) = block.query(g, s, x, c, &mask)?;
                g.mul_row(xo, co)
            } else {
                block.basic(g, s, x, &mask)
            }
        };
        let wrt_inputs = gradient_check(|g, v| apply(g, &store, v[0], v[1]), &[x.clone(), c.clone()], 1)?;
        out.push(SuiteEntry::new(format!("{name}.inputs"), wrt_inputs));

        let r = random_matrix(rng, 5, d, 1.0);
        let objective = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let (xv, cv, rv) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(r.clone()));
            let y = apply(g, s, xv, cv)?;
            let yt = g.transpose(y)?;
            let prod = g.matmul(rv, yt)?;
            let left = g.constant(Matrix::filled(1, 5, 1.0));
            let right = g.constant(Matrix::filled(5, 1, 1.0));
            let s = g.matmul(left, prod)?;
            g.matmul(s, right)
        };
        let wrt_params = gradient_check_params(objective, &store, 2, Some(16))?;
        out.push(SuiteEntry::new(format!("{name}.params"), wrt_params));
    }
    Ok(out)
}

fn loss(model: &GolferConfig, rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let (k, t) = (model.k, model.horizon);
    let gt = random_matrix(rng, t, 2, 3.0);
    let mut valid = MaskBits::all_valid(t);
    if t > 2 {
        valid.0[t - 2] = false;
    }
    let inputs = [
        random_matrix(rng, k, 2 * t, 3.0),
        random_matrix(rng, k, 2 * t, 1.0),
        random_matrix(rng, 1, k, 2.0),
    ];
    let report = gradient_check(
        |g, v| {
            let pred = GraphPrediction {
                means: v[0],
                log_sigmas: v[1],
                logits: v[2],
            };
            Ok(total_loss_graph(g, &pred, &gt, &valid, Some(0), 0.7)?.0)
        },
        &inputs,
        3,
    )?;
    Ok(SuiteEntry::new("loss.total", report))
}

fn composite(model: &GolferConfig, seed: u64, per_tensor: Option<usize>) -> Result<Vec<SuiteEntry>> {
    let mut params = ModelParams::new(model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    perturb(&mut params.store, &mut rng, 0.1);
    let gen = GeneratorConfig {
        roads_min: 2,
        roads_max: 4,
        agents_min: 0,
        agents_max: 3,
        points_per_polyline: 5,
        history_steps: 4,
        horizon: model.horizon,
        partial_prob: 0.3,
        ..Default::default()
    };
    let mut out = Vec::new();
    for i in 0..3u64 {
        let scene = generate_synthetic_scene(&gen, &mut scene_rng(seed, i))?;
        let gc = match i {
            0 => GoalConditioning::fully_masked(model.horizon, crate::scene::GoalPlacement::RoadsSet),
            _ => apply_goal_masking(&scene.future, &scene.future_mask, &mut rng, 0.0)?,
        };
        let report = gradient_check_params(
            |g, store| {
                let pred = params.forward_graph(g, store, &scene, Some(&gc))?;
                let excl = gc.exclusion_index;
                Ok(total_loss_graph(g, &pred, &scene.future, &scene.future_mask, excl, 0.7)?.0)
            },
            &params.store,
            seed + i,
            per_tensor,
        )?;
        out.push(SuiteEntry::new(format!("model.forward_total_loss.scene{i}"), report));
    }
    Ok(out)
}
