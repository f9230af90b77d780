//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::matrix::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Random projection used to reduce a non-scalar output to a scalar.
fn projection(shape: (usize, usize), seed: u64) -> Matrix {
    if shape == (1, 1) {
        return Matrix::filled(1, 1, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.0 * shape.1)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(shape.0, shape.1, data).expect("projection shape")
}

fn projected(value: &Matrix, r: &Matrix) -> f64 {
    value
        .as_slice()
        .iter()
        .zip(r.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericInstability(format!("non-finite {what}")))
    }
}

/// Checks `f` with respect to every coordinate of every input.
///
/// Non-scalar outputs are contracted with a seeded random matrix, so the
/// check covers a random direction of the full Jacobian.
pub fn gradient_check<F>(f: F, inputs: &[Matrix], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.input(m.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs)?;
    let r = projection(g.value(out).shape(), seed);
    let grads = g.backward(out, r.clone())?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates_checked: 0,
    };
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].as_slice()[j];
            work[i].as_mut_slice()[j] = orig + FD_STEP;
            let (gp, _, op) = eval(&work)?;
            let plus = finite(projected(gp.value(op), &r), "objective")?;
            work[i].as_mut_slice()[j] = orig - FD_STEP;
            let (gm, _, om) = eval(&work)?;
            let minus = finite(projected(gm.value(om), &r), "objective")?;
            work[i].as_mut_slice()[j] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i].as_slice()[j], numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Checks the gradients that a scalar objective accumulates into `store`.
///
/// `sample` limits the number of coordinates checked per parameter (chosen
/// with a seeded generator); `None` checks every coordinate.
pub fn gradient_check_params<F>(
    f: F,
    store: &ParamStore,
    seed: u64,
    sample: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if g.value(out).shape() != (1, 1) {
        return Err(Error::dims("gradient_check_params", g.value(out).shape(), (1, 1)));
    }
    let grads = g.backward(out, Matrix::filled(1, 1, 1.0))?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    g.accumulate_into(&grads, &mut analytic);

    let objective = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        finite(g.value(out).as_slice()[0], "objective")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates_checked: 0,
    };
    for (pi, param) in store.iter().enumerate() {
        let n = param.value.len();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let id = super::matrix::ParamId(pi);
        for j in coords {
            let orig = param.value.as_slice()[j];
            work.get_mut(id).value.as_mut_slice()[j] = orig + FD_STEP;
            let plus = objective(&work)?;
            work.get_mut(id).value.as_mut_slice()[j] = orig - FD_STEP;
            let minus = objective(&work)?;
            work.get_mut(id).value.as_mut_slice()[j] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic.get(id).grad.as_slice()[j], numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
