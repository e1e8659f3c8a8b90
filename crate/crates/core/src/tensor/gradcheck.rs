//! Finite-difference checks of the tape's backward rules.
//!
//! Each op is wrapped as `loss = Σ w ⊙ op(inputs)` with fixed random `w`, so
//! every input gradient is a dense, order-one vector. Analytic gradients
//! from [`Tape::backward`] are compared against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Every differentiable tape op, by name.
pub const OPS: [&str; 17] = [
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "silu",
    "tanh",
    "square",
    "layer_norm",
    "concat_cols",
    "gather_rows",
    "scatter_rows",
    "row_scale",
    "sum",
    "mean",
    "mse",
];

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Report {
    pub op: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

fn instance(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Build) {
    let r = rng.random_range(2..5usize);
    let c = rng.random_range(2..6usize);
    let k = rng.random_range(2..5usize);
    match op {
        "matmul" => (vec![vec![r, k], vec![k, c]], |t, v| t.matmul(v[0], v[1])),
        "linear" => (vec![vec![r, k], vec![k, c], vec![c]], |t, v| t.linear(v[0], v[1], v[2])),
        "add" => (vec![vec![r, c], vec![r, c]], |t, v| t.add(v[0], v[1])),
        "sub" => (vec![vec![r, c], vec![1]], |t, v| t.sub(v[0], v[1])),
        "mul" => (vec![vec![r, c], vec![r, c]], |t, v| t.mul(v[0], v[1])),
        "scale" => (vec![vec![r, c]], |t, v| Ok(t.scale(v[0], -1.7))),
        "silu" => (vec![vec![r, c]], |t, v| Ok(t.silu(v[0]))),
        "tanh" => (vec![vec![r, c]], |t, v| Ok(t.tanh(v[0]))),
        "square" => (vec![vec![r, c]], |t, v| Ok(t.square(v[0]))),
        "layer_norm" => (vec![vec![r, c + 1], vec![c + 1], vec![c + 1]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        "concat_cols" => (vec![vec![r, c], vec![r, k]], |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        "gather_rows" => (vec![vec![3, c]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        "scatter_rows" => (vec![vec![3, c]], |t, v| t.scatter_rows(v[0], &[4, 0, 2], 5)),
        "row_scale" => (vec![vec![3, c]], |t, v| t.row_scale(v[0], &[0.5, -2.0, 1.25])),
        "sum" => (vec![vec![r, c]], |t, v| Ok(t.sum(v[0]))),
        "mean" => (vec![vec![r, c]], |t, v| Ok(t.mean(v[0]))),
        "mse" => (vec![vec![r, c], vec![r, c]], |t, v| t.mse(v[0], v[1])),
        other => panic!("unknown op {other}"),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Evaluates the weighted loss; with `grads`, also returns input gradients.
fn evaluate(
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    weights: &mut Option<Vec<f64>>,
    build: Build,
    rng: &mut ChaCha8Rng,
    grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, x)| Tensor::new(s.clone(), x.clone()).map(|t| tape.leaf(t.with_requires_grad(true))))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| random(&out_shape, rng)).clone();
    let w = tape.constant(out_shape, w)?;
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let value = tape.scalar_value(loss)?;
    if !grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect();
    Ok((value, g))
}

/// Checks one random instance of `op`.
pub fn check(op: &'static str, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shapes, build) = instance(op, &mut rng);
    let mut inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let mut weights = None;
    let (_, analytic) = evaluate(&shapes, &inputs, &mut weights, build, &mut rng, true)?;
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i][j];
            inputs[i][j] = x + STEP;
            let (up, _) = evaluate(&shapes, &inputs, &mut weights, build, &mut rng, false)?;
            inputs[i][j] = x - STEP;
            let (down, _) = evaluate(&shapes, &inputs, &mut weights, build, &mut rng, false)?;
            inputs[i][j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            max_rel_error = max_rel_error.max(relative_error(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(Report { op, seed, checked, max_rel_error })
}

/// Checks `per_op` random instances of every op in [`OPS`].
pub fn check_all(per_op: usize, seed: u64) -> Result<Vec<Report>> {
    let mut out = Vec::with_capacity(OPS.len() * per_op);
    for (i, op) in OPS.iter().enumerate() {
        for j in 0..per_op {
            out.push(check(op, seed.wrapping_add((i * per_op + j) as u64))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_instances() {
        for r in check_all(2, 11).unwrap() {
            assert!(r.max_rel_error < 1e-6, "{}: {}", r.op, r.max_rel_error);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn floor_only_affects_tiny_gradients() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }
}
