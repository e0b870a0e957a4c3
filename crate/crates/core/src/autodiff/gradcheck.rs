//! Central finite-difference oracle for tape gradients.

use rand::Rng as _;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::{seeded, Rng};

/// Differentiable operation kinds exercised by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckKind {
    MatMul,
    Add,
    AddRowBroadcast,
    Mul,
    Scale,
    Relu,
    Mean,
    MeanAxis0,
    MeanAxis1,
    L2Normalize,
    CosineSimilarity,
    CosineBroadcast,
    Exp,
    Ln,
    LogSumExp,
    Concat,
    Softmax,
    SoftmaxNll,
    SliceRows,
}

impl GradCheckKind {
    pub const ALL: [GradCheckKind; 19] = [
        GradCheckKind::MatMul,
        GradCheckKind::Add,
        GradCheckKind::AddRowBroadcast,
        GradCheckKind::Mul,
        GradCheckKind::Scale,
        GradCheckKind::Relu,
        GradCheckKind::Mean,
        GradCheckKind::MeanAxis0,
        GradCheckKind::MeanAxis1,
        GradCheckKind::L2Normalize,
        GradCheckKind::CosineSimilarity,
        GradCheckKind::CosineBroadcast,
        GradCheckKind::Exp,
        GradCheckKind::Ln,
        GradCheckKind::LogSumExp,
        GradCheckKind::Concat,
        GradCheckKind::Softmax,
        GradCheckKind::SoftmaxNll,
        GradCheckKind::SliceRows,
    ];
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero on both sides compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=5)
}

fn mat(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, uniform(rng, r * c)).expect("valid shape")
}

fn instance(kind: GradCheckKind, rng: &mut Rng) -> (OpKind<f64>, Vec<Tensor<f64>>) {
    let (r, c) = (dim(rng), dim(rng) + 1);
    match kind {
        GradCheckKind::MatMul => {
            let m = dim(rng);
            (OpKind::MatMul, vec![mat(rng, r, c), mat(rng, c, m)])
        }
        GradCheckKind::Add => (OpKind::Add, vec![mat(rng, r, c), mat(rng, r, c)]),
        GradCheckKind::AddRowBroadcast => (
            OpKind::Add,
            vec![mat(rng, r, c), Tensor::vector(uniform(rng, c)).unwrap()],
        ),
        GradCheckKind::Mul => (OpKind::Mul, vec![mat(rng, r, c), mat(rng, r, c)]),
        GradCheckKind::Scale => {
            let s = rng.random_range(-2.0..2.0);
            (OpKind::Scale(s), vec![mat(rng, r, c)])
        }
        GradCheckKind::Relu => {
            // keep every coordinate at least 0.1 away from the kink
            let data = (0..r * c)
                .map(|_| {
                    let m: f64 = rng.random_range(0.1..1.0);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            (OpKind::Relu, vec![Tensor::matrix(r, c, data).unwrap()])
        }
        GradCheckKind::Mean => (OpKind::Mean(None), vec![mat(rng, r, c)]),
        GradCheckKind::MeanAxis0 => (OpKind::Mean(Some(0)), vec![mat(rng, r, c)]),
        GradCheckKind::MeanAxis1 => (OpKind::Mean(Some(1)), vec![mat(rng, r, c)]),
        GradCheckKind::L2Normalize => (OpKind::L2Normalize, vec![mat(rng, r, c)]),
        GradCheckKind::CosineSimilarity => (
            OpKind::CosineSimilarity,
            vec![mat(rng, r, c), mat(rng, r, c)],
        ),
        GradCheckKind::CosineBroadcast => (
            OpKind::CosineSimilarity,
            vec![mat(rng, r, c), Tensor::vector(uniform(rng, c)).unwrap()],
        ),
        GradCheckKind::Exp => (OpKind::Exp, vec![mat(rng, r, c)]),
        GradCheckKind::Ln => {
            let data = (0..r * c).map(|_| rng.random_range(0.1..1.0)).collect();
            (OpKind::Ln, vec![Tensor::matrix(r, c, data).unwrap()])
        }
        GradCheckKind::LogSumExp => (OpKind::LogSumExp, vec![mat(rng, r, c)]),
        GradCheckKind::Concat => {
            let r2 = dim(rng);
            (OpKind::Concat, vec![mat(rng, r, c), mat(rng, r2, c)])
        }
        GradCheckKind::Softmax => (OpKind::Softmax, vec![mat(rng, r, c)]),
        GradCheckKind::SoftmaxNll => {
            let targets = (0..r).map(|_| rng.random_range(0..c)).collect();
            (OpKind::SoftmaxNll(targets), vec![mat(rng, r, c)])
        }
        GradCheckKind::SliceRows => {
            let rows = r + 1;
            let start = rng.random_range(0..rows);
            let end = rng.random_range(start + 1..=rows);
            (OpKind::SliceRows(start, end), vec![mat(rng, rows, c)])
        }
    }
}

/// Builds `mean(op(inputs) * weights)` on a fresh tape.
fn probe(
    kind: &OpKind<f64>,
    inputs: &[Tensor<f64>],
    weights: Option<&[f64]>,
) -> Result<(Tape<f64>, Vec<Var>, Var, Vec<usize>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = tape.apply(kind.clone(), &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let w = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; tape.tensor(out).numel()],
    };
    let wv = tape.constant(Tensor::new(out_shape.clone(), w)?);
    let prod = tape.mul(out, wv)?;
    let loss = tape.mean(prod, None)?;
    Ok((tape, vars, loss, out_shape))
}

/// Maximum relative error between tape gradients and central differences
/// over `trials` random instances of `kind`.
pub fn check_gradients(kind: GradCheckKind, trials: usize, step: f64, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    if !(step > 0.0 && step <= 1e-3) {
        return Err(invalid(format!("step {step} outside (0, 1e-3]")));
    }
    let mut rng = seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (op, inputs) = instance(kind, &mut rng);
        let (_, _, _, out_shape) = probe(&op, &inputs, None)?;
        let weights = uniform(&mut rng, out_shape.iter().product());
        let (mut tape, vars, loss, _) = probe(&op, &inputs, Some(&weights))?;
        tape.backward(loss)?;
        for (k, var) in vars.iter().enumerate() {
            let analytic = tape.grad(*var).to_vec();
            for (i, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut shifted = inputs.clone();
                    shifted[k].data[i] += delta;
                    let (t, _, l, _) = probe(&op, &shifted, Some(&weights))?;
                    Ok(t.item(l))
                };
                let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    Ok(worst)
}
