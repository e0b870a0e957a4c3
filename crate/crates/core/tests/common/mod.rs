#![allow(dead_code)]

use ddn_core::autodiff::{relative_error, Tape, Tensor};
use ddn_core::loss::{classification_loss, dpcl_loss, total_loss, DpclOptions, RoutedBatch};
use ddn_core::model::{DdnModel, ModelConfig};
use ddn_core::rng::seeded;
use ddn_core::synth::DomainLabel;
use rand::Rng;

pub mod erm;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Dpcl { s_plus: usize },
    Classification,
    Total { lambda: f64 },
}

pub struct Instance {
    pub model: DdnModel<f64>,
    /// `xs[s]` is domain `s`'s batch.
    pub xs: Vec<Vec<Vec<f64>>>,
    pub ys: Vec<Vec<usize>>,
    pub opts: DpclOptions,
}

pub fn random_instance(seed: u64, domains: usize, n: usize) -> Instance {
    let mut rng = seeded(seed);
    let (dim, classes) = (5, 3);
    let config = ModelConfig {
        input_dim: dim,
        hidden: vec![6],
        emb_dim: 4,
        classes,
        domains,
        shared_classifier: rng.random_bool(0.25),
    };
    let mut model = DdnModel::new(config, &mut rng).unwrap();
    // nonzero biases so every parameter matters
    for p in model.params_mut() {
        for v in p.data.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let xs = (0..domains)
        .map(|_| (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let ys = (0..domains)
        .map(|_| (0..n).map(|_| rng.random_range(0..classes)).collect())
        .collect();
    let opts = DpclOptions {
        tau: rng.random_range(0.1..1.0),
        paper_exact: rng.random_bool(0.2),
        stop_grad_prototype: false,
    };
    Instance { model, xs, ys, opts }
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(p, v)| v * w[p * out + j]).sum::<f64>())
        .collect()
}

/// Smallest |pre-activation| entering any relu for this instance. Finite
/// differences are only meaningful away from the kink.
pub fn relu_margin(inst: &Instance) -> f64 {
    let m = &inst.model;
    let mut margin = f64::INFINITY;
    for x in inst.xs.iter().flatten() {
        let mut h = x.clone();
        for (i, l) in m.encoder.iter().enumerate() {
            h = affine(&h, &l.weight.data, &l.bias.data, l.out_dim());
            if i + 1 < m.encoder.len() {
                margin = h.iter().fold(margin, |a, v| a.min(v.abs()));
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        for p in &m.projectors {
            let z = affine(&h, &p.hidden.weight.data, &p.hidden.bias.data, p.hidden.out_dim());
            margin = z.iter().fold(margin, |a, v| a.min(v.abs()));
        }
    }
    margin
}

/// Loss value and, when `with_grad`, the gradient of every parameter in
/// `params()` order.
pub fn evaluate(inst: &Instance, kind: LossKind, with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let m = &inst.model;
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, with_grad);
    let mut per_domain = Vec::new();
    let mut batches = Vec::new();
    for (s, (x, y)) in inst.xs.iter().zip(&inst.ys).enumerate() {
        let xv = tape.constant(Tensor::from_rows(x).unwrap());
        let e = m.encode_vars(&mut tape, &vars, xv).unwrap();
        per_domain.push(e);
        batches.push(RoutedBatch {
            domain: DomainLabel::Source(s),
            embeddings: e,
            targets: y.clone(),
        });
    }
    let loss = match kind {
        LossKind::Dpcl { s_plus } => dpcl_loss(&mut tape, m, &vars, &per_domain, s_plus, &inst.opts).unwrap(),
        LossKind::Classification => classification_loss(&mut tape, m, &vars, &batches).unwrap(),
        LossKind::Total { lambda } => {
            total_loss(&mut tape, m, &vars, &batches, lambda, Some(&inst.opts))
                .unwrap()
                .total
        }
    };
    let value = tape.item(loss);
    if !with_grad {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = vars.all.iter().map(|&v| tape.grad(v).to_vec()).collect();
    (value, grads)
}

/// Max relative error between tape gradients and central differences over
/// every parameter.
pub fn model_gradient_error(inst: &mut Instance, kind: LossKind) -> f64 {
    let (_, analytic) = evaluate(inst, kind, true);
    let mut worst: f64 = 0.0;
    let sizes: Vec<usize> = inst.model.params().iter().map(|(_, p)| p.data.len()).collect();
    for (k, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = inst.model.params_mut()[k].data[i];
            inst.model.params_mut()[k].data[i] = orig + FD_STEP;
            let up = evaluate(inst, kind, false).0;
            inst.model.params_mut()[k].data[i] = orig - FD_STEP;
            let down = evaluate(inst, kind, false).0;
            inst.model.params_mut()[k].data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    worst
}

/// Draws instances from consecutive seeds, skipping those with a relu input
/// within `1e-3` of the kink, until `count` are collected.
pub fn smooth_instances(count: usize, domains: usize, n: usize, first_seed: u64) -> Vec<Instance> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    while out.len() < count {
        let inst = random_instance(seed, domains, n);
        seed += 1;
        if relu_margin(&inst) > 1e-3 {
            out.push(inst);
        }
    }
    out
}
