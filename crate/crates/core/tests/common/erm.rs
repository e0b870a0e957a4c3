//! With the contrastive term off and one shared head, training is plain
//! pooled cross-entropy. This trainer is written directly on `Vec<f64>` with
//! hand-derived gradients.

use ddn_core::rng::substream;
use ddn_core::synth::Dataset;
use ddn_core::trainer::{init_model, sample_step_batches, train, TrainConfig};

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    fan_in: usize,
    fan_out: usize,
}

fn affine(x: &[f64], rows: usize, l: &Layer) -> Vec<f64> {
    let (k, m) = (l.fan_in, l.fan_out);
    let mut out = vec![0.0; rows * m];
    for i in 0..rows {
        for p in 0..k {
            let a = x[i * k + p];
            for j in 0..m {
                out[i * m + j] += a * l.w[p * m + j];
            }
        }
    }
    for i in 0..rows {
        for j in 0..m {
            out[i * m + j] = out[i * m + j] + l.b[j];
        }
    }
    out
}

// gradient w.r.t. weights, bias and input of `affine`
fn affine_back(x: &[f64], g: &[f64], rows: usize, l: &Layer) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, m) = (l.fan_in, l.fan_out);
    let mut dx = vec![0.0; rows * k];
    for i in 0..rows {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..m {
                acc += g[i * m + j] * l.w[p * m + j];
            }
            dx[i * k + p] = acc;
        }
    }
    let mut dw = vec![0.0; k * m];
    for i in 0..rows {
        for p in 0..k {
            for j in 0..m {
                dw[p * m + j] += x[i * k + p] * g[i * m + j];
            }
        }
    }
    let mut db = vec![0.0; m];
    for i in 0..rows {
        for j in 0..m {
            db[j] += g[i * m + j];
        }
    }
    (dw, db, dx)
}

fn row_max(r: &[f64]) -> f64 {
    r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

fn pooled_step(layers: &mut [Layer], x: &[f64], y: &[usize], lr: f64) -> f64 {
    let rows = y.len();
    let mut acts = vec![x.to_vec()];
    let mut pre = Vec::new();
    for (li, l) in layers.iter().enumerate() {
        let z = affine(acts.last().unwrap(), rows, l);
        let last = li + 1 == layers.len();
        // the head and the final encoder layer are linear
        let enc_last = li + 2 == layers.len();
        let a = if last || enc_last {
            z.clone()
        } else {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    let logits = acts.last().unwrap();
    let m = layers.last().unwrap().fan_out;
    let mut total = 0.0;
    let mut g = Vec::with_capacity(rows * m);
    let scale = 1.0 / rows as f64;
    for (i, &t) in y.iter().enumerate() {
        let r = &logits[i * m..(i + 1) * m];
        let mx = row_max(r);
        let mut s = 0.0;
        for &v in r {
            s += (v - mx).exp();
        }
        total += mx + s.ln() - r[t];
        let mut s2 = 0.0;
        let e: Vec<f64> = r.iter().map(|&v| (v - mx).exp()).collect();
        for &v in &e {
            s2 += v;
        }
        for (j, ev) in e.iter().enumerate() {
            let p = ev / s2;
            g.push((p - if j == t { 1.0 } else { 0.0 }) * scale);
        }
    }
    let loss = total / rows as f64;

    let n = layers.len();
    let mut grads = Vec::new();
    for li in (0..n).rev() {
        let (dw, db, dx) = affine_back(&acts[li], &g, rows, &layers[li]);
        grads.push((li, dw, db));
        if li > 0 {
            // every layer below the last encoder layer ends in a relu
            g = if li < n - 1 {
                dx.iter()
                    .zip(&pre[li - 1])
                    .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect()
            } else {
                dx
            };
        }
    }
    for (li, dw, db) in grads {
        for (w, d) in layers[li].w.iter_mut().zip(&dw) {
            *w -= lr * d;
        }
        for (b, d) in layers[li].b.iter_mut().zip(&db) {
            *b -= lr * d;
        }
    }
    loss
}

pub struct ErmComparison {
    pub steps: usize,
    /// Steps whose `l_y` or `total` differ in any bit from the oracle.
    pub mismatched_steps: Vec<usize>,
    pub params_identical: bool,
}

/// Trains with the library and with the hand-written oracle from the same
/// init and batch stream. `cfg` must disable the contrastive term and share
/// the classifier.
pub fn compare_with_pooled_oracle(cfg: &TrainConfig, data: &Dataset) -> ErmComparison {
    assert!(!cfg.use_dpcl && cfg.shared_classifier);
    let out = train::<f64>(cfg, data).unwrap();

    let init = init_model::<f64>(cfg, data).unwrap();
    let mut layers: Vec<Layer> = init
        .encoder
        .iter()
        .chain(&init.classifiers)
        .map(|l| Layer {
            w: l.weight.data.clone(),
            b: l.bias.data.clone(),
            fan_in: l.weight.shape[0],
            fan_out: l.weight.shape[1],
        })
        .collect();
    assert_eq!(layers.len(), init.encoder.len() + 1);

    let domains = data.by_domain();
    let mut rng = substream(cfg.seed, "batches");
    let mut mismatched_steps = Vec::new();
    for step in 0..cfg.iterations {
        let picks = sample_step_batches(&domains, cfg.batch_n, &mut rng).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (d, idx) in domains.iter().zip(&picks) {
            for &i in idx {
                x.extend_from_slice(&d[i].x);
                y.push(d[i].y);
            }
        }
        let loss = pooled_step(&mut layers, &x, &y, cfg.lr);
        let rec = &out.log.records[step];
        if rec.l_y.to_bits() != loss.to_bits() || rec.total.to_bits() != loss.to_bits() {
            mismatched_steps.push(step);
        }
    }

    let trained: Vec<&[f64]> = out
        .model
        .encoder
        .iter()
        .chain(&out.model.classifiers)
        .flat_map(|l| [&l.weight.data[..], &l.bias.data[..]])
        .collect();
    let oracle: Vec<&[f64]> = layers.iter().flat_map(|l| [&l.w[..], &l.b[..]]).collect();
    ErmComparison {
        steps: out.log.records.len(),
        mismatched_steps,
        params_identical: trained == oracle,
    }
}
