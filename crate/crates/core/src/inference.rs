//! Prediction on unseen domains: prototype-similarity weights over the
//! source experts and the weighted mixture of their class probabilities.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_row;
use crate::error::{invalid, DdnError, Result};
use crate::model::{DdnModel, PrototypeBank};
use crate::scalar::Scalar;
use crate::synth::{Dataset, DomainLabel, DomainSpec, Example};
use crate::synth::sample_source;
use crate::trainer::{freeze_prototype_bank, train, TrainConfig};

const NORM_EPS: f64 = 1e-12;

/// Combined probabilities closer than this to the maximum count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Lowest index whose value is within `tol` of the maximum.
pub fn argmax_tol<T: Scalar>(v: &[T], tol: f64) -> usize {
    let top = v[argmax(v)].as_f64();
    v.iter().position(|x| x.as_f64() >= top - tol).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexWeights<T> {
    w: Vec<T>,
}

impl<T: Scalar> SimplexWeights<T> {
    /// Accepts nonnegative finite weights that sum to 1 within 1e-9.
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("simplex weights must be nonempty"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < T::zero()) {
            return Err(invalid("simplex weights must be finite and nonnegative"));
        }
        let total: T = w.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("simplex weights sum to {total}")));
        }
        Ok(Self { w })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub class: usize,
    pub class_probs: Vec<T>,
    pub weights: SimplexWeights<T>,
    /// Row `s` is the softmax of expert `s`.
    pub per_head_probs: Vec<Vec<T>>,
}

fn cosine<T: Scalar>(a: &[T], b: &[T], op: &'static str) -> Result<T> {
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na.as_f64() <= NORM_EPS || nb.as_f64() <= NORM_EPS {
        return Err(DdnError::DegenerateNorm { op });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() / (na * nb))
}

/// Softmax of `cosines / tau_w`.
pub fn weights_from_cosines<T: Scalar>(cosines: &[T], tau_w: f64) -> Result<SimplexWeights<T>> {
    if !(tau_w > 0.0) {
        return Err(invalid("tau_w must be > 0"));
    }
    if cosines.is_empty() {
        return Err(invalid("need at least one similarity"));
    }
    let t = T::of(tau_w);
    let logits: Vec<T> = cosines.iter().map(|&c| c / t).collect();
    SimplexWeights::new(softmax_row(&logits))
}

fn check_bank<T: Scalar>(model: &DdnModel<T>, bank: &PrototypeBank<T>) -> Result<()> {
    if bank.domains() != model.domains() {
        return Err(invalid(format!(
            "bank has {} prototypes, model {} domains",
            bank.domains(),
            model.domains()
        )));
    }
    Ok(())
}

fn weights_for_embedding<T: Scalar>(bank: &PrototypeBank<T>, emb: &[T], tau_w: f64) -> Result<SimplexWeights<T>> {
    let cos = bank
        .q
        .iter()
        .map(|q| cosine(emb, q, "aggregation_weights"))
        .collect::<Result<Vec<_>>>()?;
    weights_from_cosines(&cos, tau_w)
}

pub fn aggregation_weights<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    x: &[T],
    tau_w: f64,
) -> Result<SimplexWeights<T>> {
    check_bank(model, bank)?;
    let emb = model.encode(x)?;
    weights_for_embedding(bank, &emb, tau_w)
}

/// Weighted mixture of per-expert probability rows.
pub fn combine<T: Scalar>(weights: SimplexWeights<T>, per_head_probs: Vec<Vec<T>>) -> Result<Prediction<T>> {
    if per_head_probs.len() != weights.len() {
        return Err(invalid(format!(
            "{} weights for {} heads",
            weights.len(),
            per_head_probs.len()
        )));
    }
    let m = per_head_probs[0].len();
    if m == 0 || per_head_probs.iter().any(|r| r.len() != m) {
        return Err(invalid("head probability rows must share a nonzero width"));
    }
    let mut class_probs = vec![T::zero(); m];
    for (&w, row) in weights.as_slice().iter().zip(&per_head_probs) {
        for (c, &p) in class_probs.iter_mut().zip(row) {
            *c += w * p;
        }
    }
    Ok(Prediction {
        class: argmax_tol(&class_probs, TIE_TOLERANCE),
        class_probs,
        weights,
        per_head_probs,
    })
}

fn predict_embedding<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    emb: &[T],
    tau_w: f64,
) -> Result<Prediction<T>> {
    let weights = weights_for_embedding(bank, emb, tau_w)?;
    let heads = (0..model.domains())
        .map(|s| Ok(softmax_row(&model.classify(s, emb)?)))
        .collect::<Result<Vec<_>>>()?;
    combine(weights, heads)
}

pub fn predict<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    x: &[T],
    tau_w: f64,
) -> Result<Prediction<T>> {
    check_bank(model, bank)?;
    predict_embedding(model, bank, &model.encode(x)?, tau_w)
}

/// Parallel over inputs; output order follows `xs`.
pub fn predict_batch<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    xs: &[Vec<T>],
    tau_w: f64,
) -> Result<Vec<Prediction<T>>> {
    check_bank(model, bank)?;
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let embs = model.encode_batch(xs)?;
    embs.par_iter()
        .map(|e| predict_embedding(model, bank, e, tau_w))
        .collect()
}

pub fn predict_examples<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    examples: &[Example],
    tau_w: f64,
) -> Result<Vec<Prediction<T>>> {
    let xs: Vec<Vec<T>> = examples
        .iter()
        .map(|e| e.x.iter().map(|&v| T::of(v)).collect())
        .collect();
    predict_batch(model, bank, &xs, tau_w)
}

/// Fraction of `examples` whose weighted prediction is correct.
pub fn prediction_accuracy<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    examples: &[Example],
    tau_w: f64,
) -> Result<f64> {
    let preds = predict_examples(model, bank, examples, tau_w)?;
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.y).collect();
    crate::metrics::accuracy(&classes, &labels)
}

/// One row per example: true class, predicted class, weights, combined
/// probabilities.
pub fn write_predictions<T: Scalar, W: Write>(mut w: W, labels: &[usize], preds: &[Prediction<T>]) -> Result<()> {
    if labels.len() != preds.len() {
        return Err(invalid("labels and predictions differ in length"));
    }
    if let Some(p) = preds.first() {
        let mut header = vec!["y".to_string(), "pred".to_string()];
        header.extend((0..p.weights.len()).map(|s| format!("w{s}")));
        header.extend((0..p.class_probs.len()).map(|m| format!("p{m}")));
        writeln!(w, "{}", header.join("\t"))?;
    }
    for (y, p) in labels.iter().zip(preds) {
        let mut fields = vec![y.to_string(), p.class.to_string()];
        fields.extend(p.weights.as_slice().iter().map(|v| v.to_string()));
        fields.extend(p.class_probs.iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join("\t"))?;
    }
    Ok(())
}

/// Data for one held-out fold: every other domain as a source (renumbered
/// in order) and domain `k` relabelled as the target.
pub fn leave_one_out_split(examples: &[Example], domains: usize, k: usize, classes: usize, dim: usize) -> Result<(Dataset, Vec<Example>)> {
    if k >= domains {
        return Err(invalid(format!("held-out domain {k} out of range")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in examples {
        match e.d {
            DomainLabel::Source(s) if s == k => test.push(Example {
                d: DomainLabel::Target,
                ..e.clone()
            }),
            DomainLabel::Source(s) => train.push(Example {
                d: DomainLabel::Source(if s > k { s - 1 } else { s }),
                ..e.clone()
            }),
            DomainLabel::Target => return Err(invalid("family data must be source-labelled")),
        }
    }
    Ok((Dataset::new(domains - 1, classes, dim, train)?, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooTable {
    pub per_domain: Vec<f64>,
    pub mean: f64,
}

/// Trains one model per held-out domain of `family` and scores weighted
/// prediction on that domain. Folds run in parallel.
pub fn evaluate_leave_one_out(
    family: &DomainSpec,
    n_per_class: usize,
    data_seed: u64,
    config: &TrainConfig,
    tau_w: f64,
) -> Result<LooTable> {
    let k_domains = family.sources;
    if k_domains < 2 {
        return Err(invalid("leave-one-out needs at least two domains"));
    }
    let examples = sample_source(family, n_per_class, data_seed)?;
    let per_domain = (0..k_domains)
        .into_par_iter()
        .map(|k| {
            let (data, test) = leave_one_out_split(&examples, k_domains, k, family.classes, family.dim)?;
            let out = train::<f64>(config, &data)?;
            prediction_accuracy(&out.model, &out.bank, &test, tau_w)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_domain.iter().sum::<f64>() / k_domains as f64;
    Ok(LooTable { per_domain, mean })
}

/// Accuracy of the trained model on a held-back source split, recomputing
/// the prototype bank from the training part.
pub fn validation_accuracy<T: Scalar>(
    model: &DdnModel<T>,
    train_data: &Dataset,
    validation: &Dataset,
    tau_w: f64,
) -> Result<f64> {
    let bank = freeze_prototype_bank(model, train_data)?;
    prediction_accuracy(model, &bank, &validation.examples, tau_w)
}
