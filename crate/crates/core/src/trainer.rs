//! Joint training of the encoder and the domain experts, prototype bank
//! freezing, and random search over the contrastive loss weight.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{invalid, DdnError, Result};
use crate::loss::{total_loss, DpclOptions, RoutedBatch};
use crate::model::{DdnModel, ModelConfig, PrototypeBank, Provenance};
use crate::rng::{substream, Rng};
use crate::scalar::Scalar;
use crate::synth::{Dataset, DomainLabel, Example};

/// Loss weights searched by [`random_search`] unless overridden.
pub const LAMBDA_SEARCH_SPACE: [f64; 5] = [1.0, 5.0, 10.0, 20.0, 30.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Examples drawn per source domain per step.
    pub batch_n: usize,
    pub seed: u64,
    pub use_dpcl: bool,
    pub shared_classifier: bool,
    pub tau: f64,
    pub paper_exact_dpcl: bool,
    pub stop_grad_prototype: bool,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 0.05,
            iterations: 2000,
            batch_n: 32,
            seed: 0,
            use_dpcl: true,
            shared_classifier: false,
            tau: 0.1,
            paper_exact_dpcl: false,
            stop_grad_prototype: false,
            optimizer: Optimizer::Sgd,
            hidden: vec![64, 64],
            emb_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr must be > 0"));
        }
        if self.batch_n == 0 {
            return Err(invalid("batch_n must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be > 0"));
        }
        if self.emb_dim == 0 || self.hidden.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn dpcl_options(&self) -> DpclOptions {
        DpclOptions {
            tau: self.tau,
            paper_exact: self.paper_exact_dpcl,
            stop_grad_prototype: self.stop_grad_prototype,
        }
    }

    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            input_dim: data.dim,
            hidden: self.hidden.clone(),
            emb_dim: self.emb_dim,
            classes: data.classes,
            domains: data.sources,
            shared_classifier: self.shared_classifier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_y: f64,
    pub l_p: f64,
    pub total: f64,
    /// Batch accuracy of each domain's own expert.
    pub acc: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// One JSON record per line after a metadata line. Wall time is left out
    /// so reruns produce identical files.
    pub fn write_jsonl<W: Write>(&self, mut w: W, config: &TrainConfig) -> Result<()> {
        let json = |e: serde_json::Error| DdnError::Parse(e.to_string());
        let meta = serde_json::json!({ "meta": config });
        writeln!(w, "{}", serde_json::to_string(&meta).map_err(json)?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).map_err(json)?)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: DdnModel<T>,
    pub bank: PrototypeBank<T>,
    pub log: TrainLog,
}

/// Indices of one batch per domain, `batch_n` each, drawn without
/// replacement.
pub fn sample_step_batches<E>(domains: &[Vec<E>], batch_n: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_n == 0 {
        return Err(invalid("batch_n must be >= 1"));
    }
    domains
        .iter()
        .enumerate()
        .map(|(s, d)| {
            if d.len() < batch_n {
                return Err(invalid(format!(
                    "domain {s} has {} examples, fewer than batch_n = {batch_n}",
                    d.len()
                )));
            }
            Ok(index::sample(rng, d.len(), batch_n).into_vec())
        })
        .collect()
}

fn to_scalar<T: Scalar>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::of(v)).collect()
}

enum OptimState<T> {
    Sgd,
    Adam {
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
        t: i32,
    },
}

impl<T: Scalar> OptimState<T> {
    fn new(kind: Optimizer, model: &DdnModel<T>) -> Self {
        match kind {
            Optimizer::Sgd => OptimState::Sgd,
            Optimizer::Adam => {
                let zeros: Vec<Vec<T>> = model
                    .params()
                    .iter()
                    .map(|(_, p)| vec![T::zero(); p.data.len()])
                    .collect();
                OptimState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, model: &mut DdnModel<T>, grads: &[Vec<T>], lr: T) {
        match self {
            OptimState::Sgd => {
                for (p, g) in model.params_mut().into_iter().zip(grads) {
                    for (w, &gi) in p.data.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
            }
            OptimState::Adam { m, v, t } => {
                let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
                *t += 1;
                let c1 = T::one() - b1.powi(*t);
                let c2 = T::one() - b2.powi(*t);
                for (k, p) in model.params_mut().into_iter().enumerate() {
                    for (i, w) in p.data.iter_mut().enumerate() {
                        let gi = grads[k][i];
                        m[k][i] = b1 * m[k][i] + (T::one() - b1) * gi;
                        v[k][i] = b2 * v[k][i] + (T::one() - b2) * gi * gi;
                        let mh = m[k][i] / c1;
                        let vh = v[k][i] / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Initial parameters for a run; identical to what [`train`] starts from.
pub fn init_model<T: Scalar>(config: &TrainConfig, data: &Dataset) -> Result<DdnModel<T>> {
    DdnModel::new(config.model_config(data), &mut substream(config.seed, "init"))
}

/// Gradient descent on the joint loss for `config.iterations` steps, then a
/// full pass to freeze the prototype bank. Deterministic in `config.seed`.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.sources == 0 {
        return Err(invalid("need at least one source domain"));
    }
    let start = Instant::now();
    let domains: Vec<Vec<(Vec<T>, usize)>> = data
        .by_domain()
        .into_iter()
        .map(|d| d.into_iter().map(|e| (to_scalar(&e.x), e.y)).collect())
        .collect();
    let mut model = init_model::<T>(config, data)?;
    let mut batch_rng = substream(config.seed, "batches");
    let mut optim = OptimState::new(config.optimizer, &model);
    let dpcl = config.dpcl_options();
    let lr = T::of(config.lr);
    let n = config.batch_n;
    let mut log = TrainLog::default();

    for step in 0..config.iterations {
        let picks = sample_step_batches(&domains, n, &mut batch_rng)?;
        let mut rows = Vec::with_capacity(n * domains.len());
        let mut targets = Vec::with_capacity(domains.len());
        for (d, idx) in domains.iter().zip(&picks) {
            rows.extend(idx.iter().map(|&i| d[i].0.clone()));
            targets.push(idx.iter().map(|&i| d[i].1).collect::<Vec<_>>());
        }

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let emb = model.encode_vars(&mut tape, &vars, x)?;
        let batches = targets
            .into_iter()
            .enumerate()
            .map(|(s, t)| {
                Ok(RoutedBatch {
                    domain: DomainLabel::Source(s),
                    embeddings: tape.slice_rows(emb, s * n, (s + 1) * n)?,
                    targets: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let parts = total_loss(
            &mut tape,
            &model,
            &vars,
            &batches,
            config.lambda,
            config.use_dpcl.then_some(&dpcl),
        )?;
        let total = tape.item(parts.total);
        let l_y = tape.item(parts.classification);
        let l_p = parts.dpcl.map_or(T::zero(), |v| tape.item(v));
        if !(total.is_finite() && l_y.is_finite() && l_p.is_finite()) {
            return Err(DdnError::NonFiniteLoss { step });
        }

        let m = data.classes;
        let logits = tape.value(parts.logits);
        let acc = batches
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let hits = b
                    .targets
                    .iter()
                    .enumerate()
                    .filter(|(i, &y)| {
                        let row = &logits[(s * n + i) * m..(s * n + i + 1) * m];
                        crate::inference::argmax(row) == y
                    })
                    .count();
                hits as f64 / n as f64
            })
            .collect();
        log.records.push(StepRecord {
            step,
            l_y: l_y.as_f64(),
            l_p: l_p.as_f64(),
            total: total.as_f64(),
            acc,
        });

        tape.backward(parts.total)?;
        let grads: Vec<Vec<T>> = vars.all.iter().map(|&v| tape.grad(v).to_vec()).collect();
        optim.step(&mut model, &grads, lr);
    }

    let bank = freeze_prototype_bank(&model, data)?;
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, bank, log })
}

/// Prototype of each source domain from a full pass over its examples.
pub fn freeze_prototype_bank<T: Scalar>(model: &DdnModel<T>, data: &Dataset) -> Result<PrototypeBank<T>> {
    if data.sources != model.domains() {
        return Err(invalid(format!(
            "dataset has {} domains, model {}",
            data.sources,
            model.domains()
        )));
    }
    let q = data
        .by_domain()
        .into_iter()
        .enumerate()
        .map(|(s, examples)| {
            if examples.is_empty() {
                return Err(invalid(format!("domain {s} has no examples")));
            }
            let xs: Vec<Vec<T>> = examples.iter().map(|e| to_scalar(&e.x)).collect();
            let embs = model.encode_batch(&xs)?;
            model.compute_prototype(s, &embs)
        })
        .collect::<Result<Vec<_>>>()?;
    PrototypeBank::new(q, Provenance::FrozenFullPass)
}

/// Per domain and class, moves `fraction` of the examples (at least one
/// when the cell has two or more) into a validation set.
pub fn source_validation_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("validation fraction must be in [0, 1)"));
    }
    let mut rng = substream(seed, "validation");
    let mut cells: BTreeMap<(usize, usize), Vec<&Example>> = BTreeMap::new();
    for e in &data.examples {
        if let DomainLabel::Source(s) = e.d {
            cells.entry((s, e.y)).or_default().push(e);
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut cell) in cells {
        cell.shuffle(&mut rng);
        let mut k = (fraction * cell.len() as f64).round() as usize;
        if fraction > 0.0 && k == 0 && cell.len() >= 2 {
            k = 1;
        }
        val.extend(cell[..k].iter().map(|&e| e.clone()));
        train.extend(cell[k..].iter().map(|&e| e.clone()));
    }
    Ok((
        Dataset::new(data.sources, data.classes, data.dim, train)?,
        Dataset::new(data.sources, data.classes, data.dim, val)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda: f64,
    pub score: f64,
    /// The same configuration was already evaluated by an earlier trial.
    pub reused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Samples `trials` loss weights uniformly from `space` and keeps the
/// highest-scoring configuration. Ties go to the lower weight, then the
/// earlier trial. Training is deterministic, so a weight drawn twice is
/// scored once.
pub fn random_search<F>(
    base: &TrainConfig,
    trials: usize,
    space: &[f64],
    seed: u64,
    mut evaluate: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&TrainConfig) -> Result<f64>,
{
    if trials == 0 || space.is_empty() {
        return Err(invalid("need at least one trial and one candidate"));
    }
    if space.iter().any(|l| !(*l >= 0.0)) {
        return Err(invalid("loss weights must be >= 0"));
    }
    let mut rng = substream(seed, "search");
    let mut seen: Vec<(f64, f64)> = Vec::new();
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let lambda = space[rng.random_range(0..space.len())];
        let cached = seen.iter().find(|(l, _)| *l == lambda).map(|&(_, s)| s);
        let score = match cached {
            Some(s) => s,
            None => {
                let cfg = TrainConfig {
                    lambda,
                    ..base.clone()
                };
                let s = evaluate(&cfg)?;
                seen.push((lambda, s));
                s
            }
        };
        records.push(TrialRecord {
            trial,
            lambda,
            score,
            reused: cached.is_some(),
        });
    }
    let best = records
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.lambda.total_cmp(&b.lambda))
                .then(a.trial.cmp(&b.trial))
        })
        .expect("at least one trial");
    Ok(SearchOutcome {
        best: TrainConfig {
            lambda: best.lambda,
            ..base.clone()
        },
        best_score: best.score,
        trials: records,
    })
}
