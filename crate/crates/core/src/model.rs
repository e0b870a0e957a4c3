//! The network: a shared MLP encoder and one domain expert classifier per
//! source domain. Each expert pairs a single affine classifier with a
//! two-layer projection head whose output lives in the embedding space, so
//! prototypes can be compared with raw encoder outputs by cosine.

use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, DdnError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the hidden encoder layers.
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub classes: usize,
    pub domains: usize,
    /// All domains share one classifier; projectors stay per-domain.
    pub shared_classifier: bool,
}

impl ModelConfig {
    /// Encoder `input_dim -> 64 -> 64 -> 32`.
    pub fn new(input_dim: usize, classes: usize, domains: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            emb_dim: 32,
            classes,
            domains,
            shared_classifier: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.emb_dim == 0
            || self.classes < 2
            || self.domains == 0
            || self.hidden.contains(&0)
        {
            return Err(invalid(format!("invalid model config {self:?}")));
        }
        Ok(())
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    fn tensor(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("parameter shapes are valid")
    }
}

/// Affine layer `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-a..a)))
            .collect();
        Self {
            weight: Param {
                shape: vec![fan_in, fan_out],
                data,
            },
            bias: Param::zeros(vec![fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdnModel<T> {
    config: ModelConfig,
    pub encoder: Vec<Linear<T>>,
    /// One entry per domain, or a single shared entry.
    pub classifiers: Vec<Linear<T>>,
    pub projectors: Vec<Projector<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every parameter of a model, bound for one pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<LinearVars>,
    pub classifiers: Vec<LinearVars>,
    pub projectors: Vec<[LinearVars; 2]>,
    /// Same order as [`DdnModel::params`].
    pub all: Vec<Var>,
}

impl<T: Scalar> DdnModel<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.emb_dim);
        let encoder = widths
            .windows(2)
            .map(|w| Linear::xavier(w[0], w[1], rng))
            .collect();
        let n_cls = if config.shared_classifier { 1 } else { config.domains };
        let classifiers = (0..n_cls)
            .map(|_| Linear::xavier(config.emb_dim, config.classes, rng))
            .collect();
        let projectors = (0..config.domains)
            .map(|_| Projector {
                hidden: Linear::xavier(config.emb_dim, config.emb_dim, rng),
                output: Linear::xavier(config.emb_dim, config.emb_dim, rng),
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            classifiers,
            projectors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn domains(&self) -> usize {
        self.config.domains
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn emb_dim(&self) -> usize {
        self.config.emb_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn shared_classifier(&self) -> bool {
        self.config.shared_classifier
    }

    fn classifier_slot(&self, s: usize) -> Result<usize> {
        if s >= self.config.domains {
            return Err(invalid(format!(
                "domain {s} out of range for {} heads",
                self.config.domains
            )));
        }
        Ok(if self.config.shared_classifier { 0 } else { s })
    }

    /// Every parameter with its layer path, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut linears: Vec<(String, &Linear<T>)> = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            linears.push((format!("encoder.{i}"), l));
        }
        for (s, l) in self.classifiers.iter().enumerate() {
            linears.push((self.classifier_path(s), l));
        }
        for (s, p) in self.projectors.iter().enumerate() {
            linears.push((format!("projector.{s}.0"), &p.hidden));
            linears.push((format!("projector.{s}.1"), &p.output));
        }
        linears
            .into_iter()
            .flat_map(|(path, l)| {
                [
                    (format!("{path}.weight"), &l.weight),
                    (format!("{path}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn classifier_path(&self, slot: usize) -> String {
        if self.config.shared_classifier {
            "classifier.shared".to_string()
        } else {
            format!("classifier.{slot}")
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        let linears = self
            .encoder
            .iter_mut()
            .chain(self.classifiers.iter_mut())
            .chain(
                self.projectors
                    .iter_mut()
                    .flat_map(|p| [&mut p.hidden, &mut p.output]),
            );
        for l in linears {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut all = Vec::new();
        let mut bind_linear = |tape: &mut Tape<T>, l: &Linear<T>| {
            let w = tape.leaf(l.weight.tensor().with_grad(trainable));
            let b = tape.leaf(l.bias.tensor().with_grad(trainable));
            all.push(w);
            all.push(b);
            LinearVars { weight: w, bias: b }
        };
        let encoder = self
            .encoder
            .iter()
            .map(|l| bind_linear(tape, l))
            .collect();
        let classifiers = self
            .classifiers
            .iter()
            .map(|l| bind_linear(tape, l))
            .collect();
        let projectors = self
            .projectors
            .iter()
            .map(|p| [bind_linear(tape, &p.hidden), bind_linear(tape, &p.output)])
            .collect();
        ModelVars {
            encoder,
            classifiers,
            projectors,
            all,
        }
    }

    fn linear(tape: &mut Tape<T>, l: LinearVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, l.weight)?;
        tape.add(h, l.bias)
    }

    /// Encoder forward on a `[B, input_dim]` batch.
    pub fn encode_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(DdnError::ShapeMismatch {
                op: "encode",
                detail: format!("expected [B, {}], got {shape:?}", self.config.input_dim),
            });
        }
        let mut h = x;
        let last = vars.encoder.len() - 1;
        for (i, &l) in vars.encoder.iter().enumerate() {
            h = Self::linear(tape, l, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Class logits of expert `s` on a batch of embeddings.
    pub fn classify_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, s: usize, emb: Var) -> Result<Var> {
        let slot = self.classifier_slot(s)?;
        Self::linear(tape, vars.classifiers[slot], emb)
    }

    /// Logits from the shared classifier; only valid in shared mode.
    pub fn classify_shared_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, emb: Var) -> Result<Var> {
        if !self.config.shared_classifier {
            return Err(invalid("model has per-domain classifiers"));
        }
        Self::linear(tape, vars.classifiers[0], emb)
    }

    /// Projection head `s`: affine, relu, affine.
    pub fn project_vars(&self, tape: &mut Tape<T>, vars: &ModelVars, s: usize, emb: Var) -> Result<Var> {
        if s >= self.config.domains {
            return Err(invalid(format!("projector {s} out of range")));
        }
        let [hidden, output] = vars.projectors[s];
        let h = Self::linear(tape, hidden, emb)?;
        let h = tape.relu(h)?;
        Self::linear(tape, output, h)
    }

    fn check_rows(rows: &[Vec<T>], width: usize, op: &'static str) -> Result<()> {
        if rows.is_empty() {
            return Err(invalid(format!("{op}: empty batch")));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(DdnError::ShapeMismatch {
                op,
                detail: format!("expected length {width}, got {}", bad.len()),
            });
        }
        Ok(())
    }

    fn rows_of(values: &[T], width: usize) -> Vec<Vec<T>> {
        values.chunks(width).map(<[T]>::to_vec).collect()
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.encode_batch(&[x.to_vec()])?.remove(0))
    }

    pub fn encode_batch(&self, xs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        Self::check_rows(xs, self.config.input_dim, "encode")?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(xs)?);
        let e = self.encode_vars(&mut tape, &vars, x)?;
        Ok(Self::rows_of(tape.value(e), self.config.emb_dim))
    }

    pub fn classify(&self, s: usize, emb: &[T]) -> Result<Vec<T>> {
        Ok(self.classify_batch(s, &[emb.to_vec()])?.remove(0))
    }

    pub fn classify_batch(&self, s: usize, embs: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        Self::check_rows(embs, self.config.emb_dim, "classify")?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.constant(Tensor::from_rows(embs)?);
        let logits = self.classify_vars(&mut tape, &vars, s, e)?;
        Ok(Self::rows_of(tape.value(logits), self.config.classes))
    }

    pub fn project(&self, s: usize, emb: &[T]) -> Result<Vec<T>> {
        Self::check_rows(&[emb.to_vec()], self.config.emb_dim, "project")?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.constant(Tensor::from_rows(&[emb.to_vec()])?);
        let p = self.project_vars(&mut tape, &vars, s, e)?;
        Ok(tape.value(p).to_vec())
    }

    /// Mean of projector-`s` outputs over a batch of embeddings.
    pub fn compute_prototype(&self, s: usize, embeddings: &[Vec<T>]) -> Result<Vec<T>> {
        Self::check_rows(embeddings, self.config.emb_dim, "compute_prototype")?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = tape.constant(Tensor::from_rows(embeddings)?);
        let p = self.project_vars(&mut tape, &vars, s, e)?;
        let q = tape.mean(p, Some(0))?;
        Ok(tape.value(q).to_vec())
    }
}

/// How a prototype bank was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BatchDynamic,
    FrozenFullPass,
}

/// One prototype per source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub q: Vec<Vec<T>>,
    pub provenance: Provenance,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(q: Vec<Vec<T>>, provenance: Provenance) -> Result<Self> {
        if q.is_empty() {
            return Err(invalid("prototype bank needs at least one prototype"));
        }
        let d = q[0].len();
        if q.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(invalid("prototypes must be finite and equally sized"));
        }
        Ok(Self { q, provenance })
    }

    pub fn domains(&self) -> usize {
        self.q.len()
    }
}

fn join<T: Scalar>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_values<T: Scalar>(line: &str) -> Result<Vec<T>> {
    line.split(',')
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| DdnError::Parse(format!("bad number {v:?}")))
        })
        .collect()
}

const CHECKPOINT_MAGIC: &str = "# ddn-checkpoint v1";
const BANK_MAGIC: &str = "# ddn-bank v1";

/// Text dump of every parameter keyed by layer path. Values are written in
/// shortest round-trip decimal form, so reading back is bit-exact.
pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    model: &DdnModel<T>,
    spec_hash: &str,
    train_config_json: &str,
) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "spec_hash = {spec_hash}")?;
    writeln!(w, "train_config = {train_config_json}")?;
    let mc = serde_json::to_string(&model.config).map_err(|e| DdnError::Parse(e.to_string()))?;
    writeln!(w, "model_config = {mc}")?;
    for (path, p) in model.params() {
        let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
        writeln!(w, "param {path} {}", shape.join("x"))?;
        writeln!(w, "{}", join(&p.data))?;
    }
    Ok(())
}

/// Header fields of a checkpoint besides the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub spec_hash: String,
    pub train_config_json: String,
}

pub fn read_checkpoint<T: Scalar, R: BufRead>(r: R) -> Result<(DdnModel<T>, CheckpointMeta)> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter();
    let bad = |what: &str| DdnError::Parse(format!("checkpoint: {what}"));
    if it.next().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing header"));
    }
    let mut field = |key: &str| -> Result<String> {
        it.next()
            .and_then(|l| l.strip_prefix(&format!("{key} = ")))
            .map(str::to_string)
            .ok_or_else(|| bad(key))
    };
    let spec_hash = field("spec_hash")?;
    let train_config_json = field("train_config")?;
    let mc: ModelConfig = serde_json::from_str(&field("model_config")?)
        .map_err(|e| DdnError::Parse(e.to_string()))?;
    let rest: Vec<&String> = it.collect();
    let mut model = DdnModel::<T>::new(mc, &mut crate::rng::seeded(0))?;
    let paths: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|(p, v)| (p, v.shape.clone()))
        .collect();
    if rest.len() != 2 * paths.len() {
        return Err(bad("parameter count mismatch"));
    }
    for ((param, (path, shape)), pair) in model
        .params_mut()
        .into_iter()
        .zip(paths)
        .zip(rest.chunks(2))
    {
        let shape_str: Vec<String> = shape.iter().map(usize::to_string).collect();
        let expect = format!("param {path} {}", shape_str.join("x"));
        if *pair[0] != expect {
            return Err(bad(&format!("expected {expect:?}, got {:?}", pair[0])));
        }
        let values = parse_values::<T>(pair[1])?;
        if values.len() != param.data.len() {
            return Err(bad(&format!("{path}: wrong value count")));
        }
        param.data = values;
    }
    Ok((
        model,
        CheckpointMeta {
            spec_hash,
            train_config_json,
        },
    ))
}

pub fn write_bank<T: Scalar, W: Write>(mut w: W, bank: &PrototypeBank<T>) -> Result<()> {
    writeln!(w, "{BANK_MAGIC}")?;
    let prov = match bank.provenance {
        Provenance::BatchDynamic => "batch-dynamic",
        Provenance::FrozenFullPass => "frozen-full-pass",
    };
    writeln!(w, "provenance = {prov}")?;
    for q in &bank.q {
        writeln!(w, "{}", join(q))?;
    }
    Ok(())
}

pub fn read_bank<T: Scalar, R: BufRead>(r: R) -> Result<PrototypeBank<T>> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    if lines.first().map(String::as_str) != Some(BANK_MAGIC) {
        return Err(DdnError::Parse("bank: missing header".into()));
    }
    let provenance = match lines.get(1).map(String::as_str) {
        Some("provenance = batch-dynamic") => Provenance::BatchDynamic,
        Some("provenance = frozen-full-pass") => Provenance::FrozenFullPass,
        other => return Err(DdnError::Parse(format!("bank: bad provenance {other:?}"))),
    };
    let q = lines[2..]
        .iter()
        .map(|l| parse_values(l))
        .collect::<Result<Vec<_>>>()?;
    PrototypeBank::new(q, provenance)
}
