//! Training objectives: the per-domain classification loss, the domain
//! prototype contrastive loss, and their weighted sum.
//!
//! The contrastive term for an anchor domain `s+` builds the prototype
//! `q = mean_n P_{s+}(E(x_n^{s+}))` from the anchor batch, scores every
//! domain's batch by its mean cosine to `q` (divided by a temperature), and
//! takes the cross-entropy of those scores against `s+`. The denominator
//! ranges over all domains including `s+`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, DdnError, Result};
use crate::model::{DdnModel, ModelVars};
use crate::scalar::Scalar;
use crate::synth::DomainLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpclOptions {
    /// Temperature dividing the mean cosine.
    pub tau: f64,
    /// Sum cosines over the batch at temperature 1 instead of averaging.
    pub paper_exact: bool,
    /// Treat the prototype as a constant.
    pub stop_grad_prototype: bool,
}

impl Default for DpclOptions {
    fn default() -> Self {
        Self {
            tau: 0.1,
            paper_exact: false,
            stop_grad_prototype: false,
        }
    }
}

/// One domain's batch on the tape: embeddings `[N, emb_dim]` plus labels.
#[derive(Clone, Debug)]
pub struct RoutedBatch {
    pub domain: DomainLabel,
    pub embeddings: Var,
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub classification: Var,
    pub dpcl: Option<Var>,
    /// `[sum N, M]` logits, batch by batch, each row from its own expert.
    pub logits: Var,
}

/// Contrastive loss with `s_plus` as the anchor domain. `per_domain[s]`
/// holds domain `s`'s embeddings; all batches must have the same size.
pub fn dpcl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DdnModel<T>,
    vars: &ModelVars,
    per_domain: &[Var],
    s_plus: usize,
    opts: &DpclOptions,
) -> Result<Var> {
    if per_domain.len() != model.domains() {
        return Err(invalid(format!(
            "{} batches for {} domains",
            per_domain.len(),
            model.domains()
        )));
    }
    if s_plus >= per_domain.len() {
        return Err(invalid(format!("anchor domain {s_plus} out of range")));
    }
    if !(opts.tau > 0.0) {
        return Err(invalid("temperature must be > 0"));
    }
    let n = tape.shape(per_domain[0])[0];
    if per_domain.iter().any(|&v| tape.shape(v).len() != 2 || tape.shape(v)[0] != n) {
        return Err(DdnError::ShapeMismatch {
            op: "dpcl",
            detail: "per-domain batches must be [N, emb_dim] with equal N".into(),
        });
    }

    let projected = model.project_vars(tape, vars, s_plus, per_domain[s_plus])?;
    let mut q = tape.mean(projected, Some(0))?;
    if opts.stop_grad_prototype {
        q = tape.detach(q)?;
    }
    let factor = if opts.paper_exact {
        T::of_usize(n)
    } else {
        T::of(1.0 / opts.tau)
    };
    let mut scores = Vec::with_capacity(per_domain.len());
    for &emb in per_domain {
        let cos = tape.cosine(emb, q)?;
        let mean = tape.mean(cos, None)?;
        scores.push(tape.scale(mean, factor)?);
    }
    let logits = tape.concat(&scores)?;
    tape.softmax_nll(logits, vec![s_plus])
}

/// Mean contrastive loss with every domain taking a turn as the anchor.
pub fn dpcl_all_anchors<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DdnModel<T>,
    vars: &ModelVars,
    per_domain: &[Var],
    opts: &DpclOptions,
) -> Result<Var> {
    let terms = (0..per_domain.len())
        .map(|s| dpcl_loss(tape, model, vars, per_domain, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&terms)?;
    tape.mean(stacked, None)
}

/// Mean negative log-likelihood with each example scored by the expert of
/// its own domain. In shared-classifier mode all batches go through the one
/// head in a single pass.
pub fn classification_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DdnModel<T>,
    vars: &ModelVars,
    batches: &[RoutedBatch],
) -> Result<Var> {
    routed_nll(tape, model, vars, batches).map(|(loss, _)| loss)
}

fn routed_nll<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DdnModel<T>,
    vars: &ModelVars,
    batches: &[RoutedBatch],
) -> Result<(Var, Var)> {
    if batches.is_empty() {
        return Err(invalid("classification loss needs at least one batch"));
    }
    let mut targets = Vec::new();
    let mut domains = Vec::with_capacity(batches.len());
    for b in batches {
        let s = b
            .domain
            .source_index()
            .ok_or_else(|| invalid("target-domain examples cannot train a classifier"))?;
        if tape.shape(b.embeddings)[0] != b.targets.len() {
            return Err(DdnError::ShapeMismatch {
                op: "classification_loss",
                detail: "one target per embedding row".into(),
            });
        }
        targets.extend_from_slice(&b.targets);
        domains.push(s);
    }
    let logits = if model.shared_classifier() {
        let embs: Vec<Var> = batches.iter().map(|b| b.embeddings).collect();
        let all = if embs.len() == 1 {
            embs[0]
        } else {
            tape.concat(&embs)?
        };
        model.classify_shared_vars(tape, vars, all)?
    } else {
        let parts = batches
            .iter()
            .zip(&domains)
            .map(|(b, &s)| model.classify_vars(tape, vars, s, b.embeddings))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&parts)?
    };
    Ok((tape.softmax_nll(logits, targets)?, logits))
}

/// `L_Y + lambda * L_P`. Without contrastive options the total is the
/// classification loss itself. Batches must be ordered by source domain.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DdnModel<T>,
    vars: &ModelVars,
    batches: &[RoutedBatch],
    lambda: f64,
    dpcl: Option<&DpclOptions>,
) -> Result<LossParts> {
    if !(lambda >= 0.0) {
        return Err(invalid("lambda must be >= 0"));
    }
    let (classification, logits) = routed_nll(tape, model, vars, batches)?;
    let Some(opts) = dpcl else {
        return Ok(LossParts {
            total: classification,
            classification,
            dpcl: None,
            logits,
        });
    };
    for (s, b) in batches.iter().enumerate() {
        if b.domain != DomainLabel::Source(s) {
            return Err(invalid("batches must be ordered by source domain"));
        }
    }
    let per_domain: Vec<Var> = batches.iter().map(|b| b.embeddings).collect();
    let lp = dpcl_all_anchors(tape, model, vars, &per_domain, opts)?;
    let weighted = tape.scale(lp, T::of(lambda))?;
    let total = tape.add(classification, weighted)?;
    Ok(LossParts {
        total,
        classification,
        dpcl: Some(lp),
        logits,
    })
}
