//! Accuracy, hypersphere alignment and uniformity, domain-weight profiles
//! and a sliced Wasserstein-1 discrepancy.

use std::io::Write;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DdnError, Result};
use crate::inference::aggregation_weights;
use crate::model::{DdnModel, PrototypeBank};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::synth::{DomainLabel, Example};

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != labels.len() {
        return Err(invalid("accuracy needs equal, nonzero lengths"));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn normalized(embeddings: &[Vec<f64>], op: &'static str) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|e| {
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(DdnError::DegenerateNorm { op });
            }
            Ok(e.iter().map(|x| x / n).collect())
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance over unordered same-class pairs of normalized
/// embeddings.
pub fn alignment(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(invalid("embeddings and labels differ in length"));
    }
    let z = normalized(embeddings, "alignment")?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            if labels[i] == labels[j] {
                total += sq_dist(&z[i], &z[j]);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(invalid("alignment needs at least one same-class pair"));
    }
    Ok(total / pairs as f64)
}

/// `log mean exp(-2 |z_i - z_j|^2)` over unordered pairs, no self-pairs.
pub fn uniformity(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(invalid("uniformity needs at least two embeddings"));
    }
    let z = normalized(embeddings, "uniformity")?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            total += (-2.0 * sq_dist(&z[i], &z[j])).exp();
            pairs += 1;
        }
    }
    Ok((total / pairs as f64).ln())
}

/// Mean aggregation weights over `n` target examples drawn without
/// replacement.
pub fn domain_weight_profile<T: Scalar>(
    model: &DdnModel<T>,
    bank: &PrototypeBank<T>,
    target: &[Example],
    n: usize,
    tau_w: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 || target.len() < n {
        return Err(invalid(format!(
            "need {n} target examples, have {}",
            target.len()
        )));
    }
    let picks = index::sample(&mut substream(seed, "profile"), target.len(), n).into_vec();
    let mut profile = vec![0.0; model.domains()];
    for i in picks {
        let x: Vec<T> = target[i].x.iter().map(|&v| T::of(v)).collect();
        let w = aggregation_weights(model, bank, &x, tau_w)?;
        for (p, v) in profile.iter_mut().zip(w.as_slice()) {
            *p += v.as_f64();
        }
    }
    profile.iter_mut().for_each(|p| *p /= n as f64);
    Ok(profile)
}

fn one_d_w1(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Average over random unit directions of the exact one-dimensional W1
/// between the projected samples. The larger set is subsampled to the size
/// of the smaller one.
pub fn sliced_w1(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("sliced_w1 needs nonempty sample sets"));
    }
    if n_projections == 0 {
        return Err(invalid("n_projections must be >= 1"));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(invalid("samples must share a nonzero dimension"));
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let large: Vec<&Vec<f64>> = if large.len() > small.len() {
        let mut rng = substream(seed, "subsample");
        index::sample(&mut rng, large.len(), small.len())
            .into_iter()
            .map(|i| &large[i])
            .collect()
    } else {
        large.iter().collect()
    };

    let mut rng = substream(seed, "projections");
    let mut total = 0.0;
    for _ in 0..n_projections {
        let dir = loop {
            let d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break d.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let proj = |v: &Vec<f64>| v.iter().zip(&dir).map(|(x, d)| x * d).sum::<f64>();
        let mut pa: Vec<f64> = small.iter().map(proj).collect();
        let mut pb: Vec<f64> = large.iter().map(|v| proj(v)).collect();
        total += one_d_w1(&mut pa, &mut pb);
    }
    Ok(total / n_projections as f64)
}

fn domain_field(d: DomainLabel) -> String {
    match d {
        DomainLabel::Source(s) => s.to_string(),
        DomainLabel::Target => "target".into(),
    }
}

/// Tab-separated rows `class, domain, e0..` in dataset order.
pub fn export_embeddings<T: Scalar, W: Write>(model: &DdnModel<T>, examples: &[Example], mut w: W) -> Result<()> {
    let mut header = vec!["class".to_string(), "domain".to_string()];
    header.extend((0..model.emb_dim()).map(|i| format!("e{i}")));
    writeln!(w, "{}", header.join("\t"))?;
    if examples.is_empty() {
        return Ok(());
    }
    let xs: Vec<Vec<T>> = examples
        .iter()
        .map(|e| e.x.iter().map(|&v| T::of(v)).collect())
        .collect();
    for (e, emb) in examples.iter().zip(model.encode_batch(&xs)?) {
        let mut fields = vec![e.y.to_string(), domain_field(e.d)];
        fields.extend(emb.iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join("\t"))?;
    }
    Ok(())
}

/// Encoder outputs as `f64` rows.
pub fn embed_examples<T: Scalar>(model: &DdnModel<T>, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    let xs: Vec<Vec<T>> = examples
        .iter()
        .map(|e| e.x.iter().map(|&v| T::of(v)).collect())
        .collect();
    Ok(model
        .encode_batch(&xs)?
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.as_f64()).collect())
        .collect())
}

/// Pairwise sliced W1 between the embeddings of each pair of domains.
/// Symmetric with a zero diagonal.
pub fn discrepancy_matrix(per_domain: &[Vec<Vec<f64>>], n_projections: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let s = per_domain.len();
    let mut m = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in i + 1..s {
            let d = sliced_w1(&per_domain[i], &per_domain[j], n_projections, seed)?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Held-out accuracy per domain.
    pub per_domain: Vec<f64>,
    pub avg: f64,
    /// Weighted-prediction accuracy on the generated target domain.
    pub target_accuracy: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub weight_profile: Vec<f64>,
    pub discrepancy_matrix: Vec<Vec<f64>>,
}

impl EvalReport {
    /// Checks the report's own invariants; returns the list of violations.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.per_domain.iter().chain([&self.avg, &self.target_accuracy]).any(|a| !(0.0..=1.0).contains(a)) {
            out.push("accuracy outside [0, 1]".into());
        }
        let total: f64 = self.weight_profile.iter().sum();
        if self.weight_profile.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            out.push("weight profile off the simplex".into());
        }
        let m = &self.discrepancy_matrix;
        for i in 0..m.len() {
            if m[i].len() != m.len() {
                out.push("discrepancy matrix not square".into());
                break;
            }
            if m[i][i].abs() > 1e-12 {
                out.push(format!("discrepancy diagonal {i} nonzero"));
            }
            for j in 0..i {
                if (m[i][j] - m[j][i]).abs() > 1e-12 {
                    out.push(format!("discrepancy ({i}, {j}) asymmetric"));
                }
            }
        }
        out
    }
}
