//! Synthetic multi-domain classification data.
//!
//! Every sample is `x = C_y + D_d + noise`: a class prototype shared by all
//! domains, a per-domain shift, and isotropic Gaussian noise. Target-domain
//! samples replace the shift by a convex combination of the source shifts,
//! so the mixture that generated them is known exactly.
//!
//! With per-domain gains enabled, the coordinates are split into one
//! contiguous block per domain and domain `s` scales block `s` of the class
//! prototype by its gain before the shift is added. A feature block can then
//! carry class information in some domains and none in others.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, DdnError, Result};
use crate::rng::{seeded, substream, Rng};

const MAX_RESAMPLES: usize = 10_000;

/// Domain tag of an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainLabel {
    Source(usize),
    Target,
}

impl DomainLabel {
    pub fn source_index(self) -> Option<usize> {
        match self {
            DomainLabel::Source(s) => Some(s),
            DomainLabel::Target => None,
        }
    }
}

impl std::fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainLabel::Source(s) => write!(f, "{s}"),
            DomainLabel::Target => f.write_str("target"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: DomainLabel,
}

/// Parameters for [`make_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecParams {
    pub sources: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub shift_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Ground truth of a synthetic domain family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub sources: usize,
    pub classes: usize,
    pub dim: usize,
    pub class_prototypes: Vec<Vec<f64>>,
    pub domain_shifts: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    /// Overrides `noise_sigma` per source domain.
    pub domain_noise: Option<Vec<f64>>,
    /// Per-domain gain on that domain's coordinate block of the prototypes.
    pub gains: Option<Vec<f64>>,
    pub min_separation: f64,
    pub seed: u64,
}

/// Ground-truth convex weights of a target domain over the source shifts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMixture {
    w_star: Vec<f64>,
}

impl TargetMixture {
    pub fn new(w_star: Vec<f64>) -> Result<Self> {
        if w_star.is_empty() {
            return Err(invalid("mixture must have at least one weight"));
        }
        if w_star.iter().any(|&w| !w.is_finite() || w < -1e-9) {
            return Err(invalid(format!("mixture has a negative weight: {w_star:?}")));
        }
        let total: f64 = w_star.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture sums to {total}, not 1")));
        }
        Ok(Self { w_star })
    }

    pub fn one_hot(sources: usize, s: usize) -> Result<Self> {
        if s >= sources {
            return Err(invalid(format!("one-hot index {s} >= {sources}")));
        }
        let mut w = vec![0.0; sources];
        w[s] = 1.0;
        Self::new(w)
    }

    pub fn uniform(sources: usize) -> Result<Self> {
        Self::new(vec![1.0 / sources as f64; sources])
    }

    pub fn weights(&self) -> &[f64] {
        &self.w_star
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform random direction scaled to `radius`.
fn sphere_point(rng: &mut Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| radius * x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws a domain family. Prototypes lie on a sphere of radius `separation`
/// and are rejection-resampled until every pair is at least `separation`
/// apart; shifts are random directions of norm `shift_scale`.
pub fn make_spec(p: &SpecParams) -> Result<DomainSpec> {
    if p.sources < 1 || p.classes < 2 || p.dim < 2 {
        return Err(invalid("need sources >= 1, classes >= 2, dim >= 2"));
    }
    if !(p.separation > 0.0) || !(p.shift_scale >= 0.0) || !(p.noise_sigma >= 0.0) {
        return Err(invalid(
            "separation must be > 0, shift_scale and noise_sigma >= 0",
        ));
    }
    let mut rng = substream(p.seed, "prototypes");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(p.classes);
    while protos.len() < p.classes {
        let mut accepted = false;
        for _ in 0..MAX_RESAMPLES {
            let cand = sphere_point(&mut rng, p.dim, p.separation);
            if protos.iter().all(|q| distance(q, &cand) >= p.separation) {
                protos.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(DdnError::Construction(format!(
                "could not place {} prototypes {} apart in {} dims",
                p.classes, p.separation, p.dim
            )));
        }
    }
    let mut min_separation = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            min_separation = min_separation.min(distance(&protos[i], &protos[j]));
        }
    }

    let mut rng = substream(p.seed, "shifts");
    let shifts = if p.shift_scale == 0.0 {
        vec![vec![0.0; p.dim]; p.sources]
    } else {
        let mut shifts: Vec<Vec<f64>> = Vec::with_capacity(p.sources);
        while shifts.len() < p.sources {
            let cand = sphere_point(&mut rng, p.dim, p.shift_scale);
            if shifts.iter().all(|q| q != &cand) {
                shifts.push(cand);
            }
        }
        shifts
    };

    Ok(DomainSpec {
        sources: p.sources,
        classes: p.classes,
        dim: p.dim,
        class_prototypes: protos,
        domain_shifts: shifts,
        noise_sigma: p.noise_sigma,
        domain_noise: None,
        gains: None,
        min_separation,
        seed: p.seed,
    })
}

/// Gain pattern cycling through 0, 2, 1.
pub fn default_gains(sources: usize) -> Vec<f64> {
    (0..sources).map(|s| [0.0, 2.0, 1.0][s % 3]).collect()
}

impl DomainSpec {
    pub fn with_gains(mut self, gains: Vec<f64>) -> Result<Self> {
        if gains.len() != self.sources {
            return Err(invalid(format!(
                "{} gains for {} domains",
                gains.len(),
                self.sources
            )));
        }
        if gains.iter().any(|g| ![0.0, 1.0, 2.0].contains(g)) {
            return Err(invalid(format!("gains must be in {{0, 1, 2}}: {gains:?}")));
        }
        if self.dim < self.sources {
            return Err(invalid("need at least one coordinate per domain block"));
        }
        self.gains = Some(gains);
        Ok(self)
    }

    pub fn with_domain_noise(mut self, sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() != self.sources || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid(format!(
                "need {} nonnegative per-domain sigmas",
                self.sources
            )));
        }
        self.domain_noise = Some(sigmas);
        Ok(self)
    }

    pub fn domain_sigma(&self, s: usize) -> f64 {
        self.domain_noise.as_ref().map_or(self.noise_sigma, |v| v[s])
    }

    /// Coordinate range of domain `s`'s gain block; the last block absorbs
    /// the remainder.
    pub fn block(&self, s: usize) -> std::ops::Range<usize> {
        let width = self.dim / self.sources;
        let start = s * width;
        let end = if s + 1 == self.sources {
            self.dim
        } else {
            start + width
        };
        start..end
    }

    /// Per-coordinate gain applied to the class prototype in domain `s`.
    pub fn gain_vector(&self, s: usize) -> Vec<f64> {
        let mut g = vec![1.0; self.dim];
        if let Some(gains) = &self.gains {
            for j in self.block(s) {
                g[j] = gains[s];
            }
        }
        g
    }

    /// The class component of domain `s`, i.e. the domain expert feature
    /// minus the shift.
    pub fn class_component(&self, y: usize, s: usize) -> Vec<f64> {
        let c = &self.class_prototypes[y];
        if self.gains.is_none() {
            return c.clone();
        }
        self.gain_vector(s)
            .iter()
            .zip(c)
            .map(|(g, v)| g * v)
            .collect()
    }

    /// Flat `key = value` document; the basis of [`DomainSpec::hash`].
    pub fn to_kv(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let _ = writeln!(out, "sources = {}", self.sources);
        let _ = writeln!(out, "classes = {}", self.classes);
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(out, "min_separation = {}", self.min_separation);
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(n) = &self.domain_noise {
            let _ = writeln!(out, "domain_noise = {}", join(n));
        }
        if let Some(g) = &self.gains {
            let _ = writeln!(out, "gains = {}", join(g));
        }
        for (m, c) in self.class_prototypes.iter().enumerate() {
            let _ = writeln!(out, "class_prototype.{m} = {}", join(c));
        }
        for (s, d) in self.domain_shifts.iter().enumerate() {
            let _ = writeln!(out, "domain_shift.{s} = {}", join(d));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let parse_f = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| DdnError::Parse(format!("{v:?}: {e}")))
        };
        let parse_list = |v: &str| v.split(',').map(parse_f).collect::<Result<Vec<f64>>>();
        let parse_u = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|e| DdnError::Parse(format!("{v:?}: {e}")))
        };
        let (mut sources, mut classes, mut dim, mut seed) = (None, None, None, None);
        let (mut sigma, mut min_sep) = (None, None);
        let (mut domain_noise, mut gains) = (None, None);
        let mut protos = std::collections::BTreeMap::new();
        let mut shifts = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DdnError::Parse(format!("missing '=' in {line:?}")))?;
            let k = k.trim();
            match k {
                "sources" => sources = Some(parse_u(v)? as usize),
                "classes" => classes = Some(parse_u(v)? as usize),
                "dim" => dim = Some(parse_u(v)? as usize),
                "seed" => seed = Some(parse_u(v)?),
                "noise_sigma" => sigma = Some(parse_f(v)?),
                "min_separation" => min_sep = Some(parse_f(v)?),
                "domain_noise" => domain_noise = Some(parse_list(v)?),
                "gains" => gains = Some(parse_list(v)?),
                _ => {
                    if let Some(i) = k.strip_prefix("class_prototype.") {
                        protos.insert(parse_u(i)?, parse_list(v)?);
                    } else if let Some(i) = k.strip_prefix("domain_shift.") {
                        shifts.insert(parse_u(i)?, parse_list(v)?);
                    } else {
                        return Err(DdnError::Parse(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        let need = |name: &str| DdnError::Parse(format!("missing key {name:?}"));
        let spec = DomainSpec {
            sources: sources.ok_or_else(|| need("sources"))?,
            classes: classes.ok_or_else(|| need("classes"))?,
            dim: dim.ok_or_else(|| need("dim"))?,
            class_prototypes: protos.into_values().collect(),
            domain_shifts: shifts.into_values().collect(),
            noise_sigma: sigma.ok_or_else(|| need("noise_sigma"))?,
            domain_noise,
            gains,
            min_separation: min_sep.ok_or_else(|| need("min_separation"))?,
            seed: seed.ok_or_else(|| need("seed"))?,
        };
        if spec.class_prototypes.len() != spec.classes
            || spec.domain_shifts.len() != spec.sources
            || spec
                .class_prototypes
                .iter()
                .chain(&spec.domain_shifts)
                .any(|v| v.len() != spec.dim)
        {
            return Err(DdnError::Parse("inconsistent spec dimensions".into()));
        }
        Ok(spec)
    }

    /// First 16 hex digits of the SHA-256 of [`DomainSpec::to_kv`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn add_noise(rng: &mut Rng, x: &mut [f64], sigma: f64) {
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
}

fn sample_domain(
    spec: &DomainSpec,
    s: usize,
    n: usize,
    rng: &mut Rng,
    label: DomainLabel,
) -> Vec<Example> {
    let shift = &spec.domain_shifts[s];
    let sigma = spec.domain_sigma(s);
    let mut out = Vec::with_capacity(spec.classes * n);
    for y in 0..spec.classes {
        let cls = spec.class_component(y, s);
        for _ in 0..n {
            let mut x: Vec<f64> = cls.iter().zip(shift).map(|(c, d)| c + d).collect();
            add_noise(rng, &mut x, sigma);
            out.push(Example { x, y, d: label });
        }
    }
    out
}

/// `S * M * n` source examples, ordered by domain then class. Domain `s`
/// draws from its own stream seeded with `seed + s`.
pub fn sample_source(spec: &DomainSpec, n_per_class_per_domain: usize, seed: u64) -> Result<Vec<Example>> {
    if n_per_class_per_domain == 0 {
        return Err(invalid("n_per_class_per_domain must be >= 1"));
    }
    Ok((0..spec.sources)
        .flat_map(|s| {
            let mut rng = seeded(seed.wrapping_add(s as u64));
            sample_domain(spec, s, n_per_class_per_domain, &mut rng, DomainLabel::Source(s))
        })
        .collect())
}

/// `M * n` target examples whose shift (and, with gains, class scaling) is
/// the `mixture` combination of the source domains.
pub fn sample_target(
    spec: &DomainSpec,
    mixture: &TargetMixture,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    if mixture.weights().len() != spec.sources {
        return Err(invalid(format!(
            "mixture has {} weights for {} domains",
            mixture.weights().len(),
            spec.sources
        )));
    }
    if n_per_class == 0 {
        return Err(invalid("n_per_class must be >= 1"));
    }
    let w = mixture.weights();
    let mut shift = vec![0.0; spec.dim];
    let mut gain = vec![0.0; spec.dim];
    for s in 0..spec.sources {
        let g = spec.gain_vector(s);
        for j in 0..spec.dim {
            shift[j] += w[s] * spec.domain_shifts[s][j];
            gain[j] += w[s] * g[j];
        }
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(spec.classes * n_per_class);
    for y in 0..spec.classes {
        let c = &spec.class_prototypes[y];
        let cls: Vec<f64> = if spec.gains.is_some() {
            gain.iter().zip(c).map(|(g, v)| g * v).collect()
        } else {
            c.clone()
        };
        for _ in 0..n_per_class {
            let mut x: Vec<f64> = cls.iter().zip(&shift).map(|(c, d)| c + d).collect();
            add_noise(&mut rng, &mut x, spec.noise_sigma);
            out.push(Example {
                x,
                y,
                d: DomainLabel::Target,
            });
        }
    }
    Ok(out)
}

/// Labeled examples together with the family dimensions they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sources: usize,
    pub classes: usize,
    pub dim: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(sources: usize, classes: usize, dim: usize, examples: Vec<Example>) -> Result<Self> {
        for e in &examples {
            if e.x.len() != dim || e.y >= classes || e.x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "example out of range for dim {dim}, {classes} classes"
                )));
            }
            if let DomainLabel::Source(s) = e.d {
                if s >= sources {
                    return Err(invalid(format!("source domain {s} >= {sources}")));
                }
            }
        }
        Ok(Self {
            sources,
            classes,
            dim,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn by_domain(&self) -> Vec<Vec<&Example>> {
        by_domain(&self.examples, self.sources)
    }
}

/// Groups source examples by domain index; targets are ignored.
pub fn by_domain(examples: &[Example], sources: usize) -> Vec<Vec<&Example>> {
    let mut out = vec![Vec::new(); sources];
    for e in examples {
        if let DomainLabel::Source(s) = e.d {
            if s < sources {
                out[s].push(e);
            }
        }
    }
    out
}

/// One record per line: `x` as comma-separated decimals, then class and
/// domain, tab-separated. The header carries the spec hash.
pub fn write_dataset<W: Write>(mut w: W, examples: &[Example], spec_hash: &str) -> Result<()> {
    writeln!(w, "# ddn-dataset spec_hash={spec_hash}")?;
    for e in examples {
        let xs: Vec<String> = e.x.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{}\t{}", xs.join(","), e.y, e.d)?;
    }
    Ok(())
}

/// Reads a file written by [`write_dataset`]; returns the spec hash too.
pub fn read_dataset<R: BufRead>(r: R) -> Result<(String, Vec<Example>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| DdnError::Parse("empty dataset file".into()))??;
    let hash = header
        .strip_prefix("# ddn-dataset spec_hash=")
        .ok_or_else(|| DdnError::Parse(format!("bad header {header:?}")))?
        .to_string();
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let mut fields = line.split('\t');
        let (Some(xs), Some(y), Some(d), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(DdnError::Parse(format!("bad record {line:?}")));
        };
        let x = xs
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| DdnError::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let y = y.parse().map_err(|_| DdnError::Parse(format!("bad class {y:?}")))?;
        let d = match d {
            "target" => DomainLabel::Target,
            s => DomainLabel::Source(
                s.parse()
                    .map_err(|_| DdnError::Parse(format!("bad domain {s:?}")))?,
            ),
        };
        out.push(Example { x, y, d });
    }
    Ok((hash, out))
}
