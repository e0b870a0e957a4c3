use anyhow::{bail, Context, Result};
use ddn_core::rng::substream;
use ddn_core::synth::{default_gains, make_spec, DomainSpec, SpecParams, TargetMixture};
use ddn_core::trainer::{Optimizer, TrainConfig, LAMBDA_SEARCH_SPACE};
use rand::RngCore;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub sources: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub shift_scale: f64,
    pub noise_sigma: f64,
    /// Per-domain gains on each domain's coordinate block; empty disables.
    pub gains: Vec<f64>,
    /// Use the cycling 0, 2, 1 gain pattern. Ignored when `gains` is set.
    pub default_gains: bool,
    /// Per-domain noise scales; empty uses `noise_sigma` everywhere.
    pub domain_noise: Vec<f64>,
    pub n_per_class: usize,
    pub target_n_per_class: usize,
    /// Target mixture over source domains; empty means uniform.
    pub mixture: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            sources: 3,
            classes: 5,
            dim: 32,
            separation: 4.0,
            shift_scale: 2.0,
            noise_sigma: 0.0,
            gains: Vec::new(),
            default_gains: false,
            domain_noise: Vec::new(),
            n_per_class: 20,
            target_n_per_class: 40,
            mixture: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_n: usize,
    pub use_dpcl: bool,
    pub shared_classifier: bool,
    pub tau: f64,
    pub paper_exact_dpcl: bool,
    pub stop_grad_prototype: bool,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lambda: d.lambda,
            lr: d.lr,
            iterations: d.iterations,
            batch_n: d.batch_n,
            use_dpcl: d.use_dpcl,
            shared_classifier: d.shared_classifier,
            tau: d.tau,
            paper_exact_dpcl: d.paper_exact_dpcl,
            stop_grad_prototype: d.stop_grad_prototype,
            optimizer: d.optimizer,
            hidden: d.hidden,
            emb_dim: d.emb_dim,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr: self.lr,
            iterations: self.iterations,
            batch_n: self.batch_n,
            seed,
            use_dpcl: self.use_dpcl,
            shared_classifier: self.shared_classifier,
            tau: self.tau,
            paper_exact_dpcl: self.paper_exact_dpcl,
            stop_grad_prototype: self.stop_grad_prototype,
            optimizer: self.optimizer,
            hidden: self.hidden.clone(),
            emb_dim: self.emb_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub tau_w: f64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { tau_w: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub profile_n: usize,
    pub n_projections: usize,
    /// Also run the held-out-domain protocol over the source family.
    pub leave_one_out: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            profile_n: 128,
            n_projections: 64,
            leave_one_out: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Offsets added to the root seed, one run per entry.
    pub seeds: Vec<u64>,
    /// Batch sizes for the sweep; empty skips it.
    pub batch_sizes: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            batch_sizes: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub trials: usize,
    pub space: Vec<f64>,
    pub val_fraction: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            trials: 20,
            space: LAMBDA_SEARCH_SPACE.to_vec(),
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<String>,
    pub data: DataSection,
    pub train: TrainSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub search: SearchSection,
}

/// A 64-bit seed for the named purpose, drawn from the root seed's stream.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    substream(root, name).next_u64()
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).context("empty override key")?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Reads an optional file, applies `KEY=VALUE` overrides, and validates.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_per_class == 0 || d.target_n_per_class == 0 {
            bail!("n_per_class and target_n_per_class must be >= 1");
        }
        self.train.to_config(self.seed).validate()?;
        self.spec()?;
        self.mixture()?;
        if !(self.inference.tau_w > 0.0) {
            bail!("inference.tau_w must be > 0");
        }
        if self.eval.n_projections == 0 {
            bail!("eval.n_projections must be >= 1");
        }
        if self.ablate.seeds.is_empty() {
            bail!("ablate needs at least one seed");
        }
        if self.ablate.batch_sizes.contains(&0) {
            bail!("ablate batch sizes must be >= 1");
        }
        if self.search.trials == 0 || self.search.space.is_empty() {
            bail!("search needs trials and a nonempty space");
        }
        if !(0.0..1.0).contains(&self.search.val_fraction) || self.search.val_fraction == 0.0 {
            bail!("search.val_fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// Domain spec for the run whose root seed is `root`.
    pub fn spec_for(&self, root: u64) -> Result<DomainSpec> {
        let d = &self.data;
        let mut spec = make_spec(&SpecParams {
            sources: d.sources,
            classes: d.classes,
            dim: d.dim,
            separation: d.separation,
            shift_scale: d.shift_scale,
            noise_sigma: d.noise_sigma,
            seed: derive_seed(root, "spec"),
        })?;
        if !d.gains.is_empty() {
            spec = spec.with_gains(d.gains.clone())?;
        } else if d.default_gains {
            spec = spec.with_gains(default_gains(d.sources))?;
        }
        if !d.domain_noise.is_empty() {
            spec = spec.with_domain_noise(d.domain_noise.clone())?;
        }
        Ok(spec)
    }

    pub fn spec(&self) -> Result<DomainSpec> {
        self.spec_for(self.seed)
    }

    pub fn mixture(&self) -> Result<TargetMixture> {
        if self.data.mixture.is_empty() {
            return Ok(TargetMixture::uniform(self.data.sources)?);
        }
        if self.data.mixture.len() != self.data.sources {
            bail!(
                "mixture has {} weights for {} sources",
                self.data.mixture.len(),
                self.data.sources
            );
        }
        Ok(TargetMixture::new(self.data.mixture.clone())?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
