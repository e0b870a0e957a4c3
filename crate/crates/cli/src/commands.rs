use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ddn_core::inference::{
    evaluate_leave_one_out, predict_examples, prediction_accuracy, validation_accuracy, write_predictions,
};
use ddn_core::metrics::{
    alignment, discrepancy_matrix, domain_weight_profile, embed_examples, export_embeddings, uniformity,
    EvalReport,
};
use ddn_core::model::{write_bank, write_checkpoint};
use ddn_core::synth::{sample_source, sample_target, write_dataset, Dataset, DomainLabel, DomainSpec, Example};
use ddn_core::trainer::{random_search, source_validation_split, train, TrainConfig, TrainLog};
use serde::Serialize;

use crate::config::{derive_seed, ExperimentConfig};

/// Files produced by a command, held in memory until the run has finished
/// so that a failed run leaves nothing behind.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    pub failures: Vec<String>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn write_all(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        for (name, bytes) in &self.files {
            fs::write(out.join(name), bytes).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }
}

struct Generated {
    spec: DomainSpec,
    source: Dataset,
    target: Vec<Example>,
}

fn generate(cfg: &ExperimentConfig) -> Result<Generated> {
    let spec = cfg.spec()?;
    let mixture = cfg.mixture()?;
    let source = sample_source(&spec, cfg.data.n_per_class, derive_seed(cfg.seed, "data"))?;
    let target = sample_target(&spec, &mixture, cfg.data.target_n_per_class, derive_seed(cfg.seed, "target"))?;
    let source = Dataset::new(spec.sources, spec.classes, spec.dim, source)?;
    Ok(Generated { spec, source, target })
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    cfg.train.to_config(cfg.seed)
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn echo_config(art: &mut Artifacts, cfg: &ExperimentConfig) -> Result<()> {
    art.add("config.toml", cfg.to_toml()?.into_bytes());
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let g = generate(cfg)?;
    let mut art = Artifacts::default();
    echo_config(&mut art, cfg)?;
    let hash = g.spec.hash();
    art.add("spec.kv", g.spec.to_kv().into_bytes());
    for (s, domain) in g.source.by_domain().iter().enumerate() {
        let rows: Vec<Example> = domain.iter().map(|&e| e.clone()).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &rows, &hash)?;
        art.check(
            rows.len() == cfg.data.n_per_class * cfg.data.classes,
            format!("source {s} is unbalanced"),
        );
        art.add(format!("source_{s}.txt"), buf);
    }
    let mut buf = Vec::new();
    write_dataset(&mut buf, &g.target, &hash)?;
    art.check(
        g.target.iter().all(|e| e.d == DomainLabel::Target),
        "target rows carry a source label",
    );
    art.add("target.txt", buf);
    Ok(art)
}

fn log_checks(art: &mut Artifacts, log: &TrainLog, lambda: f64) {
    let finite = log
        .records
        .iter()
        .all(|r| r.total.is_finite() && r.l_y.is_finite() && r.l_p.is_finite());
    art.check(finite, "non-finite loss in the training log");
    let parts = log
        .records
        .iter()
        .all(|r| (r.total - (r.l_y + lambda * r.l_p)).abs() <= 1e-12);
    art.check(parts, "logged total differs from l_y + lambda * l_p");
    let monotone = log.records.windows(2).all(|w| w[1].step == w[0].step + 1);
    art.check(monotone, "log steps are not consecutive");
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let g = generate(cfg)?;
    let tc = train_config(cfg);
    let out = train::<f64>(&tc, &g.source)?;
    let mut art = Artifacts::default();
    echo_config(&mut art, cfg)?;
    let hash = g.spec.hash();
    let tc_json = serde_json::to_string(&tc)?;

    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &out.model, &hash, &tc_json)?;
    art.add("checkpoint.txt", buf);
    let mut buf = Vec::new();
    write_bank(&mut buf, &out.bank)?;
    art.add("bank.txt", buf);
    let mut buf = Vec::new();
    out.log.write_jsonl(&mut buf, &tc)?;
    art.add("train_log.jsonl", buf);
    let final_line = match out.log.last() {
        Some(r) => format!(
            "step {} total {} l_y {} l_p {}\n",
            r.step, r.total, r.l_y, r.l_p
        ),
        None => "no steps\n".to_string(),
    };
    art.add("final_loss.txt", final_line.into_bytes());

    log_checks(&mut art, &out.log, tc.lambda);
    art.check(
        out.bank.q.iter().flatten().all(|v| v.is_finite()),
        "prototype bank has non-finite entries",
    );
    Ok(art)
}

pub fn eval_cmd(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let g = generate(cfg)?;
    if g.target.len() < cfg.eval.profile_n {
        bail!(
            "eval.profile_n = {} exceeds the {} target examples",
            cfg.eval.profile_n,
            g.target.len()
        );
    }
    let tc = train_config(cfg);
    let tau_w = cfg.inference.tau_w;
    let out = train::<f64>(&tc, &g.source)?;

    let preds = predict_examples(&out.model, &out.bank, &g.target, tau_w)?;
    let labels: Vec<usize> = g.target.iter().map(|e| e.y).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let target_accuracy = ddn_core::metrics::accuracy(&classes, &labels)?;

    let per_domain = if cfg.eval.leave_one_out && g.spec.sources >= 2 {
        evaluate_leave_one_out(&g.spec, cfg.data.n_per_class, derive_seed(cfg.seed, "data"), &tc, tau_w)?.per_domain
    } else {
        vec![target_accuracy]
    };
    let avg = per_domain.iter().sum::<f64>() / per_domain.len() as f64;

    let embs = embed_examples(&out.model, &g.source.examples)?;
    let src_labels: Vec<usize> = g.source.examples.iter().map(|e| e.y).collect();
    let by_domain: Vec<Vec<Vec<f64>>> = (0..g.spec.sources)
        .map(|s| {
            g.source
                .examples
                .iter()
                .zip(&embs)
                .filter(|(e, _)| e.d == DomainLabel::Source(s))
                .map(|(_, v)| v.clone())
                .collect()
        })
        .collect();
    let report = EvalReport {
        per_domain,
        avg,
        target_accuracy,
        alignment: alignment(&embs, &src_labels)?,
        uniformity: uniformity(&embs)?,
        weight_profile: domain_weight_profile(
            &out.model,
            &out.bank,
            &g.target,
            cfg.eval.profile_n,
            tau_w,
            derive_seed(cfg.seed, "profile"),
        )?,
        discrepancy_matrix: discrepancy_matrix(&by_domain, cfg.eval.n_projections, derive_seed(cfg.seed, "projections"))?,
    };

    let mut art = Artifacts::default();
    echo_config(&mut art, cfg)?;
    art.add("eval_report.json", json(&report)?);
    let mut buf = Vec::new();
    write_predictions(&mut buf, &labels, &preds)?;
    art.add("predictions.tsv", buf);
    let mut buf = Vec::new();
    export_embeddings(&out.model, &g.source.examples, &mut buf)?;
    art.add("embeddings.tsv", buf);
    for v in report.violations() {
        art.failures.push(v);
    }
    log_checks(&mut art, &out.log, tc.lambda);
    Ok(art)
}

#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Cell {
    /// Sample standard deviation; zero for a single seed.
    pub fn new(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { per_seed, mean, std }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodRow {
    pub method: String,
    #[serde(flatten)]
    pub cell: Cell,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub mode: String,
    pub batch_n: usize,
    #[serde(flatten)]
    pub cell: Cell,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodRow>,
    pub full_minus_shared: Cell,
    pub full_minus_no_dpcl: Cell,
    pub full_ge_shared: bool,
    pub batch_sweep: Vec<SweepPoint>,
    /// Per contrastive mode: "non-decreasing", "non-increasing" or
    /// "mixed" over increasing batch size.
    pub trend: Vec<(String, String)>,
}

fn trend(values: &[f64]) -> &'static str {
    if values.windows(2).all(|w| w[1] >= w[0]) {
        "non-decreasing"
    } else if values.windows(2).all(|w| w[1] <= w[0]) {
        "non-increasing"
    } else {
        "mixed"
    }
}

fn loo_mean(cfg: &ExperimentConfig, root: u64, tc: &TrainConfig) -> Result<f64> {
    let spec = cfg.spec_for(root)?;
    let table = evaluate_leave_one_out(
        &spec,
        cfg.data.n_per_class,
        derive_seed(root, "data"),
        tc,
        cfg.inference.tau_w,
    )?;
    Ok(table.mean)
}

pub fn ablate_cmd(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if cfg.data.sources < 2 {
        bail!("ablate runs leave-one-out and needs data.sources >= 2");
    }
    let roots: Vec<u64> = cfg.ablate.seeds.iter().map(|s| cfg.seed.wrapping_add(*s)).collect();
    let variants: [(&str, fn(&mut TrainConfig)); 3] = [
        ("full", |_| {}),
        ("no_dpcl", |c| c.use_dpcl = false),
        ("shared_classifier", |c| c.shared_classifier = true),
    ];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for &root in &roots {
        for (i, (_, tweak)) in variants.iter().enumerate() {
            let mut tc = cfg.train.to_config(root);
            tweak(&mut tc);
            scores[i].push(loo_mean(cfg, root, &tc)?);
        }
    }
    let diff = |a: usize, b: usize| Cell::new(scores[a].iter().zip(&scores[b]).map(|(x, y)| x - y).collect());
    let full_minus_shared = diff(0, 2);
    let full_minus_no_dpcl = diff(0, 1);
    let methods: Vec<MethodRow> = variants
        .iter()
        .zip(&scores)
        .map(|((name, _), s)| MethodRow {
            method: name.to_string(),
            cell: Cell::new(s.clone()),
        })
        .collect();

    let mut batch_sweep = Vec::new();
    let mut trends = Vec::new();
    let modes: &[(&str, bool)] = if cfg.ablate.batch_sizes.is_empty() {
        &[]
    } else {
        &[("mean", false), ("sum", true)]
    };
    for &(mode, exact) in modes {
        let mut means = Vec::new();
        for &b in &cfg.ablate.batch_sizes {
            let per_seed = roots
                .iter()
                .map(|&root| {
                    let mut tc = cfg.train.to_config(root);
                    tc.batch_n = b;
                    tc.paper_exact_dpcl = exact;
                    loo_mean(cfg, root, &tc)
                })
                .collect::<Result<Vec<_>>>()?;
            let cell = Cell::new(per_seed);
            means.push(cell.mean);
            batch_sweep.push(SweepPoint {
                mode: mode.into(),
                batch_n: b,
                cell,
            });
        }
        trends.push((mode.to_string(), trend(&means).to_string()));
    }

    let table = AblationTable {
        seeds: roots,
        full_ge_shared: methods[0].cell.mean >= methods[2].cell.mean,
        methods,
        full_minus_shared,
        full_minus_no_dpcl,
        batch_sweep,
        trend: trends,
    };

    let mut tsv = String::from("row\tmean\tstd\n");
    for m in &table.methods {
        tsv += &format!("{}\t{:.4}\t{:.4}\n", m.method, m.cell.mean, m.cell.std);
    }
    for p in &table.batch_sweep {
        tsv += &format!("batch_{}_{}\t{:.4}\t{:.4}\n", p.batch_n, p.mode, p.cell.mean, p.cell.std);
    }

    let mut art = Artifacts::default();
    echo_config(&mut art, cfg)?;
    art.add("ablation.json", json(&table)?);
    art.add("ablation.tsv", tsv.into_bytes());
    let cells = table
        .methods
        .iter()
        .map(|m| &m.cell)
        .chain(table.batch_sweep.iter().map(|p| &p.cell));
    let mut shape_ok = table.methods.len() == 3
        && table.batch_sweep.len() == 2 * cfg.ablate.batch_sizes.len();
    for c in cells {
        art.check(c.std >= 0.0, "negative standard deviation");
        art.check(c.per_seed.iter().all(|a| (0.0..=1.0).contains(a)), "accuracy outside [0, 1]");
        shape_ok &= c.per_seed.len() == cfg.ablate.seeds.len();
    }
    art.check(shape_ok, "ablation table has the wrong shape");
    Ok(art)
}

#[derive(Serialize)]
struct SearchReport<'a> {
    best_lambda: f64,
    best_score: f64,
    default_lambda: f64,
    default_score: f64,
    trials: &'a [ddn_core::trainer::TrialRecord],
}

pub fn search_cmd(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let g = generate(cfg)?;
    let (train_part, val_part) = source_validation_split(&g.source, cfg.search.val_fraction, derive_seed(cfg.seed, "validation"))?;
    if val_part.is_empty() {
        bail!("validation split is empty; raise n_per_class or search.val_fraction");
    }
    let tau_w = cfg.inference.tau_w;
    let score = |tc: &TrainConfig| -> ddn_core::Result<f64> {
        let out = train::<f64>(tc, &train_part)?;
        validation_accuracy(&out.model, &train_part, &val_part, tau_w)
    };
    let base = train_config(cfg);
    let outcome = random_search(&base, cfg.search.trials, &cfg.search.space, derive_seed(cfg.seed, "search"), score)?;
    let default_score = match outcome.trials.iter().find(|t| t.lambda == base.lambda) {
        Some(t) => t.score,
        None => score(&base)?,
    };

    let mut best = cfg.clone();
    best.train.lambda = outcome.best.lambda;
    let mut art = Artifacts::default();
    echo_config(&mut art, cfg)?;
    art.add("best_config.toml", best.to_toml()?.into_bytes());
    art.add(
        "search.json",
        json(&SearchReport {
            best_lambda: outcome.best.lambda,
            best_score: outcome.best_score,
            default_lambda: base.lambda,
            default_score,
            trials: &outcome.trials,
        })?,
    );
    art.check(outcome.trials.len() == cfg.search.trials, "wrong number of trials");
    art.check(
        outcome.trials.iter().all(|t| t.score <= outcome.best_score),
        "best score is not the maximum",
    );
    if cfg.search.space.contains(&base.lambda) && outcome.trials.iter().any(|t| t.lambda == base.lambda) {
        art.check(outcome.best_score >= default_score, "best score below the default configuration");
    }
    // the trained model for the winning weight must reproduce its score
    let again = {
        let out = train::<f64>(&outcome.best, &train_part)?;
        prediction_accuracy(&out.model, &ddn_core::trainer::freeze_prototype_bank(&out.model, &train_part)?, &val_part.examples, tau_w)?
    };
    art.check(again == outcome.best_score, "best configuration does not reproduce its score");
    Ok(art)
}
