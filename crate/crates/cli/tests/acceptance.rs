//! End-to-end acceptance gate. Each criterion prints one PASS/FAIL line to
//! stderr (uncaptured) and the test fails if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::erm::compare_with_pooled_oracle;
use common::{model_gradient_error, smooth_instances, LossKind, FD_STEP};
use ddn_core::autodiff::{check_gradients, GradCheckKind, Tape, Tensor};
use ddn_core::inference::{aggregation_weights, prediction_accuracy};
use ddn_core::loss::{classification_loss, dpcl_loss, DpclOptions, RoutedBatch};
use ddn_core::metrics::{alignment, domain_weight_profile, sliced_w1, uniformity};
use ddn_core::model::{DdnModel, ModelConfig, PrototypeBank, Provenance};
use ddn_core::rng::seeded;
use ddn_core::synth::{make_spec, sample_source, sample_target, Dataset, DomainLabel, SpecParams, TargetMixture};
use ddn_core::trainer::{train, TrainConfig};
use rand::Rng;
use serde_json::Value;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict(id: usize, pass: bool, detail: String) -> Verdict {
    say(&format!("criterion {id:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" }));
    Verdict { id, pass, detail }
}

fn noisy_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/noisy.toml").to_string()
}

fn cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ddn-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn gradient_suite() -> Verdict {
    let clock = Instant::now();
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for (i, kind) in GradCheckKind::ALL.iter().enumerate() {
        worst = worst.max(check_gradients(*kind, 100, FD_STEP, 40_000 + i as u64).unwrap());
        trials += 100;
    }
    let losses = [
        (LossKind::Dpcl { s_plus: 0 }, 0u64),
        (LossKind::Classification, 2_000),
        (LossKind::Total { lambda: 10.0 }, 4_000),
    ];
    for (kind, first) in losses {
        for (i, mut inst) in smooth_instances(100, 3, 4, 60_000 + first).into_iter().enumerate() {
            let kind = match kind {
                LossKind::Dpcl { .. } => LossKind::Dpcl { s_plus: i % 3 },
                k => k,
            };
            worst = worst.max(model_gradient_error(&mut inst, kind));
            trials += 1;
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        1,
        worst < 1e-4 && secs < 30.0,
        format!("{} op kinds and 3 losses, {trials} instances, max rel err {worst:.2e}, {secs:.1}s", GradCheckKind::ALL.len()),
    )
}

fn closed_forms() -> Verdict {
    let mut rng = seeded(77);
    let mut rows = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let model = |domains: usize| {
        let mut cfg = ModelConfig::new(4, 5, domains);
        cfg.hidden = vec![8];
        cfg.emb_dim = 6;
        DdnModel::<f64>::new(cfg, &mut seeded(domains as u64)).unwrap()
    };
    let dpcl = |m: &DdnModel<f64>, batches: &[Vec<Vec<f64>>], s_plus: usize| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let embs: Vec<_> = batches.iter().map(|b| tape.constant(Tensor::from_rows(b).unwrap())).collect();
        let l = dpcl_loss(&mut tape, m, &vars, &embs, s_plus, &DpclOptions::default()).unwrap();
        tape.item(l)
    };

    let single = model(1);
    let single_max = (0..20).map(|_| dpcl(&single, &[rows(4, 6)], 0)).fold(0.0f64, |a, b| a.max(b.abs()));

    let mut equal_err: f64 = 0.0;
    for s in 2..=5 {
        let m = model(s);
        let b = rows(4, 6);
        let batches = vec![b; s];
        for anchor in 0..s {
            equal_err = equal_err.max((dpcl(&m, &batches, anchor) - (s as f64).ln()).abs());
        }
    }

    let mut m = model(2);
    for c in &mut m.classifiers {
        c.weight.data.iter_mut().for_each(|v| *v = 0.0);
        c.bias.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let ce = |m: &DdnModel<f64>, emb: &[Vec<f64>], s: usize, targets: Vec<usize>| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let b = RoutedBatch {
            domain: DomainLabel::Source(s),
            embeddings: tape.constant(Tensor::from_rows(emb).unwrap()),
            targets,
        };
        let l = classification_loss(&mut tape, m, &vars, &[b]).unwrap();
        tape.item(l)
    };
    let emb = rows(5, 6);
    let uniform_err = (ce(&m, &emb, 1, vec![0, 1, 2, 3, 4]) - 5f64.ln()).abs();
    m.classifiers[0].bias.data[3] = 1e6;
    let perfect = ce(&m, &emb, 0, vec![3; 5]);

    let pass = single_max == 0.0 && equal_err < 1e-9 && uniform_err < 1e-12 && perfect == 0.0;
    verdict(
        2,
        pass,
        format!(
            "S=1 max |L_P| {single_max:e}, equal-sim err {equal_err:.1e}, uniform-logit err {uniform_err:.1e}, perfect {perfect:e}"
        ),
    )
}

fn simplex_invariants() -> Verdict {
    let mut rng = seeded(303);
    let (mut draws, mut rejected, mut violations, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
    let mut i = 0u64;
    while draws < 10_000 {
        let domains = 1 + (i as usize % 6);
        let dim = rng.random_range(2..10);
        let mut cfg = ModelConfig::new(dim, 3, domains);
        cfg.hidden = vec![rng.random_range(3..12)];
        cfg.emb_dim = rng.random_range(2..8);
        let model = DdnModel::<f64>::new(cfg.clone(), &mut seeded(i)).unwrap();
        let q: Vec<Vec<f64>> = (0..domains)
            .map(|_| (0..cfg.emb_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let bank = PrototypeBank::new(q, Provenance::FrozenFullPass).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let tau_w = 10f64.powf(rng.random_range(-3.0..1.0));
            // inputs that switch off every hidden unit embed to zero and are rejected
            let Ok(w) = aggregation_weights(&model, &bank, &x, tau_w) else {
                rejected += 1;
                continue;
            };
            let w = w.as_slice();
            let gap = (w.iter().sum::<f64>() - 1.0).abs();
            worst = worst.max(gap);
            if w.iter().any(|v| !(*v >= 0.0)) || !(gap < 1e-9) {
                violations += 1;
            }
            draws += 1;
        }
        i += 1;
    }
    verdict(
        3,
        violations == 0,
        format!("{draws} draws over {i} models, {violations} violations, max |sum - 1| {worst:.1e} ({rejected} zero embeddings rejected)"),
    )
}

fn oracle_recovery() -> Verdict {
    let clock = Instant::now();
    let mut min_acc: f64 = 1.0;
    let mut argmax_seeds = 0;
    for seed in 0..5u64 {
        let spec = make_spec(&SpecParams {
            sources: 3,
            classes: 5,
            dim: 32,
            separation: 4.0,
            shift_scale: 2.0,
            noise_sigma: 0.0,
            seed,
        })
        .unwrap();
        let data = Dataset::new(3, 5, 32, sample_source(&spec, 20, seed + 100).unwrap()).unwrap();
        let out = train::<f64>(&TrainConfig { seed, ..TrainConfig::default() }, &data).unwrap();
        let mut all_right = true;
        for s in 0..3 {
            let target = sample_target(&spec, &TargetMixture::one_hot(3, s).unwrap(), 30, seed + 200).unwrap();
            min_acc = min_acc.min(prediction_accuracy(&out.model, &out.bank, &target, 0.1).unwrap());
            let profile = domain_weight_profile(&out.model, &out.bank, &target, 128, 0.1, seed).unwrap();
            all_right &= ddn_core::inference::argmax(&profile) == s;
        }
        argmax_seeds += usize::from(all_right);
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        4,
        min_acc >= 0.99 && argmax_seeds >= 4 && secs < 180.0,
        format!("min one-hot target accuracy {min_acc:.4}, profile argmax correct in {argmax_seeds}/5 seeds, {secs:.1}s"),
    )
}

fn ablation_ordering(dir: &Path) -> Verdict {
    let out = dir.join("ablation");
    let o = cli(&["ablate", "--config", &noisy_config(), "--override", "ablate.batch_sizes=[]"], &out);
    if !o.status.success() {
        return verdict(5, false, format!("ablate failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let t = read_json(&out.join("ablation.json"));
    let cell = |name: &str| {
        let m = t["methods"].as_array().unwrap().iter().find(|m| m["method"] == name).unwrap();
        (m["mean"].as_f64().unwrap(), m["std"].as_f64().unwrap())
    };
    let (full, full_sd) = cell("full");
    let (shared, shared_sd) = cell("shared_classifier");
    let (no_dpcl, no_dpcl_sd) = cell("no_dpcl");
    let gap = &t["full_minus_no_dpcl"];
    verdict(
        5,
        full - shared > 0.0,
        format!(
            "leave-one-out over 5 seeds: full {full:.4}±{full_sd:.4}, shared {shared:.4}±{shared_sd:.4}, no-DPCL {no_dpcl:.4}±{no_dpcl_sd:.4}; \
             full - no-DPCL {:.4}±{:.4} (reported only)",
            gap["mean"].as_f64().unwrap(),
            gap["std"].as_f64().unwrap()
        ),
    )
}

fn uniformity_direction(dir: &Path) -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let mut u = [0.0; 2];
        for (i, dpcl) in ["true", "false"].iter().enumerate() {
            let out = dir.join(format!("uniformity_{seed}_{dpcl}"));
            let o = cli(
                &[
                    "eval",
                    "--config",
                    &noisy_config(),
                    "--seed",
                    &seed.to_string(),
                    "--override",
                    "eval.leave_one_out=false",
                    "--override",
                    &format!("train.use_dpcl={dpcl}"),
                ],
                &out,
            );
            if !o.status.success() {
                return verdict(6, false, format!("eval failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
            u[i] = read_json(&out.join("eval_report.json"))["uniformity"].as_f64().unwrap();
        }
        wins += usize::from(u[0] <= u[1]);
        pairs.push(format!("{:.3}/{:.3}", u[0], u[1]));
    }
    verdict(
        6,
        wins >= 4,
        format!("with <= without DPCL in {wins}/5 seeds (with/without: {})", pairs.join(", ")),
    )
}

fn metric_oracles() -> Verdict {
    let mut rng = seeded(707);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(3..40);
        let d = rng.random_range(2..8);
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let unit: Vec<Vec<f64>> = z
            .iter()
            .map(|v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm).collect()
            })
            .collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let (mut a_sum, mut a_n, mut u_sum, mut u_n) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let d2 = sq(&unit[i], &unit[j]);
                if labels[i] == labels[j] {
                    a_sum += d2;
                    a_n += 1.0;
                }
                u_sum += (-2.0 * d2).exp();
                u_n += 1.0;
            }
        }
        worst = worst.max((alignment(&z, &labels).unwrap() - a_sum / a_n).abs());
        worst = worst.max((uniformity(&z).unwrap() - (u_sum / u_n).ln()).abs());
    }

    let mut w1_err: f64 = 0.0;
    for k in 0..20u64 {
        let a: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-4.0..4.0)]).collect();
        let delta = rng.random_range(-3.0..3.0);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + delta]).collect();
        w1_err = w1_err.max(sliced_w1(&a, &a, 8, k).unwrap().abs());
        w1_err = w1_err.max((sliced_w1(&a, &shifted, 8, k).unwrap() - delta.abs()).abs());
        let cloud: Vec<Vec<f64>> = (0..25).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        w1_err = w1_err.max(sliced_w1(&cloud, &cloud, 32, k).unwrap().abs());
    }
    verdict(
        7,
        worst < 1e-12 && w1_err < 1e-6,
        format!("50 sets, max brute-force gap {worst:.1e}; sliced W1 identity/translation max err {w1_err:.1e}"),
    )
}

fn erm_equivalence() -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    for (seed, hidden) in [(5u64, vec![12, 9]), (6, vec![16]), (7, vec![10, 10, 6])] {
        let spec = make_spec(&SpecParams {
            sources: 3,
            classes: 4,
            dim: 10,
            separation: 2.0,
            shift_scale: 1.5,
            noise_sigma: 0.4,
            seed,
        })
        .unwrap();
        let data = Dataset::new(3, 4, 10, sample_source(&spec, 6, seed + 1).unwrap()).unwrap();
        let cfg = TrainConfig {
            iterations: 80,
            batch_n: 8,
            use_dpcl: false,
            shared_classifier: true,
            hidden,
            emb_dim: 7,
            lr: 0.1,
            seed,
            ..TrainConfig::default()
        };
        let cmp = compare_with_pooled_oracle(&cfg, &data);
        pass &= cmp.mismatched_steps.is_empty() && cmp.params_identical && cmp.steps == cfg.iterations;
        details.push(format!("{} mismatched of {}", cmp.mismatched_steps.len(), cmp.steps));
    }
    verdict(8, pass, format!("3 runs, bitwise step losses: {}", details.join(", ")))
}

fn primary_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timestamps.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const SMALL: [&str; 10] = [
    "--override",
    "train.iterations=60",
    "--override",
    "data.n_per_class=13",
    "--override",
    "ablate.seeds=[0, 1]",
    "--override",
    "search.trials=4",
    "--override",
    "train.hidden=[16]",
];

fn determinism(dir: &Path) -> Verdict {
    let mut identical = Vec::new();
    let mut differing = Vec::new();
    for cmd in ["gen-data", "train", "eval", "ablate", "search"] {
        let runs: Vec<_> = ["a", "b"]
            .iter()
            .map(|r| {
                let out = dir.join(format!("det_{cmd}_{r}"));
                let mut args = vec![cmd, "--seed", "11"];
                args.extend(SMALL);
                let o = cli(&args, &out);
                (o.status.success(), out)
            })
            .collect();
        if runs.iter().all(|(ok, _)| *ok) && primary_files(&runs[0].1) == primary_files(&runs[1].1) {
            identical.push(cmd);
        } else {
            differing.push(cmd);
        }
    }
    verdict(
        9,
        differing.is_empty(),
        format!("byte-identical reruns: [{}]; differing or failed: [{}]", identical.join(", "), differing.join(", ")),
    )
}

fn batch_sweep(dir: &Path) -> Verdict {
    // produced by the determinism check with the default four batch sizes
    let t = read_json(&dir.join("det_ablate_a").join("ablation.json"));
    let sweep = t["batch_sweep"].as_array().unwrap();
    let curve = |mode: &str| -> Vec<(u64, f64)> {
        sweep
            .iter()
            .filter(|p| p["mode"] == mode)
            .map(|p| (p["batch_n"].as_u64().unwrap(), p["mean"].as_f64().unwrap()))
            .collect()
    };
    let trends: Vec<String> = t["trend"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| format!("{} {}", p[0].as_str().unwrap(), p[1].as_str().unwrap()))
        .collect();
    let sizes_ok = ["mean", "sum"]
        .iter()
        .all(|m| curve(m).iter().map(|(b, _)| *b).collect::<Vec<_>>() == [8, 16, 32, 64]);
    let fmt = |m: &str| curve(m).iter().map(|(b, a)| format!("{b}:{a:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        10,
        sizes_ok && trends.len() == 2,
        format!("mean [{}], sum [{}], trend: {}", fmt("mean"), fmt("sum"), trends.join("; ")),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let verdicts = vec![
        gradient_suite(),
        closed_forms(),
        simplex_invariants(),
        oracle_recovery(),
        ablation_ordering(dir),
        uniformity_direction(dir),
        metric_oracles(),
        erm_equivalence(),
        determinism(dir),
        batch_sweep(dir),
    ];
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("criterion {}: {}", v.id, v.detail))
        .collect();
    say(&format!("acceptance: {}/{} criteria passed", verdicts.len() - failed.len(), verdicts.len()));
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
