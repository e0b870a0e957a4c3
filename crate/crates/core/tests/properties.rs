use ddn_core::autodiff::{Tape, Tensor};
use ddn_core::inference::{combine, weights_from_cosines, SimplexWeights};
use ddn_core::loss::{dpcl_loss, DpclOptions};
use ddn_core::metrics::{alignment, sliced_w1, uniformity};
use ddn_core::model::{DdnModel, ModelConfig};
use ddn_core::rng::seeded;
use ddn_core::synth::TargetMixture;
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rows(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-2.0f64..2.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3)),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_stay_on_simplex(cos in prop::collection::vec(-1.0f64..=1.0, 1..8), tau in 1e-3f64..10.0) {
        let w = weights_from_cosines(&cos, tau).unwrap();
        prop_assert!(w.as_slice().iter().all(|x| *x >= 0.0));
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_ignore_common_shift(cos in prop::collection::vec(-1.0f64..=1.0, 1..8), shift in -1.0f64..1.0, tau in 0.05f64..2.0) {
        let a = weights_from_cosines(&cos, tau).unwrap();
        let shifted: Vec<f64> = cos.iter().map(|c| c + shift).collect();
        let b = weights_from_cosines(&shifted, tau).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_probs_are_convex(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..6), wraw in prop::collection::vec(0.0f64..1.0, 6)) {
        let heads: Vec<Vec<f64>> = raw.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
        let mut w: Vec<f64> = wraw[..heads.len()].iter().map(|x| x + 1e-3).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let p = combine(SimplexWeights::new(w).unwrap(), heads.clone()).unwrap();
        prop_assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..4 {
            let lo = heads.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
            let hi = heads.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.class_probs[j] >= lo - 1e-12 && p.class_probs[j] <= hi + 1e-12);
        }
        let top = p.class_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.class_probs[p.class] >= top - 1e-12);
    }

    #[test]
    fn alignment_matches_pair_loop(z in rows(2..20, 4), labels in prop::collection::vec(0usize..3, 20)) {
        let labels = &labels[..z.len()];
        let u: Vec<Vec<f64>> = z.iter().map(|v| unit(v)).collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i < j && labels[i] == labels[j] {
                    total += u[i].iter().zip(&u[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    count += 1.0;
                }
            }
        }
        match alignment(&z, labels) {
            Ok(a) => prop_assert!((a - total / count).abs() < 1e-12),
            Err(_) => prop_assert_eq!(count, 0.0),
        }
    }

    #[test]
    fn uniformity_matches_pair_loop(z in rows(2..20, 3)) {
        let u: Vec<Vec<f64>> = z.iter().map(|v| unit(v)).collect();
        let mut acc = Vec::new();
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    acc.push((-2.0 * u[i].iter().zip(&u[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp());
                }
            }
        }
        let oracle = (acc.iter().sum::<f64>() / acc.len() as f64).ln();
        prop_assert!((uniformity(&z).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn sliced_w1_is_symmetric(a in rows(1..12, 3), b in rows(1..12, 3), seed in 0u64..1000) {
        let ab = sliced_w1(&a, &b, 16, seed).unwrap();
        let ba = sliced_w1(&b, &a, 16, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(sliced_w1(&a, &a, 16, seed).unwrap(), 0.0);
    }

    #[test]
    fn mixtures_off_simplex_are_rejected(w in prop::collection::vec(0.0f64..1.0, 2..6)) {
        let s: f64 = w.iter().sum();
        prop_assume!(s > 0.1);
        let on: Vec<f64> = w.iter().map(|x| x / s).collect();
        prop_assert!(TargetMixture::new(on.clone()).is_ok());
        let mut off = on;
        off[0] += 1e-6;
        prop_assert!(TargetMixture::new(off).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_ignores_off_anchor_scale(seed in 0u64..10_000, c in prop::sample::select(vec![0.1, 10.0]), row in 0usize..4) {
        let mut rng = seeded(seed);
        let mut cfg = ModelConfig::new(3, 2, 3);
        cfg.hidden = vec![5];
        cfg.emb_dim = 4;
        let model = DdnModel::<f64>::new(cfg, &mut rng).unwrap();
        let embs: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|s| (0..4).map(|i| (0..4).map(|j| ((seed as f64) * 0.37 + (s * 16 + i * 4 + j) as f64).sin() + 0.1).collect()).collect())
            .collect();
        let loss = |embs: &[Vec<Vec<f64>>]| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let per: Vec<_> = embs.iter().map(|e| tape.constant(Tensor::from_rows(e).unwrap())).collect();
            let l = dpcl_loss(&mut tape, &model, &vars, &per, 0, &DpclOptions::default()).unwrap();
            tape.item(l)
        };
        let base = loss(&embs);
        prop_assert!(base >= 0.0);
        for s in 1..3 {
            let mut scaled = embs.clone();
            scaled[s][row].iter_mut().for_each(|v| *v *= c);
            prop_assert!((loss(&scaled) - base).abs() < 1e-9);
        }
    }
}
