mod common;

use latentforge_core::checkpoint::Container;
use latentforge_core::corpus::BOS;
use latentforge_core::lm::{forward, trace, ModelParams};
use latentforge_core::recognition::RecognitionLatentSets;
use latentforge_core::rng::Rng;
use latentforge_core::sae::SaeParams;
use latentforge_core::tensor::softmax;
use latentforge_core::unlearn::{
    npo_token_loss, proposal_loss, unlearn, Method, RmuObjective, UnlearnConfig, UnlearnData, Variant, Verdict,
};
use latentforge_core::Result;
use proptest::prelude::*;

const TARGET: usize = 0;

fn data(f: &common::Fixture) -> UnlearnData {
    UnlearnData::for_target(&f.world, &f.world.dataset(), TARGET).unwrap()
}

fn name_z_pre(p: &ModelParams, sae: &SaeParams, name: [usize; 2]) -> Vec<f32> {
    let x = [BOS, name[0], name[1]];
    sae.encode_pre(trace(p, &x, sae.layer).unwrap().resid(sae.layer).row(2)).unwrap()
}

/// Two known and two unknown latents per layer, chosen from the target's
/// own pre-activations so that the hinge has work to do.
fn working_sets(f: &common::Fixture, name: [usize; 2]) -> RecognitionLatentSets {
    let mut sets = RecognitionLatentSets {
        tau: 0.4,
        scores: Vec::new(),
        known: Vec::new(),
        unknown: Vec::new(),
    };
    for sae in &f.saes {
        let z = name_z_pre(&f.model, sae, name);
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        let mut known = order[..2].to_vec();
        let mut unknown = order[order.len() - 2..].to_vec();
        known.sort_unstable();
        unknown.sort_unstable();
        let mut scores = vec![0.0; z.len()];
        known.iter().for_each(|&j| scores[j] = 0.9);
        unknown.iter().for_each(|&j| scores[j] = -0.9);
        sets.scores.push(scores);
        sets.known.push(known);
        sets.unknown.push(unknown);
    }
    sets
}

fn quiet(_: usize, _: &ModelParams) -> Result<(f64, f64, Verdict)> {
    Ok((1.0, 1.0, Verdict::Continue))
}

fn config(method: Method, epochs: usize, eval_every: usize) -> UnlearnConfig {
    UnlearnConfig {
        method,
        epochs,
        eval_every,
        seed: 4,
        ..UnlearnConfig::default()
    }
}

#[test]
fn default_schedule_yields_twenty_snapshots() {
    let f = common::fixture();
    let d = data(f);
    let sets = working_sets(f, d.name);
    let cfg = UnlearnConfig {
        seed: 4,
        ..UnlearnConfig::default()
    };
    assert_eq!((cfg.c, cfg.tau, cfg.epochs, cfg.steps_per_epoch, cfg.eval_every), (1.0, 0.4, 200, 5, 10));
    let s = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
    assert_eq!(s.snapshots.len(), 20);
    assert_eq!(s.snapshots.iter().map(|x| x.epoch).collect::<Vec<_>>(), (1..=20).map(|i| 10 * i).collect::<Vec<_>>());
    assert_eq!(s.log.len(), 200);
    assert!(s.aborted.is_none() && s.halted_at.is_none());
}

#[test]
fn layer_draws_follow_the_seeded_stream() {
    let f = common::fixture();
    let d = data(f);
    let sets = working_sets(f, d.name);
    let cfg = config(Method::Proposal, 30, 30);
    let s = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
    let mut rng = Rng::new(cfg.seed).split(Method::Proposal as u64 + 1).split(2);
    let expected: Vec<Option<usize>> = (0..30).map(|_| Some(1 + rng.below(f.saes.len()))).collect();
    assert_eq!(s.log.iter().map(|l| l.layer).collect::<Vec<_>>(), expected);
}

#[test]
fn satisfied_hinge_leaves_parameters_unchanged() {
    let f = common::fixture();
    let d = data(f);
    let c = 0.25;
    let mut sets = working_sets(f, d.name);
    for (l, sae) in f.saes.iter().enumerate() {
        let z = name_z_pre(&f.model, sae, d.name);
        sets.known[l] = (0..z.len()).filter(|&j| (z[j] as f64) < -c - 0.1).collect();
        sets.unknown[l] = (0..z.len()).filter(|&j| (z[j] as f64) > c + 0.1).collect();
    }
    assert!(!sets.active_layers().is_empty());
    for l in 1..=f.saes.len() {
        assert_eq!(proposal_loss(&f.model, &f.saes[l - 1], d.name, &sets, c, l).unwrap(), 0.0);
    }
    let cfg = UnlearnConfig {
        c,
        epochs: 1,
        eval_every: 1,
        ..config(Method::Proposal, 1, 1)
    };
    let s = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
    assert_eq!(s.log[0].loss, 0.0);
    assert_eq!(s.snapshots[0].params, f.model);
}

#[test]
fn saes_are_untouched_by_unlearning() {
    let f = common::fixture();
    let d = data(f);
    let sets = working_sets(f, d.name);
    let bytes = |saes: &[SaeParams]| {
        let mut c = Container::new(f.model.dims);
        saes.iter().for_each(|s| s.add_to_container(&mut c));
        let mut out = Vec::new();
        c.write_to(&mut out).unwrap();
        out
    };
    let before = bytes(&f.saes);
    let s = unlearn(&f.model, &f.saes, Some(&sets), &d, &config(Method::Proposal, 10, 10), &mut quiet).unwrap();
    assert_ne!(s.snapshots[0].params, f.model);
    assert_eq!(bytes(&f.saes), before);
}

/// Mean log-probability of every next token of the target's sentences.
fn forget_log_likelihood(p: &ModelParams, d: &UnlearnData) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for s in &d.forget {
        let logits = forward(p, s).unwrap().logits;
        for t in 0..s.len() - 1 {
            total += softmax(logits.row(t))[s[t + 1]].ln();
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn gradient_ascent_lowers_the_target_likelihood() {
    let f = common::fixture();
    let d = data(f);
    let s = unlearn(&f.model, &f.saes, None, &d, &config(Method::Ga, 10, 10), &mut quiet).unwrap();
    let before = forget_log_likelihood(&f.model, &d);
    let after = forget_log_likelihood(&s.snapshots[0].params, &d);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn vanishing_learning_rate_is_continuous() {
    let f = common::fixture();
    let d = data(f);
    let cfg = UnlearnConfig {
        lr_min: 1e-12,
        lr_max: 1e-12,
        steps_per_epoch: 1,
        ..config(Method::Ga, 1, 1)
    };
    let s = unlearn(&f.model, &f.saes, None, &d, &cfg, &mut quiet).unwrap();
    let max = s.snapshots[0]
        .params
        .tensors
        .iter()
        .zip(&f.model.tensors)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0f32, f32::max);
    assert!(max < 1e-9, "moved by {max}");
}

#[test]
fn npo_gradient_is_bounded_as_the_probability_vanishes() {
    let beta = 0.1;
    let h = 1e-4;
    let slope = |x: f64| (npo_token_loss(x + h, beta) - npo_token_loss(x - h, beta)) / (2.0 * h);
    for x in [-400.0, -100.0, -20.0, -1.0, 0.0, 1.0, 5.0] {
        let s = slope(x);
        assert!((0.0..=2.0 + 1e-6).contains(&s), "slope {s} at {x}");
    }
    // π_θ → 0 drives the log-ratio to −∞, where the pull fades out
    assert!(slope(-400.0) < 1e-6);
}

proptest! {
    #[test]
    fn npo_loss_increases_with_the_ratio(a in -30.0f64..30.0, b in -30.0f64..30.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(npo_token_loss(lo, 0.1) <= npo_token_loss(hi, 0.1));
    }
}

fn mean_cosine_to(p: &ModelParams, d: &UnlearnData, layer: usize, u: &[f32]) -> f64 {
    let un: f64 = u.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let (mut total, mut n) = (0.0, 0usize);
    for s in &d.forget {
        let t = trace(p, s, layer).unwrap();
        for r in 1..s.len() {
            let a = t.resid(layer).row(r);
            let dot: f64 = a.iter().zip(u).map(|(x, y)| *x as f64 * *y as f64).sum();
            let an: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            total += dot / (an * un);
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn rmu_pulls_forget_activations_toward_its_direction() {
    let f = common::fixture();
    let d = data(f);
    let cfg = UnlearnConfig {
        lr_min: 1e-3,
        lr_max: 1e-3,
        ..config(Method::Rmu, 20, 10)
    };
    let mut setup = Rng::new(cfg.seed).split(Method::Rmu as u64 + 1).split(1);
    let obj = RmuObjective::new(&d, &f.model, &cfg, &mut setup).unwrap();
    let (layer, u) = (obj.layer(), obj.target().to_vec());
    let s = unlearn(&f.model, &f.saes, None, &d, &cfg, &mut quiet).unwrap();
    let c0 = mean_cosine_to(&f.model, &d, layer, &u);
    let c1 = mean_cosine_to(&s.snapshots[0].params, &d, layer, &u);
    let c2 = mean_cosine_to(&s.snapshots[1].params, &d, layer, &u);
    assert!(c0 < c1 && c1 < c2, "cosines {c0} {c1} {c2}");
}

#[test]
fn every_method_is_deterministic() {
    let f = common::fixture();
    let d = data(f);
    let sets = working_sets(f, d.name);
    for method in [Method::Proposal, Method::Ga, Method::Npo, Method::Rmu] {
        for variant in [Variant::Sentence, Variant::Entity] {
            let cfg = UnlearnConfig {
                variant,
                ..config(method, 4, 2)
            };
            let a = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
            let b = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
            assert_eq!(a, b, "{method:?} {variant:?}");
            if method == Method::Rmu {
                let other = UnlearnConfig { seed: 5, ..cfg };
                let c = unlearn(&f.model, &f.saes, None, &d, &other, &mut quiet).unwrap();
                assert_ne!(a.snapshots, c.snapshots);
            }
        }
    }
}

#[test]
fn monitor_can_halt_a_run() {
    let f = common::fixture();
    let d = data(f);
    let mut calls = 0;
    let mut stop_second = |_: usize, _: &ModelParams| -> Result<(f64, f64, Verdict)> {
        calls += 1;
        Ok((1.0, 1.0, if calls == 2 { Verdict::Halt } else { Verdict::Continue }))
    };
    let s = unlearn(&f.model, &f.saes, None, &d, &config(Method::Ga, 10, 2), &mut stop_second).unwrap();
    assert_eq!(s.halted_at, Some(4));
    assert_eq!(s.snapshots.len(), 2);
    assert_eq!(s.log.len(), 4);
}

fn total_hinge(p: &ModelParams, f: &common::Fixture, d: &UnlearnData, sets: &RecognitionLatentSets, c: f64) -> f64 {
    (1..=f.saes.len()).map(|l| proposal_loss(p, &f.saes[l - 1], d.name, sets, c, l).unwrap()).sum()
}

#[test]
fn proposal_drives_the_hinge_down() {
    let f = common::fixture();
    let d = data(f);
    let sets = working_sets(f, d.name);
    let cfg = config(Method::Proposal, 60, 10);
    let start = total_hinge(&f.model, f, &d, &sets, cfg.c);
    assert!(start > 0.0);
    let s = unlearn(&f.model, &f.saes, Some(&sets), &d, &cfg, &mut quiet).unwrap();
    let totals: Vec<f64> = s.snapshots.iter().map(|x| total_hinge(&x.params, f, &d, &sets, cfg.c)).collect();
    let last = *totals.last().unwrap();
    assert!(last == 0.0 || last < 0.9 * start, "start {start}, snapshots {totals:?}");
    assert!(totals.iter().all(|t| t.is_finite() && *t <= start * 1.05), "{totals:?}");
}
