//! Measurements of a model before and after unlearning.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::corpus::{substitute_entity, Dataset, Entity, Probe, ProbeSets, Token, World};
use crate::error::{ensure, Error, Result};
use crate::lm::{exact_match, last_token_activation, logit_lens, pretrain, trace, unembed, ModelParams, TrainConfig};
use crate::recognition::{entity_indicators, top_latents, RecognitionLatentSets};
use crate::rng::Rng;
use crate::sae::SaeParams;
use crate::tensor::{softmax, top_k_indices};

/// Fraction of probes whose greedy continuation contains the answer.
pub fn exact_match_score(p: &ModelParams, probes: &[Probe]) -> Result<f64> {
    ensure!(!probes.is_empty(), "exact-match score over no probes");
    let hits: Vec<bool> = probes
        .par_iter()
        .map(|q| exact_match(p, q.context(), &q.answer))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / probes.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreCard {
    pub forget_fb: f64,
    pub forget_qa: f64,
    pub forget_aa: f64,
    pub retain_fb: f64,
    pub retain_qa: f64,
}

impl ScoreCard {
    /// Mean of the three forget sub-scores.
    pub fn forget(&self) -> f64 {
        (self.forget_fb + self.forget_qa + self.forget_aa) / 3.0
    }

    /// Mean of the two retain sub-scores.
    pub fn retain(&self) -> f64 {
        (self.retain_fb + self.retain_qa) / 2.0
    }
}

pub fn score_card(p: &ModelParams, probes: &ProbeSets) -> Result<ScoreCard> {
    Ok(ScoreCard {
        forget_fb: exact_match_score(p, &probes.forget_fb)?,
        forget_qa: exact_match_score(p, &probes.forget_qa)?,
        forget_aa: exact_match_score(p, &probes.forget_aa)?,
        retain_fb: exact_match_score(p, &probes.retain_fb)?,
        retain_qa: exact_match_score(p, &probes.retain_qa)?,
    })
}

/// Tokens of the target's fact objects, minus stopwords and name tokens.
pub fn attribute_set(world: &World, target: usize) -> Result<BTreeSet<Token>> {
    let e = world.entity(target)?;
    let stop = world.stopword_ids();
    let set: BTreeSet<Token> = world
        .facts_of(target)
        .map(|f| f.object)
        .filter(|t| !stop.contains(t) && !e.name().contains(t))
        .collect();
    if set.is_empty() {
        return Err(Error::Empty(format!("entity {target} has no attribute tokens")));
    }
    Ok(set)
}

/// `|Top_k(logit lens of a_l at the last name token) ∩ attrs| / k`, with `k`
/// clamped to the vocabulary size.
pub fn attribute_rate(p: &ModelParams, name: [Token; 2], attrs: &BTreeSet<Token>, layer: usize, k: usize) -> Result<f64> {
    ensure!(k >= 1, "attribute rate needs k >= 1");
    let k = k.min(p.dims.vocab);
    let h = last_token_activation(p, &name, layer)?;
    let probs = logit_lens(p, &h)?;
    let top = top_k_indices(&probs, k);
    Ok(top.iter().filter(|t| attrs.contains(t)).count() as f64 / k as f64)
}

/// Attribute rate at every layer `1..=L`.
pub fn attribute_rates(p: &ModelParams, name: [Token; 2], attrs: &BTreeSet<Token>, k: usize) -> Result<Vec<f64>> {
    (1..=p.dims.layers).map(|l| attribute_rate(p, name, attrs, l, k)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentReport {
    /// Per layer, mean indicator over targets and the top-k known latents.
    pub known: Vec<f64>,
    /// Same for the top-k unknown latents.
    pub unknown: Vec<f64>,
}

/// Mean firing rate of each layer's top-`k` known and unknown latents (by
/// score) over `targets`.
pub fn latent_activation_report(
    p: &ModelParams,
    saes: &[SaeParams],
    sets: &RecognitionLatentSets,
    targets: &[Entity],
    top_k: usize,
) -> Result<LatentReport> {
    ensure!(top_k >= 1, "latent report needs top_k >= 1");
    ensure!(!targets.is_empty(), "latent report over no targets");
    ensure!(saes.len() == sets.layers(), "{} SAEs for {} latent-set layers", saes.len(), sets.layers());
    let fired: Vec<Vec<Vec<bool>>> = targets
        .par_iter()
        .map(|e| entity_indicators(p, saes, e))
        .collect::<Result<_>>()?;
    let mut report = LatentReport {
        known: Vec::new(),
        unknown: Vec::new(),
    };
    for l in 1..=sets.layers() {
        let (k, u) = top_latents(&sets.scores, l, top_k)?;
        let rate = |idx: &[usize]| {
            let hits: usize = fired.iter().map(|f| idx.iter().filter(|&&j| f[l - 1][j]).count()).sum();
            hits as f64 / (idx.len() * fired.len()) as f64
        };
        report.known.push(rate(&k));
        report.unknown.push(rate(&u));
    }
    Ok(report)
}

/// The dataset with every sequence of `forget` removed (one removal per
/// occurrence in `forget`).
pub fn complement(dataset: &Dataset, forget: &Dataset) -> Dataset {
    let mut pending: Vec<&Vec<Token>> = forget.sequences.iter().collect();
    let mut keep = Dataset {
        sequences: Vec::new(),
        annotations: Vec::new(),
    };
    for (s, a) in dataset.sequences.iter().zip(&dataset.annotations) {
        if let Some(i) = pending.iter().position(|f| *f == s) {
            pending.swap_remove(i);
        } else {
            keep.sequences.push(s.clone());
            keep.annotations.push(a.clone());
        }
    }
    keep
}

/// Retrains from scratch on `dataset` minus `forget`, under `config`.
pub fn train_oracle(dataset: &Dataset, forget: &Dataset, vocab: usize, config: &TrainConfig) -> Result<ModelParams> {
    let rest = complement(dataset, forget);
    if rest.is_empty() {
        return Err(Error::Empty("oracle training set (everything was forgotten)".into()));
    }
    Ok(pretrain(&rest, vocab, config)?.0)
}

/// Total variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `1 − cos(a, b)`; 1 when either vector is zero.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = crate::tensor::norm(a);
    let nb = crate::tensor::norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    /// Per input: TV distance of the last-position next-token distributions.
    pub tv: Vec<f64>,
    /// Per input, per layer `1..=L`: cosine distance of last-position `a_l`.
    pub cosine: Vec<Vec<f64>>,
}

impl DistanceReport {
    pub fn mean_tv(&self) -> f64 {
        self.tv.iter().sum::<f64>() / self.tv.len().max(1) as f64
    }

    /// Mean cosine distance over inputs and over `layers` (1-based).
    pub fn mean_cosine(&self, layers: &[usize]) -> f64 {
        let n = (self.cosine.len() * layers.len()).max(1) as f64;
        self.cosine.iter().map(|c| layers.iter().map(|&l| c[l - 1]).sum::<f64>()).sum::<f64>() / n
    }
}

/// How `θ_b`'s inputs are rewritten before comparison.
#[derive(Clone, Copy, Debug)]
pub struct Substitution<'a> {
    pub target: &'a Entity,
    pub pool: &'a [Entity],
    pub seed: u64,
}

/// Compares `θ_a` on each input with `θ_b` on the same input, or on its
/// entity-substituted form when `substitution` is set.
pub fn activation_distance(
    a: &ModelParams,
    b: &ModelParams,
    inputs: &[Vec<Token>],
    substitution: Option<Substitution<'_>>,
) -> Result<DistanceReport> {
    ensure!(a.dims == b.dims, "models have different shapes");
    let layers = a.dims.layers;
    let rows: Vec<(f64, Vec<f64>)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let xb = match substitution {
                Some(s) => substitute_entity(x, s.target, s.pool, &mut Rng::new(s.seed).split(i as u64)),
                None => x.clone(),
            };
            let ta = trace(a, x, layers)?;
            let tb = trace(b, &xb, layers)?;
            let last_a = ta.resid(layers).row(x.len() - 1);
            let last_b = tb.resid(layers).row(xb.len() - 1);
            let pa = softmax(&unembed(a, last_a));
            let pb = softmax(&unembed(b, last_b));
            let cos = (1..=layers)
                .map(|l| cosine_distance(ta.resid(l).row(x.len() - 1), tb.resid(l).row(xb.len() - 1)))
                .collect();
            Ok((total_variation(&pa, &pb), cos))
        })
        .collect::<Result<_>>()?;
    let (tv, cosine) = rows.into_iter().unzip();
    Ok(DistanceReport { tv, cosine })
}

/// `exp(mean next-token NLL)` over every predicted position of `held_out`.
pub fn utility_perplexity(p: &ModelParams, held_out: &Dataset) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Empty("perplexity held-out set".into()));
    }
    let parts: Vec<(f64, f64)> = held_out
        .sequences
        .par_iter()
        .map(|s| {
            let f = crate::lm::forward(p, s)?;
            let nll: f64 = (0..s.len() - 1).map(|i| -softmax(f.logits.row(i))[s[i + 1]].ln()).sum();
            Ok((nll, (s.len() - 1) as f64))
        })
        .collect::<Result<_>>()?;
    let (total, n) = parts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    ensure!(n > 0.0, "held-out set has no predicted tokens");
    Ok((total / n).exp())
}
