//! In-memory experiment steps, free of any file handling. The pipeline adds
//! caching and persistence on top; the acceptance harness calls these
//! directly.

use std::collections::BTreeSet;

use latentforge_core::corpus::{build_forget_set, build_probes, generate_world, Dataset, Entity, ProbeSets, Token, World};
use latentforge_core::eval::{
    activation_distance, attribute_rates, attribute_set, latent_activation_report, score_card, train_oracle,
    utility_perplexity, ScoreCard, Substitution,
};
use latentforge_core::lm::{pretrain, residual_rows, ModelParams, TrainLog};
use latentforge_core::recognition::{frequency_table, recognition_scores, select_with_relaxation, Selection, TAU_LADDER};
use latentforge_core::sae::{quality, train_sae, SaeParams, SaeQuality};
use latentforge_core::unlearn::{
    early_stop_select, forget_zero_select, proposal_loss, unlearn, CheckpointSeries, EarlyStop, UnlearnConfig,
    UnlearnData, Verdict,
};
use latentforge_core::Result;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ExperimentConfig, RunSpec, WorldConfig};

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    generate_world(cfg.seed, cfg.known, cfg.unknown, cfg.facts)
}

pub fn pretrain_model(world: &World, cfg: &ExperimentConfig) -> Result<(ModelParams, TrainLog)> {
    pretrain(&world.dataset(), world.vocab.len(), &cfg.lm)
}

/// One SAE per layer, each scored on the held-out frame renderings.
pub fn train_saes(world: &World, model: &ModelParams, cfg: &ExperimentConfig) -> Result<(Vec<SaeParams>, Vec<SaeQuality>)> {
    let train = world.dataset();
    let held = world.held_out();
    let mut saes = Vec::new();
    let mut qualities = Vec::new();
    for layer in 1..=model.dims.layers {
        let x = residual_rows(model, &train.sequences, layer)?;
        let sae = train_sae(&x, layer, &cfg.sae)?;
        qualities.push(quality(&sae, &residual_rows(model, &held.sequences, layer)?)?);
        saes.push(sae);
    }
    Ok((saes, qualities))
}

/// The τ values tried in order: the configured one, then any looser rung of
/// the ladder when relaxation is allowed.
pub fn tau_ladder(tau: f64, relax: bool) -> Vec<f64> {
    let mut ladder = vec![tau];
    if relax {
        ladder.extend(TAU_LADDER.iter().copied().filter(|&t| t < tau));
    }
    ladder
}

/// Recognition latents from the known pool minus the target against every
/// unknown entity, required at some layer `>= 2`.
pub fn find_latents(
    world: &World,
    model: &ModelParams,
    saes: &[SaeParams],
    target: &Entity,
    tau: f64,
    relax: bool,
) -> Result<Selection> {
    let known: Vec<Entity> = world.known().iter().copied().filter(|e| e.id != target.id).collect();
    let table = frequency_table(model, saes, &known, world.unknown())?;
    let scores = recognition_scores(&table.known, &table.unknown)?;
    select_with_relaxation(&scores, &tau_ladder(tau, relax), 2)
}

/// Everything evaluation needs about one target.
pub struct TargetContext {
    pub target: Entity,
    pub probes: ProbeSets,
    /// Held-out renderings of every other entity's facts.
    pub held_out: Dataset,
    pub attrs: BTreeSet<Token>,
    pub data: UnlearnData,
    /// Contexts of the forget probes, the inputs for activation distances.
    pub target_inputs: Vec<Vec<Token>>,
    /// Contexts of the forget QA probes, the inputs for output distances.
    pub qa_inputs: Vec<Vec<Token>>,
    pub unknown_pool: Vec<Entity>,
}

impl TargetContext {
    pub fn new(world: &World, target: Entity) -> Result<TargetContext> {
        let probes = build_probes(world, target.id)?;
        let target_inputs = probes.forget_all().map(|p| p.context().to_vec()).collect();
        let qa_inputs = probes.forget_qa.iter().map(|p| p.context().to_vec()).collect();
        Ok(TargetContext {
            target,
            held_out: world.held_out().without_entity(target.id),
            attrs: attribute_set(world, target.id)?,
            data: UnlearnData::for_target(world, &world.dataset(), target.id)?,
            probes,
            target_inputs,
            qa_inputs,
            unknown_pool: world.unknown().to_vec(),
        })
    }
}

/// θ_orig's recipe retrained without the target's sentences.
pub fn train_target_oracle(world: &World, target: &Entity, cfg: &ExperimentConfig) -> Result<ModelParams> {
    let dataset = world.dataset();
    let forget = build_forget_set(&dataset, world, target.id)?;
    train_oracle(&dataset, &forget, world.vocab.len(), &cfg.lm)
}

/// Every measurement taken on one model for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub epoch: usize,
    pub scores: Scores,
    pub perplexity: f64,
    /// Per layer `1..=L`.
    pub attribute_rate: Vec<f64>,
    pub known_freq: Vec<f64>,
    pub unknown_freq: Vec<f64>,
    /// Per layer: mean cosine distance to θ_orig on entity-substituted inputs.
    pub substituted_cosine: Vec<f64>,
    /// Mean TV distance to the oracle on the target's QA prompts.
    pub oracle_tv: Option<f64>,
    /// Per layer hinge value of the target's name; `None` where no latents
    /// were selected.
    pub hinge: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub forget: f64,
    pub retain: f64,
    pub forget_fb: f64,
    pub forget_qa: f64,
    pub forget_aa: f64,
    pub retain_fb: f64,
    pub retain_qa: f64,
}

impl From<ScoreCard> for Scores {
    fn from(s: ScoreCard) -> Scores {
        Scores {
            forget: s.forget(),
            retain: s.retain(),
            forget_fb: s.forget_fb,
            forget_qa: s.forget_qa,
            forget_aa: s.forget_aa,
            retain_fb: s.retain_fb,
            retain_qa: s.retain_qa,
        }
    }
}

/// Read-only references shared by every measurement.
pub struct Reference<'a> {
    pub orig: &'a ModelParams,
    pub saes: &'a [SaeParams],
    pub selection: &'a Selection,
    pub oracle: Option<&'a ModelParams>,
    pub seed: u64,
    /// Hinge margin for the reported hinge values.
    pub c: f64,
}

impl CheckpointMetrics {
    /// Deep layers, `l >= L/2`, used for the summary averages.
    pub fn deep_layers(layers: usize) -> Vec<usize> {
        (layers.div_ceil(2)..=layers).collect()
    }

    fn deep_mean(v: &[f64]) -> f64 {
        let deep = Self::deep_layers(v.len());
        deep.iter().map(|&l| v[l - 1]).sum::<f64>() / deep.len() as f64
    }

    pub fn deep_attribute_rate(&self) -> f64 {
        Self::deep_mean(&self.attribute_rate)
    }

    pub fn deep_cosine(&self) -> f64 {
        Self::deep_mean(&self.substituted_cosine)
    }
}

pub fn measure(p: &ModelParams, epoch: usize, ctx: &TargetContext, r: &Reference, eval: &EvalConfig) -> Result<CheckpointMetrics> {
    let layers = p.dims.layers;
    let name = ctx.target.name();
    let latents = latent_activation_report(p, r.saes, &r.selection.sets, &[ctx.target], eval.latent_top_k)?;
    let sub = Substitution {
        target: &ctx.target,
        pool: &ctx.unknown_pool,
        seed: r.seed,
    };
    let cos = activation_distance(p, r.orig, &ctx.target_inputs, Some(sub))?;
    let substituted_cosine = (1..=layers).map(|l| cos.mean_cosine(&[l])).collect();
    let oracle_tv = match r.oracle {
        Some(o) => Some(activation_distance(p, o, &ctx.qa_inputs, None)?.mean_tv()),
        None => None,
    };
    let sets = &r.selection.sets;
    let hinge = (1..=layers)
        .map(|l| {
            if sets.known_at(l).is_empty() && sets.unknown_at(l).is_empty() {
                Ok(None)
            } else {
                proposal_loss(p, &r.saes[l - 1], name, sets, r.c, l).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    Ok(CheckpointMetrics {
        epoch,
        scores: score_card(p, &ctx.probes)?.into(),
        perplexity: utility_perplexity(p, &ctx.held_out)?,
        attribute_rate: attribute_rates(p, name, &ctx.attrs, eval.attribute_k)?,
        known_freq: latents.known,
        unknown_freq: latents.unknown,
        substituted_cosine,
        oracle_tv,
        hinge,
    })
}

/// When the unlearning monitor may stop a run early.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Halt {
    Never,
    /// Once retain falls below this score; later snapshots cannot be selected.
    RetainBelow(f64),
    /// Once the forget score reaches 0.
    ForgetZero,
}

pub fn run_unlearning(
    orig: &ModelParams,
    saes: &[SaeParams],
    selection: &Selection,
    ctx: &TargetContext,
    base: &UnlearnConfig,
    spec: RunSpec,
    halt: Halt,
) -> Result<CheckpointSeries> {
    let cfg = UnlearnConfig {
        method: spec.method,
        variant: spec.variant,
        tau: selection.sets.tau,
        ..*base
    };
    let mut monitor = |_epoch: usize, p: &ModelParams| -> Result<(f64, f64, Verdict)> {
        let s = score_card(p, &ctx.probes)?;
        let (forget, retain) = (s.forget(), s.retain());
        let stop = match halt {
            Halt::Never => false,
            Halt::RetainBelow(floor) => retain < floor,
            Halt::ForgetZero => forget == 0.0,
        };
        Ok((forget, retain, if stop { Verdict::Halt } else { Verdict::Continue }))
    };
    unlearn(orig, saes, Some(&selection.sets), &ctx.data, &cfg, &mut monitor)
}

/// Which snapshots matter for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    /// Early-stopped snapshot index.
    pub selected: usize,
    pub selected_epoch: usize,
    /// The first snapshot already broke the retain budget.
    pub flagged: bool,
    /// First snapshot at forget 0, else the last one.
    pub forget_zero: usize,
}

pub fn choose(series: &CheckpointSeries, retain_baseline: f64, tolerance: f64) -> Result<Choice> {
    let EarlyStop { index, epoch, flagged } = early_stop_select(series, retain_baseline, tolerance)?;
    Ok(Choice {
        selected: index,
        selected_epoch: epoch,
        flagged,
        forget_zero: forget_zero_select(series).unwrap_or(index),
    })
}
