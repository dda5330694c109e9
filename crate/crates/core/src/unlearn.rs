//! Unlearning optimizers.
//!
//! Every method is an [`Objective`] driven by the same loop: Adam with a
//! reverse-cosine learning rate, `steps_per_epoch` updates per epoch, and a
//! snapshot handed to a caller-supplied monitor every `eval_every` epochs.

use std::fmt;

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{build_forget_set, Dataset, Token, World, BOS};
use crate::error::{ensure, Error, Result};
use crate::lm::graph::{bind, forward, Batch};
use crate::lm::{last_token_activation, trace, ModelDims, ModelParams};
use crate::optim::AdamState;
use crate::recognition::RecognitionLatentSets;
use crate::rng::Rng;
use crate::sae::SaeParams;
use crate::tensor::{norm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Proposal,
    Ga,
    Npo,
    Rmu,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposal, Method::Ga, Method::Npo, Method::Rmu];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposal => "proposal",
            Method::Ga => "ga",
            Method::Npo => "npo",
            Method::Rmu => "rmu",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase())
    }
}

/// Which tokens a baseline operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// The target's training sentences.
    Sentence,
    /// The bare name `BOS given family`.
    Entity,
    /// Only the final name token, given the preceding ones.
    LastToken,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sentence, Variant::Entity, Variant::LastToken];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sentence => "sentence",
            Variant::Entity => "entity",
            Variant::LastToken => "last-token",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnlearnConfig {
    pub method: Method,
    pub variant: Variant,
    pub c: f64,
    pub tau: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub eval_every: usize,
    pub retain_tolerance: f64,
    pub seed: u64,
    pub npo_beta: f64,
    /// Steering layer; `None` means `⌈L/2⌉`.
    pub rmu_layer: Option<usize>,
    /// Steering target norm as a multiple of the mean forget-activation norm.
    pub rmu_scale: f64,
    pub rmu_alpha: f64,
    /// Sentences per step for the sentence variant.
    pub sentence_batch: usize,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Proposal,
            variant: Variant::Sentence,
            c: 1.0,
            tau: 0.4,
            lr_min: 1e-5,
            lr_max: 1e-4,
            epochs: 200,
            steps_per_epoch: 5,
            eval_every: 10,
            retain_tolerance: 0.1,
            seed: 0,
            npo_beta: 0.1,
            rmu_layer: None,
            rmu_scale: 5.0,
            rmu_alpha: 1.0,
            sentence_batch: 4,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.c > 0.0, "forgetting intensity c must be positive, got {}", self.c);
        ensure!(self.tau > 0.0 && self.tau < 1.0, "tau must lie in (0, 1), got {}", self.tau);
        ensure!(
            self.lr_min > 0.0 && self.lr_min <= self.lr_max,
            "need 0 < lr_min <= lr_max, got {} and {}",
            self.lr_min,
            self.lr_max
        );
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.steps_per_epoch >= 1, "steps per epoch must be at least 1");
        ensure!(self.eval_every >= 1, "eval_every must be at least 1");
        ensure!(
            self.retain_tolerance > 0.0 && self.retain_tolerance < 1.0,
            "retain tolerance must lie in (0, 1), got {}",
            self.retain_tolerance
        );
        ensure!(self.npo_beta > 0.0, "NPO beta must be positive");
        ensure!(self.rmu_scale > 0.0, "RMU scale must be positive");
        ensure!(self.rmu_alpha >= 0.0, "RMU alpha must be non-negative");
        ensure!(self.sentence_batch >= 1, "sentence batch must be positive");
        Ok(())
    }

    pub fn rmu_layer_for(&self, layers: usize) -> usize {
        self.rmu_layer.unwrap_or(layers.div_ceil(2))
    }
}

/// `λ_t = λ_min + ½(λ_max − λ_min)(1 − cos(tπ/T))`.
pub fn lr_schedule(t: usize, total: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    ensure!(total >= 1, "schedule length must be positive");
    ensure!(t <= total, "epoch {t} beyond schedule length {total}");
    // Exact endpoints: cos(0) = 1 exactly, but cos(π) is -1 only to rounding.
    if t == 0 {
        return Ok(lr_min);
    }
    if t == total {
        return Ok(lr_max);
    }
    let phase = t as f64 / total as f64 * std::f64::consts::PI;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 - phase.cos()))
}

/// `Σ_{j∈known} max(z_j + c, 0) + Σ_{j∈unknown} max(c − z_j, 0)`.
pub fn hinge_value(z_pre: &[f32], known: &[usize], unknown: &[usize], c: f64) -> f64 {
    let k: f64 = known.iter().map(|&j| (z_pre[j] as f64 + c).max(0.0)).sum();
    let u: f64 = unknown.iter().map(|&j| (c - z_pre[j] as f64).max(0.0)).sum();
    k + u
}

/// The hinge on a `[1, m]` pre-activation node.
pub fn hinge_node<T: Scalar>(g: &mut Graph<T>, z_pre: NodeId, known: &[usize], unknown: &[usize], c: f64) -> NodeId {
    let mut terms = Vec::new();
    if !known.is_empty() {
        let z = g.select_cols(z_pre, known);
        let z = g.add_scalar(z, T::of(c));
        let z = g.relu(z);
        terms.push(g.sum(z));
    }
    if !unknown.is_empty() {
        let z = g.select_cols(z_pre, unknown);
        let z = g.scale(z, T::of(-1.0));
        let z = g.add_scalar(z, T::of(c));
        let z = g.relu(z);
        terms.push(g.sum(z));
    }
    match terms.as_slice() {
        [] => g.constant(Tensor::scalar(T::zero())),
        [a] => *a,
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// SAE pre-activation of the last name token at `layer`, on the graph.
pub fn name_pre_activation<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &[NodeId],
    dims: &ModelDims,
    sae: &SaeParams,
    name: [Token; 2],
) -> Result<NodeId> {
    let layer = sae.layer;
    ensure!((1..=dims.layers).contains(&layer), "SAE layer {layer} out of range");
    let x = [BOS, name[0], name[1]];
    let batch = Batch::new(&[&x], dims)?;
    let pass = forward(g, nodes, dims, &batch, layer, false);
    let a = g.gather_rows(pass.resid[layer], &[x.len() - 1]);
    let w = g.constant(sae.w_enc.cast());
    let b = g.constant(sae.b_enc.cast());
    let z = g.matmul(a, w);
    Ok(g.add_row(z, b))
}

/// Hinge loss of the target's last-token activation at `layer`.
pub fn proposal_loss(
    p: &ModelParams,
    sae: &SaeParams,
    name: [Token; 2],
    sets: &RecognitionLatentSets,
    c: f64,
    layer: usize,
) -> Result<f64> {
    ensure!(sae.layer == layer, "SAE is for layer {}, not {layer}", sae.layer);
    ensure!((1..=sets.layers()).contains(&layer), "layer {layer} has no latent sets");
    let a = last_token_activation(p, &name, layer)?;
    let z = sae.encode_pre(&a)?;
    Ok(hinge_value(&z, sets.known_at(layer), sets.unknown_at(layer), c))
}

/// Tokens an unlearning run may touch, for one target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlearnData {
    pub name: [Token; 2],
    /// The target's training sentences.
    pub forget: Vec<Vec<Token>>,
    /// Training sentences about everything else (RMU's retain term).
    pub retain: Vec<Vec<Token>>,
}

impl UnlearnData {
    /// Splits `dataset` around `target`: its sentences to forget, the rest
    /// to retain.
    pub fn for_target(world: &World, dataset: &Dataset, target: usize) -> Result<UnlearnData> {
        let entity = world.entity(target)?;
        let forget = build_forget_set(dataset, world, target)?;
        Ok(UnlearnData {
            name: entity.name(),
            forget: forget.sequences,
            retain: dataset.without_entity(target).sequences,
        })
    }

    /// Sequences plus a per-row weight mask selecting which positions count
    /// as forget tokens, for `variant`.
    fn variant_rows(&self, variant: Variant, picks: &[usize]) -> (Vec<Vec<Token>>, Mask) {
        match variant {
            Variant::Sentence => {
                let seqs: Vec<Vec<Token>> = picks.iter().map(|&i| self.forget[i].clone()).collect();
                (seqs, Mask::AllPredicted)
            }
            Variant::Entity => (vec![vec![BOS, self.name[0], self.name[1]]], Mask::AllPredicted),
            Variant::LastToken => (vec![vec![BOS, self.name[0], self.name[1]]], Mask::LastOnly),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mask {
    AllPredicted,
    LastOnly,
}

/// Next-token targets and weights (normalized to sum 1) for the forget rows.
fn forget_targets(batch: &Batch, mask: Mask) -> (Vec<Token>, Vec<f64>) {
    let (targets, mut w) = batch.next_token_targets();
    if mask == Mask::LastOnly {
        // only the prediction of each segment's final token
        let keep: Vec<usize> = batch.segments.iter().map(|s| s.start + s.len - 2).collect();
        for (i, x) in w.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *x = 0.0;
            }
        }
    }
    let n: f64 = w.iter().sum();
    for x in &mut w {
        *x /= n.max(1.0);
    }
    (targets, w)
}

/// Position rows that count as forget tokens for activation objectives.
fn forget_rows(batch: &Batch, mask: Mask) -> Vec<usize> {
    match mask {
        Mask::AllPredicted => (0..batch.rows()).filter(|&r| batch.tokens[r] != BOS).collect(),
        Mask::LastOnly => batch.last_rows(),
    }
}

/// One unlearning objective; the runner rebuilds the graph for every step.
pub trait Objective {
    /// Called once at the start of every epoch (1-based).
    fn begin_epoch(&mut self, _epoch: usize, _rng: &mut Rng) {}

    fn loss(&mut self, g: &mut Graph, nodes: &[NodeId], dims: &ModelDims, rng: &mut Rng) -> Result<NodeId>;

    /// Short label of the current epoch's setting, for the loss log.
    fn epoch_label(&self) -> Option<usize> {
        None
    }
}

/// The hinge objective with one uniformly drawn layer per epoch.
pub struct ProposalObjective<'a> {
    saes: &'a [SaeParams],
    sets: &'a RecognitionLatentSets,
    name: [Token; 2],
    c: f64,
    layer: usize,
}

impl<'a> ProposalObjective<'a> {
    pub fn new(saes: &'a [SaeParams], sets: &'a RecognitionLatentSets, name: [Token; 2], c: f64) -> Result<Self> {
        ensure!(saes.len() == sets.layers(), "{} SAEs for {} latent-set layers", saes.len(), sets.layers());
        ensure!(
            !sets.active_layers().is_empty(),
            "no layer has recognition latents; nothing to optimize"
        );
        Ok(ProposalObjective {
            saes,
            sets,
            name,
            c,
            layer: 1,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }
}

impl Objective for ProposalObjective<'_> {
    fn begin_epoch(&mut self, _epoch: usize, rng: &mut Rng) {
        self.layer = 1 + rng.below(self.saes.len());
    }

    fn loss(&mut self, g: &mut Graph, nodes: &[NodeId], dims: &ModelDims, _rng: &mut Rng) -> Result<NodeId> {
        let l = self.layer;
        let z = name_pre_activation(g, nodes, dims, &self.saes[l - 1], self.name)?;
        Ok(hinge_node(g, z, self.sets.known_at(l), self.sets.unknown_at(l), self.c))
    }

    fn epoch_label(&self) -> Option<usize> {
        Some(self.layer)
    }
}

/// Cycles through a reshuffled index list, `batch` items at a time.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Cycler {
    fn new(n: usize, batch: usize) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Gradient ascent on the forget tokens' likelihood (descent on `−NLL`).
pub struct GaObjective<'a> {
    data: &'a UnlearnData,
    variant: Variant,
    cycler: Cycler,
}

impl<'a> GaObjective<'a> {
    pub fn new(data: &'a UnlearnData, variant: Variant, sentence_batch: usize) -> Result<Self> {
        if variant == Variant::Sentence && data.forget.is_empty() {
            return Err(Error::Empty("forget sentences".into()));
        }
        Ok(GaObjective {
            data,
            variant,
            cycler: Cycler::new(data.forget.len(), sentence_batch),
        })
    }
}

fn variant_batch(data: &UnlearnData, variant: Variant, cycler: &mut Cycler, dims: &ModelDims, rng: &mut Rng) -> Result<(Batch, Mask)> {
    let picks = if variant == Variant::Sentence { cycler.next(rng) } else { Vec::new() };
    let (seqs, mask) = data.variant_rows(variant, &picks);
    let refs: Vec<&[Token]> = seqs.iter().map(|s| s.as_slice()).collect();
    Ok((Batch::new(&refs, dims)?, mask))
}

impl Objective for GaObjective<'_> {
    fn loss(&mut self, g: &mut Graph, nodes: &[NodeId], dims: &ModelDims, rng: &mut Rng) -> Result<NodeId> {
        let (batch, mask) = variant_batch(self.data, self.variant, &mut self.cycler, dims, rng)?;
        let pass = forward(g, nodes, dims, &batch, dims.layers, true);
        let (targets, w) = forget_targets(&batch, mask);
        let nll = g.weighted_nll(pass.logits.expect("full pass"), &targets, &w);
        Ok(g.scale(nll, -1.0))
    }
}

/// Token-level NPO: `(2/β)·mean softplus(β(log π_θ − log π_ref))` over the
/// forget tokens, with the reference frozen at the starting model.
pub struct NpoObjective<'a> {
    data: &'a UnlearnData,
    reference: &'a ModelParams,
    variant: Variant,
    beta: f64,
    cycler: Cycler,
}

impl<'a> NpoObjective<'a> {
    pub fn new(data: &'a UnlearnData, reference: &'a ModelParams, variant: Variant, beta: f64, sentence_batch: usize) -> Result<Self> {
        ensure!(beta > 0.0, "NPO beta must be positive");
        if variant == Variant::Sentence && data.forget.is_empty() {
            return Err(Error::Empty("forget sentences".into()));
        }
        Ok(NpoObjective {
            data,
            reference,
            variant,
            beta,
            cycler: Cycler::new(data.forget.len(), sentence_batch),
        })
    }
}

/// Per-row `log π(t_i)` of a model on a batch, outside any graph.
fn reference_log_probs(p: &ModelParams, batch: &Batch, targets: &[Token]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; batch.rows()];
    for seg in &batch.segments {
        let x = &batch.tokens[seg.start..seg.start + seg.len];
        let f = crate::lm::forward(p, x)?;
        for r in 0..seg.len {
            let row = f.logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            out[seg.start + r] = row[targets[seg.start + r]] as f64 - lse;
        }
    }
    Ok(out)
}

/// `(2/β)·softplus(β·(log π_θ − log π_ref))`, the per-token NPO loss.
pub fn npo_token_loss(log_ratio: f64, beta: f64) -> f64 {
    let x = beta * log_ratio;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 / beta * softplus
}

impl Objective for NpoObjective<'_> {
    fn loss(&mut self, g: &mut Graph, nodes: &[NodeId], dims: &ModelDims, rng: &mut Rng) -> Result<NodeId> {
        let (batch, mask) = variant_batch(self.data, self.variant, &mut self.cycler, dims, rng)?;
        let (targets, w) = forget_targets(&batch, mask);
        let reference = reference_log_probs(self.reference, &batch, &targets)?;
        let pass = forward(g, nodes, dims, &batch, dims.layers, true);
        let lp = g.token_log_prob(pass.logits.expect("full pass"), &targets);
        let refs = g.constant(Tensor::vector(reference.iter().map(|&r| r as f32).collect()));
        let ratio = g.sub(lp, refs);
        let x = g.scale(ratio, self.beta as f32);
        let sp = g.softplus(x);
        let count = w.iter().filter(|&&v| v > 0.0).count().max(1);
        let mask = g.constant(Tensor::vector(w.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()));
        let kept = g.mul(sp, mask);
        let total = g.sum(kept);
        let mean = g.scale(total, 1.0 / count as f32);
        Ok(g.scale(mean, (2.0 / self.beta) as f32))
    }
}

/// RMU: pull forget-token activations at one layer toward a fixed random
/// direction while holding retain-token activations at their frozen values.
pub struct RmuObjective<'a> {
    data: &'a UnlearnData,
    frozen: &'a ModelParams,
    variant: Variant,
    layer: usize,
    alpha: f64,
    target: Vec<f32>,
    forget_cycler: Cycler,
    retain_cycler: Cycler,
}

impl<'a> RmuObjective<'a> {
    pub fn new(data: &'a UnlearnData, frozen: &'a ModelParams, config: &UnlearnConfig, rng: &mut Rng) -> Result<Self> {
        let dims = frozen.dims;
        let layer = config.rmu_layer_for(dims.layers);
        ensure!((1..=dims.layers).contains(&layer), "RMU layer {layer} out of range");
        if config.variant == Variant::Sentence && data.forget.is_empty() {
            return Err(Error::Empty("forget sentences".into()));
        }
        let direction = random_unit(dims.d, rng);
        let scale = config.rmu_scale * mean_forget_norm(frozen, data, config.variant, layer)?;
        Ok(RmuObjective {
            data,
            frozen,
            variant: config.variant,
            layer,
            alpha: config.rmu_alpha,
            target: direction.iter().map(|u| (u * scale) as f32).collect(),
            forget_cycler: Cycler::new(data.forget.len(), config.sentence_batch),
            retain_cycler: Cycler::new(data.retain.len(), config.sentence_batch),
        })
    }

    /// The steering target `scale · u`.
    pub fn target(&self) -> &[f32] {
        &self.target
    }

    pub fn layer(&self) -> usize {
        self.layer
    }
}

/// Uniform direction on the unit sphere.
pub fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn mean_forget_norm(p: &ModelParams, data: &UnlearnData, variant: Variant, layer: usize) -> Result<f64> {
    let picks: Vec<usize> = (0..data.forget.len()).collect();
    let (seqs, mask) = data.variant_rows(variant, &picks);
    let refs: Vec<&[Token]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batch = Batch::new(&refs, &p.dims)?;
    let rows = forget_rows(&batch, mask);
    let mut total = 0.0;
    for seg in &batch.segments {
        let t = trace(p, &batch.tokens[seg.start..seg.start + seg.len], layer)?;
        for r in seg.start..seg.start + seg.len {
            if rows.contains(&r) {
                total += norm(t.resid(layer).row(r - seg.start));
            }
        }
    }
    Ok(total / rows.len().max(1) as f64)
}

/// `mean_rows ‖x_r − y_r‖² / d` between a graph node and fixed rows.
fn mse_rows(g: &mut Graph, x: NodeId, y: Tensor) -> NodeId {
    let y = g.constant(y);
    let diff = g.sub(x, y);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

impl Objective for RmuObjective<'_> {
    fn loss(&mut self, g: &mut Graph, nodes: &[NodeId], dims: &ModelDims, rng: &mut Rng) -> Result<NodeId> {
        let (fb, mask) = variant_batch(self.data, self.variant, &mut self.forget_cycler, dims, rng)?;
        let rows = forget_rows(&fb, mask);
        let pass = forward(g, nodes, dims, &fb, self.layer, false);
        let a = g.gather_rows(pass.resid[self.layer], &rows);
        let goal = Tensor::from_parts(vec![rows.len(), dims.d], self.target.repeat(rows.len()));
        let forget = mse_rows(g, a, goal);
        if self.alpha == 0.0 || self.data.retain.is_empty() {
            return Ok(forget);
        }
        let picks = self.retain_cycler.next(rng);
        let seqs: Vec<&[Token]> = picks.iter().map(|&i| self.data.retain[i].as_slice()).collect();
        let rb = Batch::new(&seqs, dims)?;
        let mut frozen = Vec::with_capacity(rb.rows() * dims.d);
        for s in &seqs {
            frozen.extend_from_slice(trace(self.frozen, s, self.layer)?.resid(self.layer).data());
        }
        let pass = forward(g, nodes, dims, &rb, self.layer, false);
        let retain = mse_rows(g, pass.resid[self.layer], Tensor::from_parts(vec![rb.rows(), dims.d], frozen));
        let retain = g.scale(retain, self.alpha as f32);
        Ok(g.add(forget, retain))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ModelParams,
    pub forget: f64,
    pub retain: f64,
}

/// What the monitor wants after seeing a snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Halt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    /// The proposal's sampled layer.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointSeries {
    pub snapshots: Vec<Snapshot>,
    pub log: Vec<EpochLog>,
    /// Set when a non-finite loss or gradient ended the run early.
    pub aborted: Option<String>,
    /// Set when the monitor stopped the run before the last epoch.
    pub halted_at: Option<usize>,
}

/// Runs `objective` from `start` under `config`. `monitor` scores each
/// snapshot as `(forget, retain)` and may halt the run.
pub fn run(
    start: &ModelParams,
    config: &UnlearnConfig,
    objective: &mut dyn Objective,
    rng: &mut Rng,
    monitor: &mut dyn FnMut(usize, &ModelParams) -> Result<(f64, f64, Verdict)>,
) -> Result<CheckpointSeries> {
    config.validate()?;
    let dims = start.dims;
    let mut params = start.clone();
    let mut adam = AdamState::new(&params.tensors);
    let mut series = CheckpointSeries::default();

    'epochs: for epoch in 1..=config.epochs {
        let lr = lr_schedule(epoch - 1, config.epochs, config.lr_min, config.lr_max)?;
        objective.begin_epoch(epoch, rng);
        let mut total = 0.0;
        for step in 0..config.steps_per_epoch {
            let mut g = Graph::new();
            let nodes = bind(&mut g, &params, true);
            let loss = objective.loss(&mut g, &nodes, &dims, rng)?;
            let value = g.value(loss).item() as f64;
            let grads = match g.backward(loss) {
                Ok(gr) if value.is_finite() => gr,
                Ok(_) => {
                    series.aborted = Some(format!("epoch {epoch} step {step}: loss {value}"));
                    break 'epochs;
                }
                Err(Error::Numeric { location, detail }) => {
                    series.aborted = Some(format!("epoch {epoch} step {step}: {location}: {detail}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            total += value;
            let grads: Vec<Tensor> = nodes
                .iter()
                .zip(&params.tensors)
                .map(|(id, t)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam.step(&mut params.tensors, &grads, lr)?;
            if !params.is_finite() {
                series.aborted = Some(format!("epoch {epoch} step {step}: non-finite parameters"));
                break 'epochs;
            }
        }
        series.log.push(EpochLog {
            epoch,
            lr,
            loss: total / config.steps_per_epoch as f64,
            layer: objective.epoch_label(),
        });
        if epoch % config.eval_every == 0 {
            let (forget, retain, verdict) = monitor(epoch, &params)?;
            series.snapshots.push(Snapshot {
                epoch,
                params: params.clone(),
                forget,
                retain,
            });
            if verdict == Verdict::Halt && epoch < config.epochs {
                series.halted_at = Some(epoch);
                break;
            }
        }
    }
    Ok(series)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EarlyStop {
    /// Index into the series' snapshots.
    pub index: usize,
    pub epoch: usize,
    /// The first snapshot already violated the retain budget.
    pub flagged: bool,
}

/// The last snapshot before the retain score first drops below
/// `(1 − tolerance)·baseline`; the earliest snapshot, flagged, if the very
/// first one is already below.
pub fn early_stop_select(series: &CheckpointSeries, retain_baseline: f64, tolerance: f64) -> Result<EarlyStop> {
    ensure!(!series.snapshots.is_empty(), "early stopping over an empty checkpoint series");
    let floor = (1.0 - tolerance) * retain_baseline;
    let first_bad = series.snapshots.iter().position(|s| s.retain < floor);
    let (index, flagged) = match first_bad {
        Some(0) => (0, true),
        Some(i) => (i - 1, false),
        None => (series.snapshots.len() - 1, false),
    };
    Ok(EarlyStop {
        index,
        epoch: series.snapshots[index].epoch,
        flagged,
    })
}

/// First snapshot whose forget score is exactly 0, else the last one.
pub fn forget_zero_select(series: &CheckpointSeries) -> Option<usize> {
    if series.snapshots.is_empty() {
        return None;
    }
    Some(
        series
            .snapshots
            .iter()
            .position(|s| s.forget == 0.0)
            .unwrap_or(series.snapshots.len() - 1),
    )
}

/// Builds the objective for `config.method` and runs it. `saes` and `sets`
/// are needed only by the proposal.
pub fn unlearn(
    start: &ModelParams,
    saes: &[SaeParams],
    sets: Option<&RecognitionLatentSets>,
    data: &UnlearnData,
    config: &UnlearnConfig,
    monitor: &mut dyn FnMut(usize, &ModelParams) -> Result<(f64, f64, Verdict)>,
) -> Result<CheckpointSeries> {
    config.validate()?;
    let base = Rng::new(config.seed).split(config.method as u64 + 1);
    let mut setup_rng = base.split(1);
    let mut rng = base.split(2);
    match config.method {
        Method::Proposal => {
            let sets = sets.ok_or_else(|| Error::contract("the proposal needs recognition latent sets"))?;
            let mut obj = ProposalObjective::new(saes, sets, data.name, config.c)?;
            run(start, config, &mut obj, &mut rng, monitor)
        }
        Method::Ga => {
            let mut obj = GaObjective::new(data, config.variant, config.sentence_batch)?;
            run(start, config, &mut obj, &mut rng, monitor)
        }
        Method::Npo => {
            let mut obj = NpoObjective::new(data, start, config.variant, config.npo_beta, config.sentence_batch)?;
            run(start, config, &mut obj, &mut rng, monitor)
        }
        Method::Rmu => {
            let mut obj = RmuObjective::new(data, start, config, &mut setup_rng)?;
            run(start, config, &mut obj, &mut rng, monitor)
        }
    }
}
