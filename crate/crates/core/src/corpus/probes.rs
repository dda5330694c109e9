use super::{Fact, Token, World, BOS, DISTRACTOR, MASK, QUERY_FRAME};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    /// Fill-in-the-blank over the training sentence.
    Fb,
    /// Question in a frame unseen during training.
    Qa,
    /// The question behind a fixed distractor instruction.
    Aa,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Fb => "fb",
            ProbeKind::Qa => "qa",
            ProbeKind::Aa => "aa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Probe {
    pub kind: ProbeKind,
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub entity: usize,
}

impl Probe {
    /// The tokens a model is conditioned on: everything before the mask for
    /// FB probes, the whole prompt otherwise.
    pub fn context(&self) -> &[Token] {
        match self.prompt.iter().position(|&t| t == MASK) {
            Some(i) => &self.prompt[..i],
            None => &self.prompt,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProbeSets {
    pub forget_fb: Vec<Probe>,
    pub forget_qa: Vec<Probe>,
    pub forget_aa: Vec<Probe>,
    pub retain_fb: Vec<Probe>,
    pub retain_qa: Vec<Probe>,
}

impl ProbeSets {
    /// Forget-side QA prompts plus their adversarial forms, used as target
    /// inputs for distance measurements.
    pub fn forget_all(&self) -> impl Iterator<Item = &Probe> {
        self.forget_fb.iter().chain(&self.forget_qa).chain(&self.forget_aa)
    }
}

fn fb(world: &World, fact: &Fact) -> Probe {
    let mut prompt = world.render(fact, fact.frame);
    let pos = prompt.iter().position(|&t| t == fact.object).expect("object in sentence");
    prompt[pos] = MASK;
    Probe {
        kind: ProbeKind::Fb,
        prompt,
        answer: vec![fact.object],
        entity: fact.entity,
    }
}

fn qa(world: &World, fact: &Fact) -> Probe {
    let mut prompt = vec![BOS];
    prompt.extend(world.fact_context(fact, QUERY_FRAME));
    Probe {
        kind: ProbeKind::Qa,
        prompt,
        answer: vec![fact.object],
        entity: fact.entity,
    }
}

fn aa(world: &World, fact: &Fact) -> Probe {
    let mut prompt = vec![BOS];
    prompt.extend(world.words(DISTRACTOR));
    prompt.extend(world.fact_context(fact, QUERY_FRAME));
    Probe {
        kind: ProbeKind::Aa,
        prompt,
        answer: vec![fact.object],
        entity: fact.entity,
    }
}

/// Forget probes over the target's facts and retain probes over every other
/// known entity's facts.
pub fn build_probes(world: &World, target: usize) -> Result<ProbeSets> {
    world.entity(target)?;
    let mut sets = ProbeSets::default();
    for fact in &world.facts {
        if fact.entity == target {
            sets.forget_fb.push(fb(world, fact));
            sets.forget_qa.push(qa(world, fact));
            sets.forget_aa.push(aa(world, fact));
        } else {
            sets.retain_fb.push(fb(world, fact));
            sets.retain_qa.push(qa(world, fact));
        }
    }
    if sets.forget_fb.is_empty() {
        return Err(Error::Empty(format!("entity {target} has no facts to probe")));
    }
    Ok(sets)
}
