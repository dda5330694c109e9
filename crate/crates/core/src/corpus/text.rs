//! Line-oriented text form of worlds and datasets.
//!
//! Both start with `world v1 seed=<n>`; records are tab-separated and token
//! ids are space-separated.

use std::fmt::Write as _;

use super::{Dataset, Entity, Fact, Relation, Token, Vocabulary, World};
use crate::error::{Error, Result};

const WHAT: &str = "world text";

fn header(seed: u64) -> String {
    format!("world v1 seed={seed}\n")
}

fn parse_header(line: Option<&str>) -> Result<u64> {
    let line = line.ok_or_else(|| Error::format(WHAT, "empty input"))?;
    line.strip_prefix("world v1 seed=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(WHAT, format!("bad header {line:?}")))
}

fn ids(field: &str) -> Result<Vec<Token>> {
    field
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(WHAT, format!("bad token id {t:?}"))))
        .collect()
}

fn num(field: &str, lineno: usize) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::format(WHAT, format!("line {lineno}: bad number {field:?}")))
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

impl World {
    pub fn to_text(&self) -> String {
        let mut out = header(self.seed);
        for (i, t) in self.vocab.tokens().iter().enumerate() {
            writeln!(out, "token\t{i}\t{t}").unwrap();
        }
        for e in &self.entities {
            let kind = if e.known { "known" } else { "unknown" };
            writeln!(out, "entity\t{}\t{kind}\t{} {}", e.id, e.given, e.family).unwrap();
        }
        for f in &self.facts {
            writeln!(out, "fact\t{}\t{}\t{}\t{}", f.entity, f.relation.name(), f.object, f.frame).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<World> {
        let mut lines = text.lines();
        let seed = parse_header(lines.next())?;
        let (mut tokens, mut entities, mut facts) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(WHAT, format!("line {lineno}: malformed record {line:?}"));
            match (f[0], f.len()) {
                ("token", 3) => {
                    if num(f[1], lineno)? != tokens.len() {
                        return Err(bad());
                    }
                    tokens.push(f[2].to_string());
                }
                ("entity", 4) => {
                    let name = ids(f[3])?;
                    if name.len() != 2 || num(f[1], lineno)? != entities.len() {
                        return Err(bad());
                    }
                    let known = match f[2] {
                        "known" => true,
                        "unknown" => false,
                        _ => return Err(bad()),
                    };
                    entities.push(Entity {
                        id: entities.len(),
                        given: name[0],
                        family: name[1],
                        known,
                    });
                }
                ("fact", 5) => facts.push(Fact {
                    entity: num(f[1], lineno)?,
                    relation: Relation::parse(f[2]).ok_or_else(bad)?,
                    object: num(f[3], lineno)?,
                    frame: num(f[4], lineno)?,
                }),
                _ => return Err(bad()),
            }
        }
        let vocab = Vocabulary::from_tokens(tokens)?;
        let n_known = entities.iter().take_while(|e: &&Entity| e.known).count();
        if entities[n_known..].iter().any(|e| e.known) {
            return Err(Error::format(WHAT, "known entities must precede unknown ones"));
        }
        let in_vocab = |t: Token| t < vocab.len();
        let ok = entities.iter().all(|e| in_vocab(e.given) && in_vocab(e.family))
            && facts
                .iter()
                .all(|f| f.entity < n_known && in_vocab(f.object) && f.frame < super::TRAIN_FRAMES.len());
        if !ok {
            return Err(Error::format(WHAT, "record refers to an unknown token or entity"));
        }
        Ok(World::assemble(seed, vocab, entities, facts, n_known))
    }
}

impl Dataset {
    pub fn to_text(&self, seed: u64) -> String {
        let mut out = header(seed);
        for (s, a) in self.sequences.iter().zip(&self.annotations) {
            writeln!(out, "sequence\t{}\t{}", join(s), join(a)).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<(u64, Dataset)> {
        let mut lines = text.lines();
        let seed = parse_header(lines.next())?;
        let mut d = Dataset {
            sequences: Vec::new(),
            annotations: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0] != "sequence" {
                return Err(Error::format(WHAT, format!("line {}: malformed record {line:?}", n + 2)));
            }
            d.sequences.push(ids(f[1])?);
            d.annotations.push(ids(f[2])?);
        }
        Ok((seed, d))
    }
}
