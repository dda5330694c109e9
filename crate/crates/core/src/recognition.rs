//! Recognition latents: SAE latents whose activation frequency on bare entity
//! names separates entities the model knows from ones it has never seen.
//!
//! Frequencies are taken at the last token of `BOS + name`. The score of a
//! latent is `r_known − r_unknown`; latents above `τ` form the known set and
//! latents below `−τ` the unknown set.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::Entity;
use crate::error::{ensure, Error, Result};
use crate::lm::{trace, ModelParams};
use crate::sae::SaeParams;

/// Per-layer latent values; `rows[l - 1][j]` is layer `l`, latent `j`.
pub type LayerMatrix = Vec<Vec<f64>>;

/// Threshold ladder tried when the strict threshold finds nothing.
pub const TAU_LADDER: [f64; 3] = [0.4, 0.3, 0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTable {
    pub known: LayerMatrix,
    pub unknown: LayerMatrix,
    pub n_known: usize,
    pub n_unknown: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionLatentSets {
    pub tau: f64,
    pub scores: LayerMatrix,
    /// `known[l - 1]`: latents with score `> τ`, ascending index.
    pub known: Vec<Vec<usize>>,
    /// `unknown[l - 1]`: latents with score `< −τ`, ascending index.
    pub unknown: Vec<Vec<usize>>,
}

impl RecognitionLatentSets {
    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    pub fn known_at(&self, layer: usize) -> &[usize] {
        &self.known[layer - 1]
    }

    pub fn unknown_at(&self, layer: usize) -> &[usize] {
        &self.unknown[layer - 1]
    }

    /// Layers (1-based) where both sets are non-empty.
    pub fn populated_layers(&self) -> Vec<usize> {
        (1..=self.layers())
            .filter(|&l| !self.known_at(l).is_empty() && !self.unknown_at(l).is_empty())
            .collect()
    }

    /// Layers where at least one set is non-empty, which is what the hinge
    /// objective can act on.
    pub fn active_layers(&self) -> Vec<usize> {
        (1..=self.layers())
            .filter(|&l| !self.known_at(l).is_empty() || !self.unknown_at(l).is_empty())
            .collect()
    }

    /// Header line `tau <τ> layers <L> latents <m>`, then one line per
    /// selected latent: `layer <l> kind <k|u> latent <j> score <s>`.
    pub fn to_text(&self) -> String {
        let m = self.scores.first().map_or(0, |r| r.len());
        let mut out = format!("tau {} layers {} latents {}\n", self.tau, self.layers(), m);
        for l in 1..=self.layers() {
            for (kind, set) in [("k", self.known_at(l)), ("u", self.unknown_at(l))] {
                for &j in set {
                    let _ = writeln!(out, "layer {l} kind {kind} latent {j} score {}", self.scores[l - 1][j]);
                }
            }
        }
        out
    }

    /// Inverse of [`to_text`](Self::to_text). Scores of unlisted latents are
    /// not stored and come back as 0, which keeps every invariant.
    pub fn from_text(text: &str) -> Result<RecognitionLatentSets> {
        let bad = |line: usize, msg: &str| Error::format("recognition sets", format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[0] != "tau" || h[2] != "layers" || h[4] != "latents" {
            return Err(bad(1, "expected `tau <t> layers <L> latents <m>`"));
        }
        let tau: f64 = h[1].parse().map_err(|_| bad(1, "bad tau"))?;
        let layers: usize = h[3].parse().map_err(|_| bad(1, "bad layer count"))?;
        let m: usize = h[5].parse().map_err(|_| bad(1, "bad latent count"))?;
        let mut sets = RecognitionLatentSets {
            tau,
            scores: vec![vec![0.0; m]; layers],
            known: vec![Vec::new(); layers],
            unknown: vec![Vec::new(); layers],
        };
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let n = i + 1;
            if f.len() != 8 || f[0] != "layer" || f[2] != "kind" || f[4] != "latent" || f[6] != "score" {
                return Err(bad(n, "expected `layer <l> kind <k|u> latent <j> score <s>`"));
            }
            let l: usize = f[1].parse().map_err(|_| bad(n, "bad layer"))?;
            let j: usize = f[5].parse().map_err(|_| bad(n, "bad latent"))?;
            let s: f64 = f[7].parse().map_err(|_| bad(n, "bad score"))?;
            if l == 0 || l > layers || j >= m {
                return Err(bad(n, "index out of range"));
            }
            sets.scores[l - 1][j] = s;
            match f[3] {
                "k" if s > tau => sets.known[l - 1].push(j),
                "u" if s < -tau => sets.unknown[l - 1].push(j),
                "k" | "u" => return Err(bad(n, "score on the wrong side of tau")),
                _ => return Err(bad(n, "kind must be k or u")),
            }
        }
        for v in sets.known.iter_mut().chain(sets.unknown.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Ok(sets)
    }
}

/// Strict-gate indicators `z_post > 0` at the last name token, per layer.
pub fn entity_indicators(p: &ModelParams, saes: &[SaeParams], entity: &Entity) -> Result<Vec<Vec<bool>>> {
    ensure!(p.dims.layers == saes.len(), "{} SAEs for {} layers", saes.len(), p.dims.layers);
    let x = [crate::corpus::BOS, entity.given, entity.family];
    let t = trace(p, &x, p.dims.layers)?;
    saes.iter()
        .enumerate()
        .map(|(i, sae)| {
            ensure!(sae.layer == i + 1, "SAE {} is for layer {}", i + 1, sae.layer);
            let z = sae.encode_post(t.resid(i + 1).row(x.len() - 1))?;
            Ok(z.iter().map(|&v| v > 0.0).collect())
        })
        .collect()
}

/// Fraction of `entities` whose latent fires, for every layer and latent.
pub fn activation_frequencies(p: &ModelParams, saes: &[SaeParams], entities: &[Entity]) -> Result<LayerMatrix> {
    ensure!(!entities.is_empty(), "activation frequencies over an empty entity list");
    let fired: Vec<Vec<Vec<bool>>> = entities
        .par_iter()
        .map(|e| entity_indicators(p, saes, e))
        .collect::<Result<_>>()?;
    // Counts are integers, so the reduction is exact in any order.
    let n = entities.len() as f64;
    Ok((0..saes.len())
        .map(|l| {
            (0..saes[l].m())
                .map(|j| fired.iter().filter(|f| f[l][j]).count() as f64 / n)
                .collect()
        })
        .collect())
}

pub fn frequency_table(
    p: &ModelParams,
    saes: &[SaeParams],
    known: &[Entity],
    unknown: &[Entity],
) -> Result<FrequencyTable> {
    Ok(FrequencyTable {
        known: activation_frequencies(p, saes, known)?,
        unknown: activation_frequencies(p, saes, unknown)?,
        n_known: known.len(),
        n_unknown: unknown.len(),
    })
}

pub fn recognition_scores(r_known: &LayerMatrix, r_unknown: &LayerMatrix) -> Result<LayerMatrix> {
    ensure!(r_known.len() == r_unknown.len(), "frequency tables cover different layer counts");
    r_known
        .iter()
        .zip(r_unknown)
        .map(|(k, u)| {
            ensure!(k.len() == u.len(), "frequency rows of width {} and {}", k.len(), u.len());
            Ok(k.iter().zip(u).map(|(a, b)| a - b).collect())
        })
        .collect()
}

pub fn select_latents(scores: &LayerMatrix, tau: f64) -> Result<RecognitionLatentSets> {
    ensure!(tau > 0.0 && tau < 1.0, "threshold must lie in (0, 1), got {tau}");
    let pick = |row: &Vec<f64>, f: &dyn Fn(f64) -> bool| -> Vec<usize> {
        row.iter().enumerate().filter(|(_, &s)| f(s)).map(|(j, _)| j).collect()
    };
    Ok(RecognitionLatentSets {
        tau,
        scores: scores.clone(),
        known: scores.iter().map(|r| pick(r, &|s| s > tau)).collect(),
        unknown: scores.iter().map(|r| pick(r, &|s| s < -tau)).collect(),
    })
}

/// The `k` highest-scoring and the `k` lowest-scoring latents of a layer,
/// most extreme first; equal scores keep the lower index first.
pub fn top_latents(scores: &LayerMatrix, layer: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!((1..=scores.len()).contains(&layer), "layer {layer} out of range 1..={}", scores.len());
    let row = &scores[layer - 1];
    ensure!(k <= row.len(), "top-{k} of {} latents", row.len());
    let mut desc: Vec<usize> = (0..row.len()).collect();
    desc.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut asc: Vec<usize> = (0..row.len()).collect();
    asc.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    desc.truncate(k);
    asc.truncate(k);
    Ok((desc, asc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub sets: RecognitionLatentSets,
    /// Whether `sets.tau` is below the strict threshold.
    pub relaxed: bool,
    /// Whether some layer `≥ min_layer` has both sets non-empty.
    pub satisfied: bool,
}

/// Walks `ladder` from the strictest threshold down and keeps the first one
/// that populates both sets at some layer `≥ min_layer`. If none does, the
/// strictest sets are returned with `satisfied = false`.
pub fn select_with_relaxation(scores: &LayerMatrix, ladder: &[f64], min_layer: usize) -> Result<Selection> {
    ensure!(!ladder.is_empty(), "empty threshold ladder");
    for (i, &tau) in ladder.iter().enumerate() {
        let sets = select_latents(scores, tau)?;
        if sets.populated_layers().iter().any(|&l| l >= min_layer) {
            return Ok(Selection {
                sets,
                relaxed: i > 0,
                satisfied: true,
            });
        }
    }
    Ok(Selection {
        sets: select_latents(scores, ladder[0])?,
        relaxed: false,
        satisfied: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let s = recognition_scores(&vec![vec![0.5, 1.0, 0.2]], &vec![vec![0.5, 0.0, 0.9]]).unwrap();
        assert_eq!(s[0][0], 0.0);
        assert_eq!(s[0][1], 1.0);
        assert!((s[0][2] + 0.7).abs() < 1e-12);
        assert!(recognition_scores(&vec![vec![0.0; 2]], &vec![vec![0.0; 3]]).is_err());
        assert!(recognition_scores(&vec![vec![0.0]; 2], &vec![vec![0.0]]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let sets = select_latents(&vec![vec![0.4, -0.4, 0.41, -0.41]], 0.4).unwrap();
        assert_eq!(sets.known_at(1), &[2]);
        assert_eq!(sets.unknown_at(1), &[3]);
        let empty = select_latents(&vec![vec![0.0; 5]; 3], 0.4).unwrap();
        assert!(empty.known.iter().chain(&empty.unknown).all(|v| v.is_empty()));
        let one = select_latents(&vec![vec![0.0, 0.9, -0.9]], 0.4).unwrap();
        assert_eq!((one.known_at(1), one.unknown_at(1)), (&[1][..], &[2][..]));
        assert!(select_latents(&vec![vec![0.0]], 0.0).is_err());
        assert!(select_latents(&vec![vec![0.0]], 1.0).is_err());
    }

    #[test]
    fn top_latents_break_ties_by_index() {
        let s = vec![vec![0.1, 0.5, 0.5, -0.3, -0.3, 0.0]];
        let (k, u) = top_latents(&s, 1, 3).unwrap();
        assert_eq!(k, vec![1, 2, 0]);
        assert_eq!(u, vec![3, 4, 5]);
        let (all, _) = top_latents(&s, 1, 6).unwrap();
        assert_eq!(all, vec![1, 2, 0, 5, 3, 4]);
        assert!(top_latents(&s, 1, 7).is_err());
        assert!(top_latents(&s, 2, 1).is_err());
    }

    #[test]
    fn relaxation_walks_the_ladder() {
        // only layer 2 has anything, and only beyond 0.3
        let s = vec![vec![0.1, -0.1], vec![0.35, -0.25]];
        let sel = select_with_relaxation(&s, &TAU_LADDER, 2).unwrap();
        assert!(sel.satisfied && sel.relaxed);
        assert_eq!(sel.sets.tau, 0.2);
        let strict = select_with_relaxation(&vec![vec![0.9], vec![0.9, -0.9]], &TAU_LADDER, 2);
        let strict = strict.unwrap_or_else(|e| panic!("{e}"));
        assert!(!strict.relaxed && strict.satisfied);
        let none = select_with_relaxation(&vec![vec![0.0, 0.0]; 2], &TAU_LADDER, 1).unwrap();
        assert!(!none.satisfied);
        assert_eq!(none.sets.tau, 0.4);
    }

    #[test]
    fn text_round_trip() {
        let s = vec![vec![0.5, -0.6, 0.1], vec![0.0, 0.45, -0.9]];
        let sets = select_latents(&s, 0.4).unwrap();
        let text = sets.to_text();
        assert!(text.starts_with("tau 0.4 layers 2 latents 3\n"));
        assert!(text.contains("layer 2 kind u latent 2 score -0.9\n"));
        let back = RecognitionLatentSets::from_text(&text).unwrap();
        assert_eq!(back.known, sets.known);
        assert_eq!(back.unknown, sets.unknown);
        assert_eq!(back.scores[1][2], -0.9);
        assert_eq!(back.scores[0][2], 0.0);
        assert!(RecognitionLatentSets::from_text("tau 0.4 layers 1 latents 2\nlayer 1 kind k latent 0 score 0.1").is_err());
        assert!(RecognitionLatentSets::from_text("tau x").is_err());
    }

    proptest! {
        #[test]
        fn sets_are_strict_and_disjoint(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, 1..20), 1..5),
            tau in 0.01f64..0.99,
        ) {
            let m = rows[0].len();
            let rows: LayerMatrix = rows.into_iter().map(|mut r| { r.resize(m, 0.0); r }).collect();
            let sets = select_latents(&rows, tau).unwrap();
            for l in 1..=rows.len() {
                for j in 0..m {
                    let s = rows[l - 1][j];
                    prop_assert_eq!(sets.known_at(l).contains(&j), s > tau);
                    prop_assert_eq!(sets.unknown_at(l).contains(&j), s < -tau);
                }
            }
        }

        #[test]
        fn scores_stay_in_unit_interval(
            pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40),
        ) {
            let k = vec![pairs.iter().map(|p| p.0).collect::<Vec<_>>()];
            let u = vec![pairs.iter().map(|p| p.1).collect::<Vec<_>>()];
            for s in &recognition_scores(&k, &u).unwrap()[0] {
                prop_assert!((-1.0..=1.0).contains(s));
            }
        }
    }
}
