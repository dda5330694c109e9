//! Flat `key = value` experiment configuration with dotted section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a complete configuration. A repeated key
//! keeps its last value and produces a warning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use latentforge_core::lm::TrainConfig;
use latentforge_core::sae::SaeTrainConfig;
use latentforge_core::unlearn::{Method, UnlearnConfig, Variant};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldConfig {
    pub seed: u64,
    pub known: usize,
    pub unknown: usize,
    pub facts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            known: 40,
            unknown: 40,
            facts: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Logit-lens top-k for the attribute rate.
    pub attribute_k: usize,
    /// Latents per side in the recognition-latent frequency report.
    pub latent_top_k: usize,
    /// Walk down the threshold ladder when τ finds no usable layer.
    pub relax_tau: bool,
    pub oracle: bool,
    /// Perplexity ratio over θ_orig that flags output collapse.
    pub collapse_factor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attribute_k: 50,
            latent_top_k: 5,
            relax_tau: true,
            oracle: true,
            collapse_factor: 2.0,
        }
    }
}

/// One unlearning run: a method and, for baselines, its data variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunSpec {
    pub method: Method,
    pub variant: Variant,
}

impl RunSpec {
    pub fn proposal() -> RunSpec {
        RunSpec {
            method: Method::Proposal,
            variant: Variant::Sentence,
        }
    }

    pub fn baseline(method: Method, variant: Variant) -> RunSpec {
        RunSpec { method, variant }
    }

    /// `proposal`, or `<method>:<variant>` for baselines. A bare baseline
    /// name takes `default_variant`.
    pub fn parse(s: &str, default_variant: Variant) -> Option<RunSpec> {
        let (m, v) = match s.split_once(':') {
            Some((m, v)) => (m.trim(), Some(v.trim())),
            None => (s.trim(), None),
        };
        let method = Method::parse(m)?;
        if method == Method::Proposal {
            return v.is_none().then(RunSpec::proposal);
        }
        let variant = match v {
            Some(v) => Variant::parse(v)?,
            None => default_variant,
        };
        Some(RunSpec { method, variant })
    }

    /// File-system friendly label, e.g. `ga-last-token`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Proposal => "proposal".into(),
            m => format!("{}-{}", m.name(), self.variant.name()),
        }
    }
}

impl fmt::Display for RunSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            Method::Proposal => f.write_str("proposal"),
            m => write!(f, "{}:{}", m.name(), self.variant.name()),
        }
    }
}

pub fn default_runs() -> Vec<RunSpec> {
    vec![
        RunSpec::proposal(),
        RunSpec::baseline(Method::Ga, Variant::Sentence),
        RunSpec::baseline(Method::Ga, Variant::Entity),
        RunSpec::baseline(Method::Ga, Variant::LastToken),
        RunSpec::baseline(Method::Npo, Variant::Sentence),
        RunSpec::baseline(Method::Rmu, Variant::Sentence),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Seeds pretraining, SAE training and unlearning.
    pub seed: u64,
    /// Known-entity index or full name.
    pub target: String,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub lm: TrainConfig,
    pub sae: SaeTrainConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalConfig,
    pub runs: Vec<RunSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            seed: 1,
            target: "0".into(),
            out: PathBuf::from("runs/default"),
            world: WorldConfig::default(),
            lm: TrainConfig::default(),
            sae: SaeTrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            eval: EvalConfig::default(),
            runs: default_runs(),
        };
        c.set_seed(1);
        c
    }
}

impl ExperimentConfig {
    /// Sets the global seed and the stage seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.lm.seed = seed;
        self.sae.seed = seed;
        self.unlearn.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: latentforge_core::Error| ConfigError::Invalid(e.to_string());
        self.lm.validate().map_err(inv)?;
        self.sae.validate().map_err(inv)?;
        self.unlearn.validate().map_err(inv)?;
        let w = &self.world;
        if w.known < 2 || w.unknown < 2 || w.facts < 1 {
            return Err(ConfigError::Invalid(format!(
                "world needs >= 2 known, >= 2 unknown entities and >= 1 fact, got {}/{}/{}",
                w.known, w.unknown, w.facts
            )));
        }
        if self.eval.attribute_k == 0 || self.eval.latent_top_k == 0 {
            return Err(ConfigError::Invalid("eval top-k values must be positive".into()));
        }
        if self.eval.collapse_factor <= 1.0 {
            return Err(ConfigError::Invalid("collapse factor must exceed 1".into()));
        }
        if self.runs.is_empty() {
            return Err(ConfigError::Invalid("run.methods lists no runs".into()));
        }
        if self.target.trim().is_empty() {
            return Err(ConfigError::Invalid("target selector is empty".into()));
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. Parsing it back
    /// gives an equal configuration.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Canonical lines whose key starts with one of `prefixes`.
    pub fn section_text(&self, prefixes: &[&str]) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let u = &self.unlearn;
        let runs: Vec<String> = self.runs.iter().map(|r| r.to_string()).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("target", self.target.clone()),
            ("out", self.out.display().to_string()),
            ("world.seed", self.world.seed.to_string()),
            ("world.known", self.world.known.to_string()),
            ("world.unknown", self.world.unknown.to_string()),
            ("world.facts", self.world.facts.to_string()),
            ("lm.epochs", self.lm.epochs.to_string()),
            ("lm.batch_size", self.lm.batch_size.to_string()),
            ("lm.lr", format!("{:?}", self.lm.lr)),
            ("lm.d", self.lm.d.to_string()),
            ("lm.layers", self.lm.layers.to_string()),
            ("lm.maxlen", self.lm.maxlen.to_string()),
            ("sae.epochs", self.sae.epochs.to_string()),
            ("sae.lr", format!("{:?}", self.sae.lr)),
            ("sae.sparsity", format!("{:?}", self.sae.sparsity)),
            ("sae.expansion", self.sae.expansion.to_string()),
            ("sae.batch_size", self.sae.batch_size.to_string()),
            ("sae.bandwidth", format!("{:?}", self.sae.bandwidth)),
            ("sae.threshold_init", format!("{:?}", self.sae.threshold_init)),
            ("unlearn.method", u.method.name().to_string()),
            ("unlearn.variant", u.variant.name().to_string()),
            ("unlearn.c", format!("{:?}", u.c)),
            ("unlearn.tau", format!("{:?}", u.tau)),
            ("unlearn.lr_min", format!("{:?}", u.lr_min)),
            ("unlearn.lr_max", format!("{:?}", u.lr_max)),
            ("unlearn.epochs", u.epochs.to_string()),
            ("unlearn.steps_per_epoch", u.steps_per_epoch.to_string()),
            ("unlearn.eval_every", u.eval_every.to_string()),
            ("unlearn.retain_tolerance", format!("{:?}", u.retain_tolerance)),
            ("unlearn.npo_beta", format!("{:?}", u.npo_beta)),
            ("unlearn.rmu_layer", u.rmu_layer.map_or("auto".to_string(), |l| l.to_string())),
            ("unlearn.rmu_scale", format!("{:?}", u.rmu_scale)),
            ("unlearn.rmu_alpha", format!("{:?}", u.rmu_alpha)),
            ("unlearn.sentence_batch", u.sentence_batch.to_string()),
            ("eval.attribute_k", self.eval.attribute_k.to_string()),
            ("eval.latent_top_k", self.eval.latent_top_k.to_string()),
            ("eval.relax_tau", self.eval.relax_tau.to_string()),
            ("eval.oracle", self.eval.oracle.to_string()),
            ("eval.collapse_factor", format!("{:?}", self.eval.collapse_factor)),
            ("run.methods", runs.join(", ")),
        ]
    }

    /// Applies one key; `Ok(false)` means the key is unknown.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("expected true or false, got {v:?}")),
            }
        }
        let u = &mut self.unlearn;
        match key {
            "seed" => self.seed = num(value)?,
            "target" => self.target = value.to_string(),
            "out" => self.out = PathBuf::from(value),
            "world.seed" => self.world.seed = num(value)?,
            "world.known" => self.world.known = num(value)?,
            "world.unknown" => self.world.unknown = num(value)?,
            "world.facts" => self.world.facts = num(value)?,
            "lm.epochs" => self.lm.epochs = num(value)?,
            "lm.batch_size" => self.lm.batch_size = num(value)?,
            "lm.lr" => self.lm.lr = num(value)?,
            "lm.d" => self.lm.d = num(value)?,
            "lm.layers" => self.lm.layers = num(value)?,
            "lm.maxlen" => self.lm.maxlen = num(value)?,
            "sae.epochs" => self.sae.epochs = num(value)?,
            "sae.lr" => self.sae.lr = num(value)?,
            "sae.sparsity" => self.sae.sparsity = num(value)?,
            "sae.expansion" => self.sae.expansion = num(value)?,
            "sae.batch_size" => self.sae.batch_size = num(value)?,
            "sae.bandwidth" => self.sae.bandwidth = num(value)?,
            "sae.threshold_init" => self.sae.threshold_init = num(value)?,
            "unlearn.method" => u.method = Method::parse(value).ok_or_else(|| format!("unknown method {value:?}"))?,
            "unlearn.variant" => {
                u.variant = Variant::parse(value).ok_or_else(|| format!("unknown variant {value:?}"))?
            }
            "unlearn.c" => u.c = num(value)?,
            "unlearn.tau" => u.tau = num(value)?,
            "unlearn.lr_min" => u.lr_min = num(value)?,
            "unlearn.lr_max" => u.lr_max = num(value)?,
            "unlearn.epochs" => u.epochs = num(value)?,
            "unlearn.steps_per_epoch" => u.steps_per_epoch = num(value)?,
            "unlearn.eval_every" => u.eval_every = num(value)?,
            "unlearn.retain_tolerance" => u.retain_tolerance = num(value)?,
            "unlearn.npo_beta" => u.npo_beta = num(value)?,
            "unlearn.rmu_layer" => u.rmu_layer = if value == "auto" { None } else { Some(num(value)?) },
            "unlearn.rmu_scale" => u.rmu_scale = num(value)?,
            "unlearn.rmu_alpha" => u.rmu_alpha = num(value)?,
            "unlearn.sentence_batch" => u.sentence_batch = num(value)?,
            "eval.attribute_k" => self.eval.attribute_k = num(value)?,
            "eval.latent_top_k" => self.eval.latent_top_k = num(value)?,
            "eval.relax_tau" => self.eval.relax_tau = flag(value)?,
            "eval.oracle" => self.eval.oracle = flag(value)?,
            "eval.collapse_factor" => self.eval.collapse_factor = num(value)?,
            "run.methods" => {
                self.runs = value
                    .split(',')
                    .map(|s| RunSpec::parse(s, Variant::Sentence).ok_or_else(|| format!("bad run {:?}", s.trim())))
                    .collect::<Result<_, _>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| !part.is_empty())
        && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

pub fn parse_config(text: &str) -> Result<Parsed, ConfigError> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    let mut warnings = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got {trimmed:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !valid_key(key) {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("malformed key {key:?}"),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("missing value for `{key}`"),
            });
        }
        if let Some(prev) = seen.insert(key.to_string(), line) {
            warnings.push(format!("line {line}: `{key}` repeats line {prev}; the later value wins"));
        }
        entries.push((line, key.to_string(), value.to_string()));
    }

    let mut config = ExperimentConfig::default();
    // the global seed fans out first so explicit keys cannot be clobbered by it
    if let Some((line, _, v)) = entries.iter().rev().find(|(_, k, _)| k == "seed") {
        let seed = v.parse().map_err(|_| ConfigError::Value {
            line: *line,
            key: "seed".into(),
            msg: format!("cannot parse {v:?}"),
        })?;
        config.set_seed(seed);
    }
    for (line, key, value) in &entries {
        match config.set(key, value) {
            Ok(true) => {}
            Ok(false) => {
                return Err(ConfigError::UnknownKey {
                    line: *line,
                    key: key.clone(),
                })
            }
            Err(msg) => {
                return Err(ConfigError::Value {
                    line: *line,
                    key: key.clone(),
                    msg,
                })
            }
        }
    }
    config.validate()?;
    Ok(Parsed { config, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let p = parse_config("").unwrap();
        assert_eq!(p.config, ExperimentConfig::default());
        let u = &p.config.unlearn;
        assert_eq!((u.c, u.tau, u.epochs, u.steps_per_epoch, u.eval_every), (1.0, 0.4, 200, 5, 10));
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.unlearn.lr_min = 3.3e-7;
        c.unlearn.rmu_layer = Some(3);
        c.runs = vec![RunSpec::proposal(), RunSpec::baseline(Method::Npo, Variant::LastToken)];
        c.target = "ada lovelace".into();
        let back = parse_config(&c.to_text()).unwrap().config;
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn negative_intensity_is_rejected() {
        assert!(matches!(parse_config("unlearn.c = -1"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn duplicate_key_keeps_last_and_warns() {
        let p = parse_config("unlearn.c = 2.0\n# note\nunlearn.c = 3.0\n").unwrap();
        assert_eq!(p.config.unlearn.c, 3.0);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("line 3"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse_config("seed = 3\n\nnot a pair\n"),
            Err(ConfigError::Syntax {
                line: 3,
                msg: "expected `key = value`, got \"not a pair\"".into()
            })
        );
        assert!(matches!(
            parse_config("seed = 1\nunlearn.gamma = 2"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(parse_config("lm.epochs = many"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(parse_config("lm..epochs = 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(parse_config("lm.epochs ="), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn seed_fans_out_unless_overridden() {
        let c = parse_config("seed = 9").unwrap().config;
        assert_eq!((c.lm.seed, c.sae.seed, c.unlearn.seed), (9, 9, 9));
        let mut d = ExperimentConfig::default();
        d.set_seed(9);
        assert_eq!(c, d);
    }

    #[test]
    fn run_specs_parse() {
        assert_eq!(RunSpec::parse("proposal", Variant::Entity), Some(RunSpec::proposal()));
        assert_eq!(RunSpec::parse("proposal:entity", Variant::Entity), None);
        assert_eq!(
            RunSpec::parse(" ga : last-token ", Variant::Sentence),
            Some(RunSpec::baseline(Method::Ga, Variant::LastToken))
        );
        assert_eq!(RunSpec::parse("npo", Variant::Entity), Some(RunSpec::baseline(Method::Npo, Variant::Entity)));
        assert_eq!(RunSpec::parse("sgd", Variant::Entity), None);
        assert_eq!(RunSpec::baseline(Method::Ga, Variant::LastToken).label(), "ga-last-token");
        let c = parse_config("run.methods = rmu:entity, proposal").unwrap().config;
        assert_eq!(c.runs, vec![RunSpec::baseline(Method::Rmu, Variant::Entity), RunSpec::proposal()]);
    }
}
