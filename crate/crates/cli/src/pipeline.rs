//! Cached, persisted pipeline stages.
//!
//! Each stage lives in its own directory under the output root together
//! with a `key` file: the SHA-256 of the stage name, the artifact version,
//! the keys of the stages it reads and the configuration lines it depends
//! on. A stage is reused only when its stored key matches exactly; the key
//! file is written last, so an interrupted stage is recomputed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latentforge_core::checkpoint::Container;
use latentforge_core::corpus::{Entity, World};
use latentforge_core::lm::ModelParams;
use latentforge_core::recognition::{RecognitionLatentSets, Selection};
use latentforge_core::sae::SaeParams;
use latentforge_core::unlearn::{CheckpointSeries, EpochLog, Snapshot};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ExperimentConfig, RunSpec};
use crate::stages::{self, CheckpointMetrics, Choice, Halt, Reference, TargetContext};

const ARTIFACT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: latentforge_core::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Artifact { path: PathBuf, msg: String },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for latentforge_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| PipelineError::Stage { stage, source })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn content_key(stage: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(b"\0");
    h.update(ARTIFACT_VERSION.as_bytes());
    for p in parts {
        h.update(b"\0");
        h.update(p.as_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct StageDir {
    name: &'static str,
    dir: PathBuf,
    key: String,
}

impl StageDir {
    fn is_current(&self) -> bool {
        fs::read_to_string(self.dir.join("key")).is_ok_and(|k| k.trim() == self.key)
    }

    /// Clears the directory for a fresh computation.
    fn reset(&self) -> Result<()> {
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        }
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))
    }

    fn commit(&self) -> Result<()> {
        write_file(&self.dir.join("key"), &format!("{}\n", self.key))
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }
}

fn save_model(p: &ModelParams, path: &Path, stage: &'static str) -> Result<()> {
    p.to_container().save(path).stage(stage)
}

fn load_model(path: &Path, stage: &'static str) -> Result<ModelParams> {
    ModelParams::from_container(&Container::load(path).stage(stage)?).stage(stage)
}

/// A loaded artifact and the key it was produced under.
pub struct Keyed<T> {
    pub value: T,
    pub key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeQualityRow {
    pub layer: usize,
    pub explained_variance: f64,
    pub mean_l0: f64,
    pub mse: f64,
}

pub struct Latents {
    pub target: Entity,
    pub selection: Selection,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Pipeline {
        Pipeline { config }
    }

    fn out(&self) -> &Path {
        &self.config.out
    }

    fn stage_dir(&self, name: &'static str, sub: Option<&str>, key: String) -> StageDir {
        let mut dir = self.out().join(name);
        if let Some(s) = sub {
            dir = dir.join(s);
        }
        StageDir { name, dir, key }
    }

    pub fn world(&self) -> Result<Keyed<World>> {
        let key = content_key("world", &[&self.config.section_text(&["world."])]);
        let st = self.stage_dir("world", None, key);
        let path = st.path("world.txt");
        if st.is_current() {
            let world = World::from_text(&read_file(&path)?).stage(st.name)?;
            return Ok(Keyed { value: world, key: st.key });
        }
        info!("generating world");
        st.reset()?;
        let world = stages::build_world(&self.config.world).stage(st.name)?;
        write_file(&path, &world.to_text())?;
        write_file(&st.path("dataset.txt"), &world.dataset().to_text(world.seed))?;
        st.commit()?;
        Ok(Keyed { value: world, key: st.key })
    }

    pub fn model(&self) -> Result<(World, Keyed<ModelParams>)> {
        let world = self.world()?;
        let key = content_key("lm", &[&world.key, &self.config.section_text(&["lm."]), &self.seed_text()]);
        let st = self.stage_dir("lm", None, key);
        let path = st.path("model.lfck");
        if st.is_current() {
            let model = load_model(&path, st.name)?;
            return Ok((world.value, Keyed { value: model, key: st.key }));
        }
        info!("pretraining the language model");
        st.reset()?;
        let (model, log) = stages::pretrain_model(&world.value, &self.config).stage(st.name)?;
        save_model(&model, &path, st.name)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in log.epoch_loss.iter().enumerate() {
            let _ = writeln!(csv, "{},{l:.6}", i + 1);
        }
        write_file(&st.path("train_log.csv"), &csv)?;
        st.commit()?;
        Ok((world.value, Keyed { value: model, key: st.key }))
    }

    fn seed_text(&self) -> String {
        format!("seed = {}\n", self.config.seed)
    }

    pub fn saes(&self) -> Result<(World, Keyed<ModelParams>, Keyed<Vec<SaeParams>>, Vec<SaeQualityRow>)> {
        let (world, model) = self.model()?;
        let key = content_key("sae", &[&model.key, &self.config.section_text(&["sae."]), &self.seed_text()]);
        let st = self.stage_dir("sae", None, key);
        let path = st.path("saes.lfck");
        let qpath = st.path("quality.csv");
        if st.is_current() {
            let c = Container::load(&path).stage(st.name)?;
            let saes = (1..=model.value.dims.layers)
                .map(|l| SaeParams::from_container(&c, l))
                .collect::<latentforge_core::Result<Vec<_>>>()
                .stage(st.name)?;
            let rows = parse_quality(&read_file(&qpath)?, &qpath)?;
            return Ok((world, model, Keyed { value: saes, key: st.key }, rows));
        }
        info!("training SAEs");
        st.reset()?;
        let (saes, qualities) = stages::train_saes(&world, &model.value, &self.config).stage(st.name)?;
        let mut c = Container::new(model.value.dims);
        for s in &saes {
            s.add_to_container(&mut c);
        }
        c.save(&path).stage(st.name)?;
        let rows: Vec<SaeQualityRow> = qualities
            .iter()
            .enumerate()
            .map(|(i, q)| SaeQualityRow {
                layer: i + 1,
                explained_variance: q.explained_variance,
                mean_l0: q.mean_l0,
                mse: q.mse,
            })
            .collect();
        write_file(&qpath, &quality_csv(&rows))?;
        st.commit()?;
        Ok((world, model, Keyed { value: saes, key: st.key }, rows))
    }

    pub fn target(&self, world: &World) -> Result<Entity> {
        world.find_known(&self.config.target).copied().stage("target")
    }

    pub fn latents(&self) -> Result<LatentsBundle> {
        let (world, model, saes, quality) = self.saes()?;
        let target = self.target(&world)?;
        let key = content_key(
            "latents",
            &[
                &saes.key,
                &format!("target = {}\n", target.id),
                &self.config.section_text(&["unlearn.tau", "eval.relax_tau"]),
            ],
        );
        let st = self.stage_dir("latents", None, key);
        let path = st.path("latents.txt");
        let meta = st.path("selection.txt");
        let selection = if st.is_current() {
            let sets = RecognitionLatentSets::from_text(&read_file(&path)?).stage(st.name)?;
            let (relaxed, satisfied) = parse_selection_meta(&read_file(&meta)?, &meta)?;
            Selection {
                sets,
                relaxed,
                satisfied,
            }
        } else {
            info!("finding recognition latents");
            st.reset()?;
            let u = &self.config.unlearn;
            let sel = stages::find_latents(&world, &model.value, &saes.value, &target, u.tau, self.config.eval.relax_tau)
                .stage(st.name)?;
            write_file(&path, &sel.sets.to_text())?;
            write_file(
                &meta,
                &format!("tau {:?}\nrelaxed {}\nsatisfied {}\n", sel.sets.tau, sel.relaxed, sel.satisfied),
            )?;
            st.commit()?;
            sel
        };
        Ok(LatentsBundle {
            world,
            model,
            saes,
            quality,
            latents: Keyed {
                value: Latents { target, selection },
                key: st.key,
            },
        })
    }

    pub fn oracle(&self) -> Result<Keyed<ModelParams>> {
        let (world, _) = self.model()?;
        let world_key = content_key("world", &[&self.config.section_text(&["world."])]);
        let target = self.target(&world)?;
        let key = content_key(
            "oracle",
            &[&world_key, &self.config.section_text(&["lm."]), &self.seed_text(), &format!("target = {}\n", target.id)],
        );
        let st = self.stage_dir("oracle", None, key);
        let path = st.path("model.lfck");
        if st.is_current() {
            return Ok(Keyed {
                value: load_model(&path, st.name)?,
                key: st.key,
            });
        }
        info!("retraining the oracle without the target");
        st.reset()?;
        let oracle = stages::train_target_oracle(&world, &target, &self.config).stage(st.name)?;
        save_model(&oracle, &path, st.name)?;
        st.commit()?;
        Ok(Keyed { value: oracle, key: st.key })
    }

    pub fn unlearn_run(&self, spec: RunSpec) -> Result<(LatentsBundle, Keyed<CheckpointSeries>)> {
        let bundle = self.latents()?;
        let unlearn_text = self.config.section_text(&["unlearn."]);
        let unlearn_text: String = unlearn_text
            .lines()
            .filter(|l| !l.starts_with("unlearn.method") && !l.starts_with("unlearn.variant"))
            .map(|l| format!("{l}\n"))
            .collect();
        let key = content_key("unlearn", &[&bundle.latents.key, &unlearn_text, &spec.to_string(), &self.seed_text()]);
        let label = spec.label();
        let st = self.stage_dir("unlearn", Some(&label), key);
        if st.is_current() {
            let series = load_series(&st.dir).stage(st.name)?;
            return Ok((bundle, Keyed { value: series, key: st.key }));
        }
        info!("unlearning with {spec}");
        st.reset()?;
        let ctx = TargetContext::new(&bundle.world, bundle.latents.value.target).stage(st.name)?;
        let series = stages::run_unlearning(
            &bundle.model.value,
            &bundle.saes.value,
            &bundle.latents.value.selection,
            &ctx,
            &self.config.unlearn,
            spec,
            Halt::Never,
        )
        .stage(st.name)?;
        save_series(&series, &st.dir, spec)?;
        st.commit()?;
        Ok((bundle, Keyed { value: series, key: st.key }))
    }

    /// Measures every persisted checkpoint and stores the result as JSON.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let mut runs = Vec::new();
        let mut keys = Vec::new();
        for &spec in &self.config.runs {
            let (_, series) = self.unlearn_run(spec)?;
            keys.push(series.key.clone());
            runs.push((spec, series.value));
        }
        let oracle = if self.config.eval.oracle { Some(self.oracle()?) } else { None };
        let bundle = self.latents()?;
        let mut parts: Vec<&str> = vec![&bundle.latents.key];
        parts.extend(keys.iter().map(String::as_str));
        if let Some(o) = &oracle {
            parts.push(&o.key);
        }
        let eval_text = self.config.section_text(&["eval.", "unlearn.retain_tolerance", "unlearn.c"]);
        parts.push(&eval_text);
        let key = content_key("evaluate", &parts);
        let st = self.stage_dir("evaluate", None, key);
        let path = st.path("evaluation.json");
        if st.is_current() {
            let text = read_file(&path)?;
            return serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
                path,
                msg: e.to_string(),
            });
        }
        info!("evaluating checkpoints");
        st.reset()?;
        let eval = evaluate_runs(&self.config, &bundle, oracle.as_ref().map(|o| &o.value), &runs).stage(st.name)?;
        let text = serde_json::to_string_pretty(&eval).expect("evaluation serializes");
        write_file(&path, &text)?;
        st.commit()?;
        Ok(eval)
    }

    /// Loads a stored evaluation without recomputing anything.
    pub fn stored_evaluation(&self) -> Result<Evaluation> {
        let path = self.out().join("evaluate").join("evaluation.json");
        let text = read_file(&path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
            path,
            msg: e.to_string(),
        })
    }
}

pub struct LatentsBundle {
    pub world: World,
    pub model: Keyed<ModelParams>,
    pub saes: Keyed<Vec<SaeParams>>,
    pub quality: Vec<SaeQualityRow>,
    pub latents: Keyed<Latents>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub run: String,
    pub label: String,
    pub checkpoints: Vec<CheckpointMetrics>,
    pub choice: Choice,
    pub aborted: Option<String>,
    pub halted_at: Option<usize>,
    /// First epoch whose perplexity reached the collapse factor.
    pub collapse_epoch: Option<usize>,
}

impl RunEvaluation {
    pub fn selected(&self) -> &CheckpointMetrics {
        &self.checkpoints[self.choice.selected]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: String,
    pub seed: u64,
    pub target_index: usize,
    pub target_name: String,
    pub tau: f64,
    pub tau_relaxed: bool,
    pub latents_satisfied: bool,
    /// Per layer `(|S^k|, |S^u|)`.
    pub latent_counts: Vec<(usize, usize)>,
    pub sae_quality: Vec<SaeQualityRow>,
    pub orig: CheckpointMetrics,
    pub oracle: Option<CheckpointMetrics>,
    pub runs: Vec<RunEvaluation>,
}

fn evaluate_runs(
    cfg: &ExperimentConfig,
    bundle: &LatentsBundle,
    oracle: Option<&ModelParams>,
    runs: &[(RunSpec, CheckpointSeries)],
) -> latentforge_core::Result<Evaluation> {
    let world = &bundle.world;
    let target = bundle.latents.value.target;
    let selection = &bundle.latents.value.selection;
    let ctx = TargetContext::new(world, target)?;
    let r = Reference {
        orig: &bundle.model.value,
        saes: &bundle.saes.value,
        selection,
        oracle,
        seed: cfg.seed,
        c: cfg.unlearn.c,
    };
    let orig = stages::measure(&bundle.model.value, 0, &ctx, &r, &cfg.eval)?;
    let oracle_metrics = match oracle {
        Some(o) => Some(stages::measure(o, 0, &ctx, &r, &cfg.eval)?),
        None => None,
    };
    let mut out = Vec::new();
    for (spec, series) in runs {
        let checkpoints = series
            .snapshots
            .iter()
            .map(|s| stages::measure(&s.params, s.epoch, &ctx, &r, &cfg.eval))
            .collect::<latentforge_core::Result<Vec<_>>>()?;
        let choice = stages::choose(series, orig.scores.retain, cfg.unlearn.retain_tolerance)?;
        let limit = cfg.eval.collapse_factor * orig.perplexity;
        let collapse_epoch = checkpoints.iter().find(|m| !(m.perplexity < limit)).map(|m| m.epoch);
        out.push(RunEvaluation {
            run: spec.to_string(),
            label: spec.label(),
            checkpoints,
            choice,
            aborted: series.aborted.clone(),
            halted_at: series.halted_at,
            collapse_epoch,
        });
    }
    let sets = &selection.sets;
    Ok(Evaluation {
        // the output location is not part of the experiment
        config: cfg.to_text().lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect(),
        seed: cfg.seed,
        target_index: world.known().iter().position(|e| e.id == target.id).unwrap_or(target.id),
        target_name: world.name_text(&target),
        tau: sets.tau,
        tau_relaxed: selection.relaxed,
        latents_satisfied: selection.satisfied,
        latent_counts: (1..=sets.layers()).map(|l| (sets.known_at(l).len(), sets.unknown_at(l).len())).collect(),
        sae_quality: bundle.quality.clone(),
        orig,
        oracle: oracle_metrics,
        runs: out,
    })
}

fn quality_csv(rows: &[SaeQualityRow]) -> String {
    let mut s = String::from("layer,explained_variance,mean_l0,mse\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.layer, r.explained_variance, r.mean_l0, r.mse);
    }
    s
}

fn parse_quality(text: &str, path: &Path) -> Result<Vec<SaeQualityRow>> {
    let bad = |msg: String| PipelineError::Artifact {
        path: path.to_path_buf(),
        msg,
    };
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("bad quality row {line:?}")));
            }
            let n = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            Ok(SaeQualityRow {
                layer: f[0].parse().map_err(|_| bad(format!("bad layer {:?}", f[0])))?,
                explained_variance: n(f[1])?,
                mean_l0: n(f[2])?,
                mse: n(f[3])?,
            })
        })
        .collect()
}

fn parse_selection_meta(text: &str, path: &Path) -> Result<(bool, bool)> {
    let mut relaxed = None;
    let mut satisfied = None;
    for line in text.lines() {
        match line.split_once(' ') {
            Some(("relaxed", v)) => relaxed = v.parse().ok(),
            Some(("satisfied", v)) => satisfied = v.parse().ok(),
            _ => {}
        }
    }
    relaxed.zip(satisfied).ok_or_else(|| PipelineError::Artifact {
        path: path.to_path_buf(),
        msg: "missing relaxed/satisfied flags".into(),
    })
}

fn snapshot_file(epoch: usize) -> String {
    format!("epoch_{epoch:04}.lfck")
}

/// Writes one `LFCK` file per snapshot plus `series.txt`, the manifest.
pub fn save_series(series: &CheckpointSeries, dir: &Path, spec: RunSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut m = format!("series v1\nrun {spec}\n");
    for s in &series.snapshots {
        save_model(&s.params, &dir.join(snapshot_file(s.epoch)), "unlearn")?;
        let _ = writeln!(m, "snapshot {} forget {:?} retain {:?}", s.epoch, s.forget, s.retain);
    }
    for l in &series.log {
        let layer = l.layer.map_or("-".to_string(), |x| x.to_string());
        let _ = writeln!(m, "epoch {} lr {:?} loss {:?} layer {layer}", l.epoch, l.lr, l.loss);
    }
    if let Some(h) = series.halted_at {
        let _ = writeln!(m, "halted_at {h}");
    }
    if let Some(a) = &series.aborted {
        let _ = writeln!(m, "aborted {}", a.replace('\n', " "));
    }
    write_file(&dir.join("series.txt"), &m)
}

pub fn load_series(dir: &Path) -> latentforge_core::Result<CheckpointSeries> {
    use latentforge_core::Error;
    let text = fs::read_to_string(dir.join("series.txt"))?;
    let bad = |line: &str| Error::Format {
        what: "checkpoint series manifest",
        detail: format!("bad line {line:?}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some("series v1") {
        return Err(bad("header"));
    }
    let mut series = CheckpointSeries::default();
    for line in lines {
        let f: Vec<&str> = line.split(' ').collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
        match f.as_slice() {
            ["run", ..] => {}
            ["snapshot", e, "forget", fg, "retain", rt] => {
                let epoch = int(e)?;
                let params = ModelParams::from_container(&Container::load(&dir.join(snapshot_file(epoch)))?)?;
                series.snapshots.push(Snapshot {
                    epoch,
                    params,
                    forget: num(fg)?,
                    retain: num(rt)?,
                });
            }
            ["epoch", e, "lr", lr, "loss", loss, "layer", layer] => series.log.push(EpochLog {
                epoch: int(e)?,
                lr: num(lr)?,
                loss: num(loss)?,
                layer: if *layer == "-" { None } else { Some(int(layer)?) },
            }),
            ["halted_at", h] => series.halted_at = Some(int(h)?),
            ["aborted", ..] => series.aborted = Some(line["aborted ".len()..].to_string()),
            _ => return Err(bad(line)),
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_depend_on_every_part() {
        let a = content_key("lm", &["x", "y"]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, content_key("lm", &["x", "y"]));
        assert_ne!(a, content_key("lm", &["x", "z"]));
        assert_ne!(a, content_key("sae", &["x", "y"]));
        assert_ne!(content_key("lm", &["xy"]), content_key("lm", &["x", "y"]));
    }

    #[test]
    fn quality_rows_round_trip() {
        let rows = vec![SaeQualityRow {
            layer: 2,
            explained_variance: 0.987654321,
            mean_l0: 17.25,
            mse: 1e-7,
        }];
        assert_eq!(parse_quality(&quality_csv(&rows), Path::new("q")).unwrap(), rows);
    }
}
