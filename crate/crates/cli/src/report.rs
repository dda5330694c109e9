//! Report files written from an [`Evaluation`].
//!
//! `report.csv` is long-form, one metric per row, and is the file other
//! tools should consume. Everything else is derived from the same data.
//! No timings or absolute paths are written, so identical runs produce
//! byte-identical reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::pipeline::{write_file, Evaluation, PipelineError, Result, RunEvaluation};
use crate::stages::CheckpointMetrics;

pub const REPORT_HEADER: &str = "# latentforge report v1";
const COLUMNS: &str = "run,method,variant,epoch,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub variant: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

fn split_run(run: &str) -> (String, String) {
    match run.split_once(':') {
        Some((m, v)) => (m.to_string(), v.to_string()),
        None => (run.to_string(), "-".to_string()),
    }
}

fn metric_rows(run: &str, m: &CheckpointMetrics) -> Vec<ReportRow> {
    let (method, variant) = split_run(run);
    let mut named: Vec<(String, f64)> = vec![
        ("forget".into(), m.scores.forget),
        ("retain".into(), m.scores.retain),
        ("forget_fb".into(), m.scores.forget_fb),
        ("forget_qa".into(), m.scores.forget_qa),
        ("forget_aa".into(), m.scores.forget_aa),
        ("retain_fb".into(), m.scores.retain_fb),
        ("retain_qa".into(), m.scores.retain_qa),
        ("perplexity".into(), m.perplexity),
    ];
    if let Some(tv) = m.oracle_tv {
        named.push(("oracle_tv".into(), tv));
    }
    for l in 0..m.attribute_rate.len() {
        let layer = l + 1;
        named.push((format!("attribute_rate_l{layer}"), m.attribute_rate[l]));
        named.push((format!("known_freq_l{layer}"), m.known_freq[l]));
        named.push((format!("unknown_freq_l{layer}"), m.unknown_freq[l]));
        named.push((format!("cosine_l{layer}"), m.substituted_cosine[l]));
        if let Some(h) = m.hinge[l] {
            named.push((format!("hinge_l{layer}"), h));
        }
    }
    named
        .into_iter()
        .map(|(metric, value)| ReportRow {
            run: run.to_string(),
            method: method.clone(),
            variant: variant.clone(),
            epoch: m.epoch,
            metric,
            value,
        })
        .collect()
}

pub fn report_rows(eval: &Evaluation) -> Vec<ReportRow> {
    let mut rows = metric_rows("orig", &eval.orig);
    if let Some(o) = &eval.oracle {
        rows.extend(metric_rows("oracle", o));
    }
    for r in &eval.runs {
        for c in &r.checkpoints {
            rows.extend(metric_rows(&r.run, c));
        }
    }
    rows
}

pub fn report_csv(eval: &Evaluation) -> String {
    let mut s = format!("{REPORT_HEADER}\n{COLUMNS}\n");
    for r in report_rows(eval) {
        let _ = writeln!(s, "{},{},{},{},{},{:?}", r.run, r.method, r.variant, r.epoch, r.metric, r.value);
    }
    s
}

pub fn parse_report(text: &str) -> std::result::Result<Vec<ReportRow>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, REPORT_HEADER)) => {}
        other => return Err(format!("expected `{REPORT_HEADER}`, found {:?}", other.map(|o| o.1))),
    }
    match lines.next() {
        Some((_, COLUMNS)) => {}
        other => return Err(format!("expected column line, found {:?}", other.map(|o| o.1))),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let [run, method, variant, epoch, metric, value] = f.as_slice() else {
                return Err(format!("line {}: expected 6 fields", i + 1));
            };
            Ok(ReportRow {
                run: run.to_string(),
                method: method.to_string(),
                variant: variant.to_string(),
                epoch: epoch.parse().map_err(|_| format!("line {}: bad epoch", i + 1))?,
                metric: metric.to_string(),
                value: value.parse().map_err(|_| format!("line {}: bad value", i + 1))?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct SummaryEntry<'a> {
    run: &'a str,
    epoch: usize,
    forget: f64,
    retain: f64,
    perplexity: f64,
    deep_attribute_rate: f64,
    deep_cosine: f64,
    oracle_tv: Option<f64>,
    flagged: bool,
    collapse_epoch: Option<usize>,
    aborted: Option<&'a str>,
    forget_zero_epoch: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    seed: u64,
    target: &'a str,
    tau: f64,
    tau_relaxed: bool,
    latents_satisfied: bool,
    entries: Vec<SummaryEntry<'a>>,
}

fn entry<'a>(run: &'a str, m: &CheckpointMetrics, r: Option<&'a RunEvaluation>) -> SummaryEntry<'a> {
    SummaryEntry {
        run,
        epoch: m.epoch,
        forget: m.scores.forget,
        retain: m.scores.retain,
        perplexity: m.perplexity,
        deep_attribute_rate: m.deep_attribute_rate(),
        deep_cosine: m.deep_cosine(),
        oracle_tv: m.oracle_tv,
        flagged: r.is_some_and(|r| r.choice.flagged),
        collapse_epoch: r.and_then(|r| r.collapse_epoch),
        aborted: r.and_then(|r| r.aborted.as_deref()),
        forget_zero_epoch: r.map(|r| r.checkpoints[r.choice.forget_zero].epoch),
    }
}

/// Reference rows first, then the early-stopped checkpoint of each run by
/// ascending forget score.
fn summary(eval: &Evaluation) -> Summary<'_> {
    let mut entries = vec![entry("orig", &eval.orig, None)];
    if let Some(o) = &eval.oracle {
        entries.push(entry("oracle", o, None));
    }
    let mut runs: Vec<SummaryEntry> = eval.runs.iter().map(|r| entry(&r.run, r.selected(), Some(r))).collect();
    runs.sort_by(|a, b| a.forget.total_cmp(&b.forget).then_with(|| a.run.cmp(b.run)));
    entries.extend(runs);
    Summary {
        seed: eval.seed,
        target: &eval.target_name,
        tau: eval.tau,
        tau_relaxed: eval.tau_relaxed,
        latents_satisfied: eval.latents_satisfied,
        entries,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn summary_text(eval: &Evaluation) -> String {
    let s = summary(eval);
    let mut out = format!(
        "target {} (known #{}), seed {}, tau {}{}\n",
        s.target,
        eval.target_index,
        s.seed,
        s.tau,
        if s.tau_relaxed { " (relaxed)" } else { "" }
    );
    if !s.latents_satisfied {
        out.push_str("warning: no layer >= 2 has both known and unknown recognition latents\n");
    }
    let _ = writeln!(
        out,
        "\n{:<18} {:>5} {:>7} {:>7} {:>10} {:>9} {:>8} {:>9}  notes",
        "run", "epoch", "forget", "retain", "ppl", "attr@deep", "cos@deep", "oracle_tv"
    );
    for e in &s.entries {
        let mut notes = Vec::new();
        if e.flagged {
            notes.push("retain budget broken at the first checkpoint".to_string());
        }
        if let Some(c) = e.collapse_epoch {
            notes.push(format!("perplexity collapse from epoch {c}"));
        }
        if let Some(a) = e.aborted {
            notes.push(format!("aborted: {a}"));
        }
        let _ = writeln!(
            out,
            "{:<18} {:>5} {:>7.4} {:>7.4} {:>10.3} {:>9.4} {:>8.4} {:>9}  {}",
            e.run,
            e.epoch,
            e.forget,
            e.retain,
            e.perplexity,
            e.deep_attribute_rate,
            e.deep_cosine,
            opt(e.oracle_tv),
            notes.join("; ")
        );
    }
    out.push_str("\nlayer  known_latents  unknown_latents  sae_ev   sae_l0\n");
    for (i, (k, u)) in eval.latent_counts.iter().enumerate() {
        let q = eval.sae_quality.iter().find(|q| q.layer == i + 1);
        let _ = writeln!(
            out,
            "{:<6} {:>13} {:>16}  {:>7}  {:>6}",
            i + 1,
            k,
            u,
            q.map_or("-".into(), |q| format!("{:.4}", q.explained_variance)),
            q.map_or("-".into(), |q| format!("{:.2}", q.mean_l0)),
        );
    }
    out
}

fn per_layer_csv(eval: &Evaluation, header: &str, cols: impl Fn(&CheckpointMetrics, usize) -> String) -> String {
    let mut s = format!("{header}\n");
    let mut emit = |run: &str, m: &CheckpointMetrics| {
        for l in 0..m.attribute_rate.len() {
            let _ = writeln!(s, "{run},{},{},{}", m.epoch, l + 1, cols(m, l));
        }
    };
    emit("orig", &eval.orig);
    if let Some(o) = &eval.oracle {
        emit("oracle", o);
    }
    for r in &eval.runs {
        for c in &r.checkpoints {
            emit(&r.run, c);
        }
    }
    s
}

/// Writes every report file into `dir` and returns their paths.
pub fn write_report(eval: &Evaluation, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let json = serde_json::to_string_pretty(&summary(eval)).expect("summary serializes");
    let files = [
        ("report.csv", report_csv(eval)),
        ("summary.txt", summary_text(eval)),
        ("summary.json", json + "\n"),
        (
            "attribute_rate.csv",
            per_layer_csv(eval, "run,epoch,layer,attribute_rate", |m, l| format!("{:?}", m.attribute_rate[l])),
        ),
        (
            "latent_freq.csv",
            per_layer_csv(eval, "run,epoch,layer,known_freq,unknown_freq", |m, l| {
                format!("{:?},{:?}", m.known_freq[l], m.unknown_freq[l])
            }),
        ),
    ];
    let mut written = Vec::new();
    let mut manifest = String::from("# latentforge manifest v1\n");
    for (name, body) in &files {
        let path = dir.join(name);
        write_file(&path, body)?;
        let _ = writeln!(manifest, "file {name} {} bytes", body.len());
        written.push(path);
    }
    manifest.push_str("\n# configuration\n");
    manifest.push_str(&eval.config);
    let path = dir.join("manifest.txt");
    write_file(&path, &manifest)?;
    written.push(path);
    Ok(written)
}
