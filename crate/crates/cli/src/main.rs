use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentforge::config::{parse_config, ExperimentConfig, RunSpec};
use latentforge::pipeline::{Pipeline, PipelineError};
use latentforge::report::write_report;
use latentforge_core::unlearn::Variant;

#[derive(Parser)]
#[command(name = "latentforge", version, about = "Entity unlearning through SAE recognition latents on a toy transformer")]
struct Cli {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed and every seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts runs to one method, e.g. `proposal`, `ga` or `npo:sentence`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Known entity to forget, by index or by name.
    #[arg(long, global = true)]
    target: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenWorld,
    Pretrain,
    TrainSae,
    FindLatents,
    Unlearn,
    Evaluate,
    Oracle,
    /// Every stage, then the report files.
    RunAll,
    /// Rewrites report files from the stored evaluation.
    Report,
}

enum Failure {
    Usage(String),
    Stage(PipelineError),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Failure {
        Failure::Stage(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let parsed = parse_config(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    let mut cfg = parsed.config;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = &cli.target {
        cfg.target = t.clone();
    }
    if let Some(m) = &cli.method {
        let spec = RunSpec::parse(m, Variant::Sentence).ok_or_else(|| Failure::Usage(format!("unknown method `{m}`")))?;
        cfg.runs = vec![spec];
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("LATENTFORGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("LATENTFORGE_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let out = cfg.out.clone();
    let p = Pipeline::new(cfg);
    match cli.command {
        Command::GenWorld => {
            let w = p.world()?.value;
            println!(
                "world: {} known, {} unknown, {} tokens",
                w.known().len(),
                w.unknown().len(),
                w.vocab.len()
            );
        }
        Command::Pretrain => {
            p.model()?;
            println!("model: {}", out.join("lm").join("model.lfck").display());
        }
        Command::TrainSae => {
            for q in p.saes()?.3 {
                println!("layer {}: explained variance {:.4}, mean L0 {:.2}", q.layer, q.explained_variance, q.mean_l0);
            }
        }
        Command::FindLatents => {
            let b = p.latents()?;
            let s = &b.latents.value.selection;
            println!("tau {}{}", s.sets.tau, if s.relaxed { " (relaxed)" } else { "" });
            for l in 1..=s.sets.layers() {
                println!("layer {l}: {} known, {} unknown", s.sets.known_at(l).len(), s.sets.unknown_at(l).len());
            }
        }
        Command::Unlearn => {
            for &spec in &p.config.runs {
                let (_, series) = p.unlearn_run(spec)?;
                let last = series.value.snapshots.last();
                println!(
                    "{spec}: {} checkpoints, final forget {} retain {}",
                    series.value.snapshots.len(),
                    last.map_or("-".into(), |s| format!("{:.4}", s.forget)),
                    last.map_or("-".into(), |s| format!("{:.4}", s.retain)),
                );
            }
        }
        Command::Oracle => {
            p.oracle()?;
            println!("oracle: {}", out.join("oracle").join("model.lfck").display());
        }
        Command::Evaluate => {
            let e = p.evaluate()?;
            println!("evaluated {} runs", e.runs.len());
        }
        Command::RunAll => {
            let e = p.evaluate()?;
            write_report(&e, &out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
        }
        Command::Report => {
            let e = p.stored_evaluation()?;
            for f in write_report(&e, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
