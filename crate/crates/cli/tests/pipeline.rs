use std::fs;
use std::path::Path;
use std::time::SystemTime;

use latentforge::config::{parse_config, ExperimentConfig};
use latentforge::pipeline::Pipeline;
use latentforge::report::{parse_report, report_csv, write_report};

const SMALL: &str = "\
world.known = 6
world.unknown = 6
world.facts = 1
lm.epochs = 30
lm.d = 16
lm.layers = 2
sae.epochs = 8
sae.expansion = 2
unlearn.epochs = 4
unlearn.eval_every = 2
unlearn.tau = 0.2
eval.attribute_k = 10
run.methods = proposal, ga:sentence
";

fn small(out: &Path) -> ExperimentConfig {
    let mut c = parse_config(SMALL).unwrap().config;
    c.out = out.to_path_buf();
    c
}

fn mtime(p: &Path) -> SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn cached_rerun_is_byte_identical_and_recomputes_only_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let eval = Pipeline::new(cfg.clone()).evaluate().unwrap();
    write_report(&eval, dir.path()).unwrap();
    let report = fs::read(dir.path().join("report.csv")).unwrap();
    let summary = fs::read(dir.path().join("summary.txt")).unwrap();
    let model = dir.path().join("lm/model.lfck");
    let series = dir.path().join("unlearn/proposal/series.txt");
    let (t_model, t_series) = (mtime(&model), mtime(&series));

    let again = Pipeline::new(cfg.clone()).evaluate().unwrap();
    assert_eq!(again, eval);
    write_report(&again, dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("report.csv")).unwrap(), report);
    assert_eq!(fs::read(dir.path().join("summary.txt")).unwrap(), summary);
    assert_eq!(mtime(&series), t_series);

    let mut changed = cfg.clone();
    changed.unlearn.c = 2.0;
    let third = Pipeline::new(changed).evaluate().unwrap();
    assert_eq!(mtime(&model), t_model);
    assert_ne!(mtime(&series), t_series);
    assert_eq!(third.orig.scores, eval.orig.scores);

    // a fresh directory reproduces the first report exactly
    let other = tempfile::tempdir().unwrap();
    let fresh = Pipeline::new(small(other.path())).evaluate().unwrap();
    assert_eq!(report_csv(&fresh).into_bytes(), report);
}

#[test]
fn report_has_one_row_per_checkpoint_metric_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let eval = Pipeline::new(small(dir.path())).evaluate().unwrap();
    let files = write_report(&eval, dir.path()).unwrap();
    for name in ["report.csv", "summary.txt", "summary.json", "attribute_rate.csv", "latent_freq.csv", "manifest.txt"] {
        assert!(files.iter().any(|f| f.ends_with(name)), "{name} missing");
    }
    let rows = parse_report(&fs::read_to_string(dir.path().join("report.csv")).unwrap()).unwrap();
    let layers = eval.orig.attribute_rate.len();
    let hinge_layers = eval.orig.hinge.iter().filter(|h| h.is_some()).count();
    let per_checkpoint = 8 + usize::from(eval.oracle.is_some()) + 4 * layers + hinge_layers;
    let checkpoints = 1 + usize::from(eval.oracle.is_some()) + eval.runs.iter().map(|r| r.checkpoints.len()).sum::<usize>();
    assert_eq!(rows.len(), checkpoints * per_checkpoint);
    let forget = rows.iter().find(|r| r.run == "orig" && r.metric == "forget").unwrap();
    assert_eq!(forget.value, eval.orig.scores.forget);

    for (name, cols) in [("attribute_rate.csv", 4), ("latent_freq.csv", 5)] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), cols);
        let body: Vec<&str> = lines.collect();
        assert_eq!(body.len(), checkpoints * layers);
        for line in body {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f.len(), cols);
            f[1..].iter().for_each(|v| {
                v.parse::<f64>().unwrap();
            });
        }
    }

    // the summary lists the reference rows, then runs by ascending forget
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let entries = summary["entries"].as_array().unwrap();
    assert_eq!(entries[0]["run"], "orig");
    let forgets: Vec<f64> = entries
        .iter()
        .filter(|e| e["run"] != "orig" && e["run"] != "oracle")
        .map(|e| e["forget"].as_f64().unwrap())
        .collect();
    assert_eq!(forgets.len(), eval.runs.len());
    assert!(forgets.windows(2).all(|w| w[0] <= w[1]));
    let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("unlearn.c = 1.0"));
    assert!(!manifest.contains(dir.path().to_str().unwrap()));
}

#[test]
fn malformed_report_is_rejected() {
    assert!(parse_report("").is_err());
    assert!(parse_report("# latentforge report v1\nrun,method,variant,epoch,metric,value\na,b,c,x,m,1\n").is_err());
    let ok = parse_report("# latentforge report v1\nrun,method,variant,epoch,metric,value\nga:sentence,ga,sentence,10,forget,0.5\n")
        .unwrap();
    assert_eq!(ok[0].epoch, 10);
}
