use latentforge::config::{parse_config, ConfigError, ExperimentConfig};
use latentforge_core::unlearn::lr_schedule;

#[test]
fn empty_file_gives_the_documented_defaults() {
    let c = parse_config("").unwrap().config;
    assert_eq!(c, ExperimentConfig::default());
    let u = &c.unlearn;
    assert_eq!(u.c, 1.0);
    assert_eq!(u.tau, 0.4);
    assert_eq!((u.epochs, u.steps_per_epoch, u.eval_every), (200, 5, 10));
}

#[test]
fn canonical_text_round_trips() {
    let mut c = ExperimentConfig::default();
    c.set_seed(17);
    c.unlearn.lr_min = 3.3e-6;
    c.unlearn.rmu_layer = Some(3);
    c.target = "eli wren".into();
    let back = parse_config(&c.to_text()).unwrap();
    assert!(back.warnings.is_empty());
    assert_eq!(back.config, c);
    let u = &back.config.unlearn;
    assert_eq!(lr_schedule(0, u.epochs, u.lr_min, u.lr_max).unwrap().to_bits(), u.lr_min.to_bits());
    assert_eq!(lr_schedule(u.epochs, u.epochs, u.lr_min, u.lr_max).unwrap().to_bits(), u.lr_max.to_bits());
}

#[test]
fn invalid_values_are_reported() {
    assert!(matches!(parse_config("unlearn.c = -1\n"), Err(ConfigError::Invalid(_))));
    assert!(matches!(parse_config("\n\nnope = 1\n"), Err(ConfigError::UnknownKey { line: 3, .. })));
    assert!(matches!(parse_config("seed 4\n"), Err(ConfigError::Syntax { line: 1, .. })));
    let dup = parse_config("unlearn.c = 2\nunlearn.c = 3\n").unwrap();
    assert_eq!(dup.config.unlearn.c, 3.0);
    assert_eq!(dup.warnings.len(), 1);
}
