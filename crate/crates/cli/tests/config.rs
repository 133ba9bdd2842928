use std::path::Path;

use uniquery::memory::SamplingKind;
use uniquery::objectives::InterLossKind;
use uniquery::trainer::OptimizerKind;
use uniquery_cli::config::{Arm, RunConfig};
use uniquery_cli::error::CliError;

fn workspace_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn defaults_carry_the_published_hyperparameters() {
    let cfg = RunConfig::parse("", Path::new("empty.toml")).unwrap();
    let loss = &cfg.train.loss;
    assert_eq!(loss.focal_alpha, 0.1);
    assert_eq!(loss.focal_gamma, 2.5);
    assert_eq!(loss.lambda_equi, 3.0);
    assert_eq!(loss.inter_loss_kind, InterLossKind::Focal);
    assert_eq!(cfg.train.sampling.kind, SamplingKind::InstanceBalanced);
    assert_eq!(cfg.train.sampling.pixels_per_instance, 50);
    assert_eq!(cfg.train.optimizer.kind, OptimizerKind::Sgd);
    assert_eq!(cfg.train.optimizer.lr, 0.01);
    assert_eq!(cfg.train.batch_size, 8);
    assert_eq!(cfg.train.memory_capacity, 10_000);
}

#[test]
fn memory_capacity_accepts_one_hundred_thousand() {
    let cfg = RunConfig::parse("[train]\nmemory_capacity = 100000\n", Path::new("x.toml")).unwrap();
    assert_eq!(cfg.train.memory_capacity, 100_000);
}

#[test]
fn shipped_base_config_equals_the_defaults() {
    let cfg = RunConfig::load(&workspace_file("configs/base.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn shipped_ablation_config_loads() {
    let cfg = RunConfig::load(&workspace_file("configs/ablation.toml")).unwrap();
    assert_eq!(cfg.ablation.seeds, vec![0, 1, 2]);
    assert_eq!(cfg.ablation.arms, Arm::ALL.to_vec());
    assert_eq!((cfg.data.train_count, cfg.data.eval_count), (500, 100));
    assert_eq!((cfg.scene.image_size, cfg.train.epochs), (128, 20));
    assert_eq!(cfg.train.loss, RunConfig::default().train.loss);
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    for (text, key) in [
        ("[train]\nepoch = 3\n", "epoch"),
        ("[bogus]\n", "bogus"),
        ("[train.loss]\nalpha = 0.2\n", "alpha"),
    ] {
        let err = RunConfig::parse(text, Path::new("bad.toml")).unwrap_err();
        assert!(matches!(err, CliError::Config { .. }));
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains(key), "{err} should name {key}");
    }
}

#[test]
fn semantic_errors_are_config_errors() {
    for text in [
        "[train]\nbatch_size = 0\n",
        "[train.optimizer]\nlr = -1.0\n",
        "[scene]\nclass_count = 3\n",
        "[model]\nnum_queries = 4\n",
        "[data]\neval_seed = 10\n",
        "[train.transforms]\ncrop_ratio = [0.5, 1.0]\n",
    ] {
        let err = RunConfig::parse(text, Path::new("bad.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 1, "{text}: {err}");
    }
}

#[test]
fn round_trips_through_toml() {
    let cfg = RunConfig::default();
    let back = RunConfig::parse(&cfg.to_toml(), Path::new("rt.toml")).unwrap();
    assert_eq!(back, cfg);
}
