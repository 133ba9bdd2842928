use std::fs;

use uniquery::checkpoint::{load_checkpoint, save_checkpoint};
use uniquery::memory::sample_pixels;
use uniquery::scene::{generate_scene, SceneSpec, SyntheticScene};
use uniquery::segmenter::{forward, ModelConfig};
use uniquery::trainer::{
    derive_rng, train, train_step, OptimizerKind, TrainConfig, TrainState, FINAL_CHECKPOINT, METRICS_LOG,
};
use uniquery::Error;

fn scenes(seeds: std::ops::Range<u64>) -> Vec<SyntheticScene> {
    let spec = SceneSpec {
        image_size: 32,
        class_count: 2,
        instances_per_scene: [1, 2],
        min_instance_area: 16,
        occlusion: false,
    };
    seeds.map(|s| generate_scene(s, &spec).unwrap()).collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        memory_capacity: 500,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn baseline(mut cfg: TrainConfig) -> TrainConfig {
    cfg.inter = false;
    cfg.equi = false;
    cfg
}

#[test]
fn baseline_step_reports_zero_for_disabled_terms() {
    let model = ModelConfig::tiny();
    let cfg = baseline(small_cfg());
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    let data = scenes(0..4);
    for batch in data.chunks(2) {
        let r = train_step(batch, &mut state, &cfg).unwrap();
        assert_eq!(r.inter_mask, 0.0);
        assert_eq!(r.equi, 0.0);
        assert_eq!(r.memory_pixels, 0);
        assert!((r.total - (r.cls + r.intra_mask)).abs() < 1e-6);
    }
    assert_eq!(state.memory.len(), 0);
    assert_eq!(state.step, 2);
}

#[test]
fn same_state_same_batch_same_report() {
    let model = ModelConfig::tiny();
    let cfg = small_cfg();
    let data = scenes(0..6);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    train_step(&data[0..2], &mut state, &cfg).unwrap();
    train_step(&data[2..4], &mut state, &cfg).unwrap();
    let (mut a, mut b) = (state.clone(), state.clone());
    let ra = train_step(&data[4..6], &mut a, &cfg).unwrap();
    let rb = train_step(&data[4..6], &mut b, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert!(ra.inter_mask > 0.0 && ra.equi > 0.0);
}

#[test]
fn overfitting_one_scene_reduces_intra_mask_loss() {
    let model = ModelConfig::tiny();
    let cfg = baseline(small_cfg());
    let scene = scenes(3..4);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    let first = train_step(&scene, &mut state, &cfg).unwrap().intra_mask;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&scene, &mut state, &cfg).unwrap().intra_mask;
    }
    assert!(last < first, "intra {first} -> {last}");
}

#[test]
fn pushing_the_batch_first_leaves_its_inter_loss_unchanged() {
    let model = ModelConfig::tiny();
    let cfg = small_cfg();
    let data = scenes(0..6);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    train_step(&data[0..2], &mut state, &cfg).unwrap();
    train_step(&data[2..4], &mut state, &cfg).unwrap();
    let batch = &data[4..6];

    let mut polluted = state.clone();
    let mut rng = derive_rng(&[99]);
    for s in batch {
        let out = forward(&s.image, &polluted.params, &s.scene_id).unwrap();
        let px = sample_pixels(&out.features, &s.masks, &s.labels, &s.scene_id, &cfg.sampling, &mut rng, 2).unwrap();
        polluted.memory.push(px).unwrap();
    }
    assert!(polluted.memory.len() > state.memory.len());
    let clean = train_step(batch, &mut state, &cfg).unwrap();
    let dirty = train_step(batch, &mut polluted, &cfg).unwrap();
    assert_eq!(clean.inter_mask, dirty.inter_mask);
    assert_eq!(clean.memory_pixels, dirty.memory_pixels);
}

#[test]
fn parameters_stay_finite_over_long_fuzz_runs() {
    let model = ModelConfig::tiny();
    let data = scenes(0..10);
    for seed in 0..5u64 {
        let cfg = TrainConfig {
            seed,
            ..small_cfg()
        };
        let mut state = TrainState::<f32>::new(&ModelConfig { init_seed: seed, ..model.clone() }, &cfg).unwrap();
        for step in 0..500usize {
            let i = (step * 2) % data.len();
            let r = train_step(&data[i..i + 2], &mut state, &cfg).unwrap();
            assert!(r.all_finite());
            assert!(state.params.all_finite(), "seed {seed} step {step}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    let mut cfg = small_cfg();
    cfg.optimizer.kind = OptimizerKind::Adam;
    let data = scenes(0..4);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    for b in data.chunks(2) {
        train_step(b, &mut state, &cfg).unwrap();
    }
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &state, &model, &cfg).unwrap();
    let (back, saved) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back, state);
    assert_eq!(saved.model, model);
    assert_eq!(saved.train, cfg);
    assert!(state.memory.len() > 0);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Integrity { .. })));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    fs::write(&path, bad).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Integrity { .. })));
}

#[test]
fn resumed_step_matches_uninterrupted_step() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    let cfg = small_cfg();
    let data = scenes(0..6);
    let mut state = TrainState::<f32>::new(&model, &cfg).unwrap();
    train_step(&data[0..2], &mut state, &cfg).unwrap();
    train_step(&data[2..4], &mut state, &cfg).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &state, &model, &cfg).unwrap();
    let ra = train_step(&data[4..6], &mut state, &cfg).unwrap();
    let (mut resumed, _) = load_checkpoint::<f32>(&path).unwrap();
    let rb = train_step(&data[4..6], &mut resumed, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(state, resumed);
}

#[test]
fn interrupted_run_resumes_to_identical_logs() {
    let model = ModelConfig::tiny();
    let data = scenes(0..6);
    let eval = scenes(100..102);
    let full = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..small_cfg()
    };
    train(&data, &eval, &model, &cfg, full.path(), false).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    train(&data, &eval, &model, &first, split.path(), false).unwrap();
    let out = train(&data, &eval, &model, &cfg, split.path(), true).unwrap();
    assert_eq!(out.steps, 6);
    let a = fs::read(full.path().join(METRICS_LOG)).unwrap();
    let b = fs::read(split.path().join(METRICS_LOG)).unwrap();
    assert_eq!(a, b);
    let (sa, _) = load_checkpoint::<f32>(&full.path().join(FINAL_CHECKPOINT)).unwrap();
    let (sb, _) = load_checkpoint::<f32>(&split.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let out = train(&scenes(0..2), &[], &model, &cfg, dir.path(), false).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.final_checkpoint.exists() && out.best_checkpoint.exists());
    assert_eq!(fs::read_to_string(&out.metrics_log).unwrap(), "");
    let (state, _) = load_checkpoint::<f32>(&out.final_checkpoint).unwrap();
    assert_eq!(state, TrainState::<f32>::new(&model, &cfg).unwrap());
}

#[test]
fn deterministic_runs_write_identical_logs() {
    let model = ModelConfig::tiny();
    let data = scenes(0..4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_cfg();
    train(&data, &[], &model, &cfg, a.path(), false).unwrap();
    train(&data, &[], &model, &cfg, b.path(), false).unwrap();
    let la = fs::read_to_string(a.path().join(METRICS_LOG)).unwrap();
    assert_eq!(la, fs::read_to_string(b.path().join(METRICS_LOG)).unwrap());
    assert_eq!(la.lines().count(), 2);
    assert!(!la.contains("wall_time"));
}

#[test]
fn invalid_configs_are_rejected() {
    let model = ModelConfig::tiny();
    let data = scenes(0..2);
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..small_cfg() },
        TrainConfig { aug_only: true, equi: false, ..small_cfg() },
    ] {
        assert!(matches!(train(&data, &[], &model, &cfg, dir.path(), false), Err(Error::Config(_))));
    }
    let mut cfg = small_cfg();
    cfg.optimizer.lr = 0.0;
    assert!(cfg.validate().is_err());
}
