//! Training loop: original branch, memory-backed inter-scene term,
//! transformed branch, optimiser update, memory push.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, APReport};
use crate::features::{FeatureMap, FeatureVar};
use crate::float::Float;
use crate::matching::{match_predictions, Assignment, MatchWeights};
use crate::memory::{
    sample_pixels, MemoryBank, MemorySnapshot, SamplingStrategy, DEFAULT_CAPACITY,
};
use crate::objectives::{
    classification_loss_var, equivariance_decode, inter_mask_loss, intra_mask_loss, matched_dice,
    total_objective, LossConfig, LossParts, LossReport,
};
use crate::scene::SyntheticScene;
use crate::segmenter::{
    create_queries_var, decode_masks_var, encode_var, extract_features_var, forward_var,
    image_tensor, softmax_rows, BoundParams, ForwardVars, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;
use crate::transform::{
    apply_to_image, apply_to_mask, sample_transform, TransformFamily, TransformSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

/// How the transformed branch is matched to its targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquiMatching {
    /// Own matching on the transformed predictions.
    Independent,
    /// Reuse the original branch's assignment.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub sampling: SamplingStrategy,
    pub transforms: TransformFamily,
    pub memory_capacity: usize,
    /// Inter-scene term with the pixel memory.
    pub inter: bool,
    /// Transformed-branch term.
    pub equi: bool,
    /// Decode the transformed branch on features of the transformed image
    /// (plain augmentation) instead of the transformed original features.
    pub aug_only: bool,
    pub equi_matching: EquiMatching,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Omit wall-clock fields from logs so reruns are bitwise identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            sampling: SamplingStrategy::default(),
            transforms: TransformFamily::default(),
            memory_capacity: DEFAULT_CAPACITY,
            inter: true,
            equi: true,
            aug_only: false,
            equi_matching: EquiMatching::Independent,
            eval_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr must be > 0");
        }
        if !(self.optimizer.grad_clip >= 0.0) {
            return bad("optimizer.grad_clip must be >= 0");
        }
        if self.memory_capacity == 0 {
            return bad("memory_capacity must be >= 1");
        }
        if self.aug_only && !self.equi {
            return bad("aug_only replaces the equivariance term and needs equi = true");
        }
        self.loss.validate()?;
        self.sampling
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.transforms
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    /// SGD velocity or Adam first moment, per parameter tensor.
    pub first_moment: Vec<Vec<T>>,
    /// Adam second moment (empty for SGD).
    pub second_moment: Vec<Vec<T>>,
    pub memory: MemoryBank<T>,
    pub step: u64,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
}

impl<T: Float> TrainState<T> {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(model)?;
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Ok(TrainState {
            second_moment: if cfg.optimizer.kind == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            first_moment: zeros,
            memory: MemoryBank::new(cfg.memory_capacity, model.feature_dim)?,
            params,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }
}

const TAG_STEP: u64 = 0x5354_4550;
const TAG_SHUFFLE: u64 = 0x5348_5546;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for a tuple of counters.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts
        .iter()
        .fold(0u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero<T: Float>(graph: &mut Graph<T>) -> Result<Var> {
    graph.weighted_sum(&[])
}

fn sigmoid_tensor<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
}

/// Loss graph of one scene.
pub struct SceneObjective {
    pub total: Var,
    pub report: LossReport,
    pub forward: ForwardVars,
    pub assignment: Assignment,
}

/// Build every loss term of one scene on `graph`. `transform` is the
/// sampled group element for the transformed branch (ignored when the term
/// is disabled); `memory` the detached snapshot for the inter term.
#[allow(clippy::too_many_arguments)]
pub fn scene_objective<T: Float>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    scene: &SyntheticScene,
    memory: Option<&MemorySnapshot<T>>,
    transform: Option<&TransformSpec>,
    cfg: &TrainConfig,
) -> Result<SceneObjective> {
    let model = &params.config;
    let weights = MatchWeights {
        w_cls: cfg.loss.w_cls,
        w_dice: cfg.loss.w_dice,
    };
    let eps = cfg.loss.dice_eps;
    let image = graph.constant(image_tensor(&scene.image));
    let fwd = forward_var(graph, model, bound, image)?;
    finite_outputs(graph, &[fwd.mask_logits, fwd.queries.class_logits])?;
    let assignment = match_predictions(
        &sigmoid_tensor(graph.value(fwd.mask_logits)),
        &softmax_rows(graph.value(fwd.queries.class_logits)),
        &scene.masks,
        &scene.labels,
        weights,
        eps,
    )?;
    let cls = classification_loss_var(graph, fwd.queries.class_logits, &assignment, &scene.labels)?;
    let intra = intra_mask_loss(graph, fwd.mask_logits, &assignment, &scene.masks, eps)?;

    let (inter, memory_pixels) = match memory {
        Some(snap) if cfg.inter => {
            inter_mask_loss(graph, fwd.queries.filters, &scene.scene_id, snap, &cfg.loss)?
        }
        _ => (zero(graph)?, 0),
    };

    let equi = match transform {
        Some(g) if cfg.equi => {
            let image_g = graph.constant(image_tensor(&apply_to_image(g, &scene.image)?));
            let (logits, targets, class_logits) = if cfg.aug_only {
                let (fm_g, low_g) = extract_features_var(graph, model, bound, image_g)?;
                let q = create_queries_var(graph, model, bound, low_g)?;
                let logits = decode_masks_var(graph, q.filters, fm_g)?;
                let targets = scene
                    .masks
                    .iter()
                    .map(|m| apply_to_mask(g, m))
                    .collect::<Result<Vec<_>>>()?;
                (logits, targets, q.class_logits)
            } else {
                let low_g = encode_var(graph, bound, image_g)?;
                let q = create_queries_var(graph, model, bound, low_g)?;
                let branch = equivariance_decode(graph, q.filters, fwd.features, g, &scene.masks)?;
                (branch.mask_logits, branch.targets, q.class_logits)
            };
            finite_outputs(graph, &[logits, class_logits])?;
            let assign_g = match cfg.equi_matching {
                EquiMatching::Shared => assignment.clone(),
                EquiMatching::Independent => match_predictions(
                    &sigmoid_tensor(graph.value(logits)),
                    &softmax_rows(graph.value(class_logits)),
                    &targets,
                    &scene.labels,
                    weights,
                    eps,
                )?,
            };
            matched_dice(graph, logits, &assign_g, &targets, eps)?
        }
        _ => zero(graph)?,
    };

    let parts = LossParts {
        cls,
        intra,
        inter,
        equi,
        matched_pairs: assignment.pairs.len(),
        memory_pixels,
    };
    let (total, report) = total_objective(graph, &parts, &cfg.loss)?;
    Ok(SceneObjective {
        total,
        report,
        forward: fwd,
        assignment,
    })
}

fn finite_outputs<T: Float>(graph: &Graph<T>, vars: &[Var]) -> Result<()> {
    if vars.iter().all(|&v| graph.value(v).data().iter().all(|x| x.is_finite())) {
        return Ok(());
    }
    Err(divergence(0, "non-finite network output".into()))
}

fn feature_map_of<T: Float>(graph: &Graph<T>, fv: FeatureVar) -> Result<FeatureMap<T>> {
    FeatureMap::new(graph.value(fv.var).clone(), fv.stride, fv.coord_channels)
}

fn divergence(step: u64, detail: String) -> Error {
    Error::Divergence {
        step,
        detail,
        last_good: String::from("none"),
    }
}

/// One optimisation step on `batch`. Per-scene gradients are summed in
/// batch order and divided by the batch size; pixels of the batch enter
/// the memory only after the update.
pub fn train_step<T: Float>(
    batch: &[SyntheticScene],
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    ensure!(!batch.is_empty(), "train_step needs a nonempty batch");
    let step = state.step;
    let exclude: HashSet<String> = batch.iter().map(|s| s.scene_id.clone()).collect();
    let snapshot = cfg.inter.then(|| state.memory.snapshot(&exclude));
    let inv_b = T::one() / T::of(batch.len() as f64);
    let mut grad_sum: Vec<Vec<T>> = state
        .params
        .tensors()
        .iter()
        .map(|t| vec![T::zero(); t.len()])
        .collect();
    let mut report = LossReport::default();
    let mut pending = Vec::new();
    for (i, scene) in batch.iter().enumerate() {
        let mut rng = derive_rng(&[cfg.seed, TAG_STEP, step, i as u64]);
        let g = if cfg.equi {
            let grid = scene.height() / state.params.config.stride;
            Some(sample_transform(&mut rng, &cfg.transforms, grid)?)
        } else {
            None
        };
        let mut graph = Graph::new();
        let bound = state.params.bind(&mut graph, false);
        let obj = scene_objective(
            &mut graph,
            &state.params,
            &bound,
            scene,
            snapshot.as_ref(),
            g.as_ref(),
            cfg,
        )
        .map_err(|e| match e {
            Error::Divergence { detail, .. } => divergence(step, detail),
            other => other,
        })?;
        let grads = graph.backward(obj.total);
        for (acc, g) in grad_sum.iter_mut().zip(bound.gradients(&graph, &grads)) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * inv_b;
            }
        }
        let r = &obj.report;
        report.cls += r.cls / batch.len() as f64;
        report.intra_mask += r.intra_mask / batch.len() as f64;
        report.inter_mask += r.inter_mask / batch.len() as f64;
        report.equi += r.equi / batch.len() as f64;
        report.total += r.total / batch.len() as f64;
        report.matched_pairs += r.matched_pairs;
        report.memory_pixels += r.memory_pixels;
        if cfg.inter {
            let fm = feature_map_of(&graph, obj.forward.features)?;
            pending.push(sample_pixels(
                &fm,
                &scene.masks,
                &scene.labels,
                &scene.scene_id,
                &cfg.sampling,
                &mut rng,
                step,
            )?);
        }
    }
    if !report.all_finite() {
        return Err(divergence(step, format!("non-finite loss: {report:?}")));
    }
    apply_update(state, grad_sum, &cfg.optimizer)?;
    if !state.params.all_finite() {
        return Err(divergence(
            step,
            "non-finite parameters after update".into(),
        ));
    }
    for samples in pending {
        state.memory.push(samples)?;
    }
    state.step += 1;
    Ok(report)
}

fn apply_update<T: Float>(
    state: &mut TrainState<T>,
    mut grads: Vec<Vec<T>>,
    opt: &OptimizerConfig,
) -> Result<()> {
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(divergence(state.step, "non-finite gradient".into()));
    }
    if opt.grad_clip > 0.0 {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if norm > opt.grad_clip {
            let s = T::of(opt.grad_clip / norm);
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    let lr = T::of(opt.lr);
    match opt.kind {
        OptimizerKind::Sgd => {
            let mu = T::of(opt.momentum);
            for ((p, v), g) in state
                .params
                .tensors_mut()
                .iter_mut()
                .zip(&mut state.first_moment)
                .zip(&grads)
            {
                for ((w, m), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *m = mu * *m + gi;
                    *w -= lr * *m;
                }
            }
        }
        OptimizerKind::Adam => {
            ensure!(
                !state.second_moment.is_empty(),
                "Adam state is missing its second moment"
            );
            let t = (state.step + 1) as i32;
            let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let eps = T::of(opt.eps);
            let tensors = state.params.tensors_mut();
            for (k, g) in grads.iter().enumerate() {
                let (m, v) = (&mut state.first_moment[k], &mut state.second_moment[k]);
                for (j, &gi) in g.iter().enumerate() {
                    m[j] = b1 * m[j] + (T::one() - b1) * gi;
                    v[j] = b2 * v[j] + (T::one() - b2) * gi * gi;
                    let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    tensors[k].data_mut()[j] -= update;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossReport,
    pub lr: f64,
    pub memory_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub report: APReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub eval_log: PathBuf,
    pub best: Option<APReport>,
    pub steps: u64,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";

/// Keep only metrics lines with `step < keep_below` (after a resume).
fn truncate_log(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| Error::integrity(path, e.to_string()))?;
        if rec.step < keep_below {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append_line<S: Serialize>(w: &mut impl Write, path: &Path, rec: &S) -> Result<()> {
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Full training run over `scenes`, writing checkpoints and logs into
/// `out_dir`. With `resume`, continues from `out_dir/last.ckpt` if present.
pub fn train(
    scenes: &[SyntheticScene],
    eval_scenes: &[SyntheticScene],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    ensure!(!scenes.is_empty(), "training set is empty");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last = out_dir.join(LAST_CHECKPOINT);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let metrics_path = out_dir.join(METRICS_LOG);
    let eval_path = out_dir.join(EVAL_LOG);

    let mut state: TrainState<f32> = if resume && last.exists() {
        let (state, saved) = load_checkpoint::<f32>(&last)?;
        ensure!(
            saved.model == *model,
            "checkpoint model config differs from the requested one"
        );
        state
    } else {
        for p in [&metrics_path, &eval_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
        TrainState::new(model, cfg)?
    };
    truncate_log(&metrics_path, state.step)?;
    save_checkpoint(&last, &state, model, cfg)?;

    let open = |p: &Path| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut metrics = BufWriter::new(open(&metrics_path)?);
    let mut evals = BufWriter::new(open(&eval_path)?);
    let mut best: Option<APReport> = None;
    let started = Instant::now();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut derive_rng(&[cfg.seed, TAG_SHUFFLE, epoch as u64]));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for b in state.batch_in_epoch..batches.len() {
            let batch: Vec<SyntheticScene> =
                batches[b].iter().map(|&i| scenes[i].clone()).collect();
            let report = train_step(&batch, &mut state, cfg).map_err(|e| match e {
                Error::Divergence { step, detail, .. } => Error::Divergence {
                    step,
                    detail,
                    last_good: last.display().to_string(),
                },
                other => other,
            })?;
            state.batch_in_epoch = b + 1;
            let rec = MetricsRecord {
                step: state.step - 1,
                epoch,
                loss: report,
                lr: cfg.optimizer.lr,
                memory_size: state.memory.len(),
                wall_time_s: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
            };
            append_line(&mut metrics, &metrics_path, &rec)?;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        save_checkpoint(&last, &state, model, cfg)?;

        let due =
            state.epoch == cfg.epochs || (cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0);
        if due && !eval_scenes.is_empty() {
            let report = evaluate(&state.params, eval_scenes)?;
            append_line(
                &mut evals,
                &eval_path,
                &EvalRecord {
                    epoch: state.epoch,
                    step: state.step,
                    report: report.clone(),
                },
            )?;
            evals.flush().map_err(|e| Error::io(&eval_path, e))?;
            if best.as_ref().is_none_or(|b| report.ap > b.ap) {
                save_checkpoint(&best_path, &state, model, cfg)?;
                best = Some(report);
            }
        }
    }
    save_checkpoint(&final_path, &state, model, cfg)?;
    if best.is_none() {
        fs::copy(&final_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
    }
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics_log: metrics_path,
        eval_log: eval_path,
        best,
        steps: state.step,
    })
}
