//! Finite-difference verification of analytic gradients on a downsized
//! model in 64-bit precision.

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::matching::{match_predictions, Assignment, MatchWeights};
use crate::memory::{sample_pixels, MemorySnapshot, SamplingKind, SamplingStrategy};
use crate::objectives::{
    classification_loss_var, equivariance_decode, equivariance_loss, focal_loss, inter_mask_loss, intra_mask_loss,
    matched_dice, total_objective, LossConfig, LossParts,
};
use crate::scene::SyntheticScene;
use crate::segmenter::{
    create_queries_var, encode_var, forward, forward_var, image_tensor, softmax_rows, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;
use crate::transform::{apply_to_image, TransformSpec};

pub const LOSS_NAMES: [&str; 7] = ["focal", "dice", "cls", "intra", "inter", "equi", "total"];
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn noise_scene(id: &str, seed: u64, rects: &[(usize, usize, usize, usize, u32)]) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = RgbImage::from_fn(16, 16, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for &(y0, x0, y1, x1, c) in rects {
        let mut m = Mask::empty(16, 16);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
        masks.push(m);
        labels.push(c);
    }
    SyntheticScene {
        image,
        masks,
        labels,
        scene_id: id.to_string(),
        seed,
    }
}

/// Fixed inputs of every check: model, scene, memory, transform and the
/// assignments frozen at the unperturbed parameters.
struct Fixture {
    params: ModelParams<f64>,
    scene: SyntheticScene,
    memory: MemorySnapshot<f64>,
    g: TransformSpec,
    loss: LossConfig,
    assignment: Assignment,
    assignment_g: Assignment,
}

impl Fixture {
    fn new() -> Result<Self> {
        let params = ModelParams::<f64>::init(&ModelConfig::tiny())?;
        let scene = noise_scene("grad-a", 11, &[(1, 2, 7, 9, 1), (9, 8, 15, 15, 2)]);
        let other = noise_scene("grad-b", 12, &[(2, 2, 14, 10, 2)]);
        let out = forward(&other.image, &params, &other.scene_id)?;
        let dense = SamplingStrategy {
            kind: SamplingKind::Dense,
            ..SamplingStrategy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples =
            sample_pixels(&out.features, &other.masks, &other.labels, &other.scene_id, &dense, &mut rng, 0)?;
        let memory = MemorySnapshot::from_samples(params.config.feature_dim, &samples)?;
        let g = TransformSpec::crop(0.75, [0.25, 0.0])?;
        let loss = LossConfig::default();
        let mut fx = Fixture {
            params,
            scene,
            memory,
            g,
            loss,
            assignment: Assignment::default(),
            assignment_g: Assignment::default(),
        };
        let mut graph = Graph::new();
        let b = fx.params.bind(&mut graph, true);
        let img = graph.constant(image_tensor(&fx.scene.image));
        let fwd = forward_var(&mut graph, &fx.params.config, &b, img)?;
        let w = MatchWeights::default();
        fx.assignment = match_predictions(
            &sigmoid_t(graph.value(fwd.mask_logits)),
            &softmax_rows(graph.value(fwd.queries.class_logits)),
            &fx.scene.masks,
            &fx.scene.labels,
            w,
            fx.loss.dice_eps,
        )?;
        let img_g = graph.constant(image_tensor(&apply_to_image(&fx.g, &fx.scene.image)?));
        let low_g = encode_var(&mut graph, &b, img_g)?;
        let q = create_queries_var(&mut graph, &fx.params.config, &b, low_g)?;
        let branch = equivariance_decode(&mut graph, q.filters, fwd.features, &fx.g, &fx.scene.masks)?;
        fx.assignment_g = match_predictions(
            &sigmoid_t(graph.value(branch.mask_logits)),
            &softmax_rows(graph.value(q.class_logits)),
            &branch.targets,
            &fx.scene.labels,
            w,
            fx.loss.dice_eps,
        )?;
        Ok(fx)
    }

    /// Build the named loss with `params` bound as trainable leaves.
    fn build(&self, name: &str, params: &ModelParams<f64>) -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut graph = Graph::new();
        let b = params.bind(&mut graph, false);
        let img = graph.constant(image_tensor(&self.scene.image));
        let fwd = forward_var(&mut graph, &params.config, &b, img)?;
        let s = &self.scene;
        let eps = self.loss.dice_eps;
        // every row paired with its matched mask, or an empty one
        let n = params.config.num_queries;
        let row_targets: Vec<Mask> = (0..n)
            .map(|q| match self.assignment.target_of(q) {
                Some(k) => s.masks[k].clone(),
                None => Mask::empty(s.height(), s.width()),
            })
            .collect();
        let loss = match name {
            "focal" => {
                let targets: Vec<bool> = row_targets.iter().flat_map(|m| m.data().iter().copied()).collect();
                let (v, g) = focal_loss(
                    graph.value(fwd.mask_logits).data(),
                    &targets,
                    self.loss.focal_alpha,
                    self.loss.focal_gamma,
                )?;
                graph.scalar_fn(fwd.mask_logits, v, g)?
            }
            "dice" => {
                let all = Assignment {
                    pairs: (0..n).map(|q| (q, q)).collect(),
                    unmatched: Vec::new(),
                };
                matched_dice(&mut graph, fwd.mask_logits, &all, &row_targets, eps)?
            }
            "cls" => classification_loss_var(&mut graph, fwd.queries.class_logits, &self.assignment, &s.labels)?,
            "intra" => intra_mask_loss(&mut graph, fwd.mask_logits, &self.assignment, &s.masks, eps)?,
            "inter" => inter_mask_loss(&mut graph, fwd.queries.filters, &s.scene_id, &self.memory, &self.loss)?.0,
            "equi" | "total" => {
                let img_g = graph.constant(image_tensor(&apply_to_image(&self.g, &s.image)?));
                let low_g = encode_var(&mut graph, &b, img_g)?;
                let q = create_queries_var(&mut graph, &params.config, &b, low_g)?;
                let branch = equivariance_decode(&mut graph, q.filters, fwd.features, &self.g, &s.masks)?;
                let equi = equivariance_loss(&mut graph, &branch, &self.assignment_g, eps)?;
                if name == "equi" {
                    equi
                } else {
                    let parts = LossParts {
                        cls: classification_loss_var(&mut graph, fwd.queries.class_logits, &self.assignment, &s.labels)?,
                        intra: intra_mask_loss(&mut graph, fwd.mask_logits, &self.assignment, &s.masks, eps)?,
                        inter: inter_mask_loss(&mut graph, fwd.queries.filters, &s.scene_id, &self.memory, &self.loss)?.0,
                        equi,
                        matched_pairs: self.assignment.pairs.len(),
                        memory_pixels: self.memory.len(),
                    };
                    total_objective(&mut graph, &parts, &self.loss)?.0
                }
            }
            other => return Err(Error::Config(format!("unknown loss name {other:?}"))),
        };
        Ok((graph, loss, b.vars))
    }
}

fn sigmoid_t(t: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
}

/// Compare analytic and central-difference gradients of `loss_name` on
/// [`DEFAULT_SAMPLES`] randomly chosen parameter entries.
pub fn grad_check(loss_name: &str, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(loss_name, tolerance, DEFAULT_SAMPLES, 0)
}

pub fn grad_check_with(loss_name: &str, tolerance: f64, samples: usize, seed: u64) -> Result<GradCheckReport> {
    if !LOSS_NAMES.contains(&loss_name) {
        return Err(Error::Config(format!(
            "unknown loss name {loss_name:?}; expected one of {}",
            LOSS_NAMES.join(", ")
        )));
    }
    let fx = Fixture::new()?;
    let (graph, loss, vars) = fx.build(loss_name, &fx.params)?;
    let grads = graph.backward(loss);
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v, graph.value(v).len())).collect();

    let sizes: Vec<usize> = fx.params.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total)).into_vec();
    let value = |p: &ModelParams<f64>| -> Result<f64> {
        let (g, v, _) = fx.build(loss_name, p)?;
        Ok(g.value(v).item())
    };
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for flat in picks.iter().copied() {
        let (mut t, mut j) = (0, flat);
        while j >= sizes[t] {
            j -= sizes[t];
            t += 1;
        }
        let mut p = fx.params.clone();
        let base = p.tensors()[t].data()[j];
        p.tensors_mut()[t].data_mut()[j] = base + FD_STEP;
        let up = value(&p)?;
        p.tensors_mut()[t].data_mut()[j] = base - FD_STEP;
        let down = value(&p)?;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[t][j];
        max_rel = max_rel.max(relative_error(a, numeric));
        max_abs = max_abs.max((a - numeric).abs());
    }
    Ok(GradCheckReport {
        loss: loss_name.to_string(),
        checked: picks.len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance,
        passed: max_rel <= tolerance,
    })
}
