//! Miniature query-based segmenter.
//!
//! A CoordConv encoder (four stride-2 stages) and an upsampling decoder with
//! skip connections produce the dense feature map at `stride`. The deepest
//! encoder map is pooled onto a grid of `N` cells; a small conv head turns
//! each cell into one dynamic 1x1 filter (`D` weights + bias) and one row of
//! class logits. Masks are decoded by applying every filter to the feature
//! map and upsampling bilinearly to the input size.

use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{ensure, Result};
use crate::features::{coord_grid, FeatureMap, FeatureVar};
use crate::float::Float;
use crate::resample::Resampler;
use crate::tensor::Tensor;

/// Stride of the deepest encoder map.
pub const DEEP_STRIDE: usize = 16;
const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels `D`, including the two coordinate channels.
    pub feature_dim: usize,
    pub num_queries: usize,
    /// Image pixels per feature cell; one of 16, 8, 4, 2, 1 and fixed by
    /// the number of decoder stages.
    pub stride: usize,
    pub class_count: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_widths: Vec<usize>,
    pub query_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            num_queries: 16,
            stride: 4,
            class_count: 4,
            encoder_widths: [16, 24, 32, 48],
            decoder_widths: vec![24, 16],
            query_hidden: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Downsized model used for gradient verification.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 4,
            num_queries: 2,
            stride: 4,
            class_count: 2,
            encoder_widths: [4, 4, 6, 8],
            decoder_widths: vec![6, 4],
            query_hidden: 6,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.feature_dim >= 3,
            "feature_dim must be >= 3 (two channels are coordinates)"
        );
        ensure!(self.num_queries >= 1, "num_queries must be >= 1");
        ensure!(self.class_count >= 1, "class_count must be >= 1");
        ensure!(
            self.decoder_widths.len() <= 4
                && self.stride << self.decoder_widths.len() == DEEP_STRIDE,
            "stride {} needs {} decoder stages, got {}",
            self.stride,
            (DEEP_STRIDE / self.stride.max(1)).trailing_zeros(),
            self.decoder_widths.len()
        );
        ensure!(
            self.encoder_widths
                .iter()
                .chain(&self.decoder_widths)
                .all(|&w| w >= 1)
                && self.query_hidden >= 1,
            "layer widths must be positive"
        );
        Ok(())
    }

    pub fn filter_len(&self) -> usize {
        self.feature_dim + 1
    }

    /// Query grid `(rows, cols)`: rows is the largest divisor of `N` not
    /// exceeding its square root.
    pub fn query_grid(&self) -> (usize, usize) {
        let n = self.num_queries;
        let rows = (1..=n)
            .take_while(|r| r * r <= n)
            .filter(|r| n % r == 0)
            .last()
            .unwrap_or(1);
        (rows, n / rows)
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: &str, o: usize, i: usize, k: usize, norm: bool| {
            out.push((format!("{name}.w"), vec![o, i, k, k], Init::He(i * k * k)));
            out.push((format!("{name}.b"), vec![o], Init::Zero));
            if norm {
                out.push((format!("{name}.gn.g"), vec![o], Init::One));
                out.push((format!("{name}.gn.b"), vec![o], Init::Zero));
            }
        };
        let enc = self.encoder_widths;
        let mut prev = INPUT_CHANNELS;
        for (i, &w) in enc.iter().enumerate() {
            conv(&mut out, &format!("enc{i}"), w, prev, 3, true);
            prev = w;
        }
        let skips = [enc[2], enc[1], enc[0], INPUT_CHANNELS];
        for (j, &w) in self.decoder_widths.iter().enumerate() {
            conv(&mut out, &format!("dec{j}"), w, prev + skips[j], 3, true);
            prev = w;
        }
        conv(&mut out, "head", self.feature_dim - 2, prev, 1, false);
        conv(
            &mut out,
            "query.hidden",
            self.query_hidden,
            enc[3] + 2,
            3,
            false,
        );
        let rows = self.filter_len() + self.class_count + 1;
        out.push((
            "query.out.w".into(),
            vec![rows, self.query_hidden, 1, 1],
            Init::He(self.query_hidden),
        ));
        // "no object" prior 0.9 against C equally likely classes
        out.push((
            "query.out.b".into(),
            vec![rows],
            Init::OneHot(self.filter_len(), (9.0 * self.class_count as f64).ln()),
        ));
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Zero,
    One,
    OneHot(usize, f64),
}

fn gn_groups(c: usize) -> usize {
    if c % 4 == 0 && c >= 8 {
        c / 4
    } else if c % 2 == 0 && c >= 4 {
        c / 2
    } else {
        1
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ModelParams<T> {
    /// He-normal fan-in weights, zero biases, unit norm gains, seeded by
    /// `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in config.layout() {
            let len: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::He(fan_in) => {
                    let s = (2.0 / fan_in as f64).sqrt();
                    (0..len)
                        .map(|_| T::of(s * std_normal.sample(&mut rng)))
                        .collect()
                }
                Init::Zero => vec![T::zero(); len],
                Init::One => vec![T::one(); len],
                Init::OneHot(i, v) => (0..len)
                    .map(|j| if j == i { T::of(v) } else { T::zero() })
                    .collect(),
            };
            names.push(name);
            tensors.push(Tensor::from_vec(&shape, data)?);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuild from stored tensors, checking names and shapes against the
    /// layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        ensure!(
            layout.len() == named.len(),
            "expected {} tensors, got {}",
            layout.len(),
            named.len()
        );
        for ((name, shape, _), (n, t)) in layout.iter().zip(&named) {
            ensure!(
                name == n && shape[..] == *t.shape(),
                "tensor {n} {:?} does not fit {name} {:?}",
                t.shape(),
                shape
            );
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Whether parameter `name` belongs to the query creator rather than
    /// the feature extractor.
    pub fn is_query_param(name: &str) -> bool {
        name.starts_with("query.")
    }

    /// Register every tensor on `graph`; trainable unless `frozen`.
    pub fn bind(&self, graph: &mut Graph<T>, frozen: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if frozen {
                    graph.constant(t.clone())
                } else {
                    graph.param(t.clone())
                }
            })
            .collect::<Vec<_>>();
        let index = self
            .names
            .iter()
            .cloned()
            .zip(vars.iter().copied())
            .collect();
        BoundParams { vars, index }
    }
}

/// Graph handles of a bound [`ModelParams`], in parameter order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    index: HashMap<String, Var>,
}

impl BoundParams {
    fn get(&self, name: &str) -> Var {
        self.index[name]
    }

    /// Per-parameter gradients (zeros where no gradient reached).
    pub fn gradients<T: Float>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, graph.value(v).len()))
            .collect()
    }
}

/// `[3, H, W]` tensor scaled to `[-1, 1]`.
pub fn image_tensor<T: Float>(image: &RgbImage) -> Tensor<T> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::of(px.0[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image shape")
}

#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    /// `[N, D+1]`
    pub filters: Var,
    /// `[N, C+1]`
    pub class_logits: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: FeatureVar,
    /// Deepest encoder map, `[enc3, H/16, W/16]`.
    pub low: Var,
    pub queries: QueryVars,
    /// `[N, H, W]`
    pub mask_logits: Var,
}

fn conv_block<T: Float>(
    graph: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let y = graph.conv2d(
        x,
        p.get(&format!("{name}.w")),
        Some(p.get(&format!("{name}.b"))),
        stride,
        1,
    )?;
    let groups = gn_groups(graph.shape(y)[0]);
    let y = graph.group_norm(
        y,
        p.get(&format!("{name}.gn.g")),
        p.get(&format!("{name}.gn.b")),
        groups,
    )?;
    Ok(graph.silu(y))
}

/// Feature extractor on a `[3, H, W]` image node. Returns the feature map
/// and the deepest encoder map.
pub fn extract_features_var<T: Float>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    p: &BoundParams,
    image: Var,
) -> Result<(FeatureVar, Var)> {
    let (deep, skips) = encode(graph, p, image)?;
    let mut x = deep;
    for j in 0..config.decoder_widths.len() {
        let (h, w) = (graph.shape(x)[1], graph.shape(x)[2]);
        let up = graph.resample(x, Arc::new(Resampler::resize(h, w, 2 * h, 2 * w)))?;
        let cat = graph.concat(&[up, skips[skips.len() - 1 - j]])?;
        x = conv_block(graph, p, &format!("dec{j}"), cat, 1)?;
    }
    let learned = graph.conv2d(x, p.get("head.w"), Some(p.get("head.b")), 1, 0)?;
    let (h, w) = (graph.shape(learned)[1], graph.shape(learned)[2]);
    let coords = graph.constant(coord_grid(h, w));
    let var = graph.concat(&[learned, coords])?;
    Ok((
        FeatureVar {
            var,
            channels: config.feature_dim,
            height: h,
            width: w,
            stride: config.stride,
            coord_channels: 2,
        },
        deep,
    ))
}

/// Encoder only: deepest map plus the skip inputs (image+coords, stride 2,
/// 4 and 8 maps).
fn encode<T: Float>(graph: &mut Graph<T>, p: &BoundParams, image: Var) -> Result<(Var, Vec<Var>)> {
    let s = graph.shape(image).to_vec();
    ensure!(
        s.len() == 3 && s[0] == 3,
        "image must be [3,H,W], got {:?}",
        s
    );
    let (h, w) = (s[1], s[2]);
    ensure!(
        h > 0 && w > 0 && h % DEEP_STRIDE == 0 && w % DEEP_STRIDE == 0,
        "image {h}x{w} must have sides divisible by {DEEP_STRIDE}"
    );
    let coords = graph.constant(coord_grid(h, w));
    let mut x = graph.concat(&[image, coords])?;
    let mut skips = vec![x];
    for i in 0..4 {
        x = conv_block(graph, p, &format!("enc{i}"), x, 2)?;
        if i < 3 {
            skips.push(x);
        }
    }
    Ok((x, skips))
}

/// Encoder only, for branches that need just the query creator's input.
pub fn encode_var<T: Float>(graph: &mut Graph<T>, p: &BoundParams, image: Var) -> Result<Var> {
    Ok(encode(graph, p, image)?.0)
}

/// Query creator on the deepest encoder map.
pub fn create_queries_var<T: Float>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    p: &BoundParams,
    low: Var,
) -> Result<QueryVars> {
    let s = graph.shape(low).to_vec();
    ensure!(
        s.len() == 3 && s[0] == config.encoder_widths[3],
        "low-resolution map {:?} does not match encoder width {}",
        s,
        config.encoder_widths[3]
    );
    let (rows, cols) = config.query_grid();
    let pooled = graph.resample(
        low,
        Arc::new(Resampler::adaptive_avg_pool(s[1], s[2], rows, cols)),
    )?;
    let coords = graph.constant(coord_grid(rows, cols));
    let x = graph.concat(&[pooled, coords])?;
    let x = graph.conv2d(
        x,
        p.get("query.hidden.w"),
        Some(p.get("query.hidden.b")),
        1,
        1,
    )?;
    let x = graph.silu(x);
    let out = graph.conv2d(x, p.get("query.out.w"), Some(p.get("query.out.b")), 1, 0)?;
    let d1 = config.filter_len();
    let f = graph.slice_rows(out, 0, d1)?;
    let c = graph.slice_rows(out, d1, config.class_count + 1)?;
    Ok(QueryVars {
        filters: graph.transpose(f)?,
        class_logits: graph.transpose(c)?,
    })
}

/// Apply each `[N, D+1]` filter row to the feature map and upsample the
/// `[N, h_f, w_f]` logits by the feature stride.
pub fn decode_masks_var<T: Float>(
    graph: &mut Graph<T>,
    filters: Var,
    fm: FeatureVar,
) -> Result<Var> {
    let low = graph.dynamic_filter(filters, fm.var)?;
    if fm.stride == 1 {
        return Ok(low);
    }
    let map = Resampler::resize(
        fm.height,
        fm.width,
        fm.height * fm.stride,
        fm.width * fm.stride,
    );
    graph.resample(low, Arc::new(map))
}

pub fn forward_var<T: Float>(
    graph: &mut Graph<T>,
    config: &ModelConfig,
    p: &BoundParams,
    image: Var,
) -> Result<ForwardVars> {
    let (features, low) = extract_features_var(graph, config, p, image)?;
    let queries = create_queries_var(graph, config, p, low)?;
    let mask_logits = decode_masks_var(graph, queries.filters, features)?;
    Ok(ForwardVars {
        features,
        low,
        queries,
        mask_logits,
    })
}

/// Dynamic filters and class logits for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<T> {
    /// `[N, D+1]`: weights then bias.
    pub filters: Tensor<T>,
    /// `[N, C+1]`, column 0 is "no object".
    pub class_logits: Tensor<T>,
    pub source_scene: String,
}

impl<T: Float> QuerySet<T> {
    pub fn len(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-wise softmax of the class logits.
    pub fn class_probs(&self) -> Tensor<T> {
        softmax_rows(&self.class_logits)
    }
}

pub fn softmax_rows<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let cols = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}

/// Feature map plus the deepest encoder map (the query creator's input).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<T> {
    pub features: FeatureMap<T>,
    pub low: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `[N, H, W]`
    pub mask_logits: Tensor<T>,
    pub queries: QuerySet<T>,
    pub features: FeatureMap<T>,
}

pub fn extract_features<T: Float>(image: &RgbImage, params: &ModelParams<T>) -> Result<Encoded<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(image_tensor(image));
    let (fv, low) = extract_features_var(&mut g, &params.config, &p, x)?;
    Ok(Encoded {
        features: FeatureMap::new(g.value(fv.var).clone(), fv.stride, fv.coord_channels)?,
        low: g.value(low).clone(),
    })
}

pub fn create_queries<T: Float>(
    low: &Tensor<T>,
    params: &ModelParams<T>,
    scene_id: &str,
) -> Result<QuerySet<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(low.clone());
    let q = create_queries_var(&mut g, &params.config, &p, x)?;
    Ok(QuerySet {
        filters: g.value(q.filters).clone(),
        class_logits: g.value(q.class_logits).clone(),
        source_scene: scene_id.to_string(),
    })
}

pub fn decode_masks<T: Float>(queries: &QuerySet<T>, fm: &FeatureMap<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(queries.filters.clone());
    let v = g.constant(fm.values.clone());
    let fv = FeatureVar {
        var: v,
        channels: fm.channels(),
        height: fm.height(),
        width: fm.width(),
        stride: fm.stride,
        coord_channels: fm.coord_channels,
    };
    let out = decode_masks_var(&mut g, f, fv)?;
    Ok(g.value(out).clone())
}

pub fn forward<T: Float>(
    image: &RgbImage,
    params: &ModelParams<T>,
    scene_id: &str,
) -> Result<ForwardOutput<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let x = g.constant(image_tensor(image));
    let out = forward_var(&mut g, &params.config, &p, x)?;
    Ok(ForwardOutput {
        mask_logits: g.value(out.mask_logits).clone(),
        queries: QuerySet {
            filters: g.value(out.queries.filters).clone(),
            class_logits: g.value(out.queries.class_logits).clone(),
            source_scene: scene_id.to_string(),
        },
        features: FeatureMap::new(
            g.value(out.features.var).clone(),
            out.features.stride,
            out.features.coord_channels,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::Rng;

    fn noise_image(size: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn default_model_is_small() {
        let p = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
        assert!(p.parameter_count() < 200_000, "{}", p.parameter_count());
        assert_eq!(ModelConfig::default().query_grid(), (4, 4));
    }

    #[test]
    fn query_grids() {
        let grid = |n| {
            ModelConfig {
                num_queries: n,
                ..ModelConfig::default()
            }
            .query_grid()
        };
        assert_eq!(grid(8), (2, 4));
        assert_eq!(grid(2), (1, 2));
        assert_eq!(grid(7), (1, 7));
    }

    #[test]
    fn bad_stride_is_rejected() {
        let c = ModelConfig {
            stride: 8,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            stride: 8,
            decoder_widths: vec![16],
            ..ModelConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn no_object_prior() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let b = p.get("query.out.b").unwrap().data();
        let logits = &b[cfg.filter_len()..];
        let probs = softmax_rows(&Tensor::from_vec(&[1, 5], logits.to_vec()).unwrap());
        assert!((probs.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn non_divisible_image_is_rejected() {
        let p = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
        assert!(extract_features(&noise_image(40, 0), &p).is_err());
    }
}
