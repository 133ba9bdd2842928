use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uniquery::autodiff::Graph;
use uniquery::features::FeatureMap;
use uniquery::segmenter::{
    create_queries, decode_masks, extract_features, forward, forward_var, image_tensor, ModelConfig, ModelParams,
    QuerySet,
};
use uniquery::tensor::Tensor;

fn noise(size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn config(d: usize, n: usize) -> ModelConfig {
    ModelConfig {
        feature_dim: d,
        num_queries: n,
        ..ModelConfig::default()
    }
}

#[test]
fn shapes_hold_across_the_config_matrix() {
    for size in [64u32, 128] {
        for d in [8, 16] {
            for n in [8, 16] {
                let params = ModelParams::<f32>::init(&config(d, n)).unwrap();
                let out = forward(&noise(size, 1), &params, "s").unwrap();
                let h = size as usize;
                assert_eq!(out.features.values.shape(), &[d, h / 4, h / 4]);
                assert_eq!(out.queries.filters.shape(), &[n, d + 1]);
                assert_eq!(out.queries.class_logits.shape(), &[n, 5]);
                assert_eq!(out.mask_logits.shape(), &[n, h, h]);
                assert!(out.mask_logits.data().iter().all(|v| v.is_finite()));
                assert!(params.parameter_count() < 200_000);
            }
        }
    }
}

#[test]
fn image_sides_must_divide_evenly() {
    let params = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
    assert!(forward(&noise(72, 0), &params, "s").is_err());
}

#[test]
fn coordinate_channels_span_the_corners() {
    let params = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
    let fm = extract_features(&noise(64, 2), &params).unwrap().features;
    assert_eq!(fm.coord_channels, 2);
    let d = fm.channels();
    let (h, w) = (fm.height(), fm.width());
    let tl = fm.embedding(0, 0);
    let br = fm.embedding(h - 1, w - 1);
    assert_eq!(&tl[d - 2..], &[-1.0, -1.0]);
    assert_eq!(&br[d - 2..], &[1.0, 1.0]);
}

#[test]
fn forward_is_a_pure_function() {
    let a = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
    let b = ModelParams::<f32>::init(&ModelConfig::default()).unwrap();
    assert_eq!(a, b);
    let img = noise(64, 3);
    assert_eq!(forward(&img, &a, "s").unwrap(), forward(&img, &b, "s").unwrap());
}

#[test]
fn zero_query_head_gives_identical_zero_queries() {
    let mut params = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if ModelParams::<f64>::is_query_param(name) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let out = forward(&noise(64, 4), &params, "s").unwrap();
    assert!(out.queries.filters.data().iter().all(|&v| v == 0.0));
    assert!(out.queries.class_logits.data().iter().all(|&v| v == 0.0));
    assert!(out.mask_logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn class_probabilities_lie_on_the_simplex() {
    for seed in 0..5 {
        let params = ModelParams::<f32>::init(&ModelConfig {
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let enc = extract_features(&noise(64, seed), &params).unwrap();
        let q = create_queries(&enc.low, &params, "s").unwrap();
        for row in q.class_probs().data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn no_object_prior_is_point_nine() {
    let params = ModelParams::<f64>::init(&ModelConfig::default()).unwrap();
    let out = forward(&noise(64, 5), &params, "s").unwrap();
    let mean_bg: f64 = out.queries.class_probs().data().chunks(5).map(|r| r[0]).sum::<f64>() / 16.0;
    assert!(mean_bg > 0.6, "{mean_bg}");
}

fn queries(rows: &[&[f64]]) -> QuerySet<f64> {
    let d1 = rows[0].len();
    QuerySet {
        filters: Tensor::from_vec(&[rows.len(), d1], rows.concat()).unwrap(),
        class_logits: Tensor::from_vec(&[rows.len(), 2], vec![0.0; rows.len() * 2]).unwrap(),
        source_scene: "s".into(),
    }
}

#[test]
fn decoding_is_a_per_cell_dot_product() {
    let fm = FeatureMap::new(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 1, 0).unwrap();
    let out = decode_masks(&queries(&[&[1.0, 0.0]]), &fm).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);

    let zero = decode_masks(&queries(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]), &fm).unwrap();
    assert_eq!(zero.shape(), &[3, 2, 2]);
    assert!(zero.data().iter().all(|&v| v == 0.0));

    assert!(decode_masks(&queries(&[&[1.0, 1.0, 0.0]]), &fm).is_err());
}

#[test]
fn upsampled_logits_of_a_constant_map_are_constant() {
    let fm = FeatureMap::new(Tensor::from_vec(&[2, 3, 3], vec![0.5; 18]).unwrap(), 4, 0).unwrap();
    let out = decode_masks(&queries(&[&[2.0, -1.0, 0.25]]), &fm).unwrap();
    assert_eq!(out.shape(), &[1, 12, 12]);
    assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
}

/// Mean mask logit of the tiny model on a fixed 16x16 image.
fn mean_logit(params: &ModelParams<f64>, img: &RgbImage) -> f64 {
    let out = forward(img, params, "s").unwrap();
    out.mask_logits.data().iter().sum::<f64>() / out.mask_logits.len() as f64
}

#[test]
fn feature_extractor_gradients_match_finite_differences() {
    let params = ModelParams::<f64>::init(&ModelConfig::tiny()).unwrap();
    let img = noise(16, 6);
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let x = graph.constant(image_tensor(&img));
    let fwd = forward_var(&mut graph, &params.config, &bound, x).unwrap();
    let n = graph.value(fwd.mask_logits).len();
    let mean = graph.value(fwd.mask_logits).data().iter().sum::<f64>() / n as f64;
    let root = graph.scalar_fn(fwd.mask_logits, mean, vec![1.0 / n as f64; n]).unwrap();
    let grads = bound.gradients(&graph, &graph.backward(root));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for (ti, name) in params.names().iter().enumerate() {
        if ModelParams::<f64>::is_query_param(name) {
            continue;
        }
        for _ in 0..4 {
            let j = rng.gen_range(0..params.tensors()[ti].len());
            let h = 1e-5;
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data_mut()[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= h;
            let fd = (mean_logit(&plus, &img) - mean_logit(&minus, &img)) / (2.0 * h);
            let an = grads[ti][j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{j}]: analytic {an}, numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}
