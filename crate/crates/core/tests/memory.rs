use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uniquery::features::FeatureMap;
use uniquery::mask::Mask;
use uniquery::memory::{downsample_labels, sample_pixels, MemoryBank, PixelSample, Provenance, SamplingKind, SamplingStrategy};
use uniquery::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Push(Vec<(u8, u32)>),
    Snapshot(Vec<u8>),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        prop::collection::vec((0u8..4, 1u32..4), 0..20).prop_map(Op::Push),
        prop::collection::vec(0u8..4, 0..3).prop_map(Op::Snapshot),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn bank_behaves_like_a_bounded_fifo(capacity in 1usize..30, ops in prop::collection::vec(op(), 1..15)) {
        let mut bank = MemoryBank::<f64>::new(capacity, 2).unwrap();
        let mut model: VecDeque<PixelSample<f64>> = VecDeque::new();
        let mut serial = 0.0;
        for (step, op) in ops.into_iter().enumerate() {
            match op {
                Op::Push(items) => {
                    let batch: Vec<PixelSample<f64>> = items
                        .into_iter()
                        .map(|(scene, inst)| {
                            serial += 1.0;
                            PixelSample {
                                embedding: vec![serial, f64::from(scene)],
                                provenance: Provenance {
                                    scene_id: format!("s{scene}"),
                                    instance_id: inst,
                                    class_id: 1,
                                    step_added: step as u64,
                                },
                            }
                        })
                        .collect();
                    for s in &batch {
                        model.push_back(s.clone());
                        if model.len() > capacity {
                            model.pop_front();
                        }
                    }
                    bank.push(batch).unwrap();
                }
                Op::Snapshot(ids) => {
                    let exclude: HashSet<String> = ids.iter().map(|i| format!("s{i}")).collect();
                    let snap = bank.snapshot(&exclude);
                    let kept: Vec<&PixelSample<f64>> =
                        model.iter().filter(|s| !exclude.contains(&s.provenance.scene_id)).collect();
                    prop_assert_eq!(snap.len(), kept.len());
                    for (i, s) in kept.iter().enumerate() {
                        prop_assert_eq!(snap.row(i), &s.embedding[..]);
                        prop_assert_eq!(&snap.provenance[i], &s.provenance);
                    }
                }
            }
            prop_assert!(bank.len() <= capacity);
            prop_assert!(bank.iter().eq(model.iter()));
        }
    }

    #[test]
    fn balanced_sampling_respects_its_bounds(
        labels in prop::collection::vec(0usize..4, 64),
        per in 1usize..6,
        seed in any::<u64>(),
    ) {
        // 8x8 pixel label map at stride 2 -> 4x4 feature cells
        let mut masks = vec![Mask::empty(8, 8); 3];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                masks[l - 1].set(i / 8, i % 8, true);
            }
        }
        let fm = FeatureMap::new(Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap(), 2, 0).unwrap();
        let strategy = SamplingStrategy { kind: SamplingKind::InstanceBalanced, pixels_per_image: 512, pixels_per_instance: per };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = sample_pixels(&fm, &masks, &[1, 2, 3], "s", &strategy, &mut rng, 0).unwrap();
        let cells = downsample_labels(&masks, 4, 4, 2).unwrap();
        let mut seen = HashSet::new();
        for s in &samples {
            let cell = s.embedding[0] as usize;
            prop_assert!(seen.insert(cell), "cell drawn twice");
            prop_assert_eq!(cells[cell], s.provenance.instance_id);
            prop_assert_eq!(s.provenance.class_id, s.provenance.instance_id);
        }
        for inst in 1..=3u32 {
            let available = cells.iter().filter(|&&c| c == inst).count();
            let drawn = samples.iter().filter(|s| s.provenance.instance_id == inst).count();
            prop_assert_eq!(drawn, available.min(per));
        }
    }
}

#[test]
fn eviction_order_is_exact() {
    let mut bank = MemoryBank::<f32>::new(3, 1).unwrap();
    let sample = |v: f32, step: u64| PixelSample {
        embedding: vec![v],
        provenance: Provenance { scene_id: "a".into(), instance_id: 1, class_id: 1, step_added: step },
    };
    bank.push(vec![sample(1.0, 0), sample(2.0, 0)]).unwrap();
    bank.push(vec![sample(3.0, 1), sample(4.0, 1)]).unwrap();
    let kept: Vec<f32> = bank.iter().map(|s| s.embedding[0]).collect();
    assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    assert_eq!(bank.inserted(), 4);
    assert!(bank.push(vec![sample(5.0, 0)]).is_err(), "steps must not go backwards");
}
