use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uniquery::eval::{area_ranges, evaluate_detections, evaluate_oracle, APReport, Detection, GroundTruth};
use uniquery::mask::Mask;
use uniquery::verify::{random_ap_problem, reports_close};

fn square(y0: usize, x0: usize, side: usize) -> Mask {
    let mut m = Mask::empty(32, 32);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(y, x, true);
        }
    }
    m
}

fn det(mask: Mask, class_id: u32, score: f64) -> Detection {
    Detection { mask, class_id, score, scene_id: "s".into() }
}

fn gt(masks: Vec<Mask>, labels: Vec<u32>) -> Vec<GroundTruth> {
    vec![GroundTruth { scene_id: "s".into(), masks, labels }]
}

fn all_values(r: &APReport) -> Vec<f64> {
    let mut v = vec![r.ap, r.ap50, r.ap75];
    v.extend([r.ap_s, r.ap_m, r.ap_l].into_iter().flatten());
    v.extend(r.per_class.values());
    v
}

#[test]
fn perfect_detector_scores_one_and_silence_scores_zero() {
    let gts = gt(vec![square(0, 0, 6), square(10, 10, 12)], vec![1, 2]);
    let perfect = vec![det(square(0, 0, 6), 1, 1.0), det(square(10, 10, 12), 2, 1.0)];
    let r = evaluate_detections(&perfect, &gts, 2).unwrap();
    assert!(all_values(&r).iter().all(|&v| v == 1.0), "{r:?}");
    let r = evaluate_detections(&[], &gts, 2).unwrap();
    assert!(all_values(&r).iter().all(|&v| v == 0.0), "{r:?}");
}

#[test]
fn iou_point_six_passes_at_fifty_and_fails_at_seventy_five() {
    let gts = gt(vec![square(0, 0, 10)], vec![1]);
    let mut m = Mask::empty(32, 32);
    for y in 0..10 {
        for x in 0..6 {
            m.set(y, x, true);
        }
    }
    let dets = vec![det(m, 1, 0.9)];
    let r = evaluate_detections(&dets, &gts, 1).unwrap();
    assert_eq!((r.ap50, r.ap75), (1.0, 0.0));
    assert_eq!(r, evaluate_oracle(&dets, &gts, 1).unwrap());
}

#[test]
fn empty_groundtruth_gives_zero_in_both() {
    let gts = gt(vec![], vec![]);
    let dets = vec![det(square(1, 1, 4), 1, 0.8)];
    let a = evaluate_detections(&dets, &gts, 2).unwrap();
    let b = evaluate_oracle(&dets, &gts, 2).unwrap();
    assert_eq!(a.ap, 0.0);
    assert_eq!(a, b);
}

#[test]
fn size_ranges_scale_with_the_image() {
    let r = area_ranges(640 * 480);
    assert_eq!(r[1].1, 1024.0);
    assert_eq!(r[2].1, 9216.0);
    let small = area_ranges(128 * 128);
    assert!((small[1].1 - 1024.0 * 16384.0 / 307200.0).abs() < 1e-9);
}

#[test]
fn greedy_agrees_with_enumeration_on_small_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let (dets, gts) = random_ap_problem(&mut rng, 40);
        let fast = evaluate_detections(&dets, &gts, 2).unwrap();
        let slow = evaluate_oracle(&dets, &gts, 2).unwrap();
        assert!(reports_close(&fast, &slow, 1e-9), "trial {trial}: {fast:?} vs {slow:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn enumeration_never_scores_below_greedy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_ap_problem(&mut rng, 40);
        let fast = evaluate_detections(&dets, &gts, 2).unwrap();
        let slow = evaluate_oracle(&dets, &gts, 2).unwrap();
        prop_assert!(slow.ap + 1e-12 >= fast.ap);
        prop_assert!(slow.ap50 + 1e-12 >= fast.ap50);
    }

    #[test]
    fn input_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, gts) = random_ap_problem(&mut rng, 40);
        let before = evaluate_detections(&dets, &gts, 2).unwrap();
        dets.shuffle(&mut rng);
        prop_assert_eq!(before, evaluate_detections(&dets, &gts, 2).unwrap());
    }

    #[test]
    fn lower_scored_duplicates_never_help(seed in any::<u64>(), drop in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_ap_problem(&mut rng, 40);
        let before = evaluate_detections(&dets, &gts, 2).unwrap();
        // duplicate each detection that exactly hits a groundtruth of its class
        let mut more = dets.clone();
        for d in &dets {
            let hit = gts.iter().any(|g| {
                g.scene_id == d.scene_id && g.masks.iter().zip(&g.labels).any(|(m, &l)| *m == d.mask && l == d.class_id)
            });
            if hit {
                more.push(Detection { score: d.score * (1.0 - drop), ..d.clone() });
            }
        }
        let after = evaluate_detections(&more, &gts, 2).unwrap();
        prop_assert!(after.ap <= before.ap + 1e-12);
        prop_assert!(after.ap50 <= before.ap50 + 1e-12);
    }
}
