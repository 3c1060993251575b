mod oracles;

use auvire_core::evaluation::*;
use auvire_core::postprocess::{decode_segments, soft_nms, video_target, PostprocessConfig};
use auvire_core::network::{PyramidLevel, PyramidOutput};
use auvire_core::objectives::FrameAnnotation;
use auvire_core::{Interval, SegmentPrediction};
use diffkit::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels_and_scores(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
    (scores, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_nms_matches_recomputing_oracle(seed in any::<u64>(), n in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = oracles::random_segments(&mut rng, n, 6.0);
        let fast = soft_nms(&segs, 0.5, 1e-4);
        let slow = oracles::soft_nms(&segs, 0.5, 1e-4);
        prop_assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert_eq!((a.start, a.end), (b.start, b.end));
            prop_assert!((a.score - b.score).abs() < 1e-12);
        }
        // Scores only decay, and selection-time scores never increase.
        for a in &fast {
            let orig = segs.iter().filter(|s| (s.start, s.end) == (a.start, a.end)).map(|s| s.score).fold(0.0, f64::max);
            prop_assert!(a.score <= orig + 1e-15);
        }
        prop_assert!(fast.windows(2).all(|w| w[1].score <= w[0].score));
    }

    #[test]
    fn temporal_metrics_match_oracles(seed in any::<u64>()) {
        let r = oracles::random_records(seed, 20);
        for thr in [0.1, 0.5, 0.75, 0.95] {
            prop_assert!((ap_at_iou(&r, thr).unwrap() - oracles::ap_at_iou(&r, thr)).abs() < 1e-12);
        }
        let ths = ar_thresholds();
        for k in [1, 2, 5, 100] {
            prop_assert!((ar_at_k(&r, k, &ths).unwrap() - oracles::ar_at_k(&r, k, &ths)).abs() < 1e-12);
        }
        let aps: Vec<f64> = [0.3, 0.5, 0.7, 0.9].iter().map(|&t| ap_at_iou(&r, t).unwrap()).collect();
        prop_assert!(aps.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        let ars: Vec<f64> = [1, 2, 3, 5].iter().map(|&k| ar_at_k(&r, k, &ths).unwrap()).collect();
        prop_assert!(ars.windows(2).all(|w| w[1] >= w[0] - 1e-15));
    }

    #[test]
    fn binary_metrics_match_oracles(seed in any::<u64>(), n in 2usize..16) {
        let (scores, labels) = labels_and_scores(seed, n);
        prop_assert!((roc_auc(&scores, &labels).unwrap() - oracles::roc_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert!((binary_ap(&scores, &labels).unwrap() - oracles::binary_ap(&scores, &labels)).abs() < 1e-12);
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&squashed, &labels).unwrap());
    }
}

#[test]
fn six_item_auc_and_eight_item_ap() {
    let scores = [0.9, 0.3, 0.6, 0.6, 0.1, 0.8];
    let labels = [true, false, true, false, false, true];
    assert!((roc_auc(&scores, &labels).unwrap() - oracles::roc_auc(&scores, &labels)).abs() < 1e-15);
    assert!((roc_auc(&scores, &labels).unwrap() - 8.5 / 9.0).abs() < 1e-15);
    let (s, l) = labels_and_scores(77, 8);
    assert!((binary_ap(&s, &l).unwrap() - oracles::binary_ap(&s, &l)).abs() < 1e-15);
}

#[test]
fn three_predictions_two_ground_truths() {
    let rec = EvalRecord {
        video_id: "a".into(),
        predictions: vec![
            SegmentPrediction::new(0.0, 1.1, 0.8),
            SegmentPrediction::new(0.1, 1.0, 0.9),
            SegmentPrediction::new(3.0, 4.0, 0.3),
        ],
        ground_truth: vec![Interval::new(0.0, 1.0), Interval::new(3.2, 4.0)],
        video_score: 0.9,
        video_label: true,
    };
    for thr in [0.5, 0.75, 0.85, 0.95] {
        let r = [rec.clone()];
        assert!((ap_at_iou(&r, thr).unwrap() - oracles::ap_at_iou(&r, thr)).abs() < 1e-12);
    }
}

#[test]
fn hard_nms_limit() {
    let a = SegmentPrediction::new(0.0, 10.0, 0.9);
    let b = SegmentPrediction::new(5.0, 15.0, 0.8);
    let c = SegmentPrediction::new(20.0, 21.0, 0.7);
    let out = soft_nms(&[a, b, c], 1e-4, 1e-4);
    assert_eq!(out, vec![a, c]);
}

#[test]
fn decode_output_is_sorted_and_truncated() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 300;
    let level = |stride: usize, len: usize, rng: &mut ChaCha8Rng| PyramidLevel {
        features: Tensor::zeros(&[len, 1]),
        logits: (0..len).map(|_| rng.random_range(-6.0..6.0)).collect(),
        offsets: Tensor::from_fn(&[len, 2], |_| rng.random_range(0.0..1.0)),
        stride,
        valid: len,
    };
    let pyr = PyramidOutput {
        levels: vec![level(1, n, &mut rng), level(2, n / 2, &mut rng)],
        valid_len: n,
        fps: 25.0,
    };
    let cfg = PostprocessConfig::default();
    let segs = decode_segments(&pyr, &cfg);
    assert_eq!(segs.len(), 200);
    assert!(segs.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(segs.iter().all(|s| 0.0 <= s.start && s.start < s.end && s.end <= 12.0));
    assert_eq!(segs, decode_segments(&pyr, &cfg));
}

#[test]
fn video_target_ignores_padding() {
    let mut ann = FrameAnnotation::real(10, 0.4);
    assert!(!video_target(&ann));
    ann.p.resize(16, false);
    ann.b.resize(16, Interval::new(0.0, 0.0));
    ann.mask.resize(16, false);
    ann.p[12] = true;
    assert!(!video_target(&ann));
    ann.p[3] = true;
    assert!(video_target(&ann));
}
