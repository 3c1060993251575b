mod oracles;

use auvire_core::wildscore::*;
use auvire_core::{Interval, SegmentPrediction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rle_oracle(mask: &[bool], fps: f64, min_s: f64) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let mut j = i;
            while j < mask.len() && mask[j] {
                j += 1;
            }
            if (j - i) as f64 / fps >= min_s {
                out.push(Interval::new(i as f64 / fps, j as f64 / fps));
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_segments_match_run_length_oracle(bits in proptest::collection::vec(any::<bool>(), 1..400), talk in proptest::collection::vec(any::<bool>(), 400)) {
        let talk = &talk[..bits.len()];
        let spec = ValiditySpec { min_segment_s: 0.12, ..ValiditySpec::default() };
        let both: Vec<bool> = bits.iter().zip(talk).map(|(a, b)| *a && *b).collect();
        let got = valid_segments(&bits, talk, 25.0, &spec).unwrap();
        prop_assert_eq!(got.beta, rle_oracle(&both, 25.0, 0.12));
    }

    #[test]
    fn psi_s_matches_integration_and_split_invariance(seed in any::<u64>(), n in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = oracles::random_segments(&mut rng, n, 5.0);
        let fast = psi_s(&segs);
        prop_assert!((fast - oracles::psi_s_integral(&segs, 1e-4)).abs() < 1e-3);
        if let Some(first) = segs.first() {
            let mid = 0.5 * (first.start + first.end);
            let mut split = segs[1..].to_vec();
            split.push(SegmentPrediction::new(first.start, mid, first.score));
            split.push(SegmentPrediction::new(mid, first.end, first.score));
            prop_assert!((psi_s(&split) - fast).abs() < 1e-9);
        }
    }

    #[test]
    fn psi_m_bounded_and_monotone(seed in any::<u64>(), n in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = oracles::random_segments(&mut rng, n, 8.0);
        let beta = ValidSegments { beta: vec![Interval::new(0.5, 3.0), Interval::new(4.0, 9.0)] };
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let v = psi_m(&segs, i as f64 / 49.0, &beta).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn chunk_windows_tile_each_range(len in 0.5..130.0f64, start in 0.0..10.0f64) {
        let beta = ValidSegments { beta: vec![Interval::new(start, start + len)] };
        let w = chunk_plan(&beta, 20.0, 2.0).unwrap();
        if len < 2.0 {
            // A lone remainder shorter than the minimum is dropped.
            prop_assert!(w.is_empty() || w.len() == 1);
        }
        if !w.is_empty() {
            prop_assert_eq!(w[0].start, start);
            prop_assert_eq!(w.last().unwrap().end, start + len);
            prop_assert!(w.windows(2).all(|p| p[0].end == p[1].start));
            if w.len() > 1 {
                prop_assert!(w.iter().all(|x| x.len() >= 2.0 - 1e-9));
            }
        }
    }
}

#[test]
fn equal_scores_on_disjoint_segments() {
    let c = 0.37;
    let segs = [SegmentPrediction::new(0.0, 1.5, c), SegmentPrediction::new(2.0, 2.25, c), SegmentPrediction::new(5.0, 9.0, c)];
    assert!((psi_s(&segs) - c * 5.75).abs() < 1e-12);
}

#[test]
fn talking_threshold_boundary_counts_as_talking() {
    let x = diffkit::Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert_eq!(talking_mask(&x, 2.0), vec![true, true, false]);
}
