mod common;

use auvire_core::datagen::*;
use auvire_core::wildscore::runs;
use auvire_core::Interval;
use nalgebra::DMatrix;

fn cfg(seed: u64) -> SyntheticConfig {
    SyntheticConfig { seed, ..SyntheticConfig::default() }
}

#[test]
fn generation_is_a_pure_function_of_seed_and_index() {
    let a = SyntheticGenerator::new(cfg(5)).unwrap();
    let b = SyntheticGenerator::new(cfg(5)).unwrap();
    for i in [0, 3, 17] {
        assert_eq!(a.sample(i).unwrap(), b.sample(i).unwrap());
    }
    let c = SyntheticGenerator::new(cfg(6)).unwrap();
    assert_ne!(a.sample(0).unwrap().features, c.sample(0).unwrap().features);
}

#[test]
fn fake_segments_are_valid_and_recoverable() {
    let g = SyntheticGenerator::new(cfg(1)).unwrap();
    let mut counts = [0usize; 3];
    for i in 0..300 {
        let s = g.sample(i).unwrap();
        let segs = s.record.intervals();
        counts[segs.len()] += 1;
        for seg in &segs {
            assert!(0.0 <= seg.start && seg.end <= s.record.duration);
            assert!(seg.len() >= 0.8 - 1e-9 && seg.len() <= 2.4 + 1e-9);
        }
        let recovered = runs(&s.annotation.p);
        assert_eq!(recovered.len(), segs.len());
        for ((a, b), seg) in recovered.iter().zip(&segs) {
            assert!((*a as f64 - seg.start * 25.0).abs() <= 1.0);
            assert!((*b as f64 - seg.end * 25.0).abs() <= 1.0);
        }
    }
    assert!(counts.iter().all(|&c| c > 40), "{counts:?}");
}

#[test]
fn noiseless_real_features_have_latent_rank() {
    let g = SyntheticGenerator::new(SyntheticConfig {
        noise_sigma: 0.0,
        n_fake_segments: vec![1.0],
        ..cfg(2)
    })
    .unwrap();
    let s = g.sample(0).unwrap();
    assert!(s.annotation.p.iter().all(|&p| !p));
    for x in [&s.features.visual, &s.features.audio] {
        let m = DMatrix::from_row_slice(x.rows(), x.cols(), x.data());
        let sv = m.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        // Only f32 rounding separates the tail from zero.
        assert!(sv[4] / sv[0] < 1e-5, "{sv:?}");
        assert!(sv[3] / sv[0] > 1e-3, "{sv:?}");
    }
}

/// Least-squares map from audio to visual frames, fit on real videos only.
#[test]
fn cross_modal_residual_is_much_larger_on_fake_frames() {
    let g = SyntheticGenerator::new(SyntheticConfig { noise_sigma: 0.1, ..cfg(3) }).unwrap();
    let samples: Vec<Sample> = (0..400).map(|i| g.sample(i).unwrap()).collect();
    let d = 16;
    let (mut xa, mut xv) = (Vec::new(), Vec::new());
    for s in samples.iter().filter(|s| !s.annotation.any_positive()) {
        xa.extend_from_slice(s.features.audio.data());
        xv.extend_from_slice(s.features.visual.data());
    }
    let rows = xa.len() / d;
    let a = DMatrix::from_row_slice(rows, d, &xa);
    let v = DMatrix::from_row_slice(rows, d, &xv);
    let w = a.clone().svd(true, true).solve(&v, 1e-10).unwrap();
    let mse = |a: &DMatrix<f64>, v: &DMatrix<f64>| (a * &w - v).norm_squared() / (a.nrows() * d) as f64;
    let real_mse = mse(&a, &v);
    let (mut fa, mut fv) = (Vec::new(), Vec::new());
    for s in &samples {
        for seg in s.record.intervals() {
            let (lo, hi) = ((seg.start * 25.0).round() as usize + 3, (seg.end * 25.0).round() as usize - 3);
            for tau in lo..hi {
                fa.extend_from_slice(&s.features.audio.data()[tau * d..(tau + 1) * d]);
                fv.extend_from_slice(&s.features.visual.data()[tau * d..(tau + 1) * d]);
            }
        }
    }
    let n = fa.len() / d;
    let fake_mse = mse(&DMatrix::from_row_slice(n, d, &fa), &DMatrix::from_row_slice(n, d, &fv));
    assert!(fake_mse >= 3.0 * real_mse, "fake {fake_mse} vs real {real_mse}");
}

#[test]
fn single_modality_manipulation_leaves_the_other_untouched() {
    let base = SyntheticConfig { n_fake_segments: vec![0.0, 1.0], ..cfg(4) };
    let audio_only = SyntheticGenerator::new(SyntheticConfig { manipulated_modality: ManipulatedModality::Audio, ..base.clone() }).unwrap();
    let visual_only = SyntheticGenerator::new(SyntheticConfig { manipulated_modality: ManipulatedModality::Visual, ..base }).unwrap();
    let a = audio_only.sample(0).unwrap();
    let v = visual_only.sample(0).unwrap();
    // Both runs consume identical draws, so each modality differs between
    // them exactly on the faked frames of the run that manipulated it.
    assert_eq!(a.record, v.record);
    let fake = &a.annotation.p;
    assert!(fake.iter().any(|&p| p));
    for (x, y) in [(&a.features.visual, &v.features.visual), (&a.features.audio, &v.features.audio)] {
        for (tau, &p) in fake.iter().enumerate() {
            let same = x.data()[tau * 16..(tau + 1) * 16] == y.data()[tau * 16..(tau + 1) * 16];
            assert_eq!(same, !p, "frame {tau}");
        }
    }
}

#[test]
fn feature_file_round_trip_is_bit_exact() {
    let g = SyntheticGenerator::new(cfg(8)).unwrap();
    let s = g.sample(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(format!("{}.avrf", s.record.id));
    write_features(&path, &s.features).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!(back.id, s.record.id);
    assert_eq!(back.features, s.features);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let err = read_features(&path).unwrap_err().to_string();
    assert!(err.contains("10 more bytes"), "{err}");

    let ann_path = dir.path().join("a.json");
    s.record.write(&ann_path).unwrap();
    assert_eq!(AnnotationRecord::read(&ann_path).unwrap(), s.record);
}

#[test]
fn manifest_round_trip_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let entries = vec![
        ManifestEntry { features: "f/a.avrf".into(), annotation: "a/a.json".into(), split: Split::Train },
        ManifestEntry { features: "f/b.avrf".into(), annotation: "a/b.json".into(), split: Split::Test },
    ];
    let path = dir.path().join("manifest.tsv");
    write_manifest(&path, &entries).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back[1].features, dir.path().join("f/b.avrf"));
    assert_eq!(back[1].split, Split::Test);
    std::fs::write(&path, "only-one-column\n").unwrap();
    assert!(read_manifest(&path).is_err());
}

#[test]
fn padding_contract() {
    let g = SyntheticGenerator::new(SyntheticConfig { t: 100, ..cfg(9) }).unwrap();
    let s = g.sample(0).unwrap();
    let (f, a) = pad_to_length(&s.features, &s.annotation, 512).unwrap();
    assert_eq!(f.t(), 512);
    assert_eq!(f.valid_len, 100);
    assert!(f.visual.data()[100 * 16..].iter().all(|&v| v == 0.0));
    assert!(a.mask[..100].iter().all(|&m| m) && a.mask[100..].iter().all(|&m| !m));
    let full = SyntheticGenerator::new(SyntheticConfig { t: 512, ..cfg(9) }).unwrap().sample(0).unwrap();
    let (same, ann) = pad_to_length(&full.features, &full.annotation, 512).unwrap();
    assert_eq!(same, full.features);
    assert!(ann.mask.iter().all(|&m| m));
    assert!(pad_to_length(&full.features, &full.annotation, 256).is_err());
}

#[test]
fn overlapping_targets_rejected() {
    let segs = [Interval::new(0.0, 1.0), Interval::new(0.5, 1.5)];
    assert!(build_frame_targets(&segs, 50, 25.0, 2.0).is_err());
}
