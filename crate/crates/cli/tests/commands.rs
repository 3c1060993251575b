#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auvire_cli::*;
use auvire_core::datagen::{read_manifest, write_features, Split, SyntheticConfig, SyntheticGenerator};
use auvire_core::evaluation::roc_auc;
use auvire_core::network::{write_checkpoint, ModelConfig, Network};
use auvire_core::trainer::{average_ranks, FileCheckpointer, GridSpec};
use auvire_core::{Interval, SegmentPrediction};

fn auvire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auvire")).args(args).output().expect("run auvire")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = SyntheticConfig {
        t: 48,
        d: 8,
        fake_duration_s: (0.3, 0.6),
        ..SyntheticConfig::default()
    };
    cfg.generate.num_samples = 30;
    cfg.model = ModelConfig {
        d: 8,
        d_a: 8,
        q: 8,
        kernel: 3,
        l_pre_r: 1,
        l_down_r: 1,
        l_up_r: 1,
        l_post_r: 1,
        l_retain_e: 1,
        l_down_e: 1,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.validity.talk_threshold = 0.0;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_splits_seventy_fifteen_fifteen() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.generate.num_samples = 100;
    let manifest = cmd_generate(&cfg, tmp.path()).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 100);
    let count = |s| entries.iter().filter(|e| e.split == s).count();
    assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [70, 15, 15]);
    assert_eq!(std::fs::read_dir(tmp.path().join("features")).unwrap().count(), 100);
    let resolved = RunConfig::load(&tmp.path().join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn split_sizes_give_the_remainder_to_test() {
    assert_eq!(split_sizes(100, [0.7, 0.15, 0.15]), [70, 15, 15]);
    assert_eq!(split_sizes(7, [0.7, 0.15, 0.15]), [5, 1, 1]);
    assert_eq!(split_sizes(1, [0.5, 0.5, 0.0]), [1, 0, 0]);
}

#[test]
fn generate_is_reproducible_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &toy());
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let o = auvire(&["generate", "--config", config.to_str().unwrap(), "--seed", "4", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree(&dirs[0]), tree(&dirs[1]));
    let other = tmp.path().join("c");
    auvire(&["generate", "--config", config.to_str().unwrap(), "--seed", "5", "--out", other.to_str().unwrap()]);
    assert_ne!(tree(&dirs[0]), tree(&other));
}

#[test]
fn bad_split_ratios_are_a_usage_error_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.generate.split_ratios = [0.7, 0.2, 0.2];
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("out");
    let o = auvire(&["generate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("split ratios"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[train]\nepochs = 3\nlearning_rate = 0.1\n").unwrap();
    let o = auvire(&["generate", "--config", config.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(RunConfig::parse("[nonsense]\n").is_err());
}

#[test]
fn missing_manifest_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere.tsv");
    let o = auvire(&["train", "--manifest", missing.to_str().unwrap(), "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.tsv"), "{}", stderr(&o));
}

#[test]
fn toy_training_writes_metric_keys_and_resumes_to_the_same_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.set_seed(3);
    let manifest = cmd_generate(&cfg, &tmp.path().join("data")).unwrap();
    cfg.train.epochs = 4;
    let config = write_config(tmp.path(), &cfg);
    let full = tmp.path().join("full");
    let o = auvire(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(full.join(METRICS)).unwrap()).unwrap();
    for key in ["ap@0.5", "ap@0.75", "ap@0.95", "ar@100", "ar@10", "auc"] {
        assert!(metrics["test"].get(key).is_some(), "missing {key} in {metrics}");
    }
    assert_eq!(metrics["epochs"], 4);

    // Stop after two epochs, then continue the saved run to four.
    let resumed = tmp.path().join("resumed");
    let mut short = cfg.clone();
    short.train.epochs = 2;
    cmd_train(&short, &manifest, &resumed, false).unwrap();
    let report = cmd_train(&cfg, &manifest, &resumed, false).unwrap();
    assert_eq!(report.epochs, 4);
    for name in [METRICS, FileCheckpointer::HISTORY, FileCheckpointer::BEST, FileCheckpointer::STATE, TEST_PREDICTIONS] {
        assert_eq!(std::fs::read(full.join(name)).unwrap(), std::fs::read(resumed.join(name)).unwrap(), "{name}");
    }
}

fn silent_checkpoint(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let mut net = Network::<f32>::new(cfg.model.clone()).unwrap();
    let idx = net.param_names().iter().position(|n| n == "cls.out.bias").expect("classifier bias");
    net.params_mut()[idx].data_mut().iter_mut().for_each(|b| *b = -40.0);
    let path = dir.join("silent.avrm");
    write_checkpoint(&path, &net).unwrap();
    path
}

#[test]
fn video_mode_scores_zero_without_detections() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy();
    let manifest = cmd_generate(&cfg, &tmp.path().join("data")).unwrap();
    let ckpt = silent_checkpoint(tmp.path(), &cfg);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("scores");
    let o = auvire(&[
        "score",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        "test",
        "--mode",
        "video",
        "--min-segment-seconds",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: Vec<ScoreRecord> = read_json_lines(&out.join(SCORES)).unwrap();
    assert!(!scores.is_empty());
    assert!(scores.iter().all(|s| s.score == 0.0 && s.n_segments == 0), "{scores:?}");
    let resolved = RunConfig::load(&out.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.score.mode, ScoreMode::Video);
    assert_eq!(RunConfig::default().score.theta, 0.01);
}

#[test]
fn feature_dimension_mismatch_names_both_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy();
    let ckpt = silent_checkpoint(tmp.path(), &cfg);
    let sample = SyntheticGenerator::new(SyntheticConfig { d: 6, ..cfg.data.clone() }).unwrap().sample(0).unwrap();
    let feat = tmp.path().join("x.avrf");
    write_features(&feat, &sample.features).unwrap();
    let err = cmd_score(&cfg, &ckpt, &ScoreInputs::Files(vec![feat]), None, &tmp.path().join("o")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("d = 6") && msg.contains("d = 8"), "{msg}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn chunked_and_unchunked_scores_agree_on_a_short_video() {
    let cfg = toy();
    let net = Network::<f32>::new(ModelConfig { d: 8, ..cfg.model.clone() }).unwrap();
    let video = SyntheticGenerator::new(SyntheticConfig { t: 375, ..cfg.data.clone() }).unwrap().sample(1).unwrap();
    let post = &cfg.train.postprocess;
    let a = predict_video(&net, "v", &video.features, None, &cfg.validity, true, post).unwrap();
    let b = predict_video(&net, "v", &video.features, None, &cfg.validity, false, post).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.windows, vec![Interval::new(0.0, 15.0)]);

    // Longer content is split into 20 s windows and merged back.
    let long = SyntheticGenerator::new(SyntheticConfig { t: 1125, ..cfg.data.clone() }).unwrap().sample(1).unwrap();
    let c = predict_video(&net, "w", &long.features, None, &cfg.validity, true, post).unwrap();
    assert_eq!(c.windows.len(), 3);
    assert!(c.segments.iter().all(|s| s.start >= 0.0 && s.end <= 45.0 + 1e-9));
}

fn prediction(id: &str, scores: &[f64]) -> VideoPrediction {
    VideoPrediction {
        video_id: id.into(),
        duration: 10.0,
        valid: vec![Interval::new(0.0, 10.0)],
        windows: vec![Interval::new(0.0, 10.0)],
        segments: scores
            .iter()
            .enumerate()
            .map(|(i, &s)| SegmentPrediction::new(i as f64, i as f64 + 0.5 + s, s))
            .collect(),
    }
}

#[test]
fn calibration_on_separable_scores() {
    let preds = vec![
        prediction("f1", &[0.6, 0.4]),
        prediction("f2", &[0.35]),
        prediction("f3", &[0.9, 0.02]),
        prediction("r1", &[0.01, 0.03]),
        prediction("r2", &[]),
        prediction("r3", &[0.2]),
    ];
    let labels: HashMap<String, bool> = preds.iter().map(|p| (p.video_id.clone(), p.video_id.starts_with('f'))).collect();
    let grid = [0.2, 0.25, 0.3];
    let table = calibrate(&preds, &labels, &grid).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.iter().all(|r| r.auc == 1.0 && r.ap == 1.0), "{table:?}");
    assert_eq!(table.best_theta, 0.2);

    let one = calibrate(&preds, &labels, &[0.01]).unwrap();
    assert_eq!(one.rows.len(), 1);
    let scores: Vec<f64> = preds.iter().map(|p| aggregate(p, ScoreMode::PsiM, 0.01).unwrap()).collect();
    let y: Vec<bool> = preds.iter().map(|p| labels[&p.video_id]).collect();
    assert_eq!(one.rows[0].auc, oracles::roc_auc(&scores, &y));
    assert_eq!(one.rows[0].auc, roc_auc(&scores, &y).unwrap());

    let fakes_only: HashMap<String, bool> = labels.keys().map(|k| (k.clone(), true)).collect();
    assert!(calibrate(&preds, &fakes_only, &grid).is_err());
}

#[test]
fn calibrate_reads_score_output_and_label_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = [prediction("a", &[0.8]), prediction("b", &[])];
    let path = tmp.path().join("predictions.jsonl");
    let text: String = preds.iter().map(|p| serde_json::to_string(p).unwrap() + "\n").collect();
    std::fs::write(&path, text).unwrap();
    let labels = tmp.path().join("labels.tsv");
    std::fs::write(&labels, "a\t1\nb\t0\n").unwrap();
    let out = tmp.path().join("cal");
    let o = auvire(&[
        "calibrate",
        "--predictions",
        path.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--thetas",
        "0.01,0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(out.join(CALIBRATION)).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.lines().nth(1).unwrap().ends_with('*'));
}

#[test]
fn two_cell_sweep_ranks_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy();
    cfg.train.epochs = 1;
    cfg.grid = GridSpec {
        d_a: vec![4, 8],
        recon_layers: vec![1],
        encoder_layers: vec![1],
    };
    let manifest = cmd_generate(&cfg, &tmp.path().join("data")).unwrap();
    let out = tmp.path().join("sweep");
    let table = cmd_sweep(&cfg, &manifest, &out).unwrap();
    assert_eq!(table.rows.len(), 2);

    let components: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| r.result.metrics.as_ref().unwrap().criterion_components().to_vec())
        .collect();
    let ranks = average_ranks(&components);
    let best = (0..2).min_by(|&a, &b| ranks[a].total_cmp(&ranks[b])).unwrap();
    let tsv = std::fs::read_to_string(out.join(SWEEP_TSV)).unwrap();
    let starred: Vec<&str> = tsv.lines().filter(|l| l.starts_with('*')).collect();
    assert_eq!(starred.len(), 1);
    assert!(starred[0].contains(&table.rows[best].result.cell.name()));

    // Finished cells are read back rather than retrained.
    for row in &table.rows {
        std::fs::remove_dir_all(out.join("cells").join(row.result.cell.name())).unwrap();
    }
    let again = cmd_sweep(&cfg, &manifest, &out).unwrap();
    assert_eq!(again, table);
    assert!(!out.join("cells").join("da4_r1_e1").exists());
}

#[test]
fn shipped_synthetic_config_parses_and_validates() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.generate.num_samples, 2800);
    assert_eq!(cfg.data.d, cfg.model.d);
    assert_eq!((cfg.data.seed, cfg.model.init_seed, cfg.train.seed), (7, 7, 7));
    assert_eq!(cfg.model.pairs, ModelConfig::default().pairs);
}
