use std::collections::HashMap;
use std::path::{Path, PathBuf};

use auvire_core::datagen::{
    load_split, read_features, read_manifest, write_features, write_manifest, AnnotationRecord, LabeledVideo,
    ManifestEntry, Split, SyntheticGenerator,
};
use auvire_core::evaluation::{binary_ap, evaluate, roc_auc, MetricReport};
use auvire_core::network::{read_checkpoint, FeaturePair, Network};
use auvire_core::postprocess::{predict_segments, soft_nms, video_score, PostprocessConfig};
use auvire_core::trainer::{grid_sweep, predict_records, train, FileCheckpointer, SweepTable, TrainObserver, TrainRun};
use auvire_core::wildscore::{
    chunk_plan, psi_m, psi_s, talking_mask, valid_segments, window_frames, ValidSegments, ValidityFile, ValiditySpec,
};
use auvire_core::{Interval, SegmentPrediction};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScoreMode};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.tsv";
pub const METRICS: &str = "metrics.json";
pub const TEST_PREDICTIONS: &str = "test_predictions.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const CALIBRATION: &str = "calibration.tsv";
pub const SWEEP_TSV: &str = "sweep.tsv";
pub const SWEEP_JSON: &str = "sweep.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Usage(e.to_string()))?);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect()
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Train, validation and test sizes for `n` samples; the test split takes
/// the rounding remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Writes `features/<id>.avrf`, `annotations/<id>.json` and `manifest.tsv`
/// under `out`, splitting samples by a seeded shuffle.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let gen = SyntheticGenerator::new(cfg.data.clone())?;
    let n = cfg.generate.num_samples;
    let sizes = split_sizes(n, cfg.generate.split_ratios);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut split_of = vec![Split::Train; n];
    for &i in &order[sizes[0]..sizes[0] + sizes[1]] {
        split_of[i] = Split::Val;
    }
    for &i in &order[sizes[0] + sizes[1]..] {
        split_of[i] = Split::Test;
    }

    create_dir(&out.join("features"))?;
    create_dir(&out.join("annotations"))?;
    cfg.write_resolved(out)?;
    let mut entries = Vec::with_capacity(n);
    for (i, &split) in split_of.iter().enumerate() {
        let sample = gen.sample(i as u64)?;
        let id = &sample.record.id;
        let features = PathBuf::from("features").join(format!("{id}.avrf"));
        let annotation = PathBuf::from("annotations").join(format!("{id}.json"));
        write_features(&out.join(&features), &sample.features)?;
        sample.record.write(&out.join(&annotation))?;
        entries.push(ManifestEntry {
            features,
            annotation,
            split,
        });
    }
    let manifest = out.join(MANIFEST);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Test-split outcome of a training run, written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub val_criterion: Option<f64>,
    pub test_criterion: f64,
    pub test: MetricReport,
}

struct Progress {
    files: FileCheckpointer,
    verbose: bool,
}

impl TrainObserver for Progress {
    fn on_epoch(&mut self, run: &TrainRun, improved: bool) -> auvire_core::Result<()> {
        self.files.on_epoch(run, improved)?;
        if self.verbose {
            if let Some(h) = run.history.last() {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  criterion {:.4}  lr {:.2e}{}",
                    h.epoch,
                    h.train_loss,
                    h.criterion,
                    h.lr,
                    if improved { "  *" } else { "" }
                );
            }
        }
        Ok(())
    }
}

fn load_splits(manifest: &Path) -> CliResult<[Vec<LabeledVideo>; 3]> {
    require_file(manifest, "manifest")?;
    let entries = read_manifest(manifest)?;
    Ok([
        load_split(&entries, Split::Train)?,
        load_split(&entries, Split::Val)?,
        load_split(&entries, Split::Test)?,
    ])
}

fn check_dim(videos: &[LabeledVideo], d: usize) -> CliResult<()> {
    match videos.iter().find(|v| v.features.d() != d) {
        Some(v) => Err(CliError::Usage(format!(
            "video {} has feature dimension d = {} but the model expects d = {d}",
            v.id,
            v.features.d()
        ))),
        None => Ok(()),
    }
}

/// Trains on the manifest's train split, selects on val, reports on test.
/// A previous run left in `out` is resumed.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, verbose: bool) -> CliResult<TrainReport> {
    cfg.validate()?;
    let [train_set, val_set, test_set] = load_splits(manifest)?;
    for (name, set) in [("train", &train_set), ("val", &val_set), ("test", &test_set)] {
        if set.is_empty() {
            return Err(CliError::Usage(format!("manifest {} has an empty {name} split", manifest.display())));
        }
        check_dim(set, cfg.model.d)?;
    }
    let files = FileCheckpointer::new(out)?;
    let run = match files.resume()? {
        Some(run) if run.net.config() != &cfg.model => {
            return Err(CliError::Usage(format!(
                "{} holds a run with a different model configuration",
                out.display()
            )))
        }
        Some(mut run) => {
            run.state.reopen(&cfg.train);
            run
        }
        None => TrainRun::new(Network::new(cfg.model.clone())?, &cfg.train),
    };
    cfg.write_resolved(out)?;
    let run = train(run, &train_set, &val_set, &cfg.train, &mut Progress { files, verbose })?;
    let records = predict_records(&run.best, &test_set, &cfg.train.postprocess)?;
    write_json_lines(&out.join(TEST_PREDICTIONS), &records)?;
    let test = evaluate(&records)?;
    let report = TrainReport {
        best_epoch: run.state.best_epoch,
        epochs: run.state.epoch,
        val_criterion: run.state.best_criterion,
        test_criterion: cfg.train.criterion(&test),
        test,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(&out.join(METRICS), &(text + "\n"))?;
    Ok(report)
}

/// Scored segments of one video in absolute time, with the valid ranges
/// they were predicted in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub duration: f64,
    pub valid: Vec<Interval>,
    pub windows: Vec<Interval>,
    pub segments: Vec<SegmentPrediction>,
}

/// One line of the score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub score: f64,
    pub n_segments: usize,
}

/// Runs the model over every window of a video's valid ranges. Each window's
/// post-processed segments are shifted to absolute time; with more than one
/// window a second SoftNMS pass merges duplicates across window borders.
pub fn predict_video(
    net: &Network<f32>,
    video_id: &str,
    features: &FeaturePair<f64>,
    presence: Option<&[bool]>,
    spec: &ValiditySpec,
    chunking: bool,
    post: &PostprocessConfig,
) -> CliResult<VideoPrediction> {
    let d = net.config().d;
    if features.d() != d {
        return Err(CliError::Usage(format!(
            "video {video_id} has feature dimension d = {} but the checkpoint expects d = {d}",
            features.d()
        )));
    }
    let t = features.valid_len;
    let fps = features.fps;
    let all_present = vec![true; t];
    let presence = presence.unwrap_or(&all_present);
    if presence.len() != t {
        return Err(CliError::Usage(format!(
            "validity for {video_id} covers {} frames, the features have {t}",
            presence.len()
        )));
    }
    let talking = talking_mask(&features.visual, spec.talk_threshold);
    let beta = valid_segments(presence, &talking[..t], fps, spec)?;
    let windows = if chunking {
        chunk_plan(&beta, spec.chunk_s, spec.min_segment_s)?
    } else {
        beta.beta.clone()
    };
    let mut merged = Vec::new();
    let mut used = Vec::new();
    for w in &windows {
        let (a, b) = window_frames(*w, fps, t);
        if b <= a {
            continue;
        }
        let (_, pyramid) = net.infer(&features.slice_frames(a, b)?.cast::<f32>())?;
        let offset = a as f64 / fps;
        merged.extend(
            predict_segments(&pyramid, post)
                .into_iter()
                .map(|s| SegmentPrediction::new(s.start + offset, s.end + offset, s.score)),
        );
        used.push(*w);
    }
    let segments = if used.len() > 1 {
        soft_nms(&merged, post.sigma_nms, post.min_score)
    } else {
        merged
    };
    Ok(VideoPrediction {
        video_id: video_id.to_string(),
        duration: features.duration(),
        valid: beta.beta,
        windows: used,
        segments,
    })
}

/// Video score under `mode`. A video without valid time scores 0 under Ψ_m.
pub fn aggregate(pred: &VideoPrediction, mode: ScoreMode, theta: f64) -> CliResult<f64> {
    Ok(match mode {
        ScoreMode::PsiM => {
            let beta = ValidSegments {
                beta: pred.valid.clone(),
            };
            if beta.measure() > 0.0 {
                psi_m(&pred.segments, theta, &beta)?
            } else {
                0.0
            }
        }
        ScoreMode::PsiS => psi_s(&pred.segments),
        ScoreMode::Video => video_score(&pred.segments),
    })
}

/// Feature files to score: a manifest (optionally one split) or explicit paths.
#[derive(Debug, Clone)]
pub enum ScoreInputs {
    Manifest { path: PathBuf, split: Option<Split> },
    Files(Vec<PathBuf>),
}

impl ScoreInputs {
    fn feature_paths(&self) -> CliResult<Vec<PathBuf>> {
        match self {
            ScoreInputs::Manifest { path, split } => {
                require_file(path, "manifest")?;
                Ok(read_manifest(path)?
                    .into_iter()
                    .filter(|e| split.is_none_or(|s| s == e.split))
                    .map(|e| e.features)
                    .collect())
            }
            ScoreInputs::Files(paths) => {
                for p in paths {
                    require_file(p, "feature file")?;
                }
                Ok(paths.clone())
            }
        }
    }
}

/// Scores every input video. Writes `scores.jsonl` and `predictions.jsonl`
/// to `out`; every input is read and checked before anything is written.
pub fn cmd_score(
    cfg: &RunConfig,
    checkpoint: &Path,
    inputs: &ScoreInputs,
    validity_dir: Option<&Path>,
    out: &Path,
) -> CliResult<Vec<ScoreRecord>> {
    cfg.validate()?;
    require_file(checkpoint, "checkpoint")?;
    let net: Network<f32> = read_checkpoint(checkpoint)?;
    let mut videos = Vec::new();
    for path in inputs.feature_paths()? {
        let rec = read_features(&path)?;
        if rec.features.d() != net.config().d {
            return Err(CliError::Usage(format!(
                "{} has feature dimension d = {} but the checkpoint expects d = {}",
                path.display(),
                rec.features.d(),
                net.config().d
            )));
        }
        let presence = match validity_dir {
            Some(dir) => {
                let vpath = dir.join(format!("{}.json", rec.id));
                require_file(&vpath, "validity file")?;
                Some(ValidityFile::read(&vpath)?.mask())
            }
            None => None,
        };
        videos.push((rec, presence));
    }

    let mut predictions = Vec::with_capacity(videos.len());
    for (rec, presence) in &videos {
        predictions.push(predict_video(
            &net,
            &rec.id,
            &rec.features,
            presence.as_deref(),
            &cfg.validity,
            cfg.score.chunking,
            &cfg.train.postprocess,
        )?);
    }
    let scores = predictions
        .iter()
        .map(|p| {
            Ok(ScoreRecord {
                video_id: p.video_id.clone(),
                score: aggregate(p, cfg.score.mode, cfg.score.theta)?,
                n_segments: p.segments.len(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    write_json_lines(&out.join(PREDICTIONS), &predictions)?;
    write_json_lines(&out.join(SCORES), &scores)?;
    Ok(scores)
}

/// Where calibration reads the real/fake label of each video.
#[derive(Debug, Clone)]
pub enum LabelSource {
    /// A video is fake when its annotation lists a segment.
    Manifest(PathBuf),
    /// `video_id<TAB>0|1` lines.
    Table(PathBuf),
}

pub fn read_labels(source: &LabelSource) -> CliResult<HashMap<String, bool>> {
    match source {
        LabelSource::Manifest(path) => {
            require_file(path, "manifest")?;
            read_manifest(path)?
                .iter()
                .map(|e| {
                    let ann = AnnotationRecord::read(&e.annotation)?;
                    Ok((ann.id, !ann.segments.is_empty()))
                })
                .collect()
        }
        LabelSource::Table(path) => {
            require_file(path, "label table")?;
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(n, l)| match l.split('\t').collect::<Vec<_>>().as_slice() {
                    [id, "0"] => Ok((id.to_string(), false)),
                    [id, "1"] => Ok((id.to_string(), true)),
                    _ => Err(CliError::Usage(format!(
                        "{} line {}: expected `video_id<TAB>0|1`",
                        path.display(),
                        n + 1
                    ))),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub theta: f64,
    pub auc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rows: Vec<CalibrationRow>,
    /// First grid value reaching the highest AUC.
    pub best_theta: f64,
}

impl Calibration {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("theta\tauc\tap\tbest\n");
        for r in &self.rows {
            let mark = if r.theta == self.best_theta { "*" } else { "" };
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{mark}\n", r.theta, r.auc, r.ap));
        }
        s
    }
}

/// ROC-AUC and binary AP of Ψ_m at every θ of `grid`.
pub fn calibrate(predictions: &[VideoPrediction], labels: &HashMap<String, bool>, grid: &[f64]) -> CliResult<Calibration> {
    if grid.is_empty() {
        return Err(CliError::Usage("theta grid is empty".into()));
    }
    let y = predictions
        .iter()
        .map(|p| {
            labels
                .get(&p.video_id)
                .copied()
                .ok_or_else(|| CliError::Usage(format!("no label for video {}", p.video_id)))
        })
        .collect::<CliResult<Vec<bool>>>()?;
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(CliError::Usage("calibration needs both real and fake videos".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &theta in grid {
        let scores = predictions
            .iter()
            .map(|p| aggregate(p, ScoreMode::PsiM, theta))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(CalibrationRow {
            theta,
            auc: roc_auc(&scores, &y)?,
            ap: binary_ap(&scores, &y)?,
        });
    }
    let best = rows.iter().fold(&rows[0], |b, r| if r.auc > b.auc { r } else { b });
    Ok(Calibration {
        best_theta: best.theta,
        rows,
    })
}

/// Reads a prediction file from `cmd_score` and writes `calibration.tsv`.
pub fn cmd_calibrate(cfg: &RunConfig, predictions: &Path, labels: &LabelSource, out: &Path) -> CliResult<Calibration> {
    cfg.validate()?;
    require_file(predictions, "prediction file")?;
    let preds: Vec<VideoPrediction> = read_json_lines(predictions)?;
    let labels = read_labels(labels)?;
    let table = calibrate(&preds, &labels, &cfg.calibrate.theta_grid)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    write_text(&out.join(CALIBRATION), &table.to_tsv())?;
    Ok(table)
}

/// Runs the configured grid; per-cell results and checkpoints go to
/// `out/cells`, so an interrupted sweep skips finished cells.
pub fn cmd_sweep(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult<SweepTable> {
    cfg.validate()?;
    let [train_set, val_set, _] = load_splits(manifest)?;
    check_dim(&train_set, cfg.model.d)?;
    check_dim(&val_set, cfg.model.d)?;
    let cells = out.join("cells");
    create_dir(&cells)?;
    cfg.write_resolved(out)?;
    let table = grid_sweep(&cfg.model, &cfg.grid, &train_set, &val_set, &cfg.train, Some(&cells))?;
    write_text(&out.join(SWEEP_TSV), &table.to_tsv())?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::Usage(e.to_string()))?;
    write_text(&out.join(SWEEP_JSON), &(json + "\n"))?;
    Ok(table)
}
