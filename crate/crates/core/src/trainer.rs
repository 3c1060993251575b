//! Deterministic training: per-sample graphs with gradients averaged over
//! each batch, bias-corrected Adam, reduce-on-plateau learning rate, early
//! stopping on the validation criterion, resumable checkpoints, and the
//! hyperparameter grid sweep.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use diffkit::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{len_u32, put_u32, read_file, write_file, Reader};
use crate::datagen::{pad_to_length, LabeledVideo};
use crate::evaluation::{evaluate, EvalRecord, MetricReport, CRITERION_METRICS};
use crate::network::checkpoint::{read_tensors, write_tensors};
use crate::network::{read_checkpoint, write_checkpoint, ModelConfig, Network};
use crate::objectives::{total_loss_graph, LossConfig, LossReport};
use crate::postprocess::{predict_segments, video_score, PostprocessConfig};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum criterion gain that counts as an improvement.
    pub improvement_threshold: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Longest sequence a batch may hold after padding.
    pub max_len: usize,
    /// Weights of AP@{0.5,0.75,0.95} and AR@{100,50,20,10} in the criterion.
    pub criterion_weights: [f64; 7],
    pub postprocess: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            plateau_factor: 0.5,
            plateau_patience: 5,
            improvement_threshold: 1e-4,
            early_stop_patience: 10,
            seed: 0,
            max_len: 512,
            criterion_weights: [1.0; 7],
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.lr > 0.0
            && self.batch_size >= 1
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.plateau_patience >= 1
            && self.improvement_threshold >= 0.0
            && self.early_stop_patience >= self.plateau_patience
            && self.max_len >= 1
            && self.criterion_weights.iter().all(|&w| w >= 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid training configuration: {self:?}")));
        }
        self.postprocess.validate()
    }

    pub fn criterion(&self, report: &MetricReport) -> f64 {
        report
            .criterion_components()
            .iter()
            .zip(&self.criterion_weights)
            .map(|(m, w)| m * w)
            .sum()
    }
}

/// Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    names: &[String],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam: gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                detail: format!("parameter {name} element {j} is {}", g.data()[j]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::lit(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::lit(1.0 - ADAM_BETA2.powi(t));
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let (one, eps, lr) = (T::one(), T::lit(ADAM_EPS), T::lit(lr));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything needed to continue training after the last completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState<f32>,
    pub lr: f64,
    pub best_criterion: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    /// Non-improving epochs since the last learning-rate reduction.
    pub plateau_count: usize,
    pub finished: bool,
}

impl TrainState {
    pub fn new(net: &Network<f32>, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            adam: AdamState::new(net.params()),
            lr: cfg.lr,
            best_criterion: None,
            best_epoch: None,
            epochs_since_improvement: 0,
            plateau_count: 0,
            finished: false,
        }
    }

    /// Records one epoch's criterion; returns whether it improved on the best.
    /// Re-evaluates the stopping rule under `cfg`, so a saved run can be
    /// continued with a larger epoch budget.
    pub fn reopen(&mut self, cfg: &TrainConfig) {
        self.finished = self.epoch >= cfg.epochs || self.epochs_since_improvement >= cfg.early_stop_patience;
    }

    pub fn observe(&mut self, criterion: f64, cfg: &TrainConfig) -> bool {
        let improved = self
            .best_criterion
            .is_none_or(|best| criterion > best + cfg.improvement_threshold);
        if improved {
            self.best_criterion = Some(criterion);
            self.best_epoch = Some(self.epoch);
            self.epochs_since_improvement = 0;
            self.plateau_count = 0;
        } else {
            self.epochs_since_improvement += 1;
            self.plateau_count += 1;
            if self.plateau_count >= cfg.plateau_patience {
                self.lr *= cfg.plateau_factor;
                self.plateau_count = 0;
            }
        }
        self.epoch += 1;
        if self.epochs_since_improvement >= cfg.early_stop_patience || self.epoch >= cfg.epochs {
            self.finished = true;
        }
        improved
    }
}

pub const STATE_MAGIC: &[u8; 4] = b"AVRS";
pub const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    step: u64,
    lr: f64,
    best_criterion: Option<f64>,
    best_epoch: Option<usize>,
    epochs_since_improvement: usize,
    plateau_count: usize,
    finished: bool,
}

impl TrainState {
    /// `AVRS` encoding: magic, u32 version, u32 header length, JSON header,
    /// then the first and second moments in the checkpoint tensor layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&StateHeader {
            epoch: self.epoch,
            step: self.adam.step,
            lr: self.lr,
            best_criterion: self.best_criterion,
            best_epoch: self.best_epoch,
            epochs_since_improvement: self.epochs_since_improvement,
            plateau_count: self.plateau_count,
            finished: self.finished,
        })
        .map_err(|e| Error::contract(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        put_u32(&mut out, STATE_VERSION);
        put_u32(&mut out, len_u32(header.len(), "state header")?);
        out.extend_from_slice(&header);
        write_tensors(&mut out, &self.adam.m)?;
        write_tensors(&mut out, &self.adam.v)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(STATE_MAGIC)?;
        r.version(STATE_VERSION)?;
        let n = r.u32()? as usize;
        let at = r.offset();
        let h: StateHeader = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format {
            offset: at,
            detail: format!("train state header: {e}"),
        })?;
        let m = read_tensors(&mut r)?;
        let v = read_tensors(&mut r)?;
        r.finish()?;
        Ok(Self {
            epoch: h.epoch,
            adam: AdamState { m, v, step: h.step },
            lr: h.lr,
            best_criterion: h.best_criterion,
            best_epoch: h.best_epoch,
            epochs_since_improvement: h.epochs_since_improvement,
            plateau_count: h.plateau_count,
            finished: h.finished,
        })
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_loc: f64,
    pub train_rec: Option<f64>,
    pub train_det: Option<f64>,
    pub criterion: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    pub val: MetricReport,
}

/// Mean gradients of the total loss over `batch`, padded to its longest
/// sequence, together with the mean loss terms.
pub fn batch_gradients<T: Scalar>(
    net: &Network<T>,
    batch: &[&LabeledVideo],
    loss_cfg: &LossConfig,
    max_len: usize,
) -> Result<(Vec<Tensor<T>>, LossReport)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let len = batch.iter().map(|v| v.features.t()).max().unwrap_or(0);
    if len > max_len {
        return Err(Error::contract(format!(
            "sequence of {len} frames exceeds the maximum length {max_len}"
        )));
    }
    let mut acc: Vec<Tensor<T>> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut sums = [0.0f64; 4];
    for video in batch {
        let (features, ann) = pad_to_length(&video.features.cast::<T>(), &video.annotation, len)?;
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let out = net.forward(&mut g, &bound, &features)?;
        let loss = total_loss_graph(&mut g, &out, &ann, loss_cfg)?;
        let report = loss.report(&g);
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                detail: format!("video {}: {report:?}", video.id),
            });
        }
        g.backward(loss.total)?;
        for (a, &v) in acc.iter_mut().zip(bound.vars()) {
            let grad = g.grad(v);
            for (x, &y) in a.data_mut().iter_mut().zip(grad.data()) {
                *x += y;
            }
        }
        sums[0] += report.total;
        sums[1] += report.loc;
        sums[2] += report.rec.unwrap_or(0.0);
        sums[3] += report.det.unwrap_or(0.0);
    }
    let n = batch.len() as f64;
    let scale = T::lit(1.0 / n);
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((
        acc,
        LossReport {
            total: sums[0] / n,
            loc: sums[1] / n,
            rec: loss_cfg.has(crate::network::LossTerm::RecMae).then_some(sums[2] / n),
            det: loss_cfg.has(crate::network::LossTerm::DetBce).then_some(sums[3] / n),
        },
    ))
}

/// One optimisation step on `batch`; returns the loss before the update.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut AdamState<T>,
    batch: &[&LabeledVideo],
    lr: f64,
    max_len: usize,
) -> Result<LossReport> {
    let loss_cfg = LossConfig::for_model(net.config());
    let (grads, report) = batch_gradients(net, batch, &loss_cfg, max_len)?;
    let names = net.param_names().to_vec();
    adam_step(net.params_mut(), &grads, adam, lr, &names)?;
    Ok(report)
}

/// Post-NMS predictions and video scores of `net` on `videos`.
pub fn predict_records<T: Scalar>(
    net: &Network<T>,
    videos: &[LabeledVideo],
    post: &PostprocessConfig,
) -> Result<Vec<EvalRecord>> {
    videos
        .iter()
        .map(|v| {
            let (_, pyramid) = net.infer(&v.features.cast::<T>())?;
            let predictions = predict_segments(&pyramid, post);
            Ok(EvalRecord {
                video_id: v.id.clone(),
                video_score: video_score(&predictions),
                video_label: v.annotation.any_positive(),
                predictions,
                ground_truth: v.segments.clone(),
            })
        })
        .collect()
}

/// Validation criterion and full metric report.
pub fn validate<T: Scalar>(
    net: &Network<T>,
    val: &[LabeledVideo],
    cfg: &TrainConfig,
) -> Result<(f64, MetricReport)> {
    if !val.iter().any(|v| v.annotation.any_positive()) {
        return Err(Error::contract("validation set needs at least one fake video"));
    }
    let records = predict_records(net, val, &cfg.postprocess)?;
    let report = evaluate(&records)?;
    Ok((cfg.criterion(&report), report))
}

/// Receives the run after every epoch.
pub trait TrainObserver {
    fn on_epoch(&mut self, _run: &TrainRun, _improved: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores every epoch.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Model, best snapshot, optimiser state and history of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: Network<f32>,
    pub best: Network<f32>,
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

impl TrainRun {
    pub fn new(net: Network<f32>, cfg: &TrainConfig) -> Self {
        Self {
            state: TrainState::new(&net, cfg),
            best: net.clone(),
            net,
            history: Vec::new(),
        }
    }
}

/// Shuffled sample order of `epoch`; a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains until the epoch budget or early stopping, starting from `run`.
pub fn train(
    mut run: TrainRun,
    train_set: &[LabeledVideo],
    val_set: &[LabeledVideo],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let train_ids: HashSet<&str> = train_set.iter().map(|v| v.id.as_str()).collect();
    if let Some(v) = val_set.iter().find(|v| train_ids.contains(v.id.as_str())) {
        return Err(Error::contract(format!("video {} is in both training and validation sets", v.id)));
    }
    let loss_cfg = LossConfig::for_model(run.net.config());
    let names = run.net.param_names().to_vec();
    while !run.state.finished {
        let epoch = run.state.epoch;
        let lr = run.state.lr;
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledVideo> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (grads, report) = batch_gradients(&run.net, &batch, &loss_cfg, cfg.max_len).map_err(|e| match e {
                Error::NonFinite { what, detail } => Error::NonFinite {
                    what,
                    detail: format!("epoch {epoch}, batch {b}: {detail}"),
                },
                other => other,
            })?;
            adam_step(run.net.params_mut(), &grads, &mut run.state.adam, lr, &names)?;
            let w = batch.len() as f64;
            sums[0] += report.total * w;
            sums[1] += report.loc * w;
            sums[2] += report.rec.unwrap_or(0.0) * w;
            sums[3] += report.det.unwrap_or(0.0) * w;
        }
        let (criterion, val) = validate(&run.net, val_set, cfg)?;
        let improved = run.state.observe(criterion, cfg);
        if improved {
            run.best = run.net.clone();
        }
        let n = train_set.len() as f64;
        run.history.push(HistoryRow {
            epoch,
            train_loss: sums[0] / n,
            train_loc: sums[1] / n,
            train_rec: loss_cfg.has(crate::network::LossTerm::RecMae).then_some(sums[2] / n),
            train_det: loss_cfg.has(crate::network::LossTerm::DetBce).then_some(sums[3] / n),
            criterion,
            lr,
            improved,
            val,
        });
        observer.on_epoch(&run, improved)?;
    }
    Ok(run)
}

/// Writes `best.avrm`, `last.avrm`, `last.state` and `history.jsonl` into a
/// directory after every epoch.
pub struct FileCheckpointer {
    pub dir: PathBuf,
}

impl FileCheckpointer {
    pub const BEST: &'static str = "best.avrm";
    pub const LAST: &'static str = "last.avrm";
    pub const STATE: &'static str = "last.state";
    pub const HISTORY: &'static str = "history.jsonl";

    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    /// The saved run in `dir`, if a previous run left one.
    pub fn resume(&self) -> Result<Option<TrainRun>> {
        let last = self.dir.join(Self::LAST);
        if !last.exists() {
            return Ok(None);
        }
        let net = read_checkpoint(&last)?;
        let best = read_checkpoint(&self.dir.join(Self::BEST))?;
        let state = TrainState::from_bytes(&read_file(&self.dir.join(Self::STATE))?)?;
        let history = read_history(&self.dir.join(Self::HISTORY))?;
        if history.len() != state.epoch {
            return Err(Error::contract(format!(
                "history has {} rows but the state records {} epochs",
                history.len(),
                state.epoch
            )));
        }
        Ok(Some(TrainRun {
            net,
            best,
            state,
            history,
        }))
    }
}

impl TrainObserver for FileCheckpointer {
    fn on_epoch(&mut self, run: &TrainRun, improved: bool) -> Result<()> {
        if improved || !self.dir.join(Self::BEST).exists() {
            write_checkpoint(&self.dir.join(Self::BEST), &run.best)?;
        }
        write_checkpoint(&self.dir.join(Self::LAST), &run.net)?;
        write_file(&self.dir.join(Self::STATE), &run.state.to_bytes()?)?;
        write_history(&self.dir.join(Self::HISTORY), &run.history)
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path, e))?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

/// Axes of the hyperparameter grid. Reconstruction depth sets both
/// `l_down_r` and `l_up_r`; encoder depth sets both `l_retain_e` and `l_down_e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub d_a: Vec<usize>,
    pub recon_layers: Vec<usize>,
    pub encoder_layers: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            d_a: vec![32, 64, 128, 256],
            recon_layers: vec![1, 2, 3],
            encoder_layers: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub d_a: usize,
    pub recon_layers: usize,
    pub encoder_layers: usize,
}

impl GridCell {
    pub fn name(&self) -> String {
        format!("da{}_r{}_e{}", self.d_a, self.recon_layers, self.encoder_layers)
    }

    /// `base` with this cell's values; `q` follows `d_a`.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            d_a: self.d_a,
            q: self.d_a,
            l_down_r: self.recon_layers,
            l_up_r: self.recon_layers,
            l_retain_e: self.encoder_layers,
            l_down_e: self.encoder_layers,
            ..base.clone()
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &d_a in &self.d_a {
            for &recon_layers in &self.recon_layers {
                for &encoder_layers in &self.encoder_layers {
                    out.push(GridCell {
                        d_a,
                        recon_layers,
                        encoder_layers,
                    });
                }
            }
        }
        out
    }
}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub metrics: Option<MetricReport>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

/// Average rank of every row across the columns of `table`, rank 1 being the
/// highest value of a column. Tied values share the mean of their ranks.
pub fn average_ranks(table: &[Vec<f64>]) -> Vec<f64> {
    let n = table.len();
    let mut total = vec![0.0; n];
    let cols = table.first().map_or(0, Vec::len);
    for c in 0..cols {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| table[b][c].total_cmp(&table[a][c]));
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && table[order[j + 1]][c] == table[order[i]][c] {
                j += 1;
            }
            let rank = (i + j + 2) as f64 / 2.0;
            for &o in &order[i..=j] {
                total[o] += rank;
            }
            i = j + 1;
        }
    }
    total.iter().map(|t| t / cols.max(1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub result: CellResult,
    /// `None` for failed cells.
    pub average_rank: Option<f64>,
}

/// Cells ordered best first by average rank; failed cells come last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn from_results(results: Vec<CellResult>) -> Self {
        let (ok, failed): (Vec<CellResult>, Vec<CellResult>) = results.into_iter().partition(|r| r.metrics.is_some());
        let table: Vec<Vec<f64>> = ok
            .iter()
            .map(|r| r.metrics.as_ref().map(|m| m.criterion_components().to_vec()).unwrap_or_default())
            .collect();
        let ranks = average_ranks(&table);
        let mut rows: Vec<SweepRow> = ok
            .into_iter()
            .zip(ranks)
            .map(|(result, r)| SweepRow {
                result,
                average_rank: Some(r),
            })
            .collect();
        rows.sort_by(|a, b| a.average_rank.unwrap().total_cmp(&b.average_rank.unwrap()));
        rows.extend(failed.into_iter().map(|result| SweepRow {
            result,
            average_rank: None,
        }));
        Self { rows }
    }

    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.first().filter(|r| r.average_rank.is_some())
    }

    /// Tab-separated table; the best row is marked with `*`.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("best\tcell\td_a\trecon_layers\tencoder_layers\taverage_rank\t{}\terror\n", CRITERION_METRICS.join("\t"));
        for (i, row) in self.rows.iter().enumerate() {
            let c = row.result.cell;
            let mark = if i == 0 && row.average_rank.is_some() { "*" } else { "" };
            let rank = row.average_rank.map(|r| format!("{r:.3}")).unwrap_or_default();
            let metrics = match &row.result.metrics {
                Some(m) => m.criterion_components().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("\t"),
                None => vec![""; 7].join("\t"),
            };
            s.push_str(&format!(
                "{mark}\t{}\t{}\t{}\t{}\t{rank}\t{metrics}\t{}\n",
                c.name(),
                c.d_a,
                c.recon_layers,
                c.encoder_layers,
                row.result.error.as_deref().unwrap_or("")
            ));
        }
        s
    }
}

/// Trains and validates every grid cell. With `out_dir`, each cell stores its
/// result in `<cell>.json` and its checkpoints in `<cell>/`; cells whose
/// result file exists are not re-run.
pub fn grid_sweep(
    base: &ModelConfig,
    grid: &GridSpec,
    train_set: &[LabeledVideo],
    val_set: &[LabeledVideo],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let mut results = Vec::new();
    for cell in grid.cells() {
        let result_path = out_dir.map(|d| d.join(format!("{}.json", cell.name())));
        if let Some(p) = result_path.as_ref().filter(|p| p.exists()) {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            results.push(serde_json::from_str(&text).map_err(|e| Error::json(p, e))?);
            continue;
        }
        let outcome = (|| -> Result<(MetricReport, Option<usize>)> {
            let net = Network::new(cell.apply(base))?;
            let run = TrainRun::new(net, cfg);
            let run = match out_dir {
                Some(d) => train(run, train_set, val_set, cfg, &mut FileCheckpointer::new(d.join(cell.name()))?)?,
                None => train(run, train_set, val_set, cfg, &mut NoObserver)?,
            };
            let (_, report) = validate(&run.best, val_set, cfg)?;
            Ok((report, run.state.best_epoch))
        })();
        let result = match outcome {
            Ok((m, best_epoch)) => CellResult {
                cell,
                metrics: Some(m),
                best_epoch,
                error: None,
            },
            Err(e) => CellResult {
                cell,
                metrics: None,
                best_epoch: None,
                error: Some(e.to_string()),
            },
        };
        if let Some(p) = &result_path {
            let text = serde_json::to_string(&result).map_err(|e| Error::json(p, e))?;
            write_file(p, text.as_bytes())?;
        }
        results.push(result);
    }
    Ok(SweepTable::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = vec![Tensor::scalar(0.5f64)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3, &["w".into()]).unwrap();
        assert!((p[0].item() - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 1e-3, &["w".into()]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = vec![Tensor::scalar(0.0f64), Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(f64::NAN)];
        let err = adam_step(&mut p, &g, &mut s, 1e-3, &["a".into(), "enc.b".into()]).unwrap_err();
        assert!(err.to_string().contains("enc.b"), "{err}");
        assert_eq!(s.step, 0);
    }

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn frozen_criterion_stops_at_best_plus_patience() {
        let net = Network::<f32>::new(ModelConfig {
            d: 2,
            d_a: 2,
            q: 2,
            kernel: 3,
            l_pre_r: 1,
            l_down_r: 1,
            l_up_r: 1,
            l_post_r: 1,
            l_retain_e: 1,
            l_down_e: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let c = cfg();
        let mut s = TrainState::new(&net, &c);
        let mut lrs = Vec::new();
        while !s.finished {
            s.observe(1.0, &c);
            lrs.push(s.lr);
        }
        assert_eq!(s.best_epoch, Some(0));
        assert_eq!(s.epoch, 11);
        assert_eq!(lrs[4], 1e-3);
        assert_eq!(lrs[5], 5e-4);
        assert_eq!(lrs[10], 2.5e-4);
    }

    #[test]
    fn ranks_with_ties() {
        let t = vec![vec![0.9, 0.1], vec![0.5, 0.1], vec![0.5, 0.7]];
        // Column 0 ranks 1, 2.5, 2.5; column 1 ranks 2.5, 2.5, 1.
        assert_eq!(average_ranks(&t), vec![1.75, 2.5, 1.75]);
    }

    #[test]
    fn full_grid_has_36_cells() {
        assert_eq!(GridSpec::default().cells().len(), 36);
    }
}
