//! Temporal detection metrics (AP@IoU, AR@K) and binary detection metrics
//! (ROC-AUC, average precision of video scores).

use serde::{Deserialize, Serialize};

use crate::{Error, Interval, Result, SegmentPrediction};

/// One video's predictions, ground truth and video-level score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub video_id: String,
    pub predictions: Vec<SegmentPrediction>,
    pub ground_truth: Vec<Interval>,
    pub video_score: f64,
    pub video_label: bool,
}

/// IoU thresholds averaged by AR@K: 0.50, 0.55, …, 0.95.
pub fn ar_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Temporal IoU of two non-degenerate intervals.
pub fn iou_1d(a: Interval, b: Interval) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::contract(format!("degenerate interval: {a:?} vs {b:?}")));
    }
    Ok(a.iou(&b))
}

fn total_gt(records: &[EvalRecord]) -> Result<usize> {
    let n: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    if n == 0 {
        return Err(Error::UndefinedMetric("no ground-truth segments".into()));
    }
    Ok(n)
}

/// All-point average precision at one IoU threshold, predictions pooled
/// across videos and greedily matched in descending score order.
pub fn ap_at_iou(records: &[EvalRecord], iou_threshold: f64) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::contract(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let n_gt = total_gt(records)?;
    let mut pooled: Vec<(usize, &SegmentPrediction)> = records
        .iter()
        .enumerate()
        .flat_map(|(v, r)| r.predictions.iter().map(move |p| (v, p)))
        .collect();
    pooled.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    let (mut tp, mut ap) = (0usize, 0.0);
    for (rank, (v, pred)) in pooled.iter().enumerate() {
        let iv = pred.interval();
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in records[*v].ground_truth.iter().enumerate() {
            if matched[*v][j] {
                continue;
            }
            let iou = iv.iou(gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            matched[*v][j] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_gt as f64)
}

/// Average recall over `iou_thresholds` with each video's top-`k` predictions.
/// A ground-truth segment counts as recalled at a threshold when any of the
/// kept predictions overlaps it at least that much.
pub fn ar_at_k(records: &[EvalRecord], k: usize, iou_thresholds: &[f64]) -> Result<f64> {
    if k == 0 || iou_thresholds.is_empty() {
        return Err(Error::contract("AR needs k >= 1 and at least one threshold"));
    }
    let n_gt = total_gt(records)?;
    let mut hits = vec![0usize; iou_thresholds.len()];
    for r in records {
        let mut preds: Vec<&SegmentPrediction> = r.predictions.iter().collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        preds.truncate(k);
        for gt in &r.ground_truth {
            let best = preds.iter().map(|p| p.interval().iou(gt)).fold(0.0, f64::max);
            for (h, &thr) in hits.iter_mut().zip(iou_thresholds) {
                if best >= thr {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n_gt as f64).sum::<f64>() / iou_thresholds.len() as f64)
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve as the Mann-Whitney rank statistic (ties 1/2).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision of a ranked list of video scores; tied scores form a
/// single operating point.
pub fn binary_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("binary AP needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&o| labels[o]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// The full metric set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "ap@0.5")]
    pub ap_50: f64,
    #[serde(rename = "ap@0.75")]
    pub ap_75: f64,
    #[serde(rename = "ap@0.9")]
    pub ap_90: f64,
    #[serde(rename = "ap@0.95")]
    pub ap_95: f64,
    #[serde(rename = "ar@100")]
    pub ar_100: f64,
    #[serde(rename = "ar@50")]
    pub ar_50: f64,
    #[serde(rename = "ar@30")]
    pub ar_30: f64,
    #[serde(rename = "ar@20")]
    pub ar_20: f64,
    #[serde(rename = "ar@10")]
    pub ar_10: f64,
    #[serde(rename = "ar@5")]
    pub ar_5: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// `None` when there are no fake videos.
    pub ap_binary: Option<f64>,
}

impl MetricReport {
    /// Checkpoint-selection criterion: AP@{0.5,0.75,0.95} + AR@{100,50,20,10}.
    pub fn criterion(&self) -> f64 {
        self.criterion_components().iter().sum()
    }

    /// The seven metrics summed by [`Self::criterion`], in that order.
    pub fn criterion_components(&self) -> [f64; 7] {
        [
            self.ap_50,
            self.ap_75,
            self.ap_95,
            self.ar_100,
            self.ar_50,
            self.ar_20,
            self.ar_10,
        ]
    }
}

pub const CRITERION_METRICS: [&str; 7] = ["ap@0.5", "ap@0.75", "ap@0.95", "ar@100", "ar@50", "ar@20", "ar@10"];

/// Computes every metric; fails if there is no ground-truth segment.
pub fn evaluate(records: &[EvalRecord]) -> Result<MetricReport> {
    let thr = ar_thresholds();
    let ar = |k| ar_at_k(records, k, &thr);
    let scores: Vec<f64> = records.iter().map(|r| r.video_score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.video_label).collect();
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(MetricReport {
        ap_50: ap_at_iou(records, 0.5)?,
        ap_75: ap_at_iou(records, 0.75)?,
        ap_90: ap_at_iou(records, 0.9)?,
        ap_95: ap_at_iou(records, 0.95)?,
        ar_100: ar(100)?,
        ar_50: ar(50)?,
        ar_30: ar(30)?,
        ar_20: ar(20)?,
        ar_10: ar(10)?,
        ar_5: ar(5)?,
        auc: defined(roc_auc(&scores, &labels))?,
        ap_binary: defined(binary_ap(&scores, &labels))?,
    })
}
