//! Slow, direct re-implementations used as references for the fast
//! postprocessing, metric and aggregation code. Shared with the CLI crate's
//! acceptance suite.
#![allow(dead_code)]

use auvire_core::evaluation::EvalRecord;
use auvire_core::{Interval, SegmentPrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// SoftNMS recomputing every candidate's score from scratch each round as
/// its original score times the decay from every segment selected so far.
pub fn soft_nms(segs: &[SegmentPrediction], sigma: f64, min_score: f64) -> Vec<SegmentPrediction> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut chosen_scores = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (j, s) in segs.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            let mut score = s.score;
            for &k in &chosen {
                let o = iou(s.interval(), segs[k].interval());
                score *= (-o * o / sigma).exp();
            }
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        match best {
            Some((j, score)) if score >= min_score => {
                chosen.push(j);
                chosen_scores.push(score);
            }
            _ => break,
        }
    }
    chosen
        .iter()
        .zip(chosen_scores)
        .map(|(&j, s)| SegmentPrediction::new(segs[j].start, segs[j].end, s))
        .collect()
}

/// Ranked pool of (video, prediction) in descending score, ties by input order.
fn ranked(records: &[EvalRecord]) -> Vec<(usize, SegmentPrediction)> {
    let mut pool: Vec<(usize, usize, SegmentPrediction)> = Vec::new();
    for (v, r) in records.iter().enumerate() {
        for p in &r.predictions {
            pool.push((pool.len(), v, *p));
        }
    }
    // Selection sort keeps the rule explicit: highest score, earliest on ties.
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut b = 0;
        for i in 1..pool.len() {
            if pool[i].2.score > pool[b].2.score {
                b = i;
            }
        }
        let (_, v, p) = pool.remove(b);
        out.push((v, p));
    }
    out
}

/// True-positive count of the first `k` ranked predictions under greedy matching.
fn true_positives(records: &[EvalRecord], ranked: &[(usize, SegmentPrediction)], k: usize, thr: f64) -> usize {
    let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    let mut tp = 0;
    for (v, p) in &ranked[..k] {
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in records[*v].ground_truth.iter().enumerate() {
            let o = iou(p.interval(), *g);
            if !used[*v][j] && o >= thr && o > best_iou {
                best = Some(j);
                best_iou = o;
            }
        }
        if let Some(j) = best {
            used[*v][j] = true;
            tp += 1;
        }
    }
    tp
}

/// Area under the stepwise precision-recall curve from every prefix of the ranking.
pub fn ap_at_iou(records: &[EvalRecord], thr: f64) -> f64 {
    let n_gt: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    let ranked = ranked(records);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=ranked.len() {
        let tp = true_positives(records, &ranked, k, thr);
        let recall = tp as f64 / n_gt as f64;
        let precision = tp as f64 / k as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn ar_at_k(records: &[EvalRecord], k: usize, thresholds: &[f64]) -> f64 {
    let n_gt: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    let mut total = 0.0;
    for &thr in thresholds {
        let mut hit = 0;
        for r in records {
            let single = [r.clone()];
            let top: Vec<SegmentPrediction> = ranked(&single).into_iter().take(k).map(|(_, p)| p).collect();
            for g in &r.ground_truth {
                if top.iter().any(|p| iou(p.interval(), *g) >= thr) {
                    hit += 1;
                }
            }
        }
        total += hit as f64 / n_gt as f64;
    }
    total / thresholds.len() as f64
}

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Precision-weighted recall increments over every distinct score threshold.
pub fn binary_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev) * tp / sel.len() as f64;
        prev = recall;
    }
    ap
}

/// Midpoint-rule integral of the mean active score.
pub fn psi_s_integral(segs: &[SegmentPrediction], step: f64) -> f64 {
    if segs.is_empty() {
        return 0.0;
    }
    let lo = segs.iter().map(|s| s.start).fold(f64::INFINITY, f64::min);
    let hi = segs.iter().map(|s| s.end).fold(f64::NEG_INFINITY, f64::max);
    let n = ((hi - lo) / step).ceil() as usize;
    let mut total = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * step;
        let active: Vec<f64> = segs.iter().filter(|s| s.start <= x && x < s.end).map(|s| s.score).collect();
        if !active.is_empty() {
            let w = step.min(hi - (lo + i as f64 * step));
            total += active.iter().sum::<f64>() / active.len() as f64 * w;
        }
    }
    total
}

/// Random segments on a coarse grid so that exact overlaps and ties occur.
pub fn random_segments(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<SegmentPrediction> {
    (0..n)
        .map(|_| {
            let a = (rng.random_range(0.0..span) * 4.0).round() / 4.0;
            let len = 0.25 + (rng.random_range(0.0..span / 2.0) * 4.0).round() / 4.0;
            let score = if rng.random_bool(0.2) { 0.5 } else { rng.random_range(0.0..1.0) };
            SegmentPrediction::new(a, a + len, score)
        })
        .collect()
}

/// Up to `max_videos` videos with up to 5 predictions and 3 disjoint ground truths each.
pub fn random_records(seed: u64, max_videos: usize) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_videos);
    let mut records: Vec<EvalRecord> = (0..n)
        .map(|v| {
            let n_gt = rng.random_range(0..=3);
            let ground_truth: Vec<Interval> = (0..n_gt)
                .map(|g| {
                    let start = g as f64 * 4.0 + rng.random_range(0.0..1.5);
                    Interval::new(start, start + rng.random_range(0.5..2.5))
                })
                .collect();
            let mut predictions = Vec::new();
            for _ in 0..rng.random_range(0..=5) {
                let p = if !ground_truth.is_empty() && rng.random_bool(0.6) {
                    let g = ground_truth[rng.random_range(0..ground_truth.len())];
                    let jitter = rng.random_range(-0.6..0.6);
                    let stretch: f64 = rng.random_range(-0.4..0.4);
                    SegmentPrediction::new(g.start + jitter, g.end + jitter + stretch.max(0.1 - g.len()), 0.0)
                } else {
                    let s = rng.random_range(0.0..12.0);
                    SegmentPrediction::new(s, s + rng.random_range(0.2..3.0), 0.0)
                };
                let score = (rng.random_range(0..10) as f64) / 10.0;
                predictions.push(SegmentPrediction { score, ..p });
            }
            let video_label = !ground_truth.is_empty();
            EvalRecord {
                video_id: format!("v{v}"),
                predictions,
                ground_truth,
                video_score: (rng.random_range(0..6) as f64) / 5.0,
                video_label,
            }
        })
        .collect();
    if records.iter().all(|r| r.ground_truth.is_empty()) {
        records[0].ground_truth.push(Interval::new(1.0, 2.0));
        records[0].video_label = true;
    }
    records
}
