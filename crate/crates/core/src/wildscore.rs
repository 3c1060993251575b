//! Scoring long, unconstrained videos: restricting the model to frames where
//! a talking subject is visible, chunking, and the two aggregate scores Ψ_m
//! (manipulated fraction) and Ψ_s (duration-weighted mean confidence).

use std::path::Path;

use diffkit::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::interval::{intersect_sorted, merge};
use crate::{Error, Interval, Result, SegmentPrediction};

/// Default Ψ_m confidence threshold.
pub const DEFAULT_THETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValiditySpec {
    /// Valid runs shorter than this are discarded, in seconds.
    pub min_segment_s: f64,
    /// Window length for chunked inference, in seconds.
    pub chunk_s: f64,
    /// Minimum L2 distance between consecutive visual frames to count as talking.
    pub talk_threshold: f64,
}

impl Default for ValiditySpec {
    fn default() -> Self {
        Self {
            min_segment_s: 2.0,
            chunk_s: 20.0,
            talk_threshold: 2.0,
        }
    }
}

impl ValiditySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_segment_s > 0.0) || !(self.chunk_s > self.min_segment_s) || !self.talk_threshold.is_finite() {
            return Err(Error::Config(format!(
                "validity spec needs 0 < min_segment_s < chunk_s and a finite talk threshold, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sorted, disjoint set of scoreable time ranges β.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidSegments {
    pub beta: Vec<Interval>,
}

impl ValidSegments {
    pub fn measure(&self) -> f64 {
        self.beta.iter().map(Interval::len).sum()
    }
}

/// Frames whose visual representation moved by at least `threshold` since
/// the previous frame. The first frame copies the second.
pub fn talking_mask<T: Scalar>(visual: &Tensor<T>, threshold: f64) -> Vec<bool> {
    let t = visual.rows();
    if t < 2 {
        return vec![false; t];
    }
    let d = visual.cols();
    let x = visual.data();
    let mut mask = vec![false; t];
    for tau in 1..t {
        let sq: f64 = (0..d)
            .map(|c| {
                let diff = (x[tau * d + c] - x[(tau - 1) * d + c]).to_f64().unwrap_or(f64::NAN);
                diff * diff
            })
            .sum();
        mask[tau] = sq.sqrt() >= threshold;
    }
    mask[0] = mask[1];
    mask
}

/// Maximal runs `(start, end)` (end exclusive) of `true` frames.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

/// Runs where the subject is present and talking, as time intervals of at
/// least `spec.min_segment_s`.
pub fn valid_segments(presence: &[bool], talking: &[bool], fps: f64, spec: &ValiditySpec) -> Result<ValidSegments> {
    if presence.len() != talking.len() {
        return Err(Error::contract(format!(
            "presence mask has {} frames, talking mask {}",
            presence.len(),
            talking.len()
        )));
    }
    let both: Vec<bool> = presence.iter().zip(talking).map(|(&a, &b)| a && b).collect();
    let beta = runs(&both)
        .into_iter()
        .filter(|&(s, e)| (e - s) as f64 / fps >= spec.min_segment_s)
        .map(|(s, e)| Interval::new(s as f64 / fps, e as f64 / fps))
        .collect();
    Ok(ValidSegments { beta })
}

/// Splits each valid range into consecutive `chunk_s` windows; a trailing
/// remainder shorter than `min_segment_s` joins the preceding window, or is
/// dropped when it has none.
pub fn chunk_plan(beta: &ValidSegments, chunk_s: f64, min_segment_s: f64) -> Result<Vec<Interval>> {
    if !(chunk_s > 0.0) {
        return Err(Error::contract(format!("chunk length must be positive, got {chunk_s}")));
    }
    let mut out = Vec::new();
    for b in &beta.beta {
        let mut windows: Vec<Interval> = Vec::new();
        let mut k = 0usize;
        loop {
            let start = b.start + k as f64 * chunk_s;
            if start >= b.end {
                break;
            }
            let end = (b.start + (k + 1) as f64 * chunk_s).min(b.end);
            windows.push(Interval::new(start, end));
            k += 1;
        }
        if let Some(last) = windows.last().copied() {
            if last.len() < min_segment_s {
                windows.pop();
                match windows.last_mut() {
                    Some(prev) => prev.end = last.end,
                    None => continue,
                }
            }
        }
        out.extend(windows);
    }
    Ok(out)
}

/// Frame range `[start, end)` covered by a window at `fps`.
pub fn window_frames(window: Interval, fps: f64, t: usize) -> (usize, usize) {
    let f = |x: f64| ((x * fps).round().max(0.0) as usize).min(t);
    (f(window.start), f(window.end))
}

/// Fraction of the valid time covered by segments scoring above `theta`.
pub fn psi_m(segments: &[SegmentPrediction], theta: f64, beta: &ValidSegments) -> Result<f64> {
    let total = beta.measure();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("Ψ_m over an empty valid set".into()));
    }
    let predicted = merge(segments.iter().filter(|s| s.score > theta).map(SegmentPrediction::interval));
    let covered: f64 = intersect_sorted(&predicted, &merge(beta.beta.iter().copied()))
        .iter()
        .map(Interval::len)
        .sum();
    Ok((covered / total).clamp(0.0, 1.0))
}

/// Integral over time of the mean score of the segments active at each
/// instant, computed by an endpoint sweep.
pub fn psi_s(segments: &[SegmentPrediction]) -> f64 {
    let segs: Vec<&SegmentPrediction> = segments.iter().filter(|s| s.end > s.start).collect();
    let mut events: Vec<f64> = segs.iter().flat_map(|s| [s.start, s.end]).collect();
    events.sort_by(f64::total_cmp);
    events.dedup();
    let mut total = 0.0;
    for w in events.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (mut sum, mut count) = (0.0, 0usize);
        for s in &segs {
            if s.start <= a && s.end >= b {
                sum += s.score;
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64 * (b - a);
        }
    }
    total
}

/// Per-video validity file: frame rate, duration and a run-length-encoded
/// presence mask as `[value, count]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidityFile {
    pub fps: f64,
    pub duration: f64,
    pub presence: Vec<(u8, usize)>,
}

impl ValidityFile {
    pub fn from_mask(mask: &[bool], fps: f64) -> Self {
        let mut presence: Vec<(u8, usize)> = Vec::new();
        for &m in mask {
            let v = m as u8;
            match presence.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => presence.push((v, 1)),
            }
        }
        Self {
            fps,
            duration: mask.len() as f64 / fps,
            presence,
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.presence
            .iter()
            .flat_map(|&(v, n)| std::iter::repeat_n(v != 0, n))
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
