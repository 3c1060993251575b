//! Turning head outputs into scored segments.

use diffkit::Scalar;
use serde::{Deserialize, Serialize};

use crate::network::{anchor_time, PyramidOutput};
use crate::objectives::FrameAnnotation;
use crate::{Error, Result, SegmentPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Gaussian decay width of SoftNMS.
    pub sigma_nms: f64,
    /// Candidates and selections scoring below this are discarded.
    pub min_score: f64,
    /// Candidates kept per decoded window before suppression.
    pub pre_nms_top_n: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            sigma_nms: 0.5,
            min_score: 1e-4,
            pre_nms_top_n: 200,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_nms > 0.0) || !(self.min_score >= 0.0) || self.pre_nms_top_n == 0 {
            return Err(Error::Config(format!("invalid post-processing configuration: {self:?}")));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Every valid pyramid position as an absolute segment, clamped to the
/// valid duration, filtered and truncated to the best `pre_nms_top_n`.
pub fn decode_segments<T: Scalar>(pyramid: &PyramidOutput<T>, cfg: &PostprocessConfig) -> Vec<SegmentPrediction> {
    let duration = pyramid.duration();
    let mut out = Vec::new();
    for lvl in &pyramid.levels {
        for i in 0..lvl.valid {
            let a = anchor_time(i, lvl.stride, pyramid.fps);
            let left = lvl.offsets.at2(i, 0).to_f64().unwrap_or(f64::NAN);
            let right = lvl.offsets.at2(i, 1).to_f64().unwrap_or(f64::NAN);
            let s = (a - left).clamp(0.0, duration);
            let e = (a + right).clamp(0.0, duration);
            let rho = sigmoid(lvl.logits[i].to_f64().unwrap_or(f64::NAN));
            // Written so that NaN fails both tests.
            if !(e > s) || !(rho >= cfg.min_score) {
                continue;
            }
            out.push(SegmentPrediction::new(s, e, rho));
        }
    }
    sort_by_score(&mut out);
    out.truncate(cfg.pre_nms_top_n);
    out
}

/// Stable sort by descending score.
pub fn sort_by_score(segments: &mut [SegmentPrediction]) {
    segments.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Gaussian SoftNMS. Returns the selected segments in selection order with
/// their scores at selection time.
pub fn soft_nms(segments: &[SegmentPrediction], sigma_nms: f64, min_score: f64) -> Vec<SegmentPrediction> {
    let mut rest = segments.to_vec();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for (i, s) in rest.iter().enumerate().skip(1) {
            if s.score > rest[best].score {
                best = i;
            }
        }
        if rest[best].score < min_score {
            break;
        }
        let chosen = rest.remove(best);
        let iv = chosen.interval();
        for r in &mut rest {
            let iou = iv.iou(&r.interval());
            r.score *= (-iou * iou / sigma_nms).exp();
        }
        kept.push(chosen);
    }
    kept
}

/// Decoding followed by SoftNMS.
pub fn predict_segments<T: Scalar>(pyramid: &PyramidOutput<T>, cfg: &PostprocessConfig) -> Vec<SegmentPrediction> {
    soft_nms(&decode_segments(pyramid, cfg), cfg.sigma_nms, cfg.min_score)
}

/// Maximum confidence; zero when nothing was detected.
pub fn video_score(segments: &[SegmentPrediction]) -> f64 {
    segments.iter().map(|s| s.score).fold(0.0, f64::max)
}

/// True when any valid frame is manipulated.
pub fn video_target(ann: &FrameAnnotation) -> bool {
    ann.any_positive()
}
