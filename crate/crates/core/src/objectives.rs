//! Loss terms and their composition.
//!
//! Each term exists twice: as a graph builder (`*_graph`) used for training
//! and gradient checks, and as a plain `f64` function used as an independent
//! reference and for reporting.

use diffkit::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::network::{anchor_time, FeaturePair, ForwardVars, LossTerm, ModelConfig, PyramidOutput, ReconstructionSet};
use crate::{Error, Interval, Result};

/// Per-frame training targets of one (possibly padded) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    /// Manipulation flag per frame.
    pub p: Vec<bool>,
    /// Boundaries (seconds) of the segment containing each positive frame;
    /// meaningless where `p` is false.
    pub b: Vec<Interval>,
    /// Valid-frame flags: a prefix of ones followed by padding zeros.
    pub mask: Vec<bool>,
    /// Duration in seconds of the valid frames.
    pub duration: f64,
}

impl FrameAnnotation {
    /// An all-real annotation of `t` valid frames.
    pub fn real(t: usize, duration: f64) -> Self {
        Self {
            p: vec![false; t],
            b: vec![Interval::new(0.0, 0.0); t],
            mask: vec![true; t],
            duration,
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    /// True when some valid frame is manipulated.
    pub fn any_positive(&self) -> bool {
        self.p.iter().zip(&self.mask).any(|(&p, &m)| p && m)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.p.len();
        if self.b.len() != t || self.mask.len() != t {
            return Err(Error::contract(format!(
                "annotation lengths differ: p {t}, b {}, mask {}",
                self.b.len(),
                self.mask.len()
            )));
        }
        let v = self.valid_len();
        if self.mask[v..].iter().any(|&m| m) {
            return Err(Error::contract("mask must be a prefix of valid frames"));
        }
        for (i, (&p, b)) in self.p.iter().zip(&self.b).enumerate() {
            if p && i < v && !(0.0 <= b.start && b.start < b.end && b.end <= self.duration + 1e-9) {
                return Err(Error::contract(format!(
                    "frame {i}: boundary ({}, {}) outside [0, {}]",
                    b.start, b.end, self.duration
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the loss terms plus the active composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub terms: Vec<LossTerm>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            terms: ModelConfig::default().losses,
        }
    }
}

impl LossConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            terms: model.losses.clone(),
            ..Self::default()
        }
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.terms.contains(&term)
    }
}

/// Scalar values of one sample's loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub loc: f64,
    /// Present when the reconstruction term is active.
    pub rec: Option<f64>,
    /// Present when the video-level detection term is active.
    pub det: Option<f64>,
}

/// Graph handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub loc: Var,
    pub rec: Option<Var>,
    pub det: Option<Var>,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        LossReport {
            total: val(self.total),
            loc: val(self.loc),
            rec: self.rec.map(val),
            det: self.det.map(val),
        }
    }
}

fn prob_eps<T: Scalar>() -> T {
    T::lit(T::PROB_EPS)
}

fn clamped_sigmoid<T: Scalar>(g: &mut Graph<T>, z: Var) -> Var {
    let p = g.sigmoid(z);
    g.clamp(p, prob_eps(), T::one() - prob_eps())
}

fn vector<T: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.map(T::lit).collect();
    Tensor::new(vec![data.len()], data).expect("rank-1 shape matches data")
}

/// Elementwise focal loss of `logits` (rank 1) against 0/1 `targets`.
pub fn focal_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let p = clamped_sigmoid(g, logits);
    let slope = g.constant(vector(targets.iter().map(|&y| if y { 1.0 } else { -1.0 })));
    let offset = g.constant(vector(targets.iter().map(|&y| if y { 0.0 } else { 1.0 })));
    let weight = g.constant(vector(
        targets.iter().map(|&y| if y { alpha } else { 1.0 - alpha }),
    ));
    let sp = g.mul(p, slope)?;
    let p_t = g.add(sp, offset)?;
    let log_p = g.log(p_t);
    let one_minus = g.scale(p_t, -T::one());
    let one_minus = g.add_scalar(one_minus, T::one());
    let modulator = g.pow(one_minus, T::lit(gamma));
    let term = g.mul(modulator, log_p)?;
    let term = g.mul(term, weight)?;
    Ok(g.scale(term, -T::one()))
}

/// Elementwise 1D DIoU loss between `[n]` predicted (s, e) and constant targets.
pub fn diou_graph<T: Scalar>(g: &mut Graph<T>, s: Var, e: Var, gt: &[Interval]) -> Result<Var> {
    let gs = g.constant(vector(gt.iter().map(|i| i.start)));
    let ge = g.constant(vector(gt.iter().map(|i| i.end)));
    let lo = g.maximum(s, gs)?;
    let hi = g.minimum(e, ge)?;
    let overlap = g.sub(hi, lo)?;
    let inter = g.relu(overlap);
    let len_p = g.sub(e, s)?;
    let len_g = g.sub(ge, gs)?;
    let lens = g.add(len_p, len_g)?;
    let union = g.sub(lens, inter)?;
    let iou = g.div(inter, union)?;
    let enc_lo = g.minimum(s, gs)?;
    let enc_hi = g.maximum(e, ge)?;
    let enclosure = g.sub(enc_hi, enc_lo)?;
    let sum_p = g.add(s, e)?;
    let sum_g = g.add(gs, ge)?;
    let dc = g.sub(sum_p, sum_g)?;
    let dc = g.scale(dc, T::lit(0.5));
    let dist2 = g.mul(dc, dc)?;
    let enc2 = g.mul(enclosure, enclosure)?;
    let penalty = g.div(dist2, enc2)?;
    let neg_iou = g.scale(iou, -T::one());
    let loss = g.add(neg_iou, penalty)?;
    Ok(g.add_scalar(loss, T::one()))
}

/// Smooth-L1 averaged over the two coordinates, elementwise over `[n]`.
pub fn smooth_l1_graph<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    e: Var,
    gt: &[Interval],
    beta: f64,
) -> Result<Var> {
    let gs = g.constant(vector(gt.iter().map(|i| i.start)));
    let ge = g.constant(vector(gt.iter().map(|i| i.end)));
    let ds = g.sub(s, gs)?;
    let de = g.sub(e, ge)?;
    let ls = g.smooth_l1(ds, T::lit(beta));
    let le = g.smooth_l1(de, T::lit(beta));
    let both = g.add(ls, le)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// Positive positions of a level and their target intervals.
fn level_positives(ann: &FrameAnnotation, stride: usize, valid: usize) -> (Vec<usize>, Vec<Interval>) {
    (0..valid)
        .filter(|&i| ann.p[i * stride])
        .map(|i| (i, ann.b[i * stride]))
        .unzip()
}

fn level_targets(ann: &FrameAnnotation, stride: usize, valid: usize) -> Vec<bool> {
    (0..valid).map(|i| ann.p[i * stride]).collect()
}

fn check_annotation<T: Scalar>(out: &ForwardVars, g: &Graph<T>, ann: &FrameAnnotation) -> Result<()> {
    let t = g.value(out.visual).rows();
    if ann.len() != t || ann.valid_len() != out.valid_len {
        return Err(Error::contract(format!(
            "annotation covers {} frames ({} valid), forward pass {t} ({} valid)",
            ann.len(),
            ann.valid_len(),
            out.valid_len
        )));
    }
    Ok(())
}

/// Localization loss: mean over levels of (focal + gated regression) per positive.
pub fn loc_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    ann: &FrameAnnotation,
    cfg: &LossConfig,
) -> Result<Var> {
    check_annotation(out, g, ann)?;
    let mut level_losses = Vec::with_capacity(out.levels.len());
    for lvl in &out.levels {
        let logits = if lvl.valid < g.value(lvl.logits).len() {
            g.slice_rows(lvl.logits, 0, lvl.valid)?
        } else {
            lvl.logits
        };
        let targets = level_targets(ann, lvl.stride, lvl.valid);
        let focal = focal_graph(g, logits, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
        let mut total = g.sum(focal);
        let (pos, gt) = level_positives(ann, lvl.stride, lvl.valid);
        if !pos.is_empty() {
            let off = g.gather_rows(lvl.offsets, &pos)?;
            let left = g.column(off, 0)?;
            let right = g.column(off, 1)?;
            let anchors = g.constant(vector(
                pos.iter().map(|&i| anchor_time(i, lvl.stride, out.fps)),
            ));
            let s = g.sub(anchors, left)?;
            let e = g.add(anchors, right)?;
            let reg = if cfg.has(LossTerm::SmoothL1) {
                smooth_l1_graph(g, s, e, &gt, cfg.smooth_l1_beta)?
            } else {
                diou_graph(g, s, e, &gt)?
            };
            let reg = g.sum(reg);
            total = g.add(total, reg)?;
        }
        let denom = pos.len().max(1) as f64;
        level_losses.push(g.scale(total, T::lit(1.0 / denom)));
    }
    mean_of(g, &level_losses)
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::lit(1.0 / terms.len() as f64)))
}

/// Reconstruction loss, zero whenever a valid frame is manipulated.
pub fn rec_loss_graph<T: Scalar>(g: &mut Graph<T>, out: &ForwardVars, ann: &FrameAnnotation) -> Result<Var> {
    check_annotation(out, g, ann)?;
    if ann.any_positive() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let v = out.valid_len;
    let (t, d) = {
        let x = g.value(out.visual);
        (x.rows(), x.cols())
    };
    let mut acc: Option<Var> = None;
    for &(pair, rec) in &out.recon {
        let diff = g.sub(rec, out.target(pair.target()))?;
        let diff = if v < t { g.slice_rows(diff, 0, v)? } else { diff };
        let a = g.abs(diff);
        let s = g.sum(a);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let acc = acc.ok_or_else(|| Error::contract("no reconstructions to compare"))?;
    Ok(g.scale(acc, T::lit(1.0 / (v * d) as f64)))
}

/// Binary cross-entropy of the maximum valid logit against the video label.
pub fn det_loss_graph<T: Scalar>(g: &mut Graph<T>, out: &ForwardVars, ann: &FrameAnnotation) -> Result<Var> {
    check_annotation(out, g, ann)?;
    let mut best: Option<Var> = None;
    for lvl in &out.levels {
        let logits = if lvl.valid < g.value(lvl.logits).len() {
            g.slice_rows(lvl.logits, 0, lvl.valid)?
        } else {
            lvl.logits
        };
        let m = g.max(logits)?;
        best = Some(match best {
            Some(prev) => g.maximum(prev, m)?,
            None => m,
        });
    }
    let z = best.ok_or_else(|| Error::contract("no pyramid levels"))?;
    let p = clamped_sigmoid(g, z);
    let nll = if ann.any_positive() {
        g.log(p)
    } else {
        let q = g.scale(p, -T::one());
        let q = g.add_scalar(q, T::one());
        g.log(q)
    };
    Ok(g.scale(nll, -T::one()))
}

/// All active loss terms and their unweighted mean.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    ann: &FrameAnnotation,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let loc = loc_loss_graph(g, out, ann, cfg)?;
    let rec = if cfg.has(LossTerm::RecMae) {
        Some(rec_loss_graph(g, out, ann)?)
    } else {
        None
    };
    let det = if cfg.has(LossTerm::DetBce) {
        Some(det_loss_graph(g, out, ann)?)
    } else {
        None
    };
    let terms: Vec<Var> = std::iter::once(loc).chain(rec).chain(det).collect();
    let total = mean_of(g, &terms)?;
    Ok(LossVars { total, loc, rec, det })
}

fn sigmoid_clamped(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(f64::PROB_EPS, 1.0 - f64::PROB_EPS)
}

/// Focal loss of one logit.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid_clamped(logit);
    let (p_t, a_t) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -a_t * (1.0 - p_t).powf(gamma) * p_t.ln()
}

/// 1D distance-IoU loss.
pub fn diou_loss(pred: Interval, gt: Interval) -> Result<f64> {
    if pred.is_degenerate() || gt.is_degenerate() {
        return Err(Error::contract(format!(
            "degenerate interval in diou: pred {pred:?}, gt {gt:?}"
        )));
    }
    let enclosure = pred.end.max(gt.end) - pred.start.min(gt.start);
    let dc = pred.center() - gt.center();
    Ok(1.0 - pred.iou(&gt) + dc * dc / (enclosure * enclosure))
}

fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Smooth-L1 on (start, end), averaged over the two coordinates.
pub fn smooth_l1_loss(pred: Interval, gt: Interval, beta: f64) -> f64 {
    0.5 * (smooth_l1(pred.start - gt.start, beta) + smooth_l1(pred.end - gt.end, beta))
}

/// Binary cross-entropy on one video logit.
pub fn det_loss(video_logit: f64, target: bool) -> f64 {
    let p = sigmoid_clamped(video_logit);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Reconstruction loss on plain tensors.
pub fn rec_loss(features: &FeaturePair<f64>, recon: &ReconstructionSet<f64>, ann: &FrameAnnotation) -> f64 {
    if ann.any_positive() {
        return 0.0;
    }
    let v = features.valid_len;
    let d = features.d();
    let mut total = 0.0;
    for (pair, rec) in &recon.items {
        let target = features.modality(pair.target());
        total += rec.data()[..v * d]
            .iter()
            .zip(&target.data()[..v * d])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    total / (v * d) as f64
}

/// Localization loss on plain pyramid outputs.
pub fn loc_loss(pyramid: &PyramidOutput<f64>, ann: &FrameAnnotation, cfg: &LossConfig) -> Result<f64> {
    let mut acc = 0.0;
    for lvl in &pyramid.levels {
        let mut sum = 0.0;
        let mut positives = 0usize;
        for i in 0..lvl.valid {
            let frame = i * lvl.stride;
            sum += focal_loss(lvl.logits[i], ann.p[frame], cfg.focal_alpha, cfg.focal_gamma);
            if ann.p[frame] {
                positives += 1;
                let a = anchor_time(i, lvl.stride, pyramid.fps);
                let pred = Interval::new(a - lvl.offsets.at2(i, 0), a + lvl.offsets.at2(i, 1));
                sum += if cfg.has(LossTerm::SmoothL1) {
                    smooth_l1_loss(pred, ann.b[frame], cfg.smooth_l1_beta)
                } else {
                    diou_loss(pred, ann.b[frame])?
                };
            }
        }
        acc += sum / positives.max(1) as f64;
    }
    Ok(acc / pyramid.levels.len() as f64)
}

/// Video-level logit used by the detection loss: max over valid positions.
pub fn video_logit(pyramid: &PyramidOutput<f64>) -> f64 {
    pyramid
        .levels
        .iter()
        .flat_map(|l| l.logits[..l.valid].iter().copied())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Unweighted mean of the active terms.
pub fn total_loss(loc: f64, rec: Option<f64>, det: Option<f64>) -> f64 {
    let terms: Vec<f64> = std::iter::once(loc).chain(rec).chain(det).collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

/// Plain evaluation of every active term, mirroring [`total_loss_graph`].
pub fn loss_report(
    features: &FeaturePair<f64>,
    recon: &ReconstructionSet<f64>,
    pyramid: &PyramidOutput<f64>,
    ann: &FrameAnnotation,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let loc = loc_loss(pyramid, ann, cfg)?;
    let rec = cfg.has(LossTerm::RecMae).then(|| rec_loss(features, recon, ann));
    let det = cfg
        .has(LossTerm::DetBce)
        .then(|| det_loss(video_logit(pyramid), ann.any_positive()));
    Ok(LossReport {
        total: total_loss(loc, rec, det),
        loc,
        rec,
        det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_closed_forms() {
        assert!(focal_loss(30.0, true, 0.25, 2.0) < 1e-10);
        let expect = 0.25 * 0.25 * 2f64.ln();
        assert!((focal_loss(0.0, true, 0.25, 2.0) - expect).abs() < 1e-15);
        assert!((expect - 0.043322).abs() < 1e-6);
        for &z in &[-3.0, -0.2, 0.0, 1.7] {
            for &y in &[false, true] {
                let p = 1.0 / (1.0 + (-z as f64).exp());
                let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
                assert!((focal_loss(z, y, 0.5, 0.0) - 0.5 * bce).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_vanishes_monotonically_toward_correct_labels() {
        for &y in &[false, true] {
            let sign = if y { 1.0 } else { -1.0 };
            let losses: Vec<f64> = [2.0, 5.0, 10.0, 20.0]
                .iter()
                .map(|&z| focal_loss(sign * z, y, 0.25, 2.0))
                .collect();
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
            assert!(losses[3] < 1e-15);
        }
    }

    #[test]
    fn diou_hand_cases() {
        let iv = Interval::new;
        assert_eq!(diou_loss(iv(0.0, 1.0), iv(0.0, 1.0)).unwrap(), 0.0);
        assert!((diou_loss(iv(0.0, 1.0), iv(2.0, 3.0)).unwrap() - (1.0 + 4.0 / 9.0)).abs() < 1e-15);
        assert!((diou_loss(iv(0.0, 2.0), iv(1.0, 3.0)).unwrap() - (1.0 - 1.0 / 3.0 + 1.0 / 9.0)).abs() < 1e-15);
        assert!(diou_loss(iv(1.0, 1.0), iv(0.0, 1.0)).is_err());
    }

    #[test]
    fn smooth_l1_pieces() {
        let iv = Interval::new;
        assert_eq!(smooth_l1_loss(iv(1.0, 2.0), iv(1.0, 2.0), 1.0), 0.0);
        assert!((smooth_l1_loss(iv(0.5, 2.5), iv(1.0, 2.0), 1.0) - 0.125).abs() < 1e-15);
        assert!((smooth_l1_loss(iv(-1.0, 4.0), iv(1.0, 2.0), 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn det_and_total() {
        assert!(det_loss(30.0, true) < 1e-12);
        assert!((det_loss(0.0, true) - 2f64.ln()).abs() < 1e-15);
        assert!((det_loss(0.0, false) - 2f64.ln()).abs() < 1e-15);
        assert!((total_loss(0.4, Some(0.2), None) - 0.3).abs() < 1e-15);
        assert_eq!(total_loss(0.4, None, None), 0.4);
        assert!((total_loss(0.3, Some(0.3), Some(0.3)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn graph_terms_match_plain_functions() {
        let logits = [-2.0, -0.3, 0.0, 0.8, 3.0];
        let targets = [false, true, false, true, true];
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::new(vec![5], logits.to_vec()).unwrap());
        let f = focal_graph(&mut g, z, &targets, 0.25, 2.0).unwrap();
        for (i, (&l, &y)) in logits.iter().zip(&targets).enumerate() {
            assert!((g.value(f).data()[i] - focal_loss(l, y, 0.25, 2.0)).abs() < 1e-14);
        }
        let preds = [Interval::new(0.0, 1.0), Interval::new(0.0, 2.0), Interval::new(0.5, 0.9)];
        let gts = [Interval::new(2.0, 3.0), Interval::new(1.0, 3.0), Interval::new(0.0, 3.0)];
        let s = g.param(Tensor::new(vec![3], preds.iter().map(|p| p.start).collect()).unwrap());
        let e = g.param(Tensor::new(vec![3], preds.iter().map(|p| p.end).collect()).unwrap());
        let d = diou_graph(&mut g, s, e, &gts).unwrap();
        let l1 = smooth_l1_graph(&mut g, s, e, &gts, 1.0).unwrap();
        for i in 0..3 {
            assert!((g.value(d).data()[i] - diou_loss(preds[i], gts[i]).unwrap()).abs() < 1e-14);
            assert!((g.value(l1).data()[i] - smooth_l1_loss(preds[i], gts[i], 1.0)).abs() < 1e-14);
        }
    }
}
