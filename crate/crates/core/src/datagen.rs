//! Synthetic paired features, frame targets, padding and on-disk formats.
//!
//! Each sample draws a smooth latent trajectory and maps it linearly into
//! both modalities with fixed dataset-wide matrices, so the audio features are
//! (up to noise) a linear image of the visual ones. Fake segments replace one
//! modality's latent with an independent trajectory, which breaks exactly
//! that cross-modal predictability.

use std::path::{Path, PathBuf};

use diffkit::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{len_u32, put_f32, put_u32, read_file, write_file, Reader};
use crate::network::{FeaturePair, Modality};
use crate::objectives::FrameAnnotation;
use crate::{Error, Interval, Result};

/// Per-step standard deviation of the latent random walk.
pub const WALK_SIGMA: f64 = 0.3;
/// Width of the centred moving average smoothing the walk.
pub const SMOOTHING_WINDOW: usize = 5;
/// Frames of linear cross-fade at each end of a fake segment.
pub const CROSSFADE_FRAMES: usize = 3;
/// Placement attempts per fake segment before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulatedModality {
    Audio,
    Visual,
    /// Audio or visual with equal probability, chosen per segment.
    Either,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub t: usize,
    pub d: usize,
    pub fps: f64,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Relative weight of drawing 0, 1, 2, … fake segments.
    pub n_fake_segments: Vec<f64>,
    /// Inclusive range of fake segment durations in seconds.
    pub fake_duration_s: (f64, f64),
    pub manipulated_modality: ManipulatedModality,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            t: 128,
            d: 16,
            fps: 25.0,
            latent_dim: 4,
            noise_sigma: 0.05,
            n_fake_segments: vec![0.5, 0.25, 0.25],
            fake_duration_s: (0.8, 2.4),
            manipulated_modality: ManipulatedModality::Either,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.d == 0 || self.latent_dim == 0 {
            return bad("t, d and latent_dim must be positive".into());
        }
        if self.latent_dim > self.d {
            return bad(format!("latent_dim {} exceeds d {}", self.latent_dim, self.d));
        }
        if !(self.fps > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("fps must be positive and noise_sigma non-negative".into());
        }
        let w = &self.n_fake_segments;
        if w.is_empty() || w.iter().any(|&x| !(x >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return bad(format!("n_fake_segments weights {w:?} must be non-negative with a positive sum"));
        }
        let (lo, hi) = self.fake_duration_s;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("fake_duration_s range ({lo}, {hi}) is invalid"));
        }
        if w.len() > 1 && (lo * self.fps).round() as usize > self.t {
            return bad(format!("fake segments of {lo} s cannot fit {} frames", self.t));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.t as f64 / self.fps
    }
}

/// Ground truth as stored next to each feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub duration: f64,
    pub fps: f64,
    /// Manipulated `[start, end]` intervals in seconds.
    pub segments: Vec<[f64; 2]>,
}

impl AnnotationRecord {
    pub fn intervals(&self) -> Vec<Interval> {
        self.segments.iter().map(|&[s, e]| Interval::new(s, e)).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, text.as_bytes())
    }
}

/// Features plus the identifier of the video they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub features: FeaturePair<f64>,
}

/// One generated video.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeaturePair<f64>,
    pub annotation: FrameAnnotation,
    pub record: AnnotationRecord,
}

/// Deterministic sample source for one dataset seed.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    config: SyntheticConfig,
    w_visual: Vec<f64>,
    w_audio: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SyntheticGenerator {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let n = Normal::new(0.0, 1.0 / (config.latent_dim as f64).sqrt()).expect("positive std");
        let size = config.latent_dim * config.d;
        let w_visual = (0..size).map(|_| n.sample(&mut rng)).collect();
        let w_audio = (0..size).map(|_| n.sample(&mut rng)).collect();
        Ok(Self {
            config,
            w_visual,
            w_audio,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Sample `index` of the dataset; independent of every other index.
    pub fn sample(&self, index: u64) -> Result<Sample> {
        let cfg = &self.config;
        let mut rng = stream_rng(cfg.seed, index + 1);
        let (t, fps) = (cfg.t, cfg.fps);

        let n_fake = draw_weighted(&mut rng, &cfg.n_fake_segments);
        let mut frames: Vec<(usize, usize)> = Vec::with_capacity(n_fake);
        for k in 0..n_fake {
            frames.push(place_segment(&mut rng, cfg, &frames).ok_or_else(|| {
                Error::Infeasible(format!(
                    "sample {index}: no room for fake segment {} of {n_fake} after {PLACEMENT_ATTEMPTS} attempts",
                    k + 1
                ))
            })?);
        }
        frames.sort_unstable();
        let modalities: Vec<Modality> = frames
            .iter()
            .map(|_| match cfg.manipulated_modality {
                ManipulatedModality::Audio => Modality::Audio,
                ManipulatedModality::Visual => Modality::Visual,
                ManipulatedModality::Either => {
                    if rng.random_bool(0.5) {
                        Modality::Audio
                    } else {
                        Modality::Visual
                    }
                }
            })
            .collect();

        let z = latent_walk(&mut rng, t, cfg.latent_dim);
        let z_alt = latent_walk(&mut rng, t, cfg.latent_dim);
        let mut z_visual = z.clone();
        let mut z_audio = z;
        for (&(a, b), &m) in frames.iter().zip(&modalities) {
            let target = match m {
                Modality::Audio => &mut z_audio,
                Modality::Visual => &mut z_visual,
            };
            for tau in a..b {
                let w = crossfade_weight(tau - a, b - 1 - tau);
                for c in 0..cfg.latent_dim {
                    let i = tau * cfg.latent_dim + c;
                    target[i] = (1.0 - w) * target[i] + w * z_alt[i];
                }
            }
        }
        let visual = self.project(&mut rng, &z_visual, &self.w_visual)?;
        let audio = self.project(&mut rng, &z_audio, &self.w_audio)?;

        let segments: Vec<Interval> = frames
            .iter()
            .map(|&(a, b)| Interval::new(a as f64 / fps, b as f64 / fps))
            .collect();
        let duration = cfg.duration();
        let annotation = build_frame_targets(&segments, t, fps, duration)?;
        Ok(Sample {
            features: FeaturePair::new(visual, audio, fps)?,
            annotation,
            record: AnnotationRecord {
                id: sample_id(index),
                duration,
                fps,
                segments: segments.iter().map(|s| [s.start, s.end]).collect(),
            },
        })
    }

    /// `x = z W + noise`, rounded to f32 precision so files round-trip exactly.
    fn project(&self, rng: &mut ChaCha8Rng, z: &[f64], w: &[f64]) -> Result<Tensor<f64>> {
        let (t, l, d) = (self.config.t, self.config.latent_dim, self.config.d);
        let noise = (self.config.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.config.noise_sigma).expect("positive std"));
        let mut out = vec![0.0; t * d];
        for tau in 0..t {
            for c in 0..d {
                let mut v = 0.0;
                for j in 0..l {
                    v += z[tau * l + j] * w[j * d + c];
                }
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                out[tau * d + c] = v as f32 as f64;
            }
        }
        Ok(Tensor::new(vec![t, d], out)?)
    }
}

/// Identifier of sample `index`.
pub fn sample_id(index: u64) -> String {
    format!("syn_{index:06}")
}

fn draw_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws a duration and then a start uniformly among the positions that keep
/// at least one clear frame to every existing segment. An attempt fails when
/// no such position exists for the drawn duration.
fn place_segment(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, taken: &[(usize, usize)]) -> Option<(usize, usize)> {
    let (lo, hi) = cfg.fake_duration_s;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let secs = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let n = ((secs * cfg.fps).round() as usize).max(1);
        if n > cfg.t {
            continue;
        }
        let feasible: Vec<usize> = (0..=cfg.t - n)
            .filter(|&s| taken.iter().all(|&(a, b)| s + n < a || s > b))
            .collect();
        if !feasible.is_empty() {
            let s = feasible[rng.random_range(0..feasible.len())];
            return Some((s, s + n));
        }
    }
    None
}

/// Blend weight of the replacement latent at a segment frame `from_start`
/// frames after its first frame and `from_end` before its last.
pub fn crossfade_weight(from_start: usize, from_end: usize) -> f64 {
    ((from_start.min(from_end) + 1) as f64 / (CROSSFADE_FRAMES + 1) as f64).min(1.0)
}

/// Gaussian random walk smoothed by a centred moving average (shrunk at the edges).
fn latent_walk(rng: &mut ChaCha8Rng, t: usize, l: usize) -> Vec<f64> {
    let n = Normal::new(0.0, WALK_SIGMA).expect("positive std");
    let mut walk = vec![0.0; t * l];
    for tau in 0..t {
        for c in 0..l {
            let prev = if tau == 0 { 0.0 } else { walk[(tau - 1) * l + c] };
            walk[tau * l + c] = prev + n.sample(rng);
        }
    }
    let half = SMOOTHING_WINDOW / 2;
    let mut out = vec![0.0; t * l];
    for tau in 0..t {
        let (a, b) = (tau.saturating_sub(half), (tau + half + 1).min(t));
        for c in 0..l {
            let s: f64 = (a..b).map(|k| walk[k * l + c]).sum();
            out[tau * l + c] = s / (b - a) as f64;
        }
    }
    out
}

/// Frame targets: frame τ is positive iff its centre `(τ + 0.5) / fps` lies
/// in a segment, and then carries that segment's boundaries.
pub fn build_frame_targets(segments: &[Interval], t: usize, fps: f64, duration: f64) -> Result<FrameAnnotation> {
    let mut sorted = segments.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for s in &sorted {
        if s.is_degenerate() || s.start < 0.0 || s.end > duration {
            return Err(Error::contract(format!(
                "segment ({}, {}) is not inside [0, {duration}]",
                s.start, s.end
            )));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[1].start < w[0].end) {
        return Err(Error::contract(format!(
            "segments ({}, {}) and ({}, {}) overlap",
            w[0].start, w[0].end, w[1].start, w[1].end
        )));
    }
    let mut ann = FrameAnnotation::real(t, duration);
    for tau in 0..t {
        let c = (tau as f64 + 0.5) / fps;
        if let Some(s) = sorted.iter().find(|s| s.contains(c)) {
            ann.p[tau] = true;
            ann.b[tau] = *s;
        }
    }
    Ok(ann)
}

/// Zero-pads features and targets to `target_t` frames; padding is masked out.
pub fn pad_to_length<T: Scalar>(
    features: &FeaturePair<T>,
    ann: &FrameAnnotation,
    target_t: usize,
) -> Result<(FeaturePair<T>, FrameAnnotation)> {
    let t = features.t();
    if t > target_t {
        return Err(Error::contract(format!("sequence of {t} frames exceeds target length {target_t}")));
    }
    if ann.len() != t {
        return Err(Error::contract(format!("annotation has {} frames, features {t}", ann.len())));
    }
    let d = features.d();
    let pad = |x: &Tensor<T>| {
        let mut data = x.data().to_vec();
        data.resize(target_t * d, T::zero());
        Tensor::new(vec![target_t, d], data)
    };
    let mut out = ann.clone();
    out.p.resize(target_t, false);
    out.b.resize(target_t, Interval::new(0.0, 0.0));
    out.mask.resize(target_t, false);
    Ok((
        FeaturePair {
            visual: pad(&features.visual)?,
            audio: pad(&features.audio)?,
            valid_len: features.valid_len,
            fps: features.fps,
        },
        out,
    ))
}

pub const FEATURE_MAGIC: &[u8; 4] = b"AVRF";
pub const FEATURE_VERSION: u32 = 1;

/// `AVRF` encoding: magic, u32 version, u32 t, u32 d, f32 fps, visual then
/// audio values as row-major f32, all little-endian.
pub fn encode_features(features: &FeaturePair<f64>) -> Result<Vec<u8>> {
    let (t, d) = (features.t(), features.d());
    let mut out = Vec::with_capacity(20 + 8 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, len_u32(t, "t")?);
    put_u32(&mut out, len_u32(d, "d")?);
    put_f32(&mut out, features.fps as f32);
    for x in [&features.visual, &features.audio] {
        for &v in x.data() {
            put_f32(&mut out, v as f32);
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeaturePair<f64>> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let fps = r.f32()? as f64;
    let n = t.checked_mul(d).ok_or_else(|| Error::Format {
        offset: 8,
        detail: format!("t = {t} times d = {d} overflows"),
    })?;
    let read = |r: &mut Reader<'_>| -> Result<Tensor<f64>> {
        Ok(Tensor::new(vec![t, d], r.f32_vec(n)?.into_iter().map(f64::from).collect())?)
    };
    let visual = read(&mut r)?;
    let audio = read(&mut r)?;
    r.finish()?;
    FeaturePair::new(visual, audio, fps)
}

/// Writes a feature file; the video id is the file stem.
pub fn write_features(path: &Path, features: &FeaturePair<f64>) -> Result<()> {
    write_file(path, &encode_features(features)?)
}

pub fn read_features(path: &Path) -> Result<FeatureRecord> {
    let features = decode_features(&read_file(path)?).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureRecord { id, features })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One manifest line. Paths are stored relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub features: PathBuf,
    pub annotation: PathBuf,
    pub split: Split,
}

/// Tab-separated `features<TAB>annotation<TAB>split` lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.features.display(),
            e.annotation.display(),
            e.split.tag()
        ));
    }
    write_file(path, text.as_bytes())
}

/// Reads a manifest; returned paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let split = match cols.as_slice() {
            [_, _, s] => Split::parse(s),
            _ => None,
        };
        let split = split.ok_or_else(|| Error::Format {
            offset: n + 1,
            detail: format!("{}: manifest line {} is not `features\\tannotation\\tsplit`", path.display(), n + 1),
        })?;
        out.push(ManifestEntry {
            features: base.join(cols[0]),
            annotation: base.join(cols[1]),
            split,
        });
    }
    Ok(out)
}

/// A stored video with its targets, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub features: FeaturePair<f64>,
    pub annotation: FrameAnnotation,
    pub segments: Vec<Interval>,
}

impl LabeledVideo {
    pub fn from_sample(sample: Sample) -> Self {
        Self {
            id: sample.record.id.clone(),
            segments: sample.record.intervals(),
            features: sample.features,
            annotation: sample.annotation,
        }
    }
}

/// Loads every manifest entry of `split`, in manifest order.
pub fn load_split(entries: &[ManifestEntry], split: Split) -> Result<Vec<LabeledVideo>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let rec = read_features(&e.features)?;
            let ann = AnnotationRecord::read(&e.annotation)?;
            if ann.id != rec.id {
                return Err(Error::contract(format!(
                    "annotation id {} does not match feature file {}",
                    ann.id, rec.id
                )));
            }
            let segments = ann.intervals();
            let t = rec.features.t();
            let annotation = build_frame_targets(&segments, t, rec.features.fps, ann.duration)?;
            Ok(LabeledVideo {
                id: rec.id,
                features: rec.features,
                annotation,
                segments,
            })
        })
        .collect()
}
