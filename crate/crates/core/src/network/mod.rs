//! The localization model: one reconstruction network per configured
//! modality pair, the discrepancy encoder with its feature pyramid, and the
//! classification and boundary-regression heads shared across levels.
//!
//! Every function here records onto a caller-owned [`Graph`], so the same code
//! path serves training (parameters bound as trainable leaves) and inference
//! (parameters bound as constants).
//!
//! Frames at or beyond `valid_len` are padding. After every layer the rows
//! past the level's valid length (`ceil(valid_len / stride)`) are zeroed, which
//! makes a zero-padded sequence compute exactly what the unpadded one does.

pub(crate) mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DiscrepancyOp, LossTerm, Modality, ModelConfig, Pair};

use diffkit::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Layer-normalisation epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Kernel size of the pre/post projections, FPN smoothing and head layers.
const PROJ_KERNEL: usize = 3;

/// Paired per-frame visual and audio representations of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<T> {
    pub visual: Tensor<T>,
    pub audio: Tensor<T>,
    /// Frames before padding.
    pub valid_len: usize,
    pub fps: f64,
}

impl<T: Scalar> FeaturePair<T> {
    pub fn new(visual: Tensor<T>, audio: Tensor<T>, fps: f64) -> Result<Self> {
        let valid_len = visual.rows();
        let pair = Self {
            visual,
            audio,
            valid_len,
            fps,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual.rank() != 2 || self.visual.shape() != self.audio.shape() {
            return Err(Error::contract(format!(
                "visual {:?} and audio {:?} must be equal [t, d] matrices",
                self.visual.shape(),
                self.audio.shape()
            )));
        }
        if self.valid_len > self.t() {
            return Err(Error::contract(format!(
                "valid_len {} exceeds t = {}",
                self.valid_len,
                self.t()
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::contract(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.visual.rows()
    }

    pub fn d(&self) -> usize {
        self.visual.cols()
    }

    /// Duration of the valid frames in seconds.
    pub fn duration(&self) -> f64 {
        self.valid_len as f64 / self.fps
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePair<U> {
        FeaturePair {
            visual: self.visual.cast(),
            audio: self.audio.cast(),
            valid_len: self.valid_len,
            fps: self.fps,
        }
    }

    /// Frames `start .. end` as a new, unpadded pair.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t() {
            return Err(Error::contract(format!(
                "frame window {start}..{end} outside 0..{}",
                self.t()
            )));
        }
        let d = self.d();
        let cut = |x: &Tensor<T>| Tensor::new(vec![end - start, d], x.data()[start * d..end * d].to_vec());
        Ok(Self {
            visual: cut(&self.visual)?,
            audio: cut(&self.audio)?,
            valid_len: end - start,
            fps: self.fps,
        })
    }

    pub fn modality(&self, m: Modality) -> &Tensor<T> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    None,
    Relu,
    Softplus,
}

#[derive(Debug, Clone)]
struct Layer {
    kind: LayerKind,
    weight: usize,
    bias: usize,
    norm: Option<(usize, usize)>,
    act: Activation,
    stride: usize,
}

#[derive(Debug, Clone)]
struct ReconLayout {
    pair: Pair,
    pre: Vec<Layer>,
    down: Vec<Layer>,
    up: Vec<Layer>,
    post: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct Layout {
    recon: Vec<ReconLayout>,
    encoder: Vec<Layer>,
    lateral: Vec<Layer>,
    smooth: Vec<Layer>,
    cls: Vec<Layer>,
    reg: Vec<Layer>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &mut self,
        name: &str,
        kind: LayerKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        act: Activation,
    ) -> Layer {
        let (shape, fan_in) = match kind {
            LayerKind::Conv => (vec![c_out, c_in, kernel], c_in * kernel),
            LayerKind::Deconv => (vec![c_in, c_out, kernel], c_out * kernel),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.tensor(format!("{name}.weight"), shape, Init::Uniform(bound));
        let bias = self.tensor(format!("{name}.bias"), vec![c_out], Init::Uniform(bound));
        let norm = norm.then(|| {
            (
                self.tensor(format!("{name}.ln.gain"), vec![c_out], Init::Ones),
                self.tensor(format!("{name}.ln.shift"), vec![c_out], Init::Zeros),
            )
        });
        Layer {
            kind,
            weight,
            bias,
            norm,
            act,
            stride,
        }
    }

    fn build(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
        use Activation::*;
        use LayerKind::*;
        let mut b = LayoutBuilder::default();
        let (d, da, k, q) = (config.d, config.d_a, config.kernel, config.q);

        let recon = config
            .ordered_pairs()
            .into_iter()
            .map(|pair| {
                let p = format!("recon.{pair}");
                let pre = (0..config.l_pre_r)
                    .map(|i| {
                        let c_in = if i == 0 { d } else { da };
                        b.layer(&format!("{p}.pre{i}"), Conv, c_in, da, PROJ_KERNEL, 1, true, Relu)
                    })
                    .collect();
                let down = (0..config.l_down_r)
                    .map(|i| b.layer(&format!("{p}.down{i}"), Conv, da, da, k, 2, true, Relu))
                    .collect();
                let up = (0..config.l_up_r)
                    .map(|i| b.layer(&format!("{p}.up{i}"), Deconv, da, da, k, 2, true, Relu))
                    .collect();
                let mut post: Vec<Layer> = (0..config.l_post_r - 1)
                    .map(|i| b.layer(&format!("{p}.post{i}"), Conv, da, da, PROJ_KERNEL, 1, true, Relu))
                    .collect();
                post.push(b.layer(&format!("{p}.out"), Conv, da, d, PROJ_KERNEL, 1, false, None));
                ReconLayout {
                    pair,
                    pre,
                    down,
                    up,
                    post,
                }
            })
            .collect();

        let c_enc = d * config.ordered_pairs().len();
        let strides = config.level_strides();
        let encoder = (0..config.levels())
            .map(|i| {
                let c_in = if i == 0 { c_enc } else { da };
                let stride = if i < config.l_retain_e { 1 } else { 2 };
                b.layer(&format!("encoder{i}"), Conv, c_in, da, k, stride, true, Relu)
            })
            .collect();
        let lateral = (0..strides.len())
            .map(|i| b.layer(&format!("fpn.lateral{i}"), Conv, da, q, 1, 1, false, None))
            .collect();
        let smooth = (0..strides.len())
            .map(|i| b.layer(&format!("fpn.smooth{i}"), Conv, q, q, PROJ_KERNEL, 1, false, None))
            .collect();
        let mut head = |name: &str, d_out: usize, last: Activation| -> Vec<Layer> {
            vec![
                b.layer(&format!("{name}0"), Conv, q, da, PROJ_KERNEL, 1, true, Relu),
                b.layer(&format!("{name}1"), Conv, da, da, PROJ_KERNEL, 1, true, Relu),
                b.layer(&format!("{name}.out"), Conv, da, d_out, PROJ_KERNEL, 1, false, last),
            ]
        };
        let cls = head("cls", 1, None);
        let reg = head("reg", 2, Softplus);
        (
            Layout {
                recon,
                encoder,
                lateral,
                smooth,
                cls,
                reg,
            },
            b.specs,
        )
    }
}

/// Parameter handles of a [`Network`] bound onto one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Graph handles of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub features: Var,
    /// `[len]` raw classification logits.
    pub logits: Var,
    /// `[len, 2]` non-negative (left, right) distances in seconds.
    pub offsets: Var,
    pub stride: usize,
    /// Rows of this level that correspond to valid frames.
    pub valid: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedLevel {
    pub features: Var,
    pub stride: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub logits: Var,
    pub offsets: Var,
}

/// Everything a forward pass records that losses and decoding need.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub visual: Var,
    pub audio: Var,
    pub recon: Vec<(Pair, Var)>,
    pub levels: Vec<LevelVars>,
    pub valid_len: usize,
    pub fps: f64,
}

impl ForwardVars {
    pub fn target(&self, m: Modality) -> Var {
        match m {
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// Reconstructed sequences, one per configured pair, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSet<T> {
    pub items: Vec<(Pair, Tensor<T>)>,
}

impl<T> ReconstructionSet<T> {
    pub fn get(&self, pair: Pair) -> Option<&Tensor<T>> {
        self.items.iter().find(|(p, _)| *p == pair).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<T> {
    pub features: Tensor<T>,
    pub logits: Vec<T>,
    pub offsets: Tensor<T>,
    pub stride: usize,
    pub valid: usize,
}

/// Head outputs at every pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidOutput<T> {
    pub levels: Vec<PyramidLevel<T>>,
    pub valid_len: usize,
    pub fps: f64,
}

impl<T: Scalar> PyramidOutput<T> {
    /// Duration of the valid frames in seconds.
    pub fn duration(&self) -> f64 {
        self.valid_len as f64 / self.fps
    }
}

/// Anchor time in seconds of position `i` at a level with `stride`.
pub fn anchor_time(i: usize, stride: usize, fps: f64) -> f64 {
    (i * stride) as f64 / fps + 0.5 * stride as f64 / fps
}

/// Model parameters plus the layer layout derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    layout: Layout,
}

impl<T: Scalar> Network<T> {
    /// Builds and randomly initialises a model from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let tensor = match init {
                Init::Uniform(bound) => {
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            params.push(tensor);
        }
        Ok(Self {
            config,
            params,
            names,
            layout,
        })
    }

    /// Assembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(&config);
        if specs.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _, _)| n).collect(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Records every parameter as a leaf: trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn apply(&self, g: &mut Graph<T>, b: &Bound, layer: &Layer, x: Var, valid: usize) -> Result<Var> {
        let (w, bias) = (b.vars[layer.weight], b.vars[layer.bias]);
        let mut y = match layer.kind {
            LayerKind::Conv => g.conv1d(x, w, bias, layer.stride)?,
            LayerKind::Deconv => g.deconv1d(x, w, bias, layer.stride)?,
        };
        if let Some((gain, shift)) = layer.norm {
            y = g.layer_norm(y, b.vars[gain], b.vars[shift], T::lit(LN_EPS))?;
        }
        y = match layer.act {
            Activation::None => y,
            Activation::Relu => g.relu(y),
            Activation::Softplus => g.softplus(y),
        };
        if valid < g.value(y).rows() {
            y = g.mask_rows(y, valid)?;
        }
        Ok(y)
    }

    /// Runs the reconstruction network of `pair` on a `[t, d]` source.
    pub fn reconstruct(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        pair: Pair,
        source: Var,
        valid_len: usize,
    ) -> Result<Var> {
        let net = self
            .layout
            .recon
            .iter()
            .find(|r| r.pair == pair)
            .ok_or_else(|| Error::contract(format!("pair {pair} is not configured")))?;
        let shape = g.value(source).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.d {
            return Err(Error::contract(format!(
                "reconstruction input {shape:?} does not match d = {}",
                self.config.d
            )));
        }
        let t = shape[0];
        let factor = 1usize << self.config.l_down_r;
        let padded = t.div_ceil(factor) * factor;
        let mut x = if padded > t {
            g.pad_rows(source, padded)?
        } else {
            source
        };
        for layer in &net.pre {
            x = self.apply(g, b, layer, x, valid_len)?;
        }
        let mut valids = vec![valid_len];
        for layer in &net.down {
            let v = valids.last().unwrap().div_ceil(2);
            valids.push(v);
            x = self.apply(g, b, layer, x, v)?;
        }
        for (i, layer) in net.up.iter().enumerate() {
            let v = valids[net.down.len() - 1 - i];
            x = self.apply(g, b, layer, x, v)?;
        }
        for layer in &net.post {
            x = self.apply(g, b, layer, x, valid_len)?;
        }
        if padded > t {
            x = g.slice_rows(x, 0, t)?;
        }
        Ok(x)
    }

    /// Concatenates γ(ζ,η) over the configured pairs in canonical order.
    pub fn compute_discrepancies(
        &self,
        g: &mut Graph<T>,
        visual: Var,
        audio: Var,
        recon: &[(Pair, Var)],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        for pair in self.config.ordered_pairs() {
            let rec = recon
                .iter()
                .find(|(p, _)| *p == pair)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::contract(format!("missing reconstruction for {pair}")))?;
            let target = match pair.target() {
                Modality::Audio => audio,
                Modality::Visual => visual,
            };
            parts.push(match self.config.discrepancy {
                DiscrepancyOp::Difference => g.sub(rec, target)?,
                DiscrepancyOp::Product => g.mul(rec, target)?,
            });
        }
        Ok(g.concat_channels(&parts)?)
    }

    /// Encoder layers followed by the top-down feature pyramid.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        valid_len: usize,
    ) -> Result<Vec<EncodedLevel>> {
        let width = self.config.d * self.config.ordered_pairs().len();
        if g.value(x).cols() != width || g.value(x).rank() != 2 {
            return Err(Error::contract(format!(
                "encoder input {:?} does not have {width} channels",
                g.value(x).shape()
            )));
        }
        let strides = self.config.level_strides();
        let mut feats = Vec::with_capacity(strides.len());
        let mut valids = Vec::with_capacity(strides.len());
        let mut cur = x;
        let mut v = valid_len;
        for layer in &self.layout.encoder {
            if layer.stride == 2 {
                v = v.div_ceil(2);
            }
            cur = self.apply(g, b, layer, cur, v)?;
            feats.push(cur);
            valids.push(v);
        }
        let lat: Vec<Var> = feats
            .iter()
            .zip(&valids)
            .zip(&self.layout.lateral)
            .map(|((&f, &v), layer)| self.apply(g, b, layer, f, v))
            .collect::<Result<_>>()?;
        let n = lat.len();
        let mut merged = vec![lat[n - 1]; n];
        for i in (0..n - 1).rev() {
            let factor = strides[i + 1] / strides[i];
            let rows = g.value(lat[i]).rows();
            let coarse = if factor == 1 {
                merged[i + 1]
            } else {
                g.upsample_rows(merged[i + 1], factor, rows)?
            };
            let mut sum = g.add(lat[i], coarse)?;
            if valids[i] < rows {
                sum = g.mask_rows(sum, valids[i])?;
            }
            merged[i] = sum;
        }
        merged
            .into_iter()
            .zip(&self.layout.smooth)
            .enumerate()
            .map(|(i, (p, layer))| {
                Ok(EncodedLevel {
                    features: self.apply(g, b, layer, p, valids[i])?,
                    stride: strides[i],
                    valid: valids[i],
                })
            })
            .collect()
    }

    /// Shared classification and regression heads over every level.
    pub fn predict_heads(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        levels: &[EncodedLevel],
    ) -> Result<Vec<HeadVars>> {
        levels
            .iter()
            .map(|lvl| {
                let mut c = lvl.features;
                for layer in &self.layout.cls {
                    c = self.apply(g, b, layer, c, lvl.valid)?;
                }
                let mut r = lvl.features;
                for layer in &self.layout.reg {
                    r = self.apply(g, b, layer, r, lvl.valid)?;
                }
                Ok(HeadVars {
                    logits: g.column(c, 0)?,
                    offsets: r,
                })
            })
            .collect()
    }

    /// Full forward pass: reconstructions, discrepancies, pyramid, heads.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, input: &FeaturePair<T>) -> Result<ForwardVars> {
        input.validate()?;
        if input.valid_len == 0 {
            return Err(Error::contract("valid_len must be at least 1"));
        }
        if input.d() != self.config.d {
            return Err(Error::contract(format!(
                "feature dimension {} does not match model d = {}",
                input.d(),
                self.config.d
            )));
        }
        let visual = g.constant(input.visual.clone());
        let audio = g.constant(input.audio.clone());
        let mut recon = Vec::new();
        for pair in self.config.ordered_pairs() {
            let source = match pair.source() {
                Modality::Audio => audio,
                Modality::Visual => visual,
            };
            recon.push((pair, self.reconstruct(g, b, pair, source, input.valid_len)?));
        }
        let x = self.compute_discrepancies(g, visual, audio, &recon)?;
        let encoded = self.encode(g, b, x, input.valid_len)?;
        let heads = self.predict_heads(g, b, &encoded)?;
        let levels = encoded
            .iter()
            .zip(heads)
            .map(|(e, h)| LevelVars {
                features: e.features,
                logits: h.logits,
                offsets: h.offsets,
                stride: e.stride,
                valid: e.valid,
            })
            .collect();
        Ok(ForwardVars {
            visual,
            audio,
            recon,
            levels,
            valid_len: input.valid_len,
            fps: input.fps,
        })
    }

    /// Gradient-free forward pass returning plain tensors.
    pub fn infer(&self, input: &FeaturePair<T>) -> Result<(ReconstructionSet<T>, PyramidOutput<T>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.forward(&mut g, &b, input)?;
        Ok(extract(&g, &out))
    }
}

/// Copies the values behind a recorded forward pass out of the graph.
pub fn extract<T: Scalar>(g: &Graph<T>, out: &ForwardVars) -> (ReconstructionSet<T>, PyramidOutput<T>) {
    let recon = ReconstructionSet {
        items: out
            .recon
            .iter()
            .map(|(p, v)| (*p, g.value(*v).clone()))
            .collect(),
    };
    let levels = out
        .levels
        .iter()
        .map(|l| PyramidLevel {
            features: g.value(l.features).clone(),
            logits: g.value(l.logits).data().to_vec(),
            offsets: g.value(l.offsets).clone(),
            stride: l.stride,
            valid: l.valid,
        })
        .collect();
    (
        recon,
        PyramidOutput {
            levels,
            valid_len: out.valid_len,
            fps: out.fps,
        },
    )
}
