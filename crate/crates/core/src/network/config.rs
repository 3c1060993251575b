use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A source→target reconstruction task, `(ζ, η)`: rebuild modality η from ζ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pair {
    /// audio → visual
    #[serde(rename = "av")]
    AudioVisual,
    /// visual → audio
    #[serde(rename = "va")]
    VisualAudio,
    /// audio → audio
    #[serde(rename = "aa")]
    AudioAudio,
    /// visual → visual
    #[serde(rename = "vv")]
    VisualVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Pair {
    /// Canonical channel order of the discrepancy concatenation.
    pub const ALL: [Pair; 4] = [
        Pair::AudioVisual,
        Pair::VisualAudio,
        Pair::AudioAudio,
        Pair::VisualVisual,
    ];

    pub fn source(self) -> Modality {
        match self {
            Pair::AudioVisual | Pair::AudioAudio => Modality::Audio,
            Pair::VisualAudio | Pair::VisualVisual => Modality::Visual,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Pair::AudioVisual | Pair::VisualVisual => Modality::Visual,
            Pair::VisualAudio | Pair::AudioAudio => Modality::Audio,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Pair::AudioVisual => "av",
            Pair::VisualAudio => "va",
            Pair::AudioAudio => "aa",
            Pair::VisualVisual => "vv",
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// How a reconstruction is compared with its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyOp {
    /// `x̂ - x`
    #[default]
    Difference,
    /// `x̂ · x`
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Focal,
    Diou,
    SmoothL1,
    DetBce,
    RecMae,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input feature dimension.
    pub d: usize,
    /// Hidden width of every conv layer.
    pub d_a: usize,
    /// Kernel size of the strided and encoder layers.
    pub kernel: usize,
    /// Pyramid feature width.
    pub q: usize,
    pub l_pre_r: usize,
    pub l_down_r: usize,
    pub l_up_r: usize,
    pub l_post_r: usize,
    pub l_retain_e: usize,
    pub l_down_e: usize,
    pub pairs: Vec<Pair>,
    pub discrepancy: DiscrepancyOp,
    pub losses: Vec<LossTerm>,
    /// Seed of the parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    /// The LAV-DF instance: k = 15, d_a = 128, layer counts (2, 3, 3, 2) and (2, 2).
    fn default() -> Self {
        Self {
            d: 768,
            d_a: 128,
            kernel: 15,
            q: 128,
            l_pre_r: 2,
            l_down_r: 3,
            l_up_r: 3,
            l_post_r: 2,
            l_retain_e: 2,
            l_down_e: 2,
            pairs: vec![Pair::AudioVisual, Pair::AudioAudio, Pair::VisualVisual],
            discrepancy: DiscrepancyOp::Difference,
            losses: vec![LossTerm::Focal, LossTerm::Diou, LossTerm::RecMae],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The AV-Deepfake1M instance: reconstruction and encoder depth 1.
    pub fn av_deepfake1m() -> Self {
        Self {
            l_down_r: 1,
            l_up_r: 1,
            l_retain_e: 1,
            l_down_e: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs.is_empty() {
            return bad("pair set is empty".into());
        }
        if self.pair_set().len() != self.pairs.len() {
            return bad(format!("duplicate pairs in {:?}", self.pairs));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.d == 0 || self.d_a == 0 || self.q == 0 {
            return bad("feature widths must be positive".into());
        }
        let counts = [
            ("l_pre_r", self.l_pre_r),
            ("l_down_r", self.l_down_r),
            ("l_up_r", self.l_up_r),
            ("l_post_r", self.l_post_r),
            ("l_retain_e", self.l_retain_e),
            ("l_down_e", self.l_down_e),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.l_up_r != self.l_down_r {
            return bad(format!(
                "l_up_r ({}) must equal l_down_r ({}) so reconstructions keep the input length",
                self.l_up_r, self.l_down_r
            ));
        }
        let losses = self.loss_set();
        if !losses.contains(&LossTerm::Focal) {
            return bad("the focal term is mandatory".into());
        }
        if losses.contains(&LossTerm::Diou) == losses.contains(&LossTerm::SmoothL1) {
            return bad("exactly one of diou and smooth_l1 is required".into());
        }
        Ok(())
    }

    /// Configured pairs in canonical order.
    pub fn ordered_pairs(&self) -> Vec<Pair> {
        let set = self.pair_set();
        Pair::ALL.into_iter().filter(|p| set.contains(p)).collect()
    }

    pub fn pair_set(&self) -> BTreeSet<Pair> {
        self.pairs.iter().copied().collect()
    }

    pub fn loss_set(&self) -> BTreeSet<LossTerm> {
        self.losses.iter().copied().collect()
    }

    pub fn has_loss(&self, term: LossTerm) -> bool {
        self.losses.contains(&term)
    }

    /// Number of pyramid levels, `l_retain_e + l_down_e`.
    pub fn levels(&self) -> usize {
        self.l_retain_e + self.l_down_e
    }

    /// Temporal stride of each pyramid level.
    pub fn level_strides(&self) -> Vec<usize> {
        (0..self.levels())
            .map(|i| {
                if i < self.l_retain_e {
                    1
                } else {
                    1 << (i + 1 - self.l_retain_e)
                }
            })
            .collect()
    }

    /// Conv and deconv layer count of one reconstruction network.
    pub fn reconstruction_layers(&self) -> usize {
        self.l_pre_r + self.l_down_r + self.l_up_r + self.l_post_r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lavdf_instance_has_ten_reconstruction_layers() {
        let c = ModelConfig::default();
        assert_eq!(c.reconstruction_layers(), 10);
        c.validate().unwrap();
    }

    #[test]
    fn avdf1m_instance_has_two_levels() {
        let c = ModelConfig::av_deepfake1m();
        assert_eq!(c.levels(), 2);
        assert_eq!(c.level_strides(), vec![1, 2]);
    }

    #[test]
    fn strides_follow_retain_then_down() {
        let c = ModelConfig::default();
        assert_eq!(c.level_strides(), vec![1, 1, 2, 4]);
        let c = ModelConfig {
            l_retain_e: 3,
            l_down_e: 3,
            ..ModelConfig::default()
        };
        assert_eq!(c.level_strides(), vec![1, 1, 1, 2, 4, 8]);
    }

    #[test]
    fn canonical_pair_order() {
        let c = ModelConfig::default();
        assert_eq!(
            c.ordered_pairs(),
            vec![Pair::AudioVisual, Pair::AudioAudio, Pair::VisualVisual]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ModelConfig::default();
        let cases = [
            ModelConfig { pairs: vec![], ..base.clone() },
            ModelConfig { kernel: 4, ..base.clone() },
            ModelConfig { l_pre_r: 0, ..base.clone() },
            ModelConfig { losses: vec![LossTerm::Diou], ..base.clone() },
            ModelConfig { losses: vec![LossTerm::Focal], ..base.clone() },
            ModelConfig {
                losses: vec![LossTerm::Focal, LossTerm::Diou, LossTerm::SmoothL1],
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"d": 4, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"d": 4, "pairs": ["vv"]}"#).unwrap();
        assert_eq!(ok.pairs, vec![Pair::VisualVisual]);
    }
}
