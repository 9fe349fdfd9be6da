//! Hardware-aware network description.
//!
//! A [`ModelIR`] is a linear list of layers plus residual links. Every
//! layer records the resolution stratum it computes at (`scale_level`,
//! log2 of the resolution relative to the model input), so geometry and
//! complexity accounting can follow up/down-sampling without re-deriving
//! the topology.

mod build;
mod complexity;
mod container;
mod scan;
mod weights;

pub use build::build_ernet;
pub use complexity::{intrinsic_complexity, ComplexityReport, CountMode, LayerOps};
pub(crate) use complexity::layer_ops as layer_ops_for;
pub use container::{load_model, save_model, BlobRef, LayerQ, ModelDocument, QuantFields, MODEL_DOC_VERSION};
pub use scan::{scan_models, scan_models_ranked, ScanCandidate};
pub use weights::{LayerCodes, LayerParams, ModelWeights, QuantizedModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel granularity of the machine.
pub const LANE: usize = 32;
/// Largest per-module expansion ratio (and cap on the average).
pub const MAX_EXPANSION: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("N={n} must be smaller than B={b}")]
    TooManyIncremented { b: u32, n: u32 },
    #[error("expansion ratio R_E={0} outside 1..=4")]
    Expansion(f64),
    #[error("B must be at least 1")]
    NoModules,
    #[error("channel count {0} is not a positive multiple of 32")]
    Channels(usize),
    #[error("layer {index}: {msg}")]
    Layer { index: usize, msg: String },
    #[error("model container: {0}")]
    Container(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SR2,
    SR4,
    Dn,
    Dn12ch,
    Custom,
}

impl Family {
    /// Number of x2 upsamplers between trunk and output.
    pub fn upsamplers(&self) -> usize {
        match self {
            Family::SR2 => 1,
            Family::SR4 => 2,
            _ => 0,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sr2" => Ok(Family::SR2),
            "sr4" => Ok(Family::SR4),
            "dn" => Ok(Family::Dn),
            "dn12ch" | "dn-12ch" => Ok(Family::Dn12ch),
            "custom" => Ok(Family::Custom),
            _ => Err(ModelError::Container(format!("unknown family `{s}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::SR2 => "SR2ERNet",
            Family::SR4 => "SR4ERNet",
            Family::Dn => "DnERNet",
            Family::Dn12ch => "DnERNet-12ch",
            Family::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Stride,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    /// 3x3 expansion to `expand * in_ch`, ReLU, 1x1 reduction, plus the
    /// module input.
    ERModule { expand: u32 },
    PixelShuffleUp2,
    PixelUnshuffleDown2,
    /// Adds the output of the linked source layer (see
    /// [`ModelIR::residual_links`]).
    ResidualAdd,
    /// 2x spatial reduction of the preceding convolution's output.
    Downsample2(PoolKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    None,
    ReLU,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Stratum of the layer's input, log2 relative to the model input.
    pub scale_level: i32,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv3x3(in_ch: usize, out_ch: usize, scale_level: i32) -> Self {
        LayerSpec { kind: LayerKind::Conv3x3, in_ch, out_ch, scale_level, activation: Activation::None }
    }

    pub fn er(ch: usize, expand: u32, scale_level: i32) -> Self {
        LayerSpec {
            kind: LayerKind::ERModule { expand },
            in_ch: ch,
            out_ch: ch,
            scale_level,
            activation: Activation::None,
        }
    }

    pub fn with_relu(mut self) -> Self {
        self.activation = Activation::ReLU;
        self
    }

    /// Stratum of the layer's output.
    pub fn out_level(&self) -> i32 {
        match self.kind {
            LayerKind::PixelShuffleUp2 => self.scale_level + 1,
            LayerKind::PixelUnshuffleDown2 | LayerKind::Downsample2(_) => self.scale_level - 1,
            _ => self.scale_level,
        }
    }

    /// Whether the layer carries trainable parameters.
    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::ERModule { .. })
    }

    /// Pixels lost on each side at the layer's own stratum.
    pub fn border(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::ERModule { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub b: u32,
    pub r: u32,
    pub n: u32,
    pub channels: usize,
}

impl Hyper {
    /// Average expansion ratio `R + N/B`.
    pub fn expansion_ratio(&self) -> f64 {
        self.r as f64 + self.n as f64 / self.b as f64
    }

    /// Per-module ratios: the first `N` modules get `R+1`.
    pub fn module_ratios(&self) -> Vec<u32> {
        (0..self.b).map(|i| if i < self.n { self.r + 1 } else { self.r }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIR {
    pub family: Family,
    pub hyper: Option<Hyper>,
    pub layers: Vec<LayerSpec>,
    /// (source layer, ResidualAdd layer) pairs.
    pub residual_links: Vec<(usize, usize)>,
}

impl ModelIR {
    pub fn custom(layers: Vec<LayerSpec>, residual_links: Vec<(usize, usize)>) -> Result<Self, ModelError> {
        let m = ModelIR { family: Family::Custom, hyper: None, layers, residual_links };
        m.validate()?;
        Ok(m)
    }

    pub fn name(&self) -> String {
        match self.hyper {
            Some(h) => format!("{}-B{}R{}N{}", self.family, h.b, h.r, h.n),
            None => self.family.to_string(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_ch)
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_ch)
    }

    /// Stratum of the final output.
    pub fn output_level(&self) -> i32 {
        self.layers.last().map_or(0, |l| l.out_level())
    }

    /// Whether the model begins with a host-side pixel unshuffle.
    pub fn unshuffles_input(&self) -> bool {
        matches!(self.layers.first().map(|l| l.kind), Some(LayerKind::PixelUnshuffleDown2))
    }

    pub fn skip_source(&self, add_layer: usize) -> Option<usize> {
        self.residual_links.iter().find(|&&(_, d)| d == add_layer).map(|&(s, _)| s)
    }

    /// Number of 3x3 (and ER) layers on the longest path.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.border() > 0).count()
    }

    /// Cuts the model after `layer` into two sub-models.
    pub fn split_at(&self, layer: usize) -> Result<(ModelIR, ModelIR), ModelError> {
        if layer + 1 >= self.layers.len() {
            return Err(ModelError::Layer { index: layer, msg: "nothing left after the cut".into() });
        }
        if self.residual_links.iter().any(|&(s, d)| s <= layer && d > layer) {
            return Err(ModelError::Layer { index: layer, msg: "a residual link crosses the cut".into() });
        }
        let head_links = self.residual_links.iter().copied().filter(|&(_, d)| d <= layer).collect();
        let tail_links = self
            .residual_links
            .iter()
            .filter(|&&(s, _)| s > layer)
            .map(|&(s, d)| (s - layer - 1, d - layer - 1))
            .collect();
        let head = ModelIR {
            family: Family::Custom,
            hyper: None,
            layers: self.layers[..=layer].to_vec(),
            residual_links: head_links,
        };
        // the tail sees the cut feature map as its input stratum 0
        let shift = self.layers[layer].out_level();
        let tail_layers = self.layers[layer + 1..]
            .iter()
            .map(|l| LayerSpec { scale_level: l.scale_level - shift, ..l.clone() })
            .collect();
        let tail = ModelIR { family: Family::Custom, hyper: None, layers: tail_layers, residual_links: tail_links };
        head.validate()?;
        tail.validate()?;
        Ok((head, tail))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |index: usize, msg: String| Err(ModelError::Layer { index, msg });
        if self.layers.is_empty() {
            return err(0, "model has no layers".into());
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.out_ch != b.in_ch {
                return err(i + 1, format!("input channels {} but previous layer emits {}", b.in_ch, a.out_ch));
            }
            if a.out_level() != b.scale_level {
                return err(i + 1, format!("stratum {} but previous layer emits {}", b.scale_level, a.out_level()));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::ERModule { expand } => {
                    if !(1..=MAX_EXPANSION).contains(&expand) {
                        return err(i, format!("expansion ratio {expand} outside 1..=4"));
                    }
                    if l.in_ch != l.out_ch {
                        return err(i, "ERModule must preserve the channel count".into());
                    }
                }
                LayerKind::PixelShuffleUp2 => {
                    if l.in_ch != 4 * l.out_ch {
                        return err(i, "pixel shuffle must divide channels by four".into());
                    }
                }
                LayerKind::PixelUnshuffleDown2 => {
                    if l.out_ch != 4 * l.in_ch {
                        return err(i, "pixel unshuffle must multiply channels by four".into());
                    }
                }
                LayerKind::ResidualAdd | LayerKind::Downsample2(_) => {
                    if l.in_ch != l.out_ch {
                        return err(i, "layer must preserve the channel count".into());
                    }
                    if i == 0 {
                        return err(i, "layer needs a predecessor".into());
                    }
                }
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {}
            }
            if l.kind == LayerKind::ResidualAdd && self.skip_source(i).is_none() {
                return err(i, "ResidualAdd without a residual link".into());
            }
        }
        for &(src, dst) in &self.residual_links {
            if src >= dst || dst >= self.layers.len() {
                return err(dst, format!("residual link ({src}, {dst}) is not forward"));
            }
            if self.layers[dst].kind != LayerKind::ResidualAdd {
                return err(dst, "residual link must end at a ResidualAdd".into());
            }
            let (s, d) = (&self.layers[src], &self.layers[dst]);
            if s.out_level() != d.scale_level {
                return err(dst, "residual link crosses resolution strata".into());
            }
            if s.out_ch != d.in_ch {
                return err(dst, "residual link joins different channel counts".into());
            }
        }
        Ok(())
    }
}

/// Rounds a channel count up to the machine's 32-channel granularity.
pub fn pad_channels(ch: usize) -> usize {
    ch.div_ceil(LANE) * LANE
}
