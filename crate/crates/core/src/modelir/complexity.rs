use serde::Serialize;

use super::{pad_channels, LayerKind, ModelIR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CountMode {
    /// True channel counts.
    Model,
    /// Channel counts padded to the machine's 32-channel lanes.
    Hardware,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOps {
    pub layer: usize,
    /// Operations per pixel at the layer's own stratum (MAC = 2 ops).
    pub ops_per_pixel: f64,
    pub level: i32,
    /// Pixels lost per side by this layer.
    pub border: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub intrinsic_kop_per_pixel: f64,
    pub effective_kop_per_pixel: f64,
    pub param_count: usize,
    pub depth_profile: Vec<LayerOps>,
}

impl ComplexityReport {
    pub fn with_ncr(mut self, ncr: f64) -> Self {
        self.effective_kop_per_pixel = self.intrinsic_kop_per_pixel * ncr;
        self
    }

    pub fn ncr(&self) -> f64 {
        self.effective_kop_per_pixel / self.intrinsic_kop_per_pixel
    }
}

/// Channel counts a layer occupies in the given mode: (in, expanded, out).
pub(crate) fn layer_channels(m: &ModelIR, index: usize, mode: CountMode) -> (usize, usize, usize) {
    let l = &m.layers[index];
    let feeds_shuffle =
        matches!(m.layers.get(index + 1).map(|n| n.kind), Some(LayerKind::PixelShuffleUp2));
    let (i, o) = match mode {
        CountMode::Model => (l.in_ch, l.out_ch),
        CountMode::Hardware if feeds_shuffle => (pad_channels(l.in_ch), 4 * pad_channels(l.out_ch / 4)),
        CountMode::Hardware => (pad_channels(l.in_ch), pad_channels(l.out_ch)),
    };
    let e = match l.kind {
        LayerKind::ERModule { expand } => expand as usize * i,
        _ => o,
    };
    (i, e, o)
}

/// Operations per pixel of one layer at its own stratum.
pub(crate) fn layer_ops(m: &ModelIR, index: usize, mode: CountMode) -> f64 {
    let (i, e, o) = layer_channels(m, index, mode);
    let ops = match m.layers[index].kind {
        LayerKind::Conv3x3 => 2 * 9 * i * o,
        LayerKind::Conv1x1 => 2 * i * o,
        LayerKind::ERModule { .. } => 2 * 9 * i * e + 2 * e * o,
        _ => 0,
    };
    ops as f64
}

pub(crate) fn param_count(m: &ModelIR) -> usize {
    m.layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv3x3 => 9 * l.in_ch * l.out_ch + l.out_ch,
            LayerKind::Conv1x1 => l.in_ch * l.out_ch + l.out_ch,
            LayerKind::ERModule { expand } => {
                let e = expand as usize * l.in_ch;
                9 * l.in_ch * e + e + e * l.out_ch + l.out_ch
            }
            _ => 0,
        })
        .sum()
}

/// Operations per final-output pixel. Layers below the output stratum are
/// scaled by their pixel-count ratio.
pub fn intrinsic_complexity(m: &ModelIR, mode: CountMode) -> ComplexityReport {
    let out_level = m.output_level();
    let mut total = 0.0;
    let mut profile = Vec::new();
    for (index, l) in m.layers.iter().enumerate() {
        let ops = layer_ops(m, index, mode);
        if ops == 0.0 {
            continue;
        }
        let area_ratio = (2.0 * (l.scale_level - out_level) as f64).exp2();
        total += ops * area_ratio;
        profile.push(LayerOps { layer: index, ops_per_pixel: ops, level: l.scale_level, border: l.border() });
    }
    let kop = total / 1000.0;
    ComplexityReport {
        intrinsic_kop_per_pixel: kop,
        effective_kop_per_pixel: kop,
        param_count: param_count(m),
        depth_profile: profile,
    }
}
