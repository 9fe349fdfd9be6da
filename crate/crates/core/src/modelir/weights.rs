use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, ModelError, ModelIR};
use crate::fixedpoint::QFormat;

/// Real-valued parameters of one layer.
///
/// `w3` is laid out `[out][in][ky][kx]`, `w1` as `[out][in]`. For an
/// ERModule the 3x3 stage maps `in -> expand*in` and the 1x1 stage maps
/// back; a plain convolution fills only the pair matching its kernel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerParams {
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(spec: &LayerSpec) -> Option<Self> {
        let (i, o) = (spec.in_ch, spec.out_ch);
        let p = match spec.kind {
            LayerKind::Conv3x3 => LayerParams { w3: vec![0.0; o * i * 9], b3: vec![0.0; o], ..Default::default() },
            LayerKind::Conv1x1 => LayerParams { w1: vec![0.0; o * i], b1: vec![0.0; o], ..Default::default() },
            LayerKind::ERModule { expand } => {
                let e = expand as usize * i;
                LayerParams { w3: vec![0.0; e * i * 9], b3: vec![0.0; e], w1: vec![0.0; o * e], b1: vec![0.0; o] }
            }
            _ => return None,
        };
        Some(p)
    }

    pub fn len(&self) -> usize {
        self.w3.len() + self.b3.len() + self.w1.len() + self.b1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in storage order: w3, b3, w1, b1.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w3, &self.b3, &self.w1, &self.b1].into_iter().flatten().copied().collect()
    }

    fn check(&self, spec: &LayerSpec, index: usize) -> Result<(), ModelError> {
        let want = LayerParams::zeros(spec).unwrap_or_default();
        let shape = |p: &LayerParams| [p.w3.len(), p.b3.len(), p.w1.len(), p.b1.len()];
        if shape(self) != shape(&want) {
            return Err(ModelError::Layer {
                index,
                msg: format!("parameter shape {:?}, expected {:?}", shape(self), shape(&want)),
            });
        }
        Ok(())
    }
}

/// Real-valued weights for every layer of a model (`None` for layers
/// without parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<Option<LayerParams>>,
}

impl ModelWeights {
    pub fn zeros(m: &ModelIR) -> Self {
        ModelWeights { layers: m.layers.iter().map(LayerParams::zeros).collect() }
    }

    /// Seeded uniform initialization scaled by fan-in. ER reductions are
    /// damped so deep residual trunks stay in a sane dynamic range.
    pub fn random(m: &ModelIR, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut Vec<f64>, bound: f64| v.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        let layers = m
            .layers
            .iter()
            .map(|spec| {
                let mut p = LayerParams::zeros(spec)?;
                let fan3 = (9 * spec.in_ch) as f64;
                match spec.kind {
                    LayerKind::Conv3x3 => fill(&mut p.w3, (3.0 / fan3).sqrt()),
                    LayerKind::Conv1x1 => fill(&mut p.w1, (3.0 / spec.in_ch as f64).sqrt()),
                    LayerKind::ERModule { .. } => {
                        fill(&mut p.w3, (3.0 / fan3).sqrt());
                        fill(&mut p.w1, 0.3 * (3.0 / p.b3.len() as f64).sqrt());
                    }
                    _ => {}
                }
                fill(&mut p.b3, 0.05);
                fill(&mut p.b1, 0.05);
                Some(p)
            })
            .collect();
        ModelWeights { layers }
    }

    pub fn check(&self, m: &ModelIR) -> Result<(), ModelError> {
        if self.layers.len() != m.layers.len() {
            return Err(ModelError::Container(format!(
                "{} weight entries for {} layers",
                self.layers.len(),
                m.layers.len()
            )));
        }
        for (i, (spec, p)) in m.layers.iter().zip(&self.layers).enumerate() {
            match p {
                Some(p) => p.check(spec, i)?,
                None if spec.has_params() => {
                    return Err(ModelError::Layer { index: i, msg: "missing parameters".into() })
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Integer parameter codes of one layer together with their formats.
///
/// `qs` is the ER intermediate format (between 3x3 and 1x1 stages) or, for
/// a convolution wider than one lane group, the partial-sum format passed
/// between chained instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCodes {
    pub qw: QFormat,
    pub qb: QFormat,
    pub qs: Option<QFormat>,
    pub w3: Vec<i32>,
    pub b3: Vec<i32>,
    pub w1: Vec<i32>,
    pub b1: Vec<i32>,
}

/// A model with every parameter and feature format fixed.
///
/// `out_fmt[i]` is the format of layer `i`'s output feature. A convolution
/// followed by a ResidualAdd or a pixel (un)shuffle shares the format of
/// the layer that consumes it, since the machine fuses the pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub model: ModelIR,
    pub input_fmt: QFormat,
    pub out_fmt: Vec<QFormat>,
    pub codes: Vec<Option<LayerCodes>>,
}

impl QuantizedModel {
    /// Format of the feature that feeds layer `i`.
    pub fn in_fmt(&self, i: usize) -> QFormat {
        if i == 0 {
            self.input_fmt
        } else {
            self.out_fmt[i - 1]
        }
    }

    pub fn output_fmt(&self) -> QFormat {
        *self.out_fmt.last().unwrap_or(&self.input_fmt)
    }
}
