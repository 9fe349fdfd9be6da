use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ecnnkit_core::fixedpoint::Norm;
use ecnnkit_core::modelir::{build_ernet, load_model, Family, LayerSpec, ModelIR, ModelWeights, QuantFields, QuantizedModel};
use ecnnkit_core::quantflow::{assign_formats, collect_stats, quantize, QuantPlan};
use ecnnkit_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model with real-valued weights and, when it was saved by `quantize`,
/// its stored formats.
pub struct Loaded {
    pub model: ModelIR,
    pub weights: ModelWeights,
    pub quant: Option<QuantFields>,
}

/// `DnERNet-B3R1N0`, `sr4-b34r4n0`, `DnERNet-12ch-B3R1N0`, `plain-D20`,
/// `plain-D20C64` or a path to a saved model document.
pub fn parse_model(spec: &str) -> Result<ModelIR> {
    let lower = spec.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("plain-d") {
        let (d, c) = match rest.split_once('c') {
            Some((d, c)) => (d.parse::<usize>()?, c.parse::<usize>()?),
            None => (rest.parse::<usize>()?, 64),
        };
        if d < 2 {
            bail!("a plain model needs at least two layers");
        }
        let mut layers = vec![LayerSpec::conv3x3(3, c, 0).with_relu()];
        layers.extend((0..d - 2).map(|_| LayerSpec::conv3x3(c, c, 0).with_relu()));
        layers.push(LayerSpec::conv3x3(c, 3, 0));
        return Ok(ModelIR::custom(layers, vec![])?);
    }
    let (family, hyper) = lower.rsplit_once('-').ok_or_else(|| anyhow!("model `{spec}`: expected <family>-B<b>R<r>N<n>"))?;
    let family: Family = family.replace("ernet", "").parse()?;
    let nums: Vec<u32> = hyper
        .strip_prefix('b')
        .and_then(|h| {
            let (b, h) = h.split_once('r')?;
            let (r, n) = h.split_once('n')?;
            Some(vec![b.parse().ok()?, r.parse().ok()?, n.parse().ok()?])
        })
        .ok_or_else(|| anyhow!("model `{spec}`: bad hyperparameters `{hyper}`"))?;
    Ok(build_ernet(family, nums[0], nums[1], nums[2], 32)?)
}

pub fn load(spec: &str, seed: u64) -> Result<Loaded> {
    let path = Path::new(spec);
    if path.extension().is_some_and(|e| e == "json") {
        let (doc, weights) = load_model(path).with_context(|| format!("loading {spec}"))?;
        return Ok(Loaded { model: doc.model, weights, quant: doc.quant });
    }
    let model = parse_model(spec)?;
    let weights = ModelWeights::random(&model, seed);
    Ok(Loaded { model, weights, quant: None })
}

/// Smooth gradients with seeded noise, as 8-bit codes.
pub fn synthetic_frame(w: usize, h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(w, h, 3, |x, y, c| {
        let base = (x * 255 / w.max(1) + y * 128 / h.max(1) + 60 * c) % 256;
        (base as i32 + rng.gen_range(-12..=12)).clamp(0, 255)
    })
}

pub fn sample_frames(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
    (0..count as u64).map(|k| synthetic_frame(side, side, seed.wrapping_add(1000 + k))).collect()
}

pub struct QuantOptions {
    pub norm: Norm,
    pub seed: u64,
    pub samples: usize,
    pub budget: usize,
}

/// Uses stored formats when present, otherwise runs post-training
/// quantization over synthetic sample frames.
pub fn quantized(l: &Loaded, o: &QuantOptions) -> Result<(QuantizedModel, QuantPlan)> {
    let plan = match &l.quant {
        Some(f) => QuantPlan::from_fields(f, o.norm),
        None => {
            let stats = collect_stats(&l.model, &l.weights, &sample_frames(o.samples, 16, o.seed))?;
            assign_formats(&stats, o.norm, o.budget)?
        }
    };
    Ok((quantize(&l.model, &l.weights, &plan)?, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!(parse_model("DnERNet-B3R1N0").unwrap().name(), "DnERNet-B3R1N0");
        assert_eq!(parse_model("sr4-b34r4n0").unwrap().name(), "SR4ERNet-B34R4N0");
        assert_eq!(parse_model("DnERNet-12ch-B2R2N1").unwrap().name(), "DnERNet-12ch-B2R2N1");
        assert_eq!(parse_model("plain-D20").unwrap().depth(), 20);
        assert_eq!(parse_model("plain-d6c32").unwrap().layers[1].in_ch, 32);
        assert!(parse_model("DnERNet").is_err());
        assert!(parse_model("foo-B1R1N0").is_err());
        assert!(parse_model("dn-B1R9N0").is_err());
    }
}
