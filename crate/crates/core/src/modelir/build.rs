use super::{Family, Hyper, LayerKind, LayerSpec, ModelError, ModelIR, LANE, MAX_EXPANSION};

const RGB: usize = 3;

/// Builds one of the ERNet families.
///
/// Topology: head 3x3 -> `B` ERModules (the first `N` expand by `R+1`, the
/// rest by `R`) -> 3x3 with the head output added back -> upsamplers ->
/// output. For the SR families the last upsampler's widening convolution
/// is the tail layer, so SR2 ends in `Conv(C->12) + shuffle` and SR4 has one
/// `Conv(C->4C) + shuffle` stage before that. DnERNet-12ch works on
/// pixel-unshuffled input and shuffles its 12-channel output back.
pub fn build_ernet(family: Family, b: u32, r: u32, n: u32, channels: usize) -> Result<ModelIR, ModelError> {
    if b == 0 {
        return Err(ModelError::NoModules);
    }
    if n >= b {
        return Err(ModelError::TooManyIncremented { b, n });
    }
    let hyper = Hyper { b, r, n, channels };
    let re = hyper.expansion_ratio();
    if r < 1 || re > MAX_EXPANSION as f64 {
        return Err(ModelError::Expansion(re));
    }
    if channels == 0 || !channels.is_multiple_of(LANE) {
        return Err(ModelError::Channels(channels));
    }
    if family == Family::Custom {
        return Err(ModelError::Container("custom models are not built from hyperparameters".into()));
    }

    let c = channels;
    let mut layers = Vec::new();
    let mut level = 0;
    let image_ch = if family == Family::Dn12ch {
        layers.push(LayerSpec {
            kind: LayerKind::PixelUnshuffleDown2,
            in_ch: RGB,
            out_ch: 4 * RGB,
            scale_level: 0,
            activation: Default::default(),
        });
        level = -1;
        4 * RGB
    } else {
        RGB
    };

    let head = layers.len();
    layers.push(LayerSpec::conv3x3(image_ch, c, level));
    for ratio in hyper.module_ratios() {
        layers.push(LayerSpec::er(c, ratio, level));
    }
    layers.push(LayerSpec::conv3x3(c, c, level));
    let add = layers.len();
    layers.push(LayerSpec { kind: LayerKind::ResidualAdd, ..LayerSpec::conv3x3(c, c, level) });

    let shuffle = |in_ch: usize, level: i32| LayerSpec {
        kind: LayerKind::PixelShuffleUp2,
        in_ch,
        out_ch: in_ch / 4,
        scale_level: level,
        activation: Default::default(),
    };
    match family {
        Family::Dn => layers.push(LayerSpec::conv3x3(c, RGB, level)),
        Family::SR2 | Family::SR4 | Family::Dn12ch => {
            for _ in 1..family.upsamplers() {
                layers.push(LayerSpec::conv3x3(c, 4 * c, level));
                layers.push(shuffle(4 * c, level));
                level += 1;
            }
            layers.push(LayerSpec::conv3x3(c, 4 * RGB, level));
            layers.push(shuffle(4 * RGB, level));
        }
        Family::Custom => unreachable!(),
    }

    let m = ModelIR { family, hyper: Some(hyper), layers, residual_links: vec![(head, add)] };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use num_rational::Ratio;

    use super::*;

    fn conv3x3_count(m: &ModelIR) -> usize {
        m.layers.iter().filter(|l| l.border() > 0).count()
    }

    #[test]
    fn dn_b3_has_six_three_by_three_layers() {
        let m = build_ernet(Family::Dn, 3, 1, 0, 32).unwrap();
        assert_eq!(conv3x3_count(&m), 6);
        assert_eq!(m.output_level(), 0);
    }

    #[test]
    fn incremented_modules_come_first() {
        let m = build_ernet(Family::Dn, 3, 1, 2, 32).unwrap();
        let ratios: Vec<u32> = m
            .layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::ERModule { expand } => Some(expand),
                _ => None,
            })
            .collect();
        assert_eq!(ratios, vec![2, 2, 1]);
        let h = m.hyper.unwrap();
        assert!((h.expansion_ratio() - 5.0 / 3.0).abs() < 1e-12);
        let mean = Ratio::new(ratios.iter().sum::<u32>(), ratios.len() as u32);
        assert_eq!(mean, Ratio::from_integer(h.r) + Ratio::new(h.n, h.b));
    }

    #[test]
    fn sr4_hd30_pick_builds() {
        let m = build_ernet(Family::SR4, 34, 4, 0, 32).unwrap();
        assert_eq!(m.hyper.unwrap().expansion_ratio(), 4.0);
        assert_eq!(m.output_level(), 2);
        assert_eq!(m.output_channels(), 3);
    }

    #[test]
    fn dn12ch_round_trips_resolution() {
        let m = build_ernet(Family::Dn12ch, 8, 2, 5, 32).unwrap();
        assert!(m.unshuffles_input());
        assert_eq!(m.output_level(), 0);
        assert_eq!(m.output_channels(), 3);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(build_ernet(Family::Dn, 3, 1, 3, 32), Err(ModelError::TooManyIncremented { b: 3, n: 3 }));
        assert!(matches!(build_ernet(Family::Dn, 3, 4, 1, 32), Err(ModelError::Expansion(_))));
        assert!(matches!(build_ernet(Family::Dn, 3, 5, 0, 32), Err(ModelError::Expansion(_))));
        assert_eq!(build_ernet(Family::Dn, 3, 1, 0, 48), Err(ModelError::Channels(48)));
        assert_eq!(build_ernet(Family::Dn, 0, 1, 0, 32), Err(ModelError::NoModules));
    }
}
