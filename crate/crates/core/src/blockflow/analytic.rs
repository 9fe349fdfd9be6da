use super::BlockFlowError;

fn depth_ratio(depth: usize, x_i: usize) -> Result<f64, BlockFlowError> {
    if 2 * depth >= x_i {
        return Err(BlockFlowError::NoOutput { depth, x_i });
    }
    Ok(depth as f64 / x_i as f64)
}

/// Normalized bandwidth of a plain all-3x3 network: input plus output block
/// traffic over output frame traffic, `1 + 1/(1-2β)²` with `β = D/x_i`.
pub fn nbr_plain(depth: usize, x_i: usize) -> Result<f64, BlockFlowError> {
    let beta = depth_ratio(depth, x_i)?;
    Ok(1.0 + 1.0 / (1.0 - 2.0 * beta).powi(2))
}

/// Normalized computation of a plain network: truncated-pyramid volume over
/// the output cuboid, `1/3 + (2/3)(1-β)/(1-2β)²`.
pub fn ncr_plain(depth: usize, x_i: usize) -> Result<f64, BlockFlowError> {
    let beta = depth_ratio(depth, x_i)?;
    Ok(1.0 / 3.0 + 2.0 / 3.0 * (1.0 - beta) / (1.0 - 2.0 * beta).powi(2))
}

/// Same as [`nbr_plain`] but for a continuous depth-input ratio.
pub fn nbr_at(beta: f64) -> f64 {
    1.0 + 1.0 / (1.0 - 2.0 * beta).powi(2)
}

pub fn ncr_at(beta: f64) -> f64 {
    1.0 / 3.0 + 2.0 / 3.0 * (1.0 - beta) / (1.0 - 2.0 * beta).powi(2)
}

/// Feature-map DRAM traffic of layer-by-layer frame inference in bytes/s:
/// every intermediate map is written once and read back once.
pub fn frame_bandwidth(height: usize, width: usize, channels: usize, depth: usize, fps: f64, bits: u32) -> f64 {
    let maps = depth.saturating_sub(1) as f64;
    height as f64 * width as f64 * channels as f64 * maps * fps * bits as f64 * 2.0 / 8.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nbr_examples() {
        assert!((nbr_at(0.4) - 26.0).abs() < 1e-9);
        assert_eq!(nbr_plain(0, 128).unwrap(), 2.0);
        assert!((nbr_plain(6, 128).unwrap() - 2.218).abs() < 5e-4);
        assert!(matches!(nbr_plain(64, 128), Err(BlockFlowError::NoOutput { .. })));
    }

    #[test]
    fn ncr_examples() {
        assert_eq!(ncr_plain(0, 128).unwrap(), 1.0);
        let at_04 = ncr_at(0.4);
        assert!((at_04 - 10.3333).abs() < 1e-3);
        assert!((1.0 - 1.0 / at_04 - 0.903).abs() < 1e-3);
        assert!((ncr_plain(15, 128).unwrap() - 1.337).abs() < 1e-3);
    }

    #[test]
    fn frame_bandwidth_examples() {
        let hd = frame_bandwidth(1080, 1920, 64, 20, 30.0, 16);
        assert!((hd / 1e9 - 302.6).abs() < 0.05);
        let uhd = frame_bandwidth(2160, 3840, 64, 20, 30.0, 16);
        assert_eq!(uhd, 4.0 * hd);
        assert_eq!(frame_bandwidth(1080, 1920, 64, 1, 30.0, 16), 0.0);
    }

    #[test]
    fn ratios_grow_with_depth_and_shrink_with_block() {
        for d in 1..60 {
            assert!(nbr_plain(d, 128).unwrap() > nbr_plain(d - 1, 128).unwrap());
            assert!(ncr_plain(d, 128).unwrap() > ncr_plain(d - 1, 128).unwrap());
            assert!(nbr_plain(d, 130).unwrap() < nbr_plain(d, 128).unwrap());
            assert!(ncr_plain(d, 130).unwrap() < ncr_plain(d, 128).unwrap());
        }
    }
}
