use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::modelir::{build_ernet, Family, LayerSpec};
use crate::paramcodec::PARAM_MEM_BYTES;
use crate::simcore::oracle_frame;

fn frame(w: usize, h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(w, h, 3, |_, _, _| rng.gen_range(0..=255))
}

/// Slow gradients plus a little texture.
fn smooth(w: usize, h: usize) -> Tensor {
    Tensor::from_fn(w, h, 3, |x, y, c| (40 + 4 * x + 3 * y + 20 * c) as i32 % 256)
}

fn two_convs(mid: usize) -> ModelIR {
    ModelIR::custom(vec![LayerSpec::conv3x3(3, mid, 0), LayerSpec::conv3x3(mid, 3, 0)], vec![]).unwrap()
}

#[test]
fn zero_weights_propagate_biases() {
    let m = two_convs(32);
    let mut w = ModelWeights::random(&m, 1);
    for p in w.layers.iter_mut().flatten() {
        p.w3.iter_mut().for_each(|v| *v = 0.0);
    }
    let s = collect_stats(&m, &w, &[frame(10, 8, 2)]).unwrap();
    for (l, stats) in s.layers.iter().enumerate() {
        let b = &w.layers[l].as_ref().unwrap().b3;
        let mut expect: Vec<f64> = (0..80).flat_map(|_| b.iter().copied()).collect();
        expect.sort_by(f64::total_cmp);
        assert_eq!(stats.features, expect, "layer {l}");
    }
}

#[test]
fn delta_kernels_reproduce_input_statistics() {
    let m = two_convs(3);
    let mut w = ModelWeights::zeros(&m);
    for p in w.layers.iter_mut().flatten() {
        for c in 0..3 {
            p.w3[(c * 3 + c) * 9 + 4] = 1.0;
        }
    }
    let f = frame(9, 7, 3);
    let s = collect_stats(&m, &w, std::slice::from_ref(&f)).unwrap();
    let mut input: Vec<f64> = f.data.iter().map(|&v| v as f64 / 256.0).collect();
    input.sort_by(f64::total_cmp);
    assert_eq!(s.layers[0].features, input);
    assert_eq!(s.layers[1].features, input);
}

#[test]
fn statistics_ignore_sample_order() {
    let m = build_ernet(Family::Dn, 1, 1, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 4);
    let (a, b) = (frame(12, 12, 5), frame(12, 12, 6));
    let s1 = collect_stats(&m, &w, &[a.clone(), b.clone()]).unwrap();
    let s2 = collect_stats(&m, &w, &[b, a]).unwrap();
    assert_eq!(s1.layers, s2.layers);
    assert!(matches!(collect_stats(&m, &w, &[]), Err(QuantError::NoSamples)));
}

#[test]
fn er_intermediate_and_wide_partials_are_collected() {
    let m = build_ernet(Family::SR2, 1, 2, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 2);
    let s = collect_stats(&m, &w, &[frame(8, 8, 1)]).unwrap();
    // 64 expanded channels over 64 in-frame pixels, all after the ReLU
    assert_eq!(s.layers[1].intermediate.len(), 64 * 64);
    assert!(s.layers[1].intermediate.iter().all(|&v| v >= 0.0));

    let wide = ModelIR::custom(
        vec![LayerSpec::conv3x3(3, 32, 0), LayerSpec::conv3x3(32, 64, 0), LayerSpec::conv3x3(64, 3, 0)],
        vec![],
    )
    .unwrap();
    let w = ModelWeights::random(&wide, 3);
    let s = collect_stats(&wide, &w, &[frame(6, 5, 1)]).unwrap();
    assert_eq!(s.layers[2].intermediate.len(), 30 * 3);
    assert!(s.layers[1].intermediate.is_empty());
}

#[test]
fn small_models_keep_eight_bit_parameters() {
    let m = build_ernet(Family::Dn, 2, 1, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 8);
    let s = collect_stats(&m, &w, &[frame(16, 16, 1)]).unwrap();
    let plan = assign_formats(&s, Norm::L2, PARAM_MEM_BYTES).unwrap();
    assert!(plan.demoted.is_empty());
    assert!(plan.layers.iter().all(|l| l.param_width == 8));
    plan.check(&m).unwrap();
    assert_eq!(assign_formats(&s, Norm::L2, PARAM_MEM_BYTES).unwrap(), plan);
}

#[test]
fn residual_joins_share_their_source_format() {
    let m = build_ernet(Family::SR4, 2, 1, 1, 32).unwrap();
    let w = ModelWeights::random(&m, 9);
    let s = collect_stats(&m, &w, &[frame(8, 8, 1)]).unwrap();
    let plan = assign_formats(&s, Norm::L1, PARAM_MEM_BYTES).unwrap();
    plan.check(&m).unwrap();
    for &(src, add) in &m.residual_links {
        assert_eq!(plan.layers[add].out, plan.layers[src].out);
        assert_eq!(plan.layers[add - 1].out, plan.layers[add].out);
    }
    let qm = quantize(&m, &w, &plan).unwrap();
    assert_eq!(qm.out_fmt.len(), m.layers.len());

    let mut bad = plan.clone();
    let (src, _) = m.residual_links[0];
    bad.layers[src].out.frac_bits += 1;
    assert!(bad.check(&m).is_err());
}

#[test]
fn biases_never_need_a_right_shift() {
    let m = build_ernet(Family::SR2, 2, 2, 1, 32).unwrap();
    let mut w = ModelWeights::random(&m, 10);
    // tiny biases would pick a very fine format on their own
    for p in w.layers.iter_mut().flatten() {
        p.b3.iter_mut().chain(p.b1.iter_mut()).for_each(|v| *v *= 1e-4);
    }
    let s = collect_stats(&m, &w, &[frame(8, 8, 1)]).unwrap();
    let plan = assign_formats(&s, Norm::L2, PARAM_MEM_BYTES).unwrap();
    plan.check(&m).unwrap();
    let clamped = plan.layers.iter().filter_map(|l| l.qb).filter(|qb| qb.frac_bits < crate::fixedpoint::MAX_FRAC_BITS).count();
    assert!(clamped > 0);
}

#[test]
fn budget_just_below_container_demotes_groups() {
    let m = build_ernet(Family::Dn, 3, 2, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 12);
    let s = collect_stats(&m, &w, &[frame(12, 12, 1)]).unwrap();
    let full = assign_formats(&s, Norm::L2, usize::MAX).unwrap();
    let budget = full.container_bytes - 1;
    let plan = assign_formats(&s, Norm::L2, budget).unwrap();
    assert!(!plan.demoted.is_empty());
    assert!(plan.container_bytes <= budget);
    // the encoder agrees with the reported size
    assert_eq!(container_bytes(&quantize(&m, &w, &plan).unwrap()).unwrap(), plan.container_bytes);
    // the ER layers hold the most parameters and go first
    let sizes: Vec<usize> = plan.demoted.iter().map(|&i| s.layers[i].weights.len()).collect();
    assert!(sizes.windows(2).all(|p| p[0] >= p[1]));
    for &i in &plan.demoted {
        assert_eq!(plan.layers[i].param_width, 7);
        assert_eq!(plan.layers[i].qw.unwrap().width, 7);
    }
    let back = QuantPlan::from_fields(&plan.fields(), Norm::L2);
    assert_eq!((back.layers, back.input), (plan.layers.clone(), plan.input));

    assert!(matches!(assign_formats(&s, Norm::L2, 64), Err(QuantError::Budget { .. })));
}

#[test]
fn norms_disagree_on_heavy_tails() {
    let found = (0..200u64).find(|&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..64)
            .map(|_| {
                let u: f64 = rng.gen_range(-0.5..0.5);
                -0.05 * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        select_precision(&v, Norm::L1, true, 8).unwrap() != select_precision(&v, Norm::L2, true, 8).unwrap()
    });
    assert!(found.is_some());
}

#[test]
fn quantized_output_tracks_float_on_smooth_input() {
    let m = build_ernet(Family::Dn, 2, 2, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 13);
    let img = smooth(24, 24);
    let s = collect_stats(&m, &w, &[img.clone(), frame(24, 24, 2)]).unwrap();
    let plan = assign_formats(&s, Norm::L2, PARAM_MEM_BYTES).unwrap();
    let qm = quantize(&m, &w, &plan).unwrap();
    let fixed = oracle_frame(&qm, &img).unwrap();
    let real = float_forward(&m, &w, &img).unwrap();
    let step = qm.output_fmt().step();
    let err: Vec<f64> = fixed.data.iter().zip(&real).map(|(&c, &r)| (c as f64 * step - r).abs()).collect();
    let worst = err.iter().copied().fold(0.0, f64::max);
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    // untrained weights; real units, 1.0 spans the whole pixel range
    assert!(mean < 0.025 && worst < 0.12, "mean {mean}, worst {worst}");
}

