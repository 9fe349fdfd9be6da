use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::conv_leaf;
use super::*;
use crate::blockflow::{block_bandwidth, plan_blocks, BlockPlan};
use crate::fbisa::tests::synthetic_quant;
use crate::fbisa::{assemble, build, max_block_input, CompileOptions, Opcode};
use crate::modelir::{build_ernet, intrinsic_complexity, CountMode, Family, LayerCodes, LayerSpec, ModelIR, QuantizedModel, LANE};
use crate::paramcodec::{LeafParams, Segment, SegmentKind, PARAM_MEM_BYTES};
use crate::tensor::Tensor;

fn random_frame(w: usize, h: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(w, h, c, |_, _, _| rng.gen_range(0..=255))
}

fn pipeline(qm: &QuantizedModel, plan: &BlockPlan) -> (Program, ParamStore) {
    let b = build(qm, plan, CompileOptions::default(), PARAM_MEM_BYTES).unwrap();
    let store = ParamStore::decode(&b.program, &b.container).unwrap();
    (b.program, store)
}

fn check_equivalence(m: &ModelIR, frame: (usize, usize), x_i: Option<usize>, seed: u64) {
    let qm = synthetic_quant(m, seed);
    let plan = match x_i {
        Some(x) => plan_blocks(m, frame, x).unwrap(),
        None => max_block_input(m, frame, 128).unwrap(),
    };
    let (p, store) = pipeline(&qm, &plan);
    let img = random_frame(frame.0, frame.1, 3, seed + 1);
    let blocks = run_image(&p, &store, &img, &plan).unwrap();
    let oracle = oracle_frame(&qm, &img).unwrap();
    assert_eq!((blocks.width, blocks.height), (oracle.width, oracle.height));
    assert_eq!(blocks.count_differences(&oracle), 0, "{} blocks", plan.block_count());
}

#[test]
fn identity_kernel_passes_input_through() {
    let m = ModelIR::custom(vec![LayerSpec::conv3x3(3, 3, 0)], vec![]).unwrap();
    let mut w3 = vec![0; 81];
    for c in 0..3 {
        w3[(c * 3 + c) * 9 + 4] = 64;
    }
    let qm = QuantizedModel {
        model: m.clone(),
        input_fmt: QFormat::unsigned(8),
        out_fmt: vec![QFormat::unsigned(8)],
        codes: vec![Some(LayerCodes {
            qw: QFormat::signed(6),
            qb: QFormat::signed(6),
            qs: None,
            w3,
            b3: vec![0; 3],
            w1: vec![],
            b1: vec![],
        })],
    };
    let plan = plan_blocks(&m, (16, 16), 16).unwrap();
    let (p, store) = pipeline(&qm, &plan);
    let input = random_frame(16, 16, 3, 3);
    let block = BlockInput { origin: (0, 0), fmt: QFormat::unsigned(8), data: input.clone() };
    let out = run_block(&p, &store, &block).unwrap();
    assert_eq!((out.x.start, out.x.len), (1, 14));
    let got = out.window(out.x, out.y, 3);
    assert_eq!(got, input.crop(1, 1, 14, 14));
}

fn random_leaf(rng: &mut ChaCha8Rng, kind: SegmentKind) -> LeafParams {
    let mut l = LeafParams::zeros(kind);
    l.w3.iter_mut().for_each(|v| *v = rng.gen_range(-128..=127));
    l.w1.iter_mut().for_each(|v| *v = rng.gen_range(-128..=127));
    l.bias.iter_mut().for_each(|v| *v = rng.gen_range(-128..=127));
    l
}

type Q = Ratio<i128>;

fn real(code: i64, n: i32) -> Q {
    if n >= 0 {
        Q::new(code as i128, 1i128 << n)
    } else {
        Q::from_integer((code as i128) << -n)
    }
}

fn quant(v: Q, f: QFormat) -> i64 {
    let t = v * real(1, -f.frac_bits);
    let half = Q::new(1, 2);
    let neg = t < Q::from_integer(0);
    let mag = (if neg { -t } else { t } + half).floor().to_integer();
    let r = if neg { -mag } else { mag };
    r.clamp(f.min_code() as i128, f.max_code() as i128) as i64
}

#[test]
fn er_matches_rational_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (fi, qw, qb, qs, qo) = (QFormat::signed(5), QFormat::signed(9), QFormat::signed(9), QFormat::signed(3), QFormat::signed(4));
    let text = format!("ER out=4x7 lm=2 src=DI dst=DO param=@0 qw={qw} qb={qb} qs={qs} qo={qo}\n");
    let mut p = assemble(&text).unwrap();
    p.input.fmt = fi;
    p.input.channels = 32;
    let leaves: Vec<_> = (0..2).map(|_| random_leaf(&mut rng, SegmentKind::Er)).collect();
    let seg = Segment { kind: SegmentKind::Er, leaves: leaves.clone() };
    let store = ParamStore::from_segments(&p, vec![seg]);
    let data = Tensor::from_fn(16, 16, 32, |_, _, _| rng.gen_range(-128..=127));
    let block = BlockInput { origin: (3, -2), fmt: fi, data: data.clone() };
    let out = run_block(&p, &store, &block).unwrap();

    for y in 1..15usize {
        for x in 1..15usize {
            let mut t = Vec::new();
            for leaf in &leaves {
                for o in 0..LANE {
                    let mut v = real(leaf.bias[o] as i64, qb.frac_bits);
                    for i in 0..LANE {
                        for k in 0..9 {
                            let px = data.get(x + k % 3 - 1, y + k / 3 - 1, i) as i64;
                            v += real(px, fi.frac_bits) * real(leaf.w3[(o * LANE + i) * 9 + k] as i64, qw.frac_bits);
                        }
                    }
                    t.push(quant(v.max(Q::from_integer(0)), qs));
                }
            }
            for o in 0..LANE {
                let mut v = real(leaves[0].bias[LANE + o] as i64, qb.frac_bits) + real(data.get(x, y, o) as i64, fi.frac_bits);
                for (g, leaf) in leaves.iter().enumerate() {
                    for i in 0..LANE {
                        v += real(t[g * LANE + i], qs.frac_bits) * real(leaf.w1[o * LANE + i] as i64, qw.frac_bits);
                    }
                }
                let got = out.at(3 + x as i64, -2 + y as i64)[o] as i64;
                assert_eq!(got, quant(v, qo), "pixel ({x}, {y}) channel {o}");
            }
        }
    }
}

#[test]
fn upx2_keeps_constant_blocks_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = assemble("UPX2 out=4x7 src=DI dst=DO param=@0 qw=Q8 qb=Q8 qo=Q4\n").unwrap();
    p.input.fmt = QFormat::signed(5);
    p.input.channels = 32;
    let leaf = random_leaf(&mut rng, SegmentKind::Conv);
    let store = ParamStore::from_segments(&p, vec![Segment { kind: SegmentKind::Conv, leaves: vec![leaf; 4] }]);
    let data = Tensor::from_fn(16, 16, 32, |_, _, c| c as i32 - 7);
    let out = run_block(&p, &store, &BlockInput { origin: (0, 0), fmt: QFormat::signed(5), data }).unwrap();
    assert_eq!((out.data.width, out.data.height), (28, 28));
    let first = out.data.pixel(0, 0).to_vec();
    for y in 0..28 {
        for x in 0..28 {
            assert_eq!(out.data.pixel(x, y), &first[..]);
        }
    }
}

#[test]
fn dn_blocks_match_oracle_and_schedule() {
    let m = build_ernet(Family::Dn, 2, 2, 1, 32).unwrap();
    let qm = synthetic_quant(&m, 21);
    let plan = plan_blocks(&m, (52, 44), 24).unwrap();
    assert!(plan.block_count() > 4);
    let (p, store) = pipeline(&qm, &plan);
    let img = random_frame(52, 44, 3, 4);
    let par = run_image(&p, &store, &img, &plan).unwrap();
    assert_eq!(par.count_differences(&oracle_frame(&qm, &img).unwrap()), 0);
    let mut order: Vec<usize> = (0..plan.block_count()).collect();
    order.reverse();
    order.swap(0, 2);
    assert_eq!(run_image_ordered(&p, &store, &img, &plan, &order).unwrap(), par);
}

#[test]
fn single_block_frame_equals_run_block() {
    let m = build_ernet(Family::Dn, 2, 1, 0, 32).unwrap();
    let qm = synthetic_quant(&m, 8);
    let plan = plan_blocks(&m, (18, 18), 32).unwrap();
    assert_eq!(plan.block_count(), 1);
    let (p, store) = pipeline(&qm, &plan);
    let img = random_frame(18, 18, 3, 9);
    let frame = run_image(&p, &store, &img, &plan).unwrap();
    let (cb, rb) = (plan.cols[0], plan.rows[0]);
    let data = Tensor::from_fn(32, 32, 3, |x, y, c| {
        let fx = (cb.in_origin + x as i64).clamp(0, 17) as usize;
        let fy = (rb.in_origin + y as i64).clamp(0, 17) as usize;
        img.get(fx, fy, c)
    });
    let out = run_block(&p, &store, &BlockInput { origin: (cb.in_origin, rb.in_origin), fmt: p.input.fmt, data }).unwrap();
    let span = crate::blockflow::Span::new(0, 18);
    assert_eq!(out.window(span, span, 3), frame);
}

#[test]
fn other_families_match_oracle() {
    check_equivalence(&build_ernet(Family::Dn12ch, 2, 1, 1, 32).unwrap(), (40, 36), Some(16), 31);
    check_equivalence(&build_ernet(Family::SR2, 2, 2, 0, 32).unwrap(), (30, 26), Some(20), 32);
    check_equivalence(&build_ernet(Family::SR4, 2, 1, 0, 32).unwrap(), (24, 20), Some(20), 33);
    check_equivalence(&build_ernet(Family::SR4, 1, 1, 0, 32).unwrap(), (20, 16), None, 34);
}

#[test]
fn downsampling_and_wide_layers_match_oracle() {
    use crate::modelir::{LayerKind, PoolKind};
    for pool in [PoolKind::Max, PoolKind::Stride] {
        let layers = vec![
            LayerSpec::conv3x3(3, 32, 0).with_relu(),
            LayerSpec { kind: LayerKind::Downsample2(pool), ..LayerSpec::conv3x3(32, 32, 0) },
            LayerSpec::conv3x3(32, 64, -1).with_relu(),
            LayerSpec::conv3x3(64, 3, -1),
        ];
        let m = ModelIR::custom(layers, vec![]).unwrap();
        check_equivalence(&m, (36, 28), Some(24), 41);
    }
    let m = ModelIR::custom(
        vec![
            LayerSpec::conv3x3(3, 32, 0),
            LayerSpec::conv3x3(32, 64, 0),
            LayerSpec::conv3x3(64, 32, 0),
            LayerSpec::conv3x3(32, 3, 0),
        ],
        vec![],
    )
    .unwrap();
    let plan = plan_blocks(&m, (30, 30), 24).unwrap();
    let err = build(&synthetic_quant(&m, 1), &plan, CompileOptions::default(), PARAM_MEM_BYTES).unwrap_err();
    assert!(matches!(err, crate::fbisa::CompileError::Buffers { .. }), "{err}");
}

#[test]
fn zero_parameters_give_zero_output() {
    let m = build_ernet(Family::Dn, 2, 1, 0, 32).unwrap();
    let mut qm = synthetic_quant(&m, 1);
    for c in qm.codes.iter_mut().flatten() {
        for v in [&mut c.w3, &mut c.b3, &mut c.w1, &mut c.b1] {
            v.iter_mut().for_each(|x| *x = 0);
        }
    }
    let plan = plan_blocks(&m, (30, 30), 24).unwrap();
    let (p, store) = pipeline(&qm, &plan);
    let out = run_image(&p, &store, &random_frame(30, 30, 3, 2), &plan).unwrap();
    // the residual adds the head output, which is zero as well
    assert!(out.data.iter().all(|&v| v == 0));
}

#[test]
fn oracle_counts_hardware_operations() {
    let m = build_ernet(Family::SR2, 2, 2, 1, 32).unwrap();
    let qm = synthetic_quant(&m, 3);
    let img = random_frame(12, 10, 3, 1);
    let macs = oracle_macs(&qm, &img).unwrap();
    let out_px = (24 * 20) as f64;
    let kop = 2.0 * macs as f64 / out_px / 1000.0;
    let expect = intrinsic_complexity(&m, CountMode::Hardware).intrinsic_kop_per_pixel;
    assert!((kop - expect).abs() < 1e-9, "{kop} vs {expect}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn accumulators_are_linear(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaf = random_leaf(&mut rng, SegmentKind::Conv);
        let mut nb = [0i32; 9 * LANE];
        nb.iter_mut().for_each(|v| *v = rng.gen_range(-128..=127));
        let neg = nb.map(|v| -v);
        let (mut a, mut b) = ([0i64; LANE], [0i64; LANE]);
        conv_leaf(&leaf.w3, &nb, &mut a);
        conv_leaf(&leaf.w3, &neg, &mut b);
        prop_assert_eq!(a.map(|v| -v), b);
    }
}

#[test]
fn bank_mappings_on_simulator_traces() {
    let m = build_ernet(Family::SR4, 1, 1, 0, 32).unwrap();
    let qm = synthetic_quant(&m, 2);
    let plan = plan_blocks(&m, (20, 20), 20).unwrap();
    let (p, store) = pipeline(&qm, &plan);
    let data = random_frame(20, 20, 3, 6);
    let (_, trace) = run_block_traced(&p, &store, &BlockInput { origin: (0, 0), fmt: p.input.fmt, data }).unwrap();
    let (upx2, rest): (Vec<Access>, Vec<Access>) = trace.into_iter().partition(|a| a.opcode == Opcode::Upx2 && a.kind == AccessKind::Write);
    assert!(!upx2.is_empty() && !rest.is_empty());
    assert!(bank_trace_check(&rest, BankMapping::Normal).is_empty());
    assert!(!bank_trace_check(&upx2, BankMapping::Normal).is_empty());
    assert!(bank_trace_check(&upx2, BankMapping::Interleaved).is_empty());
}

#[test]
fn upx2_squares_span_four_banks_everywhere() {
    for ty in 0..32 {
        for tx in 0..16 {
            let mut banks: Vec<_> = upx2_write_set((tx, ty)).iter().map(|&t| BankMapping::Interleaved.bank(t)).collect();
            banks.sort_unstable();
            banks.dedup();
            assert_eq!(banks.len(), 4, "conv tile ({tx}, {ty})");
        }
    }
}

#[test]
fn engine_peak_rate() {
    let e = EngineModel::default();
    assert_eq!(e.multipliers(), 81_920);
    assert!((e.peak_ops() - 40.96e12).abs() < 1.0);
    assert_eq!(3 * BLOCK_BUFFER_BYTES, 1_572_864);
    let kop = e.kop_per_pixel((3840, 2160), 30.0);
    assert!((kop - 40.96e9 / (3840.0 * 2160.0 * 30.0)).abs() < 1e-9);
    assert!((e.kop_per_pixel((1920, 1080), 60.0) - 2.0 * kop).abs() < 1e-9);
}

#[test]
fn cycle_model_terms() {
    let p = assemble("ER out=29x58 lm=1 src=DI dst=DO param=@0 qw=Q7 qb=Q9 qs=Q4 qo=Q5\n").unwrap();
    let m = ModelIR::custom(vec![LayerSpec::er(32, 1, 0)], vec![]).unwrap();
    let plan = plan_blocks(&m, (116, 116), 118).unwrap();
    let r = perf(&p, &plan, &EngineModel::default(), 30.0);
    assert_eq!(r.instructions[0].ciu, 1682);
    assert_eq!(r.instructions[0].idu, 256);
    assert_eq!(r.cycles_per_block, 256 + 1682);

    let mut longer = p.clone();
    longer.instructions.push(longer.instructions[0].clone());
    let r2 = perf(&longer, &plan, &EngineModel::default(), 30.0);
    assert!(r2.cycles_per_block > r.cycles_per_block);
    let mut wide = p.clone();
    wide.instructions[0].lm = 2;
    assert_eq!(perf(&wide, &plan, &EngineModel::default(), 30.0).instructions[0].ciu, 2 * 1682);
}

#[test]
fn dn_uhd30_is_realtime_and_dram_comes_from_blockflow() {
    let m = build_ernet(Family::Dn, 3, 1, 0, 32).unwrap();
    let plan = plan_blocks(&m, (3840, 2160), 128).unwrap();
    let (p, _) = crate::fbisa::compile(&synthetic_quant(&m, 1), &plan, CompileOptions::default()).unwrap();
    let r = perf(&p, &plan, &EngineModel::default(), 30.0);
    assert_eq!(r.blocks, 646);
    assert!(r.realtime, "{} cycles/s", r.cycles_per_second);
    assert_eq!(r.dram, block_bandwidth(&plan, 30.0, 3.0, 3.0));
    assert!(r.ncr_effective > 1.0 && r.utilization > 0.0 && r.utilization <= 1.0);
}

#[test]
fn image_and_dump_round_trips() {
    for c in [1, 3] {
        let t = random_frame(7, 5, c, c as u64);
        let mut buf = Vec::new();
        write_pnm(&mut buf, &t).unwrap();
        assert_eq!(read_pnm(&buf[..]).unwrap(), t);
    }
    assert!(matches!(write_pnm(Vec::new(), &Tensor::zeros(2, 2, 4)), Err(IoError::Channels(4))));
    assert!(read_pnm(&b"P3\n1 1\n255\n"[..]).is_err());
    let with_comment = b"P5\n# c\n2 1\n255\n\x01\x02";
    assert_eq!(read_pnm(&with_comment[..]).unwrap().data, vec![1, 2]);

    let t = Tensor::from_fn(3, 2, 5, |x, y, c| x as i32 - y as i32 * 7 + c as i32 * 100 - 300);
    let mut buf = Vec::new();
    write_feature_dump(&mut buf, &t, QFormat::signed(-3)).unwrap();
    assert_eq!(read_feature_dump(&buf[..]).unwrap(), (t, QFormat::signed(-3)));
    assert!(read_feature_dump(&buf[..buf.len() - 1]).is_err());
    assert_eq!(to_pixels(&Tensor { width: 1, height: 1, channels: 2, data: vec![-4, 40] }, QFormat::signed(5)).data, vec![0, 255]);
}

#[test]
fn trace_csv_has_header_and_rows() {
    let a = Access { cycle: 3, instr: 0, opcode: Opcode::Upx2, buf: BufId::BB1, kind: AccessKind::Write, tile: (1, 2) };
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &[a]).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s, format!("cycle,unit,bank,op\n3,BB1,{},UPX2-write\n", BankMapping::Interleaved.bank((1, 2))));
}
