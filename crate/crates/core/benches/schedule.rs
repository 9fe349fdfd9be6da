//! Block scheduling: the rayon pool against a single-threaded raster walk
//! over the same plan.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ecnnkit_core::blockflow::plan_blocks;
use ecnnkit_core::fbisa::{build, CompileOptions};
use ecnnkit_core::fixedpoint::Norm;
use ecnnkit_core::modelir::{build_ernet, Family, ModelWeights};
use ecnnkit_core::paramcodec::PARAM_MEM_BYTES;
use ecnnkit_core::quantflow::{assign_formats, collect_stats, quantize};
use ecnnkit_core::simcore::{run_image, run_image_ordered, ParamStore};
use ecnnkit_core::tensor::Tensor;

fn schedule(c: &mut Criterion) {
    let m = build_ernet(Family::Dn, 3, 1, 0, 32).unwrap();
    let w = ModelWeights::random(&m, 1);
    let img = Tensor::from_fn(192, 192, 3, |x, y, ch| ((x * 5 + y * 3 + ch * 70) % 256) as i32);
    let stats = collect_stats(&m, &w, &[img.crop(0, 0, 16, 16)]).unwrap();
    let qm = quantize(&m, &w, &assign_formats(&stats, Norm::L2, PARAM_MEM_BYTES).unwrap()).unwrap();
    let plan = plan_blocks(&m, (192, 192), 64).unwrap();
    let b = build(&qm, &plan, CompileOptions::default(), PARAM_MEM_BYTES).unwrap();
    let store = ParamStore::decode(&b.program, &b.container).unwrap();
    let raster: Vec<usize> = (0..plan.block_count()).collect();

    let mut g = c.benchmark_group(format!("dn_192x192_{}_blocks", plan.block_count()));
    g.sample_size(10);
    g.bench_function("pool", |bench| bench.iter(|| run_image(&b.program, &store, black_box(&img), &plan).unwrap()));
    g.bench_function("sequential", |bench| {
        bench.iter(|| run_image_ordered(&b.program, &store, black_box(&img), &plan, &raster).unwrap())
    });
    g.finish();
}

criterion_group!(benches, schedule);
criterion_main!(benches);
