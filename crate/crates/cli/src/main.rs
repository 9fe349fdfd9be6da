//! `ecnnkit`: analysis, compilation, encoding and simulation from the shell.

mod model;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ecnnkit_core::blockflow::geometry::scale_len;
use ecnnkit_core::blockflow::{analyze_row, frame_bandwidth, nbr_plain, ncr_discrete, ncr_plain, plan_blocks, BlockPlan};
use ecnnkit_core::fbisa::{
    assemble, build, decode_program, disassemble, encode_program, max_block_input, validate, Build, CompileOptions,
};
use ecnnkit_core::fixedpoint::Norm;
use ecnnkit_core::modelir::{intrinsic_complexity, save_model, scan_models, CountMode, Family, ModelIR};
use ecnnkit_core::paramcodec::PARAM_MEM_BYTES;
use ecnnkit_core::simcore::{
    oracle_frame, perf, read_pnm, to_pixels, trace_block, write_feature_dump, write_pnm, write_trace_csv, EngineModel,
    run_image, ParamStore,
};

use model::{load, quantized, synthetic_frame, QuantOptions};

#[derive(Parser)]
#[command(name = "ecnnkit", version, about = "Block-based CNN inference toolchain")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Bandwidth, recomputation and complexity of a model at a frame rate.
    Analyze(AnalyzeArgs),
    /// Feasible (B, R_E) frontier of a family under a KOP/pixel budget, as CSV.
    Scan(ScanArgs),
    /// Quantize a model and save it with its formats.
    Quantize(QuantizeArgs),
    /// Compile a model to an assembly (.fbs) or binary program.
    Compile(CompileArgs),
    /// Assemble a text program into the binary format.
    Asm(ConvertArgs),
    /// Disassemble a binary program into canonical text.
    Disasm(ConvertArgs),
    /// Encode a model's parameters and report the compression.
    Encode(EncodeArgs),
    /// Run a model on the simulator.
    Run(RunArgs),
    /// Cycle and DRAM estimate for a frame size and rate.
    Perf(PerfArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Model name (`DnERNet-B3R1N0`, `SR4ERNet-B34R4N0`, `plain-D20C64`) or a saved `.json` model.
    #[arg(long, short)]
    model: String,
    /// Seed for generated weights and sample frames.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Clone)]
struct QuantArgs {
    #[arg(long, default_value = "l2")]
    norm: Norm,
    /// Sample frames used to collect feature statistics.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    /// Parameter memory in bytes.
    #[arg(long = "budget", default_value_t = PARAM_MEM_BYTES)]
    param_budget: usize,
}

impl QuantArgs {
    fn options(&self, seed: u64) -> QuantOptions {
        QuantOptions { norm: self.norm, seed, samples: self.samples, budget: self.param_budget }
    }
}

#[derive(Args)]
struct FrameArgs {
    /// Frame size `WxH` (model input).
    #[arg(long, default_value = "3840x2160", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Clock in Hz.
    #[arg(long, default_value_t = 250e6)]
    clock: f64,
    /// Block input side `x_i`; defaults to the largest size the block buffers hold.
    #[arg(long)]
    block: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    frame: FrameArgs,
    /// Feature channels for the frame-based bandwidth column.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Feature bits for the frame-based bandwidth column.
    #[arg(long, default_value_t = 16)]
    bits: u32,
}

#[derive(Args)]
struct ScanArgs {
    #[arg(long)]
    family: Family,
    /// Effective KOP/pixel budget.
    #[arg(long)]
    budget: f64,
    #[arg(long, default_value_t = 128)]
    block: usize,
    /// Largest number of modules tried.
    #[arg(long, default_value_t = 40)]
    bmax: u32,
    /// Count true channels instead of 32-channel lanes.
    #[arg(long)]
    model_channels: bool,
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Args)]
struct CompileArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value = "256x256", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long)]
    block: Option<usize>,
    /// Where to write the encoded parameter container.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Program output; `.bin` selects the binary format.
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    quant: QuantArgs,
    /// Input image (binary PPM/PGM); a synthetic frame of `--res` otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "256x256", value_parser = parse_res)]
    res: (usize, usize),
    #[arg(long)]
    block: Option<usize>,
    /// Also run the frame-level reference and compare.
    #[arg(long)]
    oracle: bool,
    /// CSV of the first block's buffer accesses.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output image; a `.ecfd` extension writes the raw feature codes.
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Args)]
struct PerfArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    frame: FrameArgs,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not WxH"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err("frame sides must be positive".into());
    }
    Ok((w, h))
}

fn output(o: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match o {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn block_plan(m: &ModelIR, frame: (usize, usize), block: Option<usize>) -> Result<BlockPlan> {
    match block {
        Some(x) => Ok(plan_blocks(m, frame, x)?),
        None => max_block_input(m, frame, 128).context("no block size fits the block buffers"),
    }
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let m = model::parse_model(&a.model.model).or_else(|_| load(&a.model.model, a.model.seed).map(|l| l.model))?;
    let (w, h) = a.frame.res;
    let fps = a.frame.fps;
    let x_i = a.frame.block.unwrap_or(128);
    let d = m.depth();
    let row = analyze_row(&m, (w, h), fps, x_i, 3.0)?;
    let ir = intrinsic_complexity(&m, CountMode::Hardware);
    let out_frame = (scale_len(w as i64, m.output_level()) as usize, scale_len(h as i64, m.output_level()) as usize);
    let budget = EngineModel::with_clock(a.frame.clock).kop_per_pixel(out_frame, fps);
    let mut out = io::stdout().lock();
    writeln!(out, "model: {}", m.name())?;
    writeln!(out, "frame: {w}x{h} -> {}x{} @ {fps} fps, block {x_i}", out_frame.0, out_frame.1)?;
    writeln!(out, "depth D: {d}")?;
    writeln!(out, "NBR analytic: {:.3}", nbr_plain(d, x_i)?)?;
    writeln!(out, "NBR block plan: {:.3}", row.nbr)?;
    writeln!(out, "NCR analytic: {:.3}", ncr_plain(d, x_i)?)?;
    writeln!(out, "NCR discrete: {:.3}", ncr_discrete(&m, x_i)?)?;
    writeln!(out, "KOP/pixel intrinsic: {:.2}", ir.intrinsic_kop_per_pixel)?;
    writeln!(out, "KOP/pixel effective: {:.2}", row.kop_per_pixel)?;
    writeln!(out, "DRAM GB/s block-based: {:.3}", row.gb_per_s)?;
    writeln!(
        out,
        "DRAM GB/s frame-based ({} ch, {}-bit): {:.1}",
        a.channels,
        a.bits,
        frame_bandwidth(h, w, a.channels, d, fps, a.bits) / 1e9
    )?;
    writeln!(out, "budget KOP/pixel at {:.0} MHz: {budget:.1}", a.frame.clock / 1e6)?;
    writeln!(out, "feasible: {}", if row.kop_per_pixel <= budget { "yes" } else { "no" })?;
    Ok(())
}

fn scan(a: &ScanArgs) -> Result<()> {
    let mode = if a.model_channels { CountMode::Model } else { CountMode::Hardware };
    let rows = scan_models(a.family, a.budget, a.block, 1..=a.bmax, mode);
    let mut out = output(&a.o)?;
    writeln!(out, "model,B,R,N,R_E,intrinsic_kop,effective_kop,NCR,params")?;
    for c in rows {
        writeln!(
            out,
            "{},{},{},{},{:.3},{:.2},{:.2},{:.4},{}",
            c.name(a.family),
            c.b,
            c.r,
            c.n,
            c.expansion_ratio,
            c.report.intrinsic_kop_per_pixel,
            c.report.effective_kop_per_pixel,
            c.report.ncr(),
            c.report.param_count
        )?;
    }
    Ok(())
}

fn quantize_cmd(a: &QuantizeArgs) -> Result<()> {
    let mut l = load(&a.model.model, a.model.seed)?;
    l.quant = None;
    let (_, plan) = quantized(&l, &a.quant.options(a.model.seed))?;
    save_model(&a.o, &l.model, &l.weights, Some(&plan.fields()))?;
    println!("model: {}", l.model.name());
    println!("container bytes: {}", plan.container_bytes);
    println!("7-bit layers: {:?}", plan.demoted);
    Ok(())
}

fn built(m: &ModelArgs, q: &QuantArgs, frame: (usize, usize), block: Option<usize>) -> Result<(Build, BlockPlan, ecnnkit_core::modelir::QuantizedModel)> {
    let l = load(&m.model, m.seed)?;
    let (qm, _) = quantized(&l, &q.options(m.seed))?;
    let plan = block_plan(&l.model, frame, block)?;
    let b = build(&qm, &plan, CompileOptions::default(), q.param_budget)?;
    Ok((b, plan, qm))
}

fn compile_cmd(a: &CompileArgs) -> Result<()> {
    let (b, plan, _) = built(&a.model, &a.quant, a.res, a.block)?;
    let diags = validate(&b.program);
    for d in &diags {
        eprintln!("warning: {d}");
    }
    match &a.o {
        Some(p) if p.extension().is_some_and(|e| e == "bin") => fs::write(p, encode_program(&b.program)?)?,
        o => output(o)?.write_all(disassemble(&b.program).as_bytes())?,
    }
    if let Some(p) = &a.params {
        fs::write(p, b.container.to_bytes())?;
    }
    eprintln!(
        "{} instructions, {} leaf-modules, block {}, parameters {} bytes",
        b.program.len(),
        b.program.leaf_modules(),
        plan.x_i,
        b.report.container_bytes
    );
    Ok(())
}

fn asm_cmd(a: &ConvertArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let p = assemble(&text).map_err(|e| anyhow::anyhow!("{}: {e}", a.input.display()))?;
    let bytes = encode_program(&p)?;
    match &a.o {
        Some(path) => fs::write(path, bytes)?,
        None => io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

fn disasm_cmd(a: &ConvertArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let p = decode_program(&bytes)?;
    output(&a.o)?.write_all(disassemble(&p).as_bytes())?;
    Ok(())
}

fn encode_cmd(a: &EncodeArgs) -> Result<()> {
    let (b, _, _) = built(&a.model, &a.quant, (256, 256), None)?;
    if let Some(p) = &a.o {
        fs::write(p, b.container.to_bytes())?;
    }
    let r = &b.report;
    println!("segments: {}", b.container.directory.len());
    println!("raw bytes: {}", r.raw_bytes);
    println!("container bytes: {}", r.container_bytes);
    println!("compression ratio: {:.3}", r.compression_ratio());
    println!("entropy bits: {:.0}", r.entropy_bits);
    println!("category code bits: {}", r.code_bits);
    println!("Shannon gap: {:.2}%", 100.0 * r.shannon_gap());
    Ok(())
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let frame = match &a.input {
        Some(p) => read_pnm(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => synthetic_frame(a.res.0, a.res.1, a.model.seed),
    };
    let (b, plan, qm) = built(&a.model, &a.quant, (frame.width, frame.height), a.block)?;
    let store = ParamStore::decode(&b.program, &b.container)?;
    let out = run_image(&b.program, &store, &frame, &plan)?;
    println!("model: {}", qm.model.name());
    println!("blocks: {} of input side {}", plan.block_count(), plan.x_i);
    println!("output: {}x{}x{}", out.width, out.height, out.channels);
    let mut ok = true;
    if a.oracle {
        let reference = oracle_frame(&qm, &frame)?;
        let diff = out.count_differences(&reference);
        ok = diff == 0;
        println!("differing values: {diff}");
        println!("bit-exact: {ok}");
    }
    if let Some(p) = &a.trace {
        let trace = trace_block(&b.program, &store, &frame, &plan, 0)?;
        write_trace_csv(BufWriter::new(fs::File::create(p)?), &trace)?;
    }
    if let Some(p) = &a.o {
        let f = BufWriter::new(fs::File::create(p)?);
        if p.extension().is_some_and(|e| e == "ecfd") {
            write_feature_dump(f, &out, qm.output_fmt())?;
        } else {
            write_pnm(f, &to_pixels(&out, qm.output_fmt()))?;
        }
    }
    if !ok {
        bail!("simulator and reference disagree");
    }
    Ok(())
}

fn perf_cmd(a: &PerfArgs) -> Result<()> {
    let (b, plan, qm) = built(&a.model, &a.quant, a.frame.res, a.frame.block)?;
    let engine = EngineModel::with_clock(a.frame.clock);
    let r = perf(&b.program, &plan, &engine, a.frame.fps);
    let mut out = io::stdout().lock();
    writeln!(out, "model: {}", qm.model.name())?;
    writeln!(out, "instr,opcode,lm,CIU,IDU,bound")?;
    for (k, (t, ins)) in r.instructions.iter().zip(&b.program.instructions).enumerate() {
        let bound = if t.idu_bound { "IDU" } else { "CIU" };
        writeln!(out, "{k},{},{},{},{},{bound}", ins.opcode.mnemonic(), ins.lm, t.ciu, t.idu)?;
    }
    writeln!(out, "block input: {}", plan.x_i)?;
    writeln!(out, "blocks per frame: {}", r.blocks)?;
    writeln!(out, "cycles per block: {}", r.cycles_per_block)?;
    writeln!(out, "cycles per frame: {}", r.cycles_per_frame)?;
    writeln!(out, "cycles per second: {:.4e}", r.cycles_per_second)?;
    writeln!(out, "max fps: {:.2}", r.max_fps)?;
    writeln!(out, "utilization: {:.3}", r.utilization)?;
    writeln!(out, "DRAM GB/s: {:.3}", r.dram.gb_per_s)?;
    writeln!(out, "NBR: {:.3}", r.dram.nbr)?;
    writeln!(out, "real-time: {}", r.realtime)?;
    Ok(())
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("ECNNKIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().ok();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let r = match &cli.cmd {
        Cmd::Analyze(a) => analyze(a),
        Cmd::Scan(a) => scan(a),
        Cmd::Quantize(a) => quantize_cmd(a),
        Cmd::Compile(a) => compile_cmd(a),
        Cmd::Asm(a) => asm_cmd(a),
        Cmd::Disasm(a) => disasm_cmd(a),
        Cmd::Encode(a) => encode_cmd(a),
        Cmd::Run(a) => run_cmd(a),
        Cmd::Perf(a) => perf_cmd(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

