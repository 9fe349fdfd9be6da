use std::fmt;

use serde::Serialize;

use super::{BufId, Instruction, Opcode, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DiagnosticKind {
    ReadOnlyDestination,
    WriteOnlySource,
    StreamOperand,
    NoDestination,
    LeafModules,
    PoolOperand,
    OperandConflict,
    MissingFormat,
    ReadBeforeWrite,
    InputConsumption,
    OutputProduction,
    TileExtent,
    ParamRange,
    BiasAlignment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub instr: Option<usize>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instr {
            Some(i) => write!(f, "instruction {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn diag(kind: DiagnosticKind, message: impl Into<String>) -> Diagnostic {
    Diagnostic { instr: None, kind, message: message.into() }
}

/// Operand rules that hold for an instruction in isolation.
pub(crate) fn check_instruction(ins: &Instruction) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = Vec::new();
    if ins.src == BufId::DO {
        out.push(diag(WriteOnlySource, "DO is write-only and cannot be a source"));
    }
    if ins.src_s == Some(BufId::DO) {
        out.push(diag(WriteOnlySource, "DO is write-only and cannot be srcS"));
    }
    if ins.dst == Some(BufId::DI) || ins.dst_s == Some(BufId::DI) {
        out.push(diag(ReadOnlyDestination, "DI is read-only and cannot be a destination"));
    }
    for (name, b) in [("srcS", ins.src_s), ("dstS", ins.dst_s)] {
        if b.is_some_and(|b| !b.is_block_buffer()) {
            out.push(diag(StreamOperand, format!("{name} must name a block buffer")));
        }
    }
    if ins.dst.is_none() && ins.dst_s.is_none() {
        out.push(diag(NoDestination, "instruction writes neither dst nor dstS"));
    }
    if ins.dst.is_some() && ins.dst_s.is_some() {
        out.push(diag(OperandConflict, "dst and dstS are exclusive"));
    }
    if ins.dst.is_some_and(|d| d == ins.src || Some(d) == ins.src_s) {
        out.push(diag(OperandConflict, "dst must differ from src and srcS"));
    }
    if ins.dst_s.is_some_and(|d| d == ins.src) {
        out.push(diag(OperandConflict, "dstS must differ from src"));
    }
    let lm_ok = match ins.opcode {
        Opcode::Conv | Opcode::Dnx2 => ins.lm == 1,
        Opcode::Upx2 => ins.lm == 4,
        Opcode::Er => (1..=4).contains(&ins.lm),
    };
    if !lm_ok {
        out.push(diag(LeafModules, format!("{} cannot run {} leaf-modules", ins.opcode.mnemonic(), ins.lm)));
    }
    match (ins.opcode, ins.pool) {
        (Opcode::Dnx2, None) => out.push(diag(PoolOperand, "DNX2 needs pool=stride|max")),
        (op, Some(_)) if op != Opcode::Dnx2 => out.push(diag(PoolOperand, "pool is only valid on DNX2")),
        _ => {}
    }
    match ins.opcode {
        Opcode::Er => {
            if ins.src_s.is_some() || ins.dst_s.is_some() {
                out.push(diag(OperandConflict, "ER adds its own input and takes no srcS/dstS"));
            }
            if ins.qs.is_none() {
                out.push(diag(MissingFormat, "ER needs qs for its intermediate features"));
            }
        }
        Opcode::Upx2 | Opcode::Dnx2 if ins.dst_s.is_some() => {
            out.push(diag(OperandConflict, "resampling instructions cannot emit partial sums"));
        }
        _ => {}
    }
    if ins.dst_s.is_some() && ins.qs.is_none() {
        out.push(diag(MissingFormat, "dstS needs qs for the partial sums"));
    }
    if ins.out.0 == 0 || ins.out.1 == 0 {
        out.push(diag(TileExtent, "empty output region"));
    }
    out
}

/// Whole-program checks: operand rules, buffer liveness per block, single
/// use of DI and DO, tile extents, parameter addresses and bias alignment.
/// Returns every problem found; an empty list means the program is valid.
pub fn validate(p: &Program) -> Vec<Diagnostic> {
    use DiagnosticKind::*;
    let mut out = Vec::new();
    let x_i = p.config.x_i as usize;
    let mut written: [bool; 5] = [false; 5];
    written[BufId::DI.index()] = true;
    let mut fmt = [None; 5];
    fmt[BufId::DI.index()] = Some(p.input.fmt);
    let (mut di_reads, mut do_writes) = (0, 0);

    for (k, ins) in p.instructions.iter().enumerate() {
        let mut here: Vec<Diagnostic> = check_instruction(ins);
        for b in ins.reads() {
            if b == BufId::DI {
                di_reads += 1;
            } else if b.is_block_buffer() && !written[b.index()] {
                here.push(diag(ReadBeforeWrite, format!("{} is read before any instruction writes it", b.name())));
            }
        }
        let (w, h) = (ins.out.0 as usize * 4, ins.out.1 as usize * 2);
        let grow = if ins.opcode == Opcode::Upx2 && ins.dst != Some(BufId::DO) { 2 } else { 1 };
        if w * grow > x_i || h * grow > x_i {
            here.push(diag(TileExtent, format!("{w}x{h} output exceeds the {x_i}-pixel block buffer")));
        }
        if ins.param >= p.config.param_mem_bytes {
            here.push(diag(ParamRange, format!("parameter address {} is outside parameter memory", ins.param)));
        }
        if let Some(qi) = fmt[ins.src.index()] {
            let scale = qi.frac_bits + ins.qw.frac_bits;
            let mut limit = scale;
            if let (Opcode::Er, Some(qs)) = (ins.opcode, ins.qs) {
                limit = limit.min(qs.frac_bits + ins.qw.frac_bits);
            }
            if ins.qb.frac_bits > limit {
                here.push(diag(BiasAlignment, format!("bias {} is finer than the accumulator (scale {limit})", ins.qb)));
            }
        }
        for b in ins.writes() {
            if b == BufId::DO {
                do_writes += 1;
            }
            written[b.index()] = true;
        }
        if let Some(d) = ins.dst {
            fmt[d.index()] = Some(ins.qo);
        }
        if let Some(d) = ins.dst_s {
            fmt[d.index()] = ins.qs;
        }
        out.extend(here.into_iter().map(|d| Diagnostic { instr: Some(k), ..d }));
    }
    if di_reads != 1 {
        out.push(diag(InputConsumption, format!("DI must be consumed exactly once per block, found {di_reads}")));
    }
    if do_writes != 1 {
        out.push(diag(OutputProduction, format!("DO must be produced exactly once per block, found {do_writes}")));
    }
    out
}
