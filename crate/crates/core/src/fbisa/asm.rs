use std::fmt::Write as _;

use thiserror::Error;

use super::validate::check_instruction;
use super::{BufId, InferType, Instruction, MachineConfig, Opcode, Program, StreamSpec};
use crate::fixedpoint::QFormat;
use crate::modelir::{Activation, PoolKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{line}:{col}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

struct Token<'a> {
    col: usize,
    text: &'a str,
}

fn tokens(line: &str) -> Vec<Token<'_>> {
    let code = line.split('#').next().unwrap_or("");
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in code.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Token { col: s + 1, text: &code[s..i] });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token { col: s + 1, text: &code[s..] });
    }
    out
}

struct Fields<'a> {
    line: usize,
    pairs: Vec<(Token<'a>, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: usize, toks: &[Token<'a>]) -> Result<Self, AsmError> {
        let mut pairs: Vec<(Token<'a>, &'a str)> = Vec::new();
        for t in toks {
            let Some((k, v)) = t.text.split_once('=') else {
                return Err(AsmError { line, col: t.col, msg: format!("expected key=value, found `{}`", t.text) });
            };
            if pairs.iter().any(|(p, _)| p.text == k) {
                return Err(AsmError { line, col: t.col, msg: format!("duplicate operand `{k}`") });
            }
            pairs.push((Token { col: t.col, text: k }, v));
        }
        Ok(Fields { line, pairs })
    }

    fn err(&self, col: usize, msg: String) -> AsmError {
        AsmError { line: self.line, col, msg }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), AsmError> {
        for (k, _) in &self.pairs {
            if !allowed.contains(&k.text) {
                return Err(self.err(k.col, format!("unknown operand `{}`", k.text)));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(usize, &'a str)> {
        self.pairs.iter().find(|(k, _)| k.text == key).map(|(k, v)| (k.col + key.len() + 1, *v))
    }

    fn require(&self, key: &str, fallback_col: usize) -> Result<(usize, &'a str), AsmError> {
        self.get(key).ok_or_else(|| self.err(fallback_col, format!("missing operand `{key}`")))
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>, what: &str) -> Result<Option<T>, AsmError> {
        match self.get(key) {
            None => Ok(None),
            Some((col, v)) => f(v).map(Some).ok_or_else(|| self.err(col, format!("malformed {what} `{v}`"))),
        }
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, AsmError> {
        self.parse_with(key, |v| v.parse().ok(), "number")
    }

    fn qformat(&self, key: &str) -> Result<Option<QFormat>, AsmError> {
        match self.get(key) {
            None => Ok(None),
            Some((col, v)) => v
                .parse::<QFormat>()
                .map(Some)
                .map_err(|e| self.err(col, format!("malformed Q-format: {e}"))),
        }
    }

    fn buffer(&self, key: &str) -> Result<Option<BufId>, AsmError> {
        self.parse_with(key, BufId::from_name, "buffer name")
    }
}

fn parse_pair(v: &str) -> Option<(u16, u16)> {
    let (a, b) = v.split_once('x')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

const INSTR_KEYS: &[&str] =
    &["out", "lm", "src", "dst", "srcS", "dstS", "param", "qw", "qb", "qo", "qs", "type", "pool", "act"];

fn parse_instruction(line: usize, op_tok: &Token<'_>, rest: &[Token<'_>]) -> Result<Instruction, AsmError> {
    let opcode = Opcode::from_mnemonic(op_tok.text)
        .ok_or_else(|| AsmError { line, col: op_tok.col, msg: format!("unknown opcode `{}`", op_tok.text) })?;
    let f = Fields::parse(line, rest)?;
    f.check_keys(INSTR_KEYS)?;
    let at = op_tok.col;
    let (col, out) = f.require("out", at)?;
    let out = parse_pair(out).ok_or_else(|| f.err(col, format!("malformed tile count `{out}`")))?;
    let default_lm = if opcode == Opcode::Upx2 { 4 } else { 1 };
    let lm = f.number::<u8>("lm")?.unwrap_or(default_lm);
    f.require("src", at)?;
    let src = f.buffer("src")?.expect("checked above");
    let (col, param) = f.require("param", at)?;
    let param = param
        .strip_prefix('@')
        .and_then(|p| p.parse::<u32>().ok())
        .ok_or_else(|| f.err(col, format!("malformed parameter address `{param}`, expected @<offset>")))?;
    let q = |key: &str| -> Result<QFormat, AsmError> {
        f.require(key, at)?;
        Ok(f.qformat(key)?.expect("checked above"))
    };
    let infer = f
        .parse_with(
            "type",
            |v| match v {
                "trunc" => Some(InferType::Truncated),
                "zero" => Some(InferType::ZeroPadded),
                _ => None,
            },
            "inference type",
        )?
        .unwrap_or_default();
    let pool = f.parse_with(
        "pool",
        |v| match v {
            "stride" => Some(PoolKind::Stride),
            "max" => Some(PoolKind::Max),
            _ => None,
        },
        "pool kind",
    )?;
    let act = f
        .parse_with(
            "act",
            |v| match v {
                "relu" => Some(Activation::ReLU),
                "none" => Some(Activation::None),
                _ => None,
            },
            "activation",
        )?
        .unwrap_or_default();
    let ins = Instruction {
        opcode,
        lm,
        out,
        src,
        dst: f.buffer("dst")?,
        src_s: f.buffer("srcS")?,
        dst_s: f.buffer("dstS")?,
        param,
        qw: q("qw")?,
        qb: q("qb")?,
        qo: q("qo")?,
        qs: f.qformat("qs")?,
        infer,
        pool,
        act,
    };
    if let Some(d) = check_instruction(&ins).into_iter().next() {
        return Err(AsmError { line, col: at, msg: d.to_string() });
    }
    Ok(ins)
}

/// Parses assembly text into a [`Program`].
///
/// One instruction per line as `OPCODE key=value ...`; `#` starts a
/// comment. Directives `.config`, `.input`, `.output` set the machine and
/// stream parameters and `.submodel` marks the start of a sub-model.
/// Instructions are checked individually; whole-program rules are left to
/// [`validate`](super::validate).
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut p = Program::new(Vec::new());
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let toks = tokens(raw);
        let Some(first) = toks.first() else { continue };
        let rest = &toks[1..];
        match first.text {
            ".submodel" => {
                if let Some(t) = rest.first() {
                    return Err(AsmError { line, col: t.col, msg: "`.submodel` takes no operands".into() });
                }
                p.submodels.push(p.instructions.len());
            }
            ".config" => {
                let f = Fields::parse(line, rest)?;
                f.check_keys(&["x_i", "channels", "bb", "param_mem"])?;
                let d = MachineConfig::default();
                p.config = MachineConfig {
                    x_i: f.number("x_i")?.unwrap_or(d.x_i),
                    channels: f.number("channels")?.unwrap_or(d.channels),
                    bb_count: f.number("bb")?.unwrap_or(d.bb_count),
                    param_mem_bytes: f.number("param_mem")?.unwrap_or(d.param_mem_bytes),
                };
            }
            ".input" => {
                let unshuffle = rest.iter().any(|t| t.text == "unshuffle2");
                let kv: Vec<Token<'_>> =
                    rest.iter().filter(|t| t.text != "unshuffle2").map(|t| Token { col: t.col, text: t.text }).collect();
                let f = Fields::parse(line, &kv)?;
                f.check_keys(&["fmt", "ch"])?;
                let d = StreamSpec::default();
                p.input = StreamSpec {
                    fmt: f.qformat("fmt")?.unwrap_or(d.fmt),
                    channels: f.number("ch")?.unwrap_or(d.channels),
                    unshuffle,
                };
            }
            ".output" => {
                let f = Fields::parse(line, rest)?;
                f.check_keys(&["ch"])?;
                p.output_channels = f.number("ch")?.unwrap_or(3);
            }
            d if d.starts_with('.') => {
                return Err(AsmError { line, col: first.col, msg: format!("unknown directive `{d}`") });
            }
            _ => p.instructions.push(parse_instruction(line, first, rest)?),
        }
    }
    Ok(p)
}

/// Canonical text for a program. Operands appear in the order out, lm,
/// src, dst, srcS, dstS, param, then formats; every Q-format is explicit.
pub fn disassemble(p: &Program) -> String {
    let mut s = String::new();
    let c = p.config;
    let _ = writeln!(
        s,
        ".config x_i={} channels={} bb={} param_mem={}",
        c.x_i, c.channels, c.bb_count, c.param_mem_bytes
    );
    let _ = write!(s, ".input fmt={} ch={}", p.input.fmt, p.input.channels);
    if p.input.unshuffle {
        s.push_str(" unshuffle2");
    }
    s.push('\n');
    let _ = writeln!(s, ".output ch={}", p.output_channels);
    for (k, ins) in p.instructions.iter().enumerate() {
        for _ in p.submodels.iter().filter(|&&b| b == k) {
            s.push_str(".submodel\n");
        }
        s.push_str(&format_instruction(ins));
        s.push('\n');
    }
    for _ in p.submodels.iter().filter(|&&b| b == p.instructions.len()) {
        s.push_str(".submodel\n");
    }
    s
}

pub(crate) fn format_instruction(ins: &Instruction) -> String {
    let mut s = format!("{} out={}x{} lm={} src={}", ins.opcode.mnemonic(), ins.out.0, ins.out.1, ins.lm, ins.src.name());
    let mut put = |k: &str, v: String| {
        let _ = write!(s, " {k}={v}");
    };
    if let Some(b) = ins.dst {
        put("dst", b.name().into());
    }
    if let Some(b) = ins.src_s {
        put("srcS", b.name().into());
    }
    if let Some(b) = ins.dst_s {
        put("dstS", b.name().into());
    }
    put("param", format!("@{}", ins.param));
    put("qw", ins.qw.to_string());
    put("qb", ins.qb.to_string());
    if let Some(q) = ins.qs {
        put("qs", q.to_string());
    }
    put("qo", ins.qo.to_string());
    if ins.infer == InferType::ZeroPadded {
        put("type", "zero".into());
    }
    if let Some(pool) = ins.pool {
        put("pool", if pool == PoolKind::Max { "max" } else { "stride" }.into());
    }
    if ins.act == Activation::ReLU {
        put("act", "relu".into());
    }
    s
}
