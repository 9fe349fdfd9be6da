//! Post-training quantization.
//!
//! [`collect_stats`] runs the real-valued model over sample frames and
//! keeps every parameter and feature value per layer. [`assign_formats`]
//! picks each group's fractional position by minimizing the quantization
//! error, then demotes parameter groups to 7 bits, largest first, until the
//! encoded container fits the parameter memory. [`quantize`] turns the
//! plan into integer codes the compiler consumes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockflow::{ChainGeometry, Span};
use crate::fbisa::{compile, gather_segments, max_block_input, CompileError, CompileOptions};
use crate::fixedpoint::{quantize_code, select_precision, FixedPointError, Norm, QFormat};
use crate::modelir::{
    Activation, LayerCodes, LayerKind, LayerParams, LayerQ, ModelError, ModelIR, ModelWeights, PoolKind, QuantFields,
    QuantizedModel, LANE,
};
use crate::paramcodec::encode_params;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("at least one sample frame is needed")]
    NoSamples,
    #[error("sample frame {index}: {msg}")]
    Sample { index: usize, msg: String },
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("parameters need {size} bytes even with every group at 7 bits, the budget is {budget}")]
    Budget { size: usize, budget: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Precision(#[from] FixedPointError),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// Values seen by one layer. Collections are sorted, so they do not depend
/// on the order of the sample frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerStats {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    /// Output feature of the layer (empty for a layer fused into its
    /// consumer, whose format it shares).
    pub features: Vec<f64>,
    /// ER intermediate after the ReLU, or partial sums passed along a
    /// chained wide convolution.
    pub intermediate: Vec<f64>,
}

/// Statistics of a model together with the weights they came from.
#[derive(Debug, Clone)]
pub struct Stats {
    pub model: ModelIR,
    pub weights: ModelWeights,
    pub input_fmt: QFormat,
    pub layers: Vec<LayerStats>,
}

/// Formats for every layer plus the parameter widths that fit the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub norm: Norm,
    pub input: QFormat,
    pub layers: Vec<LayerQ>,
    /// Layers demoted to 7-bit parameters, in demotion order.
    pub demoted: Vec<usize>,
    pub container_bytes: usize,
}

impl QuantPlan {
    pub fn fields(&self) -> QuantFields {
        QuantFields { input: self.input, layers: self.layers.clone() }
    }

    /// Rebuilds a plan from stored fields; the container size is unknown.
    pub fn from_fields(f: &QuantFields, norm: Norm) -> Self {
        let demoted = f.layers.iter().enumerate().filter(|(_, l)| l.param_width == 7).map(|(i, _)| i).collect();
        QuantPlan { norm, input: f.input, layers: f.layers.clone(), demoted, container_bytes: 0 }
    }

    /// Checks the bias alignment rule and that residual joins agree.
    pub fn check(&self, m: &ModelIR) -> Result<(), QuantError> {
        if self.layers.len() != m.layers.len() {
            return Err(QuantError::Layer { layer: self.layers.len(), msg: "plan does not cover the model".into() });
        }
        let start = usize::from(m.unshuffles_input());
        for (i, l) in m.layers.iter().enumerate().skip(start) {
            let q = &self.layers[i];
            if let (Some(qw), Some(qb)) = (q.qw, q.qb) {
                let scale = self.in_fmt(i).frac_bits.min(q.qs.map_or(i32::MAX, |s| s.frac_bits)) + qw.frac_bits;
                if qb.frac_bits > scale {
                    return Err(QuantError::Layer { layer: i, msg: format!("bias {qb} is finer than the accumulator scale {scale}") });
                }
            }
            if l.kind == LayerKind::ResidualAdd {
                let s = m.skip_source(i).ok_or(QuantError::Layer { layer: i, msg: "residual add without a link".into() })?;
                let sf = if s < start { self.input } else { self.layers[s].out };
                if sf != q.out || self.layers[i - 1].out != q.out {
                    return Err(QuantError::Layer { layer: i, msg: "residual join formats differ".into() });
                }
            }
        }
        Ok(())
    }

    fn in_fmt(&self, i: usize) -> QFormat {
        if i == 0 {
            self.input
        } else {
            self.layers[i - 1].out
        }
    }
}

/// A real-valued feature map over an absolute window.
struct FMap {
    x: Span,
    y: Span,
    ch: usize,
    data: Vec<f64>,
}

impl FMap {
    fn new(x: Span, y: Span, ch: usize) -> Self {
        FMap { x, y, ch, data: vec![0.0; (x.len * y.len) as usize * ch] }
    }

    #[inline]
    fn idx(&self, ax: i64, ay: i64) -> usize {
        (((ay - self.y.start) * self.x.len + (ax - self.x.start)) as usize) * self.ch
    }

    /// Values inside `[0, w) x [0, h)`.
    fn inside(&self, w: i64, h: i64, out: &mut Vec<f64>) {
        for ay in self.y.start.max(0)..self.y.end().min(h) {
            for ax in self.x.start.max(0)..self.x.end().min(w) {
                let i = self.idx(ax, ay);
                out.extend_from_slice(&self.data[i..i + self.ch]);
            }
        }
    }
}

fn shrink(s: Span) -> Span {
    Span::new(s.start + 1, s.len - 2)
}

fn relu(v: f64, a: Activation) -> f64 {
    if a == Activation::ReLU {
        v.max(0.0)
    } else {
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `[o][i][k]` weights as `[o][k][i]`, so each tap reads channels contiguously.
fn taps_major(w: &[f64], in_ch: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for (n, &v) in w.iter().enumerate() {
        let (o, i, k) = (n / (9 * in_ch), n / 9 % in_ch, n % 9);
        t[(o * 9 + k) * in_ch + i] = v;
    }
    t
}

/// 3x3 sum over input channels `lo..hi` at one pixel; `w` is one output
/// channel's `[k][i]` row.
fn conv_at(src: &FMap, w: &[f64], in_ch: usize, lo: usize, hi: usize, ax: i64, ay: i64) -> f64 {
    let mut s = 0.0;
    for k in 0..9i64 {
        let base = src.idx(ax + k % 3 - 1, ay + k / 3 - 1);
        let row = k as usize * in_ch;
        s += dot(&src.data[base + lo..base + hi], &w[row + lo..row + hi]);
    }
    s
}

struct Pass<'a> {
    m: &'a ModelIR,
    w: &'a ModelWeights,
    frame: (i64, i64),
    base_level: i32,
    stats: Vec<LayerStats>,
}

impl<'a> Pass<'a> {
    fn extent(&self, level: i32) -> (i64, i64) {
        let s = |v: i64| {
            let d = level - self.base_level;
            if d >= 0 {
                v << d
            } else {
                v >> -d
            }
        };
        (s(self.frame.0), s(self.frame.1))
    }

    fn params(&self, layer: usize) -> Result<&'a LayerParams, String> {
        self.w.layers[layer].as_ref().ok_or_else(|| format!("layer {layer} has no parameters"))
    }

    fn conv(&mut self, layer: usize, src: &FMap, skip: Option<&FMap>, act: Activation) -> Result<FMap, String> {
        let l = &self.m.layers[layer];
        let p = self.params(layer)?;
        let (ox, oy) = (shrink(src.x), shrink(src.y));
        let mut out = FMap::new(ox, oy, l.out_ch);
        let (w, h) = self.extent(l.scale_level);
        let groups = l.in_ch.div_ceil(LANE);
        let wt = taps_major(&p.w3, l.in_ch);
        let mut partial = Vec::new();
        for ay in oy.start..oy.end() {
            for ax in ox.start..ox.end() {
                let inside = ax >= 0 && ay >= 0 && ax < w && ay < h;
                let base = out.idx(ax, ay);
                for o in 0..l.out_ch {
                    let mut v = 0.0;
                    for g in 0..groups {
                        v += conv_at(src, &wt[o * 9 * l.in_ch..], l.in_ch, g * LANE, ((g + 1) * LANE).min(l.in_ch), ax, ay);
                        if g + 1 < groups && inside {
                            partial.push(v);
                        }
                    }
                    v += p.b3[o];
                    if let Some(s) = skip {
                        v += s.data[s.idx(ax, ay) + o];
                    }
                    out.data[base + o] = relu(v, act);
                }
            }
        }
        self.stats[layer].intermediate.append(&mut partial);
        Ok(out)
    }

    fn conv_shuffle(&mut self, layer: usize, src: &FMap, act: Activation) -> Result<FMap, String> {
        let c = self.conv(layer, src, None, act)?;
        let sub = c.ch / 4;
        let mut out = FMap::new(Span::new(2 * c.x.start, 2 * c.x.len), Span::new(2 * c.y.start, 2 * c.y.len), sub);
        for ay in c.y.start..c.y.end() {
            for ax in c.x.start..c.x.end() {
                let ci = c.idx(ax, ay);
                for o in 0..c.ch {
                    let g = o / sub;
                    let oi = out.idx(2 * ax + (g % 2) as i64, 2 * ay + (g / 2) as i64);
                    out.data[oi + o % sub] = c.data[ci + o];
                }
            }
        }
        Ok(out)
    }

    fn er(&mut self, layer: usize, src: &FMap, expand: usize) -> Result<FMap, String> {
        let l = &self.m.layers[layer];
        let p = self.params(layer)?;
        let e = expand * l.in_ch;
        let (ox, oy) = (shrink(src.x), shrink(src.y));
        let mut out = FMap::new(ox, oy, l.out_ch);
        let (w, h) = self.extent(l.scale_level);
        let wt = taps_major(&p.w3, l.in_ch);
        let mut t = vec![0.0; e];
        let mut seen = Vec::new();
        for ay in oy.start..oy.end() {
            for ax in ox.start..ox.end() {
                for (k, tk) in t.iter_mut().enumerate() {
                    *tk = (conv_at(src, &wt[k * 9 * l.in_ch..], l.in_ch, 0, l.in_ch, ax, ay) + p.b3[k]).max(0.0);
                }
                if ax >= 0 && ay >= 0 && ax < w && ay < h {
                    seen.extend_from_slice(&t);
                }
                let (base, sb) = (out.idx(ax, ay), src.idx(ax, ay));
                for o in 0..l.out_ch {
                    let v = dot(&t, &p.w1[o * e..(o + 1) * e]) + p.b1[o] + src.data[sb + o];
                    out.data[base + o] = relu(v, l.activation);
                }
            }
        }
        self.stats[layer].intermediate.append(&mut seen);
        Ok(out)
    }
}

fn pool(m: &FMap, kind: PoolKind) -> FMap {
    let half = |s: Span| {
        let start = (s.start + 1).div_euclid(2);
        Span::new(start, (s.end().div_euclid(2) - start).max(0))
    };
    let mut out = FMap::new(half(m.x), half(m.y), m.ch);
    for y in out.y.start..out.y.end() {
        for x in out.x.start..out.x.end() {
            let o = out.idx(x, y);
            for c in 0..m.ch {
                let at = |dx: i64, dy: i64| m.data[m.idx(2 * x + dx, 2 * y + dy) + c];
                out.data[o + c] = match kind {
                    PoolKind::Stride => at(0, 0),
                    PoolKind::Max => at(0, 0).max(at(1, 0)).max(at(0, 1)).max(at(1, 1)),
                };
            }
        }
    }
    out
}

/// Real-valued forward pass over one frame of 8-bit pixel codes. Returns
/// the per-layer feature statistics and the output in real units.
fn forward(m: &ModelIR, w: &ModelWeights, input_fmt: QFormat, frame: &Tensor) -> Result<(Vec<LayerStats>, Vec<f64>), String> {
    let start = usize::from(m.unshuffles_input());
    let input = if start == 1 {
        if !frame.width.is_multiple_of(2) || !frame.height.is_multiple_of(2) {
            return Err("unshuffled input needs even frame dimensions".into());
        }
        frame.pixel_unshuffle()
    } else {
        frame.clone()
    };
    let expect = m.layers.get(start).map_or(0, |l| l.in_ch);
    if input.channels != expect {
        return Err(format!("{} channels, the model expects {expect}", input.channels));
    }
    let geo = ChainGeometry::of_model(m).map_err(|e| e.to_string())?;
    let (fw, fh) = (input.width as i64, input.height as i64);
    let unit = 1i64 << (-geo.out_level).max(0);
    if fw % unit != 0 || fh % unit != 0 {
        return Err(format!("{fw}x{fh} is incompatible with the model's resampling"));
    }
    let (ow, oh) = (crate::blockflow::geometry::scale_len(fw, geo.out_level), crate::blockflow::geometry::scale_len(fh, geo.out_level));
    let covers = |p: i64| {
        let (x, y) = (geo.output(Span::new(-p, fw + 2 * p)), geo.output(Span::new(-p, fh + 2 * p)));
        x.start <= 0 && x.end() >= ow && y.start <= 0 && y.end() >= oh
    };
    let mut margin = geo.align;
    while !covers(margin) {
        margin += geo.align;
    }
    let step = input_fmt.step();
    let mut cur = FMap::new(Span::new(-margin, fw + 2 * margin), Span::new(-margin, fh + 2 * margin), input.channels);
    for ay in cur.y.start..cur.y.end() {
        for ax in cur.x.start..cur.x.end() {
            let px = input.pixel(ax.clamp(0, fw - 1) as usize, ay.clamp(0, fh - 1) as usize);
            let o = cur.idx(ax, ay);
            for (d, &v) in cur.data[o..o + input.channels].iter_mut().zip(px) {
                *d = v as f64 * step;
            }
        }
    }

    let base_level = m.layers.get(start).map_or(0, |l| l.scale_level);
    let mut pass = Pass { m, w, frame: (fw, fh), base_level, stats: vec![LayerStats::default(); m.layers.len()] };
    let needed: Vec<usize> = m.residual_links.iter().map(|&(s, _)| s).collect();
    let mut saved: Vec<Option<FMap>> = (0..m.layers.len()).map(|_| None).collect();
    let keep = |f: &FMap| FMap { data: f.data.clone(), ..*f };
    let input_map = needed.iter().any(|&s| s < start).then(|| keep(&cur));
    let mut i = start;
    while i < m.layers.len() {
        let l = &m.layers[i];
        let next = m.layers.get(i + 1).map(|n| n.kind);
        let (out, produced) = match l.kind {
            LayerKind::ERModule { expand } => (pass.er(i, &cur, expand as usize)?, i),
            LayerKind::Conv3x3 => match next {
                Some(LayerKind::ResidualAdd) => {
                    let s = m.skip_source(i + 1).ok_or("residual add without a link")?;
                    let skip = if s < start { input_map.as_ref() } else { saved[s].as_ref() }.ok_or("skip source was not kept")?;
                    let a = if m.layers[i + 1].activation == Activation::ReLU { Activation::ReLU } else { l.activation };
                    (pass.conv(i, &cur, Some(skip), a)?, i + 1)
                }
                Some(LayerKind::PixelShuffleUp2) => (pass.conv_shuffle(i, &cur, l.activation)?, i + 1),
                Some(LayerKind::Downsample2(kind)) => (pool(&pass.conv(i, &cur, None, l.activation)?, kind), i + 1),
                _ => (pass.conv(i, &cur, None, l.activation)?, i),
            },
            _ => return Err(format!("layer {i}: {:?} has no fused execution", l.kind)),
        };
        let (ew, eh) = pass.extent(m.layers[produced].out_level());
        let mut f = Vec::new();
        out.inside(ew, eh, &mut f);
        pass.stats[produced].features = f;
        if needed.contains(&produced) {
            saved[produced] = Some(keep(&out));
        }
        cur = out;
        i = produced + 1;
    }
    let ch = m.output_channels();
    let mut real = Vec::with_capacity((ow * oh) as usize * ch);
    for y in 0..oh {
        for x in 0..ow {
            let s = cur.idx(x, y);
            real.extend_from_slice(&cur.data[s..s + ch]);
        }
    }
    Ok((pass.stats, real))
}

/// Real-valued model output for a frame of 8-bit pixel codes, laid out
/// like a [`Tensor`] with the model's output channels.
pub fn float_forward(m: &ModelIR, w: &ModelWeights, frame: &Tensor) -> Result<Vec<f64>, QuantError> {
    w.check(m)?;
    forward(m, w, QFormat::unsigned(8), frame).map(|r| r.1).map_err(|msg| QuantError::Sample { index: 0, msg })
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Collects weights, biases and the features seen while inferring every
/// sample frame (8-bit pixel codes). Frames run in parallel.
pub fn collect_stats(m: &ModelIR, w: &ModelWeights, samples: &[Tensor]) -> Result<Stats, QuantError> {
    if samples.is_empty() {
        return Err(QuantError::NoSamples);
    }
    m.validate()?;
    w.check(m)?;
    let input_fmt = QFormat::unsigned(8);
    let runs = crate::par::map(samples, |f| forward(m, w, input_fmt, f).map(|r| r.0));
    let mut layers = vec![LayerStats::default(); m.layers.len()];
    for (index, r) in runs.into_iter().enumerate() {
        for (acc, s) in layers.iter_mut().zip(r.map_err(|msg| QuantError::Sample { index, msg })?) {
            acc.features.extend(s.features);
            acc.intermediate.extend(s.intermediate);
        }
    }
    for (l, p) in layers.iter_mut().zip(&w.layers) {
        if let Some(p) = p {
            l.weights = sorted(p.w3.iter().chain(&p.w1).copied().collect());
            l.biases = sorted(p.b3.iter().chain(&p.b1).copied().collect());
        }
        l.features = sorted(std::mem::take(&mut l.features));
        l.intermediate = sorted(std::mem::take(&mut l.intermediate));
    }
    Ok(Stats { model: m.clone(), weights: w.clone(), input_fmt, layers })
}

/// The layer whose output a layer's result is merged into by the machine.
fn consumer(m: &ModelIR, i: usize) -> usize {
    match (m.layers[i].kind, m.layers.get(i + 1).map(|n| n.kind)) {
        (LayerKind::Conv3x3, Some(LayerKind::ResidualAdd | LayerKind::PixelShuffleUp2 | LayerKind::Downsample2(_))) => i + 1,
        _ => i,
    }
}

/// Output formats. Each residual join shares one format with its skip
/// source, chosen over the values both of them hold.
fn feature_formats(stats: &Stats, norm: Norm) -> Result<Vec<QFormat>, QuantError> {
    let m = &stats.model;
    let start = usize::from(m.unshuffles_input());
    let n = m.layers.len();
    let mut group: Vec<usize> = (0..n).collect();
    let mut pinned = vec![false; n];
    let root = |g: &[usize], mut i: usize| {
        while g[i] != i {
            i = g[i];
        }
        i
    };
    for i in start..n {
        if m.layers[i].kind != LayerKind::ResidualAdd {
            continue;
        }
        let s = m.skip_source(i).ok_or(QuantError::Layer { layer: i, msg: "residual add without a link".into() })?;
        let ri = root(&group, i);
        if s < start {
            pinned[ri] = true;
        } else {
            let rs = root(&group, consumer(m, s));
            group[rs] = ri;
            pinned[ri] |= pinned[rs];
        }
    }
    let mut out = vec![stats.input_fmt; n];
    let mut done = vec![false; n];
    for i in start..n {
        let r = root(&group, i);
        if consumer(m, i) != i || done[r] {
            continue;
        }
        done[r] = true;
        let members: Vec<usize> = (start..n).filter(|&j| consumer(m, j) == j && root(&group, j) == r).collect();
        let fmt = if pinned[r] {
            stats.input_fmt
        } else {
            let relu = members.iter().all(|&j| {
                let fused = j > start && consumer(m, j - 1) == j;
                m.layers[j].activation == Activation::ReLU || (fused && m.layers[j - 1].activation == Activation::ReLU)
            });
            let mut f: Vec<f64> = members.iter().flat_map(|&j| stats.layers[j].features.iter().copied()).collect();
            f.sort_by(f64::total_cmp);
            if f.is_empty() {
                QFormat::signed(0)
            } else {
                select_precision(&f, norm, !relu, 8)?
            }
        };
        for &j in &members {
            out[j] = fmt;
        }
    }
    for i in (start..n).rev() {
        let c = consumer(m, i);
        if c != i {
            out[i] = out[c];
        }
    }
    Ok(out)
}

fn layer_q(stats: &Stats, out: &[QFormat], i: usize, norm: Norm, width: u32) -> Result<LayerQ, QuantError> {
    let m = &stats.model;
    let l = &m.layers[i];
    let s = &stats.layers[i];
    let mut q = LayerQ { out: out[i], qw: None, qb: None, qs: None, param_width: 8 };
    if !l.has_params() {
        return Ok(q);
    }
    let pick = |v: &[f64], signed: bool, width: u32| -> Result<QFormat, QuantError> {
        Ok(if v.is_empty() { QFormat::signed(0).with_width(width) } else { select_precision(v, norm, signed, width)? })
    };
    let in_fmt = if i == 0 { stats.input_fmt } else { out[i - 1] };
    let qw = pick(&s.weights, true, width)?;
    let wide = matches!(l.kind, LayerKind::Conv3x3) && l.in_ch > LANE;
    let qs = match l.kind {
        LayerKind::ERModule { .. } => Some(pick(&s.intermediate, false, 8)?),
        _ if wide => Some(pick(&s.intermediate, true, 8)?),
        _ => None,
    };
    let mut scale = in_fmt.frac_bits + qw.frac_bits;
    if let (LayerKind::ERModule { .. }, Some(qs)) = (l.kind, qs) {
        scale = scale.min(qs.frac_bits + qw.frac_bits);
    }
    let mut qb = pick(&s.biases, true, width)?;
    qb.frac_bits = qb.frac_bits.min(scale);
    q.qw = Some(qw);
    q.qb = Some(qb);
    q.qs = qs;
    q.param_width = width;
    Ok(q)
}

/// Integer codes for every layer under `plan`.
pub fn quantize(m: &ModelIR, w: &ModelWeights, plan: &QuantPlan) -> Result<QuantizedModel, QuantError> {
    w.check(m)?;
    plan.check(m)?;
    let codes = w
        .layers
        .iter()
        .zip(&plan.layers)
        .map(|(p, q)| {
            let (Some(p), Some(qw), Some(qb)) = (p, q.qw, q.qb) else { return None };
            let c = |v: &[f64], f: QFormat| v.iter().map(|&x| quantize_code(x, f) as i32).collect();
            Some(LayerCodes { qw, qb, qs: q.qs, w3: c(&p.w3, qw), b3: c(&p.b3, qb), w1: c(&p.w1, qw), b1: c(&p.b1, qb) })
        })
        .collect();
    Ok(QuantizedModel { model: m.clone(), input_fmt: plan.input, out_fmt: plan.layers.iter().map(|q| q.out).collect(), codes })
}

/// Encoded size of a quantized model's parameters in bytes.
pub fn container_bytes(qm: &QuantizedModel) -> Result<usize, QuantError> {
    Ok(layer_bytes(qm)?.iter().sum())
}

/// Container bytes owned by each layer. Every segment pads its streams to
/// a common span, so the container size is the sum over segments.
fn layer_bytes(qm: &QuantizedModel) -> Result<Vec<usize>, QuantError> {
    let plan = max_block_input(&qm.model, (256, 256), 128)
        .ok_or(QuantError::Layer { layer: 0, msg: "no block size fits the block buffers".into() })?;
    let (_, layout) = compile(qm, &plan, CompileOptions::default())?;
    let segments = gather_segments(&layout, qm)?;
    let sizes = crate::par::map(&segments, |seg| encode_params(std::slice::from_ref(seg), 8, usize::MAX).map(|(_, r)| r.container_bytes));
    let mut out = vec![0; qm.model.layers.len()];
    for (s, bytes) in layout.segments.iter().zip(sizes) {
        out[s.layer] += bytes.map_err(CompileError::from)?;
    }
    Ok(out)
}

/// Chooses every format and the 7-bit groups needed to fit `budget` bytes.
pub fn assign_formats(stats: &Stats, norm: Norm, budget: usize) -> Result<QuantPlan, QuantError> {
    let m = &stats.model;
    let out = feature_formats(stats, norm)?;
    let at_width = |width: u32| -> Result<Vec<LayerQ>, QuantError> {
        (0..m.layers.len()).map(|i| layer_q(stats, &out, i, norm, width)).collect()
    };
    let plan = |layers: Vec<LayerQ>| QuantPlan { norm, input: stats.input_fmt, layers, demoted: Vec::new(), container_bytes: 0 };
    let (q8, q7) = (at_width(8)?, at_width(7)?);
    let b8 = layer_bytes(&quantize(m, &stats.weights, &plan(q8.clone()))?)?;
    let mut bytes: usize = b8.iter().sum();
    let mut result = plan(q8);
    if bytes > budget {
        let b7 = layer_bytes(&quantize(m, &stats.weights, &plan(q7.clone()))?)?;
        let mut order: Vec<usize> = (0..m.layers.len()).filter(|&i| m.layers[i].has_params()).collect();
        let size = |i: usize| stats.layers[i].weights.len() + stats.layers[i].biases.len();
        order.sort_by_key(|&i| std::cmp::Reverse(size(i)));
        for &i in &order {
            if bytes <= budget {
                break;
            }
            bytes = bytes - b8[i] + b7[i];
            result.layers[i] = q7[i];
            result.demoted.push(i);
        }
        if bytes > budget {
            return Err(QuantError::Budget { size: bytes, budget });
        }
    }
    result.container_bytes = bytes;
    Ok(result)
}

#[cfg(test)]
mod tests;
