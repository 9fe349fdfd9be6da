use super::SimError;
use crate::blockflow::{geometry::scale_len, ChainGeometry, Span};
use crate::fixedpoint::{requantize_code, Accumulator, QFormat};
use crate::modelir::{pad_channels, Activation, LayerCodes, LayerKind, PoolKind, QuantizedModel, LANE};
use crate::tensor::Tensor;

/// A whole-frame feature map over an absolute window at one stratum.
struct Map {
    x: Span,
    y: Span,
    ch: usize,
    fmt: QFormat,
    data: Vec<i32>,
}

impl Map {
    fn new(x: Span, y: Span, ch: usize, fmt: QFormat) -> Self {
        Map { x, y, ch, fmt, data: vec![0; (x.len * y.len) as usize * ch] }
    }

    #[inline]
    fn idx(&self, ax: i64, ay: i64) -> usize {
        (((ay - self.y.start) * self.x.len + (ax - self.x.start)) as usize) * self.ch
    }

    #[inline]
    fn get(&self, ax: i64, ay: i64, c: usize) -> i64 {
        self.data[self.idx(ax, ay) + c] as i64
    }
}

struct Run<'a> {
    qm: &'a QuantizedModel,
    /// Frame extent at the chain input stratum.
    frame: (i64, i64),
    base_level: i32,
    macs: u64,
}

impl<'a> Run<'a> {
    fn in_frame(&self, layer: usize, ax: i64, ay: i64) -> bool {
        let level = self.qm.model.layers[layer].scale_level - self.base_level;
        ax >= 0 && ay >= 0 && ax < scale_len_any(self.frame.0, level) && ay < scale_len_any(self.frame.1, level)
    }

    fn codes(&self, layer: usize) -> Result<&'a LayerCodes, SimError> {
        self.qm.codes.get(layer).and_then(Option::as_ref).ok_or_else(|| {
            SimError::Frame(format!("layer {layer} has no quantized parameters"))
        })
    }
}

fn scale_len_any(len: i64, level: i32) -> i64 {
    if level >= 0 {
        len << level
    } else {
        len >> -level
    }
}

fn shift_for(layer: usize, scale: i32, qb: QFormat) -> Result<u32, SimError> {
    u32::try_from(scale - qb.frac_bits)
        .map_err(|_| SimError::Frame(format!("layer {layer}: bias {qb} is finer than the accumulator scale {scale}")))
}

fn act(v: i64, a: Activation) -> i64 {
    if a == Activation::ReLU {
        v.max(0)
    } else {
        v
    }
}

/// Zero-padded copy of a `[out][in][3x3]` weight array, re-laid out as
/// `[out][group][tap][lane]` so one lane group's taps are contiguous.
/// `out_pos` places each real output channel.
fn pad_w3(w: &[i32], out_ch: usize, in_ch: usize, pin: usize, pout: usize, out_pos: impl Fn(usize) -> usize) -> Vec<i32> {
    let groups = pin / LANE;
    let mut p = vec![0; pout * pin * 9];
    for o in 0..out_ch {
        let po = out_pos(o);
        for i in 0..in_ch {
            for k in 0..9 {
                p[((po * groups + i / LANE) * 9 + k) * LANE + i % LANE] = w[(o * in_ch + i) * 9 + k];
            }
        }
    }
    p
}

const GROUP_TAPS: usize = 9 * LANE;

/// 3x3 convolution sums over lane group `g` for every output channel at
/// one pixel.
fn conv_sum(src: &Map, w: &[i32], pout: usize, g: usize, ax: i64, ay: i64, acc: &mut [i64]) {
    let groups = src.ch / LANE;
    let mut nb = [0i32; GROUP_TAPS];
    for k in 0..9i64 {
        let base = src.idx(ax + k % 3 - 1, ay + k / 3 - 1) + g * LANE;
        nb[k as usize * LANE..][..LANE].copy_from_slice(&src.data[base..base + LANE]);
    }
    // 8-bit operands keep one group's sum below 2^24
    for (o, a) in acc.iter_mut().enumerate().take(pout) {
        let row = &w[(o * groups + g) * GROUP_TAPS..][..GROUP_TAPS];
        *a = row.iter().zip(&nb).map(|(&w, &x)| w * x).sum::<i32>() as i64;
    }
}

fn shrink(s: Span) -> Span {
    Span::new(s.start + 1, s.len - 2)
}

/// Plain or residual 3x3 convolution, with chained 8-bit partial sums when
/// the input spans several lane groups.
fn conv(
    run: &mut Run<'_>,
    layer: usize,
    src: &Map,
    skip: Option<&Map>,
    out_fmt: QFormat,
    activation: Activation,
) -> Result<Map, SimError> {
    let qm = run.qm;
    let l = &qm.model.layers[layer];
    let c = run.codes(layer)?;
    let (pin, pout) = (src.ch, pad_channels(l.out_ch));
    let w = pad_w3(&c.w3, l.out_ch, l.in_ch, pin, pout, |o| o);
    let scale = src.fmt.frac_bits + c.qw.frac_bits;
    let shift = shift_for(layer, scale, c.qb)?;
    let groups = pin / LANE;
    let qs = if groups > 1 {
        Some(c.qs.ok_or_else(|| SimError::Frame(format!("layer {layer}: wide input without a partial-sum format")))?)
    } else {
        None
    };
    let (ox, oy) = (shrink(src.x), shrink(src.y));
    let mut out = Map::new(ox, oy, pout, out_fmt);
    let mut acc = vec![0i64; pout];
    let mut partial = vec![0i64; pout];
    for ay in oy.start..oy.end() {
        for ax in ox.start..ox.end() {
            if run.in_frame(layer, ax, ay) {
                run.macs += (9 * pin * pout) as u64;
            }
            let base = out.idx(ax, ay);
            for g in 0..groups {
                conv_sum(src, &w, pout, g, ax, ay, &mut acc);
                let last = g + 1 == groups;
                for o in 0..pout {
                    let mut a = Accumulator { value: acc[o], scale };
                    if g > 0 {
                        a.add_aligned(partial[o], qs.expect("wide").frac_bits);
                    }
                    if !last {
                        partial[o] = requantize_code(a.value, a.scale, qs.expect("wide"));
                        continue;
                    }
                    a.value += (c.b3.get(o).copied().unwrap_or(0) as i64) << shift;
                    if let Some(s) = skip {
                        a.add_aligned(s.get(ax, ay, o), s.fmt.frac_bits);
                    }
                    out.data[base + o] = requantize_code(act(a.value, activation), a.scale, out_fmt) as i32;
                }
            }
        }
    }
    Ok(out)
}

fn conv_shuffle(run: &mut Run<'_>, layer: usize, src: &Map, out_fmt: QFormat, activation: Activation) -> Result<Map, SimError> {
    let qm = run.qm;
    let l = &qm.model.layers[layer];
    let c = run.codes(layer)?;
    let sub = l.out_ch / 4;
    let (pin, psub) = (src.ch, pad_channels(sub));
    let pout = 4 * psub;
    let pos = |o: usize| (o / sub) * psub + o % sub;
    let w = pad_w3(&c.w3, l.out_ch, l.in_ch, pin, pout, pos);
    let mut bias = vec![0i64; pout];
    for o in 0..l.out_ch {
        bias[pos(o)] = c.b3[o] as i64;
    }
    let scale = src.fmt.frac_bits + c.qw.frac_bits;
    let shift = shift_for(layer, scale, c.qb)?;
    let (cx, cy) = (shrink(src.x), shrink(src.y));
    let mut out = Map::new(Span::new(2 * cx.start, 2 * cx.len), Span::new(2 * cy.start, 2 * cy.len), psub, out_fmt);
    let mut acc = vec![0i64; pout];
    for ay in cy.start..cy.end() {
        for ax in cx.start..cx.end() {
            if run.in_frame(layer, ax, ay) {
                run.macs += (9 * pin * pout) as u64;
            }
            let mut total = vec![0i64; pout];
            for g in 0..pin / LANE {
                conv_sum(src, &w, pout, g, ax, ay, &mut acc);
                total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a);
            }
            for (po, &a) in total.iter().enumerate() {
                let (g, ch) = (po / psub, po % psub);
                let v = requantize_code(act(a + (bias[po] << shift), activation), scale, out_fmt);
                let o = out.idx(2 * ax + (g % 2) as i64, 2 * ay + (g / 2) as i64);
                out.data[o + ch] = v as i32;
            }
        }
    }
    Ok(out)
}

fn pool(m: &Map, kind: PoolKind) -> Map {
    let half = |s: Span| {
        let start = (s.start + 1).div_euclid(2);
        Span::new(start, (s.end().div_euclid(2) - start).max(0))
    };
    let mut out = Map::new(half(m.x), half(m.y), m.ch, m.fmt);
    for y in out.y.start..out.y.end() {
        for x in out.x.start..out.x.end() {
            let o = out.idx(x, y);
            for c in 0..m.ch {
                let mut v = m.get(2 * x, 2 * y, c);
                if kind == PoolKind::Max {
                    v = v.max(m.get(2 * x + 1, 2 * y, c)).max(m.get(2 * x, 2 * y + 1, c)).max(m.get(2 * x + 1, 2 * y + 1, c));
                }
                out.data[o + c] = v as i32;
            }
        }
    }
    out
}

fn er(run: &mut Run<'_>, layer: usize, src: &Map, expand: usize, out_fmt: QFormat) -> Result<Map, SimError> {
    let qm = run.qm;
    let l = &qm.model.layers[layer];
    let c = run.codes(layer)?;
    let qs = c.qs.ok_or_else(|| SimError::Frame(format!("layer {layer}: ER without an intermediate format")))?;
    let pin = src.ch;
    let e = expand * l.in_ch;
    let pe = expand * pin;
    let pout = pad_channels(l.out_ch);
    let w3 = pad_w3(&c.w3, e, l.in_ch, pin, pe, |o| o);
    let scale1 = src.fmt.frac_bits + c.qw.frac_bits;
    let scale2 = qs.frac_bits + c.qw.frac_bits;
    let (s1, s2) = (shift_for(layer, scale1, c.qb)?, shift_for(layer, scale2, c.qb)?);
    let (ox, oy) = (shrink(src.x), shrink(src.y));
    let mut out = Map::new(ox, oy, pout, out_fmt);
    let mut acc = vec![0i64; pe];
    let mut t = vec![0i64; pe];
    for ay in oy.start..oy.end() {
        for ax in ox.start..ox.end() {
            if run.in_frame(layer, ax, ay) {
                run.macs += (9 * pin * pe + pe * pout) as u64;
            }
            let mut total = vec![0i64; pe];
            for g in 0..pin / LANE {
                conv_sum(src, &w3, pe, g, ax, ay, &mut acc);
                total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a);
            }
            for k in 0..pe {
                let b = c.b3.get(k).copied().unwrap_or(0) as i64;
                t[k] = requantize_code((total[k] + (b << s1)).max(0), scale1, qs);
            }
            let base = out.idx(ax, ay);
            for o in 0..pout {
                let mut sum = 0i64;
                if o < l.out_ch {
                    for k in 0..e {
                        sum += t[k] * c.w1[o * e + k] as i64;
                    }
                    sum += (c.b1[o] as i64) << s2;
                }
                let mut a = Accumulator { value: sum, scale: scale2 };
                a.add_aligned(src.get(ax, ay, o), src.fmt.frac_bits);
                out.data[base + o] = requantize_code(act(a.value, l.activation), a.scale, out_fmt) as i32;
            }
        }
    }
    Ok(out)
}

fn forward(qm: &QuantizedModel, frame: &Tensor) -> Result<(Tensor, u64), SimError> {
    let m = &qm.model;
    let start = usize::from(m.unshuffles_input());
    let input = if start == 1 {
        if !frame.width.is_multiple_of(2) || !frame.height.is_multiple_of(2) {
            return Err(SimError::Frame("unshuffled input needs even frame dimensions".into()));
        }
        frame.pixel_unshuffle()
    } else {
        frame.clone()
    };
    let expect_ch = m.layers.get(start).map_or(0, |l| l.in_ch);
    if input.channels != expect_ch {
        return Err(SimError::Frame(format!("frame has {} channels, the model expects {expect_ch}", input.channels)));
    }
    let geo = ChainGeometry::of_model(m).map_err(|e| SimError::Frame(e.to_string()))?;
    let (w, h) = (input.width as i64, input.height as i64);
    let unit = 1i64 << (-geo.out_level).max(0);
    if w % unit != 0 || h % unit != 0 {
        return Err(SimError::Frame(format!("frame {w}x{h} is incompatible with the model's resampling")));
    }
    let out_w = scale_len(w, geo.out_level);
    let out_h = scale_len(h, geo.out_level);
    let covers = |p: i64| {
        let ox = geo.output(Span::new(-p, w + 2 * p));
        let oy = geo.output(Span::new(-p, h + 2 * p));
        ox.start <= 0 && ox.end() >= out_w && oy.start <= 0 && oy.end() >= out_h
    };
    let mut margin = geo.align;
    while !covers(margin) {
        margin += geo.align;
        if margin > 4096 {
            return Err(SimError::Frame("model border is too large".into()));
        }
    }

    let pin = pad_channels(input.channels);
    let mut cur = Map::new(Span::new(-margin, w + 2 * margin), Span::new(-margin, h + 2 * margin), pin, qm.input_fmt);
    for ay in cur.y.start..cur.y.end() {
        for ax in cur.x.start..cur.x.end() {
            let (fx, fy) = (ax.clamp(0, w - 1) as usize, ay.clamp(0, h - 1) as usize);
            let o = cur.idx(ax, ay);
            cur.data[o..o + input.channels].copy_from_slice(input.pixel(fx, fy));
        }
    }

    let mut run = Run { qm, frame: (w, h), base_level: m.layers.get(start).map_or(0, |l| l.scale_level), macs: 0 };
    let mut saved: Vec<Option<Map>> = (0..m.layers.len()).map(|_| None).collect();
    let needed: Vec<usize> = m.residual_links.iter().map(|&(s, _)| s).collect();
    let mut input_map = None;
    if needed.iter().any(|&s| s < start) {
        input_map = Some(Map { data: cur.data.clone(), ..cur });
    }
    let mut i = start;
    while i < m.layers.len() {
        let l = &m.layers[i];
        let next = m.layers.get(i + 1).map(|n| n.kind);
        let (out, produced) = match l.kind {
            LayerKind::ERModule { expand } => (er(&mut run, i, &cur, expand as usize, qm.out_fmt[i])?, i),
            LayerKind::Conv3x3 => match next {
                Some(LayerKind::ResidualAdd) => {
                    let s = m
                        .skip_source(i + 1)
                        .ok_or_else(|| SimError::Frame(format!("layer {}: residual add without a link", i + 1)))?;
                    let skip = if s < start { input_map.as_ref() } else { saved[s].as_ref() }
                        .ok_or_else(|| SimError::Frame(format!("layer {s}: skip source was not kept")))?;
                    let a = if m.layers[i + 1].activation == Activation::ReLU { Activation::ReLU } else { l.activation };
                    (conv(&mut run, i, &cur, Some(skip), qm.out_fmt[i + 1], a)?, i + 1)
                }
                Some(LayerKind::PixelShuffleUp2) => (conv_shuffle(&mut run, i, &cur, qm.out_fmt[i + 1], l.activation)?, i + 1),
                Some(LayerKind::Downsample2(kind)) => {
                    let c = conv(&mut run, i, &cur, None, qm.out_fmt[i + 1], l.activation)?;
                    (pool(&c, kind), i + 1)
                }
                _ => (conv(&mut run, i, &cur, None, qm.out_fmt[i], l.activation)?, i),
            },
            _ => return Err(SimError::Frame(format!("layer {i}: no fused execution for {:?}", l.kind))),
        };
        if needed.contains(&produced) {
            saved[produced] = Some(Map { data: out.data.clone(), ..out });
        }
        cur = out;
        i = produced + 1;
    }
    let ch = m.output_channels();
    let out = Tensor::from_fn(out_w as usize, out_h as usize, ch, |x, y, c| cur.get(x as i64, y as i64, c) as i32);
    Ok((out, run.macs))
}

/// Runs the quantized model over the whole frame, layer by layer, with the
/// same fixed-point arithmetic as the machine. Frame borders are replicated.
pub fn oracle_frame(qm: &QuantizedModel, frame: &Tensor) -> Result<Tensor, SimError> {
    Ok(forward(qm, frame)?.0)
}

/// Multiply-accumulates the oracle performs on in-frame pixels, at
/// lane-padded channel widths.
pub fn oracle_macs(qm: &QuantizedModel, frame: &Tensor) -> Result<u64, SimError> {
    Ok(forward(qm, frame)?.1)
}
