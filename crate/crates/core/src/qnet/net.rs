//! Forward and reverse passes of the two Q-network graphs.
//!
//! Both graphs share a convolutional encoder mapping one feature map to an
//! embedding. The memoryless graph puts a linear head on the embedding of
//! the current state. The stateful graph embeds every valid state of a
//! history window, appends an action embedding, runs one multi-head
//! self-attention layer over the tokens, averages them and applies the
//! head. Activations inside the conv stack are laid out
//! `[channel][batch][row][col]` so each conv is a single GEMM.

use std::collections::HashMap;
use std::sync::Arc;

use super::arch::{InputNorm, NetArchitecture, Variant};
use super::params::{GradStore, ParamStore};
use super::scalar::{matmul, Mat, Scalar};
use super::window::HistoryWindow;
use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Q-values of every action for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionValues(pub Vec<f64>);

impl ActionValues {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Greedy action index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

struct BlockCache<T> {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    col: Vec<T>,
    /// Post-ReLU conv output, `[cout][batch][h][w]`.
    act: Vec<T>,
}

pub(crate) struct EncoderCache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    /// Extent of the last pooled map.
    last: (usize, usize),
    gap: Vec<T>,
    embed: Vec<T>,
}

fn im2col<T: Scalar>(x: &[T], c: usize, b: usize, h: usize, w: usize, col: &mut [T]) {
    let n = b * h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * n..][..n];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for bi in 0..b {
                    let plane = &x[(ci * b + bi) * h * w..][..h * w];
                    for y in 0..h {
                        let out = &mut row[(bi * h + y) * w..][..w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        out[..x_lo].fill(T::zero());
                        out[x_hi..].fill(T::zero());
                        out[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - 1..x_hi + kx - 1]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, b: usize, h: usize, w: usize, dx: &mut [T]) {
    let n = b * h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * n..][..n];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for bi in 0..b {
                    let plane = &mut dx[(ci * b + bi) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &row[(bi * h + y) * w..][..w];
                        let dst = &mut plane[sy as usize * w..][..w];
                        for (d, v) in dst[x_lo + kx - 1..x_hi + kx - 1].iter_mut().zip(&g[x_lo..x_hi]) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pool with floor; `planes` independent `h x w` maps.
fn avgpool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..][..w];
            let r1 = &src[(2 * y + 1) * w..][..w];
            for xx in 0..ow {
                dst[y * ow + xx] = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    out
}

fn avgpool_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[y * ow + xx] * quarter;
                dst[2 * y * w + 2 * xx] = v;
                dst[2 * y * w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * w + 2 * xx] = v;
                dst[(2 * y + 1) * w + 2 * xx + 1] = v;
            }
        }
    }
    dx
}

/// `y = x w^T + b` for `n` rows.
fn linear<T: Scalar>(x: &[T], n: usize, w: &[T], b: &[T], out_dim: usize, in_dim: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    matmul(
        Mat::new(x, n, in_dim),
        Mat::new(w, out_dim, in_dim).t(),
        T::one(),
        &mut y,
    );
    y
}

/// Accumulates weight and bias gradients of a linear layer and returns
/// the input gradient when asked for.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    w: &[T],
    out_dim: usize,
    in_dim: usize,
    grads: &mut GradStore<T>,
    w_idx: usize,
    b_idx: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul(
        Mat::new(dy, n, out_dim).t(),
        Mat::new(x, n, in_dim),
        T::one(),
        &mut grads.tensors_mut()[w_idx].data,
    );
    let db = &mut grads.tensors_mut()[b_idx].data;
    for row in dy.chunks_exact(out_dim) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); n * in_dim];
        matmul(
            Mat::new(dy, n, out_dim),
            Mat::new(w, out_dim, in_dim),
            T::zero(),
            &mut dx,
        );
        dx
    })
}

/// Parameter positions, resolved once per pass.
struct Slots {
    conv: Vec<(usize, usize)>,
    embed: (usize, usize),
    head: (usize, usize),
    action_embed: usize,
    query: (usize, usize),
    key: (usize, usize),
    value: (usize, usize),
    out: (usize, usize),
}

impl Slots {
    fn resolve<T: Scalar>(arch: &NetArchitecture, p: &ParamStore<T>) -> Result<Self> {
        p.check_arch(arch)?;
        let pair = |n: &str| -> Result<(usize, usize)> {
            Ok((p.index_of(&format!("{n}.weight"))?, p.index_of(&format!("{n}.bias"))?))
        };
        let stateful = arch.variant == Variant::Stateful;
        let opt = |n: &str| -> Result<(usize, usize)> {
            if stateful {
                pair(n)
            } else {
                Ok((usize::MAX, usize::MAX))
            }
        };
        Ok(Self {
            conv: (0..arch.conv_channels.len())
                .map(|i| pair(&format!("conv{i}")))
                .collect::<Result<_>>()?,
            embed: pair("embed")?,
            head: pair("head")?,
            action_embed: if stateful {
                p.index_of("action_embed.weight")?
            } else {
                usize::MAX
            },
            query: opt("attn.query")?,
            key: opt("attn.key")?,
            value: opt("attn.value")?,
            out: opt("attn.out")?,
        })
    }
}

fn data<T: Scalar>(p: &ParamStore<T>, i: usize) -> &[T] {
    &p.tensors()[i].data
}

/// Mean and inverse standard deviation of a map.
fn standardizer(values: &[f32]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().map(|v| f64::from(*v)).sum::<f64>() / n;
    let var = values.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var.sqrt() + 1e-6))
}

/// Embeds a batch of feature maps; returns `[batch, embed_dim]`.
fn encode<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    slots: &Slots,
    states: &[&FeatureMap],
) -> Result<EncoderCache<T>> {
    let b = states.len();
    let [c0, h0, w0] = states
        .first()
        .map(|s| s.shape())
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    if c0 != arch.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {c0} channels, network expects {}",
            arch.input_channels
        )));
    }
    if let Some(s) = states.iter().find(|s| s.shape() != [c0, h0, w0]) {
        return Err(Error::ShapeMismatch(format!(
            "mixed feature shapes {:?} and {:?} in one batch",
            [c0, h0, w0],
            s.shape()
        )));
    }
    arch.encoded_extent(h0, w0)?;

    let plane = h0 * w0;
    let mut x = vec![T::zero(); c0 * b * plane];
    for (bi, s) in states.iter().enumerate() {
        let (shift, scale) = match arch.input_norm {
            InputNorm::None => (0.0, 1.0),
            InputNorm::Standardize => standardizer(s.data()),
        };
        for c in 0..c0 {
            let dst = &mut x[(c * b + bi) * plane..][..plane];
            for (d, v) in dst.iter_mut().zip(s.channel(c)) {
                *d = T::lit((f64::from(*v) - shift) * scale);
            }
        }
    }

    let (mut cin, mut h, mut w) = (c0, h0, w0);
    let mut blocks = Vec::with_capacity(arch.conv_channels.len());
    for (i, &cout) in arch.conv_channels.iter().enumerate() {
        let n = b * h * w;
        let mut col = vec![T::zero(); cin * 9 * n];
        im2col(&x, cin, b, h, w, &mut col);
        let (wi, bi) = slots.conv[i];
        let bias = data(params, bi);
        let mut act = vec![T::zero(); cout * n];
        for (row, bv) in act.chunks_exact_mut(n).zip(bias) {
            row.fill(*bv);
        }
        matmul(
            Mat::new(data(params, wi), cout, cin * 9),
            Mat::new(&col, cin * 9, n),
            T::one(),
            &mut act,
        );
        for v in &mut act {
            *v = v.max(T::zero());
        }
        x = avgpool(&act, cout * b, h, w);
        blocks.push(BlockCache {
            cin,
            cout,
            h,
            w,
            col,
            act,
        });
        cin = cout;
        h /= 2;
        w /= 2;
    }

    let area = h * w;
    let inv_area = T::one() / T::lit(area as f64);
    let mut gap = vec![T::zero(); b * cin];
    for c in 0..cin {
        for bi in 0..b {
            let s = x[(c * b + bi) * area..][..area]
                .iter()
                .fold(T::zero(), |acc, v| acc + *v);
            gap[bi * cin + c] = s * inv_area;
        }
    }
    let (ew, eb) = slots.embed;
    let mut embed = linear(&gap, b, data(params, ew), data(params, eb), arch.embed_dim, cin);
    for v in &mut embed {
        *v = v.max(T::zero());
    }
    Ok(EncoderCache {
        batch: b,
        blocks,
        last: (h, w),
        gap,
        embed,
    })
}

fn encode_backward<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    slots: &Slots,
    cache: &EncoderCache<T>,
    d_embed: &[T],
    grads: &mut GradStore<T>,
) {
    let b = cache.batch;
    let c_last = *arch.conv_channels.last().expect("validated non-empty");
    let mut d_pre: Vec<T> = d_embed
        .iter()
        .zip(&cache.embed)
        .map(|(g, y)| if *y > T::zero() { *g } else { T::zero() })
        .collect();
    let (ew, eb) = slots.embed;
    let d_gap = linear_backward(
        &cache.gap,
        &d_pre,
        b,
        data(params, ew),
        arch.embed_dim,
        c_last,
        grads,
        ew,
        eb,
        true,
    )
    .expect("requested");
    d_pre.clear();

    let (h, w) = cache.last;
    let area = h * w;
    let inv_area = T::one() / T::lit(area as f64);
    let mut dx = vec![T::zero(); c_last * b * area];
    for c in 0..c_last {
        for bi in 0..b {
            let g = d_gap[bi * c_last + c] * inv_area;
            dx[(c * b + bi) * area..][..area].fill(g);
        }
    }

    for (i, blk) in cache.blocks.iter().enumerate().rev() {
        let n = b * blk.h * blk.w;
        let mut dy = avgpool_backward(&dx, blk.cout * b, blk.h, blk.w);
        for (g, a) in dy.iter_mut().zip(&blk.act) {
            if *a <= T::zero() {
                *g = T::zero();
            }
        }
        let (wi, bi) = slots.conv[i];
        matmul(
            Mat::new(&dy, blk.cout, n),
            Mat::new(&blk.col, blk.cin * 9, n).t(),
            T::one(),
            &mut grads.tensors_mut()[wi].data,
        );
        let db = &mut grads.tensors_mut()[bi].data;
        for (g, row) in db.iter_mut().zip(dy.chunks_exact(n)) {
            *g += row.iter().fold(T::zero(), |a, v| a + *v);
        }
        if i > 0 {
            let mut dcol = vec![T::zero(); blk.cin * 9 * n];
            matmul(
                Mat::new(data(params, wi), blk.cout, blk.cin * 9).t(),
                Mat::new(&dy, blk.cout, n),
                T::zero(),
                &mut dcol,
            );
            dx = vec![T::zero(); blk.cin * n];
            col2im(&dcol, blk.cin, b, blk.h, blk.w, &mut dx);
        }
    }
}

/// Unique feature maps of a batch, keyed by allocation.
struct StateIndex<'a> {
    states: Vec<&'a FeatureMap>,
    lookup: HashMap<*const FeatureMap, usize>,
}

impl<'a> StateIndex<'a> {
    fn new() -> Self {
        Self {
            states: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    fn insert(&mut self, s: &'a Arc<FeatureMap>) -> usize {
        let key = Arc::as_ptr(s);
        *self.lookup.entry(key).or_insert_with(|| {
            self.states.push(s.as_ref());
            self.states.len() - 1
        })
    }
}

struct AttentionCache<T> {
    token_state: Vec<usize>,
    token_action: Vec<usize>,
    /// `(first token, token count)` per window.
    segments: Vec<(usize, usize)>,
    tokens: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Softmax weights, per window then per head, `len x len` each.
    att: Vec<T>,
    att_offsets: Vec<usize>,
    ctx: Vec<T>,
    pooled: Vec<T>,
}

/// Everything the reverse pass needs.
pub(crate) struct Tape<T> {
    slots: Slots,
    enc: EncoderCache<T>,
    /// Per window, its row in the encoder batch (memoryless only).
    rows: Vec<usize>,
    head_in: Vec<T>,
    attention: Option<AttentionCache<T>>,
}

fn forward_stateful_tokens<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    slots: &Slots,
    embed: &[T],
    token_state: Vec<usize>,
    token_action: Vec<usize>,
    segments: Vec<(usize, usize)>,
) -> AttentionCache<T> {
    let e = arch.embed_dim;
    let a = arch.action_embed_dim;
    let tw = e + a;
    let m = token_state.len();
    let table = data(params, slots.action_embed);
    let mut tokens = vec![T::zero(); m * tw];
    for (t, row) in tokens.chunks_exact_mut(tw).enumerate() {
        row[..e].copy_from_slice(&embed[token_state[t] * e..][..e]);
        row[e..].copy_from_slice(&table[token_action[t] * a..][..a]);
    }
    let proj = |(w, b): (usize, usize)| linear(&tokens, m, data(params, w), data(params, b), e, tw);
    let (q, k, v) = (proj(slots.query), proj(slots.key), proj(slots.value));

    let heads = arch.attn_heads;
    let dh = e / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut att = Vec::new();
    let mut att_offsets = Vec::with_capacity(segments.len());
    let mut ctx = vec![T::zero(); m * e];
    let mut scores = Vec::new();
    for &(s, len) in &segments {
        att_offsets.push(att.len());
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in s..s + len {
                let qi = &q[i * e..][cols.clone()];
                scores.clear();
                scores.extend((s..s + len).map(|j| {
                    let kj = &k[j * e..][cols.clone()];
                    qi.iter().zip(kj).fold(T::zero(), |acc, (x, y)| acc + *x * *y) * scale
                }));
                let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for sc in &mut scores {
                    *sc = (*sc - mx).exp();
                    z += *sc;
                }
                let out = &mut ctx[i * e..][cols.clone()];
                for (jj, sc) in scores.iter().enumerate() {
                    let w = *sc / z;
                    att.push(w);
                    let vj = &v[(s + jj) * e..][cols.clone()];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * *vv;
                    }
                }
            }
        }
    }
    let (ow, ob) = slots.out;
    let o = linear(&ctx, m, data(params, ow), data(params, ob), e, e);
    let mut pooled = vec![T::zero(); segments.len() * e];
    for (bi, &(s, len)) in segments.iter().enumerate() {
        let inv = T::one() / T::lit(len as f64);
        let dst = &mut pooled[bi * e..][..e];
        for i in s..s + len {
            for (d, val) in dst.iter_mut().zip(&o[i * e..][..e]) {
                *d += *val * inv;
            }
        }
    }
    AttentionCache {
        token_state,
        token_action,
        segments,
        tokens,
        q,
        k,
        v,
        att,
        att_offsets,
        ctx,
        pooled,
    }
}

fn attention_backward<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    slots: &Slots,
    c: &AttentionCache<T>,
    d_pooled: &[T],
    n_states: usize,
    grads: &mut GradStore<T>,
) -> Vec<T> {
    let e = arch.embed_dim;
    let a = arch.action_embed_dim;
    let tw = e + a;
    let m = c.token_state.len();
    let mut d_o = vec![T::zero(); m * e];
    for (bi, &(s, len)) in c.segments.iter().enumerate() {
        let inv = T::one() / T::lit(len as f64);
        let g = &d_pooled[bi * e..][..e];
        for i in s..s + len {
            for (d, gv) in d_o[i * e..][..e].iter_mut().zip(g) {
                *d = *gv * inv;
            }
        }
    }
    let (ow, ob) = slots.out;
    let d_ctx = linear_backward(&c.ctx, &d_o, m, data(params, ow), e, e, grads, ow, ob, true).expect("requested");

    let heads = arch.attn_heads;
    let dh = e / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); m * e];
    let mut dk = vec![T::zero(); m * e];
    let mut dv = vec![T::zero(); m * e];
    let mut da = Vec::new();
    for (bi, &(s, len)) in c.segments.iter().enumerate() {
        let base = c.att_offsets[bi];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in s..s + len {
                let row = &c.att[base + (hd * len + (i - s)) * len..][..len];
                let gi = &d_ctx[i * e..][cols.clone()];
                da.clear();
                for (jj, w) in row.iter().enumerate() {
                    let j = s + jj;
                    let vj = &c.v[j * e..][cols.clone()];
                    da.push(gi.iter().zip(vj).fold(T::zero(), |acc, (x, y)| acc + *x * *y));
                    for (d, g) in dv[j * e..][cols.clone()].iter_mut().zip(gi) {
                        *d += *w * *g;
                    }
                }
                let dot = row.iter().zip(&da).fold(T::zero(), |acc, (w, g)| acc + *w * *g);
                for (jj, w) in row.iter().enumerate() {
                    let ds = *w * (da[jj] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let j = s + jj;
                    for cc in cols.clone() {
                        dq[i * e + cc] += ds * c.k[j * e + cc];
                        dk[j * e + cc] += ds * c.q[i * e + cc];
                    }
                }
            }
        }
    }

    let mut d_tokens = vec![T::zero(); m * tw];
    for (d, slot) in [(&dq, slots.query), (&dk, slots.key), (&dv, slots.value)] {
        let dx = linear_backward(
            &c.tokens,
            d,
            m,
            data(params, slot.0),
            e,
            tw,
            grads,
            slot.0,
            slot.1,
            true,
        )
        .expect("requested");
        for (acc, v) in d_tokens.iter_mut().zip(&dx) {
            *acc += *v;
        }
    }
    let mut d_embed = vec![T::zero(); n_states * e];
    let table = &mut grads.tensors_mut()[slots.action_embed].data;
    for (t, row) in d_tokens.chunks_exact(tw).enumerate() {
        for (d, g) in d_embed[c.token_state[t] * e..][..e].iter_mut().zip(&row[..e]) {
            *d += *g;
        }
        for (d, g) in table[c.token_action[t] * a..][..a].iter_mut().zip(&row[e..]) {
            *d += *g;
        }
    }
    d_embed
}

/// Q-values for a batch of windows, `[batch, n_actions]`, plus the tape.
pub(crate) fn forward_tape<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    windows: &[&HistoryWindow],
) -> Result<(Vec<T>, Tape<T>)> {
    arch.validate()?;
    let slots = Slots::resolve(arch, params)?;
    if windows.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let e = arch.embed_dim;
    let mut index = StateIndex::new();
    let (enc, rows, head_in, attention) = match arch.variant {
        Variant::Memoryless => {
            let rows: Vec<usize> = windows.iter().map(|w| index.insert(&w.current)).collect();
            let enc = encode(arch, params, &slots, &index.states)?;
            let mut head_in = Vec::with_capacity(rows.len() * e);
            for &r in &rows {
                head_in.extend_from_slice(&enc.embed[r * e..][..e]);
            }
            (enc, rows, head_in, None)
        }
        Variant::Stateful => {
            let mut token_state = Vec::new();
            let mut token_action = Vec::new();
            let mut segments = Vec::with_capacity(windows.len());
            for w in windows {
                if w.history_len() != arch.history_len {
                    return Err(Error::ShapeMismatch(format!(
                        "window holds {} past slots, network expects {}",
                        w.history_len(),
                        arch.history_len
                    )));
                }
                let start = token_state.len();
                for entry in w.valid_past() {
                    let ai = entry.action.index();
                    if ai >= arch.n_actions {
                        return Err(Error::ShapeMismatch(format!(
                            "action index {ai} outside the {}-action head",
                            arch.n_actions
                        )));
                    }
                    token_state.push(index.insert(&entry.state));
                    token_action.push(ai);
                }
                token_state.push(index.insert(&w.current));
                token_action.push(arch.null_action());
                segments.push((start, token_state.len() - start));
            }
            let enc = encode(arch, params, &slots, &index.states)?;
            let att = forward_stateful_tokens(arch, params, &slots, &enc.embed, token_state, token_action, segments);
            (enc, Vec::new(), att.pooled.clone(), Some(att))
        }
    };
    let (hw, hb) = slots.head;
    let out = linear(
        &head_in,
        windows.len(),
        data(params, hw),
        data(params, hb),
        arch.n_actions,
        e,
    );
    Ok((
        out,
        Tape {
            slots,
            enc,
            rows,
            head_in,
            attention,
        },
    ))
}

/// Accumulates into `grads` the gradient of `sum(d_out * out)`.
pub(crate) fn backward<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    tape: &Tape<T>,
    d_out: &[T],
    grads: &mut GradStore<T>,
) {
    let e = arch.embed_dim;
    let n = d_out.len() / arch.n_actions;
    let slots = &tape.slots;
    let (hw, hb) = slots.head;
    let d_head_in = linear_backward(
        &tape.head_in,
        d_out,
        n,
        data(params, hw),
        arch.n_actions,
        e,
        grads,
        hw,
        hb,
        true,
    )
    .expect("requested");
    let n_states = tape.enc.batch;
    let d_embed = match &tape.attention {
        None => {
            let mut d = vec![T::zero(); n_states * e];
            for (b, &r) in tape.rows.iter().enumerate() {
                for (acc, g) in d[r * e..][..e].iter_mut().zip(&d_head_in[b * e..][..e]) {
                    *acc += *g;
                }
            }
            d
        }
        Some(att) => attention_backward(arch, params, slots, att, &d_head_in, n_states, grads),
    };
    encode_backward(arch, params, slots, &tape.enc, &d_embed, grads);
}

fn rows_to_values<T: Scalar>(out: &[T], n_actions: usize) -> Vec<ActionValues> {
    out.chunks_exact(n_actions)
        .map(|r| ActionValues(r.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Q-values of each window under either variant (the memoryless graph
/// reads only `current`).
pub fn q_values_batch<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    windows: &[&HistoryWindow],
) -> Result<Vec<ActionValues>> {
    let (out, _) = forward_tape(arch, params, windows)?;
    Ok(rows_to_values(&out, arch.n_actions))
}

pub fn q_values<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    window: &HistoryWindow,
) -> Result<ActionValues> {
    Ok(q_values_batch(arch, params, &[window])?.remove(0))
}

pub fn forward_memoryless<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    features: &FeatureMap,
) -> Result<ActionValues> {
    Ok(forward_memoryless_batch(arch, params, &[features])?.remove(0))
}

pub fn forward_memoryless_batch<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    features: &[&FeatureMap],
) -> Result<Vec<ActionValues>> {
    if arch.variant != Variant::Memoryless {
        return Err(Error::Usage("architecture is not memoryless".into()));
    }
    let windows: Vec<HistoryWindow> = features
        .iter()
        .map(|f| HistoryWindow::start(Arc::new((*f).clone()), 0))
        .collect();
    q_values_batch(arch, params, &windows.iter().collect::<Vec<_>>())
}

pub fn forward_stateful<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    window: &HistoryWindow,
) -> Result<ActionValues> {
    Ok(forward_stateful_traced(arch, params, window)?.0)
}

/// Stateful forward pass that also reports, per head, the attention
/// matrix over the valid tokens (row = query).
pub fn forward_stateful_traced<T: Scalar>(
    arch: &NetArchitecture,
    params: &ParamStore<T>,
    window: &HistoryWindow,
) -> Result<(ActionValues, Vec<Vec<Vec<f64>>>)> {
    if arch.variant != Variant::Stateful {
        return Err(Error::Usage("architecture is not stateful".into()));
    }
    let (out, tape) = forward_tape(arch, params, &[window])?;
    let att = tape.attention.as_ref().expect("stateful tape");
    let len = att.segments[0].1;
    let heads = (0..arch.attn_heads)
        .map(|h| {
            (0..len)
                .map(|i| {
                    att.att[(h * len + i) * len..][..len]
                        .iter()
                        .map(|v| v.as_f64())
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((rows_to_values(&out, arch.n_actions).remove(0), heads))
}

/// Per-episode memo of state embeddings for acting with a stateful net:
/// each step encodes only the newly observed state.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: HashMap<*const FeatureMap, (Arc<FeatureMap>, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Q-values of `window`, reusing cached embeddings. Results equal
    /// [`q_values`] exactly.
    pub fn q_values(
        &mut self,
        arch: &NetArchitecture,
        params: &ParamStore<f32>,
        window: &HistoryWindow,
    ) -> Result<ActionValues> {
        if arch.variant == Variant::Memoryless {
            return q_values(arch, params, window);
        }
        let slots = Slots::resolve(arch, params)?;
        let mut states: Vec<&Arc<FeatureMap>> = window.valid_past().map(|p| &p.state).collect();
        states.push(&window.current);
        let mut missing: Vec<&Arc<FeatureMap>> = Vec::new();
        for &s in &states {
            if !self.entries.contains_key(&Arc::as_ptr(s)) && !missing.iter().any(|m| Arc::ptr_eq(m, s)) {
                missing.push(s);
            }
        }
        if !missing.is_empty() {
            let maps: Vec<&FeatureMap> = missing.iter().map(|s| s.as_ref()).collect();
            let enc = encode(arch, params, &slots, &maps)?;
            let e = arch.embed_dim;
            for (i, s) in missing.iter().enumerate() {
                self.entries
                    .insert(Arc::as_ptr(s), (Arc::clone(s), enc.embed[i * e..][..e].to_vec()));
            }
        }
        let e = arch.embed_dim;
        let mut embed = Vec::with_capacity(states.len() * e);
        for s in &states {
            embed.extend_from_slice(&self.entries[&Arc::as_ptr(s)].1);
        }
        let mut actions: Vec<usize> = window.valid_past().map(|p| p.action.index()).collect();
        actions.push(arch.null_action());
        let n = states.len();
        let att = forward_stateful_tokens(arch, params, &slots, &embed, (0..n).collect(), actions, vec![(0, n)]);
        let (hw, hb) = slots.head;
        let out = linear(&att.pooled, 1, data(params, hw), data(params, hb), arch.n_actions, e);
        Ok(rows_to_values(&out, arch.n_actions).remove(0))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
