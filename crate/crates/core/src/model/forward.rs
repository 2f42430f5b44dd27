//! Batch forward pass.
//!
//! Runs a whole segment at once, caching every intermediate the backward
//! pass needs. Sequence length is arbitrary: each descent pools floor(T/3)
//! row triples and leftover rows skip the inner stage. Masked attention
//! scores are set to -inf before the softmax, so masked probabilities are
//! exactly zero and causality holds bit-for-bit.

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use super::config::{HourglassConfig, SHORTEN_FACTOR};
use super::params::{BlockIx, ParameterSet};
use crate::error::{Error, Result};
use crate::sequencer::Token;

pub const NORM_EPS: f64 = 1e-6;

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Root-mean-square norm with learned gain; returns the scaled output and
/// the per-row rms for the backward pass.
pub fn rms_norm(x: &Array2<f64>, gain: ArrayView1<f64>) -> (Array2<f64>, Vec<f64>) {
    let (t, c) = x.dim();
    let mut out = Array2::zeros((t, c));
    let mut rms = vec![0.0; t];
    for i in 0..t {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let r = (ms + NORM_EPS).sqrt();
        rms[i] = r;
        for j in 0..c {
            out[[i, j]] = row[j] / r * gain[j];
        }
    }
    (out, rms)
}

/// Rotary tables for rows at positions start..start+t (positions are
/// level-local: token position divided by 3^level).
pub struct RopeTable {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

pub fn rope_table(start: usize, t: usize, head_channels: usize, theta: f64) -> RopeTable {
    let half = head_channels / 2;
    let mut cos = Array2::zeros((t, half));
    let mut sin = Array2::zeros((t, half));
    for r in 0..t {
        let pos = (start + r) as f64;
        for i in 0..half {
            let ang = pos * theta.powf(-(2.0 * i as f64) / head_channels as f64);
            cos[[r, i]] = ang.cos();
            sin[[r, i]] = ang.sin();
        }
    }
    RopeTable { cos, sin }
}

/// Rotate the (i, i + hd/2) pairs of every head block in place; `dir` of
/// -1.0 applies the inverse rotation (used by the backward pass).
pub fn apply_rope(x: &mut Array2<f64>, table: &RopeTable, heads: usize, hd: usize, dir: f64) {
    let half = hd / 2;
    for r in 0..x.nrows() {
        for ht in 0..heads {
            let base = ht * hd;
            for i in 0..half {
                let (a, b) = (x[[r, base + i]], x[[r, base + half + i]]);
                let (cs, sn) = (table.cos[[r, i]], dir * table.sin[[r, i]]);
                x[[r, base + i]] = a * cs - b * sn;
                x[[r, base + half + i]] = a * sn + b * cs;
            }
        }
    }
}

/// Scaled dot-product scores -> row softmax. `window` of Some(w) applies a
/// causal mask keeping keys j with i-w < j <= i (queries and keys must then
/// cover the same rows); None attends everywhere (cross-attention).
pub fn attn_probs(qh: ArrayView2<f64>, kh: ArrayView2<f64>, window: Option<usize>) -> Array2<f64> {
    let scale = 1.0 / (qh.ncols() as f64).sqrt();
    let mut scores = qh.dot(&kh.t());
    scores *= scale;
    if let Some(w) = window {
        for i in 0..scores.nrows() {
            for j in 0..scores.ncols() {
                if j > i || i - j >= w {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
    }
    for mut row in scores.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

/// Everything the backward pass needs from one block. `q`/`k` are stored
/// after rotary application.
pub struct BlockCache {
    pub x_in: Array2<f64>,
    pub n1_out: Array2<f64>,
    pub rms1: Vec<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn_concat: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub n2_out: Array2<f64>,
    pub rms2: Vec<f64>,
    pub gate_pre: Array2<f64>,
    pub up_pre: Array2<f64>,
}

pub struct BlockCtx<'a> {
    pub rope: &'a RopeTable,
    pub window: usize,
    pub bundle: Option<&'a Array2<f64>>,
    pub heads: usize,
    pub hd: usize,
}

pub fn block_forward(
    p: &ParameterSet,
    bx: &BlockIx,
    x: Array2<f64>,
    ctx: &BlockCtx,
) -> (Array2<f64>, BlockCache) {
    let (n1_out, rms1) = rms_norm(&x, p.row(bx.n1));
    let mut q = n1_out.dot(&p.mat(bx.wq));
    let (mut k, v) = if bx.cross {
        let b = ctx.bundle.expect("cross block requires a conditioning bundle");
        (b.dot(&p.mat(bx.wk)), b.dot(&p.mat(bx.wv)))
    } else {
        (n1_out.dot(&p.mat(bx.wk)), n1_out.dot(&p.mat(bx.wv)))
    };
    if !bx.cross {
        apply_rope(&mut q, ctx.rope, ctx.heads, ctx.hd, 1.0);
        apply_rope(&mut k, ctx.rope, ctx.heads, ctx.hd, 1.0);
    }
    let (t, c) = x.dim();
    let mut attn_concat = Array2::zeros((t, c));
    let window = if bx.cross { None } else { Some(ctx.window) };
    for ht in 0..ctx.heads {
        let cols = ht * ctx.hd..(ht + 1) * ctx.hd;
        let probs = attn_probs(
            q.slice(s![.., cols.clone()]),
            k.slice(s![.., cols.clone()]),
            window,
        );
        let outh = probs.dot(&v.slice(s![.., cols.clone()]));
        attn_concat.slice_mut(s![.., cols]).assign(&outh);
    }
    let x_mid = &x + &attn_concat.dot(&p.mat(bx.wo));
    let (n2_out, rms2) = rms_norm(&x_mid, p.row(bx.n2));
    let gate_pre = n2_out.dot(&p.mat(bx.wgate));
    let up_pre = n2_out.dot(&p.mat(bx.wup));
    let act = Array2::from_shape_fn(gate_pre.dim(), |ij| silu(gate_pre[ij]) * up_pre[ij]);
    let x_out = &x_mid + &act.dot(&p.mat(bx.wdown));
    (
        x_out,
        BlockCache {
            x_in: x,
            n1_out,
            rms1,
            q,
            k,
            v,
            attn_concat,
            x_mid,
            n2_out,
            rms2,
            gate_pre,
            up_pre,
        },
    )
}

pub struct DescentCache {
    /// Pooled row triples, (t_inner, 3c): input to the shorten projection.
    pub concat: Array2<f64>,
    pub inner: Box<LevelCache>,
    /// Inner stage output, (t_inner, c): input to the upsample projection.
    pub inner_out: Array2<f64>,
}

pub struct LevelCache {
    pub level: usize,
    pub lev_start: usize,
    pub t: usize,
    pub pre: Vec<BlockCache>,
    pub descent: Option<DescentCache>,
    pub post: Vec<BlockCache>,
}

pub fn level_forward(
    p: &ParameterSet,
    level: usize,
    x: Array2<f64>,
    lev_start: usize,
    bundle: Option<&Array2<f64>>,
) -> (Array2<f64>, LevelCache) {
    let cfg = &p.cfg;
    let depths = cfg.levels();
    let lx = &p.index.levels[level];
    let (n_pre, _) = cfg.pre_post_split(level);
    let t = x.nrows();
    let rope = rope_table(lev_start, t, cfg.head_channels, cfg.rope_theta);
    let ctx = BlockCtx {
        rope: &rope,
        window: HourglassConfig::window_entries(cfg.window, level),
        bundle,
        heads: cfg.heads(),
        hd: cfg.head_channels,
    };

    let mut cur = x;
    let mut pre = Vec::with_capacity(n_pre);
    for bx in &lx.blocks[..n_pre] {
        let (nx, cache) = block_forward(p, bx, cur, &ctx);
        cur = nx;
        pre.push(cache);
    }

    let c = cfg.channels;
    let t_inner = t / SHORTEN_FACTOR;
    let descent = if level + 1 < depths.len() && t_inner > 0 {
        let mut concat = Array2::zeros((t_inner, SHORTEN_FACTOR * c));
        for u in 0..t_inner {
            for g in 0..SHORTEN_FACTOR {
                concat
                    .slice_mut(s![u, g * c..(g + 1) * c])
                    .assign(&cur.row(SHORTEN_FACTOR * u + g));
            }
        }
        let inner_in = concat.dot(&p.mat(lx.shorten.expect("shorten weight")));
        let (inner_out, inner_cache) = level_forward(
            p,
            level + 1,
            inner_in,
            lev_start / SHORTEN_FACTOR,
            bundle,
        );
        let up = inner_out.dot(&p.mat(lx.upsample.expect("upsample weight")));
        // Fold the unfolded upsample rows back in, delayed by two slots so
        // slot t only ever sees inner state built from slots <= t - 2.
        let shift = SHORTEN_FACTOR - 1;
        for dst in shift..t {
            let j = dst - shift;
            if j >= t_inner * SHORTEN_FACTOR {
                break;
            }
            let (u, g) = (j / SHORTEN_FACTOR, j % SHORTEN_FACTOR);
            let seg = up.slice(s![u, g * c..(g + 1) * c]);
            let mut row = cur.row_mut(dst);
            row += &seg;
        }
        Some(DescentCache {
            concat,
            inner: Box::new(inner_cache),
            inner_out,
        })
    } else {
        None
    };

    let mut post = Vec::new();
    for bx in &lx.blocks[n_pre..] {
        let (nx, cache) = block_forward(p, bx, cur, &ctx);
        cur = nx;
        post.push(cache);
    }
    (
        cur,
        LevelCache {
            level,
            lev_start,
            t,
            pre,
            descent,
            post,
        },
    )
}

pub struct ModelCache {
    pub tokens: Vec<Token>,
    pub start: usize,
    pub level0: Option<LevelCache>,
    /// Stream entering the final norm.
    pub final_in: Array2<f64>,
    pub final_rms: Vec<f64>,
    /// Normalized stream entering the head.
    pub final_out: Array2<f64>,
}

/// Full forward over `tokens` beginning at absolute position `start`
/// (rotary phases use start + i). Returns logits (t, vocab) plus the
/// activation cache.
pub fn forward(
    p: &ParameterSet,
    tokens: &[Token],
    start: usize,
    bundle: Option<&Array2<f64>>,
) -> Result<(Array2<f64>, ModelCache)> {
    let cfg = &p.cfg;
    let v = cfg.vocab_size();
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&tk| tk as usize >= v) {
        return Err(Error::Shape(format!("token {bad} outside vocab {v}")));
    }
    if cfg.cond.is_some() != bundle.is_some() {
        return Err(Error::Shape(
            "conditioning bundle presence must match the model config".into(),
        ));
    }
    let c = cfg.channels;
    let t = tokens.len();
    let emb = p.mat(p.index.embed);
    let mut x = Array2::zeros((t, c));
    for (i, &tk) in tokens.iter().enumerate() {
        x.row_mut(i).assign(&emb.row(tk as usize));
    }

    let (x, level0) = if !p.index.levels.is_empty() {
        let (out, cache) = level_forward(p, 0, x, start, bundle);
        (out, Some(cache))
    } else {
        (x, None)
    };

    let (final_out, final_rms) = rms_norm(&x, p.row(p.index.final_norm));
    let mut logits = final_out.dot(&p.mat(p.index.head_w));
    logits += &p.row(p.index.head_b);
    Ok((
        logits,
        ModelCache {
            tokens: tokens.to_vec(),
            start,
            level0,
            final_in: x,
            final_rms,
            final_out,
        },
    ))
}

/// Next-token targets within a segment: position i predicts tokens[i+1];
/// the last position gets the pad token, which the loss masks out.
pub fn shift_targets(tokens: &[Token], pad: Token) -> Vec<Token> {
    let mut t: Vec<Token> = tokens[1..].to_vec();
    t.push(pad);
    t
}

/// Summed cross-entropy over positions whose target is not pad, the count
/// of such positions, and d(sum)/d(logits) (softmax minus one-hot; zero
/// rows at masked positions). Callers divide by their global count.
pub fn cross_entropy(
    logits: &Array2<f64>,
    targets: &[Token],
    pad: Token,
) -> (f64, usize, Array2<f64>) {
    let (t, v) = logits.dim();
    assert_eq!(t, targets.len(), "targets must align with logits rows");
    let mut d = Array2::zeros((t, v));
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..t {
        if targets[i] == pad {
            continue;
        }
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for &x in row {
            z += (x - m).exp();
        }
        let lse = m + z.ln();
        sum += lse - row[targets[i] as usize];
        count += 1;
        for j in 0..v {
            d[[i, j]] = (row[j] - lse).exp();
        }
        d[[i, targets[i] as usize]] -= 1.0;
    }
    (sum, count, d)
}

#[cfg(test)]
pub(crate) fn tiny_config() -> HourglassConfig {
    HourglassConfig {
        quant_level: 16,
        depths: (1, 1, 1),
        channels: 16,
        head_channels: 8,
        ffn_hidden: 32,
        window: 18,
        rope_theta: 1e6,
        cross_attention_interval: 2,
        cond: None,
    }
}
