//! Hand-written reverse pass over the cached forward activations.
//!
//! Attention probabilities are recomputed from the cached (rotated) q/k
//! rather than stored, which keeps the cache linear in sequence length.
//! Rotary application is orthogonal per pair, so gradients and values are
//! carried back through it by the inverse rotation.

use ndarray::{s, Array2, ArrayView1, ArrayViewMut2};

use super::config::{HourglassConfig, SHORTEN_FACTOR};
use super::forward::{
    apply_rope, attn_probs, rope_table, silu, silu_deriv, BlockCache, LevelCache, ModelCache,
    RopeTable,
};
use super::params::{BlockIx, Grads, ParameterSet};

pub(super) fn rms_norm_backward(
    x: &Array2<f64>,
    rms: &[f64],
    gain: ArrayView1<f64>,
    d_out: &Array2<f64>,
    mut d_gain: ArrayViewMut2<f64>,
) -> Array2<f64> {
    let (t, c) = x.dim();
    let mut d_x = Array2::zeros((t, c));
    for i in 0..t {
        let r = rms[i];
        let mut s_acc = 0.0;
        for j in 0..c {
            let dn = d_out[[i, j]];
            d_gain[[0, j]] += dn * x[[i, j]] / r;
            s_acc += dn * gain[j] * x[[i, j]];
        }
        let coef = s_acc / (c as f64 * r * r * r);
        for j in 0..c {
            d_x[[i, j]] = d_out[[i, j]] * gain[j] / r - x[[i, j]] * coef;
        }
    }
    d_x
}

pub(super) struct BwdCtx<'a> {
    pub rope: &'a RopeTable,
    pub window: usize,
    pub heads: usize,
    pub hd: usize,
    pub bundle: Option<&'a Array2<f64>>,
}

pub(super) fn block_backward(
    p: &ParameterSet,
    bx: &BlockIx,
    cache: &BlockCache,
    ctx: &BwdCtx,
    d_out: &Array2<f64>,
    grads: &mut Grads,
    mut d_bundle: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let (t, c) = cache.x_in.dim();
    let tk = cache.k.nrows();

    // FFN branch: x_out = x_mid + (silu(gate_pre) * up_pre) @ wdown.
    let act = Array2::from_shape_fn(cache.gate_pre.dim(), |ij| {
        silu(cache.gate_pre[ij]) * cache.up_pre[ij]
    });
    {
        let g = act.t().dot(d_out);
        let mut gw = grads.mat_mut(bx.wdown);
        gw += &g;
    }
    let d_act = d_out.dot(&p.mat(bx.wdown).t());
    let d_gate_pre = Array2::from_shape_fn(d_act.dim(), |ij| {
        d_act[ij] * cache.up_pre[ij] * silu_deriv(cache.gate_pre[ij])
    });
    let d_up_pre = Array2::from_shape_fn(d_act.dim(), |ij| d_act[ij] * silu(cache.gate_pre[ij]));
    {
        let g = cache.n2_out.t().dot(&d_gate_pre);
        let mut gw = grads.mat_mut(bx.wgate);
        gw += &g;
    }
    {
        let g = cache.n2_out.t().dot(&d_up_pre);
        let mut gw = grads.mat_mut(bx.wup);
        gw += &g;
    }
    let d_n2 = d_gate_pre.dot(&p.mat(bx.wgate).t()) + d_up_pre.dot(&p.mat(bx.wup).t());
    let mut d_x_mid =
        rms_norm_backward(&cache.x_mid, &cache.rms2, p.row(bx.n2), &d_n2, grads.mat_mut(bx.n2));
    d_x_mid += d_out;

    // Attention branch: x_mid = x_in + attn_concat @ wo.
    {
        let g = cache.attn_concat.t().dot(&d_x_mid);
        let mut gw = grads.mat_mut(bx.wo);
        gw += &g;
    }
    let d_attn = d_x_mid.dot(&p.mat(bx.wo).t());

    let mut d_q = Array2::zeros((t, c));
    let mut d_k = Array2::zeros((tk, c));
    let mut d_v = Array2::zeros((tk, c));
    let window = if bx.cross { None } else { Some(ctx.window) };
    let scale = 1.0 / (ctx.hd as f64).sqrt();
    for ht in 0..ctx.heads {
        let cols = ht * ctx.hd..(ht + 1) * ctx.hd;
        let qh = cache.q.slice(s![.., cols.clone()]);
        let kh = cache.k.slice(s![.., cols.clone()]);
        let vh = cache.v.slice(s![.., cols.clone()]);
        let probs = attn_probs(qh, kh, window);
        let d_outh = d_attn.slice(s![.., cols.clone()]);
        {
            let g = probs.t().dot(&d_outh);
            let mut dst = d_v.slice_mut(s![.., cols.clone()]);
            dst += &g;
        }
        let d_probs = d_outh.dot(&vh.t());
        let mut d_scores = Array2::zeros((t, tk));
        for i in 0..t {
            let dot: f64 = probs
                .row(i)
                .iter()
                .zip(d_probs.row(i))
                .map(|(pp, dp)| pp * dp)
                .sum();
            for j in 0..tk {
                d_scores[[i, j]] = probs[[i, j]] * (d_probs[[i, j]] - dot) * scale;
            }
        }
        {
            let g = d_scores.dot(&kh);
            let mut dst = d_q.slice_mut(s![.., cols.clone()]);
            dst += &g;
        }
        {
            let g = d_scores.t().dot(&qh);
            let mut dst = d_k.slice_mut(s![.., cols]);
            dst += &g;
        }
    }

    let mut d_n1;
    if bx.cross {
        let bundle = ctx.bundle.expect("cross block requires the bundle in backward");
        {
            let g = bundle.t().dot(&d_k);
            let mut gw = grads.mat_mut(bx.wk);
            gw += &g;
        }
        {
            let g = bundle.t().dot(&d_v);
            let mut gw = grads.mat_mut(bx.wv);
            gw += &g;
        }
        if let Some(db) = d_bundle.as_deref_mut() {
            *db += &d_k.dot(&p.mat(bx.wk).t());
            *db += &d_v.dot(&p.mat(bx.wv).t());
        }
        {
            let g = cache.n1_out.t().dot(&d_q);
            let mut gw = grads.mat_mut(bx.wq);
            gw += &g;
        }
        d_n1 = d_q.dot(&p.mat(bx.wq).t());
    } else {
        // Undo the rotation: grads w.r.t. pre-rotation q/k.
        apply_rope(&mut d_q, ctx.rope, ctx.heads, ctx.hd, -1.0);
        apply_rope(&mut d_k, ctx.rope, ctx.heads, ctx.hd, -1.0);
        {
            let g = cache.n1_out.t().dot(&d_q);
            let mut gw = grads.mat_mut(bx.wq);
            gw += &g;
        }
        {
            let g = cache.n1_out.t().dot(&d_k);
            let mut gw = grads.mat_mut(bx.wk);
            gw += &g;
        }
        {
            let g = cache.n1_out.t().dot(&d_v);
            let mut gw = grads.mat_mut(bx.wv);
            gw += &g;
        }
        d_n1 = d_q.dot(&p.mat(bx.wq).t());
        d_n1 += &d_k.dot(&p.mat(bx.wk).t());
        d_n1 += &d_v.dot(&p.mat(bx.wv).t());
    }

    let mut d_x_in = rms_norm_backward(
        &cache.x_in,
        &cache.rms1,
        p.row(bx.n1),
        &d_n1,
        grads.mat_mut(bx.n1),
    );
    d_x_in += &d_x_mid;
    d_x_in
}

fn level_backward(
    p: &ParameterSet,
    lc: &LevelCache,
    d_out: Array2<f64>,
    grads: &mut Grads,
    bundle: Option<&Array2<f64>>,
    mut d_bundle: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let cfg = &p.cfg;
    let lx = &p.index.levels[lc.level];
    let (n_pre, _) = cfg.pre_post_split(lc.level);
    let rope = rope_table(lc.lev_start, lc.t, cfg.head_channels, cfg.rope_theta);
    let ctx = BwdCtx {
        rope: &rope,
        window: HourglassConfig::window_entries(cfg.window, lc.level),
        heads: cfg.heads(),
        hd: cfg.head_channels,
        bundle,
    };
    let c = cfg.channels;

    let mut d = d_out;
    for (bx, cache) in lx.blocks[n_pre..].iter().zip(&lc.post).rev() {
        d = block_backward(p, bx, cache, &ctx, &d, grads, d_bundle.as_deref_mut());
    }

    if let Some(desc) = &lc.descent {
        let t_inner = desc.concat.nrows();
        let shift = SHORTEN_FACTOR - 1;
        // Gather the shifted-add gradient back onto the upsample rows.
        let mut d_up = Array2::zeros((t_inner, SHORTEN_FACTOR * c));
        for dst in shift..lc.t {
            let j = dst - shift;
            if j >= t_inner * SHORTEN_FACTOR {
                break;
            }
            let (u, g) = (j / SHORTEN_FACTOR, j % SHORTEN_FACTOR);
            let mut seg = d_up.slice_mut(s![u, g * c..(g + 1) * c]);
            seg += &d.row(dst);
        }
        {
            let g = desc.inner_out.t().dot(&d_up);
            let mut gw = grads.mat_mut(lx.upsample.expect("upsample weight"));
            gw += &g;
        }
        let d_inner_out = d_up.dot(&p.mat(lx.upsample.expect("upsample weight")).t());
        let d_inner_in = level_backward(
            p,
            &desc.inner,
            d_inner_out,
            grads,
            bundle,
            d_bundle.as_deref_mut(),
        );
        {
            let g = desc.concat.t().dot(&d_inner_in);
            let mut gw = grads.mat_mut(lx.shorten.expect("shorten weight"));
            gw += &g;
        }
        let d_concat = d_inner_in.dot(&p.mat(lx.shorten.expect("shorten weight")).t());
        for u in 0..t_inner {
            for g in 0..SHORTEN_FACTOR {
                let seg = d_concat.slice(s![u, g * c..(g + 1) * c]);
                let mut row = d.row_mut(SHORTEN_FACTOR * u + g);
                row += &seg;
            }
        }
    }

    for (bx, cache) in lx.blocks[..n_pre].iter().zip(&lc.pre).rev() {
        d = block_backward(p, bx, cache, &ctx, &d, grads, d_bundle.as_deref_mut());
    }
    d
}

/// Accumulates parameter gradients for d(loss)/d(logits) into `grads`, and
/// the bundle gradient into `d_bundle` when conditioning is active.
pub fn backward(
    p: &ParameterSet,
    cache: &ModelCache,
    d_logits: &Array2<f64>,
    grads: &mut Grads,
    bundle: Option<&Array2<f64>>,
    mut d_bundle: Option<&mut Array2<f64>>,
) {
    // Head.
    {
        let g = cache.final_out.t().dot(d_logits);
        let mut gw = grads.mat_mut(p.index.head_w);
        gw += &g;
    }
    {
        let mut gb = grads.mat_mut(p.index.head_b);
        for i in 0..d_logits.nrows() {
            let row = d_logits.row(i);
            for j in 0..row.len() {
                gb[[0, j]] += row[j];
            }
        }
    }
    let d_final_out = d_logits.dot(&p.mat(p.index.head_w).t());
    let mut d_x = rms_norm_backward(
        &cache.final_in,
        &cache.final_rms,
        p.row(p.index.final_norm),
        &d_final_out,
        grads.mat_mut(p.index.final_norm),
    );

    if let Some(l0) = &cache.level0 {
        d_x = level_backward(p, l0, d_x, grads, bundle, d_bundle.as_deref_mut());
    }

    // Embedding scatter.
    let mut ge = grads.mat_mut(p.index.embed);
    for (i, &tk) in cache.tokens.iter().enumerate() {
        let row = d_x.row(i);
        for j in 0..row.len() {
            ge[[tk as usize, j]] += row[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::forward::{cross_entropy, forward, shift_targets, tiny_config};
    use super::super::params::init_model;
    use super::*;
    use crate::sequencer::Token;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_of(p: &ParameterSet, toks: &[Token], pad: Token) -> f64 {
        let (logits, _) = forward(p, toks, 0, None).unwrap();
        let targets = shift_targets(toks, pad);
        let (sum, count, _) = cross_entropy(&logits, &targets, pad);
        sum / count as f64
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut cfg = tiny_config();
        cfg.depths = (2, 2, 2); // both pre and post blocks at the outer levels
        let mut p = init_model(&cfg, 17);
        let pad = cfg.vocab().p();
        let vocab = cfg.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // 22 tokens: ragged at every level, with a masked pad target tail.
        let mut toks: Vec<Token> = (0..22).map(|_| rng.gen_range(0..vocab as u16 - 1)).collect();
        toks[20] = pad;
        toks[21] = pad;

        let (logits, cache) = forward(&p, &toks, 0, None).unwrap();
        let targets = shift_targets(&toks, pad);
        let (_, count, mut d_logits) = cross_entropy(&logits, &targets, pad);
        d_logits *= 1.0 / count as f64;
        let mut grads = Grads::zeros(p.layout.clone());
        backward(&p, &cache, &d_logits, &mut grads, None, None);

        // Probe two entries of every tensor.
        let eps = 1e-5;
        let mut checked = 0;
        for id in 0..p.layout.tensors.len() {
            let meta = p.layout.tensors[id].clone();
            for probe in 0..2 {
                let idx = meta.offset + (rng.gen_range(0..meta.len()) + probe) % meta.len();
                let orig = p.data[idx];
                p.data[idx] = orig + eps;
                let up = loss_of(&p, &toks, pad);
                p.data[idx] = orig - eps;
                let dn = loss_of(&p, &toks, pad);
                p.data[idx] = orig;
                let numeric = (up - dn) / (2.0 * eps);
                let analytic = grads.data[idx];
                let tol = 1e-7 + 1e-4 * numeric.abs().max(analytic.abs());
                assert!(
                    (numeric - analytic).abs() < tol,
                    "{}[{}]: numeric {numeric} vs analytic {analytic}",
                    meta.name,
                    idx - meta.offset
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn pad_only_targets_produce_zero_gradient() {
        let cfg = tiny_config();
        let p = init_model(&cfg, 5);
        let pad = cfg.vocab().p();
        let toks = vec![1u16, 2, 3, 4];
        let (logits, cache) = forward(&p, &toks, 0, None).unwrap();
        let targets = vec![pad; 4];
        let (sum, count, d_logits) = cross_entropy(&logits, &targets, pad);
        assert_eq!((sum, count), (0.0, 0));
        let mut grads = Grads::zeros(p.layout.clone());
        backward(&p, &cache, &d_logits, &mut grads, None, None);
        assert_eq!(grads.global_norm(), 0.0);
    }
}
