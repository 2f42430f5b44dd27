//! Streaming decode with rolling per-level caches.
//!
//! Memory is constant in sequence length: each self-attention block keeps a
//! ring of at most its level's window entries, each junction keeps a 3-slot
//! pooling stage plus a short queue of upsampled rows awaiting their
//! delayed fold-in. For any prefix the emitted logits agree with the batch
//! forward pass of that prefix (same windows, same delayed adds), because
//! every fold-in row at token t comes from a pooling group that completed
//! by step t.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::config::{HourglassConfig, SHORTEN_FACTOR};
use super::forward::NORM_EPS;
use super::params::{BlockIx, ParameterSet};
use crate::error::{Error, Result};
use crate::order_fsm;
use crate::sequencer::Token;

struct KvRing {
    k: VecDeque<Array1<f64>>,
    v: VecDeque<Array1<f64>>,
    cap: usize,
}

impl KvRing {
    fn new(cap: usize) -> Self {
        KvRing {
            k: VecDeque::with_capacity(cap + 1),
            v: VecDeque::with_capacity(cap + 1),
            cap,
        }
    }

    fn push(&mut self, k: Array1<f64>, v: Array1<f64>) {
        self.k.push_back(k);
        self.v.push_back(v);
        if self.k.len() > self.cap {
            self.k.pop_front();
            self.v.pop_front();
        }
    }
}

struct BlockState {
    /// Ring for self-attention; None for cross blocks.
    ring: Option<KvRing>,
    /// Precomputed bundle projections for cross blocks.
    cross_kv: Option<(Array2<f64>, Array2<f64>)>,
}

struct LevelState {
    blocks: Vec<BlockState>,
    staging: Vec<Array1<f64>>,
    pending: VecDeque<Array1<f64>>,
    pos: usize,
}

pub struct RollingCache {
    levels: Vec<LevelState>,
}

impl RollingCache {
    pub fn new(p: &ParameterSet, bundle: Option<&Array2<f64>>) -> Result<Self> {
        let cfg = &p.cfg;
        if cfg.cond.is_some() != bundle.is_some() {
            return Err(Error::Shape(
                "conditioning bundle presence must match the model config".into(),
            ));
        }
        let mut levels = Vec::with_capacity(p.index.levels.len());
        for (l, lx) in p.index.levels.iter().enumerate() {
            let w = HourglassConfig::window_entries(cfg.window, l);
            let blocks = lx
                .blocks
                .iter()
                .map(|bx| {
                    if bx.cross {
                        let b = bundle.expect("checked above");
                        BlockState {
                            ring: None,
                            cross_kv: Some((b.dot(&p.mat(bx.wk)), b.dot(&p.mat(bx.wv)))),
                        }
                    } else {
                        BlockState {
                            ring: Some(KvRing::new(w)),
                            cross_kv: None,
                        }
                    }
                })
                .collect();
            levels.push(LevelState {
                blocks,
                staging: Vec::with_capacity(SHORTEN_FACTOR),
                pending: VecDeque::new(),
                pos: 0,
            });
        }
        Ok(RollingCache { levels })
    }

    /// Total key/value entries currently held across all rings.
    pub fn kv_entries(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.blocks.iter())
            .filter_map(|b| b.ring.as_ref())
            .map(|r| r.k.len())
            .sum()
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.levels.first().map_or(0, |l| l.pos)
    }

    /// Entries held by the first token-level self-attention ring.
    pub fn level0_entries(&self) -> usize {
        self.levels
            .first()
            .into_iter()
            .flat_map(|l| l.blocks.iter())
            .find_map(|b| b.ring.as_ref())
            .map_or(0, |r| r.k.len())
    }
}

fn rms_norm_row(x: &Array1<f64>, gain: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let c = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / c as f64;
    let r = (ms + NORM_EPS).sqrt();
    Array1::from_shape_fn(c, |j| x[j] / r * gain[j])
}

/// Rotates one row at absolute level position `pos`; must agree exactly
/// with the table-driven batch path.
fn rope_rotate_row(x: &mut Array1<f64>, pos: usize, heads: usize, hd: usize, theta: f64) {
    let half = hd / 2;
    let posf = pos as f64;
    for ht in 0..heads {
        let base = ht * hd;
        for i in 0..half {
            let ang = posf * theta.powf(-(2.0 * i as f64) / hd as f64);
            let (sn, cs) = (ang.sin(), ang.cos());
            let (a, b) = (x[base + i], x[base + half + i]);
            x[base + i] = a * cs - b * sn;
            x[base + half + i] = a * sn + b * cs;
        }
    }
}

fn block_step(
    p: &ParameterSet,
    bx: &BlockIx,
    st: &mut BlockState,
    x: Array1<f64>,
    pos: usize,
) -> Array1<f64> {
    let cfg = &p.cfg;
    let (heads, hd) = (cfg.heads(), cfg.head_channels);
    let c = cfg.channels;
    let n1 = rms_norm_row(&x, p.row(bx.n1));
    let mut q = n1.dot(&p.mat(bx.wq));
    let mut attn = Array1::zeros(c);

    if bx.cross {
        let (bk, bv) = st.cross_kv.as_ref().expect("cross kv");
        let tk = bk.nrows();
        let scale = 1.0 / (hd as f64).sqrt();
        for ht in 0..heads {
            let cols = ht * hd..(ht + 1) * hd;
            let qh = q.slice(s![cols.clone()]);
            let mut scores: Vec<f64> = (0..tk)
                .map(|j| qh.dot(&bk.slice(s![j, cols.clone()])) * scale)
                .collect();
            softmax_in_place(&mut scores);
            for (j, &w) in scores.iter().enumerate() {
                let vh = bv.slice(s![j, cols.clone()]);
                let mut dst = attn.slice_mut(s![cols.clone()]);
                dst.scaled_add(w, &vh);
            }
        }
    } else {
        let mut k = n1.dot(&p.mat(bx.wk));
        let v = n1.dot(&p.mat(bx.wv));
        rope_rotate_row(&mut q, pos, heads, hd, cfg.rope_theta);
        rope_rotate_row(&mut k, pos, heads, hd, cfg.rope_theta);
        let ring = st.ring.as_mut().expect("self-attention ring");
        ring.push(k, v);
        let scale = 1.0 / (hd as f64).sqrt();
        for ht in 0..heads {
            let cols = ht * hd..(ht + 1) * hd;
            let qh = q.slice(s![cols.clone()]);
            let mut scores: Vec<f64> = ring
                .k
                .iter()
                .map(|kr| qh.dot(&kr.slice(s![cols.clone()])) * scale)
                .collect();
            softmax_in_place(&mut scores);
            for (vr, &w) in ring.v.iter().zip(&scores) {
                let vh = vr.slice(s![cols.clone()]);
                let mut dst = attn.slice_mut(s![cols.clone()]);
                dst.scaled_add(w, &vh);
            }
        }
    }

    let x_mid = &x + &attn.dot(&p.mat(bx.wo));
    let n2 = rms_norm_row(&x_mid, p.row(bx.n2));
    let gate_pre = n2.dot(&p.mat(bx.wgate));
    let up_pre = n2.dot(&p.mat(bx.wup));
    let act = Array1::from_shape_fn(gate_pre.len(), |j| {
        super::forward::silu(gate_pre[j]) * up_pre[j]
    });
    &x_mid + &act.dot(&p.mat(bx.wdown))
}

fn softmax_in_place(scores: &mut [f64]) {
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in scores.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in scores.iter_mut() {
        *v /= sum;
    }
}

/// One streaming step through levels `level..`; `states` is the matching
/// tail of the cache's level states.
fn step_level(
    p: &ParameterSet,
    level: usize,
    states: &mut [LevelState],
    x: Array1<f64>,
) -> Array1<f64> {
    let cfg = &p.cfg;
    let c = cfg.channels;
    let lx = &p.index.levels[level];
    let (n_pre, _) = cfg.pre_post_split(level);
    let (cur_state, rest) = states.split_first_mut().expect("level state");
    let pos = cur_state.pos;
    cur_state.pos += 1;

    let mut x = x;
    for (bx, bs) in lx.blocks[..n_pre].iter().zip(cur_state.blocks.iter_mut()) {
        x = block_step(p, bx, bs, x, pos);
    }

    if !rest.is_empty() {
        cur_state.staging.push(x.clone());
        if cur_state.staging.len() == SHORTEN_FACTOR {
            let mut concat = Array1::zeros(SHORTEN_FACTOR * c);
            for (g, row) in cur_state.staging.drain(..).enumerate() {
                concat.slice_mut(s![g * c..(g + 1) * c]).assign(&row);
            }
            let pooled = concat.dot(&p.mat(lx.shorten.expect("shorten weight")));
            let inner = step_level(p, level + 1, rest, pooled);
            let up = inner.dot(&p.mat(lx.upsample.expect("upsample weight")));
            for g in 0..SHORTEN_FACTOR {
                cur_state
                    .pending
                    .push_back(up.slice(s![g * c..(g + 1) * c]).to_owned());
            }
        }
        // The row folded in at position t is upsample output t-2; groups
        // complete just in time, so the queue is never empty here.
        if pos >= SHORTEN_FACTOR - 1 {
            let add = cur_state.pending.pop_front().expect("fold-in row ready");
            x += &add;
        }
    }

    let post_states = &mut cur_state.blocks[n_pre..];
    for (bx, bs) in lx.blocks[n_pre..].iter().zip(post_states.iter_mut()) {
        x = block_step(p, bx, bs, x, pos);
    }
    x
}

/// Consume one token, returning the logits for the next position.
pub fn decode_step(p: &ParameterSet, cache: &mut RollingCache, token: Token) -> Result<Array1<f64>> {
    let cfg = &p.cfg;
    let v = cfg.vocab_size();
    if token as usize >= v {
        return Err(Error::Shape(format!("token {token} outside vocab {v}")));
    }
    let emb = p.mat(p.index.embed);
    let mut x = emb.row(token as usize).to_owned();
    if !cache.levels.is_empty() {
        x = step_level(p, 0, &mut cache.levels, x);
    }
    let n = rms_norm_row(&x, p.row(p.index.final_norm));
    let mut logits = n.dot(&p.mat(p.index.head_w));
    logits += &p.row(p.index.head_b);
    Ok(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// The model emitted E at a face boundary.
    Natural,
    /// The face cap was reached before a natural stop.
    FaceLimit,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Full framed sequence: 9 S, coordinates, 9 E.
    pub tokens: Vec<Token>,
    pub halt: HaltReason,
    pub faces: u64,
    /// Tokens pushed through the network (excludes the appended E group).
    pub steps: usize,
}

/// Autoregressive generation under the ordering machine. Sampling is
/// masked to the valid set at every position; `max_faces` bounds runaway
/// generations. The S prefix is fed through the network but not the
/// machine (it is fixed context), and once E is chosen the remaining E
/// group is forced without further network calls.
pub fn generate<R: Rng>(
    p: &ParameterSet,
    bundle: Option<&Array2<f64>>,
    max_faces: u64,
    temperature: f64,
    rng: &mut R,
) -> Result<GenerateOutput> {
    if max_faces == 0 {
        return Err(Error::Config("max_faces must be positive".into()));
    }
    let vocab = p.cfg.vocab();
    let mut cache = RollingCache::new(p, bundle)?;
    let mut fsm = order_fsm::new_state(vocab);
    let mut tokens: Vec<Token> = Vec::new();
    let mut logits = Array1::zeros(vocab.vocab_size());
    for _ in 0..9 {
        tokens.push(vocab.s());
        logits = decode_step(p, &mut cache, vocab.s())?;
    }
    let mut steps = 9usize;
    loop {
        let tok = order_fsm::masked_sample(
            logits.as_slice().expect("contiguous logits"),
            &fsm,
            temperature,
            rng,
        )?;
        fsm.advance(tok)?;
        tokens.push(tok);
        if tok == vocab.e() {
            for _ in 0..8 {
                fsm.advance(vocab.e())?;
                tokens.push(vocab.e());
            }
            return Ok(GenerateOutput {
                tokens,
                halt: HaltReason::Natural,
                faces: fsm.faces_emitted(),
                steps,
            });
        }
        if fsm.pos_in_face() == 0 && fsm.faces_emitted() >= max_faces {
            for _ in 0..9 {
                fsm.advance(vocab.e())?;
                tokens.push(vocab.e());
            }
            return Ok(GenerateOutput {
                tokens,
                halt: HaltReason::FaceLimit,
                faces: fsm.faces_emitted(),
                steps,
            });
        }
        logits = decode_step(p, &mut cache, tok)?;
        steps += 1;
    }
}
