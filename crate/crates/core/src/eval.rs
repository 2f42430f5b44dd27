//! Metrics and efficiency instrumentation: Chamfer distance, per-token
//! loss profiles, an analytic FLOP/memory cost model, generation
//! throughput probes, and long-context evaluation curves.
//!
//! Timing functions report wall-clock rates measured near each requested
//! length (a trailing probe segment), i.e. the instantaneous generation
//! rate at that length rather than a cumulative average that would blur
//! the cache-fill phase into the steady state.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::mesh::{dequantize, quantize, RawMesh};
use crate::model::decode::{decode_step, GenerateOutput, HaltReason, RollingCache};
use crate::model::forward::forward;
use crate::model::ParameterSet;
use crate::order_fsm;
use crate::pointcloud::sample_surface;
use crate::sequencer::{Token, TokenSequence};

/// Symmetric mean nearest-neighbor Euclidean distance,
/// 0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|).
///
/// Exact: the tree query returns the same minimum as a brute-force scan.
/// Values are raw distances; multiply by 100 when displaying in the
/// x1e-2 convention.
pub fn chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("chamfer needs two non-empty point sets".into()));
    }
    let ta = KdTree::build(a);
    let tb = KdTree::build(b);
    let mean_ab = a.iter().map(|&p| tb.nearest_sq(p).sqrt()).sum::<f64>() / a.len() as f64;
    let mean_ba = b.iter().map(|&p| ta.nearest_sq(p).sqrt()).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

/// Brute-force double-loop reference for `chamfer`.
pub fn chamfer_bruteforce(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("chamfer needs two non-empty point sets".into()));
    }
    let nearest = |p: [f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|&q| {
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
            })
            .fold(f64::INFINITY, f64::min)
    };
    let mean_ab = a.iter().map(|&p| nearest(p, b).sqrt()).sum::<f64>() / a.len() as f64;
    let mean_ba = b.iter().map(|&p| nearest(p, a).sqrt()).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

/// Chamfer distance between surface samples of a mesh and samples of its
/// quantize-dequantize image: the reconstruction floor imposed by the
/// grid alone.
pub fn quantization_floor(mesh: &RawMesh, quant_level: u32, samples: usize, seed: u64) -> Result<f64> {
    let gt = sample_surface(mesh, samples, seed)?;
    let (qm, _) = quantize(mesh, quant_level)?;
    let image = dequantize(&qm);
    let img = sample_surface(&image, samples, seed ^ 0x9e3779b97f4a7c15)?;
    chamfer(&gt.positions, &img.positions)
}

/// Per-token losses for a framed sequence, aligned to the predicted token
/// index: entry j is -log p(tokens[j] | tokens[..j]). Entry 0 and entries
/// whose target is padding are NaN.
pub fn sequence_losses(
    model: &ParameterSet,
    tokens: &[Token],
    start: usize,
    bundle: Option<&Array2<f64>>,
) -> Result<Vec<f64>> {
    let (logits, _) = forward(model, tokens, start, bundle)?;
    let pad = model.cfg.vocab().p();
    let mut out = vec![f64::NAN; tokens.len()];
    for t in 0..tokens.len() - 1 {
        let target = tokens[t + 1];
        if target == pad {
            continue;
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out[t + 1] = lse - row[target as usize];
    }
    Ok(out)
}

/// Losses for the coordinate stream only, starting at face slot 0: the
/// returned index modulo 9 is the position within the face. S, E and P
/// predictions are dropped.
pub fn coordinate_losses(
    model: &ParameterSet,
    seq: &TokenSequence,
    bundle: Option<&Array2<f64>>,
) -> Result<Vec<f64>> {
    let coords = seq.coordinate_tokens()?;
    let losses = sequence_losses(model, &seq.tokens, 0, bundle)?;
    Ok(losses[9..9 + coords.len()].to_vec())
}

/// Mean loss per within-face slot. Input lists must already be aligned to
/// the coordinate stream (slot of entry i is i mod 9); non-finite entries
/// are skipped.
pub fn ppl_profile(coord_losses: &[Vec<f64>]) -> [f64; 9] {
    let mut sum = [0.0f64; 9];
    let mut count = [0usize; 9];
    for seq in coord_losses {
        for (i, &l) in seq.iter().enumerate() {
            if l.is_finite() {
                sum[i % 9] += l;
                count[i % 9] += 1;
            }
        }
    }
    let mut out = [f64::NAN; 9];
    for k in 0..9 {
        if count[k] > 0 {
            out[k] = sum[k] / count[k] as f64;
        }
    }
    out
}

/// Closed-form per-configuration cost at sequence length `seq_len` and
/// attention window `window`, both in tokens.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub label: String,
    pub seq_len: usize,
    pub window: usize,
    pub attn_flops: f64,
    pub ffn_flops: f64,
    pub total_flops: f64,
    /// Key/value entries held at inference, summed over layers.
    pub kv_entries: f64,
    pub kv_bytes: f64,
    /// Live activation elements during a training forward (proxy).
    pub activation_elems: f64,
}

/// Evaluate the closed form. A plain transformer is `depths = (d, 0, 0)`.
/// Rows at level l run at length L/3^l with window W/3^l; per layer,
/// attention costs 2*L*min(L,W)*c*2 (score and mix) plus 4*L*c^2
/// (projections), the gated FFN costs 2*L*c*h*3, and the cache holds
/// min(L,W) entries of 2*c floats at 4 bytes.
pub fn cost_model(
    label: &str,
    depths: (usize, usize, usize),
    channels: usize,
    ffn_hidden: usize,
    seq_len: usize,
    window: usize,
) -> CostReport {
    assert!(seq_len > 0 && window > 0, "need positive length and window");
    let c = channels as f64;
    let h = ffn_hidden as f64;
    let mut attn = 0.0;
    let mut ffn = 0.0;
    let mut entries = 0.0;
    let mut act = seq_len as f64 * c; // embedding stream
    for (level, depth) in [depths.0, depths.1, depths.2].into_iter().enumerate() {
        let l = (seq_len / 3usize.pow(level as u32)) as f64;
        let w = (window / 3usize.pow(level as u32)) as f64;
        let d = depth as f64;
        attn += d * (2.0 * l * l.min(w) * c * 2.0 + 4.0 * l * c * c);
        ffn += d * (2.0 * l * c * h * 3.0);
        entries += d * l.min(w);
        act += d * (l * (7.0 * c + 2.0 * h));
    }
    CostReport {
        label: label.to_string(),
        seq_len,
        window,
        attn_flops: attn,
        ffn_flops: ffn,
        total_flops: attn + ffn,
        kv_entries: entries,
        kv_bytes: entries * 2.0 * c * 4.0,
        activation_elems: act,
    }
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(
        "label,seq_len,window,attn_flops,ffn_flops,total_flops,kv_entries,kv_bytes,activation_elems\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.0},{:.0},{:.0},{:.0},{:.0},{:.0}\n",
            r.label,
            r.seq_len,
            r.window,
            r.attn_flops,
            r.ffn_flops,
            r.total_flops,
            r.kv_entries,
            r.kv_bytes,
            r.activation_elems
        ));
    }
    out
}

/// Human-readable companion to `cost_csv`.
pub fn cost_table(reports: &[CostReport]) -> String {
    let mut out = format!(
        "{:<12} {:>9} {:>8} {:>12} {:>12} {:>12} {:>11} {:>12}\n",
        "config", "seq_len", "window", "attn GFLOP", "ffn GFLOP", "total GFLOP", "kv entries", "kv MiB"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>9} {:>8} {:>12.3} {:>12.3} {:>12.3} {:>11.0} {:>12.3}\n",
            r.label,
            r.seq_len,
            r.window,
            r.attn_flops / 1e9,
            r.ffn_flops / 1e9,
            r.total_flops / 1e9,
            r.kv_entries,
            r.kv_bytes / (1024.0 * 1024.0)
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputPoint {
    pub length: usize,
    /// Rate over the trailing probe segment ending at `length`.
    pub tokens_per_s: f64,
    /// Peak level-0 per-layer cache entries seen up to `length`.
    pub peak_entries: usize,
}

pub fn throughput_csv(points: &[ThroughputPoint], mode: &str, threads: usize) -> String {
    let mut out = format!("# mode={mode} threads={threads}\nlength,tokens_per_s,peak_entries\n");
    for p in points {
        out.push_str(&format!("{},{:.2},{}\n", p.length, p.tokens_per_s, p.peak_entries));
    }
    out
}

fn synthetic_token(model: &ParameterSet, step: usize) -> Token {
    // In-vocab coordinate stream; content is irrelevant to timing.
    (step % model.cfg.quant_level as usize) as Token
}

fn check_lengths(lengths: &[usize], probe: usize) -> Result<()> {
    if lengths.is_empty() || probe == 0 {
        return Err(Error::Config("need lengths and a positive probe".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] < probe {
        return Err(Error::Config(
            "lengths must be strictly increasing and at least the probe size".into(),
        ));
    }
    Ok(())
}

/// Feed a synthetic token stream through the rolling decoder, timing the
/// last `probe` tokens before each requested length.
pub fn throughput_rolling(
    model: &ParameterSet,
    bundle: Option<&Array2<f64>>,
    lengths: &[usize],
    probe: usize,
) -> Result<Vec<ThroughputPoint>> {
    check_lengths(lengths, probe)?;
    let mut cache = RollingCache::new(model, bundle)?;
    let max = *lengths.last().unwrap();
    let mut marks: Vec<(usize, Instant)> = Vec::new();
    let mut peak = 0usize;
    let mut peaks: Vec<usize> = Vec::new();
    let needed: std::collections::BTreeSet<usize> = lengths
        .iter()
        .flat_map(|&l| [l - probe, l])
        .collect();
    let t0 = Instant::now();
    if needed.contains(&0) {
        marks.push((0, t0));
    }
    for step in 0..max {
        decode_step(model, &mut cache, synthetic_token(model, step))?;
        peak = peak.max(cache.level0_entries());
        let done = step + 1;
        if needed.contains(&done) {
            marks.push((done, Instant::now()));
        }
        if lengths.contains(&done) {
            peaks.push(peak);
        }
    }
    let at = |n: usize| marks.iter().find(|(s, _)| *s == n).unwrap().1;
    Ok(lengths
        .iter()
        .zip(peaks)
        .map(|(&l, peak_entries)| ThroughputPoint {
            length: l,
            tokens_per_s: probe as f64 / (at(l).duration_since(at(l - probe))).as_secs_f64(),
            peak_entries,
        })
        .collect())
}

/// Same probe, but every token is produced by re-running the batch
/// forward over the whole prefix (no cache). Rates fall as the prefix
/// grows; `peak_entries` is 0 because nothing is cached.
pub fn throughput_recompute(
    model: &ParameterSet,
    bundle: Option<&Array2<f64>>,
    lengths: &[usize],
    probe: usize,
) -> Result<Vec<ThroughputPoint>> {
    check_lengths(lengths, probe)?;
    let max = *lengths.last().unwrap();
    let tokens: Vec<Token> = (0..max).map(|s| synthetic_token(model, s)).collect();
    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let t0 = Instant::now();
        for prefix in (l - probe + 1)..=l {
            forward(model, &tokens[..prefix], 0, bundle)?;
        }
        out.push(ThroughputPoint {
            length: l,
            tokens_per_s: probe as f64 / t0.elapsed().as_secs_f64(),
            peak_entries: 0,
        });
    }
    Ok(out)
}

/// Greedy/sampled generation with no cache: every step reruns the batch
/// forward over the full prefix. Framing, masking, halting and the step
/// count match `model::decode::generate` exactly, so the two must agree
/// token for token at temperature 0.
pub fn generate_recompute<R: Rng>(
    model: &ParameterSet,
    bundle: Option<&Array2<f64>>,
    max_faces: u64,
    temperature: f64,
    rng: &mut R,
) -> Result<GenerateOutput> {
    if max_faces == 0 {
        return Err(Error::Config("max_faces must be positive".into()));
    }
    let vocab = model.cfg.vocab();
    let mut fsm = order_fsm::new_state(vocab);
    let mut tokens: Vec<Token> = vec![vocab.s(); 9];
    let last_logits = |toks: &[Token]| -> Result<Array1<f64>> {
        let (logits, _) = forward(model, toks, 0, bundle)?;
        Ok(logits.row(toks.len() - 1).to_owned())
    };
    let mut logits = last_logits(&tokens)?;
    let mut steps = tokens.len();
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
        logits = last_logits(&tokens)?;
        steps = tokens.len();
    }
}

/// Mean per-position losses over equal-length sequences under two window
/// settings: the model's own (sliding) window and an effectively
/// unlimited one.
#[derive(Debug, Clone)]
pub struct SwaCurves {
    /// The model's sliding window (training context) in tokens.
    pub window: usize,
    /// Predicted token index; losses below are aligned to it.
    pub positions: Vec<usize>,
    pub swa_loss: Vec<f64>,
    pub unlimited_loss: Vec<f64>,
}

impl SwaCurves {
    pub fn csv(&self) -> String {
        let mut out = format!(
            "# window={}\nposition,loss_swa,loss_unlimited,ppl_swa,ppl_unlimited\n",
            self.window
        );
        for (i, &p) in self.positions.iter().enumerate() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                p,
                self.swa_loss[i],
                self.unlimited_loss[i],
                self.swa_loss[i].exp(),
                self.unlimited_loss[i].exp()
            ));
        }
        out
    }

    /// Mean loss over predicted positions in [lo, hi).
    pub fn mean_loss(&self, curve: &[f64], lo: usize, hi: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, &p) in self.positions.iter().enumerate() {
            if p >= lo && p < hi && curve[i].is_finite() {
                sum += curve[i];
                n += 1;
            }
        }
        sum / n as f64
    }
}

/// Evaluate every sequence (all the same length) under the model's own
/// window and under `unlimited_window` (a multiple of 9 at least the
/// sequence length), averaging losses per position. Each sequence brings
/// its own conditioning bundle (None throughout for unconditioned models).
pub fn swa_extrapolation(
    model: &ParameterSet,
    seqs: &[(Vec<Token>, Option<Array2<f64>>)],
    unlimited_window: usize,
) -> Result<SwaCurves> {
    let t = match seqs.first() {
        Some((s, _)) if !s.is_empty() => s.len(),
        _ => return Err(Error::Config("need non-empty evaluation sequences".into())),
    };
    if seqs.iter().any(|(s, _)| s.len() != t) {
        return Err(Error::Config("evaluation sequences must share one length".into()));
    }
    if unlimited_window < t {
        return Err(Error::Config(
            "unlimited window must cover the sequence length".into(),
        ));
    }
    let wide = model.with_window(unlimited_window)?;
    let mut swa_sum = vec![0.0f64; t];
    let mut wide_sum = vec![0.0f64; t];
    let mut counts = vec![0usize; t];
    for (s, bundle) in seqs {
        let a = sequence_losses(model, s, 0, bundle.as_ref())?;
        let b = sequence_losses(&wide, s, 0, bundle.as_ref())?;
        for j in 1..t {
            if a[j].is_finite() && b[j].is_finite() {
                swa_sum[j] += a[j];
                wide_sum[j] += b[j];
                counts[j] += 1;
            }
        }
    }
    let mut positions = Vec::new();
    let mut swa_loss = Vec::new();
    let mut unlimited_loss = Vec::new();
    for j in 1..t {
        if counts[j] > 0 {
            positions.push(j);
            swa_loss.push(swa_sum[j] / counts[j] as f64);
            unlimited_loss.push(wide_sum[j] / counts[j] as f64);
        }
    }
    Ok(SwaCurves {
        window: model.cfg.window,
        positions,
        swa_loss,
        unlimited_loss,
    })
}
