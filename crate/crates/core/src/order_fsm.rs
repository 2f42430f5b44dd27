//! Incremental validity machine for the canonical sequence ordering.
//!
//! During generation every next token must keep the stream decodable into a
//! canonically ordered mesh: vertices inside a face ascend non-strictly by
//! their (y,z,x) keys, faces ascend strictly by their 9-tuples, E may start
//! only where a new face could start, and S/P never appear mid-stream. The
//! machine tracks just the current/previous face prefixes plus two tie
//! flags; the valid coordinate set at any position is the contiguous
//! interval [lb, Q-1].

use rand::Rng;

use crate::error::{Error, Result};
use crate::sequencer::{Token, TokenSequence, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    InFace,
    InESuffix,
    Done,
}

/// Decoder state between the S prefix (fixed context, not fed through the
/// machine) and the end of the E group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderState {
    vocab: VocabSpec,
    phase: Phase,
    faces_emitted: u64,
    pos_in_face: usize,
    current: [Token; 9],
    prev_face: Option<[Token; 9]>,
    /// Current face prefix still equals prev_face's prefix.
    face_tied: bool,
    /// Current vertex prefix still equals the previous in-face vertex's.
    vertex_tied: bool,
    e_seen: usize,
    tokens_seen: u64,
}

/// Valid next-token set: either a coordinate interval (plus optionally E)
/// or, inside the E suffix, only E. `lb == Q` encodes an empty interval,
/// which is reachable (fully tied face whose final slot is already Q-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidSet {
    Coords { lb: u32, e_allowed: bool },
    EndOnly,
}

impl ValidSet {
    pub fn contains(&self, token: Token, vocab: VocabSpec) -> bool {
        match *self {
            ValidSet::Coords { lb, e_allowed } => {
                (vocab.is_coord(token) && token as u32 >= lb)
                    || (e_allowed && token == vocab.e())
            }
            ValidSet::EndOnly => token == vocab.e(),
        }
    }

    /// Number of valid token ids under the full vocabulary.
    pub fn len(&self, vocab: VocabSpec) -> usize {
        match *self {
            ValidSet::Coords { lb, e_allowed } => {
                (vocab.quant_level.saturating_sub(lb)) as usize + usize::from(e_allowed)
            }
            ValidSet::EndOnly => 1,
        }
    }

    pub fn is_empty(&self, vocab: VocabSpec) -> bool {
        self.len(vocab) == 0
    }
}

pub fn new_state(vocab: VocabSpec) -> DecoderState {
    DecoderState {
        vocab,
        phase: Phase::InFace,
        faces_emitted: 0,
        pos_in_face: 0,
        current: [0; 9],
        prev_face: None,
        face_tied: false,
        vertex_tied: false,
        e_seen: 0,
        tokens_seen: 0,
    }
}

impl DecoderState {
    pub fn faces_emitted(&self) -> u64 {
        self.faces_emitted
    }
    pub fn pos_in_face(&self) -> usize {
        self.pos_in_face
    }
    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }
    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }
    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    /// Lower bound of the valid coordinate interval at the current slot:
    /// the max over the vertex-tie bound (non-strict) and the face-tie
    /// bound (strict at the final slot).
    fn lower_bound(&self) -> u32 {
        let s = self.pos_in_face;
        let mut lb = 0u32;
        if self.vertex_tied && s >= 3 {
            lb = lb.max(self.current[s - 3] as u32);
        }
        if self.face_tied {
            if let Some(prev) = &self.prev_face {
                let mut b = prev[s] as u32;
                if s == 8 {
                    b += 1;
                }
                lb = lb.max(b);
            }
        }
        lb
    }

    pub fn valid_set(&self) -> Result<ValidSet> {
        match self.phase {
            Phase::InFace => Ok(ValidSet::Coords {
                lb: self.lower_bound(),
                e_allowed: self.pos_in_face == 0 && self.faces_emitted >= 1,
            }),
            Phase::InESuffix => Ok(ValidSet::EndOnly),
            Phase::Done => Err(Error::Framing(
                "valid_set called on a finished decoder state".into(),
            )),
        }
    }

    /// Consume one token, updating prefixes and tie flags. Rejects any
    /// token outside `valid_set`, reporting the position and bound.
    pub fn advance(&mut self, token: Token) -> Result<()> {
        let vs = self.valid_set()?;
        if !vs.contains(token, self.vocab) {
            let lb = match vs {
                ValidSet::Coords { lb, .. } => lb,
                ValidSet::EndOnly => self.vocab.e() as u32,
            };
            return Err(Error::TokenRejected {
                position: self.tokens_seen,
                token,
                lower_bound: lb,
            });
        }
        self.tokens_seen += 1;
        match self.phase {
            Phase::InFace => {
                if token == self.vocab.e() {
                    self.phase = Phase::InESuffix;
                    self.e_seen = 1;
                    return Ok(());
                }
                let s = self.pos_in_face;
                if s >= 3 {
                    self.vertex_tied = self.vertex_tied && token == self.current[s - 3];
                }
                if let Some(prev) = &self.prev_face {
                    self.face_tied = self.face_tied && token == prev[s];
                }
                self.current[s] = token;
                if s == 8 {
                    self.prev_face = Some(self.current);
                    self.faces_emitted += 1;
                    self.pos_in_face = 0;
                    self.face_tied = true;
                    self.vertex_tied = false;
                } else {
                    self.pos_in_face = s + 1;
                    if self.pos_in_face % 3 == 0 {
                        self.vertex_tied = true; // new vertex, chain vacuously alive
                    }
                }
                Ok(())
            }
            Phase::InESuffix => {
                self.e_seen += 1;
                if self.e_seen == 9 {
                    self.phase = Phase::Done;
                }
                Ok(())
            }
            Phase::Done => unreachable!("valid_set already errored"),
        }
    }
}

/// Sample a token with invalid ids hard-masked to probability zero.
/// `temperature <= 0` is the greedy limit (argmax over the valid set, ties
/// to the lowest id). Deterministic for a fixed rng stream.
pub fn masked_sample<R: Rng>(
    logits: &[f64],
    state: &DecoderState,
    temperature: f64,
    rng: &mut R,
) -> Result<Token> {
    let vocab = state.vocab;
    if logits.len() != vocab.vocab_size() {
        return Err(Error::Shape(format!(
            "logits length {} != vocab size {}",
            logits.len(),
            vocab.vocab_size()
        )));
    }
    let vs = state.valid_set()?;
    let valid: Vec<Token> = match vs {
        ValidSet::Coords { lb, e_allowed } => {
            let mut ids: Vec<Token> =
                (lb..vocab.quant_level).map(|t| t as Token).collect();
            if e_allowed {
                ids.push(vocab.e());
            }
            ids
        }
        ValidSet::EndOnly => vec![vocab.e()],
    };
    if valid.is_empty() {
        return Err(Error::DegenerateDistribution);
    }

    if temperature <= 0.0 {
        let mut best = valid[0];
        let mut best_logit = f64::NEG_INFINITY;
        for &t in &valid {
            let l = logits[t as usize];
            if l > best_logit {
                best_logit = l;
                best = t;
            }
        }
        if best_logit == f64::NEG_INFINITY {
            return Err(Error::DegenerateDistribution);
        }
        return Ok(best);
    }

    let max = valid
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateDistribution);
    }
    let weights: Vec<f64> = valid
        .iter()
        .map(|&t| ((logits[t as usize] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(valid[i]);
        }
    }
    Ok(*valid.last().unwrap())
}

/// Mean (and per-slot) fraction of the (Q+3)-way distribution pruned by the
/// machine, over every coordinate position of every sequence. S and P are
/// always invalid (+2); E adds one more wherever it is disallowed; coords
/// below lb add lb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvalidStats {
    pub mean: f64,
    pub per_slot: [f64; 9],
    pub positions: u64,
}

pub fn invalid_fraction(sequences: &[TokenSequence], quant_level: u32) -> Result<InvalidStats> {
    let mut sum = 0.0f64;
    let mut slot_sum = [0.0f64; 9];
    let mut slot_count = [0u64; 9];
    let mut positions = 0u64;

    for seq in sequences {
        if seq.vocab.quant_level != quant_level {
            return Err(Error::Config(format!(
                "sequence quantization level {} != requested {}",
                seq.vocab.quant_level, quant_level
            )));
        }
        let vocab = seq.vocab;
        let denom = vocab.vocab_size() as f64;
        let coords = seq.coordinate_tokens()?;
        let mut state = new_state(vocab);
        for &t in coords {
            let ValidSet::Coords { lb, e_allowed } = state.valid_set()? else {
                unreachable!("coordinate stream stays in face phase")
            };
            let invalid = lb as f64 + f64::from(!e_allowed) + 2.0;
            let slot = state.pos_in_face();
            sum += invalid / denom;
            slot_sum[slot] += invalid / denom;
            slot_count[slot] += 1;
            positions += 1;
            state.advance(t)?;
        }
        for _ in 0..9 {
            state.advance(vocab.e())?;
        }
    }

    if positions == 0 {
        return Err(Error::Framing(
            "no coordinate positions in the input set".into(),
        ));
    }
    let mut per_slot = [0.0f64; 9];
    for k in 0..9 {
        per_slot[k] = if slot_count[k] == 0 {
            0.0
        } else {
            slot_sum[k] / slot_count[k] as f64
        };
    }
    Ok(InvalidStats {
        mean: sum / positions as f64,
        per_slot,
        positions,
    })
}

/// Replay a full sequence through the machine; Ok(faces) on acceptance.
pub fn validate_sequence(seq: &TokenSequence) -> Result<u64> {
    let coords = seq.coordinate_tokens()?;
    let mut state = new_state(seq.vocab);
    for &t in coords {
        state.advance(t)?;
    }
    for _ in 0..9 {
        state.advance(seq.vocab.e())?;
    }
    debug_assert!(state.is_done());
    Ok(state.faces_emitted())
}

/// Brute-force re-validation oracle, written independently of the
/// incremental machine: a candidate is valid iff appending it leaves the
/// coordinate stream consistent with canonical ordering. Used by tests to
/// verify the interval property; O(prefix) per candidate.
pub mod oracle {
    use super::*;

    /// Structural consistency of a bare coordinate-token prefix.
    pub fn coords_prefix_ok(coords: &[Token], vocab: VocabSpec) -> bool {
        if coords.iter().any(|&t| !vocab.is_coord(t)) {
            return false;
        }
        let chunks: Vec<&[Token]> = coords.chunks(9).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            // vertex ordering inside this (possibly partial) face:
            // consecutive vertex triples non-strictly ascending, partial
            // vertex compared prefix-wise against its predecessor
            for v in 1..3 {
                let lo = 3 * v;
                if chunk.len() <= lo {
                    break;
                }
                let upper = chunk.len().min(lo + 3);
                let prev = &chunk[lo - 3..lo];
                let cur = &chunk[lo..upper];
                let k = cur.len();
                if cur < &prev[..k] {
                    return false;
                }
            }
            // face ordering against the previous (complete) face
            if i > 0 {
                let prev = chunks[i - 1];
                let k = chunk.len();
                if k == 9 {
                    if *chunk <= prev {
                        return false; // strict ascent between complete faces
                    }
                } else if *chunk < &prev[..k] {
                    return false;
                }
            }
        }
        true
    }

    /// All token ids the ordering admits after `coords` (no E seen yet).
    pub fn valid_next_tokens(coords: &[Token], vocab: VocabSpec) -> Vec<Token> {
        debug_assert!(coords_prefix_ok(coords, vocab));
        let mut out = Vec::new();
        for t in 0..vocab.vocab_size() as Token {
            if t == vocab.s() || t == vocab.p() {
                continue;
            }
            if t == vocab.e() {
                if coords.len() % 9 == 0 && coords.len() >= 9 {
                    out.push(t);
                }
                continue;
            }
            let mut extended = coords.to_vec();
            extended.push(t);
            if coords_prefix_ok(&extended, vocab) {
                out.push(t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v16() -> VocabSpec {
        VocabSpec::new(16)
    }

    fn advanced(vocab: VocabSpec, tokens: &[Token]) -> DecoderState {
        let mut st = new_state(vocab);
        for &t in tokens {
            st.advance(t).unwrap();
        }
        st
    }

    #[test]
    fn fresh_state_admits_full_range_no_e() {
        let st = new_state(v16());
        assert_eq!(
            st.valid_set().unwrap(),
            ValidSet::Coords {
                lb: 0,
                e_allowed: false
            }
        );
    }

    #[test]
    fn vertex_tie_bound_from_worked_example() {
        // first face, v0=(0,9,3), v1=(1,2,0); at v2's first slot lb = 1
        let st = advanced(v16(), &[0, 9, 3, 1, 2, 0]);
        assert_eq!(
            st.valid_set().unwrap(),
            ValidSet::Coords {
                lb: 1,
                e_allowed: false
            }
        );
        // emitting 3 > 1 breaks the chain: next slot lb = 0
        let st = advanced(v16(), &[0, 9, 3, 1, 2, 0, 3]);
        assert_eq!(
            st.valid_set().unwrap(),
            ValidSet::Coords {
                lb: 0,
                e_allowed: false
            }
        );
    }

    #[test]
    fn face_tie_bound_is_strict_at_final_slot() {
        let face = [0, 9, 3, 1, 2, 0, 1, 2, 5];
        let mut tokens = face.to_vec();
        tokens.extend(&face[..8]); // second face tied through 8 slots
        let st = advanced(v16(), &tokens);
        assert_eq!(
            st.valid_set().unwrap(),
            ValidSet::Coords {
                lb: 6, // = 5 + 1
                e_allowed: false
            }
        );
    }

    #[test]
    fn e_allowed_only_at_face_start_after_first_face() {
        let face = [0, 9, 3, 1, 2, 0, 1, 2, 5];
        let st = advanced(v16(), &face);
        match st.valid_set().unwrap() {
            ValidSet::Coords { e_allowed, .. } => assert!(e_allowed),
            _ => panic!(),
        }
        // E mid-face rejected
        let mut st = advanced(v16(), &face[..3]);
        assert!(matches!(
            st.advance(v16().e()),
            Err(Error::TokenRejected { .. })
        ));
        // S and P always rejected
        let mut st = advanced(v16(), &face);
        assert!(st.clone().advance(v16().s()).is_err());
        assert!(st.advance(v16().p()).is_err());
    }

    #[test]
    fn rejection_carries_position_and_bound() {
        let mut st = advanced(v16(), &[0, 9, 3, 1, 2, 0]);
        match st.advance(0) {
            Err(Error::TokenRejected {
                position,
                token,
                lower_bound,
            }) => {
                assert_eq!(position, 6);
                assert_eq!(token, 0);
                assert_eq!(lower_bound, 1);
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn e_suffix_runs_to_done() {
        let face = [0, 9, 3, 1, 2, 0, 1, 2, 5];
        let mut st = advanced(v16(), &face);
        for _ in 0..9 {
            st.advance(v16().e()).unwrap();
        }
        assert!(st.is_done());
        assert!(st.valid_set().is_err());
        assert_eq!(st.faces_emitted(), 1);
    }

    #[test]
    fn encoder_output_is_always_accepted() {
        use crate::mesh::{normalize, quantize};
        use crate::procgen::{gen_procedural, GenSpec};
        use crate::sequencer::encode;
        let spec = GenSpec::default();
        for seed in 0..30u64 {
            let raw = normalize(&gen_procedural(seed, &spec)).unwrap();
            let (qm, _) = quantize(&raw, 64).unwrap();
            if qm.faces.is_empty() {
                continue;
            }
            let seq = encode(&qm).unwrap();
            let faces = validate_sequence(&seq).unwrap();
            assert_eq!(faces as usize, qm.faces.len());
        }
    }

    #[test]
    fn dead_end_is_reachable_and_degenerate() {
        let vocab = VocabSpec::new(4);
        let mut tokens = vec![3; 9]; // face (3,3,3)x3: vertices tie non-strictly
        tokens.extend([3; 8]); // second face tied through slot 7
        let st = advanced(vocab, &tokens);
        let vs = st.valid_set().unwrap();
        assert_eq!(
            vs,
            ValidSet::Coords {
                lb: 4,
                e_allowed: false
            }
        );
        assert!(vs.is_empty(vocab));
        let logits = vec![0.0; vocab.vocab_size()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            masked_sample(&logits, &st, 1.0, &mut rng),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn masked_sample_respects_bounds() {
        let vocab = v16();
        let st = advanced(vocab, &[0, 9, 3, 1, 2, 0]); // lb = 1
        let logits = vec![0.0; vocab.vocab_size()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let t = masked_sample(&logits, &st, 1.0, &mut rng).unwrap();
            assert!(vocab.is_coord(t) && t >= 1);
        }
    }

    #[test]
    fn masked_sample_greedy_and_single_token_limits() {
        let vocab = v16();
        let st = new_state(vocab);
        let mut logits = vec![0.0; vocab.vocab_size()];
        logits[5] = 3.0;
        logits[vocab.s() as usize] = 100.0; // invalid, must be ignored
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(masked_sample(&logits, &st, 0.0, &mut rng).unwrap(), 5);

        // only E valid inside the suffix
        let face = [0, 9, 3, 1, 2, 0, 1, 2, 5];
        let mut st = advanced(vocab, &face);
        st.advance(vocab.e()).unwrap();
        for _ in 0..1000 {
            let t = masked_sample(&logits, &st, 2.0, &mut rng).unwrap();
            assert_eq!(t, vocab.e());
        }
    }

    #[test]
    fn masked_sample_errors_on_all_masked_logits() {
        let vocab = v16();
        let st = new_state(vocab);
        let logits = vec![f64::NEG_INFINITY; vocab.vocab_size()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            masked_sample(&logits, &st, 1.0, &mut rng),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn invalid_fraction_closed_form_single_face() {
        // Constructed so every slot's lower bound is 0: fraction is exactly
        // 3/(Q+3) (S, P, and disallowed E pruned at all 9 slots).
        let vocab = v16();
        let coords = [0, 0, 0, 0, 0, 1, 0, 1, 0];
        let mut tokens = vec![vocab.s(); 9];
        tokens.extend(coords);
        tokens.extend([vocab.e(); 9]);
        let seq = TokenSequence { vocab, tokens };
        let stats = invalid_fraction(&[seq], 16).unwrap();
        assert_eq!(stats.positions, 9);
        assert!((stats.mean - 3.0 / 19.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_fraction_reports_first_violation() {
        let vocab = v16();
        let mut tokens = vec![vocab.s(); 9];
        tokens.extend([5, 0, 0, 2, 0, 0, 0, 0, 0]); // slot 3: lb=5, token 2
        tokens.extend([vocab.e(); 9]);
        let seq = TokenSequence { vocab, tokens };
        match invalid_fraction(&[seq], 16) {
            Err(Error::TokenRejected { position, .. }) => assert_eq!(position, 3),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn interval_property_matches_oracle_on_random_walks() {
        let vocab = VocabSpec::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let mut st = new_state(vocab);
            let mut coords: Vec<Token> = Vec::new();
            for _ in 0..40 {
                let vs = st.valid_set().unwrap();
                let expected = oracle::valid_next_tokens(&coords, vocab);
                let got: Vec<Token> = (0..vocab.vocab_size() as Token)
                    .filter(|&t| vs.contains(t, vocab))
                    .collect();
                assert_eq!(got, expected, "prefix {coords:?}");
                // walk a random valid coordinate (avoid ending on E)
                let coord_choices: Vec<Token> = expected
                    .iter()
                    .copied()
                    .filter(|&t| vocab.is_coord(t))
                    .collect();
                if coord_choices.is_empty() {
                    break; // dead end: oracle agreed it is empty (minus E)
                }
                let pick = coord_choices[rng.gen_range(0..coord_choices.len())];
                st.advance(pick).unwrap();
                coords.push(pick);
            }
        }
    }

    #[test]
    fn random_walk_sequences_decode_canonically() {
        use crate::sequencer::{decode, encode};
        let vocab = VocabSpec::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let mut st = new_state(vocab);
            let mut tokens = vec![vocab.s(); 9];
            let logits = vec![0.0; vocab.vocab_size()];
            let mut boundary = (st.clone(), tokens.len());
            loop {
                let t = match masked_sample(&logits, &st, 1.0, &mut rng) {
                    Ok(t) => t,
                    Err(Error::DegenerateDistribution) => {
                        // mid-face dead end: drop the partial face
                        let (bst, blen) = boundary.clone();
                        st = bst;
                        tokens.truncate(blen);
                        break;
                    }
                    Err(e) => panic!("{e}"),
                };
                st.advance(t).unwrap();
                tokens.push(t);
                if t == vocab.e() {
                    break;
                }
                if st.pos_in_face() == 0 {
                    boundary = (st.clone(), tokens.len());
                    if st.faces_emitted() >= 12 {
                        break;
                    }
                }
            }
            // close the frame
            while !st.is_done() {
                st.advance(vocab.e()).unwrap();
                tokens.push(vocab.e());
            }
            let seq = TokenSequence { vocab, tokens };
            let mesh = decode(&seq).unwrap();
            mesh.validate().unwrap();
            if !mesh.faces.is_empty() {
                // re-encoding the decoded mesh must be FSM-clean
                validate_sequence(&encode(&mesh).unwrap()).unwrap();
            }
            let _ = trial;
        }
    }
}
