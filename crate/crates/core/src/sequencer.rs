//! Canonical mesh-sequence codec.
//!
//! A mesh becomes a flat token stream: 9 start tokens, then for each face
//! three vertices, each emitted as (y, z, x), then 9 end tokens, then
//! optional padding. Vertices within a face are sorted ascending by the
//! (y, z, x) key and faces are sorted ascending by their concatenated
//! 9-tuples, so the stream is a deterministic function of the face set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::QuantizedMesh;

pub type Token = u16;

/// Token-id layout for a given quantization level: coordinates occupy
/// 0..Q-1, then S = Q, E = Q+1, P = Q+2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub quant_level: u32,
}

impl VocabSpec {
    pub fn new(quant_level: u32) -> Self {
        VocabSpec { quant_level }
    }
    pub fn s(&self) -> Token {
        self.quant_level as Token
    }
    pub fn e(&self) -> Token {
        (self.quant_level + 1) as Token
    }
    pub fn p(&self) -> Token {
        (self.quant_level + 2) as Token
    }
    pub fn vocab_size(&self) -> usize {
        self.quant_level as usize + 3
    }
    pub fn is_coord(&self, t: Token) -> bool {
        (t as u32) < self.quant_level
    }
}

/// A token stream under a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub vocab: VocabSpec,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    /// Validate the framing layout and return the coordinate block.
    ///
    /// Layout: exactly 9 leading S, a coordinate block whose length is a
    /// multiple of 9, exactly 9 E, then zero or more P.
    pub fn coordinate_tokens(&self) -> Result<&[Token]> {
        let v = self.vocab;
        let t = &self.tokens;
        if let Some(&bad) = t.iter().find(|&&tok| tok as usize >= v.vocab_size()) {
            return Err(Error::Framing(format!(
                "token id {bad} outside vocabulary of size {}",
                v.vocab_size()
            )));
        }
        if t.len() < 18 {
            return Err(Error::Framing(format!(
                "sequence too short ({} tokens) for S/E framing",
                t.len()
            )));
        }
        if t[..9].iter().any(|&tok| tok != v.s()) {
            return Err(Error::Framing("sequence must begin with 9 S tokens".into()));
        }
        let body = &t[9..];
        let e_start = body
            .iter()
            .position(|&tok| tok == v.e())
            .ok_or_else(|| Error::Framing("no E group found".into()))?;
        let coords = &body[..e_start];
        if coords.len() % 9 != 0 {
            return Err(Error::Framing(format!(
                "coordinate block length {} not a multiple of 9",
                coords.len()
            )));
        }
        if let Some(&bad) = coords.iter().find(|&&tok| !v.is_coord(tok)) {
            return Err(Error::Framing(format!(
                "special token {bad} inside coordinate block"
            )));
        }
        if body.len() < e_start + 9 || body[e_start..e_start + 9].iter().any(|&tok| tok != v.e()) {
            return Err(Error::Framing("E group must be 9 consecutive E tokens".into()));
        }
        if body[e_start + 9..].iter().any(|&tok| tok != v.p()) {
            return Err(Error::Framing("only P tokens may follow the E group".into()));
        }
        Ok(coords)
    }

    pub fn face_count(&self) -> Result<usize> {
        Ok(self.coordinate_tokens()?.len() / 9)
    }
}

/// One face as three vertices in canonical order; vertices stored (x,y,z).
pub type OrderedFace = [[u32; 3]; 3];

fn face_key(face: &OrderedFace) -> [u32; 9] {
    let mut key = [0u32; 9];
    for (i, v) in face.iter().enumerate() {
        key[3 * i] = v[1];
        key[3 * i + 1] = v[2];
        key[3 * i + 2] = v[0];
    }
    key
}

/// Sort vertices within each face by (y, z, x), sort faces by their
/// 9-tuple keys, and drop exact duplicates. Winding is discarded.
pub fn canonical_order(mesh: &QuantizedMesh) -> Vec<OrderedFace> {
    let mut faces: Vec<OrderedFace> = mesh
        .faces
        .iter()
        .map(|f| {
            let mut vs = [
                mesh.vertices[f[0] as usize],
                mesh.vertices[f[1] as usize],
                mesh.vertices[f[2] as usize],
            ];
            vs.sort_by_key(|v| (v[1], v[2], v[0]));
            vs
        })
        .collect();
    faces.sort_by_key(face_key);
    faces.dedup_by_key(|f| face_key(f));
    faces
}

/// Serialize a mesh to its canonical token sequence: length 18 + 9N.
pub fn encode(mesh: &QuantizedMesh) -> Result<TokenSequence> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh);
    }
    mesh.validate()?;
    let vocab = VocabSpec::new(mesh.quant_level);
    let ordered = canonical_order(mesh);
    let mut tokens = Vec::with_capacity(18 + 9 * ordered.len());
    tokens.extend(std::iter::repeat(vocab.s()).take(9));
    for face in &ordered {
        for v in face {
            tokens.push(v[1] as Token);
            tokens.push(v[2] as Token);
            tokens.push(v[0] as Token);
        }
    }
    tokens.extend(std::iter::repeat(vocab.e()).take(9));
    Ok(TokenSequence { vocab, tokens })
}

/// Rebuild the mesh from a well-framed sequence. Identical vertices merge
/// to one index; faces that collapse or duplicate an earlier face are
/// dropped so the result always satisfies the QuantizedMesh invariants.
pub fn decode(seq: &TokenSequence) -> Result<QuantizedMesh> {
    let coords = seq.coordinate_tokens()?;
    let mut vertices: Vec<[u32; 3]> = Vec::new();
    let mut index: std::collections::HashMap<[u32; 3], u32> = std::collections::HashMap::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut seen: std::collections::HashSet<[u32; 3]> = std::collections::HashSet::new();

    for group in coords.chunks_exact(9) {
        let mut tri = [0u32; 3];
        for (i, v) in group.chunks_exact(3).enumerate() {
            let pos = [v[2] as u32, v[0] as u32, v[1] as u32]; // (y,z,x) -> (x,y,z)
            let idx = *index.entry(pos).or_insert_with(|| {
                vertices.push(pos);
                (vertices.len() - 1) as u32
            });
            tri[i] = idx;
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            continue;
        }
        let mut key = tri;
        key.sort_unstable();
        if !seen.insert(key) {
            continue;
        }
        faces.push(tri);
    }

    let mesh = QuantizedMesh {
        quant_level: seq.vocab.quant_level,
        vertices,
        faces,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// One fixed-length training segment with its absolute token offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub tokens: Vec<Token>,
}

/// Split a sequence into window-length segments at offsets 0, stride,
/// 2*stride, ... A new offset is emitted only while the previous segment
/// stopped short of the sequence end; the last segment is P-padded to the
/// full window.
pub fn chunk(seq: &TokenSequence, window: usize, stride: usize) -> Result<Vec<Segment>> {
    if window < 9 || window % 9 != 0 {
        return Err(Error::Config(format!(
            "window {window} must be a positive multiple of 9"
        )));
    }
    if stride == 0 || stride % 9 != 0 {
        return Err(Error::Config(format!(
            "stride {stride} must be a positive multiple of 9"
        )));
    }
    let len = seq.tokens.len();
    let pad = seq.vocab.p();
    let mut segments = Vec::new();
    let mut offset = 0usize;
    loop {
        if offset != 0 && offset.saturating_sub(stride) + window >= len {
            break; // previous segment already reached the end
        }
        if offset >= len {
            break;
        }
        let end = (offset + window).min(len);
        let mut tokens = seq.tokens[offset..end].to_vec();
        tokens.resize(window, pad);
        segments.push(Segment {
            start: offset,
            tokens,
        });
        offset += stride;
    }
    Ok(segments)
}
