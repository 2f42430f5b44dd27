//! Binary token-sequence container.
//!
//! Little-endian layout: magic "MTOK", format version u32, quantization
//! level u32, token count u64, then count u16 token ids. Content framing is
//! not checked here; readers that need a well-formed sequence validate via
//! `TokenSequence::coordinate_tokens` or the decoder state machine.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequencer::{Token, TokenSequence, VocabSpec};

const MAGIC: &[u8; 4] = b"MTOK";
const VERSION: u32 = 1;

pub fn write_mtok<W: Write>(mut w: W, seq: &TokenSequence) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&seq.vocab.quant_level.to_le_bytes())?;
    w.write_all(&(seq.tokens.len() as u64).to_le_bytes())?;
    for &t in &seq.tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mtok<R: Read>(mut r: R) -> Result<TokenSequence> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Framing(format!(
            "bad magic {magic:?}, expected \"MTOK\""
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Framing(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    r.read_exact(&mut buf4)?;
    let quant_level = u32::from_le_bytes(buf4);
    if quant_level < 2 {
        return Err(Error::Framing(format!(
            "invalid quantization level {quant_level}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut payload = vec![0u8; count * 2];
    r.read_exact(&mut payload)?;
    let tokens: Vec<Token> = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(TokenSequence {
        vocab: VocabSpec::new(quant_level),
        tokens,
    })
}

pub fn save_mtok(path: &Path, seq: &TokenSequence) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mtok(&mut file, seq)?;
    file.flush()?;
    Ok(())
}

pub fn load_mtok(path: &Path) -> Result<TokenSequence> {
    read_mtok(std::io::BufReader::new(std::fs::File::open(path)?))
}
