//! Binary corpus container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PHIC1"
//! u32 I, u32 F, u32 non_verbal_index
//! I x (u16 len, utf-8 label)
//! u32 n_utterances
//! per utterance:
//!   u16 len, utf-8 id
//!   u16 len, utf-8 speaker_id
//!   u32 T
//!   T*F x f32 (row-major)
//!   u32 n_segments
//!   n_segments x (u16 phoneme, u32 start, u32 end)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::inventory::{Alignment, PhonemeInventory, Segment, Utterance};

pub const CORPUS_MAGIC: &[u8; 5] = b"PHIC1";

pub fn encode_corpus(inventory: &PhonemeInventory, utterances: &[Utterance]) -> Result<Vec<u8>> {
    let dim = utterances.first().map_or(0, |u| u.dim());
    if let Some(u) = utterances.iter().find(|u| u.dim() != dim) {
        return Err(Error::InvalidUtterance {
            utterance: u.id.clone(),
            reason: format!("feature dimension {} differs from corpus F = {dim}", u.dim()),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    put_u32(&mut out, inventory.len())?;
    put_u32(&mut out, dim)?;
    put_u32(&mut out, inventory.non_verbal())?;
    for label in inventory.labels() {
        put_str(&mut out, label)?;
    }
    put_u32(&mut out, utterances.len())?;
    for u in utterances {
        put_str(&mut out, &u.id)?;
        put_str(&mut out, &u.speaker_id)?;
        put_u32(&mut out, u.n_frames())?;
        for v in u.frames() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let segs = u.alignment().segments();
        put_u32(&mut out, segs.len())?;
        for s in segs {
            let p = u16::try_from(s.phoneme)
                .map_err(|_| Error::Parse(format!("phoneme index {} exceeds u16", s.phoneme)))?;
            out.extend_from_slice(&p.to_le_bytes());
            put_u32(&mut out, s.start)?;
            put_u32(&mut out, s.end)?;
        }
    }
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<(PhonemeInventory, Vec<Utterance>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CORPUS_MAGIC.len())? != CORPUS_MAGIC {
        return Err(Error::BadMagic { expected: "PHIC1" });
    }
    let n_labels = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let non_verbal = r.u32()? as usize;
    let labels = (0..n_labels).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let inventory = PhonemeInventory::new(labels, non_verbal)?;
    let n_utts = r.u32()? as usize;
    let mut utterances = Vec::with_capacity(n_utts.min(1 << 16));
    for _ in 0..n_utts {
        let id = r.string()?;
        let speaker = r.string()?;
        let n_frames = r.u32()? as usize;
        let n_values = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Error::Parse(format!("utterance {id}: frame count overflow")))?;
        let raw = r.take(n_values * 4)?;
        let frames = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let n_segs = r.u32()? as usize;
        let mut segments = Vec::with_capacity(n_segs.min(1 << 16));
        for _ in 0..n_segs {
            let p = r.u16()? as usize;
            let start = r.u32()? as usize;
            let end = r.u32()? as usize;
            segments.push(Segment::new(p, start, end));
        }
        utterances.push(Utterance::new(
            id,
            speaker,
            dim,
            frames,
            Alignment::new(segments),
            inventory.len(),
        )?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok((inventory, utterances))
}

pub fn save_corpus(
    inventory: &PhonemeInventory,
    utterances: &[Utterance],
    path: &Path,
) -> Result<()> {
    write_atomic(path, &encode_corpus(inventory, utterances)?)
}

pub fn load_corpus(path: &Path) -> Result<(PhonemeInventory, Vec<Utterance>)> {
    decode_corpus(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Parse(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Parse(format!("string of {} bytes exceeds u16 length", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Parse(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Parse(e.to_string()))
    }
}
