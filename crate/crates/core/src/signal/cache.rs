//! `TSEG1` segment cache: magic, `u16 n_channels`, `u32 n_samples`, then per segment
//! `u16 id_len | id | f64 t_start | u8 label | f32 payload`, little-endian.

use std::io::{Read, Write};
use std::sync::Arc;

use super::{LabeledSegment, SignalError};
use crate::protocol::Label;

pub const SEGMENT_MAGIC: &[u8; 5] = b"TSEG1";

/// Streams segments of a fixed shape into a cache.
pub struct SegmentCacheWriter<W: Write> {
    w: W,
    n_channels: usize,
    n_samples: usize,
    count: usize,
}

impl<W: Write> SegmentCacheWriter<W> {
    pub fn new(mut w: W, n_channels: usize, n_samples: usize) -> Result<Self, SignalError> {
        w.write_all(SEGMENT_MAGIC)?;
        w.write_all(&(n_channels as u16).to_le_bytes())?;
        w.write_all(&(n_samples as u32).to_le_bytes())?;
        Ok(Self {
            w,
            n_channels,
            n_samples,
            count: 0,
        })
    }

    pub fn push(&mut self, s: &LabeledSegment) -> Result<(), SignalError> {
        if s.n_channels != self.n_channels || s.n_samples() != self.n_samples {
            return Err(SignalError::Cache("segments differ in shape".into()));
        }
        let id = s.subject_id.as_bytes();
        let mut buf = Vec::with_capacity(11 + id.len() + s.data.len() * 4);
        buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&s.t_start.to_le_bytes());
        buf.push(s.label.as_u8());
        for v in &s.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.w.write_all(&buf)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<W, SignalError> {
        self.w.flush()?;
        Ok(self.w)
    }
}

pub fn write_segment_cache<W: Write>(w: W, segments: &[LabeledSegment]) -> Result<(), SignalError> {
    let (c, n) = segments.first().map_or((0, 0), |s| (s.n_channels, s.n_samples()));
    let mut out = SegmentCacheWriter::new(w, c, n)?;
    for s in segments {
        out.push(s)?;
    }
    out.finish()?;
    Ok(())
}

pub fn read_segment_cache<R: Read>(mut r: R) -> Result<Vec<LabeledSegment>, SignalError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 11 || &bytes[..5] != SEGMENT_MAGIC {
        return Err(SignalError::Cache("unknown magic".into()));
    }
    let c = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let n = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let mut cur = Cursor { bytes: &bytes, pos: 11 };
    let mut out = Vec::new();
    let mut last_id: Option<Arc<str>> = None;
    while cur.pos < bytes.len() {
        let len = cur.take(2)?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let id = std::str::from_utf8(cur.take(len)?).map_err(|_| SignalError::Cache("non-UTF-8 subject id".into()))?;
        let subject_id = match &last_id {
            Some(prev) if &**prev == id => prev.clone(),
            _ => Arc::from(id),
        };
        last_id = Some(subject_id.clone());
        let t_start = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let label = Label::from_u8(cur.take(1)?[0]).ok_or_else(|| SignalError::Cache("bad label byte".into()))?;
        let data = cur.take(c * n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(LabeledSegment {
            subject_id,
            t_start,
            label,
            n_channels: c,
            data,
        });
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], SignalError> {
        if self.pos + len > self.bytes.len() {
            return Err(SignalError::Cache(format!("truncated at byte {}", self.pos)));
        }
        self.pos += len;
        Ok(&self.bytes[self.pos - len..self.pos])
    }
}
