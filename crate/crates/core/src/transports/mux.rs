//! Stream multiplexing with per-frame sequence numbers and checksums.
//!
//! Wire format: `stream u16 | seq u32 | len u16 | crc32 u32 | payload`, all
//! big-endian. The checksum covers the first eight header bytes and the
//! payload.

use std::collections::{BTreeMap, HashMap};

use crate::error::LayerError;
use crate::model::LayerKind;
use crate::transports::StreamLayer;

pub const HEADER_LEN: usize = 12;
pub const MAX_FRAME_PAYLOAD: usize = 16 * 1024;
/// Frames further than this ahead of the next expected one are an error.
pub const REORDER_WINDOW: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub stream: u16,
    pub seq: u32,
    pub payload: Vec<u8>,
}

fn checksum(stream: u16, seq: u32, len: u16, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&stream.to_be_bytes());
    h.update(&seq.to_be_bytes());
    h.update(&len.to_be_bytes());
    h.update(payload);
    h.finalize()
}

impl Frame {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let len = self.payload.len() as u16;
        out.extend_from_slice(&self.stream.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&checksum(self.stream, self.seq, len, &self.payload).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.encode_into(&mut out);
        out
    }
}

/// Result of parsing one frame off the front of a buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Parsed {
    Incomplete,
    /// A frame and the number of bytes it occupied.
    Frame(Frame, usize),
    /// A checksum mismatch; the bytes it occupied.
    Corrupt(usize),
}

pub fn parse_frame(buf: &[u8]) -> Parsed {
    if buf.len() < HEADER_LEN {
        return Parsed::Incomplete;
    }
    let stream = u16::from_be_bytes([buf[0], buf[1]]);
    let seq = u32::from_be_bytes([buf[2], buf[3], buf[4], buf[5]]);
    let len = u16::from_be_bytes([buf[6], buf[7]]);
    let crc = u32::from_be_bytes([buf[8], buf[9], buf[10], buf[11]]);
    let total = HEADER_LEN + len as usize;
    if buf.len() < total {
        return Parsed::Incomplete;
    }
    let payload = &buf[HEADER_LEN..total];
    if checksum(stream, seq, len, payload) != crc {
        return Parsed::Corrupt(total);
    }
    Parsed::Frame(
        Frame {
            stream,
            seq,
            payload: payload.to_vec(),
        },
        total,
    )
}

/// Assigns per-stream sequence numbers.
#[derive(Debug, Default)]
pub struct Framer {
    next_seq: HashMap<u16, u32>,
}

impl Framer {
    /// Splits `data` into frames on `stream`. Empty data yields no frames.
    pub fn frame(&mut self, stream: u16, data: &[u8]) -> Vec<Frame> {
        let seq = self.next_seq.entry(stream).or_insert(0);
        data.chunks(MAX_FRAME_PAYLOAD)
            .map(|chunk| {
                let f = Frame {
                    stream,
                    seq: *seq,
                    payload: chunk.to_vec(),
                };
                *seq = seq.wrapping_add(1);
                f
            })
            .collect()
    }
}

/// Frames `(stream, data)` pairs in order.
pub fn mux_frame(streams: &[(u16, &[u8])]) -> Vec<Frame> {
    let mut framer = Framer::default();
    streams.iter().flat_map(|(s, d)| framer.frame(*s, d)).collect()
}

/// Restores per-stream order from frames delivered in any order.
#[derive(Debug, Default)]
pub struct Reassembler {
    expected: HashMap<u16, u32>,
    held: HashMap<u16, BTreeMap<u32, Vec<u8>>>,
    ready: BTreeMap<u16, Vec<u8>>,
    integrity_failures: u64,
}

impl Reassembler {
    pub fn integrity_failures(&self) -> u64 {
        self.integrity_failures
    }

    pub fn push(&mut self, frame: Frame) -> Result<(), LayerError> {
        let expected = self.expected.entry(frame.stream).or_insert(0);
        let ahead = frame.seq.wrapping_sub(*expected);
        if ahead >= REORDER_WINDOW {
            if ahead > u32::MAX / 2 {
                // Already delivered; frames are not expected twice.
                return Ok(());
            }
            return Err(LayerError::integrity(format!(
                "stream {} sequence gap {} exceeds window",
                frame.stream, ahead
            )));
        }
        let held = self.held.entry(frame.stream).or_default();
        held.insert(frame.seq, frame.payload);
        let ready = self.ready.entry(frame.stream).or_default();
        while let Some(payload) = held.remove(expected) {
            ready.extend_from_slice(&payload);
            *expected = expected.wrapping_add(1);
        }
        Ok(())
    }

    /// Parses and pushes one encoded frame. Checksum failures drop the frame
    /// and bump the integrity counter.
    pub fn push_bytes(&mut self, raw: &[u8]) -> Result<(), LayerError> {
        match parse_frame(raw) {
            Parsed::Frame(f, _) => self.push(f),
            Parsed::Corrupt(_) | Parsed::Incomplete => {
                self.integrity_failures += 1;
                Ok(())
            }
        }
    }

    /// Takes the in-order bytes available for `stream`.
    pub fn take(&mut self, stream: u16) -> Vec<u8> {
        self.ready.remove(&stream).unwrap_or_default()
    }

    pub fn streams(&self) -> Vec<u16> {
        self.ready.keys().copied().collect()
    }
}

/// Reassembles frames into a per-stream byte map.
pub fn mux_reassemble(frames: impl IntoIterator<Item = Frame>) -> Result<BTreeMap<u16, Vec<u8>>, LayerError> {
    let mut r = Reassembler::default();
    for f in frames {
        r.push(f)?;
    }
    Ok(r.streams().into_iter().map(|s| (s, r.take(s))).collect())
}

/// Channel layer carrying the application stream as stream 0. A corrupt
/// frame here means lost bytes, so it surfaces as an integrity error.
#[derive(Debug, Default)]
pub struct MuxLayer {
    framer: Framer,
    reassembler: Reassembler,
    buf: Vec<u8>,
}

impl MuxLayer {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StreamLayer for MuxLayer {
    fn kind(&self) -> LayerKind {
        LayerKind::Multiplexing
    }

    fn encode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        for f in self.framer.frame(0, data) {
            f.encode_into(out);
        }
        Ok(())
    }

    fn decode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        self.buf.extend_from_slice(data);
        let mut pos = 0;
        loop {
            match parse_frame(&self.buf[pos..]) {
                Parsed::Incomplete => break,
                Parsed::Corrupt(_) => {
                    self.reassembler.integrity_failures += 1;
                    return Err(LayerError::integrity("frame checksum mismatch"));
                }
                Parsed::Frame(f, used) => {
                    pos += used;
                    self.reassembler.push(f)?;
                }
            }
        }
        self.buf.drain(..pos);
        out.extend_from_slice(&self.reassembler.take(0));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    #[test]
    fn empty_frame_yields_nothing() {
        let f = Frame {
            stream: 3,
            seq: 0,
            payload: Vec::new(),
        };
        let out = mux_reassemble([f]).unwrap();
        assert!(out.get(&3).is_none_or(|v| v.is_empty()));
    }

    #[test]
    fn corrupted_checksum_is_dropped_and_counted() {
        let mut raw = Frame {
            stream: 1,
            seq: 0,
            payload: b"hello".to_vec(),
        }
        .encode();
        raw[HEADER_LEN] ^= 0xff;
        let mut r = Reassembler::default();
        r.push_bytes(&raw).unwrap();
        assert_eq!(r.integrity_failures(), 1);
        assert!(r.take(1).is_empty());
    }

    #[test]
    fn gap_beyond_window_is_an_error() {
        let mut r = Reassembler::default();
        let err = r
            .push(Frame {
                stream: 0,
                seq: REORDER_WINDOW,
                payload: vec![1],
            })
            .unwrap_err();
        assert_eq!(err.kind, ErrorKind::Integrity);
        r.push(Frame {
            stream: 0,
            seq: REORDER_WINDOW - 1,
            payload: vec![1],
        })
        .unwrap();
    }

    #[test]
    fn layer_detects_corruption() {
        let mut tx = MuxLayer::new();
        let mut wire = Vec::new();
        tx.encode(b"some bytes", &mut wire).unwrap();
        wire[HEADER_LEN + 2] ^= 1;
        let mut rx = MuxLayer::new();
        let err = rx.decode(&wire, &mut Vec::new()).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Integrity);
    }
}
