use std::collections::BTreeMap;

/// Per-flow in-order stream rebuilt from sequence numbers, as a DPI box
/// sees it. Overlaps resolve first-copy-wins; the retained window is
/// bounded.
#[derive(Debug, Clone)]
pub struct StreamReassembler {
    base: Option<u32>,
    /// Offset of the next expected byte relative to `base`.
    next: u64,
    buf: Vec<u8>,
    held: BTreeMap<u64, Vec<u8>>,
    held_bytes: usize,
    cap: usize,
    last_own: usize,
}

pub const REASSEMBLY_CAP: usize = 64 * 1024;

impl Default for StreamReassembler {
    fn default() -> Self {
        Self::with_cap(REASSEMBLY_CAP)
    }
}

impl StreamReassembler {
    pub fn with_cap(cap: usize) -> Self {
        StreamReassembler {
            base: None,
            next: 0,
            buf: Vec::new(),
            held: BTreeMap::new(),
            held_bytes: 0,
            cap,
            last_own: 0,
        }
    }

    /// The retained tail of the in-order stream.
    pub fn buffer(&self) -> &[u8] {
        &self.buf
    }

    /// Bytes the last `push` appended from its own segment. They start the
    /// appended run; released held segments follow them.
    pub fn last_own(&self) -> usize {
        self.last_own
    }

    /// Adds a segment; returns how many bytes were appended in order,
    /// released held segments included.
    pub fn push(&mut self, seq: u32, data: &[u8]) -> usize {
        self.last_own = 0;
        if data.is_empty() {
            return 0;
        }
        let base = *self.base.get_or_insert(seq);
        let rel = seq.wrapping_sub(base);
        if rel >= 1 << 31 {
            return 0;
        }
        let rel = rel as u64;
        let before = self.next;
        if rel > self.next {
            if self.held_bytes + data.len() <= self.cap && !self.held.contains_key(&rel) {
                self.held_bytes += data.len();
                self.held.insert(rel, data.to_vec());
            }
            return 0;
        }
        self.append_from(rel, data);
        self.last_own = (self.next - before) as usize;
        while let Some((&off, _)) = self.held.first_key_value() {
            if off > self.next {
                break;
            }
            let seg = self.held.pop_first().expect("present").1;
            self.held_bytes -= seg.len();
            self.append_from(off, &seg);
        }
        (self.next - before) as usize
    }

    fn append_from(&mut self, rel: u64, data: &[u8]) {
        let skip = (self.next - rel) as usize;
        if skip >= data.len() {
            return;
        }
        self.buf.extend_from_slice(&data[skip..]);
        self.next += (data.len() - skip) as u64;
        if self.buf.len() > self.cap {
            let excess = self.buf.len() - self.cap;
            self.buf.drain(..excess);
        }
    }
}
