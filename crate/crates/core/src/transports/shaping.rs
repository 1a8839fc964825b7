//! Length and timing shaping.
//!
//! Each packet payload is `true_len (u16 BE) || data || padding`, where the
//! total length is drawn from the length distribution. Send times follow
//! `max(now, previous_send + sampled_gap)`, so a backlogged queue emits
//! packets whose gaps are i.i.d. draws from the inter-arrival distribution.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::LayerError;
use crate::model::Params;
use crate::stats::DiscreteDist;
use crate::time::{SimDuration, SimTime};
use crate::transports::trace::TraceModel;
use crate::transports::{Packetizer, MTU};

pub const HEADER_LEN: usize = 2;
/// Shortest payload that still carries one data byte.
pub const MIN_PACKET: usize = HEADER_LEN + 1;
pub const DEFAULT_QUEUE_LIMIT: usize = 4 << 20;
pub const DEFAULT_BINS: usize = 16;

const FILLER_TEXT: &[u8] = b"the quick brown fox jumps over the lazy dog and then reads the news again ";

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDists {
    pub lengths: DiscreteDist<u32>,
    pub iats_us: DiscreteDist<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filler {
    Random,
    Zero,
    Text,
}

impl Filler {
    pub fn from_params(params: &Params) -> Result<Self, String> {
        match params.get("pad").unwrap_or("random") {
            "random" => Ok(Filler::Random),
            "zero" => Ok(Filler::Zero),
            "text" => Ok(Filler::Text),
            other => Err(format!("unknown padding filler `{other}`")),
        }
    }
}

fn parse_f64_range(params: &Params, key: &str, default: (f64, f64)) -> Result<(f64, f64), String> {
    let Some(raw) = params.get(key) else {
        return Ok(default);
    };
    let bad = || format!("parameter `{key}` expects `lo-hi` or a single value, got `{raw}`");
    let (lo, hi) = match raw.split_once('-') {
        Some((a, b)) => (a.trim().parse::<f64>().map_err(|_| bad())?, b.trim().parse::<f64>().map_err(|_| bad())?),
        None => {
            let v = raw.trim().parse::<f64>().map_err(|_| bad())?;
            (v, v)
        }
    };
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Parameters of `timlen:iid`: support ranges plus the seed that fixes the
/// random bin weights, so both the censor-facing shape and its replay are
/// reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct IidParams {
    pub lengths: (u32, u32),
    pub iat_ms: (f64, f64),
    pub bins: usize,
    pub seed: u64,
    pub filler: Filler,
    pub queue_limit: usize,
}

impl IidParams {
    pub fn from_params(params: &Params) -> Result<Self, String> {
        if let Some(k) = params
            .keys()
            .find(|k| !["lengths", "iat_ms", "bins", "seed", "pad", "queue"].contains(k))
        {
            return Err(format!("unknown parameter `{k}`"));
        }
        let (lo, hi) = parse_f64_range(params, "lengths", (200.0, 1400.0))?;
        if lo.fract() != 0.0 || hi.fract() != 0.0 {
            return Err("parameter `lengths` must be whole bytes".into());
        }
        let lengths = (lo as u32, hi as u32);
        if lengths.0 < MIN_PACKET as u32 || lengths.1 > MTU as u32 {
            return Err(format!("parameter `lengths` must lie within {MIN_PACKET}-{MTU}"));
        }
        let bins: usize = params.parse_or("bins", DEFAULT_BINS)?;
        if bins == 0 {
            return Err("parameter `bins` must be positive".into());
        }
        Ok(IidParams {
            lengths,
            iat_ms: parse_f64_range(params, "iat_ms", (5.0, 40.0))?,
            bins,
            seed: params.parse_or("seed", 1u64)?,
            filler: Filler::from_params(params)?,
            queue_limit: params.parse_or("queue", DEFAULT_QUEUE_LIMIT)?,
        })
    }

    /// Evenly spaced support points with seed-derived random weights.
    pub fn dists(&self) -> ShapeDists {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut points = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
            let n = if lo == hi { 1 } else { self.bins };
            (0..n)
                .map(|i| {
                    let x = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
                    (x, rng.gen_range(0.05..1.0))
                })
                .collect()
        };
        let lengths = points(self.lengths.0 as f64, self.lengths.1 as f64)
            .into_iter()
            .map(|(x, w)| (x.round() as u32, w))
            .collect();
        let iats = points(self.iat_ms.0, self.iat_ms.1)
            .into_iter()
            .map(|(x, w)| ((x * 1000.0).round() as u64, w))
            .collect();
        ShapeDists {
            lengths: DiscreteDist::new(lengths).expect("weights are positive"),
            iats_us: DiscreteDist::new(iats).expect("weights are positive"),
        }
    }
}

pub struct Shaper {
    dists: ShapeDists,
    filler: Filler,
    queue: VecDeque<u8>,
    queue_limit: usize,
    rng: ChaCha8Rng,
    last_send: Option<SimTime>,
    gap: SimDuration,
    text_pos: usize,
}

impl Shaper {
    pub fn new(dists: ShapeDists, filler: Filler, queue_limit: usize, seed: u64) -> Self {
        Shaper {
            dists,
            filler,
            queue: VecDeque::new(),
            queue_limit,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_send: None,
            gap: SimDuration::ZERO,
            text_pos: 0,
        }
    }

    pub fn from_trace(model: &TraceModel, filler: Filler, seed: u64) -> Self {
        Self::new(model.dists(), filler, DEFAULT_QUEUE_LIMIT, seed)
    }

    fn sample_len(&mut self) -> usize {
        (self.dists.lengths.sample(&mut self.rng) as usize).clamp(MIN_PACKET, MTU)
    }

    fn pad(&mut self, out: &mut Vec<u8>, n: usize) {
        match self.filler {
            Filler::Zero => out.resize(out.len() + n, 0),
            Filler::Random => {
                let start = out.len();
                out.resize(start + n, 0);
                self.rng.fill_bytes(&mut out[start..]);
            }
            Filler::Text => {
                for _ in 0..n {
                    out.push(FILLER_TEXT[self.text_pos % FILLER_TEXT.len()]);
                    self.text_pos += 1;
                }
            }
        }
    }

    fn build(&mut self) -> Vec<u8> {
        let len = self.sample_len();
        let take = (len - HEADER_LEN).min(self.queue.len());
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&(take as u16).to_be_bytes());
        out.extend(self.queue.drain(..take));
        let fill = len - out.len();
        self.pad(&mut out, fill);
        out
    }
}

impl Packetizer for Shaper {
    fn push(&mut self, data: &[u8]) -> usize {
        let room = self.queue_limit.saturating_sub(self.queue.len());
        let n = room.min(data.len());
        self.queue.extend(&data[..n]);
        n
    }

    fn poll(&mut self, now: SimTime) -> Option<Vec<u8>> {
        let ready = self.next_ready(now)?;
        if ready > now {
            return None;
        }
        let pkt = self.build();
        self.last_send = Some(now);
        self.gap = SimDuration::from_micros(self.dists.iats_us.sample(&mut self.rng));
        Some(pkt)
    }

    fn next_ready(&self, now: SimTime) -> Option<SimTime> {
        if self.queue.is_empty() {
            return None;
        }
        Some(match self.last_send {
            None => now,
            Some(t) => (t + self.gap).max(now),
        })
    }

    fn pending(&self) -> usize {
        self.queue.len()
    }

    fn unpack(&mut self, payload: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        if payload.len() < HEADER_LEN {
            return Err(LayerError::integrity("shaped packet shorter than its header"));
        }
        let n = u16::from_be_bytes([payload[0], payload[1]]) as usize;
        if n > payload.len() - HEADER_LEN {
            return Err(LayerError::integrity("shaped packet length header exceeds payload"));
        }
        out.extend_from_slice(&payload[HEADER_LEN..HEADER_LEN + n]);
        Ok(())
    }
}

/// Shapes a fully backlogged buffer and returns `(send_time, payload)`
/// pairs. The first packet leaves at time zero.
pub fn shape_iid(dists: ShapeDists, filler: Filler, seed: u64, data: &[u8]) -> Vec<(SimTime, Vec<u8>)> {
    let mut s = Shaper::new(dists, filler, usize::MAX, seed);
    s.push(data);
    let mut now = SimTime::ZERO;
    let mut out = Vec::new();
    while let Some(t) = s.next_ready(now) {
        now = t;
        out.push((now, s.poll(now).expect("ready packet")));
    }
    out
}

/// As [`shape_iid`], with the trace model as the target.
pub fn shape_trace(model: &TraceModel, filler: Filler, seed: u64, data: &[u8]) -> Vec<(SimTime, Vec<u8>)> {
    shape_iid(model.dists(), filler, seed, data)
}
