use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::censor::Verdict;
use crate::netsim::deflector::Deflector;
use crate::netsim::log::{Action, EventLog, LogRecord};
use crate::netsim::packet::{is_inside, Addr, FlowKey, Packet, PacketKind};
use crate::netsim::topology::{HopRole, Topology, TopologyError};
use crate::time::{SimDuration, SimTime};

/// Per-packet header overhead charged against link bandwidth.
pub const HEADER_OVERHEAD: usize = 40;

/// What a middlebox knows about the hop it sits on.
#[derive(Debug, Clone, Copy)]
pub struct HopContext {
    pub now: SimTime,
    /// Path position of the hop.
    pub position: usize,
    /// Hops the packet still crosses, this one included. The packet reaches
    /// its host iff `ttl > hops_remaining`.
    pub hops_remaining: u8,
}

/// Anything that inspects packets at a hop.
pub trait Middlebox: Any + Send {
    fn inspect(&mut self, pkt: &Packet, ctx: &HopContext) -> Verdict;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

#[derive(Debug)]
pub enum SimEvent {
    Delivered(Packet),
    Timer(u64),
}

#[derive(Debug)]
enum EventKind {
    Arrive { pos: usize, outward: bool, pkt: Packet },
    Timer(u64),
}

#[derive(Debug)]
struct Event {
    at: SimTime,
    order: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

struct LinkState {
    /// Indexed by `outward as usize`.
    busy_until: [SimTime; 2],
    rng: ChaCha8Rng,
}

struct FlowThrottle {
    factor: f64,
    busy_until: SimTime,
}

pub struct Simulator {
    topo: Topology,
    now: SimTime,
    queue: BinaryHeap<Event>,
    order: u64,
    next_packet_id: u64,
    links: Vec<LinkState>,
    middlebox: Option<(usize, Box<dyn Middlebox>)>,
    deflector: Option<(usize, Deflector)>,
    throttles: HashMap<FlowKey, FlowThrottle>,
    log: EventLog,
    logging: bool,
}

impl Simulator {
    pub fn build(topo: Topology, seed: u64) -> Self {
        let links = (0..topo.links().len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                LinkState {
                    busy_until: [SimTime::ZERO; 2],
                    rng,
                }
            })
            .collect();
        Simulator {
            topo,
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            order: 0,
            next_packet_id: 1,
            links,
            middlebox: None,
            deflector: None,
            throttles: HashMap::new(),
            log: EventLog::default(),
            logging: true,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Recording can be switched off for long bulk runs.
    pub fn set_logging(&mut self, on: bool) {
        self.logging = on;
    }

    fn host_position(&self) -> usize {
        self.topo.hops().len() + 1
    }

    fn check_hop(&self, hop: usize, role: HopRole, wanted: &'static str) -> Result<(), TopologyError> {
        let actual = *self.topo.hops().get(hop).ok_or(TopologyError::NoSuchHop(hop))?;
        if actual != role {
            return Err(TopologyError::WrongRole { hop, role: actual, wanted });
        }
        Ok(())
    }

    /// `hop` is a 0-based hop index.
    pub fn attach_middlebox(&mut self, hop: usize, mb: Box<dyn Middlebox>) -> Result<(), TopologyError> {
        self.check_hop(hop, HopRole::Censor, "middlebox")?;
        if self.middlebox.is_some() {
            return Err(TopologyError::Occupied(hop));
        }
        self.middlebox = Some((hop, mb));
        Ok(())
    }

    pub fn detach_middlebox(&mut self) -> Option<Box<dyn Middlebox>> {
        self.middlebox.take().map(|(_, mb)| mb)
    }

    pub fn middlebox_mut<T: Middlebox>(&mut self) -> Option<&mut T> {
        self.middlebox.as_mut().and_then(|(_, mb)| mb.as_any_mut().downcast_mut::<T>())
    }

    pub fn middlebox<T: Middlebox>(&self) -> Option<&T> {
        self.middlebox.as_ref().and_then(|(_, mb)| mb.as_any().downcast_ref::<T>())
    }

    pub fn attach_deflector(&mut self, hop: usize, key: [u8; 32], proxy: Addr) -> Result<(), TopologyError> {
        self.check_hop(hop, HopRole::Deflector, "deflector")?;
        if self.deflector.is_some() {
            return Err(TopologyError::Occupied(hop));
        }
        self.deflector = Some((hop, Deflector::new(key, proxy)));
        Ok(())
    }

    pub fn deflector(&self) -> Option<&Deflector> {
        self.deflector.as_ref().map(|(_, d)| d)
    }

    fn record(&mut self, hop: usize, pkt: &Packet, action: Action) {
        if self.logging {
            self.log.push(LogRecord {
                time: self.now,
                hop,
                packet_id: pkt.id,
                action,
                flow: pkt.key,
            });
        }
    }

    fn push(&mut self, at: SimTime, kind: EventKind) {
        self.order += 1;
        self.queue.push(Event {
            at: at.max(self.now),
            order: self.order,
            kind,
        });
    }

    /// Injects a packet from the host owning its source address. Returns the
    /// assigned packet id.
    pub fn send(&mut self, mut pkt: Packet) -> u64 {
        pkt.id = self.next_packet_id;
        self.next_packet_id += 1;
        pkt.sent_at = self.now;
        let outward = is_inside(pkt.key.src);
        let pos = if outward { 0 } else { self.host_position() };
        self.record(pos, &pkt, Action::Send);
        if is_inside(pkt.key.dst) == outward {
            self.record(pos, &pkt, Action::DropUnroutable);
            return pkt.id;
        }
        let id = pkt.id;
        self.enter_link(pos, outward, pkt, self.now);
        id
    }

    pub fn schedule_timer(&mut self, at: SimTime, token: u64) {
        self.push(at, EventKind::Timer(token));
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.at)
    }

    /// Moves the clock forward without processing events.
    pub fn advance_to(&mut self, t: SimTime) {
        debug_assert!(self.peek_time().is_none_or(|p| p >= t), "events pending before {t}");
        self.now = self.now.max(t);
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    fn enter_link(&mut self, pos: usize, outward: bool, pkt: Packet, earliest: SimTime) {
        let idx = if outward { pos } else { pos - 1 };
        let params = self.topo.links()[idx];
        let link = &mut self.links[idx];
        if params.loss > 0.0 && link.rng.gen::<f64>() < params.loss {
            self.record(pos, &pkt, Action::DropLoss);
            return;
        }
        let slot = &mut link.busy_until[outward as usize];
        let depart = earliest.max(*slot);
        let tx = tx_time(pkt.payload.len(), params.bandwidth);
        *slot = depart + tx;
        let arrive = *slot + params.latency;
        let next = if outward { pos + 1 } else { pos - 1 };
        self.push(arrive, EventKind::Arrive { pos: next, outward, pkt });
    }

    fn inject(&mut self, pos: usize, outward: bool, mut pkt: Packet) {
        pkt.id = self.next_packet_id;
        self.next_packet_id += 1;
        pkt.sent_at = self.now;
        self.record(pos, &pkt, Action::Inject);
        self.enter_link(pos, outward, pkt, self.now);
    }

    /// Runs until a packet reaches a host or a timer fires.
    pub fn step(&mut self) -> Option<SimEvent> {
        while let Some(ev) = self.queue.pop() {
            self.now = ev.at;
            match ev.kind {
                EventKind::Timer(token) => return Some(SimEvent::Timer(token)),
                EventKind::Arrive { pos, outward, pkt } => {
                    if pos == 0 || pos == self.host_position() {
                        self.record(pos, &pkt, Action::Deliver);
                        return Some(SimEvent::Delivered(pkt));
                    }
                    self.at_hop(pos, outward, pkt);
                }
            }
        }
        None
    }

    fn at_hop(&mut self, pos: usize, outward: bool, mut pkt: Packet) {
        let hop = pos - 1;
        let n = self.topo.hops().len();
        let mut earliest = self.now;
        if let Some((mb_hop, mb)) = self.middlebox.as_mut() {
            if *mb_hop == hop {
                let ctx = HopContext {
                    now: self.now,
                    position: pos,
                    hops_remaining: if outward { n - hop } else { hop + 1 } as u8,
                };
                match mb.inspect(&pkt, &ctx) {
                    Verdict::Allow => {}
                    Verdict::Flag(_) => self.record(pos, &pkt, Action::Flag),
                    Verdict::Drop => {
                        self.record(pos, &pkt, Action::DropCensor);
                        return;
                    }
                    Verdict::InjectRst => {
                        let mut fwd = Packet::new(pkt.key, PacketKind::Rst, Vec::new());
                        fwd.seq = pkt.seq.wrapping_add(pkt.payload.len() as u32);
                        fwd.orig_dst = pkt.orig_dst;
                        let mut back = Packet::new(pkt.key.reversed(), PacketKind::Rst, Vec::new());
                        back.seq = pkt.ack;
                        self.inject(pos, outward, fwd);
                        self.inject(pos, !outward, back);
                    }
                    Verdict::Tamper(bytes) => {
                        pkt.payload = bytes;
                        self.record(pos, &pkt, Action::Tamper);
                    }
                    Verdict::Throttle(factor) => {
                        let fresh = !self.throttles.contains_key(&pkt.key);
                        let t = self.throttles.entry(pkt.key).or_insert(FlowThrottle {
                            factor,
                            busy_until: SimTime::ZERO,
                        });
                        t.factor = factor;
                        if fresh {
                            self.record(pos, &pkt, Action::Throttle);
                        }
                    }
                }
            }
        }
        if let Some(t) = self.throttles.get_mut(&pkt.key) {
            let idx = if outward { pos } else { pos - 1 };
            let bw = self.topo.links()[idx].bandwidth * (1.0 - t.factor);
            let release = self.now.max(t.busy_until);
            t.busy_until = release + tx_time(pkt.payload.len(), bw);
            earliest = release;
        }
        if let Some((d_hop, d)) = self.deflector.as_mut() {
            if *d_hop == hop && d.process(&mut pkt) {
                self.record(pos, &pkt, Action::Deflect);
            }
        }
        if pkt.ttl <= 1 {
            self.record(pos, &pkt, Action::DropTtl);
            return;
        }
        pkt.ttl -= 1;
        self.enter_link(pos, outward, pkt, earliest);
    }
}

fn tx_time(payload: usize, bandwidth: f64) -> SimDuration {
    SimDuration(((payload + HEADER_OVERHEAD) as f64 / bandwidth * 1e6).round() as u64)
}
