//! One end of a channel: the layer pipeline on top of a minimal
//! TCP-like transport.
//!
//! The transport numbers bytes, acknowledges every data packet and never
//! retransmits. A packet arriving ahead of the next expected byte is held
//! until the gap fills.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ErrorKind, LayerError};
use crate::model::{ControlBand, LayerKind, ValidatedStack};
use crate::netsim::{Addr, FlowKey, Packet, PacketKind};
use crate::time::SimTime;
use crate::transports::{
    build_packetizer, build_session_init, build_stream_layer, ClientTicket, Credentials, HandshakeStatus, Packetizer,
    Role, SessionInit, StreamLayer, TransportConfig, HANDSHAKE_TIMEOUT, NEXT_TICKET,
};

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelState {
    /// Waiting for the transport handshake.
    Connecting,
    /// Session init in progress.
    Handshaking,
    Open,
    Failed(LayerError),
    Closed,
}

impl ChannelState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, ChannelState::Failed(_) | ChannelState::Closed)
    }

    /// The error a caller sees on a terminal state.
    pub fn error(&self) -> Option<LayerError> {
        match self {
            ChannelState::Failed(e) => Some(e.clone()),
            ChannelState::Closed => Some(LayerError::closed()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelStats {
    pub app_bytes_written: u64,
    pub app_bytes_delivered: u64,
    pub first_write: Option<SimTime>,
    pub last_delivery: Option<SimTime>,
    pub packets_sent: u64,
    /// Payload bytes put on the wire, handshake included.
    pub wire_bytes_sent: u64,
    pub wire_bytes_received: u64,
    pub opened_at: SimTime,
    pub open_at: Option<SimTime>,
}

pub(crate) struct Endpoint {
    pub role: Role,
    /// Source address and port used for outgoing packets.
    pub local: (Addr, u16),
    pub remote: (Addr, u16),
    pub cfg: TransportConfig,
    pub state: ChannelState,
    pub stats: ChannelStats,
    si: Option<Box<dyn SessionInit>>,
    si_done: bool,
    silent: bool,
    enc: Option<Box<dyn StreamLayer>>,
    /// MUX and OBF, top-down.
    lower: Vec<Box<dyn StreamLayer>>,
    packetizer: Box<dyn Packetizer>,
    band: ControlBand,
    backlog: Vec<u8>,
    pending_app: Vec<u8>,
    pub received: Vec<u8>,
    established: bool,
    snd_next: u32,
    snd_una: u32,
    rcv_next: Option<u32>,
    held: BTreeMap<u32, Vec<u8>>,
    pkt_index: u64,
    pub last_progress: SimTime,
}

fn seq_after(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) > 0
}

impl Endpoint {
    pub fn new(
        role: Role,
        local: (Addr, u16),
        remote: (Addr, u16),
        stack: &ValidatedStack,
        creds: &Credentials,
        seed: u64,
        now: SimTime,
    ) -> Result<Self, LayerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trn = stack
            .layer(LayerKind::Transport)
            .ok_or_else(|| LayerError::new(ErrorKind::Validation, "stack has no transport"))?;
        let cfg = TransportConfig::from_params(&trn.params).map_err(|e| LayerError::new(ErrorKind::Validation, e))?;
        let si = stack
            .layer(LayerKind::SessionInit)
            .map(|s| build_session_init(s, role, creds, &mut rng))
            .transpose()?;
        let enc = stack
            .layer(LayerKind::Encryption)
            .map(|s| build_stream_layer(s, role))
            .transpose()?;
        let mut lower = Vec::new();
        for kind in [LayerKind::Multiplexing, LayerKind::ContentObfuscation] {
            if let Some(s) = stack.layer(kind) {
                lower.push(build_stream_layer(s, role)?);
            }
        }
        let packetizer = build_packetizer(stack.layer(LayerKind::TimingLengthObfuscation), &mut rng)?;
        let isn: u32 = rng.gen();
        Ok(Endpoint {
            role,
            local,
            remote,
            cfg,
            state: ChannelState::Connecting,
            stats: ChannelStats {
                opened_at: now,
                ..Default::default()
            },
            si_done: si.is_none(),
            si,
            silent: false,
            enc,
            lower,
            packetizer,
            band: ControlBand::default(),
            backlog: Vec::new(),
            pending_app: Vec::new(),
            received: Vec::new(),
            established: false,
            snd_next: isn,
            snd_una: isn,
            rcv_next: None,
            held: BTreeMap::new(),
            pkt_index: 0,
            last_progress: now,
        })
    }

    pub fn next_ticket(&self) -> Option<ClientTicket> {
        self.band
            .get(LayerKind::SessionInit, NEXT_TICKET)
            .and_then(ClientTicket::from_bytes)
    }

    fn fail(&mut self, err: LayerError) {
        if !self.state.is_terminal() {
            self.state = ChannelState::Failed(err);
        }
        self.backlog.clear();
        self.pending_app.clear();
    }

    pub fn close(&mut self) {
        if !self.state.is_terminal() {
            self.state = ChannelState::Closed;
        }
    }

    fn make_packet(&mut self, kind: PacketKind, payload: Vec<u8>, now: SimTime) -> Packet {
        let idx = self.pkt_index;
        self.pkt_index += 1;
        let (src_port, dst_port) = match self.role {
            Role::Client => (self.local.1, self.cfg.port_for(idx)),
            Role::Server if self.cfg.hopping.is_some() => (self.cfg.port_for(idx), self.remote.1),
            Role::Server => (self.local.1, self.remote.1),
        };
        let mut p = Packet::new(FlowKey::new(self.local.0, src_port, self.remote.0, dst_port), kind, payload);
        p.ttl = self.cfg.ttl;
        p.seq = self.snd_next;
        p.ack = self.rcv_next.unwrap_or(0);
        p.sent_at = now;
        if kind == PacketKind::Data {
            self.snd_next = self.snd_next.wrapping_add(p.payload.len() as u32);
        }
        self.stats.packets_sent += 1;
        self.stats.wire_bytes_sent += p.payload.len() as u64;
        p
    }

    /// Client side: opens the transport.
    pub fn connect(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        let syn = self.make_packet(PacketKind::Handshake, Vec::new(), now);
        out.push(syn);
    }

    /// Server side: accepts a new peer, answering its SYN when there was one.
    pub fn accept(&mut self, syn: bool, now: SimTime, out: &mut Vec<Packet>) {
        self.established = true;
        if syn {
            let syn_ack = self.make_packet(PacketKind::Handshake, Vec::new(), now);
            out.push(syn_ack);
        }
        self.start_session(now, out);
    }

    fn start_session(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        if let (Role::Client, Some(ttl)) = (self.role, self.cfg.rst_ttl) {
            let rst = self.make_packet(PacketKind::Rst, Vec::new(), now).with_ttl(ttl);
            out.push(rst);
        }
        match self.si.as_mut() {
            Some(si) => {
                self.state = ChannelState::Handshaking;
                let first = si.initiate(now);
                self.send_lower(&first, now, out);
            }
            None => self.become_open(now, out),
        }
    }

    fn become_open(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        self.state = ChannelState::Open;
        self.stats.open_at = Some(now);
        let pending = std::mem::take(&mut self.pending_app);
        if !pending.is_empty() {
            self.encode_app(&pending, now, out);
        }
    }

    fn send_lower(&mut self, data: &[u8], now: SimTime, out: &mut Vec<Packet>) {
        if data.is_empty() {
            return;
        }
        let mut cur = data.to_vec();
        for layer in self.lower.iter_mut() {
            let mut next = Vec::with_capacity(cur.len() + 64);
            if let Err(e) = layer.encode(&cur, &mut next) {
                self.fail(e);
                return;
            }
            cur = next;
        }
        self.backlog.extend_from_slice(&cur);
        self.pump(now, out);
    }

    fn encode_app(&mut self, data: &[u8], now: SimTime, out: &mut Vec<Packet>) {
        match self.enc.as_mut() {
            Some(enc) => {
                let mut sealed = Vec::with_capacity(data.len() + 64);
                if let Err(e) = enc.encode(data, &mut sealed) {
                    self.fail(e);
                    return;
                }
                self.send_lower(&sealed, now, out);
            }
            None => self.send_lower(data, now, out),
        }
    }

    pub fn write(&mut self, data: &[u8], now: SimTime, out: &mut Vec<Packet>) -> Result<(), LayerError> {
        if let Some(e) = self.state.error() {
            return Err(e);
        }
        if data.is_empty() {
            return Ok(());
        }
        self.stats.app_bytes_written += data.len() as u64;
        self.stats.first_write.get_or_insert(now);
        if self.state == ChannelState::Open {
            self.encode_app(data, now, out);
        } else {
            self.pending_app.extend_from_slice(data);
        }
        match self.state.error() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Moves queued bytes into the packetizer and emits every payload that
    /// is due.
    pub fn pump(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        if self.state.is_terminal() {
            return;
        }
        loop {
            if !self.backlog.is_empty() {
                let n = self.packetizer.push(&self.backlog);
                self.backlog.drain(..n);
            }
            let mut emitted = false;
            while let Some(payload) = self.packetizer.poll(now) {
                let p = self.make_packet(PacketKind::Data, payload, now);
                out.push(p);
                emitted = true;
            }
            if emitted {
                self.last_progress = now;
            }
            if !emitted || self.backlog.is_empty() {
                break;
            }
        }
    }

    pub fn handshake_deadline(&self) -> Option<SimTime> {
        matches!(self.state, ChannelState::Connecting | ChannelState::Handshaking)
            .then(|| self.stats.opened_at + HANDSHAKE_TIMEOUT)
    }

    pub fn next_wakeup(&self, now: SimTime) -> Option<SimTime> {
        if self.state.is_terminal() {
            return None;
        }
        let ready = if self.backlog.is_empty() && self.packetizer.pending() == 0 {
            None
        } else {
            self.packetizer.next_ready(now)
        };
        match (ready, self.handshake_deadline()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn on_timer(&mut self, now: SimTime, out: &mut Vec<Packet>) {
        if let Some(deadline) = self.handshake_deadline() {
            if now >= deadline {
                let err = if !self.established {
                    LayerError::transport("no answer from peer")
                } else {
                    LayerError::handshake("handshake timed out")
                };
                self.fail(err);
                return;
            }
        }
        self.pump(now, out);
    }

    /// True once every written byte has been sent and acknowledged.
    pub fn send_complete(&self) -> bool {
        self.backlog.is_empty()
            && self.pending_app.is_empty()
            && self.packetizer.pending() == 0
            && self.snd_una == self.snd_next
    }

    pub fn on_packet(&mut self, pkt: &Packet, now: SimTime, out: &mut Vec<Packet>) {
        if self.state.is_terminal() {
            return;
        }
        match pkt.kind {
            PacketKind::Rst => {
                if !self.cfg.ignore_rst {
                    self.fail(LayerError::transport("connection reset"));
                }
            }
            PacketKind::Handshake => {
                if self.role == Role::Client && !self.established {
                    self.established = true;
                    self.last_progress = now;
                    self.start_session(now, out);
                }
            }
            PacketKind::Data => {
                if seq_after(pkt.ack, self.snd_una) && !seq_after(pkt.ack, self.snd_next) {
                    self.snd_una = pkt.ack;
                    self.last_progress = now;
                }
                if pkt.payload.is_empty() {
                    return;
                }
                self.stats.wire_bytes_received += pkt.payload.len() as u64;
                let next = *self.rcv_next.get_or_insert(pkt.seq);
                if pkt.seq == next {
                    self.rcv_next = Some(next.wrapping_add(pkt.payload.len() as u32));
                    self.unpack(&pkt.payload, now, out);
                    while let Some(seg) = self.rcv_next.and_then(|n| self.held.remove(&n)) {
                        self.rcv_next = self.rcv_next.map(|n| n.wrapping_add(seg.len() as u32));
                        self.unpack(&seg, now, out);
                    }
                } else if seq_after(pkt.seq, next) {
                    self.held.entry(pkt.seq).or_insert_with(|| pkt.payload.clone());
                }
                if !self.silent && !self.state.is_terminal() {
                    let ack = self.make_packet(PacketKind::Data, Vec::new(), now);
                    out.push(ack);
                }
            }
        }
    }

    fn unpack(&mut self, payload: &[u8], now: SimTime, out: &mut Vec<Packet>) {
        if self.state.is_terminal() || self.silent {
            return;
        }
        let mut cur = Vec::with_capacity(payload.len());
        if let Err(e) = self.packetizer.unpack(payload, &mut cur) {
            self.fail(e);
            return;
        }
        for layer in self.lower.iter_mut().rev() {
            let mut next = Vec::with_capacity(cur.len());
            if let Err(e) = layer.decode(&cur, &mut next) {
                self.fail(e);
                return;
            }
            cur = next;
        }
        if !self.si_done {
            let si = self.si.as_mut().expect("session init present until done");
            let step = si.receive(&cur, now, &mut self.band);
            match step.status {
                HandshakeStatus::Pending => {
                    self.send_lower(&step.reply, now, out);
                    return;
                }
                HandshakeStatus::Silent => {
                    self.silent = true;
                    return;
                }
                HandshakeStatus::Failed(e) => {
                    self.fail(e);
                    return;
                }
                HandshakeStatus::Complete => {
                    self.si_done = true;
                    if let Some(enc) = self.enc.as_mut() {
                        enc.on_control(&mut self.band);
                    }
                    for layer in self.lower.iter_mut() {
                        layer.on_control(&mut self.band);
                    }
                    self.send_lower(&step.reply, now, out);
                    self.become_open(now, out);
                    cur = step.leftover;
                }
            }
        }
        if cur.is_empty() {
            return;
        }
        let app = match self.enc.as_mut() {
            Some(enc) => {
                let mut plain = Vec::with_capacity(cur.len());
                if let Err(e) = enc.decode(&cur, &mut plain) {
                    self.fail(e);
                    return;
                }
                plain
            }
            None => cur,
        };
        if !app.is_empty() {
            self.stats.app_bytes_delivered += app.len() as u64;
            self.stats.last_delivery = Some(now);
            self.received.extend_from_slice(&app);
        }
    }
}
