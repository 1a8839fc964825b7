//! Hosts, channels and the event loop that ties them to the simulator.
//!
//! The non-blocking core (`connect`, `write`, `run_until`) drives every
//! endpoint from simulator events. The blocking helpers (`open_channel`,
//! `send`, `recv_exact`) run the loop until their condition holds or a
//! timeout passes in virtual time.

mod endpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::censor::{Censor, PROBER_NET};
use crate::error::{ErrorKind, LayerError};
use crate::model::{validate_stack, LayerKind, StackDescriptor, ValidatedStack};
use crate::netsim::{is_inside, Addr, Packet, PacketKind, SimEvent, Simulator, Topology, TopologyError};
use crate::time::{SimDuration, SimTime};
use crate::transports::uniform_dh::{GroupParams, Keypair};
use crate::transports::{standard_registry, ClientTicket, Credentials, Role, TransportConfig, SEND_TIMEOUT};

pub use endpoint::{ChannelState, ChannelStats};
use endpoint::Endpoint;

pub type ChannelId = usize;

pub const FIRST_EPHEMERAL_PORT: u16 = 40000;
const PROBE_TOKEN_BASE: u64 = 1 << 40;

/// What a listening server does with received bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum App {
    /// Keeps everything for the caller to read.
    Sink,
    /// Writes every received byte back.
    Echo,
    /// Answers the first received bytes with this many random bytes.
    Respond(usize),
}

struct Listener {
    stack: ValidatedStack,
    app: App,
    creds: Credentials,
    ports: BTreeSet<u16>,
    /// Accept sessions that begin mid-stream (deflected flows).
    midstream: bool,
    sessions: BTreeMap<(Addr, u16), ChannelId>,
}

enum Binding {
    Listener(Box<Listener>),
    /// Answers connection setup only.
    Overt { payload_bytes: u64 },
}

struct ServerApp {
    app: App,
    responded: bool,
}

/// Outcome of one active probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub target: (Addr, u16),
    pub confirmed: bool,
    /// Payload bytes the probed server sent back.
    pub server_bytes: u64,
    pub finished_at: SimTime,
}

struct ProbeTask {
    target: (Addr, u16),
    channels: Vec<ChannelId>,
}

pub struct Network {
    sim: Simulator,
    hosts: BTreeMap<Addr, Binding>,
    clients: BTreeMap<(Addr, u16), ChannelId>,
    endpoints: Vec<Endpoint>,
    server_apps: BTreeMap<ChannelId, ServerApp>,
    scheduled: Vec<Option<SimTime>>,
    rng: ChaCha8Rng,
    next_port: BTreeMap<Addr, u16>,
    probes: Vec<ProbeTask>,
    probe_outcomes: Vec<ProbeOutcome>,
    next_prober: u16,
    plain_stack: ValidatedStack,
}

fn validation(e: impl ToString) -> LayerError {
    LayerError::new(ErrorKind::Validation, e.to_string())
}

impl Network {
    pub fn new(topology: Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = Simulator::build(topology, rng.next_u64());
        let plain = StackDescriptor::parse("probe", "trn:sim").expect("literal");
        Network {
            sim,
            hosts: BTreeMap::new(),
            clients: BTreeMap::new(),
            endpoints: Vec::new(),
            server_apps: BTreeMap::new(),
            scheduled: Vec::new(),
            rng,
            next_port: BTreeMap::new(),
            probes: Vec::new(),
            probe_outcomes: Vec::new(),
            next_prober: 1,
            plain_stack: validate_stack(&standard_registry(), &plain).expect("plain stack is valid"),
        }
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    /// Places the censor on the topology's censor hop.
    pub fn attach_censor(&mut self, censor: Censor) -> Result<(), TopologyError> {
        let hop = self.sim.topology().censor_hop().ok_or(TopologyError::NoSuchHop(0))?;
        self.sim.attach_middlebox(hop, Box::new(censor))
    }

    pub fn censor(&self) -> Option<&Censor> {
        self.sim.middlebox::<Censor>()
    }

    pub fn censor_mut(&mut self) -> Option<&mut Censor> {
        self.sim.middlebox_mut::<Censor>()
    }

    pub fn attach_deflector(&mut self, key: [u8; 32], proxy: Addr) -> Result<(), TopologyError> {
        let hop = self.sim.topology().deflector_hop().ok_or(TopologyError::NoSuchHop(0))?;
        self.sim.attach_deflector(hop, key, proxy)
    }

    fn bind(&mut self, addr: Addr, stack: &ValidatedStack, app: App, creds: Credentials, midstream: bool) -> Result<(), LayerError> {
        if is_inside(addr) {
            return Err(validation(format!("{addr} is on the client side of the path")));
        }
        if self.hosts.contains_key(&addr) {
            return Err(validation(format!("{addr} is already bound")));
        }
        let trn = stack
            .layer(LayerKind::Transport)
            .ok_or_else(|| validation("stack has no transport"))?;
        let cfg = TransportConfig::from_params(&trn.params).map_err(validation)?;
        self.hosts.insert(
            addr,
            Binding::Listener(Box::new(Listener {
                stack: stack.clone(),
                app,
                creds,
                ports: cfg.listen_ports().into_iter().collect(),
                midstream,
                sessions: BTreeMap::new(),
            })),
        );
        Ok(())
    }

    /// Serves `stack` on `addr`, on the port(s) its transport names.
    pub fn listen(&mut self, addr: Addr, stack: &ValidatedStack, app: App, creds: Credentials) -> Result<(), LayerError> {
        self.bind(addr, stack, app, creds, false)
    }

    /// Covert proxy behind a deflecting router. It picks up flows
    /// mid-stream and answers as the overt destination.
    pub fn listen_proxy(&mut self, addr: Addr, stack: &ValidatedStack, app: App, creds: Credentials) -> Result<(), LayerError> {
        self.bind(addr, stack, app, creds, true)
    }

    /// Innocent destination that completes connection setup and ignores
    /// data.
    pub fn add_overt(&mut self, addr: Addr) {
        self.hosts.insert(addr, Binding::Overt { payload_bytes: 0 });
    }

    /// Payload bytes an overt host has received.
    pub fn overt_bytes(&self, addr: Addr) -> Option<u64> {
        match self.hosts.get(&addr) {
            Some(Binding::Overt { payload_bytes }) => Some(*payload_bytes),
            _ => None,
        }
    }

    fn ephemeral_port(&mut self, addr: Addr) -> u16 {
        let p = self.next_port.entry(addr).or_insert(FIRST_EPHEMERAL_PORT);
        let port = *p;
        *p = p.checked_add(1).unwrap_or(FIRST_EPHEMERAL_PORT);
        port
    }

    fn add_endpoint(&mut self, ep: Endpoint) -> ChannelId {
        self.endpoints.push(ep);
        self.scheduled.push(None);
        self.endpoints.len() - 1
    }

    fn transmit(&mut self, out: Vec<Packet>) {
        for p in out {
            self.sim.send(p);
        }
    }

    fn reschedule(&mut self, id: ChannelId) {
        let now = self.sim.now();
        if let Some(t) = self.endpoints[id].next_wakeup(now) {
            let t = t.max(now);
            if self.scheduled[id].is_none_or(|s| t < s || s < now) {
                self.scheduled[id] = Some(t);
                self.sim.schedule_timer(t, id as u64);
            }
        }
    }

    /// Opens a client channel without waiting for it.
    pub fn connect(&mut self, local: Addr, remote: Addr, stack: &ValidatedStack, creds: &Credentials) -> Result<ChannelId, LayerError> {
        self.connect_port(local, remote, None, stack, creds)
    }

    /// `port` overrides the stack's server port, SYN included.
    fn connect_port(
        &mut self,
        local: Addr,
        remote: Addr,
        port: Option<u16>,
        stack: &ValidatedStack,
        creds: &Credentials,
    ) -> Result<ChannelId, LayerError> {
        if !is_inside(local) {
            return Err(validation(format!("client address {local} is outside the censored network")));
        }
        let port_override = port;
        let port = self.ephemeral_port(local);
        let seed = self.rng.next_u64();
        let now = self.sim.now();
        let mut ep = Endpoint::new(Role::Client, (local, port), (remote, 0), stack, creds, seed, now)?;
        if let Some(p) = port_override {
            ep.cfg.port = p;
        }
        ep.remote.1 = ep.cfg.port;
        let mut out = Vec::new();
        ep.connect(now, &mut out);
        let id = self.add_endpoint(ep);
        self.clients.insert((local, port), id);
        self.transmit(out);
        self.reschedule(id);
        Ok(id)
    }

    pub fn write(&mut self, ch: ChannelId, data: &[u8]) -> Result<(), LayerError> {
        let ep = self.endpoints.get_mut(ch).ok_or_else(LayerError::closed)?;
        let mut out = Vec::new();
        let r = ep.write(data, self.sim.now(), &mut out);
        self.transmit(out);
        self.reschedule(ch);
        r
    }

    /// Takes whatever application bytes have arrived.
    pub fn read(&mut self, ch: ChannelId) -> Vec<u8> {
        self.endpoints.get_mut(ch).map(|e| std::mem::take(&mut e.received)).unwrap_or_default()
    }

    pub fn available(&self, ch: ChannelId) -> usize {
        self.endpoints.get(ch).map_or(0, |e| e.received.len())
    }

    pub fn state(&self, ch: ChannelId) -> ChannelState {
        self.endpoints.get(ch).map_or(ChannelState::Closed, |e| e.state.clone())
    }

    pub fn stats(&self, ch: ChannelId) -> ChannelStats {
        self.endpoints.get(ch).map(|e| e.stats.clone()).unwrap_or_default()
    }

    /// Local and remote address of a channel, as its packets carry them.
    pub fn endpoints_of(&self, ch: ChannelId) -> Option<((Addr, u16), (Addr, u16))> {
        self.endpoints.get(ch).map(|e| (e.local, e.remote))
    }

    pub fn close(&mut self, ch: ChannelId) {
        if let Some(e) = self.endpoints.get_mut(ch) {
            e.close();
        }
    }

    /// Ticket handed over by the server during the last handshake.
    pub fn take_next_ticket(&self, ch: ChannelId) -> Option<ClientTicket> {
        self.endpoints.get(ch).and_then(|e| e.next_ticket())
    }

    /// Server-side sessions of the listener at `addr`, in accept order.
    pub fn sessions(&self, addr: Addr) -> Vec<ChannelId> {
        match self.hosts.get(&addr) {
            Some(Binding::Listener(l)) => {
                let mut v: Vec<ChannelId> = l.sessions.values().copied().collect();
                v.sort_unstable();
                v
            }
            _ => Vec::new(),
        }
    }

    /// Server-side session of the listener at `addr` serving `peer`.
    pub fn session_for(&self, addr: Addr, peer: (Addr, u16)) -> Option<ChannelId> {
        match self.hosts.get(&addr) {
            Some(Binding::Listener(l)) => l.sessions.get(&peer).copied(),
            _ => None,
        }
    }

    pub fn probe_outcomes(&self) -> &[ProbeOutcome] {
        &self.probe_outcomes
    }

    fn dispatch(&mut self, pkt: Packet) {
        let now = self.sim.now();
        let dst = pkt.key.dst;
        if is_inside(dst) {
            if let Some(&id) = self.clients.get(&(dst, pkt.key.dst_port)) {
                let mut out = Vec::new();
                self.endpoints[id].on_packet(&pkt, now, &mut out);
                self.transmit(out);
                self.reschedule(id);
            }
            return;
        }
        let peer = (pkt.key.src, pkt.key.src_port);
        let (id, fresh) = match self.hosts.get_mut(&dst) {
            None => return,
            Some(Binding::Overt { payload_bytes }) => {
                *payload_bytes += pkt.payload.len() as u64;
                if pkt.kind == PacketKind::Handshake {
                    let mut reply = Packet::new(pkt.key.reversed(), PacketKind::Handshake, Vec::new());
                    reply.ack = pkt.seq;
                    self.sim.send(reply);
                }
                return;
            }
            Some(Binding::Listener(l)) => {
                if !l.ports.contains(&pkt.key.dst_port) && pkt.orig_dst.is_none() {
                    return;
                }
                match l.sessions.get(&peer) {
                    Some(&id) => (id, false),
                    None => {
                        let opens = pkt.kind == PacketKind::Handshake
                            || (l.midstream && pkt.kind == PacketKind::Data && !pkt.payload.is_empty());
                        if !opens {
                            return;
                        }
                        let local = match (l.midstream, pkt.orig_dst) {
                            (true, Some(orig)) => orig,
                            _ => (dst, pkt.key.dst_port),
                        };
                        let (stack, creds, app) = (l.stack.clone(), l.creds.clone(), l.app);
                        let seed = self.rng.next_u64();
                        let ep = match Endpoint::new(Role::Server, local, peer, &stack, &creds, seed, now) {
                            Ok(ep) => ep,
                            Err(e) => {
                                log::warn!("cannot accept session from {}:{}: {e}", peer.0, peer.1);
                                return;
                            }
                        };
                        let id = self.add_endpoint(ep);
                        if let Some(Binding::Listener(l)) = self.hosts.get_mut(&dst) {
                            l.sessions.insert(peer, id);
                        }
                        self.server_apps.insert(id, ServerApp { app, responded: false });
                        (id, true)
                    }
                }
            }
        };
        let mut out = Vec::new();
        if fresh {
            self.endpoints[id].accept(pkt.kind == PacketKind::Handshake, now, &mut out);
        }
        if pkt.kind != PacketKind::Handshake {
            self.endpoints[id].on_packet(&pkt, now, &mut out);
        }
        self.run_app(id, now, &mut out);
        self.transmit(out);
        self.reschedule(id);
    }

    fn run_app(&mut self, id: ChannelId, now: SimTime, out: &mut Vec<Packet>) {
        let Some(app) = self.server_apps.get_mut(&id) else {
            return;
        };
        let ep = &mut self.endpoints[id];
        match app.app {
            App::Sink => {}
            App::Echo => {
                if !ep.received.is_empty() {
                    let data = std::mem::take(&mut ep.received);
                    let _ = ep.write(&data, now, out);
                }
            }
            App::Respond(n) => {
                if !app.responded && ep.stats.app_bytes_delivered > 0 {
                    app.responded = true;
                    let mut data = vec![0u8; n];
                    self.rng.fill_bytes(&mut data);
                    let _ = ep.write(&data, now, out);
                }
            }
        }
    }

    fn on_timer(&mut self, token: u64) {
        let now = self.sim.now();
        if token >= PROBE_TOKEN_BASE {
            self.finish_probe((token - PROBE_TOKEN_BASE) as usize, now);
            return;
        }
        let id = token as usize;
        if self.scheduled[id].is_some_and(|s| s <= now) {
            self.scheduled[id] = None;
        }
        let mut out = Vec::new();
        self.endpoints[id].on_timer(now, &mut out);
        self.transmit(out);
        self.reschedule(id);
    }

    fn start_probes(&mut self) {
        let Some(censor) = self.sim.middlebox_mut::<Censor>() else {
            return;
        };
        let requests = censor.take_probe_requests();
        if requests.is_empty() {
            return;
        }
        let timeout = censor.policy().probe_timeout;
        for req in requests {
            let mut channels = Vec::new();
            let mut dh = vec![0u8; 0];
            dh.extend_from_slice(Keypair::generate(&GroupParams::default(), &mut self.rng).public_wire());
            for payload in [dh, req.first_payload.clone()] {
                if payload.is_empty() {
                    continue;
                }
                let src = Addr::new(PROBER_NET[0], PROBER_NET[1], (self.next_prober >> 8) as u8, self.next_prober as u8);
                self.next_prober = self.next_prober.wrapping_add(1).max(1);
                match self.probe_channel(src, req.target) {
                    Ok(id) => {
                        let _ = self.write(id, &payload);
                        channels.push(id);
                    }
                    Err(e) => log::warn!("probe setup failed: {e}"),
                }
            }
            let idx = self.probes.len();
            self.probes.push(ProbeTask {
                target: req.target,
                channels,
            });
            let at = self.sim.now() + timeout;
            self.sim.schedule_timer(at, PROBE_TOKEN_BASE + idx as u64);
        }
    }

    fn probe_channel(&mut self, src: Addr, target: (Addr, u16)) -> Result<ChannelId, LayerError> {
        let stack = self.plain_stack.clone();
        self.connect_port(src, target.0, Some(target.1), &stack, &Credentials::default())
    }

    fn finish_probe(&mut self, idx: usize, now: SimTime) {
        let task = &self.probes[idx];
        let server_bytes: u64 = task
            .channels
            .iter()
            .map(|&c| self.endpoints[c].stats.wire_bytes_received)
            .sum();
        let target = task.target;
        for c in task.channels.clone() {
            self.endpoints[c].close();
        }
        let confirmed = server_bytes > 0;
        if let Some(censor) = self.sim.middlebox_mut::<Censor>() {
            censor.finish_probe(target, confirmed, now);
        }
        self.probe_outcomes.push(ProbeOutcome {
            target,
            confirmed,
            server_bytes,
            finished_at: now,
        });
    }

    /// Processes one simulator event. Returns false when none is left.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.sim.step() else {
            return false;
        };
        match ev {
            SimEvent::Delivered(pkt) => self.dispatch(pkt),
            SimEvent::Timer(token) => self.on_timer(token),
        }
        self.start_probes();
        true
    }

    /// Processes every event up to and including `t`, then sets the clock
    /// to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.sim.peek_time().is_some_and(|p| p <= t) {
            self.step();
        }
        self.sim.advance_to(t);
    }

    pub fn run_for(&mut self, d: SimDuration) {
        let t = self.sim.now() + d;
        self.run_until(t);
    }

    /// Runs while `cond` holds and events remain no later than `deadline`.
    /// Returns whether `cond` still holds.
    pub fn run_while(&mut self, deadline: SimTime, mut cond: impl FnMut(&Network) -> bool) -> bool {
        while cond(self) {
            match self.sim.peek_time() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => {
                    self.sim.advance_to(deadline.max(self.sim.now()));
                    return cond(self);
                }
            }
        }
        false
    }

    /// Runs until no events remain or `limit` of virtual time has passed.
    pub fn settle(&mut self, limit: SimDuration) {
        let deadline = self.sim.now() + limit;
        while self.sim.peek_time().is_some_and(|t| t <= deadline) {
            self.step();
        }
    }

    /// Connects and waits for the channel to open.
    pub fn open_channel(&mut self, local: Addr, remote: Addr, stack: &ValidatedStack, creds: &Credentials) -> Result<ChannelId, LayerError> {
        let id = self.connect(local, remote, stack, creds)?;
        let deadline = self.endpoints[id].handshake_deadline().unwrap_or(self.sim.now());
        self.run_while(deadline, |n| matches!(n.endpoints[id].state, ChannelState::Connecting | ChannelState::Handshaking));
        match self.state(id) {
            ChannelState::Open => Ok(id),
            ChannelState::Failed(e) => Err(e),
            ChannelState::Closed => Err(LayerError::closed()),
            _ => {
                self.endpoints[id].on_timer(deadline, &mut Vec::new());
                Err(self.state(id).error().unwrap_or_else(|| LayerError::handshake("handshake timed out")))
            }
        }
    }

    /// Writes `data` and waits until the peer has acknowledged all of it.
    /// Fails when no progress is made for the send timeout.
    pub fn send(&mut self, ch: ChannelId, data: &[u8]) -> Result<(), LayerError> {
        self.write(ch, data)?;
        if let Some(ep) = self.endpoints.get_mut(ch) {
            ep.last_progress = ep.last_progress.max(self.sim.now());
        }
        loop {
            let ep = &self.endpoints[ch];
            if let Some(e) = ep.state.error() {
                return Err(e);
            }
            if ep.send_complete() {
                return Ok(());
            }
            let deadline = ep.last_progress + SEND_TIMEOUT;
            if self.sim.now() >= deadline {
                let err = LayerError::transport("send timed out");
                self.endpoints[ch].state = ChannelState::Failed(err.clone());
                return Err(err);
            }
            let before = ep.last_progress;
            self.run_while(deadline, |n| {
                let e = &n.endpoints[ch];
                !e.state.is_terminal() && !e.send_complete() && e.last_progress == before
            });
        }
    }

    /// Waits for `n` application bytes, or fails after `timeout`.
    pub fn recv_exact(&mut self, ch: ChannelId, n: usize, timeout: SimDuration) -> Result<Vec<u8>, LayerError> {
        if ch >= self.endpoints.len() {
            return Err(LayerError::closed());
        }
        let deadline = self.sim.now() + timeout;
        self.run_while(deadline, |net| {
            let e = &net.endpoints[ch];
            e.received.len() < n && !e.state.is_terminal()
        });
        let ep = &mut self.endpoints[ch];
        if ep.received.len() >= n {
            let rest = ep.received.split_off(n);
            return Ok(std::mem::replace(&mut ep.received, rest));
        }
        Err(ep
            .state
            .error()
            .unwrap_or_else(|| LayerError::transport("receive timed out")))
    }

    /// Random bytes from the network's seeded stream.
    pub fn random_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut v = vec![0u8; n];
        self.rng.fill(&mut v[..]);
        v
    }
}
