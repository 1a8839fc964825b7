//! Concrete layer implementations and the interfaces that tie them into a
//! channel pipeline.
//!
//! Data flows top-down as `app -> ENC -> MUX -> OBF -> packetizer -> TRN`.
//! Session-init bytes enter just below ENC, so every lower layer also shapes
//! and disguises the handshake.

pub mod aead;
pub mod decoy;
pub mod hopping;
pub mod http;
pub mod mux;
pub mod presets;
pub mod shaping;
pub mod ticket;
pub mod trace;
pub mod uniform_dh;

use std::sync::{Arc, Mutex};

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::LayerError;
use crate::model::{ControlBand, Implementation, LayerKind, LayerSpec, Params, Registry};
use crate::time::{SimDuration, SimTime};

pub use hopping::PortSchedule;
pub use ticket::{ClientTicket, TicketIssuer};

/// Largest packet payload the simulated wire carries.
pub const MTU: usize = 1500;

/// Control-band key under which session init hands keys to Encryption.
pub const SESSION_KEYS: &str = "session-keys";
/// Control-band key under which a ticket client stores its next ticket.
pub const NEXT_TICKET: &str = "next-ticket";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn outbound(self) -> Direction {
        match self {
            Role::Client => Direction::ClientToServer,
            Role::Server => Direction::ServerToClient,
        }
    }

    pub fn inbound(self) -> Direction {
        match self {
            Role::Client => Direction::ServerToClient,
            Role::Server => Direction::ClientToServer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HandshakeStatus {
    Pending,
    /// Keys were posted to the control band.
    Complete,
    /// Authentication failed; emit nothing further and close after the
    /// handshake timeout.
    Silent,
    Failed(LayerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeStep {
    /// Bytes to send to the peer.
    pub reply: Vec<u8>,
    /// Bytes received past the end of the handshake; they belong to the
    /// layers above.
    pub leftover: Vec<u8>,
    pub status: HandshakeStatus,
}

impl HandshakeStep {
    pub fn pending() -> Self {
        HandshakeStep {
            reply: Vec::new(),
            leftover: Vec::new(),
            status: HandshakeStatus::Pending,
        }
    }

    pub fn status(status: HandshakeStatus) -> Self {
        HandshakeStep {
            status,
            ..Self::pending()
        }
    }

    pub fn with_leftover(mut self, leftover: Vec<u8>) -> Self {
        self.leftover = leftover;
        self
    }
}

/// A session-initialization layer.
pub trait SessionInit: Send {
    /// First flight; empty for the responding side.
    fn initiate(&mut self, now: SimTime) -> Vec<u8>;

    /// Consumes peer bytes. On completion the implementation posts
    /// [`SESSION_KEYS`] to the Encryption entry of `band`.
    fn receive(&mut self, input: &[u8], now: SimTime, band: &mut ControlBand) -> HandshakeStep;
}

/// A byte-stream transformation (ENC, MUX, OBF).
pub trait StreamLayer: Send {
    fn kind(&self) -> LayerKind;

    /// Picks up control records addressed to this layer.
    fn on_control(&mut self, _band: &mut ControlBand) {}

    fn encode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError>;

    fn decode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError>;
}

/// Cuts the outbound byte stream into packet payloads and schedules them.
pub trait Packetizer: Send {
    /// Queues bytes; returns how many were accepted.
    fn push(&mut self, data: &[u8]) -> usize;

    /// Next payload whose send time has arrived.
    fn poll(&mut self, now: SimTime) -> Option<Vec<u8>>;

    /// When the next payload becomes ready, or `None` if nothing is queued.
    fn next_ready(&self, now: SimTime) -> Option<SimTime>;

    /// Bytes queued but not yet emitted.
    fn pending(&self) -> usize;

    /// Recovers stream bytes from a received payload.
    fn unpack(&mut self, payload: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError>;
}

/// Default packetizer when no TIM-LEN layer is present: MTU-sized cuts sent
/// as soon as they are queued.
#[derive(Debug, Default)]
pub struct MtuPacketizer {
    queue: std::collections::VecDeque<u8>,
}

impl Packetizer for MtuPacketizer {
    fn push(&mut self, data: &[u8]) -> usize {
        self.queue.extend(data);
        data.len()
    }

    fn poll(&mut self, _now: SimTime) -> Option<Vec<u8>> {
        if self.queue.is_empty() {
            return None;
        }
        let n = self.queue.len().min(MTU);
        Some(self.queue.drain(..n).collect())
    }

    fn next_ready(&self, now: SimTime) -> Option<SimTime> {
        (!self.queue.is_empty()).then_some(now)
    }

    fn pending(&self) -> usize {
        self.queue.len()
    }

    fn unpack(&mut self, payload: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        out.extend_from_slice(payload);
        Ok(())
    }
}

/// Secrets an endpoint may need to build its session-init layer.
#[derive(Clone, Default)]
pub struct Credentials {
    /// Ticket a client redeems.
    pub ticket: Option<ClientTicket>,
    /// Ticket authority on the server side.
    pub issuer: Option<Arc<Mutex<TicketIssuer>>>,
    /// Shared deflection key for decoy routing.
    pub decoy_key: Option<[u8; 32]>,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credentials")
            .field("ticket", &self.ticket.is_some())
            .field("issuer", &self.issuer.is_some())
            .field("decoy_key", &self.decoy_key.is_some())
            .finish()
    }
}

/// Transport parameters of `trn:sim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    pub port: u16,
    pub hopping: Option<PortSchedule>,
    pub ttl: u8,
    /// TTL of a decoy RST sent right after the handshake, meant to expire
    /// between the censor and the server.
    pub rst_ttl: Option<u8>,
    pub ignore_rst: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            port: 443,
            hopping: None,
            ttl: 64,
            rst_ttl: None,
            ignore_rst: false,
        }
    }
}

impl TransportConfig {
    pub fn from_params(params: &Params) -> Result<Self, String> {
        let mut cfg = TransportConfig {
            port: params.parse_or("port", 443u16)?,
            ttl: params.parse_or("ttl", 64u8)?,
            ignore_rst: params.parse_or("ignore_rst", false)?,
            ..Default::default()
        };
        if cfg.ttl == 0 {
            return Err("parameter `ttl` must be at least 1".into());
        }
        if params.get("rst_ttl").is_some() {
            cfg.rst_ttl = Some(params.parse_or("rst_ttl", 1u8)?);
        }
        if params.get("hop").is_some() {
            let (lo, hi) = params.range_or("hop", (0, 0))?;
            if hi > u16::MAX as u32 || lo == 0 {
                return Err("parameter `hop` must be a port range within 1-65535".into());
            }
            let seed: u64 = params.parse_or("hop_seed", 0u64)?;
            cfg.hopping = Some(PortSchedule::new(seed, (lo as u16..=hi as u16).collect()));
        }
        Ok(cfg)
    }

    /// Ports the server side must listen on.
    pub fn listen_ports(&self) -> Vec<u16> {
        match &self.hopping {
            Some(schedule) => schedule.ports().to_vec(),
            None => vec![self.port],
        }
    }

    /// Destination port of the `index`-th packet a client sends.
    pub fn port_for(&self, index: u64) -> u16 {
        match &self.hopping {
            Some(schedule) => schedule.port(index),
            None => self.port,
        }
    }
}

fn check_known(params: &Params, known: &[&str]) -> Result<(), String> {
    match params.keys().find(|k| !known.contains(k)) {
        Some(k) => Err(format!("unknown parameter `{k}`")),
        None => Ok(()),
    }
}

fn check_none(params: &Params) -> Result<(), String> {
    check_known(params, &[])
}

fn check_ticket(params: &Params) -> Result<(), String> {
    check_known(params, &["pad", "lifetime"])?;
    let pad: usize = params.parse_or("pad", ticket::DEFAULT_MAX_PAD)?;
    if pad > 4096 {
        return Err("parameter `pad` must be at most 4096".into());
    }
    params.parse_or("lifetime", 3600u64)?;
    Ok(())
}

fn check_http(params: &Params) -> Result<(), String> {
    check_known(params, &["encoding", "host"])?;
    http::FormatTemplate::from_params(params).map(|_| ())
}

fn check_iid(params: &Params) -> Result<(), String> {
    shaping::IidParams::from_params(params).map(|_| ())
}

fn check_trace(params: &Params) -> Result<(), String> {
    check_known(params, &["file", "model", "pad", "queue"])?;
    match (params.get("file"), params.get("model")) {
        (Some(_), Some(_)) => Err("give either `file` or `model`, not both".into()),
        (None, None) => Err("trace shaping needs `file` or `model`".into()),
        (Some(path), None) => trace::cached_file(path).map(|_| ()).map_err(|e| e.to_string()),
        (None, Some(name)) => trace::named_model(name).map(|_| ()).map_err(|e| e.to_string()),
    }?;
    shaping::Filler::from_params(params)?;
    params.parse_or("queue", shaping::DEFAULT_QUEUE_LIMIT)?;
    Ok(())
}

fn check_sim(params: &Params) -> Result<(), String> {
    check_known(params, &["port", "hop", "hop_seed", "ttl", "rst_ttl", "ignore_rst"])?;
    TransportConfig::from_params(params).map(|_| ())
}

const DECOY_CARRIERS: &[LayerKind] = &[LayerKind::Encryption];

/// Registry holding every implementation in this crate.
pub fn standard_registry() -> Registry {
    let mut r = Registry::empty();
    let entries: [(LayerKind, &'static str, Option<&'static [LayerKind]>, crate::model::ParamCheck); 9] = [
        (LayerKind::SessionInit, "udh", None, check_none),
        (LayerKind::SessionInit, "ticket", None, check_ticket),
        (LayerKind::SessionInit, "decoy", Some(DECOY_CARRIERS), check_none),
        (LayerKind::Encryption, "aead", None, check_none),
        (LayerKind::Multiplexing, "frame", None, check_none),
        (LayerKind::ContentObfuscation, "http", None, check_http),
        (LayerKind::TimingLengthObfuscation, "iid", None, check_iid),
        (LayerKind::TimingLengthObfuscation, "trace", None, check_trace),
        (LayerKind::Transport, "sim", None, check_sim),
    ];
    for (kind, id, carriers, check) in entries {
        r.register(Implementation {
            kind,
            id,
            carriers,
            check,
        });
    }
    r
}

fn unknown(spec: &LayerSpec) -> LayerError {
    LayerError::new(
        crate::error::ErrorKind::Validation,
        format!("no builder for `{}`", spec),
    )
}

pub fn build_session_init(
    spec: &LayerSpec,
    role: Role,
    creds: &Credentials,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn SessionInit>, LayerError> {
    match spec.implementation.as_str() {
        "udh" => Ok(Box::new(uniform_dh::UniformDhHandshake::new(
            role,
            uniform_dh::GroupParams::default(),
            rng,
        ))),
        "ticket" => {
            let max_pad = spec
                .params
                .parse_or("pad", ticket::DEFAULT_MAX_PAD)
                .map_err(LayerError::handshake)?;
            match role {
                Role::Client => {
                    let t = creds
                        .ticket
                        .clone()
                        .ok_or_else(|| LayerError::handshake("ticket client has no ticket"))?;
                    Ok(Box::new(ticket::TicketClient::new(t, max_pad, rng)))
                }
                Role::Server => {
                    let issuer = creds
                        .issuer
                        .clone()
                        .ok_or_else(|| LayerError::handshake("ticket server has no issuer"))?;
                    Ok(Box::new(ticket::TicketServer::new(issuer, max_pad)))
                }
            }
        }
        "decoy" => {
            let key = creds
                .decoy_key
                .ok_or_else(|| LayerError::handshake("decoy layer has no deflection key"))?;
            Ok(Box::new(decoy::DecoyHandshake::new(role, key, rng)))
        }
        _ => Err(unknown(spec)),
    }
}

pub fn build_stream_layer(spec: &LayerSpec, role: Role) -> Result<Box<dyn StreamLayer>, LayerError> {
    match (spec.kind, spec.implementation.as_str()) {
        (LayerKind::Encryption, "aead") => Ok(Box::new(aead::AeadLayer::new(role))),
        (LayerKind::Multiplexing, "frame") => Ok(Box::new(mux::MuxLayer::new())),
        (LayerKind::ContentObfuscation, "http") => {
            let template = http::FormatTemplate::from_params(&spec.params)
                .map_err(|e| LayerError::new(crate::error::ErrorKind::Validation, e))?;
            Ok(Box::new(http::HttpLayer::new(role, template)))
        }
        _ => Err(unknown(spec)),
    }
}

/// Builds the packetizer for an optional TIM-LEN entry. `rng` drives the
/// per-channel sampling; distribution shapes come from the parameters.
pub fn build_packetizer(spec: Option<&LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Box<dyn Packetizer>, LayerError> {
    let bad = |e: String| LayerError::new(crate::error::ErrorKind::Validation, e);
    let Some(spec) = spec else {
        return Ok(Box::new(MtuPacketizer::default()));
    };
    let seed = rng.next_u64();
    match spec.implementation.as_str() {
        "iid" => {
            let p = shaping::IidParams::from_params(&spec.params).map_err(bad)?;
            Ok(Box::new(shaping::Shaper::new(p.dists(), p.filler, p.queue_limit, seed)))
        }
        "trace" => {
            let model = match (spec.params.get("file"), spec.params.get("model")) {
                (Some(path), _) => trace::cached_file(path),
                (None, Some(name)) => trace::named_model(name),
                (None, None) => return Err(bad("trace shaping needs `file` or `model`".into())),
            }
            .map_err(|e| bad(e.to_string()))?;
            let filler = shaping::Filler::from_params(&spec.params).map_err(bad)?;
            let queue = spec
                .params
                .parse_or("queue", shaping::DEFAULT_QUEUE_LIMIT)
                .map_err(bad)?;
            Ok(Box::new(shaping::Shaper::new(model.dists(), filler, queue, seed)))
        }
        _ => Err(unknown(spec)),
    }
}

/// Handshake timeout used when a caller does not override it.
pub const HANDSHAKE_TIMEOUT: SimDuration = SimDuration(10_000_000);
/// Send timeout without progress.
pub const SEND_TIMEOUT: SimDuration = SimDuration(30_000_000);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_stack, StackDescriptor};

    #[test]
    fn roles_map_to_directions() {
        assert_eq!(Role::Client.outbound(), Direction::ClientToServer);
        assert_eq!(Role::Server.outbound(), Direction::ServerToClient);
        assert_eq!(Role::Client.inbound(), Role::Server.outbound());
    }

    #[test]
    fn canonical_stack_validates_against_standard_registry() {
        let d = StackDescriptor::parse(
            "full",
            "si:ticket, enc:aead, mux:frame, obf:http, timlen:iid{lengths=100-1400}, trn:sim",
        )
        .unwrap();
        validate_stack(&standard_registry(), &d).unwrap();
    }

    #[test]
    fn bad_parameters_are_rule_seven() {
        let reg = standard_registry();
        let d = StackDescriptor::parse("x", "trn:sim{ttl=0}").unwrap();
        assert_eq!(validate_stack(&reg, &d).unwrap_err().rule(), Some(crate::error::Rule::Parameter));
        let d = StackDescriptor::parse("x", "trn:sim{colour=red}").unwrap();
        assert!(validate_stack(&reg, &d).unwrap_err().detail.contains("colour"));
    }

    #[test]
    fn decoy_only_runs_over_encryption() {
        let reg = standard_registry();
        let ok = StackDescriptor::parse("d", "si:decoy, enc:aead, trn:sim").unwrap();
        validate_stack(&reg, &ok).unwrap();
        let bad = StackDescriptor::parse("d", "si:decoy, enc:aead, obf:http, trn:sim").unwrap();
        assert_eq!(validate_stack(&reg, &bad).unwrap_err().rule(), Some(crate::error::Rule::Placement));
    }

    #[test]
    fn mtu_packetizer_cuts_at_mtu() {
        let mut p = MtuPacketizer::default();
        p.push(&vec![7u8; 3001]);
        let sizes: Vec<usize> = std::iter::from_fn(|| p.poll(SimTime::ZERO)).map(|v| v.len()).collect();
        assert_eq!(sizes, vec![1500, 1500, 1]);
        assert_eq!(p.next_ready(SimTime::ZERO), None);
    }

    #[test]
    fn hopping_config_lists_every_port() {
        let cfg = TransportConfig::from_params(&Params::new().with("hop", "2000-2100").with("hop_seed", 7)).unwrap();
        assert_eq!(cfg.listen_ports().len(), 101);
        let p = cfg.port_for(3);
        assert!((2000..=2100).contains(&p));
    }
}
