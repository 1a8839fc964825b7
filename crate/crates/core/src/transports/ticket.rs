//! Ticket-authenticated session init.
//!
//! A client redeems a 32-byte ticket obtained out of band. The first flight
//! is `ticket || padding || mark || mac`, where `mark` and `mac` are keyed by
//! the ticket secret, so only the issuing server can find the end of the
//! random padding. A server that cannot authenticate the client stays silent
//! forever. On success the server answers with a sealed next ticket.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crypto::{hkdf_expand, hmac_sha256, verify_truncated, SessionKeys};
use crate::error::LayerError;
use crate::model::{ControlBand, LayerKind};
use crate::time::SimTime;
use crate::transports::{HandshakeStatus, HandshakeStep, SessionInit, NEXT_TICKET, SESSION_KEYS};

pub const TICKET_LEN: usize = 32;
pub const MARK_LEN: usize = 16;
pub const MAC_LEN: usize = 16;
pub const DEFAULT_MAX_PAD: usize = 512;
/// Sealed `next_ticket || next_secret`.
pub const SERVER_REPLY_LEN: usize = 2 * TICKET_LEN + 16;

/// Opaque ticket plus the secret only the holder and the issuer know.
#[derive(Clone, PartialEq, Eq)]
pub struct ClientTicket {
    pub blob: [u8; TICKET_LEN],
    pub secret: [u8; 32],
}

impl ClientTicket {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.blob);
        out[32..].copy_from_slice(&self.secret);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Option<Self> {
        if raw.len() != 64 {
            return None;
        }
        let mut t = ClientTicket {
            blob: [0; 32],
            secret: [0; 32],
        };
        t.blob.copy_from_slice(&raw[..32]);
        t.secret.copy_from_slice(&raw[32..]);
        Some(t)
    }
}

impl std::fmt::Debug for ClientTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ClientTicket({:02x}{:02x}..)", self.blob[0], self.blob[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TicketReject {
    BadMac,
    Expired,
    Replayed,
}

/// Server-side ticket authority. Key ids are single-use for its lifetime.
pub struct TicketIssuer {
    master: [u8; 32],
    lifetime_secs: u64,
    used: HashSet<[u8; 8]>,
    rng: ChaCha8Rng,
}

impl TicketIssuer {
    pub fn new(master: [u8; 32], lifetime_secs: u64, seed: u64) -> Self {
        TicketIssuer {
            master,
            lifetime_secs,
            used: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn expiry_mask(&self, kid: &[u8]) -> [u8; 8] {
        let h = hmac_sha256(&self.master, &[b"mask", kid]);
        h[..8].try_into().expect("8 bytes")
    }

    fn secret_for(&self, kid: &[u8]) -> [u8; 32] {
        hmac_sha256(&self.master, &[b"secret", kid])
    }

    pub fn issue(&mut self, now: SimTime) -> ClientTicket {
        let mut kid = [0u8; 8];
        self.rng.fill_bytes(&mut kid);
        let expiry = (now.as_micros() / 1_000_000 + self.lifetime_secs).to_be_bytes();
        let mask = self.expiry_mask(&kid);
        let mut blob = [0u8; TICKET_LEN];
        blob[..8].copy_from_slice(&kid);
        for i in 0..8 {
            blob[8 + i] = expiry[i] ^ mask[i];
        }
        let mac = hmac_sha256(&self.master, &[b"mac", &kid, &expiry]);
        blob[16..].copy_from_slice(&mac[..16]);
        ClientTicket {
            blob,
            secret: self.secret_for(&kid),
        }
    }

    /// Checks a ticket without consuming it; returns its key id and secret.
    pub fn verify(&self, blob: &[u8], now: SimTime) -> Result<([u8; 8], [u8; 32]), TicketReject> {
        if blob.len() != TICKET_LEN {
            return Err(TicketReject::BadMac);
        }
        let kid: [u8; 8] = blob[..8].try_into().expect("8 bytes");
        let mask = self.expiry_mask(&kid);
        let mut expiry = [0u8; 8];
        for i in 0..8 {
            expiry[i] = blob[8 + i] ^ mask[i];
        }
        let mac = hmac_sha256(&self.master, &[b"mac", &kid, &expiry]);
        if !verify_truncated(&mac[..16], &blob[16..]) {
            return Err(TicketReject::BadMac);
        }
        if now.as_micros() / 1_000_000 >= u64::from_be_bytes(expiry) {
            return Err(TicketReject::Expired);
        }
        if self.used.contains(&kid) {
            return Err(TicketReject::Replayed);
        }
        Ok((kid, self.secret_for(&kid)))
    }

    /// Marks a key id as redeemed.
    pub fn consume(&mut self, kid: [u8; 8]) {
        self.used.insert(kid);
    }

    /// Verifies and consumes in one step.
    pub fn redeem(&mut self, blob: &[u8], now: SimTime) -> Result<[u8; 32], TicketReject> {
        let (kid, secret) = self.verify(blob, now)?;
        self.consume(kid);
        Ok(secret)
    }
}

fn mark(secret: &[u8; 32], blob: &[u8]) -> [u8; MARK_LEN] {
    hmac_sha256(secret, &[b"mark", blob])[..MARK_LEN].try_into().expect("16 bytes")
}

fn message_mac(secret: &[u8; 32], blob: &[u8], pad: &[u8], mark: &[u8]) -> [u8; MAC_LEN] {
    hmac_sha256(secret, &[b"msg", blob, pad, mark])[..MAC_LEN].try_into().expect("16 bytes")
}

fn reply_cipher(secret: &[u8; 32], mac: &[u8]) -> ChaCha20Poly1305 {
    let k = hkdf_expand(secret, mac, b"ticket reply");
    ChaCha20Poly1305::new(Key::from_slice(&k))
}

fn post_keys(band: &mut ControlBand, secret: &[u8; 32], mac: &[u8]) {
    band.post(LayerKind::Encryption, SESSION_KEYS, &SessionKeys::derive(secret, mac).to_bytes());
}

pub struct TicketClient {
    ticket: ClientTicket,
    pad: Vec<u8>,
    mac: [u8; MAC_LEN],
    buf: Vec<u8>,
    done: bool,
}

impl TicketClient {
    pub fn new<R: RngCore>(ticket: ClientTicket, max_pad: usize, rng: &mut R) -> Self {
        let len = rng.gen_range(0..=max_pad);
        let mut pad = vec![0u8; len];
        rng.fill_bytes(&mut pad);
        TicketClient {
            ticket,
            pad,
            mac: [0; MAC_LEN],
            buf: Vec::new(),
            done: false,
        }
    }
}

impl SessionInit for TicketClient {
    fn initiate(&mut self, _now: SimTime) -> Vec<u8> {
        let m = mark(&self.ticket.secret, &self.ticket.blob);
        self.mac = message_mac(&self.ticket.secret, &self.ticket.blob, &self.pad, &m);
        let mut out = Vec::with_capacity(TICKET_LEN + self.pad.len() + MARK_LEN + MAC_LEN);
        out.extend_from_slice(&self.ticket.blob);
        out.extend_from_slice(&self.pad);
        out.extend_from_slice(&m);
        out.extend_from_slice(&self.mac);
        out
    }

    fn receive(&mut self, input: &[u8], _now: SimTime, band: &mut ControlBand) -> HandshakeStep {
        if self.done {
            return HandshakeStep::pending().with_leftover(input.to_vec());
        }
        self.buf.extend_from_slice(input);
        if self.buf.len() < SERVER_REPLY_LEN {
            return HandshakeStep::pending();
        }
        let leftover = self.buf.split_off(SERVER_REPLY_LEN);
        let sealed = std::mem::take(&mut self.buf);
        let next = reply_cipher(&self.ticket.secret, &self.mac)
            .decrypt(Nonce::from_slice(&[0u8; 12]), sealed.as_slice())
            .ok()
            .and_then(|raw| ClientTicket::from_bytes(&raw));
        let Some(next) = next else {
            return HandshakeStep::status(HandshakeStatus::Failed(LayerError::handshake(
                "server reply failed authentication",
            )));
        };
        self.done = true;
        post_keys(band, &self.ticket.secret, &self.mac);
        band.post(LayerKind::SessionInit, NEXT_TICKET, &next.to_bytes());
        HandshakeStep {
            reply: Vec::new(),
            leftover,
            status: HandshakeStatus::Complete,
        }
    }
}

enum ServerState {
    Reading,
    Done,
    Silent,
}

pub struct TicketServer {
    issuer: Arc<Mutex<TicketIssuer>>,
    max_pad: usize,
    buf: Vec<u8>,
    state: ServerState,
}

impl TicketServer {
    pub fn new(issuer: Arc<Mutex<TicketIssuer>>, max_pad: usize) -> Self {
        TicketServer {
            issuer,
            max_pad,
            buf: Vec::new(),
            state: ServerState::Reading,
        }
    }

    fn silent(&mut self) -> HandshakeStep {
        self.state = ServerState::Silent;
        self.buf.clear();
        HandshakeStep::status(HandshakeStatus::Silent)
    }
}

impl SessionInit for TicketServer {
    fn initiate(&mut self, _now: SimTime) -> Vec<u8> {
        Vec::new()
    }

    fn receive(&mut self, input: &[u8], now: SimTime, band: &mut ControlBand) -> HandshakeStep {
        match self.state {
            ServerState::Done => return HandshakeStep::pending().with_leftover(input.to_vec()),
            ServerState::Silent => return HandshakeStep::status(HandshakeStatus::Silent),
            ServerState::Reading => {}
        }
        self.buf.extend_from_slice(input);
        if self.buf.len() < TICKET_LEN {
            return HandshakeStep::pending();
        }
        let verified = self
            .issuer
            .lock()
            .expect("issuer lock")
            .verify(&self.buf[..TICKET_LEN], now);
        let Ok((kid, secret)) = verified else {
            return self.silent();
        };
        let blob = self.buf[..TICKET_LEN].to_vec();
        let m = mark(&secret, &blob);
        let search_end = (TICKET_LEN + self.max_pad + MARK_LEN).min(self.buf.len());
        let found = self.buf[TICKET_LEN..search_end]
            .windows(MARK_LEN)
            .position(|w| w == m)
            .map(|i| i + TICKET_LEN);
        let Some(at) = found else {
            if self.buf.len() >= TICKET_LEN + self.max_pad + MARK_LEN {
                return self.silent();
            }
            return HandshakeStep::pending();
        };
        if self.buf.len() < at + MARK_LEN + MAC_LEN {
            return HandshakeStep::pending();
        }
        let pad = &self.buf[TICKET_LEN..at];
        let mac = message_mac(&secret, &blob, pad, &m);
        if !verify_truncated(&mac, &self.buf[at + MARK_LEN..at + MARK_LEN + MAC_LEN]) {
            return self.silent();
        }
        let leftover = self.buf.split_off(at + MARK_LEN + MAC_LEN);
        self.buf.clear();
        let next = {
            let mut issuer = self.issuer.lock().expect("issuer lock");
            issuer.consume(kid);
            issuer.issue(now)
        };
        let reply = reply_cipher(&secret, &mac)
            .encrypt(Nonce::from_slice(&[0u8; 12]), next.to_bytes().as_slice())
            .expect("sealing a fixed-size ticket cannot fail");
        self.state = ServerState::Done;
        post_keys(band, &secret, &mac);
        HandshakeStep {
            reply,
            leftover,
            status: HandshakeStatus::Complete,
        }
    }
}
