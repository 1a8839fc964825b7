//! Decoy-routing tag carried in the client-random slot of a TLS-like hello.
//!
//! The 32-byte nonce is `random(24) || HMAC(key, random)[..8]`. A router
//! holding the key recognises the tag; to anyone else the nonce is uniform.

use rand::RngCore;

use crate::crypto::{hmac_sha256, verify_truncated, SessionKeys};
use crate::error::LayerError;
use crate::model::{ControlBand, LayerKind};
use crate::time::SimTime;
use crate::transports::{HandshakeStatus, HandshakeStep, Role, SessionInit, SESSION_KEYS};

pub const NONCE_LEN: usize = 32;
const PREFIX_LEN: usize = 24;

/// Record header, handshake header and version; the client random follows.
const CLIENT_HELLO_HEAD: [u8; 11] = [0x16, 0x03, 0x01, 0x00, 0x26, 0x01, 0x00, 0x00, 0x22, 0x03, 0x03];
const SERVER_HELLO_HEAD: [u8; 11] = [0x16, 0x03, 0x03, 0x00, 0x26, 0x02, 0x00, 0x00, 0x22, 0x03, 0x03];
pub const RANDOM_OFFSET: usize = CLIENT_HELLO_HEAD.len();
pub const HELLO_LEN: usize = RANDOM_OFFSET + NONCE_LEN;

fn tag_of(key: &[u8; 32], prefix: &[u8]) -> [u8; 8] {
    hmac_sha256(key, &[b"decoy tag", prefix])[..8].try_into().expect("8 bytes")
}

/// A tagged nonce for the client-random slot.
pub fn tagged_nonce<R: RngCore>(key: &[u8; 32], rng: &mut R) -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce[..PREFIX_LEN]);
    let tag = tag_of(key, &nonce[..PREFIX_LEN]);
    nonce[PREFIX_LEN..].copy_from_slice(&tag);
    nonce
}

pub fn tag_verifies(key: &[u8; 32], nonce: &[u8]) -> bool {
    nonce.len() == NONCE_LEN && verify_truncated(&tag_of(key, &nonce[..PREFIX_LEN]), &nonce[PREFIX_LEN..])
}

pub fn client_hello(nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let mut out = CLIENT_HELLO_HEAD.to_vec();
    out.extend_from_slice(nonce);
    out
}

/// Client random of a hello at the front of `payload`, if it looks like one.
pub fn client_random(payload: &[u8]) -> Option<&[u8]> {
    (payload.len() >= HELLO_LEN && payload[..RANDOM_OFFSET] == CLIENT_HELLO_HEAD)
        .then(|| &payload[RANDOM_OFFSET..HELLO_LEN])
}

/// Rewrites the client-random slot of `hello` with a tagged nonce.
pub fn decoy_tag_embed<R: RngCore>(key: &[u8; 32], hello: &mut [u8], rng: &mut R) -> Result<(), LayerError> {
    if client_random(hello).is_none() {
        return Err(LayerError::handshake("not a client hello"));
    }
    hello[RANDOM_OFFSET..HELLO_LEN].copy_from_slice(&tagged_nonce(key, rng));
    Ok(())
}

/// Router-side check: should this payload's flow be deflected?
pub fn decoy_router_check(key: &[u8; 32], payload: &[u8]) -> bool {
    client_random(payload).is_some_and(|nonce| tag_verifies(key, nonce))
}

fn derive(key: &[u8; 32], client_random: &[u8], server_random: &[u8]) -> SessionKeys {
    let mut salt = client_random.to_vec();
    salt.extend_from_slice(server_random);
    SessionKeys::derive(key, &salt)
}

/// Session init between a decoy client and the covert proxy.
pub struct DecoyHandshake {
    role: Role,
    key: [u8; 32],
    own_random: [u8; NONCE_LEN],
    buf: Vec<u8>,
    state: HandshakeStatus,
}

impl DecoyHandshake {
    pub fn new<R: RngCore>(role: Role, key: [u8; 32], rng: &mut R) -> Self {
        let own_random = match role {
            Role::Client => tagged_nonce(&key, rng),
            Role::Server => {
                let mut r = [0u8; NONCE_LEN];
                rng.fill_bytes(&mut r);
                r
            }
        };
        DecoyHandshake {
            role,
            key,
            own_random,
            buf: Vec::new(),
            state: HandshakeStatus::Pending,
        }
    }
}

impl SessionInit for DecoyHandshake {
    fn initiate(&mut self, _now: SimTime) -> Vec<u8> {
        match self.role {
            Role::Client => client_hello(&self.own_random),
            Role::Server => Vec::new(),
        }
    }

    fn receive(&mut self, input: &[u8], _now: SimTime, band: &mut ControlBand) -> HandshakeStep {
        match self.state {
            HandshakeStatus::Pending => {}
            HandshakeStatus::Complete => return HandshakeStep::pending().with_leftover(input.to_vec()),
            ref other => return HandshakeStep::status(other.clone()),
        }
        self.buf.extend_from_slice(input);
        if self.buf.len() < HELLO_LEN {
            return HandshakeStep::pending();
        }
        let leftover = self.buf.split_off(HELLO_LEN);
        let hello = std::mem::take(&mut self.buf);
        let expected_head = match self.role {
            Role::Client => SERVER_HELLO_HEAD,
            Role::Server => CLIENT_HELLO_HEAD,
        };
        let peer_random = &hello[RANDOM_OFFSET..];
        if hello[..RANDOM_OFFSET] != expected_head {
            self.state = HandshakeStatus::Failed(LayerError::handshake("unexpected hello"));
            return HandshakeStep::status(self.state.clone());
        }
        let (keys, reply) = match self.role {
            Role::Server => {
                if !tag_verifies(&self.key, peer_random) {
                    self.state = HandshakeStatus::Silent;
                    return HandshakeStep::status(HandshakeStatus::Silent);
                }
                let mut reply = SERVER_HELLO_HEAD.to_vec();
                reply.extend_from_slice(&self.own_random);
                (derive(&self.key, peer_random, &self.own_random), reply)
            }
            Role::Client => (derive(&self.key, &self.own_random, peer_random), Vec::new()),
        };
        self.state = HandshakeStatus::Complete;
        band.post(LayerKind::Encryption, SESSION_KEYS, &keys.to_bytes());
        HandshakeStep {
            reply,
            leftover,
            status: HandshakeStatus::Complete,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keyed_router_sees_tag_and_wrong_key_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let key = [3u8; 32];
        let hello = client_hello(&tagged_nonce(&key, &mut rng));
        assert!(decoy_router_check(&key, &hello));
        assert!(!decoy_router_check(&[4u8; 32], &hello));
        let mut plain = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut plain);
        assert!(!decoy_router_check(&key, &client_hello(&plain)));
    }

    #[test]
    fn embed_rewrites_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hello = client_hello(&[0u8; NONCE_LEN]);
        decoy_tag_embed(&[5u8; 32], &mut hello, &mut rng).unwrap();
        assert!(decoy_router_check(&[5u8; 32], &hello));
        assert!(decoy_tag_embed(&[5u8; 32], &mut [0u8; 10], &mut rng).is_err());
    }

    #[test]
    fn proxy_and_client_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key = [6u8; 32];
        let mut c = DecoyHandshake::new(Role::Client, key, &mut rng);
        let mut s = DecoyHandshake::new(Role::Server, key, &mut rng);
        let (mut cb, mut sb) = (ControlBand::default(), ControlBand::default());
        let step = s.receive(&c.initiate(SimTime::ZERO), SimTime::ZERO, &mut sb);
        assert_eq!(step.status, HandshakeStatus::Complete);
        assert_eq!(c.receive(&step.reply, SimTime::ZERO, &mut cb).status, HandshakeStatus::Complete);
        assert_eq!(
            cb.get(LayerKind::Encryption, SESSION_KEYS),
            sb.get(LayerKind::Encryption, SESSION_KEYS)
        );
    }
}
