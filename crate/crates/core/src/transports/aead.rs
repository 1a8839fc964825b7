//! Authenticated record encryption.
//!
//! Each record is `masked_len (2) || ciphertext || tag (16)`. The length is
//! XOR-masked with a keyed hash of the record counter so the whole output is
//! indistinguishable from random bytes. Nonces are the per-direction record
//! counter, so records must be opened in the order they were sealed.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};

use crate::crypto::{hkdf_expand, hmac_sha256, SessionKeys};
use crate::error::LayerError;
use crate::model::{ControlBand, LayerKind};
use crate::transports::{Direction, Role, StreamLayer, SESSION_KEYS};

pub const TAG_LEN: usize = 16;
pub const MAX_RECORD_PLAINTEXT: usize = 16 * 1024;

fn nonce_for(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    *Nonce::from_slice(&n)
}

struct DirectionKeys {
    cipher: ChaCha20Poly1305,
    mask_key: [u8; 32],
}

impl DirectionKeys {
    fn new(keys: &SessionKeys, direction: Direction) -> Self {
        let base = match direction {
            Direction::ClientToServer => &keys.client_to_server,
            Direction::ServerToClient => &keys.server_to_client,
        };
        let record_key = hkdf_expand(base, b"", b"record");
        DirectionKeys {
            cipher: ChaCha20Poly1305::new(Key::from_slice(&record_key)),
            mask_key: hkdf_expand(base, b"", b"length-mask"),
        }
    }

    fn mask(&self, counter: u64) -> [u8; 2] {
        let h = hmac_sha256(&self.mask_key, &[&counter.to_be_bytes()]);
        [h[0], h[1]]
    }
}

/// Sealing half of one direction.
pub struct Sealer {
    keys: DirectionKeys,
    counter: u64,
}

impl Sealer {
    pub fn new(keys: &SessionKeys, direction: Direction) -> Self {
        Sealer {
            keys: DirectionKeys::new(keys, direction),
            counter: 0,
        }
    }

    /// Seals `plaintext` into one or more records appended to `out`. An empty
    /// plaintext produces no records.
    pub fn seal_into(&mut self, plaintext: &[u8], out: &mut Vec<u8>) {
        for chunk in plaintext.chunks(MAX_RECORD_PLAINTEXT) {
            let ct = self
                .keys
                .cipher
                .encrypt(&nonce_for(self.counter), chunk)
                .expect("chacha20poly1305 encryption is infallible for bounded input");
            let len = (ct.len() as u16).to_be_bytes();
            let mask = self.keys.mask(self.counter);
            out.push(len[0] ^ mask[0]);
            out.push(len[1] ^ mask[1]);
            out.extend_from_slice(&ct);
            self.counter += 1;
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(plaintext.len() + 64);
        self.seal_into(plaintext, &mut out);
        out
    }
}

/// Opening half of one direction; accepts ciphertext in arbitrary pieces.
pub struct Opener {
    keys: DirectionKeys,
    counter: u64,
    buf: Vec<u8>,
}

impl Opener {
    pub fn new(keys: &SessionKeys, direction: Direction) -> Self {
        Opener {
            keys: DirectionKeys::new(keys, direction),
            counter: 0,
            buf: Vec::new(),
        }
    }

    pub fn open_into(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        self.buf.extend_from_slice(data);
        let mut pos = 0;
        loop {
            let rest = &self.buf[pos..];
            if rest.len() < 2 {
                break;
            }
            let mask = self.keys.mask(self.counter);
            let len = u16::from_be_bytes([rest[0] ^ mask[0], rest[1] ^ mask[1]]) as usize;
            if !(TAG_LEN..=MAX_RECORD_PLAINTEXT + TAG_LEN).contains(&len) {
                return Err(LayerError::integrity("record length out of range"));
            }
            if rest.len() < 2 + len {
                break;
            }
            let pt = self
                .keys
                .cipher
                .decrypt(&nonce_for(self.counter), &rest[2..2 + len])
                .map_err(|_| LayerError::integrity("record authentication failed"))?;
            out.extend_from_slice(&pt);
            self.counter += 1;
            pos += 2 + len;
        }
        self.buf.drain(..pos);
        Ok(())
    }

    /// Opens a complete ciphertext; trailing partial records are an error.
    pub fn open(&mut self, ciphertext: &[u8]) -> Result<Vec<u8>, LayerError> {
        let mut out = Vec::with_capacity(ciphertext.len());
        self.open_into(ciphertext, &mut out)?;
        if !self.buf.is_empty() {
            return Err(LayerError::integrity("truncated record"));
        }
        Ok(out)
    }
}

/// Stateless convenience: seal `plaintext` as the first records of `direction`.
pub fn enc_seal(keys: &SessionKeys, plaintext: &[u8], direction: Direction) -> Vec<u8> {
    Sealer::new(keys, direction).seal(plaintext)
}

pub fn enc_open(keys: &SessionKeys, ciphertext: &[u8], direction: Direction) -> Result<Vec<u8>, LayerError> {
    Opener::new(keys, direction).open(ciphertext)
}

/// Encryption layer; inert until session keys are installed.
pub struct AeadLayer {
    role: Role,
    sealer: Option<Sealer>,
    opener: Option<Opener>,
}

impl AeadLayer {
    pub fn new(role: Role) -> Self {
        AeadLayer {
            role,
            sealer: None,
            opener: None,
        }
    }

    pub fn install_keys(&mut self, keys: &SessionKeys) {
        self.sealer = Some(Sealer::new(keys, self.role.outbound()));
        self.opener = Some(Opener::new(keys, self.role.inbound()));
    }
}

impl StreamLayer for AeadLayer {
    fn kind(&self) -> LayerKind {
        LayerKind::Encryption
    }

    fn on_control(&mut self, band: &mut ControlBand) {
        if let Some(keys) = band
            .take(LayerKind::Encryption, SESSION_KEYS)
            .and_then(|raw| SessionKeys::from_bytes(&raw))
        {
            self.install_keys(&keys);
        }
    }

    fn encode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        let sealer = self
            .sealer
            .as_mut()
            .ok_or_else(|| LayerError::handshake("encryption keys not established"))?;
        sealer.seal_into(data, out);
        Ok(())
    }

    fn decode(&mut self, data: &[u8], out: &mut Vec<u8>) -> Result<(), LayerError> {
        let opener = self
            .opener
            .as_mut()
            .ok_or_else(|| LayerError::handshake("encryption keys not established"))?;
        opener.open_into(data, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keys() -> SessionKeys {
        SessionKeys::derive(b"test secret", b"salt")
    }

    fn random(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    #[test]
    fn seal_open_identity_64k() {
        let pt = random(64 * 1024, 1);
        let ct = enc_seal(&keys(), &pt, Direction::ClientToServer);
        assert_eq!(enc_open(&keys(), &ct, Direction::ClientToServer).unwrap(), pt);
    }

    #[test]
    fn empty_plaintext_is_empty_ciphertext() {
        assert!(enc_seal(&keys(), &[], Direction::ClientToServer).is_empty());
    }

    #[test]
    fn flipped_byte_fails_integrity() {
        let pt = random(4096, 2);
        let mut ct = enc_seal(&keys(), &pt, Direction::ServerToClient);
        ct[100] ^= 0x01;
        let err = enc_open(&keys(), &ct, Direction::ServerToClient).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Integrity);
    }

    #[test]
    fn wrong_direction_fails() {
        let ct = enc_seal(&keys(), b"hello", Direction::ClientToServer);
        assert!(enc_open(&keys(), &ct, Direction::ServerToClient).is_err());
    }

    #[test]
    fn opener_accepts_byte_at_a_time() {
        let pt = random(40_000, 3);
        let ct = enc_seal(&keys(), &pt, Direction::ClientToServer);
        let mut opener = Opener::new(&keys(), Direction::ClientToServer);
        let mut out = Vec::new();
        for b in &ct {
            opener.open_into(std::slice::from_ref(b), &mut out).unwrap();
        }
        assert_eq!(out, pt);
    }

    #[test]
    fn layer_requires_keys() {
        let mut layer = AeadLayer::new(Role::Client);
        let mut out = Vec::new();
        assert_eq!(layer.encode(b"x", &mut out).unwrap_err().kind, ErrorKind::Handshake);
        layer.install_keys(&keys());
        layer.encode(b"x", &mut out).unwrap();
        let mut server = AeadLayer::new(Role::Server);
        server.install_keys(&keys());
        let mut back = Vec::new();
        server.decode(&out, &mut back).unwrap();
        assert_eq!(back, b"x");
    }
}
