//! Anonymous Diffie-Hellman whose public values are uniform byte strings.
//!
//! Public values live in the quadratic-residue subgroup generated by 2. Each
//! side sends either `X` or `p - X` with equal probability; since `p = 3 mod
//! 4`, `-1` is a non-residue and the two halves together cover `[1, p-1]`
//! uniformly. Private exponents are even, so `(p - X)^y = X^y` and both
//! encodings yield the same shared secret.

use num_bigint::BigUint;
use rand::{Rng, RngCore};

use crate::crypto::SessionKeys;
use crate::error::LayerError;
use crate::model::{ControlBand, LayerKind};
use crate::time::SimTime;
use crate::transports::{HandshakeStatus, HandshakeStep, Role, SessionInit, SESSION_KEYS};

/// RFC 3526 2048-bit MODP group (safe prime, generator 2).
const GROUP14_PRIME: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD1",
    "29024E088A67CC74020BBEA63B139B22514A08798E3404DD",
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245",
    "E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3D",
    "C2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F",
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D",
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9",
    "DE2BCBF6955817183995497CEA956AE515D2261898FA0510",
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

pub const PUBLIC_LEN: usize = 256;
const EXPONENT_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    pub prime: BigUint,
    pub generator: BigUint,
}

impl Default for GroupParams {
    fn default() -> Self {
        GroupParams {
            prime: BigUint::parse_bytes(GROUP14_PRIME.as_bytes(), 16).expect("valid hex"),
            generator: BigUint::from(2u32),
        }
    }
}

impl GroupParams {
    fn to_fixed(&self, v: &BigUint) -> [u8; PUBLIC_LEN] {
        let raw = v.to_bytes_be();
        let mut out = [0u8; PUBLIC_LEN];
        out[PUBLIC_LEN - raw.len()..].copy_from_slice(&raw);
        out
    }
}

pub struct Keypair {
    private: BigUint,
    public_wire: [u8; PUBLIC_LEN],
}

impl Keypair {
    pub fn generate<R: RngCore>(group: &GroupParams, rng: &mut R) -> Self {
        let mut exp = [0u8; EXPONENT_BYTES];
        rng.fill_bytes(&mut exp);
        exp[EXPONENT_BYTES - 1] &= 0xfe;
        exp[0] |= 0x80;
        let private = BigUint::from_bytes_be(&exp);
        let public = group.generator.modpow(&private, &group.prime);
        let encoded = if rng.gen::<bool>() {
            &group.prime - &public
        } else {
            public
        };
        Keypair {
            private,
            public_wire: group.to_fixed(&encoded),
        }
    }

    pub fn public_wire(&self) -> &[u8; PUBLIC_LEN] {
        &self.public_wire
    }

    /// Shared secret with the peer's wire-encoded public value.
    pub fn agree(&self, group: &GroupParams, peer: &[u8]) -> Result<[u8; PUBLIC_LEN], LayerError> {
        if peer.len() != PUBLIC_LEN {
            return Err(LayerError::handshake("public value has wrong length"));
        }
        let y = BigUint::from_bytes_be(peer);
        let two = BigUint::from(2u32);
        if y < two || y > &group.prime - &two {
            return Err(LayerError::handshake("public value outside the group"));
        }
        Ok(group.to_fixed(&y.modpow(&self.private, &group.prime)))
    }
}

fn derive_keys(secret: &[u8], client_pub: &[u8], server_pub: &[u8]) -> SessionKeys {
    let mut salt = Vec::with_capacity(2 * PUBLIC_LEN);
    salt.extend_from_slice(client_pub);
    salt.extend_from_slice(server_pub);
    SessionKeys::derive(secret, &salt)
}

/// Session-init state machine; the server answers any well-formed public
/// value, which is what leaves it open to active probing.
pub struct UniformDhHandshake {
    role: Role,
    group: GroupParams,
    keypair: Keypair,
    buf: Vec<u8>,
    done: bool,
}

impl UniformDhHandshake {
    pub fn new<R: RngCore>(role: Role, group: GroupParams, rng: &mut R) -> Self {
        let keypair = Keypair::generate(&group, rng);
        UniformDhHandshake {
            role,
            group,
            keypair,
            buf: Vec::new(),
            done: false,
        }
    }
}

impl SessionInit for UniformDhHandshake {
    fn initiate(&mut self, _now: SimTime) -> Vec<u8> {
        match self.role {
            Role::Client => self.keypair.public_wire.to_vec(),
            Role::Server => Vec::new(),
        }
    }

    fn receive(&mut self, input: &[u8], _now: SimTime, band: &mut ControlBand) -> HandshakeStep {
        if self.done {
            return HandshakeStep::pending().with_leftover(input.to_vec());
        }
        self.buf.extend_from_slice(input);
        if self.buf.len() < PUBLIC_LEN {
            return HandshakeStep::pending();
        }
        let leftover = self.buf.split_off(PUBLIC_LEN);
        let peer = std::mem::take(&mut self.buf);
        let secret = match self.keypair.agree(&self.group, &peer) {
            Ok(s) => s,
            Err(e) => return HandshakeStep::status(HandshakeStatus::Failed(e)),
        };
        self.done = true;
        let own = self.keypair.public_wire;
        let (keys, reply) = match self.role {
            Role::Client => (derive_keys(&secret, &own, &peer), Vec::new()),
            Role::Server => (derive_keys(&secret, &peer, &own), own.to_vec()),
        };
        band.post(LayerKind::Encryption, SESSION_KEYS, &keys.to_bytes());
        HandshakeStep {
            reply,
            leftover,
            status: HandshakeStatus::Complete,
        }
    }
}

fn completed_keys(status: HandshakeStatus, band: &mut ControlBand) -> Result<SessionKeys, LayerError> {
    match status {
        HandshakeStatus::Complete => band
            .take(LayerKind::Encryption, SESSION_KEYS)
            .and_then(|raw| SessionKeys::from_bytes(&raw))
            .ok_or_else(|| LayerError::handshake("no keys posted")),
        HandshakeStatus::Failed(e) => Err(e),
        _ => Err(LayerError::handshake("handshake did not complete")),
    }
}

/// Runs both sides in memory and returns the derived keys plus every byte
/// that crossed the wire.
pub fn si_uniform_handshake<R: RngCore>(
    client_rng: &mut R,
    server_rng: &mut R,
    group: &GroupParams,
) -> Result<(SessionKeys, SessionKeys, Vec<u8>), LayerError> {
    let mut client = UniformDhHandshake::new(Role::Client, group.clone(), client_rng);
    let mut server = UniformDhHandshake::new(Role::Server, group.clone(), server_rng);
    let hello = client.initiate(SimTime::ZERO);
    let mut server_band = ControlBand::default();
    let step = server.receive(&hello, SimTime::ZERO, &mut server_band);
    let server_keys = completed_keys(step.status, &mut server_band)?;
    let reply = step.reply;
    let mut client_band = ControlBand::default();
    let status = client.receive(&reply, SimTime::ZERO, &mut client_band).status;
    let client_keys = completed_keys(status, &mut client_band)?;
    let mut wire = hello;
    wire.extend_from_slice(&reply);
    Ok((client_keys, server_keys, wire))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn honest_peers_agree() {
        let mut c = ChaCha8Rng::seed_from_u64(1);
        let mut s = ChaCha8Rng::seed_from_u64(2);
        let (ck, sk, wire) = si_uniform_handshake(&mut c, &mut s, &GroupParams::default()).unwrap();
        assert_eq!(ck, sk);
        assert_eq!(wire.len(), 2 * PUBLIC_LEN);
    }

    #[test]
    fn both_encodings_agree() {
        let group = GroupParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Keypair::generate(&group, &mut rng);
        let b = Keypair::generate(&group, &mut rng);
        let flipped = group.to_fixed(&(&group.prime - BigUint::from_bytes_be(b.public_wire())));
        assert_eq!(
            a.agree(&group, b.public_wire()).unwrap(),
            a.agree(&group, &flipped).unwrap()
        );
    }

    #[test]
    fn malformed_public_value_fails() {
        let group = GroupParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut server = UniformDhHandshake::new(Role::Server, group, &mut rng);
        let step = server.receive(&[0u8; PUBLIC_LEN], SimTime::ZERO, &mut ControlBand::default());
        assert!(matches!(step.status, HandshakeStatus::Failed(_)));
        assert!(step.reply.is_empty());
    }

    #[test]
    fn server_answers_a_probe_and_keeps_leftover() {
        let group = GroupParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = Keypair::generate(&group, &mut rng);
        let mut server = UniformDhHandshake::new(Role::Server, group, &mut rng);
        let mut msg = probe.public_wire().to_vec();
        msg.extend_from_slice(b"tail");
        let step = server.receive(&msg, SimTime::ZERO, &mut ControlBand::default());
        assert_eq!(step.status, HandshakeStatus::Complete);
        assert_eq!(step.reply.len(), PUBLIC_LEN);
        assert_eq!(step.leftover, b"tail");
    }
}
