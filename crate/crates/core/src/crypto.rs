//! Keyed-hash helpers shared by the session-init and encryption layers.

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Constant-time comparison of a truncated MAC.
pub fn verify_truncated(expected: &[u8], got: &[u8]) -> bool {
    if expected.len() != got.len() {
        return false;
    }
    expected
        .iter()
        .zip(got)
        .fold(0u8, |acc, (a, b)| acc | (a ^ b))
        == 0
}

pub fn hkdf_expand(ikm: &[u8], salt: &[u8], info: &[u8]) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut out = [0u8; 32];
    hk.expand(info, &mut out).expect("32 bytes is a valid HKDF length");
    out
}

/// Directional keys produced by session initialization.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub client_to_server: [u8; 32],
    pub server_to_client: [u8; 32],
}

impl SessionKeys {
    pub fn derive(secret: &[u8], salt: &[u8]) -> Self {
        SessionKeys {
            client_to_server: hkdf_expand(secret, salt, b"tweak c2s"),
            server_to_client: hkdf_expand(secret, salt, b"tweak s2c"),
        }
    }

    /// Serialized form passed through the control band.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.client_to_server);
        out[32..].copy_from_slice(&self.server_to_client);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Option<Self> {
        if raw.len() != 64 {
            return None;
        }
        let mut k = SessionKeys {
            client_to_server: [0; 32],
            server_to_client: [0; 32],
        };
        k.client_to_server.copy_from_slice(&raw[..32]);
        k.server_to_client.copy_from_slice(&raw[32..]);
        Some(k)
    }
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}
