//! Keyed port-hopping schedule. Both ends derive the same sequence from a
//! shared seed, so the receiver can predict every port.

use crate::crypto::hmac_sha256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortSchedule {
    key: [u8; 8],
    ports: Vec<u16>,
}

impl PortSchedule {
    /// `ports` must be non-empty.
    pub fn new(seed: u64, ports: Vec<u16>) -> Self {
        assert!(!ports.is_empty(), "port set must not be empty");
        PortSchedule {
            key: seed.to_be_bytes(),
            ports,
        }
    }

    pub fn ports(&self) -> &[u16] {
        &self.ports
    }

    /// Port of the `index`-th packet.
    pub fn port(&self, index: u64) -> u16 {
        let h = hmac_sha256(&self.key, &[&index.to_be_bytes()]);
        let v = u64::from_be_bytes(h[..8].try_into().expect("8 bytes"));
        self.ports[(v % self.ports.len() as u64) as usize]
    }

    pub fn sequence(&self, n: usize) -> Vec<u16> {
        (0..n as u64).map(|i| self.port(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_ends_agree_and_stay_in_range() {
        let client = PortSchedule::new(7, (2000..=2100).collect());
        let server = PortSchedule::new(7, (2000..=2100).collect());
        let seq = client.sequence(500);
        assert_eq!(seq, server.sequence(500));
        assert!(seq.iter().all(|p| (2000..=2100).contains(p)));
        let distinct: std::collections::BTreeSet<_> = seq.iter().collect();
        assert!(distinct.len() > 50);
    }

    #[test]
    fn different_seeds_differ() {
        let a = PortSchedule::new(7, (2000..=2100).collect()).sequence(32);
        let b = PortSchedule::new(8, (2000..=2100).collect()).sequence(32);
        assert_ne!(a, b);
    }
}
