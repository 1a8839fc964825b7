use std::collections::BTreeSet;

use crate::netsim::packet::{is_inside, Addr, FlowKey, Packet, PacketKind};
use crate::transports::decoy::decoy_router_check;

/// Cooperative router that hands tagged flows to a covert proxy.
///
/// Only the first payload-carrying packet of a client-to-server flow is
/// checked; a positive check redirects every later packet of that flow.
#[derive(Debug, Clone)]
pub struct Deflector {
    key: [u8; 32],
    proxy: Addr,
    checked: BTreeSet<FlowKey>,
    deflected: BTreeSet<FlowKey>,
}

impl Deflector {
    pub fn new(key: [u8; 32], proxy: Addr) -> Self {
        Deflector {
            key,
            proxy,
            checked: BTreeSet::new(),
            deflected: BTreeSet::new(),
        }
    }

    pub fn proxy(&self) -> Addr {
        self.proxy
    }

    pub fn deflected_flows(&self) -> usize {
        self.deflected.len()
    }

    /// Rewrites `pkt` if its flow is deflected. Returns true on rewrite.
    pub fn process(&mut self, pkt: &mut Packet) -> bool {
        if !is_inside(pkt.key.src) || pkt.orig_dst.is_some() {
            return false;
        }
        let key = pkt.key;
        if !self.deflected.contains(&key)
            && pkt.kind == PacketKind::Data
            && !pkt.payload.is_empty()
            && self.checked.insert(key)
            && decoy_router_check(&self.key, &pkt.payload)
        {
            self.deflected.insert(key);
        }
        if !self.deflected.contains(&key) {
            return false;
        }
        pkt.orig_dst = Some((key.dst, key.dst_port));
        pkt.key.dst = self.proxy;
        true
    }
}
