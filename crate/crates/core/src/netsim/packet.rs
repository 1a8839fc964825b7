use std::fmt;
use std::net::Ipv4Addr;

use crate::time::SimTime;

pub type Addr = Ipv4Addr;

/// Directional 4-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub src: Addr,
    pub src_port: u16,
    pub dst: Addr,
    pub dst_port: u16,
}

impl FlowKey {
    pub fn new(src: Addr, src_port: u16, dst: Addr, dst_port: u16) -> Self {
        FlowKey {
            src,
            src_port,
            dst,
            dst_port,
        }
    }

    pub fn reversed(&self) -> FlowKey {
        FlowKey::new(self.dst, self.dst_port, self.src, self.src_port)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}>{}:{}", self.src, self.src_port, self.dst, self.dst_port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    Data,
    Rst,
    /// Connection setup (SYN or SYN-ACK, told apart by the receiver's role).
    Handshake,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    /// Assigned by the simulator when the packet enters the network.
    pub id: u64,
    pub key: FlowKey,
    pub kind: PacketKind,
    pub ttl: u8,
    /// Byte sequence number of the first payload byte.
    pub seq: u32,
    /// Next byte expected from the peer.
    pub ack: u32,
    pub payload: Vec<u8>,
    pub sent_at: SimTime,
    /// Destination before a deflecting router rewrote it.
    pub orig_dst: Option<(Addr, u16)>,
}

impl Packet {
    pub fn new(key: FlowKey, kind: PacketKind, payload: Vec<u8>) -> Self {
        Packet {
            id: 0,
            key,
            kind,
            ttl: 64,
            seq: 0,
            ack: 0,
            payload,
            sent_at: SimTime::ZERO,
            orig_dst: None,
        }
    }

    pub fn data(key: FlowKey, seq: u32, payload: Vec<u8>) -> Self {
        Packet {
            seq,
            ..Packet::new(key, PacketKind::Data, payload)
        }
    }

    pub fn with_ttl(mut self, ttl: u8) -> Self {
        self.ttl = ttl;
        self
    }

    /// Data packet without payload.
    pub fn is_pure_ack(&self) -> bool {
        self.kind == PacketKind::Data && self.payload.is_empty()
    }
}

/// Addresses on the censor's side of the path.
pub fn is_inside(addr: Addr) -> bool {
    addr.octets()[0] == 10
}
