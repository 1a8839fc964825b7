//! Deterministic discrete-event network.
//!
//! A single path joins the inside host (the censored client side) to the
//! outside hosts. Packets cross hops in order; each link adds serialization
//! delay, latency and seeded loss. Every packet is logged once on entry and
//! once on its terminal fate.

pub mod deflector;
pub mod log;
pub mod packet;
pub mod sim;
pub mod topology;

pub use deflector::Deflector;
pub use log::{Action, EventLog, LogRecord};
pub use packet::{is_inside, Addr, FlowKey, Packet, PacketKind};
pub use sim::{HopContext, Middlebox, SimEvent, Simulator, HEADER_OVERHEAD};
pub use topology::{HopRole, LinkParams, Topology, TopologyError};
