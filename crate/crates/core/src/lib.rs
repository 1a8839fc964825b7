//! Composable circumvention layers, a policy-driven censoring middlebox and
//! a deterministic discrete-event network simulator.

pub mod censor;
pub mod crypto;
pub mod error;
pub mod model;
pub mod netsim;
pub mod network;
pub mod stats;
pub mod time;
pub mod transports;

pub use error::{ErrorKind, LayerError, Rule};
pub use model::{LayerKind, StackDescriptor};
pub use time::{SimDuration, SimTime};
