//! Fixed addresses of the simulated world. Everything with first octet 10
//! sits on the censored side of the path.

use tweak_core::netsim::Addr;

pub const CLIENT: Addr = Addr::new(10, 0, 0, 2);
pub const SERVER: Addr = Addr::new(198, 51, 100, 10);
/// Innocent destination a decoy client addresses.
pub const OVERT: Addr = Addr::new(203, 0, 113, 10);
/// Covert proxy behind the deflecting router.
pub const PROXY: Addr = Addr::new(198, 51, 100, 20);

pub fn background_client(i: usize) -> Addr {
    Addr::new(10, 1, (i / 250) as u8, (i % 250 + 1) as u8)
}

pub fn background_server(i: usize) -> Addr {
    Addr::new(198, 18, (i / 250) as u8, (i % 250 + 1) as u8)
}
