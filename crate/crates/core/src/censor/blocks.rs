use std::collections::BTreeMap;

use crate::netsim::Addr;
use crate::time::{SimDuration, SimTime};

/// Timed (address, port) blocks. A `None` port blocks the whole address.
#[derive(Debug, Clone, Default)]
pub struct BlockTable {
    entries: BTreeMap<(Addr, Option<u16>), SimTime>,
}

impl BlockTable {
    /// Blocks until `now + duration`, exclusive. Overlapping blocks keep the
    /// later expiry.
    pub fn apply_block(&mut self, addr: Addr, port: Option<u16>, now: SimTime, duration: SimDuration) {
        let until = now + duration;
        let e = self.entries.entry((addr, port)).or_insert(until);
        *e = (*e).max(until);
    }

    pub fn block_forever(&mut self, addr: Addr, port: Option<u16>) {
        self.entries.insert((addr, port), SimTime(u64::MAX));
    }

    pub fn is_blocked(&self, addr: Addr, port: u16, now: SimTime) -> bool {
        [Some(port), None]
            .iter()
            .any(|p| self.entries.get(&(addr, *p)).is_some_and(|&until| now < until))
    }

    pub fn expiry(&self, addr: Addr, port: Option<u16>) -> Option<SimTime> {
        self.entries.get(&(addr, port)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Addr = Addr::new(198, 51, 100, 10);

    #[test]
    fn ninety_second_window() {
        let mut t = BlockTable::default();
        assert!(!t.is_blocked(A, 443, SimTime::ZERO));
        t.apply_block(A, Some(443), SimTime::from_secs_f64(100.0), SimDuration::from_secs(90));
        assert!(t.is_blocked(A, 443, SimTime::from_secs_f64(189.0)));
        assert!(!t.is_blocked(A, 443, SimTime::from_secs_f64(191.0)));
        assert!(!t.is_blocked(A, 80, SimTime::from_secs_f64(150.0)));
    }

    #[test]
    fn overlapping_blocks_take_the_later_expiry() {
        let mut t = BlockTable::default();
        t.apply_block(A, Some(1), SimTime::from_secs_f64(10.0), SimDuration::from_secs(90));
        t.apply_block(A, Some(1), SimTime::from_secs_f64(20.0), SimDuration::from_secs(30));
        assert_eq!(t.expiry(A, Some(1)), Some(SimTime::from_secs_f64(100.0)));
    }
}
