use thiserror::Error;

use crate::time::SimDuration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopRole {
    Router,
    Censor,
    Deflector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub latency: SimDuration,
    pub loss: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

impl LinkParams {
    pub fn new(latency_ms: f64, loss: f64, bandwidth: f64) -> Self {
        LinkParams {
            latency: SimDuration::from_millis_f64(latency_ms),
            loss,
            bandwidth,
        }
    }
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams::new(5.0, 0.0, 12_500_000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("expected {expected} links for {hops} hops, got {got}")]
    LinkCount { hops: usize, expected: usize, got: usize },
    #[error("more than one censor hop")]
    TwoCensors,
    #[error("more than one deflecting router")]
    TwoDeflectors,
    #[error("deflecting router must sit after the censor")]
    DeflectorBeforeCensor,
    #[error("link {0}: loss must lie in [0, 1]")]
    Loss(usize),
    #[error("link {0}: bandwidth must be positive")]
    Bandwidth(usize),
    #[error("hop {0} does not exist")]
    NoSuchHop(usize),
    #[error("hop {0} is already occupied")]
    Occupied(usize),
    #[error("hop {hop} is a {role:?}, cannot attach a {wanted}")]
    WrongRole { hop: usize, role: HopRole, wanted: &'static str },
}

/// Ordered hops between the inside host (position 0) and the outside
/// hosts (position `hops.len() + 1`). Hop `i` sits at position `i + 1`;
/// link `i` joins positions `i` and `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    hops: Vec<HopRole>,
    links: Vec<LinkParams>,
}

impl Topology {
    pub fn new(hops: Vec<HopRole>, links: Vec<LinkParams>) -> Result<Self, TopologyError> {
        if links.len() != hops.len() + 1 {
            return Err(TopologyError::LinkCount {
                hops: hops.len(),
                expected: hops.len() + 1,
                got: links.len(),
            });
        }
        let censors: Vec<usize> = (0..hops.len()).filter(|&i| hops[i] == HopRole::Censor).collect();
        let deflectors: Vec<usize> = (0..hops.len()).filter(|&i| hops[i] == HopRole::Deflector).collect();
        if censors.len() > 1 {
            return Err(TopologyError::TwoCensors);
        }
        if deflectors.len() > 1 {
            return Err(TopologyError::TwoDeflectors);
        }
        if let (Some(&c), Some(&d)) = (censors.first(), deflectors.first()) {
            if d < c {
                return Err(TopologyError::DeflectorBeforeCensor);
            }
        }
        for (i, l) in links.iter().enumerate() {
            if !(0.0..=1.0).contains(&l.loss) {
                return Err(TopologyError::Loss(i));
            }
            if l.bandwidth.is_nan() || l.bandwidth <= 0.0 {
                return Err(TopologyError::Bandwidth(i));
            }
        }
        Ok(Topology { hops, links })
    }

    /// Single link, no hops.
    pub fn direct(link: LinkParams) -> Self {
        Topology::new(vec![], vec![link]).expect("valid")
    }

    /// Client, router, censor, servers.
    pub fn canonical() -> Self {
        Self::uniform(vec![HopRole::Router, HopRole::Censor], LinkParams::default())
    }

    /// Canonical path plus a deflecting router after the censor.
    pub fn decoy() -> Self {
        Self::uniform(vec![HopRole::Router, HopRole::Censor, HopRole::Deflector], LinkParams::default())
    }

    pub fn uniform(hops: Vec<HopRole>, link: LinkParams) -> Self {
        let n = hops.len() + 1;
        Topology::new(hops, vec![link; n]).expect("valid")
    }

    pub fn hops(&self) -> &[HopRole] {
        &self.hops
    }

    pub fn links(&self) -> &[LinkParams] {
        &self.links
    }

    pub fn censor_hop(&self) -> Option<usize> {
        self.hops.iter().position(|&h| h == HopRole::Censor)
    }

    pub fn deflector_hop(&self) -> Option<usize> {
        self.hops.iter().position(|&h| h == HopRole::Deflector)
    }

    /// One-way latency between the two hosts.
    pub fn path_latency(&self) -> SimDuration {
        SimDuration(self.links.iter().map(|l| l.latency.0).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants() {
        let l = LinkParams::default();
        assert!(Topology::new(vec![], vec![l]).is_ok());
        assert_eq!(
            Topology::new(vec![HopRole::Censor, HopRole::Censor], vec![l; 3]),
            Err(TopologyError::TwoCensors)
        );
        assert_eq!(
            Topology::new(vec![HopRole::Deflector, HopRole::Censor], vec![l; 3]),
            Err(TopologyError::DeflectorBeforeCensor)
        );
        assert!(matches!(Topology::new(vec![], vec![l; 2]), Err(TopologyError::LinkCount { .. })));
        assert_eq!(
            Topology::new(vec![], vec![LinkParams::new(1.0, 1.5, 1.0)]),
            Err(TopologyError::Loss(0))
        );
        assert_eq!(Topology::decoy().deflector_hop(), Some(2));
    }
}
