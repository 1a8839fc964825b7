//! Programmable on-path censor.
//!
//! Every attack node is an independent toggle. Packets run through a fixed
//! stage order: route blocks, route fingerprints, reset handling, content
//! and flow fingerprints, then throttling. The first enforcing verdict wins;
//! flags raised along the way are still recorded.

pub mod blocks;
pub mod classifier;
pub mod reassembly;

use std::any::Any;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use regex::bytes::{Regex, RegexBuilder};
use thiserror::Error;

use crate::netsim::{Addr, FlowKey, HopContext, Middlebox, Packet, PacketKind};
use crate::stats::miller_madow_entropy;
use crate::time::{SimDuration, SimTime};
use crate::transports::MTU;

pub use blocks::BlockTable;
pub use classifier::{classify_flow, train_flow_classifier, ClassifierError, ClassifierModel, FlowSample};
pub use reassembly::StreamReassembler;

/// Attack nodes, in coverage-matrix column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    CorCon,
    CorSem,
    CorRou,
    BlkRou,
    DegPer,
    FprLen,
    FprTim,
    FprSem,
    FprRou,
    FprCon,
}

impl Node {
    pub const ALL: [Node; 10] = [
        Node::CorCon,
        Node::CorSem,
        Node::CorRou,
        Node::BlkRou,
        Node::DegPer,
        Node::FprLen,
        Node::FprTim,
        Node::FprSem,
        Node::FprRou,
        Node::FprCon,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Node::CorCon => "COR.CON",
            Node::CorSem => "COR.SEM",
            Node::CorRou => "COR.ROU",
            Node::BlkRou => "BLK.ROU",
            Node::DegPer => "DEG.PER",
            Node::FprLen => "FPR.LEN",
            Node::FprTim => "FPR.TIM",
            Node::FprSem => "FPR.SEM",
            Node::FprRou => "FPR.ROU",
            Node::FprCon => "FPR.CON",
        }
    }

    /// Nodes that act on traffic rather than only observe it.
    pub fn is_direct(self) -> bool {
        matches!(self, Node::CorCon | Node::CorSem | Node::CorRou | Node::BlkRou | Node::DegPer)
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Node {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Node::ALL
            .into_iter()
            .find(|n| n.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown attack node `{s}`"))
    }
}

/// Label of the first-packet entropy detector.
pub const ENTROPY_LABEL: &str = "FPR.CON-entropy";
/// Source range of the censor's own probes; never inspected.
pub const PROBER_NET: [u8; 2] = [10, 250];

pub fn is_prober(addr: Addr) -> bool {
    addr.octets()[..2] == PROBER_NET
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Allow,
    Drop,
    InjectRst,
    /// Same-length replacement payload.
    Tamper(Vec<u8>),
    Throttle(f64),
    Flag(String),
}

impl Verdict {
    pub fn is_enforcing(&self) -> bool {
        !matches!(self, Verdict::Allow | Verdict::Flag(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    Drop,
    /// Answer blocked packets with resets instead of silence.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TamperMode {
    /// Overwrite the matched span only.
    Match,
    /// Overwrite every later payload of a flagged connection.
    Flagged,
}

#[derive(Debug, Clone)]
pub struct ClassifierPolicy {
    pub model: Arc<ClassifierModel>,
    pub blocked_label: String,
    /// Data packets seen before the single classification decision.
    pub min_packets: usize,
    /// Required log-likelihood lead, in nats.
    pub margin: f64,
}

impl ClassifierPolicy {
    pub fn new(model: Arc<ClassifierModel>) -> Self {
        ClassifierPolicy {
            model,
            blocked_label: "tunnel".into(),
            min_packets: 20,
            margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("block duration must be positive")]
    BlockDuration,
    #[error("throttle factor must lie in [0, 1), got {0}")]
    Throttle(String),
    #[error("entropy threshold must be finite")]
    Entropy,
    #[error("bad content regex `{0}`: {1}")]
    Regex(String, String),
    #[error("classifier has no class `{0}`")]
    BlockedLabel(String),
}

pub const THROTTLE_77: f64 = 0.77;
pub const THROTTLE_69: f64 = 0.69;

#[derive(Debug, Clone)]
pub struct CensorPolicy {
    pub enabled: BTreeSet<Node>,
    pub keywords: Vec<String>,
    pub regexes: Vec<String>,
    /// First-packet entropy detector; `None` disables it.
    pub entropy_threshold: Option<f64>,
    pub classifier: Option<ClassifierPolicy>,
    pub probe_budget: u32,
    pub probe_timeout: SimDuration,
    pub block_duration: SimDuration,
    pub throttle_factor: f64,
    /// COR.ROU address blocklist.
    pub address_blocklist: BTreeSet<Addr>,
    /// BLK.ROU entries present from the start.
    pub static_blocks: Vec<(Addr, Option<u16>)>,
    /// FPR.ROU suspects.
    pub suspect_addrs: BTreeSet<Addr>,
    pub suspect_ports: BTreeSet<u16>,
    pub ttl_aware_rst: bool,
    pub block_mode: BlockMode,
    pub tamper_mode: TamperMode,
    pub block_page: Vec<u8>,
}

impl Default for CensorPolicy {
    fn default() -> Self {
        CensorPolicy {
            enabled: BTreeSet::new(),
            keywords: Vec::new(),
            regexes: Vec::new(),
            entropy_threshold: Some(7.2),
            classifier: None,
            probe_budget: 16,
            probe_timeout: SimDuration::from_secs(5),
            block_duration: SimDuration::from_secs(90),
            throttle_factor: THROTTLE_77,
            address_blocklist: BTreeSet::new(),
            static_blocks: Vec::new(),
            suspect_addrs: BTreeSet::new(),
            suspect_ports: BTreeSet::new(),
            ttl_aware_rst: false,
            block_mode: BlockMode::Drop,
            tamper_mode: TamperMode::Match,
            block_page: b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n".to_vec(),
        }
    }
}

impl CensorPolicy {
    pub fn with_nodes(nodes: &[Node]) -> Self {
        CensorPolicy {
            enabled: nodes.iter().copied().collect(),
            ..Default::default()
        }
    }

    pub fn is_enabled(&self, node: Node) -> bool {
        self.enabled.contains(&node)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.block_duration.0 == 0 {
            return Err(PolicyError::BlockDuration);
        }
        if !(0.0..1.0).contains(&self.throttle_factor) {
            return Err(PolicyError::Throttle(self.throttle_factor.to_string()));
        }
        if self.entropy_threshold.is_some_and(|t| !t.is_finite()) {
            return Err(PolicyError::Entropy);
        }
        for r in &self.regexes {
            Regex::new(r).map_err(|e| PolicyError::Regex(r.clone(), e.to_string()))?;
        }
        if let Some(c) = &self.classifier {
            if c.model.index_of(&c.blocked_label).is_none() {
                return Err(PolicyError::BlockedLabel(c.blocked_label.clone()));
            }
        }
        Ok(())
    }
}

/// Parses a rule file: one rule per line, `#` starts a comment line.
pub fn parse_rule_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRequest {
    pub target: (Addr, u16),
    /// First client payload of the suspicious flow, for replay.
    pub first_payload: Vec<u8>,
    pub trigger: String,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensorEvent {
    pub time: SimTime,
    pub flow: FlowKey,
    pub label: String,
    pub action: &'static str,
}

#[derive(Debug, Clone, Default)]
pub struct FlowState {
    pub key: Option<FlowKey>,
    pub packets_seen: u64,
    pub data_packets: usize,
    pub first_packet_entropy: Option<f64>,
    pub sample: FlowSample,
    pub last_data: Option<SimTime>,
    pub flags: BTreeSet<String>,
    pub torn_down: bool,
    reasm: StreamReassembler,
    rst_injected: bool,
    classified: bool,
    first_payload: Option<Vec<u8>>,
}

const MATCH_CONTEXT: usize = 4096;
const MAX_SAMPLES: usize = 256;

pub struct Censor {
    policy: CensorPolicy,
    content: Vec<Regex>,
    flows: HashMap<FlowKey, FlowState>,
    blocks: BlockTable,
    probes_left: u32,
    probed: BTreeSet<(Addr, u16)>,
    probe_queue: Vec<ProbeRequest>,
    events: Vec<CensorEvent>,
}

impl Censor {
    pub fn new(policy: CensorPolicy) -> Result<Self, PolicyError> {
        policy.validate()?;
        let mut content = Vec::new();
        for k in &policy.keywords {
            content.push(RegexBuilder::new(&regex::escape(k)).unicode(false).build().expect("escaped literal"));
        }
        for r in &policy.regexes {
            content.push(Regex::new(r).map_err(|e| PolicyError::Regex(r.clone(), e.to_string()))?);
        }
        let mut blocks = BlockTable::default();
        for &(addr, port) in &policy.static_blocks {
            blocks.block_forever(addr, port);
        }
        Ok(Censor {
            probes_left: policy.probe_budget,
            policy,
            content,
            flows: HashMap::new(),
            blocks,
            probed: BTreeSet::new(),
            probe_queue: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn policy(&self) -> &CensorPolicy {
        &self.policy
    }

    pub fn blocks(&self) -> &BlockTable {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut BlockTable {
        &mut self.blocks
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowState> {
        self.flows.get(key)
    }

    pub fn events(&self) -> &[CensorEvent] {
        &self.events
    }

    pub fn probes_left(&self) -> u32 {
        self.probes_left
    }

    /// Is `(addr, port)` blocked at `now`?
    pub fn is_blocked(&self, addr: Addr, port: u16, now: SimTime) -> bool {
        self.blocks.is_blocked(addr, port, now)
    }

    pub fn apply_block(&mut self, addr: Addr, port: u16, now: SimTime) {
        self.blocks.apply_block(addr, Some(port), now, self.policy.block_duration);
    }

    /// Pending probe work for the network to carry out.
    pub fn take_probe_requests(&mut self) -> Vec<ProbeRequest> {
        std::mem::take(&mut self.probe_queue)
    }

    /// Records a probe outcome; a confirmed endpoint is blocked.
    pub fn finish_probe(&mut self, target: (Addr, u16), confirmed: bool, now: SimTime) {
        let flow = FlowKey::new(Addr::new(PROBER_NET[0], PROBER_NET[1], 0, 0), 0, target.0, target.1);
        if confirmed {
            self.blocks.apply_block(target.0, Some(target.1), now, self.policy.block_duration);
            self.event(now, flow, Node::FprSem.label(), "probe-confirm");
        } else {
            self.event(now, flow, Node::FprSem.label(), "probe-inconclusive");
        }
    }

    fn event(&mut self, time: SimTime, flow: FlowKey, label: &str, action: &'static str) {
        self.events.push(CensorEvent {
            time,
            flow,
            label: label.to_string(),
            action,
        });
    }

    /// Flags both directions of the connection.
    fn flag(&mut self, key: FlowKey, label: &str, now: SimTime) -> bool {
        let fresh = self.flows.entry(key).or_default().flags.insert(label.to_string());
        self.flows.entry(key.reversed()).or_default().flags.insert(label.to_string());
        if fresh {
            self.event(now, key, label, "flag");
        }
        fresh
    }

    fn is_flagged(&self, key: &FlowKey) -> bool {
        self.flows.get(key).is_some_and(|f| !f.flags.is_empty())
    }

    /// Endpoint on the far side of the censor.
    fn server_of(key: &FlowKey) -> (Addr, u16) {
        if crate::netsim::is_inside(key.src) {
            (key.dst, key.dst_port)
        } else {
            (key.src, key.src_port)
        }
    }

    /// Evaluates one packet. `ctx.hops_remaining` decides whether a reset
    /// would reach its endpoint.
    pub fn inspect_packet(&mut self, pkt: &Packet, ctx: &HopContext) -> Verdict {
        let now = ctx.now;
        let key = pkt.key;
        if is_prober(key.src) || is_prober(key.dst) {
            return Verdict::Allow;
        }
        let p = &self.policy;
        let mut verdict = Verdict::Allow;
        let mut new_flag: Option<String> = None;

        {
            let st = self.flows.entry(key).or_default();
            st.key = Some(key);
            st.packets_seen += 1;
        }

        // Route blocks.
        let blocked = self.blocks.is_blocked(key.dst, key.dst_port, now) || self.blocks.is_blocked(key.src, key.src_port, now);
        if blocked && (p.is_enabled(Node::BlkRou) || p.is_enabled(Node::FprSem) || !p.static_blocks.is_empty()) {
            verdict = match p.block_mode {
                BlockMode::Reset if pkt.kind != PacketKind::Rst => Verdict::InjectRst,
                _ => Verdict::Drop,
            };
            self.event(now, key, Node::BlkRou.label(), "drop");
        } else if p.is_enabled(Node::CorRou)
            && (p.address_blocklist.contains(&key.dst) || p.address_blocklist.contains(&key.src))
        {
            verdict = Verdict::Drop;
            self.event(now, key, Node::CorRou.label(), "drop");
        }

        // Route fingerprints.
        let p = &self.policy;
        if p.is_enabled(Node::FprRou)
            && (p.suspect_addrs.contains(&key.dst)
                || p.suspect_addrs.contains(&key.src)
                || p.suspect_ports.contains(&key.dst_port)
                || p.suspect_ports.contains(&key.src_port))
            && self.flag(key, Node::FprRou.label(), now)
        {
            new_flag = Some(Node::FprRou.label().into());
        }

        // Resets and per-flow state.
        if pkt.kind == PacketKind::Rst {
            if !self.policy.ttl_aware_rst || pkt.ttl > ctx.hops_remaining {
                for k in [key, key.reversed()] {
                    self.flows.entry(k).or_default().torn_down = true;
                }
                self.event(now, key, "state", "teardown");
            }
            return verdict;
        }
        let fpr_rou_hit = self.flows.get(&key).is_some_and(|f| f.flags.contains(Node::FprRou.label()));
        if self.policy.is_enabled(Node::CorSem)
            && fpr_rou_hit
            && !self.flows[&key].rst_injected
            && !verdict.is_enforcing()
        {
            verdict = Verdict::InjectRst;
            for k in [key, key.reversed()] {
                self.flows.entry(k).or_default().rst_injected = true;
            }
            self.event(now, key, Node::CorSem.label(), "rst");
        }

        if pkt.payload.len() > MTU {
            if self.flag(key, "malformed", now) {
                new_flag = Some("malformed".into());
            }
            return finish(verdict, new_flag);
        }

        // Content and flow fingerprints.
        let torn_down = self.flows[&key].torn_down;
        let mut content_flags: Vec<String> = Vec::new();
        let mut match_span: Option<(usize, usize)> = None;
        if !pkt.payload.is_empty() && pkt.kind == PacketKind::Data {
            let p = &self.policy;
            let st = self.flows.get_mut(&key).expect("created above");
            st.data_packets += 1;
            let gap = st.last_data.map(|t| now.saturating_sub(t));
            st.last_data = Some(now);
            if st.sample.lengths.len() < MAX_SAMPLES {
                st.sample.push(pkt.payload.len(), gap);
            }
            if st.first_payload.is_none() && crate::netsim::is_inside(key.src) {
                st.first_payload = Some(pkt.payload.clone());
            }
            if st.data_packets == 1 {
                st.first_packet_entropy = Some(miller_madow_entropy(&pkt.payload));
            }
            if !torn_down && p.is_enabled(Node::FprCon) {
                let added = st.reasm.push(pkt.seq, &pkt.payload);
                if added > 0 && !self.content.is_empty() {
                    let buf = st.reasm.buffer();
                    let start = buf.len().saturating_sub(added + MATCH_CONTEXT);
                    let fresh_from = buf.len() - added;
                    for re in &self.content {
                        let Some(m) = re.find_iter(&buf[start..]).find(|m| start + m.end() > fresh_from) else {
                            continue;
                        };
                        content_flags.push(Node::FprCon.label().into());
                        // This packet's own new bytes open the appended run;
                        // bytes it repeated from earlier segments precede them
                        // in the payload. Only that part can be tampered.
                        let own = st.reasm.last_own();
                        let skip = pkt.payload.len() - own;
                        let s = (start + m.start()).max(fresh_from) - fresh_from;
                        let e = (start + m.end() - fresh_from).min(own);
                        if s < e {
                            match_span = Some((s + skip, e + skip));
                        }
                        break;
                    }
                }
                if st.data_packets == 1 && pkt.payload.len() >= 64 {
                    if let (Some(t), Some(h)) = (p.entropy_threshold, st.first_packet_entropy) {
                        if h > t {
                            content_flags.push(ENTROPY_LABEL.into());
                        }
                    }
                }
            }
            if !torn_down && (p.is_enabled(Node::FprLen) || p.is_enabled(Node::FprTim)) {
                if let Some(c) = &p.classifier {
                    if !st.classified && st.data_packets >= c.min_packets {
                        st.classified = true;
                        let scores = c.model.scores(&st.sample);
                        let k = c.model.index_of(&c.blocked_label).expect("validated");
                        if p.is_enabled(Node::FprLen) && scores.length_margin(k) >= c.margin {
                            content_flags.push(Node::FprLen.label().into());
                        }
                        if p.is_enabled(Node::FprTim) && scores.timing_margin(k) >= c.margin {
                            content_flags.push(Node::FprTim.label().into());
                        }
                    }
                }
            }
        }

        let had_content_flag = !content_flags.is_empty();
        for label in &content_flags {
            if self.flag(key, label, now) {
                new_flag = Some(label.clone());
            }
        }
        if had_content_flag {
            let server = Self::server_of(&key);
            if self.policy.is_enabled(Node::BlkRou) {
                self.blocks.apply_block(server.0, Some(server.1), now, self.policy.block_duration);
                self.event(now, key, Node::BlkRou.label(), "block");
            }
            if self.policy.is_enabled(Node::FprSem) && self.probes_left > 0 && !self.probed.contains(&server) {
                self.probes_left -= 1;
                self.probed.insert(server);
                let client_key = if crate::netsim::is_inside(key.src) { key } else { key.reversed() };
                let first_payload = self
                    .flows
                    .get(&client_key)
                    .and_then(|f| f.first_payload.clone())
                    .unwrap_or_default();
                self.probe_queue.push(ProbeRequest {
                    target: server,
                    first_payload,
                    trigger: content_flags[0].clone(),
                    at: now,
                });
                self.event(now, key, Node::FprSem.label(), "probe");
            }
            if !verdict.is_enforcing() {
                let p = &self.policy;
                if p.is_enabled(Node::CorSem) {
                    verdict = Verdict::InjectRst;
                    for k in [key, key.reversed()] {
                        let st = self.flows.entry(k).or_default();
                        st.rst_injected = true;
                        st.torn_down = true;
                    }
                    self.event(now, key, Node::CorSem.label(), "rst");
                } else if p.is_enabled(Node::BlkRou) {
                    verdict = Verdict::Drop;
                    self.event(now, key, Node::BlkRou.label(), "drop");
                } else if p.is_enabled(Node::CorCon) && p.tamper_mode == TamperMode::Match {
                    if let Some((s, e)) = match_span {
                        verdict = Verdict::Tamper(self.overwrite(&pkt.payload, s, e));
                        self.event(now, key, Node::CorCon.label(), "tamper");
                    }
                }
            }
        }

        if !verdict.is_enforcing()
            && self.policy.is_enabled(Node::CorCon)
            && self.policy.tamper_mode == TamperMode::Flagged
            && !pkt.payload.is_empty()
            && self.is_flagged(&key)
        {
            verdict = Verdict::Tamper(self.overwrite(&pkt.payload, 0, pkt.payload.len()));
            self.event(now, key, Node::CorCon.label(), "tamper");
        }

        if !verdict.is_enforcing() && self.policy.is_enabled(Node::DegPer) && self.is_flagged(&key) {
            verdict = Verdict::Throttle(self.policy.throttle_factor);
        }
        finish(verdict, new_flag)
    }

    fn overwrite(&self, payload: &[u8], start: usize, end: usize) -> Vec<u8> {
        let mut out = payload.to_vec();
        let page = &self.policy.block_page;
        for (i, b) in out[start..end].iter_mut().enumerate() {
            *b = if page.is_empty() { b'X' } else { page[i % page.len()] };
        }
        out
    }
}

fn finish(verdict: Verdict, new_flag: Option<String>) -> Verdict {
    match (verdict, new_flag) {
        (Verdict::Allow, Some(label)) => Verdict::Flag(label),
        (v, _) => v,
    }
}

impl Middlebox for Censor {
    fn inspect(&mut self, pkt: &Packet, ctx: &HopContext) -> Verdict {
        self.inspect_packet(pkt, ctx)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
