//! One censor-versus-stack experiment: a covert upload, optional background
//! flows, and the censor's reaction to both.

use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tweak_core::censor::{Censor, CensorEvent, CensorPolicy, ClassifierModel, ClassifierPolicy, Node};
use tweak_core::model::ValidatedStack;
use tweak_core::netsim::{Addr, FlowKey, LogRecord};
use tweak_core::network::{App, ChannelId, ChannelState, Network};
use tweak_core::transports::{Credentials, TicketIssuer};
use tweak_core::{SimDuration, SimTime};

use crate::addrs;
use crate::background::{background_stack, gen_background, prose, prose_with_keyword};
use crate::config::{BackgroundSpec, Content, ScenarioConfig, TopologyKind, TopologySpec, TrafficScript};

/// Censor actions that show the covert flow was singled out.
const DETECTING_ACTIONS: [&str; 6] = ["flag", "drop", "rst", "tamper", "block", "probe-confirm"];
const ENFORCING_ACTIONS: [&str; 3] = ["drop", "rst", "tamper"];

/// Everything one trial needs.
#[derive(Clone)]
pub struct TrialSpec<'a> {
    pub stack: &'a ValidatedStack,
    /// `None` runs without a censor.
    pub policy: Option<CensorPolicy>,
    pub topology: &'a TopologySpec,
    pub traffic: &'a TrafficScript,
    pub background: Option<&'a BackgroundSpec>,
    pub seed: u64,
    pub keep_logs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub detected: bool,
    /// Label of the first censor action against the covert flow.
    pub node: Option<String>,
    pub bytes_sent: usize,
    pub bytes_delivered: usize,
    /// Upload arrived complete and unaltered and the answer came back.
    pub intact: bool,
    /// Delivered upload bytes per second of virtual time.
    pub goodput: Option<f64>,
    pub outcome: String,
    pub probes_confirmed: usize,
    pub background_total: usize,
    pub background_flagged: usize,
    pub background_blocked: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrialLogs {
    pub packets: Vec<LogRecord>,
    pub censor: Vec<CensorEvent>,
}

/// Trial seeds are independent streams of the scenario seed.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

fn touches(flow: &FlowKey, ep: (Addr, u16)) -> bool {
    (flow.src, flow.src_port) == ep || (flow.dst, flow.dst_port) == ep
}

fn covert_payload(traffic: &TrafficScript, rng: &mut ChaCha8Rng) -> Vec<u8> {
    match traffic.content {
        Content::Random => {
            let mut v = vec![0u8; traffic.bytes];
            rng.fill_bytes(&mut v);
            v
        }
        Content::Text => prose(rng, traffic.bytes),
        Content::Keyword => prose_with_keyword(rng, traffic.bytes, &traffic.keyword),
    }
}

enum Step {
    Chunk(usize),
    Background(usize),
}

struct BgFlow {
    client: Addr,
    server: Addr,
    content: Vec<u8>,
    channel: Option<ChannelId>,
}

pub fn run_trial(spec: &TrialSpec, index: usize) -> (TrialResult, TrialLogs) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topo = spec.topology.build();
    let has_censor = topo.censor_hop().is_some();
    let mut net = Network::new(topo, rng.next_u64());
    net.sim_mut().set_logging(spec.keep_logs);
    let policy = spec.policy.clone();
    if let (true, Some(p)) = (has_censor, &policy) {
        net.attach_censor(Censor::new(p.clone()).expect("policy validated at load"))
            .expect("topology has a censor hop");
    }

    let mut master = [0u8; 32];
    rng.fill_bytes(&mut master);
    let issuer = Arc::new(Mutex::new(TicketIssuer::new(master, 3600, rng.next_u64())));
    let ticket = issuer.lock().expect("fresh mutex").issue(SimTime::ZERO);
    let mut decoy_key = [0u8; 32];
    rng.fill_bytes(&mut decoy_key);
    let server_creds = Credentials {
        issuer: Some(issuer),
        decoy_key: Some(decoy_key),
        ..Default::default()
    };
    let client_creds = Credentials {
        ticket: Some(ticket),
        decoy_key: Some(decoy_key),
        ..Default::default()
    };
    let app = match spec.traffic.response {
        0 => App::Sink,
        n => App::Respond(n),
    };
    let (dial, server) = if spec.topology.kind == TopologyKind::Decoy {
        net.attach_deflector(decoy_key, addrs::PROXY).expect("decoy topology");
        net.add_overt(addrs::OVERT);
        net.listen_proxy(addrs::PROXY, spec.stack, app, server_creds).expect("fresh address");
        (addrs::OVERT, addrs::PROXY)
    } else {
        net.listen(addrs::SERVER, spec.stack, app, server_creds).expect("fresh address");
        (addrs::SERVER, addrs::SERVER)
    };

    let payload = covert_payload(spec.traffic, &mut rng);
    let bg_stack = spec.background.map(|b| background_stack(&b.model_param));
    let mut bg: Vec<BgFlow> = Vec::new();
    let mut schedule: Vec<(SimTime, Step)> = Vec::new();
    if let (Some(b), Some(bg_stack)) = (spec.background, &bg_stack) {
        for f in gen_background(&b.model, b.count, b.bytes, &mut rng) {
            net.listen(f.server, bg_stack, App::Sink, Credentials::default())
                .expect("distinct background servers");
            schedule.push((SimTime::ZERO + f.start, Step::Background(bg.len())));
            bg.push(BgFlow {
                client: f.client,
                server: f.server,
                content: f.content,
                channel: None,
            });
        }
    }
    let start = SimTime::ZERO;
    let chunk = payload.len().div_ceil(spec.traffic.chunks).max(1);
    let n_chunks = payload.len().div_ceil(chunk).max(1);
    for i in 0..n_chunks {
        let at = start + SimDuration::from_micros(spec.traffic.gap.as_micros() * i as u64);
        schedule.push((at, Step::Chunk(i)));
    }
    // Stable: at equal times the covert flow goes first.
    schedule.sort_by_key(|(t, s)| (*t, matches!(s, Step::Background(_))));

    let mut ch = None;
    let mut outcome_override = None;
    for (at, step) in schedule {
        net.run_until(at.max(net.now()));
        match step {
            Step::Chunk(i) => {
                if i == 0 {
                    match net.connect(addrs::CLIENT, dial, spec.stack, &client_creds) {
                        Ok(c) => ch = Some(c),
                        Err(e) => outcome_override = Some(format!("{:?}", e.kind).to_lowercase()),
                    }
                }
                if let Some(c) = ch {
                    let part = &payload[(i * chunk).min(payload.len())..((i + 1) * chunk).min(payload.len())];
                    let _ = net.write(c, part);
                }
            }
            Step::Background(i) => {
                let f = &mut bg[i];
                let stack = bg_stack.as_ref().expect("background present");
                if let Ok(c) = net.connect(f.client, f.server, stack, &Credentials::default()) {
                    let _ = net.write(c, &f.content);
                    f.channel = Some(c);
                }
            }
        }
    }
    let client_ep = ch.and_then(|c| net.endpoints_of(c)).map(|(l, _)| l);
    let deadline = start + spec.traffic.timeout;
    let response = spec.traffic.response;
    let want = payload.len();
    let bg_channels: Vec<(Addr, Option<ChannelId>, usize)> =
        bg.iter().map(|f| (f.server, f.channel, f.content.len())).collect();
    net.run_while(deadline, |n| {
        let covert_done = match (ch, client_ep) {
            (Some(c), Some(ep)) => {
                n.state(c).is_terminal()
                    || (n.session_for(server, ep).is_some_and(|s| n.available(s) >= want) && n.available(c) >= response)
            }
            _ => true,
        };
        let bg_done = bg_channels.iter().all(|(srv, c, len)| match c {
            None => true,
            Some(c) => {
                n.state(*c).is_terminal()
                    || n.endpoints_of(*c)
                        .and_then(|(l, _)| n.session_for(*srv, l))
                        .is_some_and(|s| n.available(s) >= *len)
            }
        });
        !(covert_done && bg_done)
    });
    if let Some(p) = &policy {
        if p.is_enabled(Node::FprSem) {
            net.run_for(p.probe_timeout + SimDuration::from_millis(100));
        }
    }

    let events: Vec<CensorEvent> = net.censor().map(|c| c.events().to_vec()).unwrap_or_default();
    let mut result = TrialResult {
        index,
        seed: spec.seed,
        detected: false,
        node: None,
        bytes_sent: payload.len(),
        bytes_delivered: 0,
        intact: false,
        goodput: None,
        outcome: String::new(),
        probes_confirmed: net.probe_outcomes().iter().filter(|o| o.confirmed).count(),
        background_total: bg.len(),
        background_flagged: 0,
        background_blocked: 0,
    };
    if let (Some(c), Some(ep)) = (ch, client_ep) {
        let first = events.iter().find(|e| {
            DETECTING_ACTIONS.contains(&e.action)
                && (touches(&e.flow, ep) || (e.action == "probe-confirm" && e.flow.dst == dial))
        });
        result.detected = first.is_some();
        result.node = first.map(|e| e.label.clone());
        let session = net.session_for(server, ep);
        let received = session.map(|s| net.read(s)).unwrap_or_default();
        result.bytes_delivered = received.len();
        let answered = net.available(c) >= response;
        result.intact = received == payload && answered;
        let first_write = net.stats(c).first_write;
        let last = session.and_then(|s| net.stats(s).last_delivery);
        if let (Some(a), Some(b), true) = (first_write, last, !received.is_empty()) {
            let secs = (b - a).as_secs_f64().max(1e-6);
            result.goodput = Some(received.len() as f64 / secs);
        }
        result.outcome = if result.intact {
            "ok".into()
        } else {
            match net.state(c) {
                ChannelState::Failed(e) => format!("{:?}", e.kind).to_lowercase(),
                ChannelState::Closed => "closed".into(),
                _ if result.bytes_delivered == payload.len() && received != payload => "corrupted".into(),
                _ => "incomplete".into(),
            }
        };
    } else {
        result.outcome = outcome_override.unwrap_or_else(|| "failed".into());
    }

    for f in &bg {
        let Some(c) = f.channel else {
            result.background_blocked += 1;
            continue;
        };
        let ep = net.endpoints_of(c).map(|(l, _)| l).expect("channel exists");
        let flagged = events.iter().any(|e| e.action == "flag" && touches(&e.flow, ep));
        let enforced = events.iter().any(|e| ENFORCING_ACTIONS.contains(&e.action) && touches(&e.flow, ep));
        let got = net.session_for(f.server, ep).map(|s| net.read(s)).unwrap_or_default();
        if flagged {
            result.background_flagged += 1;
        }
        if enforced || got != f.content {
            result.background_blocked += 1;
        }
    }

    let logs = if spec.keep_logs {
        TrialLogs {
            packets: net.sim().log().records().to_vec(),
            censor: events,
        }
    } else {
        TrialLogs::default()
    };
    (result, logs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub stack: String,
    pub trials: Vec<TrialResult>,
    pub tpr: f64,
    /// Flagged share of background flows; `None` without background.
    pub fpr: Option<f64>,
    pub collateral: Option<f64>,
}

impl MetricsReport {
    pub fn from_trials(scenario: &str, stack: &str, trials: Vec<TrialResult>) -> Self {
        let n = trials.len().max(1) as f64;
        let tpr = trials.iter().filter(|t| t.detected).count() as f64 / n;
        let bg: usize = trials.iter().map(|t| t.background_total).sum();
        let (fpr, collateral) = if bg == 0 {
            (None, None)
        } else {
            let flagged: usize = trials.iter().map(|t| t.background_flagged).sum();
            let blocked: usize = trials.iter().map(|t| t.background_blocked).sum();
            (Some(flagged as f64 / bg as f64), Some(blocked as f64 / bg as f64))
        };
        MetricsReport {
            scenario: scenario.to_string(),
            stack: stack.to_string(),
            trials,
            tpr,
            fpr,
            collateral,
        }
    }

    pub fn detection_rate(&self) -> f64 {
        self.tpr
    }
}

pub struct ScenarioRun {
    pub report: MetricsReport,
    pub logs: Vec<TrialLogs>,
}

/// Attaches a trained classifier when the scenario asks for one.
pub fn resolve_policy(cfg: &ScenarioConfig) -> CensorPolicy {
    let mut p = cfg.policy.policy.clone();
    if let Some(spec) = &cfg.policy.classifier {
        let model: Arc<ClassifierModel> = crate::training::shared_classifier(spec.samples, &cfg.background, cfg.seed);
        let mut c = ClassifierPolicy::new(model);
        c.margin = spec.margin;
        c.min_packets = spec.min_packets;
        p.classifier = Some(c);
    }
    p
}

/// Runs every trial of a scenario. Trials run in parallel; results keep
/// trial order.
pub fn run_scenario(cfg: &ScenarioConfig) -> ScenarioRun {
    let policy = resolve_policy(cfg);
    let outputs: Vec<(TrialResult, TrialLogs)> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let spec = TrialSpec {
                stack: &cfg.stack,
                policy: Some(policy.clone()),
                topology: &cfg.topology,
                traffic: &cfg.traffic,
                background: Some(&cfg.background),
                seed: trial_seed(cfg.seed, i),
                keep_logs: true,
            };
            run_trial(&spec, i)
        })
        .collect();
    let (trials, logs): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    ScenarioRun {
        report: MetricsReport::from_trials(&cfg.name, cfg.stack.name(), trials),
        logs,
    }
}

/// Whether the observed detections match the `[expect]` section.
pub fn meets_expectation(cfg: &ScenarioConfig, report: &MetricsReport) -> bool {
    let n = report.trials.len() as f64;
    if let Some(want) = cfg.expect.detected {
        let off = report.trials.iter().filter(|t| t.detected != want).count() as f64;
        if off / n > cfg.expect.tolerance {
            return false;
        }
    }
    if let Some(node) = &cfg.expect.node {
        let off = report
            .trials
            .iter()
            .filter(|t| t.detected && t.node.as_deref() != Some(node.as_str()))
            .count() as f64;
        if off / n > cfg.expect.tolerance {
            return false;
        }
    }
    true
}
