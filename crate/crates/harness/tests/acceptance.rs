//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails. Pass criterion numbers as arguments
//! to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tweak_core::censor::{BlockMode, Censor, CensorPolicy, Node, Verdict, ENTROPY_LABEL};
use tweak_core::crypto::SessionKeys;
use tweak_core::model::{validate_stack, LayerSpec, Params, StackDescriptor, ValidatedStack};
use tweak_core::netsim::{Action, Addr, FlowKey, HopContext, Packet, Topology};
use tweak_core::network::{App, ChannelId, Network};
use tweak_core::stats::{shannon_entropy, DiscreteDist};
use tweak_core::transports::aead::enc_seal;
use tweak_core::transports::decoy::tagged_nonce;
use tweak_core::transports::http::{obf_encode, FormatTemplate};
use tweak_core::transports::presets::preset;
use tweak_core::transports::shaping::{shape_trace, Filler};
use tweak_core::transports::ticket::{TicketClient, DEFAULT_MAX_PAD};
use tweak_core::transports::trace::named_model;
use tweak_core::transports::uniform_dh::{GroupParams, Keypair};
use tweak_core::transports::{
    standard_registry, Credentials, Direction, Role, SessionInit, TicketIssuer, MTU,
};
use tweak_core::{LayerKind, SimDuration, SimTime};
use tweak_harness::matrix::divergences;
use tweak_harness::training::shared_classifier;
use tweak_harness::{evaluate_stack, parse_config, render_markdown, run_scenario, MatrixRow, ScenarioConfig};

const CLIENT: Addr = Addr::new(10, 0, 0, 2);
const SERVER: Addr = Addr::new(198, 51, 100, 10);
const OVERT: Addr = Addr::new(203, 0, 113, 10);
const PROXY: Addr = Addr::new(198, 51, 100, 20);
const MIB: usize = 1 << 20;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn stack(name: &str, layers: &str) -> ValidatedStack {
    let d = StackDescriptor::parse(name, layers).expect("literal descriptor");
    validate_stack(&standard_registry(), &d).expect("literal stack is valid")
}

fn config(text: &str) -> ScenarioConfig {
    parse_config(text, Path::new(env!("CARGO_MANIFEST_DIR"))).expect("literal config")
}

/// A network with one server for `stack`, reached through the decoy path
/// when the stack uses decoy session init.
struct Rig {
    net: Network,
    stack: ValidatedStack,
    creds: Credentials,
    remote: Addr,
}

impl Rig {
    fn new(stack: &ValidatedStack, policy: Option<CensorPolicy>, app: App, seed: u64) -> Rig {
        let decoy = stack.layer(LayerKind::SessionInit).is_some_and(|l| l.implementation == "decoy");
        let mut net = Network::new(if decoy { Topology::decoy() } else { Topology::canonical() }, seed);
        net.sim_mut().set_logging(false);
        if let Some(p) = policy {
            net.attach_censor(Censor::new(p).expect("valid policy")).expect("topology has a censor hop");
        }
        let issuer = Arc::new(Mutex::new(TicketIssuer::new([seed as u8; 32], 3600, seed)));
        let ticket = issuer.lock().expect("fresh").issue(SimTime::ZERO);
        let key = [0x5a; 32];
        let server = Credentials {
            issuer: Some(issuer),
            decoy_key: Some(key),
            ..Default::default()
        };
        let creds = Credentials {
            ticket: Some(ticket),
            decoy_key: Some(key),
            ..Default::default()
        };
        let remote = if decoy {
            net.attach_deflector(key, PROXY).expect("decoy topology");
            net.add_overt(OVERT);
            net.listen_proxy(PROXY, stack, app, server).expect("fresh address");
            OVERT
        } else {
            net.listen(SERVER, stack, app, server).expect("fresh address");
            SERVER
        };
        Rig {
            net,
            stack: stack.clone(),
            creds,
            remote,
        }
    }

    fn echo(&mut self, data: &[u8]) -> Result<Vec<u8>, String> {
        let ch = self
            .net
            .open_channel(CLIENT, self.remote, &self.stack, &self.creds)
            .map_err(|e| e.to_string())?;
        self.net.send(ch, data).map_err(|e| e.to_string())?;
        self.net
            .recv_exact(ch, data.len(), SimDuration::from_secs(3600))
            .map_err(|e| e.to_string())
    }
}

/// Every registered implementation combination that validates, one
/// implementation per kind, Transport always present.
fn all_valid_stacks() -> Vec<ValidatedStack> {
    let reg = standard_registry();
    let choices: Vec<Vec<Option<(LayerKind, &str)>>> = LayerKind::ALL
        .iter()
        .map(|&k| {
            let mut v: Vec<_> = reg.ids(k).into_iter().map(|id| Some((k, id))).collect();
            if k != LayerKind::Transport {
                v.push(None);
            }
            v
        })
        .collect();
    let total: usize = choices.iter().map(Vec::len).product();
    let mut out = Vec::new();
    for mut i in 0..total {
        let mut layers = Vec::new();
        for c in &choices {
            if let Some((k, id)) = c[i % c.len()] {
                layers.push(LayerSpec::new(k, id));
            }
            i /= c.len();
        }
        let d = StackDescriptor::new("enumerated", layers);
        let name = d.render_layers();
        if let Ok(v) = validate_stack(&reg, &StackDescriptor { name, ..d }) {
            out.push(v);
        }
    }
    out
}

fn log_uniform_len(rng: &mut ChaCha8Rng) -> usize {
    let x = ((MIB as f64 + 1.0).ln() * rng.gen::<f64>()).exp() - 1.0;
    (x.floor() as usize).min(MIB)
}

fn c1_channel_contract() -> Result<String, String> {
    let start = Instant::now();
    let stacks = all_valid_stacks();
    ensure(stacks.len() >= 20, || format!("only {} valid stacks enumerated", stacks.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let jobs: Vec<(usize, usize, u64)> = (0..1000)
        .map(|i| {
            let len = match i {
                0 => 0,
                1 => MIB,
                _ => log_uniform_len(&mut rng),
            };
            (i % stacks.len(), len, rng.next_u64())
        })
        .collect();
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|&(s, len, seed)| {
            let mut data = vec![0u8; len];
            ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut data);
            let mut rig = Rig::new(&stacks[s], None, App::Echo, seed);
            match rig.echo(&data) {
                Ok(back) if back == data => None,
                Ok(_) => Some(format!("{}: {len} bytes came back altered", stacks[s].name())),
                Err(e) => Some(format!("{}: {len} bytes: {e}", stacks[s].name())),
            }
        })
        .collect();
    let took = start.elapsed();
    ensure(failures.is_empty(), || format!("{} failed, first: {}", failures.len(), failures[0]))?;
    ensure(took < Duration::from_secs(60), || format!("took {took:.1?}"))?;
    let bytes: usize = jobs.iter().map(|j| j.1).sum();
    Ok(format!(
        "1000 round-trips over {} stacks, {:.1} MiB, in {took:.1?}",
        stacks.len(),
        bytes as f64 / MIB as f64
    ))
}

fn permutations(items: &[LayerKind]) -> Vec<Vec<LayerKind>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn c2_ordering() -> Result<String, String> {
    use LayerKind::*;
    let canonical = [SessionInit, Multiplexing, ContentObfuscation, TimingLengthObfuscation, Transport];
    let id = |k: LayerKind| match k {
        SessionInit => "udh",
        Encryption => "aead",
        Multiplexing => "frame",
        ContentObfuscation => "http",
        TimingLengthObfuscation => "iid",
        Transport => "sim",
    };
    let reg = standard_registry();
    let perms = permutations(&canonical);
    ensure(perms.len() == 120, || format!("{} permutations", perms.len()))?;
    let distinct: BTreeSet<_> = perms.iter().collect();
    ensure(distinct.len() == 120, || "permutations repeat".into())?;
    let mut accepted = 0;
    for p in &perms {
        let d = StackDescriptor::new("perm", p.iter().map(|&k| LayerSpec::new(k, id(k))).collect());
        let ok = validate_stack(&reg, &d).is_ok();
        ensure(ok == (p[..] == canonical[..]), || format!("{p:?} classified as valid={ok}"))?;
        accepted += ok as usize;
    }
    Ok(format!("120 permutations: {accepted} accepted (canonical), {} rejected", 120 - accepted))
}

fn c3_block_duration() -> Result<String, String> {
    let mut c = Censor::new(CensorPolicy::with_nodes(&[Node::BlkRou])).map_err(|e| e.to_string())?;
    let t = SimTime::ZERO + SimDuration::from_secs(1234);
    c.apply_block(SERVER, 443, t);
    let pkt = Packet::data(FlowKey::new(CLIENT, 40000, SERVER, 443), 0, b"x".to_vec());
    let at = |d: u64| HopContext {
        now: t + SimDuration::from_micros(d),
        position: 1,
        hops_remaining: 1,
    };
    let before = c.inspect_packet(&pkt, &at(89_999_000));
    let after = c.inspect_packet(&pkt, &at(90_001_000));
    ensure(before == Verdict::Drop, || format!("t+89.999 s: {before:?}"))?;
    ensure(after == Verdict::Allow, || format!("t+90.001 s: {after:?}"))?;
    ensure(c.is_blocked(SERVER, 443, t + SimDuration::from_micros(89_999_999)), || "blocked 1 us before expiry".into())?;
    ensure(!c.is_blocked(SERVER, 443, t + SimDuration::from_secs(90)), || "still blocked at t+90 s".into())?;
    Ok("dropped at t+89.999 s, allowed at t+90.001 s".into())
}

fn entropy_censor() -> Censor {
    let mut p = CensorPolicy::with_nodes(&[Node::FprCon]);
    p.entropy_threshold = Some(7.2);
    Censor::new(p).expect("valid policy")
}

fn first_packet_verdict(payload: &[u8], port: u16) -> Verdict {
    let pkt = Packet::data(FlowKey::new(CLIENT, port, SERVER, 443), 0, payload[..payload.len().min(MTU)].to_vec());
    entropy_censor().inspect_packet(
        &pkt,
        &HopContext {
            now: SimTime::ZERO,
            position: 1,
            hops_remaining: 1,
        },
    )
}

fn c4_entropy() -> Result<String, String> {
    let keys = SessionKeys::derive(&[1; 32], b"acceptance");
    let sealed = enc_seal(&keys, &vec![0u8; 64 * 1024], Direction::ClientToServer);
    let h_enc = shannon_entropy(&sealed);
    ensure(h_enc >= 7.99, || format!("enc_seal entropy {h_enc:.4}"))?;

    let template = FormatTemplate::from_params(&Params::new()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut first_obf = Vec::new();
    for i in 0..1000 {
        let role = if i % 2 == 0 { Role::Client } else { Role::Server };
        let mut chunk = vec![0u8; rng.gen_range(0..=FormatTemplate::capacity(role))];
        rng.fill_bytes(&mut chunk);
        let msg = obf_encode(&template, role, &chunk).map_err(|e| e.to_string())?;
        ensure(template.acceptance_regex(role).is_match(&msg), || format!("chunk {i} misses its regex"))?;
        let h = shannon_entropy(&msg);
        worst = worst.max(h);
        ensure(h < 6.0, || format!("chunk {i}: entropy {h:.3}"))?;
        if i == 0 {
            first_obf = msg;
        }
    }
    let v_enc = first_packet_verdict(&sealed, 40000);
    let v_obf = first_packet_verdict(&first_obf, 40001);
    ensure(v_enc == Verdict::Flag(ENTROPY_LABEL.into()), || format!("sealed first packet: {v_enc:?}"))?;
    ensure(v_obf == Verdict::Allow, || format!("http first packet: {v_obf:?}"))?;
    Ok(format!(
        "enc {h_enc:.4} bits/byte; http max {worst:.3} over 1000 chunks, all match; threshold 7.2 flags enc only"
    ))
}

enum Probe {
    Fuzz(Vec<u8>),
    Replay(Vec<u8>),
}

/// 500 random blobs and 500 replays, the second half of them mutated.
fn probes(first_flight: &[u8], rng: &mut ChaCha8Rng) -> Vec<Probe> {
    (0..1000)
        .map(|i| {
            if i % 2 == 0 {
                let mut b = vec![0u8; rng.gen_range(256..2048)];
                rng.fill_bytes(&mut b);
                Probe::Fuzz(b)
            } else {
                let mut b = first_flight.to_vec();
                if i % 4 == 3 {
                    let at = rng.gen_range(0..b.len());
                    b[at] ^= 1 << rng.gen_range(0..8);
                }
                Probe::Replay(b)
            }
        })
        .collect()
}

/// Sends every probe on its own connection; returns the server payload
/// bytes each connection received.
fn fire(net: &mut Network, probes: &[Probe]) -> Vec<u64> {
    let plain = stack("raw", "trn:sim");
    let creds = Credentials::default();
    let mut chans: Vec<ChannelId> = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        let src = Addr::new(10, 9, (i >> 8) as u8, i as u8);
        let ch = net.connect(src, SERVER, &plain, &creds).expect("plain connect");
        let (Probe::Fuzz(b) | Probe::Replay(b)) = p;
        net.write(ch, b).expect("plain write");
        chans.push(ch);
    }
    net.settle(SimDuration::from_secs(30));
    chans.iter().map(|&c| net.stats(c).wire_bytes_received).collect()
}

fn c5_probes() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // Ticket server without shaping, so probes reach the ticket check: one
    // genuine client first, then the probes.
    let ss = stack("ticket", "si:ticket, enc:aead, trn:sim");
    let mut net = Network::new(Topology::canonical(), 5);
    net.sim_mut().set_logging(false);
    let issuer = Arc::new(Mutex::new(TicketIssuer::new([2; 32], 3600, 5)));
    let ticket = issuer.lock().expect("fresh").issue(SimTime::ZERO);
    let creds = Credentials {
        issuer: Some(issuer),
        ..Default::default()
    };
    net.listen(SERVER, &ss, App::Echo, creds).map_err(|e| e.to_string())?;
    let flight = TicketClient::new(ticket, DEFAULT_MAX_PAD, &mut rng).initiate(SimTime::ZERO);
    let genuine = fire(&mut net, &[Probe::Replay(flight.clone())]);
    ensure(genuine[0] > 0, || "genuine first flight was not answered".into())?;
    let set = probes(&flight, &mut rng);
    let got = fire(&mut net, &set);
    let answered = got.iter().filter(|&&b| b > 0).count();
    let server_sent: u64 = net.sessions(SERVER).iter().skip(1).map(|&s| net.stats(s).wire_bytes_sent).sum();
    ensure(answered == 0 && server_sent == 0, || {
        format!("{answered} probes answered, server sent {server_sent} bytes")
    })?;

    // Uniform-DH server: the same probes complete its handshake.
    let udh = stack("udh", preset("obfs3-like").expect("preset"));
    let mut net = Network::new(Topology::canonical(), 6);
    net.sim_mut().set_logging(false);
    net.listen(SERVER, &udh, App::Echo, Credentials::default()).map_err(|e| e.to_string())?;
    let dh_flight = Keypair::generate(&GroupParams::default(), &mut rng).public_wire().to_vec();
    let set = probes(&dh_flight, &mut rng);
    let got = fire(&mut net, &set);
    let completed = got.iter().filter(|&&b| b > 0).count();
    ensure(completed == 1000, || format!("only {completed}/1000 udh handshakes completed"))?;

    // And the censor's prober confirms and blocks a live udh server, while
    // the ticket server stays unconfirmed.
    let mut verdicts = Vec::new();
    for (s, want) in [(&udh, true), (&ss, false)] {
        let mut p = CensorPolicy::with_nodes(&[Node::FprCon, Node::FprSem]);
        p.entropy_threshold = Some(7.2);
        let mut rig = Rig::new(s, Some(p), App::Echo, 7);
        let _ = rig.echo(&vec![7u8; 4096]);
        rig.net.settle(SimDuration::from_secs(10));
        let out = rig.net.probe_outcomes().to_vec();
        ensure(out.len() == 1, || format!("{}: {} probes ran", s.name(), out.len()))?;
        let blocked = rig.net.censor().expect("attached").is_blocked(SERVER, 443, rig.net.now());
        ensure(out[0].confirmed == want && blocked == want, || {
            format!("{}: confirmed {} blocked {blocked}", s.name(), out[0].confirmed)
        })?;
        verdicts.push(format!("{} {}", s.name(), if want { "blocked" } else { "not confirmed" }));
    }
    Ok(format!(
        "ticket server sent 0 bytes to 1000 probes; udh completed 1000/1000; prober: {}",
        verdicts.join(", ")
    ))
}

/// Both CDFs are right-continuous steps, so the supremum is attained at a
/// sample value or a support point.
fn ks_distance<T: Copy + PartialOrd>(sample: &mut [T], target: &DiscreteDist<T>) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    let n = sample.len() as f64;
    sample
        .iter()
        .chain(target.support())
        .map(|&v| (sample.partition_point(|x| *x <= v) as f64 / n - target.cdf(v)).abs())
        .fold(0.0, f64::max)
}

fn detection_rate(layers: &str, seed: u64) -> f64 {
    let cfg = config(&format!(
        "[scenario]\nname = classifier\nseed = {seed}\ntrials = 50\n[stack]\nlayers = {layers}\n\
         [policy]\nnodes = FPR.LEN, FPR.TIM\nclassifier = true\nclassifier_samples = 10000\n"
    ));
    run_scenario(&cfg).report.tpr
}

fn c6_shaping_and_classifier() -> Result<String, String> {
    let start = Instant::now();
    let model = named_model("http").map_err(|e| e.to_string())?;
    let mut data = vec![0u8; 12 * MIB];
    ChaCha8Rng::seed_from_u64(6).fill_bytes(&mut data);
    let shaped = shape_trace(&model, Filler::Random, 6, &data);
    ensure(shaped.len() > 10_000, || format!("only {} packets", shaped.len()))?;
    let shaped = &shaped[..10_000];
    let mut lens: Vec<u32> = shaped.iter().map(|(_, p)| p.len() as u32).collect();
    let mut gaps: Vec<u64> = shaped.windows(2).map(|w| w[1].0.saturating_sub(w[0].0).as_micros()).collect();
    let ks_len = ks_distance(&mut lens, model.lengths());
    let ks_iat = ks_distance(&mut gaps, model.iats_us());
    ensure(ks_len <= 0.05, || format!("length KS {ks_len:.4}"))?;
    ensure(ks_iat <= 0.05, || format!("inter-arrival KS {ks_iat:.4}"))?;

    let tpr_plain = detection_rate("si:udh, enc:aead, trn:sim", 42);
    let tpr_shaped = detection_rate("si:udh, enc:aead, timlen:trace{model=http}, trn:sim", 42);
    let took = start.elapsed();
    ensure(tpr_plain >= 0.9, || format!("unshaped TPR {tpr_plain:.2}"))?;
    ensure(tpr_shaped <= 0.1, || format!("trace-shaped TPR {tpr_shaped:.2}"))?;
    ensure(took < Duration::from_secs(300), || format!("took {took:.1?}"))?;
    Ok(format!(
        "KS length {ks_len:.4}, iat {ks_iat:.4} (n=10000); TPR unshaped {tpr_plain:.2}, shaped {tpr_shaped:.2} (50 trials) in {took:.1?}"
    ))
}

fn keyword_policy(ttl_aware: bool) -> CensorPolicy {
    let mut p = CensorPolicy::with_nodes(&[Node::FprCon, Node::CorSem]);
    p.keywords = vec!["falun".into()];
    p.entropy_threshold = None;
    p.ttl_aware_rst = ttl_aware;
    p.block_mode = BlockMode::Reset;
    p
}

/// Text with one keyword per MTU-sized packet, each split across a packet
/// boundary when `straddle` is set.
fn keyword_text(packets: usize, straddle: bool) -> Vec<u8> {
    let mut v: Vec<u8> = (0..packets * MTU).map(|i| b"abcdefghijkmnopqrstvwxyz "[i % 25]).collect();
    for k in 0..packets {
        let at = if straddle { (k + 1) * MTU - 2 } else { k * MTU + 100 };
        if at + 5 <= v.len() {
            v[at..at + 5].copy_from_slice(b"falun");
        }
    }
    v
}

fn transfer(layers: &str, policy: CensorPolicy, data: &[u8]) -> (Result<Vec<u8>, String>, Rig) {
    let s = stack("mdft", layers);
    let mut rig = Rig::new(&s, Some(policy), App::Echo, 8);
    rig.net.sim_mut().set_logging(true);
    let r = rig.echo(data);
    (r, rig)
}

fn c7_mdft() -> Result<String, String> {
    let data = keyword_text(8, false);

    // (a) A TTL-limited reset reaches the censor but not the server.
    let (r, _) = transfer("trn:sim", keyword_policy(false), &data);
    ensure(r.is_err(), || "baseline keyword transfer was not reset".into())?;
    let (r, rig) = transfer("trn:sim{rst_ttl=2}", keyword_policy(false), &data);
    ensure(r.as_deref() == Ok(&data[..]), || format!("low-TTL reset: {r:?}").chars().take(200).collect())?;
    let censor = rig.net.censor().expect("attached");
    let torn = censor.events().iter().any(|e| e.action == "teardown");
    let flagged = censor.events().iter().any(|e| e.action == "flag" || e.action == "rst");
    let ttl_drops = rig.net.sim().log().count(Action::DropTtl);
    let server_open = rig.net.sessions(SERVER).iter().all(|&s| !rig.net.state(s).is_terminal());
    ensure(torn && !flagged, || format!("teardown {torn}, flagged {flagged}"))?;
    ensure(ttl_drops >= 1 && server_open, || format!("ttl drops {ttl_drops}, server open {server_open}"))?;
    let (r, _) = transfer("trn:sim{rst_ttl=2}", keyword_policy(true), &data);
    ensure(r.is_err(), || "a TTL-aware censor should still reset".into())?;

    // (b) Endpoints that ignore injected resets finish the transfer.
    let (r, rig) = transfer("trn:sim{ignore_rst=true}", keyword_policy(false), &data);
    let injected = rig.net.censor().expect("attached").events().iter().filter(|e| e.action == "rst").count();
    ensure(injected > 0, || "censor injected no reset".into())?;
    ensure(r.as_deref() == Ok(&data[..]), || "ignore_rst transfer failed".into())?;

    // (c) Keywords split across packets on different ports escape the
    // per-flow reassembler.
    let split = keyword_text(8, true);
    let (r, _) = transfer("trn:sim", keyword_policy(false), &split);
    ensure(r.is_err(), || "split keyword escaped a fixed-port flow".into())?;
    let (r, rig) = transfer("trn:sim{hop=2000-2100,hop_seed=7}", keyword_policy(false), &split);
    let flags = rig.net.censor().expect("attached").events().iter().filter(|e| e.action == "flag").count();
    ensure(r.as_deref() == Ok(&split[..]) && flags == 0, || format!("hopping transfer: ok={} flags={flags}", r.is_ok()))?;

    Ok(format!(
        "(a) low-TTL reset tore down state, {ttl_drops} reset(s) expired before the server; \
         (b) {injected} injected reset(s) ignored; (c) split keywords passed under hopping"
    ))
}

fn c8_decoy() -> Result<String, String> {
    let s = stack("decoy", preset("decoy").expect("preset"));
    let mut rig = Rig::new(&s, None, App::Echo, 9);
    for i in 0..100u32 {
        let msg = format!("covert request {i}").into_bytes();
        let back = rig.echo(&msg)?;
        ensure(back == msg, || format!("flow {i} echoed wrong bytes"))?;
    }
    let deflected = rig.net.sim().deflector().expect("decoy topology").deflected_flows();
    let overt = rig.net.overt_bytes(OVERT).unwrap_or(u64::MAX);
    let proxied = rig.net.sessions(PROXY).len();
    ensure(deflected == 100 && proxied == 100 && overt == 0, || {
        format!("deflected {deflected}, proxy sessions {proxied}, overt bytes {overt}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pooled = Vec::new();
    for _ in 0..100 {
        pooled.extend_from_slice(&tagged_nonce(&[0x5a; 32], &mut rng));
    }
    let mut counts = [0f64; 256];
    for &b in &pooled {
        counts[b as usize] += 1.0;
    }
    let e = pooled.len() as f64 / 256.0;
    let stat: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
    let p = 1.0 - ChiSquared::new(255.0).expect("dof").cdf(stat);
    ensure(p > 0.01, || format!("tag chi-square p = {p:.4}"))?;
    Ok(format!("100/100 flows reached the proxy; tag bytes chi-square p = {p:.3} over {} bytes", pooled.len()))
}

fn c9_matrix() -> Result<String, String> {
    let row = |p: &str| -> MatrixRow {
        let cfg = config(&format!("[scenario]\nname = m-{p}\nseed = 42\ntrials = 50\n[stack]\npreset = {p}\n"));
        let clf = shared_classifier(10_000, &cfg.background, cfg.seed);
        evaluate_stack(&cfg, &clf)
    };
    let protected = |r: &MatrixRow, n: Node| r.cells.get(&n).and_then(|c| c.protected());
    let ss = row("scramblesuit-like");
    for n in [Node::FprCon, Node::CorCon, Node::FprLen, Node::FprTim, Node::FprSem] {
        ensure(protected(&ss, n) == Some(true), || format!("scramblesuit-like not protected at {}", n.label()))?;
    }
    ensure(protected(&ss, Node::BlkRou) == Some(false), || "scramblesuit-like protected at BLK.ROU".into())?;
    let o3 = row("obfs3-like");
    ensure(protected(&o3, Node::FprCon) == Some(true), || "obfs3-like not protected at FPR.CON".into())?;
    ensure(protected(&o3, Node::FprSem) == Some(false), || "obfs3-like protected at FPR.SEM".into())?;
    let plain = row("plaintext");
    let any = Node::ALL.iter().filter(|&&n| protected(&plain, n) == Some(true)).count();
    ensure(any == 0, || format!("plaintext protected at {any} nodes"))?;
    ensure(plain.cells.values().all(|c| c.credited().is_none_or(BTreeSet::is_empty)), || "plaintext row credits a layer".into())?;

    let rows = [ss, o3, plain];
    let md = render_markdown(&rows);
    let div: Vec<String> = rows.iter().flat_map(divergences).collect();
    for d in &div {
        ensure(md.contains(d.as_str()), || format!("divergence missing from the report: {d}"))?;
    }
    Ok(format!("rows match; {} divergence(s) listed: {}", div.len(), div.join("; ")))
}

fn c10_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenarios");
    let mut compared = 0;
    for name in ["background-overblocking", "plaintext-keyword"] {
        let cfg = scenarios.join(format!("{name}.cfg"));
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{name}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_tweak"))
                .arg("run")
                .arg(&cfg)
                .args(["--seed", "42", "--out"])
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?
                .status;
            ensure(status.success(), || format!("{name}: run exited with {status}"))?;
            outs.push(out);
        }
        for f in ["report.csv", "events.csv", "censor_events.csv", "report.md"] {
            let a = fs::read(outs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
            let b = fs::read(outs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
            ensure(!a.is_empty() && a == b, || format!("{name}/{f} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} report files byte-identical across two `run --seed 42` invocations"))
}

fn main() -> ExitCode {
    let checks: [(u8, &str, Check); 10] = [
        (1, "channel contract", c1_channel_contract),
        (2, "ordering validation", c2_ordering),
        (3, "block duration", c3_block_duration),
        (4, "entropy contrast", c4_entropy),
        (5, "probe resistance", c5_probes),
        (6, "shaping fidelity and classifier evasion", c6_shaping_and_classifier),
        (7, "reset and hopping evasion", c7_mdft),
        (8, "decoy deflection", c8_decoy),
        (9, "coverage matrix", c9_matrix),
        (10, "determinism", c10_determinism),
    ];
    let wanted: BTreeSet<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{took:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
