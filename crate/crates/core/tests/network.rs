use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex};

use tweak_core::censor::{BlockMode, Censor, CensorPolicy, Node};
use tweak_core::model::{validate_stack, StackDescriptor, ValidatedStack};
use tweak_core::netsim::{Action, Topology};
use tweak_core::network::{App, ChannelState, Network};
use tweak_core::transports::presets::{preset, PRESETS};
use tweak_core::transports::{standard_registry, Credentials, TicketIssuer};
use tweak_core::{ErrorKind, SimDuration, SimTime};

const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
const SERVER: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 10);
const OVERT: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 10);
const PROXY: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 20);
const DECOY_KEY: [u8; 32] = [7; 32];

fn stack(layers: &str) -> ValidatedStack {
    let d = StackDescriptor::parse("test", layers).unwrap();
    validate_stack(&standard_registry(), &d).unwrap()
}

struct Setup {
    net: Network,
    stack: ValidatedStack,
    client_creds: Credentials,
    remote: Ipv4Addr,
}

fn setup(name: &str, policy: Option<CensorPolicy>, seed: u64) -> Setup {
    let st = stack(preset(name).unwrap());
    let decoy = name == "decoy";
    let topo = if decoy { Topology::decoy() } else { Topology::canonical() };
    let mut net = Network::new(topo, seed);
    if let Some(p) = policy {
        net.attach_censor(Censor::new(p).unwrap()).unwrap();
    }
    let issuer = Arc::new(Mutex::new(TicketIssuer::new([3; 32], 3600, seed)));
    let ticket = issuer.lock().unwrap().issue(SimTime::ZERO);
    let server_creds = Credentials {
        issuer: Some(issuer),
        decoy_key: Some(DECOY_KEY),
        ..Default::default()
    };
    let client_creds = Credentials {
        ticket: Some(ticket),
        decoy_key: Some(DECOY_KEY),
        ..Default::default()
    };
    let remote = if decoy {
        net.attach_deflector(DECOY_KEY, PROXY).unwrap();
        net.add_overt(OVERT);
        net.listen_proxy(PROXY, &st, App::Echo, server_creds).unwrap();
        OVERT
    } else {
        net.listen(SERVER, &st, App::Echo, server_creds).unwrap();
        SERVER
    };
    Setup {
        net,
        stack: st,
        client_creds,
        remote,
    }
}

fn echo_round_trip(s: &mut Setup, data: &[u8]) -> Result<Vec<u8>, tweak_core::LayerError> {
    let ch = s.net.open_channel(CLIENT, s.remote, &s.stack, &s.client_creds)?;
    s.net.send(ch, data)?;
    s.net.recv_exact(ch, data.len(), SimDuration::from_secs(60))
}

#[test]
fn every_preset_echoes_over_a_clean_path() {
    for (name, _) in PRESETS {
        let mut s = setup(name, None, 5);
        let data: Vec<u8> = (0..70_000u32).map(|i| (i * 31 % 251) as u8).collect();
        let back = echo_round_trip(&mut s, &data).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(back == data, "{name}: echo differs");
    }
}

#[test]
fn one_byte_and_empty_writes() {
    let mut s = setup("scramblesuit-like", None, 1);
    assert_eq!(echo_round_trip(&mut s, &[9]).unwrap(), vec![9]);
    let mut s = setup("scramblesuit-like", None, 1);
    let ch = s.net.open_channel(CLIENT, s.remote, &s.stack, &s.client_creds).unwrap();
    s.net.send(ch, &[]).unwrap();
}

#[test]
fn decoy_flow_is_served_by_the_proxy() {
    let mut s = setup("decoy", None, 2);
    echo_round_trip(&mut s, b"hello through the decoy").unwrap();
    assert_eq!(s.net.sim().deflector().unwrap().deflected_flows(), 1);
    assert_eq!(s.net.overt_bytes(OVERT), Some(0));
    assert_eq!(s.net.sessions(PROXY).len(), 1);
}

#[test]
fn wrong_ticket_gets_silence() {
    let mut s = setup("scramblesuit-like", None, 3);
    let other = TicketIssuer::new([9; 32], 3600, 1).issue(SimTime::ZERO);
    let creds = Credentials {
        ticket: Some(other),
        ..Default::default()
    };
    let err = s.net.open_channel(CLIENT, SERVER, &s.stack, &creds).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Handshake);
    let server = s.net.sessions(SERVER)[0];
    assert_eq!(s.net.stats(server).wire_bytes_sent, 0);
}

#[test]
fn unused_ticket_is_single_use() {
    let mut s = setup("scramblesuit-like", None, 4);
    echo_round_trip(&mut s, b"first").unwrap();
    let err = echo_round_trip(&mut s, b"second").unwrap_err();
    assert_eq!(err.kind, ErrorKind::Handshake);
}

#[test]
fn next_ticket_reconnects() {
    let mut s = setup("scramblesuit-like", None, 4);
    let ch = s.net.open_channel(CLIENT, SERVER, &s.stack, &s.client_creds).unwrap();
    let next = s.net.take_next_ticket(ch).expect("server hands over a ticket");
    s.client_creds.ticket = Some(next);
    echo_round_trip(&mut s, b"again").unwrap();
}

#[test]
fn blocked_server_is_a_transport_error() {
    let mut policy = CensorPolicy::with_nodes(&[Node::CorRou]);
    policy.address_blocklist.insert(SERVER);
    let mut s = setup("obfs3-like", Some(policy), 6);
    let err = echo_round_trip(&mut s, b"x").unwrap_err();
    assert_eq!(err.kind, ErrorKind::Transport);
    assert!(s.net.sim().log().count(Action::DropCensor) > 0);
}

#[test]
fn reset_block_mode_kills_the_channel() {
    let mut policy = CensorPolicy::with_nodes(&[Node::FprCon, Node::BlkRou]);
    policy.keywords = vec!["forbidden".into()];
    policy.entropy_threshold = None;
    policy.block_mode = BlockMode::Reset;
    let mut s = setup("plaintext", Some(policy), 7);
    let ch = s.net.open_channel(CLIENT, SERVER, &s.stack, &s.client_creds).unwrap();
    let err = s.net.send(ch, b"some forbidden words").unwrap_err();
    assert_eq!(err.kind, ErrorKind::Transport);
    assert!(matches!(s.net.state(ch), ChannelState::Failed(_)));
}

#[test]
fn same_seed_same_log() {
    let run = || {
        let mut s = setup("stegotorus-like", None, 11);
        echo_round_trip(&mut s, &[1u8; 5000]).unwrap();
        s.net.sim().log().to_csv()
    };
    assert_eq!(run(), run());
}
