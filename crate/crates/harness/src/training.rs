//! Training data for the censor's flow classifier, captured the way a
//! censor would: by watching simulated flows pass its hop.
//!
//! Class `tunnel` is an unshaped encrypted stack; class `benign` is the
//! background web traffic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tweak_core::censor::{train_flow_classifier, Censor, CensorPolicy, ClassifierModel, FlowSample};
use tweak_core::model::{validate_stack, StackDescriptor, ValidatedStack};
use tweak_core::netsim::{FlowKey, Topology};
use tweak_core::network::{App, Network};
use tweak_core::transports::presets::preset;
use tweak_core::transports::{standard_registry, Credentials};
use tweak_core::SimDuration;

use crate::addrs;
use crate::background::{background_stack, html_text};
use crate::config::BackgroundSpec;

pub const TUNNEL_LABEL: &str = "tunnel";
pub const BENIGN_LABEL: &str = "benign";
const UPLOAD: usize = 64 * 1024;

fn tunnel_stack() -> ValidatedStack {
    let d = StackDescriptor::parse("tunnel", preset("obfs3-like").expect("preset")).expect("preset parses");
    validate_stack(&standard_registry(), &d).expect("preset validates")
}

/// Client-to-server packets of one upload as seen at the censor hop.
pub fn capture_upload(stack: &ValidatedStack, data: &[u8], seed: u64) -> FlowSample {
    let mut net = Network::new(Topology::canonical(), seed);
    net.sim_mut().set_logging(false);
    net.attach_censor(Censor::new(CensorPolicy::default()).expect("default policy"))
        .expect("canonical topology");
    let port_server = addrs::SERVER;
    net.listen(port_server, stack, App::Sink, Credentials::default())
        .expect("fresh address");
    let Ok(ch) = net.connect(addrs::CLIENT, port_server, stack, &Credentials::default()) else {
        return FlowSample::default();
    };
    let _ = net.write(ch, data);
    let deadline = net.now() + SimDuration::from_secs(120);
    net.run_while(deadline, |n| {
        let (l, _) = n.endpoints_of(ch).expect("channel");
        !n.state(ch).is_terminal() && !n.session_for(port_server, l).is_some_and(|s| n.available(s) >= data.len())
    });
    let (l, r) = net.endpoints_of(ch).expect("channel");
    let key = FlowKey::new(l.0, l.1, r.0, r.1);
    net.censor()
        .and_then(|c| c.flow(&key))
        .map(|f| f.sample.clone())
        .unwrap_or_default()
}

fn collect(samples: usize, mut next: impl FnMut(u64) -> FlowSample) -> FlowSample {
    let mut out = FlowSample::default();
    let mut i = 0u64;
    while out.lengths.len() < samples {
        let f = next(i);
        i += 1;
        if f.lengths.is_empty() {
            continue;
        }
        let room = samples - out.lengths.len();
        out.lengths.extend(f.lengths.iter().take(room));
        out.iats.extend(f.iats.iter().take(room.saturating_sub(1)));
    }
    out
}

/// Trains the two-class model on `samples` packets per class.
pub fn train_classifier(samples: usize, background: &BackgroundSpec, seed: u64) -> ClassifierModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0074_7261_696e);
    let tunnel = tunnel_stack();
    let benign = background_stack(&background.model_param);
    let t = collect(samples, |_| {
        let mut data = vec![0u8; UPLOAD];
        rng.fill_bytes(&mut data);
        capture_upload(&tunnel, &data, rng.next_u64())
    });
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x6265_6e69_676e);
    let b = collect(samples, |_| {
        let size = background.bytes.max(UPLOAD);
        let data = html_text(&mut rng2, size);
        capture_upload(&benign, &data, rng2.next_u64())
    });
    train_flow_classifier(&[(TUNNEL_LABEL.into(), t), (BENIGN_LABEL.into(), b)]).expect("two non-empty classes")
}

type Cache = Mutex<HashMap<(usize, String, u64), Arc<ClassifierModel>>>;

/// Training is deterministic, so models are shared across trials.
pub fn shared_classifier(samples: usize, background: &BackgroundSpec, seed: u64) -> Arc<ClassifierModel> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (samples, background.model_param.clone(), seed);
    if let Some(m) = cache.lock().expect("cache lock").get(&key) {
        return m.clone();
    }
    let m = Arc::new(train_classifier(samples, background, seed));
    cache.lock().expect("cache lock").insert(key, m.clone());
    m
}
