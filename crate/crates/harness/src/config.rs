//! Scenario configuration files.
//!
//! The format is flat `key = value` pairs under `[section]` headers, with
//! `#` comment lines. Stack layers use the descriptor syntax
//! `kind:impl{param=value,...}, ...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use tweak_core::censor::{parse_rule_lines, BlockMode, CensorPolicy, Node, TamperMode};
use tweak_core::model::{validate_stack, StackDescriptor, ValidatedStack};
use tweak_core::netsim::{Addr, LinkParams, Topology};
use tweak_core::transports::presets::preset;
use tweak_core::transports::standard_registry;
use tweak_core::transports::trace::{cached_file, named_model, TraceModel};
use tweak_core::SimDuration;

use crate::addrs;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key `{key}`: {message}")]
    Key { line: usize, key: String, message: String },
    #[error("{0}")]
    Missing(String),
}

impl ConfigError {
    fn key(entry: &Entry, key: &str, message: impl Into<String>) -> Self {
        ConfigError::Key {
            line: entry.line,
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

type Section = BTreeMap<String, Entry>;

const SECTIONS: [(&str, &[&str]); 7] = [
    ("scenario", &["name", "seed", "trials", "suites"]),
    ("stack", &["name", "layers", "preset", "reference"]),
    (
        "policy",
        &[
            "nodes",
            "keywords",
            "keywords_file",
            "regexes",
            "regexes_file",
            "entropy_threshold",
            "classifier",
            "classifier_samples",
            "classifier_margin",
            "classifier_min_packets",
            "probe_budget",
            "probe_timeout_s",
            "block_duration_s",
            "throttle",
            "address_blocklist",
            "static_blocks",
            "suspect_addrs",
            "suspect_ports",
            "ttl_aware_rst",
            "block_mode",
            "tamper_mode",
        ],
    ),
    ("topology", &["kind", "latency_ms", "loss", "bandwidth"]),
    ("traffic", &["bytes", "chunks", "gap_ms", "content", "keyword", "response", "timeout_s"]),
    ("background", &["count", "model", "file", "bytes"]),
    ("expect", &["detected", "node", "tolerance"]),
];

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>, ConfigError> {
    let mut out: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(rest) = l.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("malformed section header `{l}`"),
            })?;
            let name = name.trim().to_string();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("unknown section `[{name}]`"),
                });
            }
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{l}`"),
        })?;
        let key = k.trim().to_string();
        let section = current.clone().ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("key `{key}` appears before any section"),
        })?;
        let known = SECTIONS.iter().find(|(s, _)| *s == section).expect("checked").1;
        if !known.contains(&key.as_str()) {
            return Err(ConfigError::Key {
                line,
                key,
                message: format!("unknown key in [{section}]"),
            });
        }
        let sec = out.get_mut(&section).expect("inserted");
        if let Some(prev) = sec.get(&key) {
            return Err(ConfigError::Key {
                line,
                key,
                message: format!("already set on line {}", prev.line),
            });
        }
        sec.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line,
            },
        );
    }
    Ok(out)
}

struct Reader<'a> {
    section: Option<&'a Section>,
}

impl<'a> Reader<'a> {
    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.section.and_then(|s| s.get(key))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|err| ConfigError::key(e, key, format!("cannot parse `{}`: {err}", e.value))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.entry(key)
            .map(|e| {
                e.value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Direct,
    Canonical,
    Decoy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub link: LinkParams,
}

impl TopologySpec {
    pub fn build(&self) -> Topology {
        use tweak_core::netsim::HopRole::*;
        match self.kind {
            TopologyKind::Direct => Topology::direct(self.link),
            TopologyKind::Canonical => Topology::uniform(vec![Router, Censor], self.link),
            TopologyKind::Decoy => Topology::uniform(vec![Router, Censor, Deflector], self.link),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Content {
    /// Uniform random bytes.
    Random,
    /// Low-entropy prose.
    Text,
    /// Prose with the configured keyword embedded once.
    Keyword,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficScript {
    /// Client-to-server application bytes.
    pub bytes: usize,
    pub chunks: usize,
    pub gap: SimDuration,
    pub content: Content,
    pub keyword: String,
    /// Bytes the server answers with after the first delivery.
    pub response: usize,
    pub timeout: SimDuration,
}

impl Default for TrafficScript {
    fn default() -> Self {
        TrafficScript {
            bytes: 64 * 1024,
            chunks: 1,
            gap: SimDuration::ZERO,
            content: Content::Random,
            keyword: "falun".into(),
            response: 1024,
            timeout: SimDuration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackgroundSpec {
    pub count: usize,
    pub model: std::sync::Arc<TraceModel>,
    /// Layer descriptor value for the shaping layer.
    pub model_param: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSpec {
    /// Training packets per class.
    pub samples: usize,
    pub margin: f64,
    pub min_packets: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            samples: 10_000,
            margin: 2.0,
            min_packets: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicySpec {
    /// Everything but the trained classifier, which depends on the seed.
    pub policy: CensorPolicy,
    pub classifier: Option<ClassifierSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub detected: Option<bool>,
    pub node: Option<String>,
    /// Fraction of trials allowed to disagree with `detected`.
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    /// Matrix suites to run for this stack; `None` means all.
    pub suites: Option<BTreeSet<Node>>,
    pub stack: ValidatedStack,
    /// Reference matrix row this stack models, for divergence reporting.
    pub reference: Option<String>,
    pub policy: PolicySpec,
    pub topology: TopologySpec,
    pub traffic: TrafficScript,
    pub background: BackgroundSpec,
    pub expect: Expectation,
}

impl ScenarioConfig {
    /// Address of the covert server as the censor would need to name it.
    pub fn covert_server(&self) -> Addr {
        covert_server(self.topology.kind)
    }
}

pub fn covert_server(kind: TopologyKind) -> Addr {
    match kind {
        TopologyKind::Decoy => addrs::PROXY,
        _ => addrs::SERVER,
    }
}

fn parse_bool(e: &Entry, key: &str) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        v => Err(ConfigError::key(e, key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_addr(e: &Entry, key: &str, raw: &str, server: Addr) -> Result<Addr, ConfigError> {
    if raw == "server" {
        return Ok(server);
    }
    raw.parse()
        .map_err(|_| ConfigError::key(e, key, format!("`{raw}` is not an IPv4 address or `server`")))
}

fn read_rules(base: &Path, e: &Entry, key: &str) -> Result<Vec<String>, ConfigError> {
    let path = base.join(&e.value);
    let text = fs::read_to_string(&path).map_err(|err| ConfigError::key(e, key, format!("{}: {err}", path.display())))?;
    Ok(parse_rule_lines(&text))
}

fn parse_policy(r: &Reader, base: &Path, server: Addr) -> Result<PolicySpec, ConfigError> {
    let mut p = CensorPolicy::default();
    if let Some(e) = r.entry("nodes") {
        for n in r.list("nodes") {
            if n == "none" {
                continue;
            }
            let node = Node::from_str(&n).map_err(|_| ConfigError::key(e, "nodes", format!("unknown attack node `{n}`")))?;
            p.enabled.insert(node);
        }
    }
    p.keywords = r.list("keywords");
    if let Some(e) = r.entry("keywords_file") {
        p.keywords.extend(read_rules(base, e, "keywords_file")?);
    }
    p.regexes = r.list("regexes");
    if let Some(e) = r.entry("regexes_file") {
        p.regexes.extend(read_rules(base, e, "regexes_file")?);
    }
    p.entropy_threshold = match r.entry("entropy_threshold") {
        None => None,
        Some(e) if e.value == "off" || e.value == "none" => None,
        Some(e) => {
            let t: f64 = r.parse("entropy_threshold")?.expect("present");
            if !(0.0..=8.0).contains(&t) {
                return Err(ConfigError::key(e, "entropy_threshold", "must lie within 0-8 bits per byte"));
            }
            Some(t)
        }
    };
    let classifier = match r.entry("classifier") {
        Some(e) if parse_bool(e, "classifier")? => Some(ClassifierSpec {
            samples: r.or("classifier_samples", 10_000usize)?,
            margin: r.or("classifier_margin", 2.0f64)?,
            min_packets: r.or("classifier_min_packets", 20usize)?,
        }),
        _ => None,
    };
    if let Some(c) = &classifier {
        if c.samples == 0 || c.min_packets == 0 {
            let e = r.entry("classifier").expect("present");
            return Err(ConfigError::key(e, "classifier", "samples and min_packets must be positive"));
        }
    }
    p.probe_budget = r.or("probe_budget", p.probe_budget)?;
    if let Some(s) = r.parse::<f64>("probe_timeout_s")? {
        p.probe_timeout = SimDuration::from_secs_f64(s);
    }
    if let Some(s) = r.parse::<f64>("block_duration_s")? {
        let e = r.entry("block_duration_s").expect("present");
        if s <= 0.0 || !s.is_finite() {
            return Err(ConfigError::key(e, "block_duration_s", "must be positive"));
        }
        p.block_duration = SimDuration::from_secs_f64(s);
    }
    p.throttle_factor = r.or("throttle", p.throttle_factor)?;
    if let Some(e) = r.entry("address_blocklist") {
        for a in r.list("address_blocklist") {
            p.address_blocklist.insert(parse_addr(e, "address_blocklist", &a, server)?);
        }
    }
    if let Some(e) = r.entry("suspect_addrs") {
        for a in r.list("suspect_addrs") {
            p.suspect_addrs.insert(parse_addr(e, "suspect_addrs", &a, server)?);
        }
    }
    if let Some(e) = r.entry("suspect_ports") {
        for a in r.list("suspect_ports") {
            let port = a
                .parse()
                .map_err(|_| ConfigError::key(e, "suspect_ports", format!("`{a}` is not a port")))?;
            p.suspect_ports.insert(port);
        }
    }
    if let Some(e) = r.entry("static_blocks") {
        for item in r.list("static_blocks") {
            let (a, port) = match item.rsplit_once(':') {
                Some((a, port)) => {
                    let port = port
                        .parse()
                        .map_err(|_| ConfigError::key(e, "static_blocks", format!("`{port}` is not a port")))?;
                    (a.to_string(), Some(port))
                }
                None => (item.clone(), None),
            };
            p.static_blocks.push((parse_addr(e, "static_blocks", &a, server)?, port));
        }
    }
    if let Some(e) = r.entry("ttl_aware_rst") {
        p.ttl_aware_rst = parse_bool(e, "ttl_aware_rst")?;
    }
    if let Some(e) = r.entry("block_mode") {
        p.block_mode = match e.value.as_str() {
            "drop" => BlockMode::Drop,
            "reset" => BlockMode::Reset,
            v => return Err(ConfigError::key(e, "block_mode", format!("expected drop or reset, got `{v}`"))),
        };
    }
    if let Some(e) = r.entry("tamper_mode") {
        p.tamper_mode = match e.value.as_str() {
            "match" => TamperMode::Match,
            "flagged" => TamperMode::Flagged,
            v => return Err(ConfigError::key(e, "tamper_mode", format!("expected match or flagged, got `{v}`"))),
        };
    }
    if let Err(err) = p.validate() {
        let e = r
            .entry("throttle")
            .or_else(|| r.entry("regexes"))
            .or_else(|| r.entry("regexes_file"))
            .or_else(|| r.entry("nodes"));
        return Err(match e {
            Some(e) => ConfigError::key(e, "policy", err.to_string()),
            None => ConfigError::Missing(err.to_string()),
        });
    }
    Ok(PolicySpec { policy: p, classifier })
}

fn parse_topology(r: &Reader) -> Result<TopologySpec, ConfigError> {
    let kind = match r.entry("kind") {
        None => TopologyKind::Canonical,
        Some(e) => match e.value.as_str() {
            "direct" => TopologyKind::Direct,
            "canonical" => TopologyKind::Canonical,
            "decoy" => TopologyKind::Decoy,
            v => return Err(ConfigError::key(e, "kind", format!("expected direct, canonical or decoy, got `{v}`"))),
        },
    };
    let d = LinkParams::default();
    let latency: f64 = r.or("latency_ms", d.latency.as_millis_f64())?;
    let loss: f64 = r.or("loss", d.loss)?;
    let bandwidth: f64 = r.or("bandwidth", d.bandwidth)?;
    if !(0.0..=1.0).contains(&loss) {
        return Err(ConfigError::key(r.entry("loss").expect("set"), "loss", "must lie within 0-1"));
    }
    if bandwidth <= 0.0 || !bandwidth.is_finite() {
        return Err(ConfigError::key(r.entry("bandwidth").expect("set"), "bandwidth", "must be positive"));
    }
    if latency < 0.0 || !latency.is_finite() {
        return Err(ConfigError::key(r.entry("latency_ms").expect("set"), "latency_ms", "must be non-negative"));
    }
    Ok(TopologySpec {
        kind,
        link: LinkParams::new(latency, loss, bandwidth),
    })
}

fn parse_traffic(r: &Reader) -> Result<TrafficScript, ConfigError> {
    let d = TrafficScript::default();
    let content = match r.entry("content") {
        None => d.content,
        Some(e) => match e.value.as_str() {
            "random" => Content::Random,
            "text" => Content::Text,
            "keyword" => Content::Keyword,
            v => return Err(ConfigError::key(e, "content", format!("expected random, text or keyword, got `{v}`"))),
        },
    };
    let chunks: usize = r.or("chunks", d.chunks)?;
    if chunks == 0 {
        return Err(ConfigError::key(r.entry("chunks").expect("set"), "chunks", "must be at least 1"));
    }
    Ok(TrafficScript {
        bytes: r.or("bytes", d.bytes)?,
        chunks,
        gap: SimDuration::from_millis_f64(r.or("gap_ms", 0.0)?),
        content,
        keyword: r.entry("keyword").map_or(d.keyword, |e| e.value.clone()),
        response: r.or("response", d.response)?,
        timeout: SimDuration::from_secs_f64(r.or("timeout_s", d.timeout.as_secs_f64())?),
    })
}

fn parse_background(r: &Reader, base: &Path) -> Result<BackgroundSpec, ConfigError> {
    let (model, param) = match (r.entry("model"), r.entry("file")) {
        (Some(e), Some(_)) => return Err(ConfigError::key(e, "model", "give either `model` or `file`, not both")),
        (_, Some(e)) => {
            let path = base.join(&e.value);
            let shown = path.display().to_string();
            let m = cached_file(&shown).map_err(|err| ConfigError::key(e, "file", err.to_string()))?;
            (m, format!("file={shown}"))
        }
        (Some(e), None) => {
            let m = named_model(&e.value).map_err(|err| ConfigError::key(e, "model", err.to_string()))?;
            (m, format!("model={}", e.value))
        }
        (None, None) => (named_model("http").expect("builtin model"), "model=http".to_string()),
    };
    Ok(BackgroundSpec {
        count: r.or("count", 0usize)?,
        model,
        model_param: param,
        bytes: r.or("bytes", 16 * 1024usize)?,
    })
}

fn parse_stack(r: &Reader) -> Result<(ValidatedStack, Option<String>), ConfigError> {
    let (layers, key, entry) = match (r.entry("layers"), r.entry("preset")) {
        (Some(e), Some(_)) => return Err(ConfigError::key(e, "layers", "give either `layers` or `preset`, not both")),
        (Some(e), None) => (e.value.clone(), "layers", e),
        (None, Some(e)) => {
            let l = preset(&e.value).ok_or_else(|| ConfigError::key(e, "preset", format!("unknown preset `{}`", e.value)))?;
            (l.to_string(), "preset", e)
        }
        (None, None) => return Err(ConfigError::Missing("[stack] needs `layers` or `preset`".into())),
    };
    let name = r
        .entry("name")
        .map(|e| e.value.clone())
        .or_else(|| r.entry("preset").map(|e| e.value.clone()))
        .unwrap_or_else(|| "stack".into());
    let desc = StackDescriptor::parse(&name, &layers).map_err(|m| ConfigError::key(entry, key, m))?;
    let stack = validate_stack(&standard_registry(), &desc).map_err(|e| ConfigError::key(entry, key, e.to_string()))?;
    let reference = r
        .entry("reference")
        .map(|e| e.value.clone())
        .or_else(|| r.entry("preset").and_then(|e| crate::matrix::reference_for_preset(&e.value)).map(str::to_string));
    Ok((stack, reference))
}

/// Parses config text; relative file paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ScenarioConfig, ConfigError> {
    let sections = parse_sections(text)?;
    let reader = |name: &str| Reader {
        section: sections.get(name),
    };
    let sc = reader("scenario");
    let seed: u64 = sc.parse("seed")?.ok_or_else(|| ConfigError::Missing("seed required".into()))?;
    let trials: usize = sc.or("trials", 1)?;
    if trials == 0 {
        return Err(ConfigError::key(sc.entry("trials").expect("set"), "trials", "must be at least 1"));
    }
    let suites = match sc.entry("suites") {
        None => None,
        Some(e) if e.value == "all" => None,
        Some(e) => {
            let mut set = BTreeSet::new();
            for n in sc.list("suites") {
                set.insert(Node::from_str(&n).map_err(|_| ConfigError::key(e, "suites", format!("unknown attack node `{n}`")))?);
            }
            Some(set)
        }
    };
    if !sections.contains_key("stack") {
        return Err(ConfigError::Missing("[stack] section required".into()));
    }
    let (stack, reference) = parse_stack(&reader("stack"))?;
    let topology = parse_topology(&reader("topology"))?;
    let policy = parse_policy(&reader("policy"), base, covert_server(topology.kind))?;
    let ex = reader("expect");
    let expect = Expectation {
        detected: ex.entry("detected").map(|e| parse_bool(e, "detected")).transpose()?,
        node: ex.entry("node").map(|e| e.value.clone()),
        tolerance: ex.or("tolerance", 0.0)?,
    };
    if !(0.0..=1.0).contains(&expect.tolerance) {
        return Err(ConfigError::key(ex.entry("tolerance").expect("set"), "tolerance", "must lie within 0-1"));
    }
    Ok(ScenarioConfig {
        name: sc
            .entry("name")
            .map(|e| e.value.clone())
            .unwrap_or_else(|| stack.name().to_string()),
        seed,
        trials,
        suites,
        reference,
        stack,
        policy,
        topology,
        traffic: parse_traffic(&reader("traffic"))?,
        background: parse_background(&reader("background"), base)?,
        expect,
    })
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}
