//! Layer abstraction, stack descriptors and the rules a composed stack must
//! satisfy before it can be instantiated.
//!
//! A stack is an ordered list of layers, top (closest to the application)
//! first. SessionInit and Encryption share the top rank; every other kind has
//! its own rank and Transport is always the bottom entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{LayerError, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    SessionInit,
    Encryption,
    Multiplexing,
    ContentObfuscation,
    TimingLengthObfuscation,
    Transport,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::SessionInit,
        LayerKind::Encryption,
        LayerKind::Multiplexing,
        LayerKind::ContentObfuscation,
        LayerKind::TimingLengthObfuscation,
        LayerKind::Transport,
    ];

    /// Position in the canonical stack; SessionInit and Encryption are
    /// co-resident on rank 0.
    pub fn rank(self) -> u8 {
        match self {
            LayerKind::SessionInit | LayerKind::Encryption => 0,
            LayerKind::Multiplexing => 1,
            LayerKind::ContentObfuscation => 2,
            LayerKind::TimingLengthObfuscation => 3,
            LayerKind::Transport => 4,
        }
    }

    /// Short label used in configs and rendered tables.
    pub fn short(self) -> &'static str {
        match self {
            LayerKind::SessionInit => "SI",
            LayerKind::Encryption => "ENC",
            LayerKind::Multiplexing => "MUX",
            LayerKind::ContentObfuscation => "OBF",
            LayerKind::TimingLengthObfuscation => "TIM-LEN",
            LayerKind::Transport => "TRN",
        }
    }

    fn config_name(self) -> &'static str {
        match self {
            LayerKind::SessionInit => "si",
            LayerKind::Encryption => "enc",
            LayerKind::Multiplexing => "mux",
            LayerKind::ContentObfuscation => "obf",
            LayerKind::TimingLengthObfuscation => "timlen",
            LayerKind::Transport => "trn",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "si" | "sessioninit" => LayerKind::SessionInit,
            "enc" | "encryption" => LayerKind::Encryption,
            "mux" | "multiplexing" => LayerKind::Multiplexing,
            "obf" | "contentobfuscation" => LayerKind::ContentObfuscation,
            "timlen" | "tim-len" | "timinglengthobfuscation" => LayerKind::TimingLengthObfuscation,
            "trn" | "transport" => LayerKind::Transport,
            _ => return Err(format!("unknown layer kind `{s}`")),
        };
        Ok(kind)
    }
}

/// Layer parameters as written in the stack descriptor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Params(BTreeMap<String, String>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `key` if present, falling back to `default`.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("parameter `{key}` has invalid value `{raw}`")),
        }
    }

    /// Parses an inclusive range written `lo-hi`.
    pub fn range_or(&self, key: &str, default: (u32, u32)) -> Result<(u32, u32), String> {
        let Some(raw) = self.get(key) else {
            return Ok(default);
        };
        let bad = || format!("parameter `{key}` expects `lo-hi`, got `{raw}`");
        let (lo, hi) = raw.split_once('-').ok_or_else(bad)?;
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        Ok((lo, hi))
    }
}

impl fmt::Display for Params {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// One entry of a stack descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub implementation: String,
    pub params: Params,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, implementation: &str) -> Self {
        LayerSpec {
            kind,
            implementation: implementation.to_string(),
            params: Params::new(),
        }
    }

    pub fn with_params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.config_name(), self.implementation)?;
        if !self.params.is_empty() {
            write!(f, "{{{}}}", self.params)?;
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    /// Parses `kind:impl-id{key=value,...}`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (head, params) = match s.find('{') {
            Some(open) => {
                let body = s[open + 1..]
                    .strip_suffix('}')
                    .ok_or_else(|| format!("unterminated parameter list in `{s}`"))?;
                (&s[..open], Some(body))
            }
            None => (s, None),
        };
        let (kind, implementation) = head
            .split_once(':')
            .ok_or_else(|| format!("expected `kind:impl-id`, got `{s}`"))?;
        let kind: LayerKind = kind.parse()?;
        let implementation = implementation.trim();
        if implementation.is_empty() {
            return Err(format!("missing implementation id in `{s}`"));
        }
        let mut out = LayerSpec::new(kind, implementation);
        if let Some(body) = params {
            for pair in body.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| format!("expected `key=value`, got `{pair}`"))?;
                out.params.insert(k.trim(), v.trim());
            }
        }
        Ok(out)
    }
}

/// Splits a comma-separated layer list, respecting `{...}` parameter groups.
pub fn parse_layer_list(s: &str) -> Result<Vec<LayerSpec>, String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                let part = s[start..i].trim();
                if !part.is_empty() {
                    out.push(part.parse()?);
                }
                start = i + 1;
            }
            _ => {}
        }
    }
    let tail = s[start..].trim();
    if !tail.is_empty() {
        out.push(tail.parse()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackDescriptor {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl StackDescriptor {
    pub fn new(name: &str, layers: Vec<LayerSpec>) -> Self {
        StackDescriptor {
            name: name.to_string(),
            layers,
        }
    }

    pub fn parse(name: &str, layers: &str) -> Result<Self, String> {
        Ok(StackDescriptor::new(name, parse_layer_list(layers)?))
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn layer(&self, kind: LayerKind) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.kind == kind)
    }

    /// Copy of this descriptor with every entry of `kind` removed.
    pub fn without(&self, kind: LayerKind) -> StackDescriptor {
        StackDescriptor {
            name: format!("{}-no-{}", self.name, kind.short().to_ascii_lowercase()),
            layers: self.layers.iter().filter(|l| l.kind != kind).cloned().collect(),
        }
    }

    pub fn render_layers(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Per-implementation parameter check run during validation.
pub type ParamCheck = fn(&Params) -> Result<(), String>;

#[derive(Clone)]
pub struct Implementation {
    pub kind: LayerKind,
    pub id: &'static str,
    /// Kinds allowed below this layer besides Transport; `None` means any.
    pub carriers: Option<&'static [LayerKind]>,
    pub check: ParamCheck,
}

impl fmt::Debug for Implementation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Implementation")
            .field("kind", &self.kind)
            .field("id", &self.id)
            .finish()
    }
}

/// Registered layer implementations. Read-only once built.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<(LayerKind, &'static str), Implementation>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn register(&mut self, implementation: Implementation) {
        self.entries
            .insert((implementation.kind, implementation.id), implementation);
    }

    pub fn lookup(&self, kind: LayerKind, id: &str) -> Option<&Implementation> {
        self.entries
            .iter()
            .find(|((k, i), _)| *k == kind && *i == id)
            .map(|(_, v)| v)
    }

    pub fn ids(&self, kind: LayerKind) -> Vec<&'static str> {
        self.entries
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, id)| *id)
            .collect()
    }
}

/// A descriptor that passed [`validate_stack`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedStack {
    descriptor: Arc<StackDescriptor>,
}

impl ValidatedStack {
    pub fn descriptor(&self) -> &StackDescriptor {
        &self.descriptor
    }

    pub fn name(&self) -> &str {
        &self.descriptor.name
    }

    pub fn has(&self, kind: LayerKind) -> bool {
        self.descriptor.layer(kind).is_some()
    }

    pub fn layer(&self, kind: LayerKind) -> Option<&LayerSpec> {
        self.descriptor.layer(kind)
    }
}

/// Checks every descriptor rule in entry order and reports the first
/// violation with its layer index.
pub fn validate_stack(
    registry: &Registry,
    descriptor: &StackDescriptor,
) -> Result<ValidatedStack, LayerError> {
    let mut seen: BTreeSet<LayerKind> = BTreeSet::new();
    let mut prev_rank: Option<u8> = None;
    let mut transport_at: Option<usize> = None;

    for (index, spec) in descriptor.layers.iter().enumerate() {
        if transport_at.is_some() {
            return Err(LayerError::validation(
                index,
                Rule::TransportLast,
                format!("{} follows Transport: Transport must be last", spec.kind),
            ));
        }
        if seen.contains(&spec.kind) {
            return Err(LayerError::validation(
                index,
                Rule::DuplicateKind,
                format!("duplicate kind {:?}", spec.kind),
            ));
        }
        if let Some(prev) = prev_rank {
            if spec.kind.rank() < prev {
                return Err(LayerError::validation(
                    index,
                    Rule::RankOrder,
                    format!("rank order violated: {} placed below a lower layer", spec.kind),
                ));
            }
        }
        let implementation = registry
            .lookup(spec.kind, &spec.implementation)
            .ok_or_else(|| {
                LayerError::validation(
                    index,
                    Rule::UnknownImplementation,
                    format!("`{}` is not a registered {:?} layer", spec.implementation, spec.kind),
                )
            })?;
        (implementation.check)(&spec.params)
            .map_err(|e| LayerError::validation(index, Rule::Parameter, e))?;

        seen.insert(spec.kind);
        prev_rank = Some(spec.kind.rank());
        if spec.kind == LayerKind::Transport {
            transport_at = Some(index);
        }
    }

    if transport_at.is_none() {
        return Err(LayerError::validation(
            descriptor.layers.len(),
            Rule::TransportLast,
            "stack has no Transport layer",
        ));
    }
    if seen.contains(&LayerKind::Encryption) && !seen.contains(&LayerKind::SessionInit) {
        let index = descriptor
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Encryption)
            .unwrap_or(0);
        return Err(LayerError::validation(
            index,
            Rule::KeySource,
            "Encryption requires a SessionInit layer to supply keys",
        ));
    }
    for (index, spec) in descriptor.layers.iter().enumerate() {
        let Some(allowed) = registry
            .lookup(spec.kind, &spec.implementation)
            .and_then(|i| i.carriers)
        else {
            continue;
        };
        if let Some(other) = descriptor.layers[index + 1..]
            .iter()
            .find(|l| l.kind != LayerKind::Transport && !allowed.contains(&l.kind))
        {
            return Err(LayerError::validation(
                index,
                Rule::Placement,
                format!("`{}` cannot run above {}", spec.implementation, other.kind),
            ));
        }
    }

    Ok(ValidatedStack {
        descriptor: Arc::new(descriptor.clone()),
    })
}

/// Control records that skip layers: each layer may post key/value records
/// addressed to another layer kind.
#[derive(Debug, Clone, Default)]
pub struct ControlBand {
    records: BTreeMap<LayerKind, BTreeMap<String, Vec<u8>>>,
}

impl ControlBand {
    pub fn post(&mut self, to: LayerKind, key: &str, value: &[u8]) {
        self.records
            .entry(to)
            .or_default()
            .insert(key.to_string(), value.to_vec());
    }

    pub fn get(&self, to: LayerKind, key: &str) -> Option<&[u8]> {
        self.records.get(&to)?.get(key).map(Vec::as_slice)
    }

    pub fn take(&mut self, to: LayerKind, key: &str) -> Option<Vec<u8>> {
        self.records.get_mut(&to)?.remove(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(_: &Params) -> Result<(), String> {
        Ok(())
    }

    fn registry() -> Registry {
        let mut r = Registry::empty();
        for (kind, id) in [
            (LayerKind::SessionInit, "ticket"),
            (LayerKind::Encryption, "aead"),
            (LayerKind::Multiplexing, "frame"),
            (LayerKind::ContentObfuscation, "http"),
            (LayerKind::TimingLengthObfuscation, "iid"),
            (LayerKind::Transport, "sim"),
        ] {
            r.register(Implementation {
                kind,
                id,
                carriers: None,
                check: ok,
            });
        }
        r
    }

    fn stack(s: &str) -> StackDescriptor {
        StackDescriptor::parse("t", s).unwrap()
    }

    #[test]
    fn canonical_order_is_valid() {
        let d = stack("si:ticket, enc:aead, mux:frame, obf:http, timlen:iid, trn:sim");
        assert!(validate_stack(&registry(), &d).is_ok());
        let d = stack("enc:aead, si:ticket, trn:sim");
        assert!(validate_stack(&registry(), &d).is_ok());
    }

    #[test]
    fn transport_first_is_rejected() {
        let err = validate_stack(&registry(), &stack("trn:sim, obf:http")).unwrap_err();
        assert_eq!(err.violation, Some((1, Rule::TransportLast)));
        assert!(err.detail.contains("Transport must be last"));
    }

    #[test]
    fn duplicate_kind_is_rejected() {
        let err = validate_stack(&registry(), &stack("enc:aead, enc:aead, trn:sim")).unwrap_err();
        assert_eq!(err.violation, Some((1, Rule::DuplicateKind)));
        assert!(err.detail.contains("duplicate kind Encryption"));
    }

    #[test]
    fn missing_transport_and_unknown_id() {
        let err = validate_stack(&registry(), &stack("si:ticket")).unwrap_err();
        assert_eq!(err.rule(), Some(Rule::TransportLast));
        let err = validate_stack(&registry(), &stack("si:bogus, trn:sim")).unwrap_err();
        assert_eq!(err.violation, Some((0, Rule::UnknownImplementation)));
        assert!(err.detail.contains("bogus"));
    }

    #[test]
    fn encryption_needs_session_init() {
        let err = validate_stack(&registry(), &stack("enc:aead, trn:sim")).unwrap_err();
        assert_eq!(err.violation, Some((0, Rule::KeySource)));
    }

    #[test]
    fn layer_spec_round_trips_through_text() {
        let spec: LayerSpec = "timlen:iid{seed=3, lengths=100-1500}".parse().unwrap();
        assert_eq!(spec.kind, LayerKind::TimingLengthObfuscation);
        assert_eq!(spec.params.get("lengths"), Some("100-1500"));
        let again: LayerSpec = spec.to_string().parse().unwrap();
        assert_eq!(spec, again);
        assert!("nonsense".parse::<LayerSpec>().is_err());
        assert!("trn:sim{port=1".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn control_band_delivers_records() {
        let mut band = ControlBand::default();
        band.post(LayerKind::Encryption, "keys", b"k");
        assert_eq!(band.get(LayerKind::Encryption, "keys"), Some(&b"k"[..]));
        assert_eq!(band.take(LayerKind::Encryption, "keys"), Some(b"k".to_vec()));
        assert!(band.get(LayerKind::Encryption, "keys").is_none());
    }
}
