use std::fmt;

use thiserror::Error;

/// Failure class of a layer or channel operation.
///
/// The class alone decides retry semantics: only [`ErrorKind::Transport`]
/// is retryable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    Validation,
    Handshake,
    Integrity,
    Transport,
    Closed,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Handshake => "handshake",
            ErrorKind::Integrity => "integrity",
            ErrorKind::Transport => "transport",
            ErrorKind::Closed => "closed",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stack validation rules, reported by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    /// R1: layer ranks must be non-decreasing.
    RankOrder,
    /// R2: exactly one Transport entry, and it is last.
    TransportLast,
    /// R3: at most one entry per kind.
    DuplicateKind,
    /// R4: implementation id must be registered for its kind.
    UnknownImplementation,
    /// R5: Encryption needs a SessionInit entry to hand it keys.
    KeySource,
    /// R6: implementation-specific placement constraint.
    Placement,
    /// R7: malformed or out-of-range layer parameter.
    Parameter,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::RankOrder => "R1",
            Rule::TransportLast => "R2",
            Rule::DuplicateKind => "R3",
            Rule::UnknownImplementation => "R4",
            Rule::KeySource => "R5",
            Rule::Placement => "R6",
            Rule::Parameter => "R7",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} error: {detail}")]
pub struct LayerError {
    pub kind: ErrorKind,
    pub detail: String,
    /// Offending layer index and rule, for validation errors.
    pub violation: Option<(usize, Rule)>,
}

impl LayerError {
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        LayerError {
            kind,
            detail: detail.into(),
            violation: None,
        }
    }

    pub fn validation(index: usize, rule: Rule, detail: impl Into<String>) -> Self {
        LayerError {
            kind: ErrorKind::Validation,
            detail: format!("layer {index}: {} {}", rule.id(), detail.into()),
            violation: Some((index, rule)),
        }
    }

    pub fn handshake(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Handshake, detail)
    }

    pub fn integrity(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Integrity, detail)
    }

    pub fn transport(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Transport, detail)
    }

    pub fn closed() -> Self {
        Self::new(ErrorKind::Closed, "channel is closed")
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == ErrorKind::Transport
    }

    pub fn rule(&self) -> Option<Rule> {
        self.violation.map(|(_, r)| r)
    }
}
