//! Coverage matrix: per attack node, a fixed suite of seeded trials decides
//! whether a stack protects against the node, and ablation credits the
//! layers whose removal loses that protection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use tweak_core::censor::{CensorPolicy, ClassifierModel, ClassifierPolicy, Node};
use tweak_core::model::{validate_stack, LayerKind, LayerSpec, StackDescriptor, ValidatedStack};
use tweak_core::netsim::{Addr, LinkParams};
use tweak_core::transports::standard_registry;

use crate::config::{Content, ScenarioConfig, TopologySpec, TrafficScript};
use crate::scenario::{run_trial, trial_seed, TrialResult, TrialSpec};

/// Share of trials that must succeed for a node to count as protected.
pub const PROTECTION_THRESHOLD: f64 = 0.9;
pub const DEFAULT_TRIALS: usize = 50;
pub const SUITE_KEYWORD: &str = "falun";
/// Link rate for the throttling suite; slow enough that shaped flows feel
/// a throttle too.
pub const DEG_PER_BANDWIDTH: f64 = 125_000.0;
/// Goodput share of the unthrottled baseline that still counts as usable.
pub const DEG_PER_GOODPUT: f64 = 0.9;

/// Reference rows for the stacks our presets model. Columns outside the reference
/// (DEG.PER) are absent.
pub fn reference_row(reference: &str) -> Option<BTreeMap<Node, BTreeSet<LayerKind>>> {
    use LayerKind::*;
    use Node::*;
    let rows: &[(Node, &[LayerKind])] = match reference {
        "ScrambleSuit" => &[
            (CorCon, &[SessionInit, Encryption]),
            (FprLen, &[TimingLengthObfuscation]),
            (FprTim, &[TimingLengthObfuscation]),
            (FprSem, &[SessionInit, Encryption]),
            (FprCon, &[SessionInit, Encryption]),
        ],
        "obfs3" => &[
            (CorCon, &[SessionInit, Encryption]),
            (FprSem, &[SessionInit]),
            (FprCon, &[SessionInit, Encryption]),
        ],
        "obfs2" => &[(FprCon, &[SessionInit, Encryption])],
        "StegoTorus" => &[
            (CorCon, &[SessionInit, Encryption]),
            (FprLen, &[TimingLengthObfuscation]),
            (FprTim, &[TimingLengthObfuscation]),
            (FprCon, &[Multiplexing, ContentObfuscation]),
        ],
        "plaintext" => &[],
        _ => return None,
    };
    let mut out: BTreeMap<Node, BTreeSet<LayerKind>> =
        Node::ALL.iter().filter(|n| **n != DegPer).map(|n| (*n, BTreeSet::new())).collect();
    for (node, kinds) in rows {
        out.insert(*node, kinds.iter().copied().collect());
    }
    Some(out)
}

pub fn reference_for_preset(preset: &str) -> Option<&'static str> {
    match preset {
        "scramblesuit-like" => Some("ScrambleSuit"),
        "obfs3-like" => Some("obfs3"),
        "stegotorus-like" => Some("StegoTorus"),
        "plaintext" => Some("plaintext"),
        _ => None,
    }
}

/// Censor policy and traffic of one node's suite.
pub struct Suite {
    pub node: Node,
    pub policy: CensorPolicy,
    pub traffic: TrafficScript,
    pub topology: TopologySpec,
}

pub fn suite(node: Node, topology: &TopologySpec, server: Addr, classifier: &Arc<ClassifierModel>) -> Suite {
    let mut traffic = TrafficScript::default();
    let mut topo = topology.clone();
    let mut p = CensorPolicy {
        entropy_threshold: None,
        ..Default::default()
    };
    let nodes: &[Node] = match node {
        Node::FprCon => {
            p.keywords = vec![SUITE_KEYWORD.into()];
            traffic.content = Content::Keyword;
            &[Node::FprCon]
        }
        Node::CorCon => {
            p.keywords = vec![SUITE_KEYWORD.into()];
            traffic.content = Content::Keyword;
            &[Node::FprCon, Node::CorCon]
        }
        Node::FprLen | Node::FprTim => {
            p.classifier = Some(ClassifierPolicy::new(classifier.clone()));
            if node == Node::FprLen {
                &[Node::FprLen]
            } else {
                &[Node::FprTim]
            }
        }
        Node::FprSem => {
            p.entropy_threshold = Some(7.2);
            &[Node::FprCon, Node::FprSem]
        }
        Node::FprRou => {
            p.suspect_addrs.insert(server);
            &[Node::FprRou]
        }
        Node::CorSem => {
            p.suspect_addrs.insert(server);
            &[Node::FprRou, Node::CorSem]
        }
        Node::CorRou => {
            p.address_blocklist.insert(server);
            &[Node::CorRou]
        }
        Node::BlkRou => {
            p.static_blocks.push((server, None));
            &[Node::BlkRou]
        }
        Node::DegPer => {
            p.suspect_addrs.insert(server);
            topo.link = LinkParams {
                bandwidth: DEG_PER_BANDWIDTH,
                ..topo.link
            };
            &[Node::FprRou, Node::DegPer]
        }
    };
    p.enabled = nodes.iter().copied().collect();
    Suite {
        node,
        policy: p,
        traffic,
        topology: topo,
    }
}

/// Whether one trial evaded the node.
pub fn trial_protected(node: Node, r: &TrialResult, baseline: Option<&TrialResult>) -> bool {
    match node {
        Node::FprCon | Node::FprLen | Node::FprTim | Node::FprRou => !r.detected,
        Node::FprSem => r.probes_confirmed == 0,
        Node::CorCon | Node::CorSem | Node::CorRou | Node::BlkRou => r.intact,
        Node::DegPer => {
            let base = baseline.and_then(|b| b.goodput).unwrap_or(0.0);
            r.intact && r.goodput.is_some_and(|g| g >= DEG_PER_GOODPUT * base)
        }
    }
}

/// Fraction of `trials` seeded trials in which `stack` evades `node`.
pub fn suite_rate(stack: &ValidatedStack, s: &Suite, seed: u64, trials: usize) -> f64 {
    let ok = (0..trials)
        .into_par_iter()
        .map(|i| {
            let spec = TrialSpec {
                stack,
                policy: Some(s.policy.clone()),
                topology: &s.topology,
                traffic: &s.traffic,
                background: None,
                seed: trial_seed(seed, i),
                keep_logs: false,
            };
            let (r, _) = run_trial(&spec, i);
            let baseline = (s.node == Node::DegPer).then(|| run_trial(&TrialSpec { policy: None, ..spec }, i).0);
            trial_protected(s.node, &r, baseline.as_ref())
        })
        .filter(|&ok| ok)
        .count();
    ok as f64 / trials.max(1) as f64
}

/// The stack with one layer kind removed. A removed transport is replaced
/// by the plain simulated transport, since every stack needs one.
pub fn ablate(desc: &StackDescriptor, kind: LayerKind) -> StackDescriptor {
    let mut out = desc.without(kind);
    if kind == LayerKind::Transport {
        out.layers.push(LayerSpec::new(LayerKind::Transport, "sim"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ablation {
    /// The reduced stack breaks a composition rule and cannot run.
    Invalid(String),
    /// Identical to the full stack.
    Unchanged,
    Rate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Untested,
    Tested {
        rate: f64,
        /// Layers credited; empty when the stack is not protected.
        credited: BTreeSet<LayerKind>,
        ablations: Vec<(LayerKind, Ablation)>,
    },
}

impl Cell {
    pub fn protected(&self) -> Option<bool> {
        match self {
            Cell::Untested => None,
            Cell::Tested { rate, .. } => Some(*rate >= PROTECTION_THRESHOLD),
        }
    }

    pub fn credited(&self) -> Option<&BTreeSet<LayerKind>> {
        match self {
            Cell::Untested => None,
            Cell::Tested { credited, .. } => Some(credited),
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Untested => "untested".into(),
            Cell::Tested { credited, rate, .. } => {
                if *rate < PROTECTION_THRESHOLD {
                    String::new()
                } else if credited.is_empty() {
                    "(none)".into()
                } else {
                    credited.iter().map(|k| k.short()).collect::<Vec<_>>().join(" ")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub stack: String,
    pub layers: String,
    pub reference: Option<String>,
    pub cells: BTreeMap<Node, Cell>,
}

pub fn evaluate_stack(cfg: &ScenarioConfig, classifier: &Arc<ClassifierModel>) -> MatrixRow {
    let registry = standard_registry();
    let desc = cfg.stack.descriptor();
    let server = cfg.covert_server();
    let mut cells = BTreeMap::new();
    for node in Node::ALL {
        if cfg.suites.as_ref().is_some_and(|s| !s.contains(&node)) {
            cells.insert(node, Cell::Untested);
            continue;
        }
        let s = suite(node, &cfg.topology, server, classifier);
        let rate = suite_rate(&cfg.stack, &s, cfg.seed, cfg.trials);
        let mut credited = BTreeSet::new();
        let mut ablations = Vec::new();
        if rate >= PROTECTION_THRESHOLD {
            for kind in desc.kinds() {
                let reduced = ablate(desc, kind);
                let result = if reduced.layers == desc.layers {
                    Ablation::Unchanged
                } else {
                    match validate_stack(&registry, &reduced) {
                        Err(e) => Ablation::Invalid(e.to_string()),
                        Ok(v) => Ablation::Rate(suite_rate(&v, &s, cfg.seed, cfg.trials)),
                    }
                };
                let flips = match &result {
                    Ablation::Invalid(_) => true,
                    Ablation::Unchanged => false,
                    Ablation::Rate(r) => *r < PROTECTION_THRESHOLD,
                };
                if flips {
                    credited.insert(kind);
                }
                ablations.push((kind, result));
            }
        }
        cells.insert(
            node,
            Cell::Tested {
                rate,
                credited,
                ablations,
            },
        );
    }
    MatrixRow {
        stack: cfg.stack.name().to_string(),
        layers: desc.render_layers(),
        reference: cfg.reference.clone(),
        cells,
    }
}

fn kinds(set: &BTreeSet<LayerKind>) -> String {
    if set.is_empty() {
        "{}".into()
    } else {
        format!("{{{}}}", set.iter().map(|k| k.short()).collect::<Vec<_>>().join(","))
    }
}

/// Cells where the measured credit differs from the reference row.
pub fn divergences(row: &MatrixRow) -> Vec<String> {
    let Some(reference) = &row.reference else {
        return Vec::new();
    };
    let Some(expected) = reference_row(reference) else {
        return vec![format!("{}: no reference row named `{reference}`", row.stack)];
    };
    let mut out = Vec::new();
    for (node, want) in &expected {
        let Some(got) = row.cells.get(node).and_then(Cell::credited) else {
            out.push(format!("{} {}: untested, reference {}", row.stack, node, kinds(want)));
            continue;
        };
        if got != want {
            out.push(format!("{} {}: measured {}, reference {}", row.stack, node, kinds(got), kinds(want)));
        }
    }
    out
}

pub fn render_markdown(rows: &[MatrixRow]) -> String {
    let mut s = String::new();
    s.push_str("# Coverage matrix\n\n");
    let _ = writeln!(
        s,
        "A cell lists the layers whose removal loses protection. A blank cell means the stack is not protected \
         (fewer than {:.0}% of trials evaded the node).\n",
        PROTECTION_THRESHOLD * 100.0
    );
    s.push_str("| Stack |");
    for n in Node::ALL {
        let _ = write!(s, " {} |", n.label());
    }
    s.push_str("\n|---|");
    for _ in Node::ALL {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.stack);
        for n in Node::ALL {
            let _ = write!(s, " {} |", r.cells.get(&n).map_or("untested".into(), Cell::render));
        }
        s.push('\n');
    }
    s.push_str("\n## Divergences from the reference rows\n\n");
    let div: Vec<String> = rows.iter().flat_map(divergences).collect();
    if div.is_empty() {
        s.push_str("None.\n");
    }
    for d in div {
        let _ = writeln!(s, "- {d}");
    }
    s.push_str("\n## Suite details\n\n");
    for r in rows {
        let _ = writeln!(s, "### {}\n\n`{}`\n", r.stack, r.layers);
        s.push_str("| Node | Evasion rate | Ablations |\n|---|---|---|\n");
        for n in Node::ALL {
            let Some(Cell::Tested { rate, ablations, .. }) = r.cells.get(&n) else {
                let _ = writeln!(s, "| {} | untested | |", n.label());
                continue;
            };
            let abl: Vec<String> = ablations
                .iter()
                .map(|(k, a)| match a {
                    Ablation::Invalid(_) => format!("-{} invalid", k.short()),
                    Ablation::Unchanged => format!("-{} unchanged", k.short()),
                    Ablation::Rate(x) => format!("-{} {:.2}", k.short(), x),
                })
                .collect();
            let _ = writeln!(s, "| {} | {:.2} | {} |", n.label(), rate, abl.join(", "));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_ablation_falls_back_to_plain() {
        let d = StackDescriptor::parse("g", "si:udh, enc:aead, trn:sim{ignore_rst=true}").unwrap();
        let a = ablate(&d, LayerKind::Transport);
        assert_eq!(a.render_layers(), "si:udh, enc:aead, trn:sim");
    }

    #[test]
    fn reference_rows_have_nine_columns() {
        assert_eq!(reference_row("ScrambleSuit").unwrap().len(), 9);
        assert!(reference_row("plaintext").unwrap().values().all(BTreeSet::is_empty));
        assert!(reference_row("Tor").is_none());
    }
}
