//! Scenario output files: `report.csv` (one row per trial), `report.md`,
//! `events.csv` (packet log) and `censor_events.csv`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::config::ScenarioConfig;
use crate::scenario::{meets_expectation, ScenarioRun};

fn fmt_rate(x: Option<f64>) -> String {
    x.map_or("N/A".into(), |v| format!("{v:.4}"))
}

pub fn report_csv(run: &ScenarioRun) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "trial",
        "seed",
        "detected",
        "node",
        "bytes_sent",
        "bytes_delivered",
        "intact",
        "goodput_bps",
        "outcome",
        "probes_confirmed",
        "background_total",
        "background_flagged",
        "background_blocked",
    ])?;
    for t in &run.report.trials {
        w.write_record([
            t.index.to_string(),
            t.seed.to_string(),
            t.detected.to_string(),
            t.node.clone().unwrap_or_default(),
            t.bytes_sent.to_string(),
            t.bytes_delivered.to_string(),
            t.intact.to_string(),
            t.goodput.map_or(String::new(), |g| format!("{g:.1}")),
            t.outcome.clone(),
            t.probes_confirmed.to_string(),
            t.background_total.to_string(),
            t.background_flagged.to_string(),
            t.background_blocked.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn events_csv(run: &ScenarioRun) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "time_us", "hop", "packet_id", "action", "flow"])?;
    for (i, logs) in run.logs.iter().enumerate() {
        for r in &logs.packets {
            w.write_record([
                i.to_string(),
                r.time.as_micros().to_string(),
                r.hop.to_string(),
                r.packet_id.to_string(),
                r.action.to_string(),
                r.flow.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn censor_events_csv(run: &ScenarioRun) -> io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "time_us", "flow", "label", "action"])?;
    for (i, logs) in run.logs.iter().enumerate() {
        for e in &logs.censor {
            w.write_record([
                i.to_string(),
                e.time.as_micros().to_string(),
                e.flow.to_string(),
                e.label.clone(),
                e.action.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn report_markdown(cfg: &ScenarioConfig, run: &ScenarioRun) -> String {
    let r = &run.report;
    let mut s = String::new();
    let _ = writeln!(s, "# Scenario `{}`\n", cfg.name);
    let _ = writeln!(s, "- stack: `{}` (`{}`)", cfg.stack.name(), cfg.stack.descriptor().render_layers());
    let nodes: Vec<&str> = cfg.policy.policy.enabled.iter().map(|n| n.label()).collect();
    let _ = writeln!(s, "- censor nodes: {}", if nodes.is_empty() { "none".into() } else { nodes.join(", ") });
    let _ = writeln!(s, "- seed: {}, trials: {}", cfg.seed, r.trials.len());
    let _ = writeln!(s, "- background flows per trial: {}\n", cfg.background.count);
    s.push_str("| Metric | Value |\n|---|---|\n");
    let _ = writeln!(s, "| detection rate (TPR) | {:.4} |", r.tpr);
    let _ = writeln!(s, "| background flagged (FPR) | {} |", fmt_rate(r.fpr));
    let _ = writeln!(s, "| collateral damage | {} |", fmt_rate(r.collateral));
    let ok = r.trials.iter().filter(|t| t.intact).count();
    let _ = writeln!(s, "| intact transfers | {}/{} |", ok, r.trials.len());
    let mut by_node: std::collections::BTreeMap<String, usize> = Default::default();
    for t in r.trials.iter().filter(|t| t.detected) {
        *by_node.entry(t.node.clone().unwrap_or_default()).or_default() += 1;
    }
    if !by_node.is_empty() {
        s.push_str("\n| Triggering node | Trials |\n|---|---|\n");
        for (n, c) in by_node {
            let _ = writeln!(s, "| {n} | {c} |");
        }
    }
    let verdict = if cfg.expect.detected.is_none() && cfg.expect.node.is_none() {
        "no expectation declared"
    } else if meets_expectation(cfg, r) {
        "as expected"
    } else {
        "UNEXPECTED"
    };
    let _ = writeln!(s, "\nOutcome: {verdict}.");
    s
}

/// Writes all report files into `dir`, creating it if needed.
pub fn write_reports(dir: &Path, cfg: &ScenarioConfig, run: &ScenarioRun) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report_csv(run)?)?;
    fs::write(dir.join("report.md"), report_markdown(cfg, run))?;
    fs::write(dir.join("events.csv"), events_csv(run)?)?;
    fs::write(dir.join("censor_events.csv"), censor_events_csv(run)?)?;
    Ok(())
}
