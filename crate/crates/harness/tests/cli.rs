use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tweak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tweak"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenarios").join(name)
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_accepts_the_shipped_scenarios() {
    for entry in fs::read_dir(scenario("")).unwrap() {
        let p = entry.unwrap().path();
        let out = tweak(&["validate", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
    }
}

#[test]
fn bad_configs_exit_two_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown-key.cfg", "[scenario]\nname = x\nseed = 1\ncolour = red\n[stack]\npreset = plaintext\n", "line 4"),
        ("bad-order.cfg", "[scenario]\nname = x\nseed = 1\n[stack]\nlayers = si:udh, mux:frame, enc:aead, trn:sim\n", "rank order"),
        ("no-si.cfg", "[scenario]\nname = x\nseed = 1\n[stack]\nlayers = enc:aead, trn:sim\n", ""),
        ("bad-node.cfg", "[scenario]\nname = x\nseed = 1\n[stack]\npreset = plaintext\n[policy]\nnodes = FPR.XYZ\n", "FPR.XYZ"),
    ];
    for (name, text, needle) in cases {
        let p = write_cfg(dir.path(), name, text);
        let out = tweak(&["validate", p.to_str().unwrap()]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{name}: {err}");
        assert!(err.contains("error:") && err.to_lowercase().contains(&needle.to_lowercase()), "{name}: {err}");
    }
    let out = tweak(&["validate", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(tweak(&[]).status.code(), Some(2));
    assert_eq!(tweak(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tweak(&["run"]).status.code(), Some(2));
    assert_eq!(tweak(&["--help"]).status.code(), Some(0));
}

#[test]
fn unmet_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_cfg(
        dir.path(),
        "wrong.cfg",
        "[scenario]\nname = wrong\nseed = 1\ntrials = 2\n[stack]\npreset = plaintext\n[policy]\nnodes = FPR.CON\nkeywords = falun\n\
         [traffic]\nbytes = 4096\ncontent = keyword\n[expect]\ndetected = false\n",
    );
    let out = tweak(&["run", p.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn plaintext_keyword_scenario_meets_its_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let out = tweak(&[
        "run",
        scenario("plaintext-keyword.cfg").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "events.csv", "censor_events.csv", "report.md"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn same_seed_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("background-overblocking.cfg");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = tweak(&["run", cfg.to_str().unwrap(), "--seed", "42", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        outputs.push(out);
    }
    for f in ["report.csv", "events.csv", "censor_events.csv"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        let b = fs::read(outputs[1].join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn matrix_has_a_column_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = dir.path().join("cfgs");
    fs::create_dir(&cfgs).unwrap();
    write_cfg(
        &cfgs,
        "plain.cfg",
        "[scenario]\nname = m\nseed = 1\ntrials = 2\nsuites = FPR.CON\n[stack]\npreset = plaintext\n",
    );
    let out_md = dir.path().join("matrix.md");
    let o = tweak(&["matrix", cfgs.to_str().unwrap(), "--out", out_md.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(out_md).unwrap();
    let header = md.lines().find(|l| l.starts_with("| Stack |")).unwrap();
    assert_eq!(header.matches('|').count() - 1, 11);
    let row = md.lines().find(|l| l.starts_with("| plaintext |")).unwrap();
    assert_eq!(row.matches("untested").count(), 9);
}

#[test]
fn trace_stats_summarizes_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("length,iat_ms\n");
    for i in 0..120 {
        let len = if i == 0 { 9000 } else { 100 + (i % 3) * 600 };
        csv.push_str(&format!("{len},{}.0\n", 1 + i % 2));
    }
    let p = write_cfg(dir.path(), "t.csv", &csv);
    let o = tweak(&["trace-stats", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("rows: 120"), "{text}");
    assert!(text.contains("clamped lengths: 1"), "{text}");
    let bad = write_cfg(dir.path(), "bad.csv", "length,iat_ms\nabc,1\n");
    assert_eq!(tweak(&["trace-stats", bad.to_str().unwrap()]).status.code(), Some(2));
}
