#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn ltd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltd"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("spawn ltd")
}

/// Runs `ltd` expecting success; returns the final stdout JSON line.
pub fn ltd_ok(args: &[&str]) -> Value {
    let out = ltd(args);
    assert!(
        out.status.success(),
        "ltd {args:?} failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    last_json(&out)
}

pub fn last_json(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("a stdout line");
    serde_json::from_str(line).expect("final line is JSON")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn join(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Writes a line straight to the test process's stderr, bypassing capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}
