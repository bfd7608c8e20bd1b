use std::fs;
use std::process::Command;

use claimflow::pack::ContentPack;
use claimflow::Language;
use claimflow_server::cli::{Cli, Command as Sub};
use clap::Parser;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_claimflow"));
    c.env("CLAIMFLOW_LOG", "off");
    for var in [
        "CLAIMFLOW_PORT",
        "CLAIMFLOW_PACK",
        "CLAIMFLOW_STORAGE",
        "CLAIMFLOW_LANG",
        "CLAIMFLOW_THRESHOLD",
    ] {
        c.env_remove(var);
    }
    c
}

#[test]
fn flags_parse() {
    let cli = Cli::try_parse_from([
        "claimflow",
        "serve",
        "--port",
        "9000",
        "--lang",
        "en",
        "--threshold",
        "0.7",
    ])
    .unwrap();
    assert!(matches!(cli.command, Sub::Serve));
    let config = cli.config().unwrap();
    assert_eq!(config.port, 9000);
    assert_eq!(config.default_language, Language::En);
    assert_eq!(config.fallback_threshold, Some(0.7));
    assert!(Cli::try_parse_from(["claimflow", "serve", "--lang", "fr"]).is_err());
    let cli = Cli::try_parse_from(["claimflow", "chat", "--threshold", "1.5"]).unwrap();
    assert!(cli.config().is_err());
}

#[test]
fn validate_content_accepts_shipped_packs() {
    let out = bin().arg("validate-content").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok: de, en");
}

#[test]
fn validate_content_names_the_missing_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut de = ContentPack::shipped(Language::De);
    let key = de.templates[0].key.clone();
    de.templates[0].variants.formal.clear();
    let path = dir.path().join("de.yaml");
    fs::write(&path, serde_yaml::to_string(&de).unwrap()).unwrap();

    let out = bin().arg("validate-content").arg(&path).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(
        err.contains(&format!("template '{key}' lacks a formal variant")),
        "{err}"
    );
}

#[test]
fn environment_mirrors_flags() {
    let out = bin()
        .env("CLAIMFLOW_PACK", "/definitely/not/here")
        .arg("validate-content")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here"));
}

#[test]
fn simulate_runs_the_shipped_scripts() {
    let out = bin().args(["simulate", "--json"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["completion_rate"], 1.0);
    assert_eq!(report["scripts"], 14);

    let out = bin().args(["simulate", "--parallel"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn chat_reads_lines_from_stdin() {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = bin()
        .args(["chat", "--lang", "en"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"my phone is broken\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).trim().is_empty());
}
