use std::path::Path;
use std::process::{Command, Output};

use rlos::market::{load_panel, PanelFormat};
use rlos::synthetic::{generate, GeneratorSpec};

const SMALL_RUN: &str = r#"
[data]
generator = "meanrevert"
assets = 3
periods = 60
seed = 2

[strategies]
names = ["naive_average", "follow_winner", "follow_loser", "rlos"]

[rlos]
max_span = 5

[backtest]
spans = [[21, 60]]
seeds = [1]
"#;

fn rlos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlos"))
        .args(args)
        .env_remove("RLOS_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, SMALL_RUN).unwrap();
    path.to_str().unwrap().to_string()
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn oracle_checks_pass() {
    let out = rlos(&["oracle", "--trials", "500", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.lines().skip(1).all(|l| l.contains("PASS")), "{table}");
    assert!(!table.contains("FAIL"));
}

#[test]
fn bad_invocations_exit_with_validation_status() {
    let out = rlos(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("Usage"));

    let out = rlos(&["backtest", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("/nonexistent/run.toml"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nassetz = 3\n").unwrap();
    let out = rlos(&["backtest", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("assetz"));

    let out = rlos(&["--jobs", "0", "oracle"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generated_panel_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("wide.csv");
    let out = rlos(&[
        "generate", "--generator", "meanrevert", "--assets", "100", "--periods", "40", "--seed", "3", "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let read = load_panel(&csv, PanelFormat::Csv).unwrap();
    let direct = generate(&GeneratorSpec::mean_revert(100, 40), 3).unwrap();
    assert_eq!(read.assets(), 100);
    for a in 0..100 {
        for t in 0..40 {
            assert_eq!(read.bar(a, t), direct.bar(a, t));
        }
    }
}

#[test]
fn backtest_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = rlos(&["backtest", "--config", &config, "--output", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        assert!(text(&out.stdout).contains("manifest"));
    }
    // The echoed config records its own output directory, and the manifest hashes the echo.
    let strip = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        files
            .into_iter()
            .filter(|(n, _)| n != "manifest.csv")
            .map(|(n, bytes)| {
                if n != "config.toml" {
                    return (n, bytes);
                }
                let kept: String = text(&bytes).lines().filter(|l| !l.starts_with("output_dir")).map(|l| format!("{l}\n")).collect();
                (n, kept.into_bytes())
            })
            .collect()
    };
    let files = sorted_files(&a);
    assert_eq!(strip(files.clone()), strip(sorted_files(&b)));
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["config.toml", "manifest.csv", "summary.csv", "summary.txt"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    let echoed = rlos::config::RunConfig::from_toml(&std::fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.data.assets, 3);
    assert_eq!(echoed.rlos.max_span, 5);

    let out = rlos(&["report", "--dir", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), std::fs::read_to_string(a.join("summary.txt")).unwrap());

    std::fs::write(a.join("summary.csv"), "tampered\n").unwrap();
    let out = rlos(&["report", "--dir", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("summary.csv"));
}

#[test]
fn environment_overrides_the_configured_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let env_dir = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_rlos"))
        .args(["backtest", "--config", &config])
        .env("RLOS_OUTPUT_DIR", &env_dir)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(env_dir.join("manifest.csv").is_file());
    assert!(!dir.path().join("out").exists());
}
