mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{mnist_dir, preset, presets};

fn fedspar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedspar")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dump_codebooks() {
    let o = fedspar(&["dump-codebooks", "--q-max", "4"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().nth(1).unwrap().starts_with("2,0.636619772"));
    assert_eq!(out.lines().count(), 4);
    assert_eq!(code(&fedspar(&["dump-codebooks", "--q-max", "1"])), 1);
}

#[test]
fn run_writes_logs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = preset("linreg");
    let o = fedspar(&["run", s(&cfg), "--rounds", "25", "-q", "--threads", "1", "-o", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = fedspar(&["run", s(&cfg), "--rounds", "25", "-q", "--threads", "4", "-o", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["rounds.csv", "devices.csv", "summary.csv", "config.toml"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rounds = std::fs::read_to_string(a.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 26);
    let o = fedspar(&["run", s(&cfg), "--rounds", "25", "-q", "--seed", "2", "-o", s(&b)]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(a.join("rounds.csv")).unwrap(), std::fs::read(b.join("rounds.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(preset("linreg")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text.replace("participants = 8", "participants = 80")).unwrap();
    let o = fedspar(&["run", s(&bad), "-q", "-o", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("federation.participants"), "{}", stderr(&o));

    std::fs::write(&bad, text.replace("schema_version = 1", "schema_version = 9")).unwrap();
    let o = fedspar(&["run", s(&bad), "-q"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("schema_version"));

    assert_eq!(code(&fedspar(&["run", "/nonexistent.toml"])), 1);
    assert_eq!(code(&fedspar(&["frobnicate"])), 1);

    let missing = dir.path().join("nodata");
    let o = fedspar(&["run", s(&preset("mnist-c0.1")), "-q", "--data", s(&missing), "-o", s(dir.path())]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("train-images-idx3-ubyte"));
}

#[test]
fn saved_payloads_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(preset("linreg"))
        .unwrap()
        .replace("subvectors = 1", "subvectors = 3")
        .replace("bits_per_entry = 1.0", "bits_per_entry = 1.5");
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = fedspar(&["run", s(&cfg), "--rounds", "3", "-q", "--save-payloads", "2", "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut files: Vec<_> = std::fs::read_dir(out.join("payloads")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 8);
    let o = fedspar(&["inspect", s(&files[0])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("L = 3"));
    for i in 0..3 {
        assert!(text.contains(&format!("sub-vector {i}: n = 67")), "{text}");
    }
    // Sent bits agree with the header formula.
    let line = text.lines().find(|l| l.starts_with("bits:")).unwrap();
    let nums: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(nums[1].trim_end_matches(','), nums[3]);

    // Set every bit of the last sub-vector's position field.
    let mut bytes = std::fs::read(&files[0]).unwrap();
    let file = fedspar::payload::PayloadFile::from_bytes(&bytes).unwrap();
    let last = file.update.header.subvectors.last().unwrap();
    let pos_bits = last.position_bits();
    let total = file.update.bits.len();
    let body = bytes.len() - total.div_ceil(8);
    for bit in total - pos_bits..total {
        bytes[body + bit / 8] |= 0x80 >> (bit % 8);
    }
    let bad = dir.path().join("bad.fsp");
    std::fs::write(&bad, &bytes).unwrap();
    let o = fedspar(&["inspect", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("position rank"), "{}", stderr(&o));

    std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
    let o = fedspar(&["inspect", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ends inside"));
}

#[test]
fn ablation_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("linreg");
    let o = fedspar(&["ablate", s(&cfg), "-q", "-o", s(dir.path())]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("nothing to run"));

    let out = dir.path().join("sweep");
    let o = fedspar(&[
        "ablate",
        s(&cfg),
        "--sweep",
        "kappa=0,1",
        "--sweep",
        "q=opt,4",
        "--seeds",
        "1,2",
        "--rounds",
        "10",
        "-q",
        "-o",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 8);
    assert!(table.contains("kappa-0_q-4"));
    assert!(out.join("kappa-1_q-opt/seed-2/rounds.csv").exists());

    let o = fedspar(&["ablate", s(&cfg), "--sweep", "q=1", "-q", "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    let o = fedspar(&["ablate", s(&cfg), "--sweep", "zeta=1", "-q"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn every_preset_runs_at_reduced_length() {
    let dir = tempfile::tempdir().unwrap();
    let data = mnist_dir();
    for p in presets() {
        let cfg = fedspar::ExperimentConfig::load(&p).unwrap();
        let needs_mnist = cfg.mnist_dir().is_some();
        if needs_mnist && data.is_none() {
            eprintln!("skipping {} (no MNIST files)", p.display());
            continue;
        }
        let out = dir.path().join(&cfg.name);
        let mut args = vec!["run", s(&p), "--rounds", "2", "-q", "-o", s(&out)];
        if let Some(d) = &data {
            args.extend(["--data", s(d)]);
        }
        let o = fedspar(&args);
        assert_eq!(code(&o), 0, "{}: {}", p.display(), stderr(&o));
    }
}
