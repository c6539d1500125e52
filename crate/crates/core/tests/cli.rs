use std::path::Path;
use std::process::{Command, Output};

use karst::format::{Archive, ArchiveKind};

fn karst(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karst"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_fixture(dir: &Path, config: &str) -> Output {
    std::fs::write(dir.join("exp.toml"), config).unwrap();
    karst(&["train", "--config", "exp.toml", "--seed", "1"], dir)
}

#[test]
fn default_config_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.toml"), "").unwrap();
    let out = karst(&["train", "--config", "empty.toml", "--seed", "0"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for file in ["metrics.csv", "metrics.jsonl", "config.json", "model.karst"] {
        assert!(dir.path().join("runs/default").join(file).is_file(), "{file}");
    }
    let csv = std::fs::read_to_string(dir.path().join("runs/default/metrics.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("epoch,train_loss,train_acc,test_acc,param_count,seed"));
    assert_eq!(csv.lines().count(), 2 + 201);
}

#[test]
fn divisibility_error_is_reported_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_fixture(dir.path(), "[task]\nwidths = [768, 768, 4]\n[train]\nm = 7\n");
    assert_eq!(out.status.code(), Some(2));
    let want = karst::KarstError::Divisibility {
        d_in: 768,
        d_out: 768,
        m: 7,
    }
    .to_string();
    assert_eq!(stderr(&out).trim(), format!("error: {want}"));
}

#[test]
fn config_schema_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["[train]\nlearning_rate = 0.1\n", "[task]\nrecipe = \"mnist\"\n", "not toml at all ="] {
        let out = train_fixture(dir.path(), bad);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(stderr(&out).starts_with("error: config"), "{}", stderr(&out));
    }
    let missing = karst(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let usage = karst(&["train"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn merging_a_fresh_model_returns_the_base_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_fixture(dir.path(), "[train]\nepochs = 0\n").status.success());
    let out = karst(&["merge", "--model", "runs/default/model.karst", "--out", "merged.karst"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains(": 0e0"));

    let adapted = Archive::load(dir.path().join("runs/default/model.karst")).unwrap();
    let merged = Archive::load(dir.path().join("merged.karst")).unwrap();
    assert_eq!(merged.kind, ArchiveKind::Merged);
    for (name, tensor) in &merged.tensors {
        assert!(!name.contains("kernel") && !name.contains(".s1") && !name.contains(".s2"), "{name}");
        let base = name.replace(".weight", ".w0").replace(".bias", ".bias0");
        assert_eq!(adapted.require(&base).unwrap(), tensor, "{name}");
    }
}

#[test]
fn merging_a_trained_model_stays_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_fixture(dir.path(), "[train]\nepochs = 10\nlr = 0.01\n").status.success());
    let out = karst(&["merge", "--model", "runs/default/model.karst", "--out", "merged.karst"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let line = String::from_utf8(out.stdout).unwrap();
    let deviation: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(deviation > 0.0 && deviation <= 1e-10, "{deviation}");
    let merged = Archive::load(dir.path().join("merged.karst")).unwrap();
    assert_eq!(merged.header["provenance"]["train"]["seed"], 1);
}

#[test]
fn corrupt_model_files_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_fixture(dir.path(), "[train]\nepochs = 0\n").status.success());
    let good = std::fs::read(dir.path().join("runs/default/model.karst")).unwrap();
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("garbage", b"definitely not a model".to_vec()),
        ("truncated", good[..good.len() / 2].to_vec()),
        ("trailing", [good.as_slice(), b"x"].concat()),
    ];
    for (name, bytes) in cases {
        std::fs::write(dir.path().join("bad.karst"), bytes).unwrap();
        let out = karst(&["merge", "--model", "bad.karst", "--out", "m.karst"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{name}: {}", stderr(&out));
        assert!(!dir.path().join("m.karst").exists(), "{name}");
    }
    // A merged file is not an adapted model.
    let ok = karst(&["merge", "--model", "runs/default/model.karst", "--out", "m.karst"], dir.path());
    assert!(ok.status.success());
    let again = karst(&["merge", "--model", "m.karst", "--out", "m2.karst"], dir.path());
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn verify_passes_with_at_least_five_families() {
    let dir = tempfile::tempdir().unwrap();
    let out = karst(&["verify"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 5);
    assert!(!text.contains("FAIL"));
    let summary = text.lines().last().unwrap();
    let families: usize = summary.split(" checks in ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(families >= 5, "{summary}");
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = karst(
        &["bench", "--d-in", "64", "--d-out", "32", "--m", "4", "--r", "2", "--n", "2", "--csv", "bench.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let paths: Vec<_> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(paths, ["materialized", "structured", "merged", "plain"]);

    let bad = karst(&["bench", "--d-in", "10", "--d-out", "8", "--m", "4"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}
