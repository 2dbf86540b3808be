//! End-to-end runs of the `magtkd` binary on a tiny corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: [&str; 6] = [
    "dataset.synth.n_conversations.train=12",
    "dataset.synth.n_conversations.dev=4",
    "dataset.synth.n_conversations.test=4",
    "stage1.epochs=1",
    "stage2.epochs=1",
    "stage2.batch=4",
];

fn magtkd(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_magtkd"));
    cmd.args(args).arg("--out").arg(out);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = magtkd(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}\n{}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn synth_files(root: &Path) -> Vec<PathBuf> {
    [
        "manifest.jsonl",
        "text.feat",
        "audio.feat",
        "video.feat",
        "spec.json",
    ]
    .iter()
    .map(|f| root.join("synth").join(f))
    .collect()
}

fn data_rows(csv: &Path) -> Vec<String> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn synth_writes_valid_stores_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&a, &["synth", "--seed", "5"]);
    ok(&b, &["synth", "--seed", "5"]);
    ok(&c, &["synth", "--seed", "6"]);
    for f in &synth_files(&a)[1..4] {
        assert_eq!(&std::fs::read(f).unwrap()[..4], b"MAGF", "{}", f.display());
    }
    let sums = |root: &Path| synth_files(root).iter().map(|p| sha(p)).collect::<Vec<_>>();
    assert_eq!(sums(&a), sums(&b));
    let (sa, sc) = (sums(&a), sums(&c));
    for i in 0..4 {
        assert_ne!(sa[i], sc[i], "{}", synth_files(&a)[i].display());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("synth/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["overrides"].as_array().unwrap().len(), TINY.len());
    assert_eq!(manifest["artifacts"].as_object().unwrap().len(), 5);
}

#[test]
fn downstream_commands_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = magtkd(dir.path(), &["stage2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("manifest.jsonl"), "{err}");
    ok(dir.path(), &["synth"]);
    let o = magtkd(dir.path(), &["stage2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1"));
}

#[test]
fn bad_configuration_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["synth", "--set", "stage2.gamma=1"],
        vec!["synth", "--set", "tau=-1"],
        vec!["synth", "--set", "no-equals-sign"],
        vec!["synth", "--config", "missing.json"],
        vec!["frobnicate"],
    ] {
        let o = magtkd(dir.path(), &args);
        assert_eq!(
            o.status.code(),
            Some(3),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn full_pipeline_tables() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for cmd in ["synth", "stage1", "stage2", "eval", "ablate", "export"] {
        ok(root, &[cmd]);
        assert!(root.join(cmd).join("run_manifest.json").exists(), "{cmd}");
    }
    let ablation = data_rows(&root.join("ablate/ablation.csv"));
    assert_eq!(ablation.len(), 13);
    let groups: Vec<&str> = ablation
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(groups.iter().filter(|g| **g == "single").count(), 5);
    assert_eq!(groups.iter().filter(|g| **g == "Concat").count(), 4);
    assert_eq!(groups.iter().filter(|g| **g == "MAGT").count(), 4);
    // Five stage-1 branches and MAGT, on dev and test.
    assert_eq!(data_rows(&root.join("eval/metrics.csv")).len(), 12);
    assert!(root.join("export/MAGT.feat").exists());

    let before = sha(&root.join("eval/metrics.csv"));
    ok(root, &["eval"]);
    assert_eq!(sha(&root.join("eval/metrics.csv")), before);

    ok(
        root,
        &[
            "sweep",
            "--set",
            "sweep.alphas=[0,0.5]",
            "--set",
            "sweep.betas=[0,0.5]",
        ],
    );
    let rows = data_rows(&root.join("sweep/sweep.csv"));
    assert_eq!(rows.len(), 4);
    let tags: Vec<String> = rows
        .iter()
        .map(|r| r.split(',').skip(1).take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(tags, ["0,0", "0,0.5", "0.5,0", "0.5,0.5"]);
}

#[test]
fn bench_reports_the_analytic_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_magtkd"))
        .args(["bench", "--out"])
        .arg(dir.path())
        .args(["--set", r#"bench.sizes=[{"s":64,"l":16,"u":8,"d":16}]"#])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = data_rows(&dir.path().join("bench/bench.csv"));
    assert_eq!(rows.len(), 1);
    let analytic: f64 = rows[0].split(',').nth(8).unwrap().parse().unwrap();
    assert_eq!(analytic, 8.0 / (16.0 * 16.0));
}
