use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn simembed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simembed"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = simembed(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

/// Synthesized world with an aggregated, normalized matrix.
fn world() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "7", "synth", "--out", "w", "--frames", "60"],
    );
    ok(
        dir.path(),
        &[
            "aggregate",
            "--answers",
            "w/answers.csv",
            "--manifest",
            "w/manifest.json",
            "--normalize",
            "--out",
            "w/sim.csv",
        ],
    );
    dir
}

fn train(dir: &Path, loss: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "--seed",
        "3",
        "train",
        "--manifest",
        "w/manifest.json",
        "--matrix",
        "w/sim.csv",
        "--loss",
        loss,
        "--arch",
        "small",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let commands = [
        "synth",
        "aggregate",
        "train",
        "extract",
        "eval",
        "graph",
        "histogram",
    ];
    assert_eq!(code(&simembed(dir.path(), &["--help"])), 0);
    for c in commands {
        let out = simembed(dir.path(), &[c, "--help"]);
        assert_eq!(code(&out), 0, "{c}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{c}");
    }
}

#[test]
fn synth_writes_the_roster_it_was_asked_for() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &[
            "--seed",
            "7",
            "synth",
            "--speakers",
            "16",
            "--closed",
            "13",
            "--out",
            "w",
        ],
    );
    assert!(stdout.contains("negative score fraction"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("w/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["speakers"].as_array().unwrap().len(), 16);
    assert_eq!(manifest["closed_count"], 13);
    assert_eq!(manifest["feature_dim"], 16);
    let frames = lines(&dir.path().join("w/frames/F001.csv"));
    assert_eq!(frames[0].split(',').count(), 17);
    assert_eq!(frames.len(), 201);
    assert!(dir.path().join("w/ground_truth.json").is_file());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["--seed", "7", "synth", "--out", "a", "--frames", "20"],
    );
    ok(
        dir.path(),
        &["--seed", "7", "synth", "--out", "b", "--frames", "20"],
    );
    ok(
        dir.path(),
        &["--seed", "8", "synth", "--out", "c", "--frames", "20"],
    );
    for f in [
        "manifest.json",
        "answers.csv",
        "ground_truth.csv",
        "frames/F005.csv",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(dir.path().join("a/answers.csv")).unwrap(),
        fs::read(dir.path().join("c/answers.csv")).unwrap()
    );
}

#[test]
fn bad_synth_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = simembed(
        dir.path(),
        &["synth", "--speakers", "4", "--closed", "5", "--out", "w"],
    );
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("w").exists());
    assert_eq!(code(&simembed(dir.path(), &["synth", "--bogus"])), 1);
    assert_eq!(
        code(&simembed(
            dir.path(),
            &["--workers", "0", "synth", "--out", "w"]
        )),
        1
    );
}

#[test]
fn aggregate_matches_noiseless_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--out",
            "w",
            "--frames",
            "5",
            "--answer-noise",
            "0",
        ],
    );
    ok(
        dir.path(),
        &[
            "aggregate",
            "--answers",
            "w/answers.csv",
            "--manifest",
            "w/manifest.json",
            "--normalize",
            "--out",
            "sim.csv",
        ],
    );
    let parse = |p: &str| -> Vec<Vec<f64>> {
        lines(&dir.path().join(p))
            .iter()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    };
    let got = parse("sim.csv");
    let truth = parse("w/ground_truth.csv");
    for i in 0..truth.len() {
        for j in 0..truth.len() {
            let expect = if i == j {
                1.0
            } else {
                (3.0 * truth[i][j]).round() / 3.0
            };
            assert_eq!(got[i][j], expect, "({i}, {j})");
        }
    }
}

#[test]
fn aggregate_histogram_and_coverage() {
    let dir = world();
    let answers = dir.path().join("w/answers.csv");
    let mut distinct = std::collections::BTreeSet::new();
    for l in lines(&answers).iter().skip(1) {
        distinct.insert(l.rsplit(',').next().unwrap().to_string());
    }
    let stdout = ok(
        dir.path(),
        &[
            "aggregate",
            "--answers",
            "w/answers.csv",
            "--speakers",
            "16",
            "--out",
            "raw.csv",
        ],
    );
    assert_eq!(stdout.lines().count() - 1, distinct.len());
    assert!(stdout.trim_end().ends_with(",1"));
    let sidecar = fs::read_to_string(dir.path().join("raw.json")).unwrap();
    assert!(sidecar.contains("\"normalized\": false"));

    let out = simembed(
        dir.path(),
        &[
            "aggregate",
            "--answers",
            "w/answers.csv",
            "--speakers",
            "16",
            "--min-answers",
            "11",
            "--out",
            "short.csv",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("(0, 1)"));
    assert!(!dir.path().join("short.csv").exists());
}

#[test]
fn histogram_for_one_pair() {
    let dir = world();
    let stdout = ok(
        dir.path(),
        &["histogram", "--answers", "w/answers.csv", "--pair", "2,9"],
    );
    let counts: usize = stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 10);
    let out = simembed(
        dir.path(),
        &["histogram", "--answers", "w/answers.csv", "--pair", "2,99"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = world();
    train(dir.path(), "prop_vec", "t", &["--epochs", "1"]);
    let log = lines(&dir.path().join("t/train_log.csv"));
    assert_eq!(log[0], "epoch,loss");
    assert_eq!(log.len(), 2);
    let cfg = fs::read_to_string(dir.path().join("t/config.json")).unwrap();
    for key in [
        "\"batch_size\": 256",
        "\"learning_rate\": 0.01",
        "\"kernel\": \"sigmoid\"",
    ] {
        assert!(cfg.contains(key), "{key} missing from {cfg}");
    }
    let ckpt = fs::read_to_string(dir.path().join("t/checkpoint.json")).unwrap();
    assert!(ckpt.contains("\"loss_tag\": \"prop_vec\""));
}

#[test]
fn train_is_reproducible_and_objective_dependent() {
    let dir = world();
    train(dir.path(), "dvec_sce", "a", &["--epochs", "2"]);
    train(dir.path(), "dvec_sce", "b", &["--epochs", "2"]);
    train(dir.path(), "prop_mat", "c", &["--epochs", "2"]);
    let read = |p: &str| fs::read(dir.path().join(p).join("checkpoint.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = world();
    fs::write(
        dir.path().join("run.json"),
        r#"{"manifest": "w/manifest.json", "matrix": "w/sim.csv", "out": "t",
            "loss": "prop_mat", "epochs": 5, "arch": "small", "seed": 1}"#,
    )
    .unwrap();
    let stdout = ok(
        dir.path(),
        &["train", "--config", "run.json", "--epochs", "2"],
    );
    assert!(stdout.contains("\"epochs\": 2"));
    assert_eq!(lines(&dir.path().join("t/train_log.csv")).len(), 3);

    fs::write(
        dir.path().join("bad.json"),
        r#"{"loss": "prop_mat", "epoch": 5}"#,
    )
    .unwrap();
    let out = simembed(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn failed_train_leaves_no_output() {
    let dir = world();
    let out = simembed(
        dir.path(),
        &[
            "train",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "missing.csv",
            "--loss",
            "prop_mat",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = simembed(
        dir.path(),
        &[
            "train",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "w/sim.csv",
            "--loss",
            "prop_mat",
            "--lr",
            "-1",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&out), 1);
    // Matrix losses refuse an unnormalized matrix.
    ok(
        dir.path(),
        &[
            "aggregate",
            "--answers",
            "w/answers.csv",
            "--manifest",
            "w/manifest.json",
            "--out",
            "raw.csv",
        ],
    );
    let out = simembed(
        dir.path(),
        &[
            "train",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "raw.csv",
            "--loss",
            "prop_mat",
            "--arch",
            "small",
            "--epochs",
            "1",
            "--out",
            "t",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("t").exists());
}

#[test]
fn eval_report_and_scatter() {
    let dir = world();
    train(dir.path(), "prop_mat", "t", &["--epochs", "3"]);
    ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "t/checkpoint.json",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "w/sim.csv",
            "--out",
            "e",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/report.json")).unwrap())
            .unwrap();
    let count = |k: &str| report[k]["pair_count"].as_u64().unwrap();
    assert_eq!(count("all"), 120);
    assert_eq!(count("closed_closed"), 78);
    assert_eq!(count("closed_open"), 39);
    for k in ["all", "closed_closed", "closed_open"] {
        assert!(count(&format!("{k}_positive")) <= count(k));
        assert!(report[k]["r"].is_f64());
    }
    let scatter = lines(&dir.path().join("e/scatter.csv"));
    assert_eq!(scatter[0], "s_ij,k_ij,subset");
    assert_eq!(scatter.len() - 1, 120);
    let positive = scatter[1..]
        .iter()
        .filter(|l| l.split(',').next().unwrap().parse::<f64>().unwrap() > 0.0)
        .count() as u64;
    assert_eq!(positive, count("all_positive"));

    ok(
        dir.path(),
        &[
            "extract",
            "--checkpoint",
            "t/checkpoint.json",
            "--manifest",
            "w/manifest.json",
            "--out",
            "d.csv",
        ],
    );
    let d = lines(&dir.path().join("d.csv"));
    assert_eq!(d[0], "speaker,label,d1,d2,d3");
    assert_eq!(d.len(), 17);
}

#[test]
fn eval_on_a_matrix_built_from_the_dvectors_is_perfect() {
    let dir = world();
    train(dir.path(), "dvec_sce", "t", &["--epochs", "1"]);
    ok(
        dir.path(),
        &[
            "extract",
            "--checkpoint",
            "t/checkpoint.json",
            "--manifest",
            "w/manifest.json",
            "--out",
            "d.csv",
        ],
    );
    let d: Vec<Vec<f64>> = lines(&dir.path().join("d.csv"))[1..]
        .iter()
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    let n = d.len();
    let mut csv = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| {
                if i == j {
                    "1".to_string()
                } else {
                    let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
                    dot.tanh().to_string()
                }
            })
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.path().join("k.csv"), csv).unwrap();
    let sidecar = fs::read_to_string(dir.path().join("w/sim.json")).unwrap();
    fs::write(dir.path().join("k.json"), sidecar).unwrap();
    ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "t/checkpoint.json",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "k.csv",
            "--out",
            "e",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/report.json")).unwrap())
            .unwrap();
    let r = report["all"]["r"].as_f64().unwrap();
    assert!((r - 1.0).abs() <= 1e-9, "r = {r}");
}

#[test]
fn eval_rejects_a_mismatched_roster() {
    let dir = world();
    train(dir.path(), "dvec_sce", "t", &["--epochs", "1"]);
    ok(
        dir.path(),
        &[
            "synth",
            "--speakers",
            "10",
            "--closed",
            "8",
            "--frames",
            "5",
            "--out",
            "small",
        ],
    );
    let out = simembed(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "t/checkpoint.json",
            "--manifest",
            "w/manifest.json",
            "--matrix",
            "small/ground_truth.csv",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("e").exists());
}

#[test]
fn graph_outputs_are_consistent() {
    let dir = world();
    let stdout = ok(
        dir.path(),
        &["graph", "--matrix", "w/sim.csv", "--out", "g"],
    );
    assert!(stdout.contains("edges:"));
    let layout = lines(&dir.path().join("g/layout.csv"));
    assert_eq!(layout[0], "speaker,label,x,y");
    assert_eq!(layout.len() - 1, 16);
    let degree_sum: usize = lines(&dir.path().join("g/degrees.csv"))[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    let edges = lines(&dir.path().join("g/edges.csv"));
    assert_eq!(edges[0], "i,j");
    assert_eq!(edges.len() - 1, degree_sum / 2);
}

#[test]
fn graph_without_positive_pairs_has_no_edges() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), "3,-1,-2\n-1,3,0\n-2,0,3\n").unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"n_speakers": 3, "score_bound": 3.0, "normalized": false,
            "labels": ["A", "B", "C"], "closed_count": 3}"#,
    )
    .unwrap();
    ok(dir.path(), &["graph", "--matrix", "s.csv", "--out", "g"]);
    assert_eq!(lines(&dir.path().join("g/edges.csv")), vec!["i,j"]);
    let degrees = lines(&dir.path().join("g/degrees.csv"));
    assert!(degrees[1..].iter().all(|l| l.ends_with(",0")));
    assert_eq!(lines(&dir.path().join("g/layout.csv")).len(), 4);
}
