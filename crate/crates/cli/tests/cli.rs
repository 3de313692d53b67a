use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elsa_core::config::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_elsa-sim"));
    c.env_remove("ELSA_SIM_SEED");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> PathBuf {
    configs().join("smoke.toml")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

/// Splits a CSV file into its comment header and data lines.
fn read_csv(path: &Path) -> (Vec<String>, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let (comments, data): (Vec<&str>, Vec<&str>) = text.lines().partition(|l| l.starts_with('#'));
    (
        comments.into_iter().map(String::from).collect(),
        data.into_iter().map(String::from).collect(),
    )
}

fn embedded_config(comments: &[String]) -> ExperimentConfig {
    let start = comments.iter().position(|l| l == "# config:").unwrap() + 1;
    let toml: String = comments[start..]
        .iter()
        .map(|l| l.strip_prefix("# ").or(l.strip_prefix('#')).unwrap().to_string() + "\n")
        .collect();
    ExperimentConfig::from_toml(&toml).unwrap()
}

fn column(header: &str, name: &str) -> usize {
    header.split(',').position(|c| c == name).unwrap()
}

#[test]
fn shipped_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        ExperimentConfig::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    let default = fs::read_to_string(configs().join("default.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&default).unwrap(), ExperimentConfig::default());
}

#[test]
fn bound_table_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(["bound", "--rounds", "1,100,10000,1000000"]).arg("--out-dir").arg(tmp.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (comments, data) = read_csv(&tmp.path().join("bound.csv"));
    assert_eq!(comments[0], "# schema: elsa-sim/bound/v1");
    assert_eq!(data[0], "rounds,bound");
    let vals: Vec<f64> = data[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 4);
    assert!((vals[1] - 0.6).abs() < 1e-12);
    assert!(vals.windows(2).all(|w| w[1] < w[0]));

    let empty = run(bin().args(["bound", "--rounds="]).arg("--out-dir").arg(tmp.path()));
    assert_eq!(empty.status.code(), Some(2));
    let words = run(bin().args(["bound", "--gap", "wide"]).arg("--out-dir").arg(tmp.path()));
    assert_eq!(words.status.code(), Some(2));

    let cfg = tmp.path().join("no-rounds.toml");
    fs::write(&cfg, "[bound]\nrounds = []\n").unwrap();
    let from_config = run(bin().arg("bound").arg("--config").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert_eq!(from_config.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[training]\nlr = 0.1\nlearning_rate = 0.2\n").unwrap();
    let out = run(bin().arg("run").arg("--config").arg(&bad).arg("--out-dir").arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("learning_rate") && msg.contains("line 3"), "{msg}");

    fs::write(&bad, "[model]\nsplit = [1, 2, 1]\n").unwrap();
    let out = run(bin().arg("cluster").arg("--config").arg(&bad).arg("--out-dir").arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("model.split") && msg.contains("model.n_blocks"), "{msg}");

    let missing = run(bin().args(["run", "--config", "/nonexistent/elsa.toml"]));
    assert_eq!(missing.status.code(), Some(2));

    let env = run(bin().arg("comm-model").arg("--out-dir").arg(tmp.path()).env("ELSA_SIM_SEED", "-4"));
    assert_eq!(env.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_3_and_leaves_a_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.toml");
    let text = fs::read_to_string(smoke()).unwrap();
    fs::write(&cfg, text.replace("max_rounds = 3\n", "max_rounds = 3\nlr = 1e300\n")).unwrap();
    let out = run(bin().arg("run").arg("--config").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let (comments, _) = read_csv(&tmp.path().join("training-elsa.csv"));
    assert!(comments.iter().any(|l| l.starts_with("# error:")));
}

#[test]
fn run_writes_log_and_summary_with_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().arg("run").arg("--config").arg(smoke()).arg("--out-dir").arg(tmp.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (comments, data) = read_csv(&tmp.path().join("training-elsa.csv"));
    assert_eq!(comments[0], "# schema: elsa-sim/training-log/v1");
    assert_eq!(comments[1], "# seed: 7");
    let echoed = embedded_config(&comments);
    assert_eq!(echoed.seed, 7);
    assert_eq!(echoed.partition.poisoned.len(), 1);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary-elsa.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], "elsa-sim/run-summary/v1");
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["config"]["topology"]["n_clients"], 6);
    let rounds = summary["rounds"].as_u64().unwrap() as usize;
    assert_eq!(data.len(), rounds + 1);
    let header = &data[0];
    let acc = column(header, "eval_accuracy");
    let last: f64 = data[rounds].split(',').nth(acc).unwrap().parse().unwrap();
    assert_eq!(summary["final_accuracy"].as_f64().unwrap(), last);
    let weights: f64 = summary["edge_weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((weights - 1.0).abs() < 1e-12);
}

#[test]
fn seed_precedence_flag_then_env_then_config() {
    let tmp = tempfile::tempdir().unwrap();
    let seed_of = |dir: &Path| read_csv(&dir.join("comm-model.csv")).0[1].clone();

    let a = tmp.path().join("a");
    run(bin().arg("comm-model").arg("--config").arg(smoke()).arg("--out-dir").arg(&a));
    assert_eq!(seed_of(&a), "# seed: 7");

    let b = tmp.path().join("b");
    run(bin().arg("comm-model").arg("--config").arg(smoke()).arg("--out-dir").arg(&b).env("ELSA_SIM_SEED", "42"));
    assert_eq!(seed_of(&b), "# seed: 42");

    let c = tmp.path().join("c");
    run(bin()
        .arg("comm-model")
        .arg("--config")
        .arg(smoke())
        .args(["--seed", "5", "--out-dir"])
        .arg(&c)
        .env("ELSA_SIM_SEED", "42"));
    assert_eq!(seed_of(&c), "# seed: 5");
}

#[test]
fn seed_sweep_is_independent_of_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep");
    let out = run(bin()
        .arg("cluster")
        .arg("--config")
        .arg(smoke())
        .args(["--seed", "3,4", "--jobs", "2", "--out-dir"])
        .arg(&sweep));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in [3, 4] {
        let single = tmp.path().join(format!("single-{s}"));
        let out = run(bin()
            .arg("cluster")
            .arg("--config")
            .arg(smoke())
            .arg("--seed")
            .arg(s.to_string())
            .arg("--out-dir")
            .arg(&single));
        assert!(out.status.success());
        for file in ["assignment.csv", "divergence.csv"] {
            let (_, from_sweep) = read_csv(&sweep.join(format!("seed-{s}")).join(file));
            let (_, alone) = read_csv(&single.join(file));
            assert_eq!(from_sweep, alone, "{file} seed {s}");
        }
    }
}

#[test]
fn cluster_table_covers_every_client() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("fig.toml");
    fs::write(
        &cfg,
        "seed = 2\n[partition]\nn_poisoned = 4\n[topology]\nunreachable = [5]\n[fingerprint]\nwarmup_steps = 10\n",
    )
    .unwrap();
    let out = run(bin().arg("cluster").arg("--config").arg(&cfg).arg("--out-dir").arg(tmp.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (comments, rows) = read_csv(&tmp.path().join("assignment.csv"));
    assert_eq!(comments[0], "# schema: elsa-sim/assignment/v1");
    let header = &rows[0];
    let (status, reason, poisoned) = (column(header, "status"), column(header, "reason"), column(header, "poisoned"));
    assert_eq!(rows.len(), 21);
    let mut n_poisoned = 0;
    for (i, line) in rows[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        match f[status] {
            "assigned" => assert_eq!(f[reason], ""),
            "excluded" => assert!(f[reason] == "out-of-range" || f[reason] == "low-trust"),
            other => panic!("client {i}: status {other}"),
        }
        if i == 5 {
            assert_eq!((f[status], f[reason]), ("excluded", "out-of-range"));
        }
        n_poisoned += (f[poisoned] == "true") as usize;
    }
    assert_eq!(n_poisoned, 4);

    let (comments, div) = read_csv(&tmp.path().join("divergence.csv"));
    assert_eq!(comments[0], "# schema: elsa-sim/divergence/v1");
    let m: Vec<Vec<f64>> = div[1..]
        .iter()
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(m.len(), 20);
    for i in 0..20 {
        assert_eq!(m[i][i], 0.0);
        for j in 0..20 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("cluster.json")).unwrap()).unwrap();
    let excluded = summary["excluded"].as_array().unwrap();
    assert!(excluded.iter().any(|e| e["client"] == 5 && e["reason"] == "out-of-range"));
    assert_eq!(summary["assigned"].as_u64().unwrap() as usize + excluded.len(), 20);
}

#[test]
fn privacy_table_has_every_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().arg("privacy-eval").arg("--config").arg(smoke()).arg("--out-dir").arg(tmp.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (comments, rows) = read_csv(&tmp.path().join("privacy.csv"));
    assert_eq!(comments[0], "# schema: elsa-sim/privacy/v1");
    let h = &rows[0];
    let (mode, rho, rank, cos, mse, flag) = (
        column(h, "mode"),
        column(h, "rho"),
        column(h, "rank"),
        column(h, "cos_sim"),
        column(h, "mse"),
        column(h, "rho_independent"),
    );
    let rows: Vec<Vec<String>> = rows[1..].iter().map(|l| l.split(',').map(String::from).collect()).collect();
    for rh in ["1.0", "2.0"] {
        let at: Vec<&Vec<String>> = rows.iter().filter(|r| r[rho] == rh).collect();
        let direct = at.iter().find(|r| r[mode] == "direct").unwrap();
        assert_eq!((direct[cos].as_str(), direct[mse].as_str()), ("1.0", "0.0"));
        let noise = at.iter().find(|r| r[mode] == "gaussian-noise").unwrap();
        assert_eq!(noise[flag], "true");
        assert!(at.iter().any(|r| r[mode] == "sketch-only"));
        for r in ["8", "16"] {
            assert!(at.iter().any(|x| x[mode] == "ssop+sketch" && x[rank] == r));
        }
    }
    let noise: Vec<&Vec<String>> = rows.iter().filter(|r| r[mode] == "gaussian-noise").collect();
    assert_eq!(noise[0][cos..], noise[1][cos..]);
}

#[test]
fn comm_model_halves_activation_bytes_with_rho() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().arg("comm-model").arg("--out-dir").arg(tmp.path()));
    assert!(out.status.success());
    let (_, rows) = read_csv(&tmp.path().join("comm-model.csv"));
    let h = &rows[0];
    let (act, lora) = (column(h, "activation_bytes"), column(h, "lora_bytes"));
    let vals: Vec<(f64, f64)> = rows[1..]
        .iter()
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[act], f[lora])
        })
        .collect();
    assert_eq!(vals.len(), 4);
    for w in vals.windows(2) {
        assert_eq!(w[1].0 * 2.0, w[0].0);
        assert_eq!(w[1].1, w[0].1);
    }
}
