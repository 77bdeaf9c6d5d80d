//! End-to-end runs of the `fairfl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fairfl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fairfl"));
    c.env_remove("FAIRFL_WORKERS");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quadratic_config(dir: &Path, method: &str, param: &str, extra_run: &str) -> PathBuf {
    let path = dir.join(format!("{method}.toml"));
    fs::write(
        &path,
        format!(
            "[dataset]\nsource = \"quadratic\"\nn_clients = 4\ndim = 3\n\n[model]\nkind = \"quadratic\"\n\n\
             [algorithm]\nmethod = \"{method}\"\n{param}lr = 0.05\nrounds = 10\n\n[run]\nseeds = [0, 1]\n{extra_run}"
        ),
    )
    .unwrap();
    path
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn run_writes_one_row_per_iterate_and_a_versioned_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fairloss", "lambda = 0.5\n", "checkpoint_every = 5\n");
    let out = dir.path().join("out");
    ok(fairfl().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap());
    for seed in [0, 1] {
        let s = out.join(format!("seed-{seed}"));
        let rounds = fs::read_to_string(s.join("rounds.csv")).unwrap();
        assert!(rounds.starts_with("# fairfl "), "{rounds}");
        assert_eq!(data_rows(&rounds).len(), 11);
        for f in ["record.json", "events.jsonl", "timings_ms.txt", "checkpoint.bin"] {
            assert!(s.join(f).exists(), "{f} missing");
        }
    }
    for f in ["config.toml", "summary.json", "summary.csv", "plot_rounds.py"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(data_rows(&summary).len(), 2);
}

#[test]
fn reruns_reproduce_every_output_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fairgrad_exact", "gamma = 0.3\n", "checkpoint_every = 4\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(fairfl().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&a).output().unwrap());
    ok(fairfl().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&b).arg("--workers").arg("3").output().unwrap());
    for f in ["summary.csv", "summary.json", "config.toml", "seed-0/rounds.csv", "seed-1/record.json", "seed-1/events.jsonl", "seed-0/checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_out_dir_resolves_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fedavg", "", "out = \"results\"\n");
    ok(fairfl().current_dir(std::env::temp_dir()).args(["run", "--config"]).arg(&cfg).output().unwrap());
    assert!(dir.path().join("results/summary.csv").exists());
}

#[test]
fn seeds_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "qffl", "q = 1.0\n", "");
    let out = dir.path().join("out");
    ok(fairfl().args(["run", "--seeds", "7,9", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap());
    assert!(out.join("seed-7").exists() && out.join("seed-9").exists() && !out.join("seed-0").exists());
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fairloss", "lambda = 0.5\nlamda = 0.5\n", "");
    let out = fairfl().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    let cfg = quadratic_config(dir.path(), "fairgrad", "lambda = 0.5\n", "");
    let out = fairfl().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    let out = fairfl().args(["run", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn worker_count_prefers_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let plain = quadratic_config(dir.path(), "fedavg", "", "");
    let out = fairfl().env("FAIRFL_WORKERS", "many").args(["run", "--config"]).arg(&plain).arg("--out").arg(dir.path().join("e")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "a bad environment value is used when nothing else is set");
    ok(fairfl().env("FAIRFL_WORKERS", "many").args(["run", "--workers", "2", "--config"]).arg(&plain).arg("--out").arg(dir.path().join("f")).output().unwrap());
    ok(fairfl().env("FAIRFL_WORKERS", "2").args(["run", "--config"]).arg(&plain).arg("--out").arg(dir.path().join("g")).output().unwrap());
    let with_cfg = quadratic_config(dir.path(), "fairloss", "lambda = 1.0\n", "workers = 1\n");
    ok(fairfl().env("FAIRFL_WORKERS", "many").args(["run", "--config"]).arg(&with_cfg).arg("--out").arg(dir.path().join("h")).output().unwrap());
}

fn read_ranking(path: &Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes()).records().map(Result::unwrap).collect()
}

#[test]
fn one_cell_sweep_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fairloss", "lambda = 0.5\n", "");
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "lr = [0.05]\n").unwrap();
    let (sweep, run) = (dir.path().join("sweep"), dir.path().join("run"));
    let out = ok(fairfl().args(["sweep", "--config"]).arg(&cfg).arg("--grid").arg(&grid).arg("--out").arg(&sweep).output().unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 cells x 2 seeds = 2 runs"));
    ok(fairfl().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap());
    let ranking = read_ranking(&sweep.join("ranking.csv"));
    assert_eq!(ranking.len(), 1);
    assert_eq!(&ranking[0][11], "*");
    assert_eq!(fs::read(sweep.join("summary.csv")).unwrap(), fs::read(run.join("summary.csv")).unwrap());
    assert_eq!(
        fs::read(sweep.join("cell-000/seed-1/rounds.csv")).unwrap(),
        fs::read(run.join("seed-1/rounds.csv")).unwrap()
    );
}

#[test]
fn sweep_ranks_by_validation_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fairgrad", "gamma = 0.1\n", "");
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "lr = [0.0001, 0.01, 0.1]\nparam = [0.0, 0.5]\n").unwrap();
    let out = dir.path().join("sweep");
    ok(fairfl().args(["sweep", "--config"]).arg(&cfg).arg("--grid").arg(&grid).arg("--out").arg(&out).output().unwrap());
    let rows = read_ranking(&out.join("ranking.csv"));
    assert_eq!(rows.len(), 6);
    let f = |r: &csv::StringRecord, k: usize| r[k].parse::<f64>().unwrap();
    for w in rows.windows(2) {
        assert!(f(&w[0], 10) >= f(&w[1], 10));
    }
    // A cell that is no worse on both accuracy and variance ranks no lower.
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let b_dominates = f(b, 8) > f(a, 8) && f(b, 9) < f(a, 9);
            assert!(!b_dominates, "{} ranked below dominating {}", &b[1], &a[1]);
        }
    }
    assert_eq!(&rows[0][11], "*");
    assert!(rows[1..].iter().all(|r| r[11].is_empty()));
    assert!(out.join("cell-005/algorithm.toml").exists());
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fedavg", "", "");
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "lr = [0.05, 1e200]\n").unwrap();
    let out = dir.path().join("sweep");
    ok(fairfl().args(["sweep", "--config"]).arg(&cfg).arg("--grid").arg(&grid).arg("--out").arg(&out).output().unwrap());
    let rows = read_ranking(&out.join("ranking.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "cell-000");
    assert_eq!(&rows[0][12], "ok");
    assert!(rows[1][12].contains("non-finite"), "{}", &rows[1][12]);

    let empty = dir.path().join("empty.toml");
    fs::write(&empty, "lr = []\n").unwrap();
    let out = fairfl().args(["sweep", "--config"]).arg(&cfg).arg("--grid").arg(&empty).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn theory_ids(dir: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("theory-report.json")).unwrap()).unwrap();
    v.as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap().to_string()).collect()
}

#[test]
fn theory_suite_census_and_filter() {
    let dir = tempfile::tempdir().unwrap();
    let all = dir.path().join("all");
    let out = ok(fairfl().args(["theory", "--out"]).arg(&all).output().unwrap());
    assert_eq!(
        theory_ids(&all),
        [
            "grad-surrogate-identity",
            "homogeneous-alignment",
            "loss-surrogate-identity",
            "offset-counterexample",
            "qffl-variance-bound",
            "variance-reduction"
        ]
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS ")).count(), 6, "{stdout}");

    let one = dir.path().join("one");
    ok(fairfl().args(["theory", "--filter", "variance-bound", "--out"]).arg(&one).output().unwrap());
    assert_eq!(theory_ids(&one), ["qffl-variance-bound"]);
}

#[test]
fn injected_fault_fails_the_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = fairfl()
        .args(["theory", "--filter", "loss-surrogate", "--inject-fault", "flip-lambda-sign", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL loss-surrogate-identity"));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("theory-report.json")).unwrap()).unwrap();
    assert_eq!(v[0]["passed"], false);
}

#[test]
fn report_merges_runs_independently_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (m, p) in [("fedavg", ""), ("fairloss", "lambda = 0.5\n"), ("qffl", "q = 1.0\n")] {
        let cfg = quadratic_config(dir.path(), m, p, "");
        let out = dir.path().join(format!("run-{m}"));
        ok(fairfl().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap());
        runs.push(out);
    }
    let (fwd, rev) = (dir.path().join("fwd"), dir.path().join("rev"));
    ok(fairfl().arg("report").args(&runs).arg("--out").arg(&fwd).output().unwrap());
    runs.reverse();
    ok(fairfl().arg("report").args(&runs).arg("--out").arg(&rev).output().unwrap());
    for f in ["table1.csv", "summary.csv", "summary.json", "plot_table.py"] {
        assert_eq!(fs::read(fwd.join(f)).unwrap(), fs::read(rev.join(f)).unwrap(), "{f}");
    }
    let table = fs::read_to_string(fwd.join("table1.csv")).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("FedAvg,") && rows[2].starts_with("q-FFL,"), "{table}");
    assert!(table.contains("AAggFF"));
}

#[test]
fn report_of_a_single_run_is_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quadratic_config(dir.path(), "fedavg", "", "");
    let run = dir.path().join("run");
    ok(fairfl().args(["run", "--seeds", "3", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap());
    let rep = dir.path().join("rep");
    ok(fairfl().arg("report").arg(&run).arg("--out").arg(&rep).output().unwrap());
    let table = fs::read_to_string(rep.join("table1.csv")).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 2);
    assert_eq!(body[0].split(',').count(), 3);
    assert!(body[1].starts_with("FedAvg,") && body[1].contains("(±0.00)"), "{table}");

    let out = fairfl().arg("report").arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_mnist_config_produces_a_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/mnist/fedavg-dir0.5.toml");
    ok(fairfl().args(["run", "--seeds", "0", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap());
    let shards: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("seed-0/shards.json")).unwrap()).unwrap();
    assert_eq!(shards.as_array().unwrap().len(), 10);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    let row = &summary[0];
    assert_eq!(row["method"], "fedavg");
    assert_eq!(row["alpha"], 0.5);
    let acc = row["test_mean_acc"].as_f64().unwrap();
    assert!(acc > 0.8, "test accuracy {acc}");
    assert!(row["test_acc_var"].as_f64().unwrap() >= 0.0);
}

#[test]
fn version_flag_reports_the_source_hash() {
    let out = ok(fairfl().arg("--version").output().unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("fairfl "));
}
