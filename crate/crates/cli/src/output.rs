//! Files written by the driver: per-round CSVs, summaries, plot scripts.

use std::fs;
use std::path::Path;

use fairfl::metrics::{RunRecord, RunSummary};
use fairfl::{Error, Result};

pub fn version_line() -> String {
    format!(
        "fairfl {} source {}",
        env!("CARGO_PKG_VERSION"),
        env!("FAIRFL_SOURCE_HASH")
    )
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn with_header(body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("# {}\n", version_line()).into_bytes();
    out.extend(body);
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per recorded iterate.
pub fn rounds_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "t",
        "comm",
        "mean_train_loss",
        "objective",
        "val_mean_acc",
        "val_acc_var",
        "test_mean_acc",
        "test_acc_var",
        "test_mean_loss",
    ])
    .map_err(csv_err)?;
    for r in &record.rounds {
        w.write_record([
            r.t.to_string(),
            r.comm.to_string(),
            r.mean_train_loss.to_string(),
            r.objective.to_string(),
            opt(r.val.as_ref().map(|m| m.mean_acc)),
            opt(r.val.as_ref().map(|m| m.acc_variance)),
            opt(r.test.as_ref().map(|m| m.mean_acc)),
            opt(r.test.as_ref().map(|m| m.acc_variance)),
            opt(r.test.as_ref().map(|m| m.mean_loss)),
        ])
        .map_err(csv_err)?;
    }
    Ok(with_header(w.into_inner().map_err(|e| Error::Config(e.to_string()))?))
}

pub fn summary_csv(rows: &[RunSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "param",
        "lr",
        "rounds",
        "alpha",
        "seed",
        "best_round",
        "comm",
        "val_mean_acc",
        "val_acc_var",
        "test_mean_acc",
        "test_acc_var",
        "test_mean_loss",
    ])
    .map_err(csv_err)?;
    for s in rows {
        w.write_record([
            s.method.name().to_string(),
            s.param.to_string(),
            s.lr.to_string(),
            s.rounds.to_string(),
            opt(s.alpha),
            s.seed.to_string(),
            s.best_round.to_string(),
            s.comm.to_string(),
            s.val_mean_acc.to_string(),
            s.val_acc_var.to_string(),
            s.test_mean_acc.to_string(),
            s.test_acc_var.to_string(),
            s.test_mean_loss.to_string(),
        ])
        .map_err(csv_err)?;
    }
    Ok(with_header(w.into_inner().map_err(|e| Error::Config(e.to_string()))?))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Plots mean test accuracy and its variance against the round for every
/// `seed-*/rounds.csv` next to the script.
pub const ROUNDS_PLOT: &str = r##"#!/usr/bin/env python3
# Usage: python3 plot_rounds.py  (run inside the output directory)
import csv, glob, os
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
fig, (acc_ax, var_ax) = plt.subplots(1, 2, figsize=(11, 4))
for path in sorted(glob.glob(os.path.join(here, "seed-*", "rounds.csv"))):
    with open(path) as f:
        rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
    rows = [r for r in rows if r["test_mean_acc"]]
    t = [int(r["t"]) for r in rows]
    label = os.path.basename(os.path.dirname(path))
    acc_ax.plot(t, [100 * float(r["test_mean_acc"]) for r in rows], label=label)
    var_ax.plot(t, [1e4 * float(r["test_acc_var"]) for r in rows], label=label)
acc_ax.set(xlabel="round", ylabel="mean test accuracy (%)")
var_ax.set(xlabel="round", ylabel="test accuracy variance (%^2)")
acc_ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "rounds.png"), dpi=150)
"##;

/// Bar charts of the merged table's accuracy and variance columns.
pub const TABLE_PLOT: &str = r##"#!/usr/bin/env python3
# Usage: python3 plot_table.py  (run inside the report directory)
import csv, os, re
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(here, "table1.csv")) as f:
    rows = list(csv.reader(line for line in f if not line.startswith("#")))
header, body = rows[0], rows[1:]
cell = re.compile(r"([-\d.]+) \(±([-\d.]+)\)")
fig, axes = plt.subplots(1, 2, figsize=(11, 4))
for k, (ax, kind) in enumerate(zip(axes, ["acc", "var"])):
    cols = [i for i, h in enumerate(header) if h.startswith("test_" + kind)]
    width = 0.8 / max(len(cols), 1)
    for j, c in enumerate(cols):
        xs, ys, es = [], [], []
        for i, row in enumerate(body):
            m = cell.match(row[c])
            if m:
                xs.append(i + j * width)
                ys.append(float(m.group(1)))
                es.append(float(m.group(2)))
        ax.bar(xs, ys, width, yerr=es, label=header[c].split("_")[-1])
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(body))], [r[0] for r in body], rotation=30)
    ax.set_ylabel(["test accuracy (%)", "test variance (%^2)"][k])
    ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "table1.png"), dpi=150)
"##;
