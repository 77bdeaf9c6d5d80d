//! `fairfl`: runs, sweeps, the property suite and result tables.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairfl::data::shard_manifests;
use fairfl::federation::{train, AlgorithmConfig, Method, TrainOptions};
use fairfl::metrics::{sweep_score, table1_csv, RunRecord, RunSummary};
use fairfl::theory::{run_suite, Fault, SuiteOptions};
use fairfl::{Error, Result};
use rayon::prelude::*;

use config::{ExperimentConfig, Source, SweepGrid};

const WORKERS_ENV: &str = "FAIRFL_WORKERS";

#[derive(Parser)]
#[command(name = "fairfl", version, about = "Fairness-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds; overrides `run.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train every grid cell for every seed and rank cells on validation.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the property suite and write theory-report.json.
    Theory {
        /// Keep checks whose id contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
        /// Debug hook: corrupt a check on purpose.
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Merge finished run directories into one results table.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    FlipLambdaSign,
}

/// Flag, then config, then environment.
fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    if let Some(w) = flag.or(config) {
        return Ok(Some(w));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&w| w > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

fn init_pool(workers: Option<usize>) -> Result<()> {
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(())
}

fn run_one(cfg: &ExperimentConfig, alg: &AlgorithmConfig, seed: u64, dir: &Path) -> Result<RunSummary> {
    let (fed, num_classes) = cfg.federation(seed)?;
    let alg = alg.clone().with_seed(seed);
    std::fs::create_dir_all(dir)?;
    if cfg.dataset.source != Source::Quadratic {
        output::write(
            &dir.join("shards.json"),
            serde_json::to_vec_pretty(&shard_manifests(&fed.shards, num_classes))?,
        )?;
    }
    let opts = TrainOptions {
        checkpoint_every: cfg.run.checkpoint_every,
        checkpoint_path: Some(dir.join("checkpoint.bin")),
        event_log: Some(dir.join("events.jsonl")),
        selection: cfg.run.selection,
        ..TrainOptions::default()
    };
    let (record, failure) = match train(&alg, &fed, &opts) {
        Ok(r) => (r, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    write_record(dir, record.clone())?;
    if let Some(e) = failure {
        return Err(e);
    }
    RunSummary::from_record(&record, cfg.dataset.alpha)
}

fn write_record(dir: &Path, mut record: RunRecord) -> Result<()> {
    output::write(&dir.join("rounds.csv"), output::rounds_csv(&record)?)?;
    // Wall-clock times vary between runs, so they live apart from the
    // reproducible outputs.
    let timings: String = record.timings_ms.iter().map(|t| format!("{t}\n")).collect();
    output::write(&dir.join("timings_ms.txt"), timings)?;
    record.timings_ms.clear();
    output::write(&dir.join("record.json"), serde_json::to_vec(&record)?)?;
    Ok(())
}

fn write_summaries(out: &Path, rows: &[RunSummary]) -> Result<()> {
    output::write(&out.join("summary.json"), serde_json::to_vec_pretty(rows)?)?;
    output::write(&out.join("summary.csv"), output::summary_csv(rows)?)
}

fn cmd_run(config: &Path, out: Option<&Path>, seeds: Option<Vec<u64>>, workers: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    init_pool(resolve_workers(workers, cfg.run.workers)?)?;
    let seeds = seeds.unwrap_or_else(|| cfg.run.seeds.clone());
    let out = cfg.out_dir(out);
    std::fs::create_dir_all(&out)?;
    output::write(&out.join("config.toml"), cfg.to_toml())?;
    let results: Vec<Result<RunSummary>> = seeds
        .par_iter()
        .map(|&s| run_one(&cfg, &cfg.algorithm, s, &out.join(format!("seed-{s}"))))
        .collect();
    let mut rows = Vec::new();
    for (s, r) in seeds.iter().zip(results) {
        match r {
            Ok(row) => {
                eprintln!(
                    "seed {s}: best round {} test acc {:.4} var {:.6}",
                    row.best_round, row.test_mean_acc, row.test_acc_var
                );
                rows.push(row);
            }
            Err(e) => return Err(Error::Config(format!("seed {s}: {e}"))),
        }
    }
    write_summaries(&out, &rows)?;
    output::write(&out.join("plot_rounds.py"), output::ROUNDS_PLOT)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_sweep(config: &Path, grid: &Path, out: Option<&Path>, seeds: Option<Vec<u64>>, workers: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let grid = SweepGrid::load(grid)?;
    init_pool(resolve_workers(workers, cfg.run.workers)?)?;
    let seeds = seeds.unwrap_or_else(|| cfg.run.seeds.clone());
    let cells = grid.cells(&cfg.algorithm);
    for c in &cells {
        c.validate()?;
    }
    let out = cfg.out_dir(out);
    eprintln!(
        "sweep: {} cells x {} seeds = {} runs",
        cells.len(),
        seeds.len(),
        cells.len() * seeds.len()
    );
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<RunSummary>> = jobs
        .par_iter()
        .map(|&(c, s)| run_one(&cfg, &cells[c], s, &out.join(format!("cell-{c:03}")).join(format!("seed-{s}"))))
        .collect();

    struct Ranked {
        cell: usize,
        acc: f64,
        var: f64,
        score: Option<f64>,
        status: String,
    }
    let mut ranked = Vec::new();
    let mut all_rows = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        output::write(&out.join(format!("cell-{c:03}")).join("algorithm.toml"), toml::to_string(cell).expect("serializes"))?;
        let mut rows = Vec::new();
        let mut errors = Vec::new();
        for ((jc, s), r) in jobs.iter().zip(&results) {
            if *jc != c {
                continue;
            }
            match r {
                Ok(row) => rows.push(row.clone()),
                Err(e) => errors.push(format!("seed {s}: {e}")),
            }
        }
        let acc = fairfl::reduce::ordered_mean(&rows.iter().map(|r| r.val_mean_acc).collect::<Vec<_>>());
        let var = fairfl::reduce::ordered_mean(&rows.iter().map(|r| r.val_acc_var).collect::<Vec<_>>());
        let (score, status) = if errors.is_empty() {
            (Some(sweep_score(acc, var, rows.len())?), "ok".to_string())
        } else {
            (None, errors.join("; "))
        };
        all_rows.extend(rows);
        ranked.push(Ranked {
            cell: c,
            acc,
            var,
            score,
            status,
        });
    }
    ranked.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cell.cmp(&b.cell)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cell.cmp(&b.cell),
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(e.to_string());
    w.write_record([
        "rank",
        "cell",
        "method",
        "lr",
        "param",
        "batch_size",
        "rounds",
        "seeds",
        "val_mean_acc",
        "val_acc_var",
        "score",
        "winner",
        "status",
    ])
    .map_err(io)?;
    for (rank, r) in ranked.iter().enumerate() {
        let c = &cells[r.cell];
        w.write_record([
            (rank + 1).to_string(),
            format!("cell-{:03}", r.cell),
            c.method.name().to_string(),
            c.lr.to_string(),
            c.param().to_string(),
            c.batch_size.map_or_else(|| "full".to_string(), |b| b.to_string()),
            c.rounds.to_string(),
            seeds.len().to_string(),
            r.acc.to_string(),
            r.var.to_string(),
            r.score.map_or_else(String::new, |s| s.to_string()),
            if rank == 0 && r.score.is_some() { "*" } else { "" }.to_string(),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    let mut bytes = format!("# {}\n", output::version_line()).into_bytes();
    bytes.extend(w.into_inner().map_err(|e| Error::Config(e.to_string()))?);
    output::write(&out.join("ranking.csv"), bytes)?;
    write_summaries(&out, &all_rows)?;
    match ranked.first() {
        Some(Ranked { score: Some(s), cell, .. }) => {
            eprintln!("winner: cell-{cell:03} score {s:.6}; wrote {}", out.display());
            Ok(())
        }
        _ => Err(Error::Config("every sweep cell failed".into())),
    }
}

fn cmd_theory(filter: Option<String>, out: &Path, seed: u64, workers: Option<usize>, fault: Option<FaultArg>) -> Result<bool> {
    init_pool(resolve_workers(workers, None)?)?;
    let opts = SuiteOptions {
        filter,
        fault: fault.map(|f| match f {
            FaultArg::FlipLambdaSign => Fault::FlipLambdaSign,
        }),
        seed,
    };
    let reports = run_suite(&opts)?;
    output::write(&out.join("theory-report.json"), serde_json::to_vec_pretty(&reports)?)?;
    for r in &reports {
        let measured: Vec<String> = r.measured.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.id, measured.join(" "));
        for f in &r.failures {
            println!("    {f}");
        }
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn summary_key(s: &RunSummary) -> (usize, u64, u64, u64, usize, u64) {
    let rank = Method::ALL.iter().position(|&m| m == s.method).unwrap_or(usize::MAX);
    let alpha = s.alpha.map_or(u64::MAX, f64::to_bits);
    (rank, alpha, s.param.to_bits(), s.lr.to_bits(), s.rounds, s.seed)
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows: Vec<RunSummary> = Vec::new();
    for d in dirs {
        let path = d.join("summary.json");
        let text = std::fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut part: Vec<RunSummary> = serde_json::from_slice(&text)?;
        rows.append(&mut part);
    }
    if rows.is_empty() {
        return Err(Error::Config("no runs to report".into()));
    }
    rows.sort_by_key(summary_key);
    let note = format!(
        "{}\naccuracy in percent; variance is the sample variance across clients of accuracy in percent (percent^2)\ncells are mean (±standard error) over seeds; AAggFF is not implemented and has no row",
        output::version_line()
    );
    output::write(&out.join("table1.csv"), table1_csv(&rows, &note))?;
    write_summaries(out, &rows)?;
    output::write(&out.join("plot_table.py"), output::TABLE_PLOT)?;
    eprintln!("merged {} runs into {}", rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            workers,
        } => cmd_run(&config, out.as_deref(), seeds, workers).map(|_| true),
        Command::Sweep {
            config,
            grid,
            out,
            seeds,
            workers,
        } => cmd_sweep(&config, &grid, out.as_deref(), seeds, workers).map(|_| true),
        Command::Theory {
            filter,
            out,
            seed,
            workers,
            inject_fault,
        } => cmd_theory(filter, &out, seed, workers, inject_fault),
        Command::Report { run_dirs, out } => cmd_report(&run_dirs, &out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
