//! Command-line surface: `odsim run --app <name> [--config <file>]
//! [--set key=value]... [--out results.csv] [--json] [--trace]`.
//!
//! A run executes every sweep point of the resolved configuration in
//! order, emits one metrics row per point (CSV by default, JSON with
//! `--json`), and with `--trace` writes per-run event traces and transfer
//! logs next to the results.

use crate::apps::{run_once, RunOutput};
use crate::config::RunConfig;
use crate::error::{SimError, SimResult};
use crate::metrics::{to_csv, to_json, trace_to_tsv, transfers_to_csv, MetricsRecord};
use crate::Micros;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "odsim",
    version,
    about = "Discrete-event simulator of an overdecomposed GPU runtime"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Execute a single run or an ODF sweep and emit metrics.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Application: jacobi2d, launch_rate, overlap, or pipeline.
    #[arg(long)]
    pub app: Option<String>,

    /// Sectioned key/value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set network.bandwidth_gbps=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Write results here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Emit JSON instead of CSV.
    #[arg(long)]
    pub json: bool,

    /// Write per-run event traces and transfer logs.
    #[arg(long)]
    pub trace: bool,
}

/// Results of a full sweep invocation.
pub struct SweepOutput {
    pub records: Vec<MetricsRecord>,
    pub runs: Vec<RunOutput<Micros>>,
}

/// Resolve the configuration from file, flags and overrides.
pub fn resolve_config(args: &RunArgs) -> SimResult<RunConfig<Micros>> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
                path: path.display().to_string(),
                source,
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(app) = &args.app {
        cfg.set("app.name", app)?;
    }
    for s in &args.sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| SimError::Config(format!("--set `{s}` must be key=value")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if args.json {
        cfg.output.json = true;
    }
    if args.trace {
        cfg.output.trace = true;
    }
    if let Some(out) = &args.out {
        cfg.output.out = Some(out.display().to_string());
    }
    Ok(cfg)
}

/// Run every sweep point of a configuration, in sweep order.
pub fn run_sweep(cfg: &RunConfig<Micros>) -> SimResult<SweepOutput> {
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for (i, odf) in cfg.sweep_points().into_iter().enumerate() {
        let point = cfg.with_odf(odf);
        let out = run_once(&point, cfg.output.trace)
            .map_err(|e| SimError::Config(format!("sweep point {i} (odf={odf}) failed: {e}")))?;
        records.push(MetricsRecord {
            run_id: format!("{}-{i}", point.app.name),
            config: point.flatten(),
            measurements: out.measurements,
            counters: out.counters,
        });
        runs.push(out);
    }
    Ok(SweepOutput { records, runs })
}

fn write_file(path: &Path, contents: &str) -> SimResult<()> {
    std::fs::write(path, contents).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Trace/transfer-log paths derive from the results path (or the current
/// directory when results go to stdout).
fn sidecar_path(out: &Option<String>, run_idx: usize, suffix: &str) -> PathBuf {
    match out {
        Some(p) => {
            let path = Path::new(p);
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("results");
            path.with_file_name(format!("{stem}.run{run_idx}.{suffix}"))
        }
        None => PathBuf::from(format!("odsim.run{run_idx}.{suffix}")),
    }
}

/// Execute a `run` invocation end to end.
pub fn execute(args: &RunArgs) -> SimResult<()> {
    let cfg = resolve_config(args)?;
    // fail on unwritable output before simulating anything
    if let Some(out) = &cfg.output.out {
        write_file(Path::new(out), "")?;
    }
    let sweep = run_sweep(&cfg)?;
    let rendered = if cfg.output.json {
        to_json(&sweep.records)
    } else {
        to_csv(&sweep.records)
    };
    match &cfg.output.out {
        Some(path) => write_file(Path::new(path), &rendered)?,
        None => print!("{rendered}"),
    }
    if cfg.output.trace {
        for (i, run) in sweep.runs.iter().enumerate() {
            if let Some(rows) = &run.trace {
                write_file(
                    &sidecar_path(&cfg.output.out, i, "trace.tsv"),
                    &trace_to_tsv(rows),
                )?;
            }
            write_file(
                &sidecar_path(&cfg.output.out, i, "transfers.csv"),
                &transfers_to_csv(&run.world.comm.transfers),
            )?;
        }
    }
    Ok(())
}
