//! Result records and their CSV/JSON renderings, plus the trace and
//! transfer-log writers.
//!
//! CSV column order is fixed: config keys sorted lexicographically, then
//! measurements, then counters, so identical sweeps diff cleanly byte for
//! byte. All times are microseconds, rates kernels/second, sizes bytes.

use crate::comm::Transfer;
use crate::scalar::TimeScalar;
use crate::sim::{SimTime, TraceRow};
use crate::world::World;
use serde::Serialize;

/// Primary measurements; each benchmark fills the subset it defines.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Measurements {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checksum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernels_per_second: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_per_step_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_us: Option<f64>,
}

pub const MEASUREMENT_COLUMNS: [&str; 6] = [
    "checksum",
    "comm_us",
    "completion_us",
    "kernels_per_second",
    "time_per_step_us",
    "total_us",
];

/// Exact event counts and derived utilizations of one run.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct Counters {
    pub kernels_launched: u64,
    pub pe_busy_fraction: f64,
    pub sm_utilization: f64,
    pub transfers_inter_node: u64,
    pub transfers_intra_process: u64,
    pub transfers_ipc: u64,
}

pub const COUNTER_COLUMNS: [&str; 6] = [
    "kernels_launched",
    "pe_busy_fraction",
    "sm_utilization",
    "transfers_inter_node",
    "transfers_intra_process",
    "transfers_ipc",
];

pub fn collect_counters<T: TimeScalar>(world: &mut World<T>, end: SimTime<T>) -> Counters {
    let (ip, ipc, inter) = world.comm.counters();
    let horizon = end.to_f64();
    let busy: f64 = world.pes.iter().map(|p| p.busy_time.to_f64_lossy()).sum();
    let pe_busy_fraction = if horizon > 0.0 {
        busy / (world.pes.len() as f64 * horizon)
    } else {
        0.0
    };
    Counters {
        kernels_launched: world.dev.kernels_completed,
        pe_busy_fraction,
        sm_utilization: world.dev.mean_sm_utilization(end),
        transfers_inter_node: inter,
        transfers_intra_process: ip,
        transfers_ipc: ipc,
    }
}

/// One sweep-point result: run identity, flattened config echo, measured
/// values and counters.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config: Vec<(String, String)>,
    pub measurements: Measurements,
    pub counters: Counters,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsRecord {
    fn measurement_cells(&self) -> [String; 6] {
        let m = &self.measurements;
        [
            fmt_opt(m.checksum),
            fmt_opt(m.comm_us),
            fmt_opt(m.completion_us),
            fmt_opt(m.kernels_per_second),
            fmt_opt(m.time_per_step_us),
            fmt_opt(m.total_us),
        ]
    }

    fn counter_cells(&self) -> [String; 6] {
        let c = &self.counters;
        [
            c.kernels_launched.to_string(),
            format!("{}", c.pe_busy_fraction),
            format!("{}", c.sm_utilization),
            c.transfers_inter_node.to_string(),
            c.transfers_intra_process.to_string(),
            c.transfers_ipc.to_string(),
        ]
    }
}

/// Render records as CSV (UTF-8, `\n` line endings, header row).
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    if records.is_empty() {
        return out;
    }
    let mut header = vec!["run_id".to_string()];
    header.extend(records[0].config.iter().map(|(k, _)| k.clone()));
    header.extend(MEASUREMENT_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(COUNTER_COLUMNS.iter().map(|s| s.to_string()));
    out.push_str(&header.join(","));
    out.push('\n');
    for r in records {
        let mut row = vec![r.run_id.clone()];
        row.extend(r.config.iter().map(|(_, v)| v.clone()));
        row.extend(r.measurement_cells());
        row.extend(r.counter_cells());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Render records as a JSON array.
pub fn to_json(records: &[MetricsRecord]) -> String {
    let vals: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let config: serde_json::Map<String, serde_json::Value> = r
                .config
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            serde_json::json!({
                "run_id": r.run_id,
                "config": config,
                "measurements": r.measurements,
                "counters": r.counters,
            })
        })
        .collect();
    serde_json::to_string_pretty(&vals).expect("metrics serialize")
}

/// Event trace: tab-separated `time_us seq target action`.
pub fn trace_to_tsv(rows: &[TraceRow]) -> String {
    let mut out = String::from("time_us\tseq\ttarget\taction\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.time_us, r.seq, r.target, r.action
        ));
    }
    out
}

/// Transfer log: `transfer_id,path,bytes,send_us,staged_us,delivered_us`.
pub fn transfers_to_csv<T: TimeScalar>(transfers: &[Transfer<T>]) -> String {
    let mut out = String::from("transfer_id,path,bytes,send_us,staged_us,delivered_us\n");
    for t in transfers {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.id,
            t.path.as_str(),
            t.bytes,
            t.send_us.to_f64(),
            t.staged_us
                .map(|v| v.to_f64().to_string())
                .unwrap_or_default(),
            t.delivered_us
                .map(|v| v.to_f64().to_string())
                .unwrap_or_default(),
        ));
    }
    out
}
