//! Run configuration: a sectioned key/value text format plus `--set`
//! overrides, resolved against defaults with unknown keys rejected.
//!
//! Numeric cost parameters parse through the scalar type, so in the exact
//! instantiation a value like `0.5` becomes the rational 1/2 rather than a
//! binary approximation.

use crate::comm::CommConfig;
use crate::device::{DeviceCostModel, SharingPolicy};
use crate::error::{SimError, SimResult};
use crate::runtime::Topology;
use crate::scalar::TimeScalar;
use crate::world::RuntimeConfig;

/// Application selection and parameters. All apps share one namespace; each
/// app reads the keys it cares about and ignores the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct AppConfig {
    pub name: String,
    pub odf: u64,
    pub grid_x: u64,
    pub grid_y: u64,
    pub iterations: u64,
    pub total_work_items: u64,
    pub window_us: u64,
    pub chares_per_pe: u64,
    pub total_bytes: u64,
    pub with_compute: bool,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            name: "jacobi2d".into(),
            odf: 8,
            grid_x: 4096,
            grid_y: 4096,
            iterations: 100,
            total_work_items: 2048,
            window_us: 100_000,
            chares_per_pe: 1,
            total_bytes: 64 * 1024 * 1024,
            with_compute: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceConfig<T> {
    pub cost: DeviceCostModel<T>,
    pub sm_capacity: u32,
    pub sharing_policy: SharingPolicy,
}

impl<T: TimeScalar> Default for DeviceConfig<T> {
    fn default() -> Self {
        DeviceConfig {
            cost: DeviceCostModel::defaults(),
            sm_capacity: 84,
            sharing_policy: SharingPolicy::Concurrent,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub out: Option<String>,
    pub json: bool,
    pub trace: bool,
}

/// Fully resolved configuration of one invocation (possibly a sweep).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig<T> {
    pub app: AppConfig,
    pub topology: Topology,
    pub device: DeviceConfig<T>,
    pub network: CommConfig<T>,
    pub runtime: RuntimeConfig<T>,
    pub sweep_odf: Vec<u64>,
    pub output: OutputConfig,
}

impl<T: TimeScalar> Default for RunConfig<T> {
    fn default() -> Self {
        RunConfig {
            app: AppConfig::default(),
            topology: Topology {
                nodes: 1,
                gpus_per_node: 1,
                processes_per_gpu: 1,
                pes_per_process: 1,
            },
            device: DeviceConfig::default(),
            network: CommConfig::defaults(),
            runtime: RuntimeConfig::defaults(),
            sweep_odf: Vec::new(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_u64(section: &str, key: &str, v: &str) -> SimResult<u64> {
    v.trim().parse().map_err(|_| {
        SimError::Config(format!(
            "{section}.{key}: expected an unsigned integer, got `{v}`"
        ))
    })
}

fn parse_u32(section: &str, key: &str, v: &str) -> SimResult<u32> {
    v.trim().parse().map_err(|_| {
        SimError::Config(format!(
            "{section}.{key}: expected an unsigned integer, got `{v}`"
        ))
    })
}

fn parse_bool(section: &str, key: &str, v: &str) -> SimResult<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(SimError::Config(format!(
            "{section}.{key}: expected true or false, got `{v}`"
        ))),
    }
}

fn parse_scalar<T: TimeScalar>(section: &str, key: &str, v: &str) -> SimResult<T> {
    T::parse_decimal(v).ok_or_else(|| {
        SimError::Config(format!(
            "{section}.{key}: expected a decimal number, got `{v}`"
        ))
    })
}

fn parse_u64_list(section: &str, key: &str, v: &str) -> SimResult<Vec<u64>> {
    let trimmed = v.trim().trim_start_matches('[').trim_end_matches(']');
    if trimmed.trim().is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| parse_u64(section, key, item))
        .collect()
}

impl<T: TimeScalar> RunConfig<T> {
    /// Parse a whole config file.
    pub fn parse(text: &str) -> SimResult<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    SimError::Config(format!(
                        "line {}: malformed section header `{raw}`",
                        lineno + 1
                    ))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SimError::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                ))
            })?;
            cfg.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `section.key=value` override.
    pub fn set(&mut self, dotted: &str, value: &str) -> SimResult<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| SimError::Config(format!("override `{dotted}` must be section.key")))?;
        let (s, k, v) = (section, key, value);
        match (s, k) {
            ("app", "name") => self.app.name = v.to_string(),
            ("app", "odf") => self.app.odf = parse_u64(s, k, v)?,
            ("app", "grid_x") => self.app.grid_x = parse_u64(s, k, v)?,
            ("app", "grid_y") => self.app.grid_y = parse_u64(s, k, v)?,
            ("app", "iterations") => self.app.iterations = parse_u64(s, k, v)?,
            ("app", "total_work_items") => self.app.total_work_items = parse_u64(s, k, v)?,
            ("app", "window_us") => self.app.window_us = parse_u64(s, k, v)?,
            ("app", "chares_per_pe") => self.app.chares_per_pe = parse_u64(s, k, v)?,
            ("app", "total_bytes") => self.app.total_bytes = parse_u64(s, k, v)?,
            ("app", "with_compute") => self.app.with_compute = parse_bool(s, k, v)?,
            ("topology", "nodes") => self.topology.nodes = parse_u32(s, k, v)?,
            ("topology", "gpus_per_node") => self.topology.gpus_per_node = parse_u32(s, k, v)?,
            ("topology", "processes_per_gpu") => {
                self.topology.processes_per_gpu = parse_u32(s, k, v)?
            }
            ("topology", "pes_per_process") => self.topology.pes_per_process = parse_u32(s, k, v)?,
            ("device", "launch_host_us") => {
                self.device.cost.launch_host_us = parse_scalar(s, k, v)?
            }
            ("device", "launch_device_us") => {
                self.device.cost.launch_device_us = parse_scalar(s, k, v)?
            }
            ("device", "d2d_bandwidth_gbps") => {
                self.device.cost.d2d_bandwidth_gbps = parse_scalar(s, k, v)?
            }
            ("device", "callback_latency_us") => {
                self.device.cost.callback_latency_us = parse_scalar(s, k, v)?
            }
            ("device", "kernel_throughput_items_per_us") => {
                self.device.cost.kernel_throughput_items_per_us = parse_scalar(s, k, v)?
            }
            ("device", "min_kernel_us") => self.device.cost.min_kernel_us = parse_scalar(s, k, v)?,
            ("device", "sm_capacity") => self.device.sm_capacity = parse_u32(s, k, v)?,
            ("device", "sharing_policy") => {
                self.device.sharing_policy = match v {
                    "concurrent" => SharingPolicy::Concurrent,
                    "time_sliced" => SharingPolicy::TimeSliced,
                    _ => {
                        return Err(SimError::Config(format!(
                            "device.sharing_policy: expected concurrent or time_sliced, got `{v}`"
                        )))
                    }
                }
            }
            ("network", "bandwidth_gbps") => self.network.bandwidth_gbps = parse_scalar(s, k, v)?,
            ("network", "latency_us") => self.network.latency_us = parse_scalar(s, k, v)?,
            ("network", "registration_cost_us") => {
                self.network.registration_cost_us = parse_scalar(s, k, v)?
            }
            ("network", "chunk_size_bytes") => self.network.chunk_size_bytes = parse_u64(s, k, v)?,
            ("network", "ring_capacity_bytes") => {
                self.network.ring_capacity_bytes = parse_u64(s, k, v)?
            }
            ("network", "ipc_event_pool_size") => {
                self.network.ipc_event_pool_size = parse_u32(s, k, v)?
            }
            ("runtime", "send_overhead_us") => {
                self.runtime.send_overhead_us = parse_scalar(s, k, v)?
            }
            ("runtime", "max_events") => self.runtime.max_events = parse_u64(s, k, v)?,
            ("sweep", "odf") => self.sweep_odf = parse_u64_list(s, k, v)?,
            ("output", "out") => self.output.out = Some(v.to_string()),
            ("output", "json") => self.output.json = parse_bool(s, k, v)?,
            ("output", "trace") => self.output.trace = parse_bool(s, k, v)?,
            _ => {
                return Err(SimError::Config(format!(
                    "unknown configuration key `{dotted}`"
                )))
            }
        }
        Ok(())
    }

    /// Serialize to the same sectioned format `parse` reads.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        for (section, entries) in self.sections() {
            s.push_str(&format!("[{section}]\n"));
            for (k, v) in entries {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        }
        s
    }

    fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let policy = match self.device.sharing_policy {
            SharingPolicy::Concurrent => "concurrent",
            SharingPolicy::TimeSliced => "time_sliced",
        };
        let mut out = vec![
            (
                "app",
                vec![
                    ("name", self.app.name.clone()),
                    ("odf", self.app.odf.to_string()),
                    ("grid_x", self.app.grid_x.to_string()),
                    ("grid_y", self.app.grid_y.to_string()),
                    ("iterations", self.app.iterations.to_string()),
                    ("total_work_items", self.app.total_work_items.to_string()),
                    ("window_us", self.app.window_us.to_string()),
                    ("chares_per_pe", self.app.chares_per_pe.to_string()),
                    ("total_bytes", self.app.total_bytes.to_string()),
                    ("with_compute", self.app.with_compute.to_string()),
                ],
            ),
            (
                "topology",
                vec![
                    ("nodes", self.topology.nodes.to_string()),
                    ("gpus_per_node", self.topology.gpus_per_node.to_string()),
                    (
                        "processes_per_gpu",
                        self.topology.processes_per_gpu.to_string(),
                    ),
                    ("pes_per_process", self.topology.pes_per_process.to_string()),
                ],
            ),
            (
                "device",
                vec![
                    (
                        "launch_host_us",
                        self.device.cost.launch_host_us.to_config_str(),
                    ),
                    (
                        "launch_device_us",
                        self.device.cost.launch_device_us.to_config_str(),
                    ),
                    (
                        "d2d_bandwidth_gbps",
                        self.device.cost.d2d_bandwidth_gbps.to_config_str(),
                    ),
                    (
                        "callback_latency_us",
                        self.device.cost.callback_latency_us.to_config_str(),
                    ),
                    (
                        "kernel_throughput_items_per_us",
                        self.device
                            .cost
                            .kernel_throughput_items_per_us
                            .to_config_str(),
                    ),
                    (
                        "min_kernel_us",
                        self.device.cost.min_kernel_us.to_config_str(),
                    ),
                    ("sm_capacity", self.device.sm_capacity.to_string()),
                    ("sharing_policy", policy.to_string()),
                ],
            ),
            (
                "network",
                vec![
                    (
                        "bandwidth_gbps",
                        self.network.bandwidth_gbps.to_config_str(),
                    ),
                    ("latency_us", self.network.latency_us.to_config_str()),
                    (
                        "registration_cost_us",
                        self.network.registration_cost_us.to_config_str(),
                    ),
                    (
                        "chunk_size_bytes",
                        self.network.chunk_size_bytes.to_string(),
                    ),
                    (
                        "ring_capacity_bytes",
                        self.network.ring_capacity_bytes.to_string(),
                    ),
                    (
                        "ipc_event_pool_size",
                        self.network.ipc_event_pool_size.to_string(),
                    ),
                ],
            ),
            (
                "runtime",
                vec![
                    (
                        "send_overhead_us",
                        self.runtime.send_overhead_us.to_config_str(),
                    ),
                    ("max_events", self.runtime.max_events.to_string()),
                ],
            ),
        ];
        if !self.sweep_odf.is_empty() {
            let list = self
                .sweep_odf
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            out.push(("sweep", vec![("odf", list)]));
        }
        let mut output = Vec::new();
        if let Some(path) = &self.output.out {
            output.push(("out", path.clone()));
        }
        if self.output.json {
            output.push(("json", "true".into()));
        }
        if self.output.trace {
            output.push(("trace", "true".into()));
        }
        if !output.is_empty() {
            out.push(("output", output));
        }
        out
    }

    /// Per-run echo of the effective configuration, sorted by key. Sweep and
    /// output plumbing are not part of a single run's identity.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = self
            .sections()
            .iter()
            .filter(|(name, _)| *name != "sweep" && *name != "output")
            .flat_map(|(name, entries)| {
                entries
                    .iter()
                    .map(move |(k, v)| (format!("{name}.{k}"), v.clone()))
            })
            .collect();
        rows.sort();
        rows
    }

    /// The sweep points of this config: the sweep list, or the single
    /// configured ODF.
    pub fn sweep_points(&self) -> Vec<u64> {
        if self.sweep_odf.is_empty() {
            vec![self.app.odf]
        } else {
            self.sweep_odf.clone()
        }
    }

    pub fn with_odf(&self, odf: u64) -> Self {
        let mut c = self.clone();
        c.app.odf = odf;
        c.sweep_odf = Vec::new();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Micros;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg: RunConfig<Micros> = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg: RunConfig<Micros> =
            RunConfig::parse("[network]\nbandwidth_gbps = 21\n").unwrap();
        cfg.set("network.bandwidth_gbps", "10").unwrap();
        assert_eq!(cfg.network.bandwidth_gbps, Micros::from_count(10));
    }

    #[test]
    fn sweep_list_parses_and_counts() {
        let cfg: RunConfig<Micros> = RunConfig::parse("[sweep]\nodf = [1, 2, 4]\n").unwrap();
        assert_eq!(cfg.sweep_points(), vec![1, 2, 4]);
        let single: RunConfig<Micros> = RunConfig::parse("[app]\nodf = 16\n").unwrap();
        assert_eq!(single.sweep_points(), vec![16]);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::<Micros>::parse("[app]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("app.bogus"), "{err}");
        let err = RunConfig::<Micros>::parse("[nosuch]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nosuch.x"), "{err}");
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = RunConfig::<Micros>::parse("[topology]\nnodes = many\n").unwrap_err();
        assert!(err.to_string().contains("topology.nodes"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg: RunConfig<Micros> =
            RunConfig::parse("# header\n\n[app]\nname = overlap # trailing\n").unwrap();
        assert_eq!(cfg.app.name, "overlap");
    }

    #[test]
    fn round_trip_through_text() {
        let mut cfg: RunConfig<Micros> = RunConfig::default();
        cfg.set("app.name", "pipeline").unwrap();
        cfg.set("device.launch_host_us", "2.5").unwrap();
        cfg.set("sweep.odf", "1,8,64").unwrap();
        cfg.set("output.trace", "true").unwrap();
        let text = cfg.to_config_text();
        let back: RunConfig<Micros> = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
