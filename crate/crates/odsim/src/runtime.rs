//! Execution hierarchy and chare scheduling: topology construction, chare
//! collections with configurable overdecomposition, asynchronous entry
//! messages, and per-PE FIFO schedulers.
//!
//! Identifiers are assigned row-major over (node, gpu, process, pe), so the
//! layout of any configuration is reproducible from the four counts alone.

use crate::error::{SimError, SimResult};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use std::collections::VecDeque;

pub type PeId = u32;
pub type ProcId = u32;
pub type NodeId = u32;
pub type MethodId = u16;

/// Node / GPU / process / PE counts of the modeled machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub processes_per_gpu: u32,
    pub pes_per_process: u32,
}

impl Topology {
    pub fn new(
        nodes: u32,
        gpus_per_node: u32,
        processes_per_gpu: u32,
        pes_per_process: u32,
    ) -> SimResult<Self> {
        let t = Topology {
            nodes,
            gpus_per_node,
            processes_per_gpu,
            pes_per_process,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> SimResult<()> {
        for (name, v) in [
            ("nodes", self.nodes),
            ("gpus_per_node", self.gpus_per_node),
            ("processes_per_gpu", self.processes_per_gpu),
            ("pes_per_process", self.pes_per_process),
        ] {
            if v == 0 {
                return Err(SimError::Config(format!("topology.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn n_gpus(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn n_processes(&self) -> u32 {
        self.n_gpus() * self.processes_per_gpu
    }

    pub fn n_pes(&self) -> u32 {
        self.n_processes() * self.pes_per_process
    }

    pub fn pe_process(&self, pe: PeId) -> ProcId {
        pe / self.pes_per_process
    }

    pub fn process_gpu(&self, proc: ProcId) -> u32 {
        proc / self.processes_per_gpu
    }

    pub fn gpu_node(&self, gpu: u32) -> NodeId {
        gpu / self.gpus_per_node
    }

    pub fn pe_gpu(&self, pe: PeId) -> u32 {
        self.process_gpu(self.pe_process(pe))
    }

    pub fn pe_node(&self, pe: PeId) -> NodeId {
        self.gpu_node(self.pe_gpu(pe))
    }

    pub fn process_pes(&self, proc: ProcId) -> std::ops::Range<u32> {
        let first = proc * self.pes_per_process;
        first..first + self.pes_per_process
    }
}

/// Reference to one chare: collection id plus linear index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChareRef {
    pub collection: u32,
    pub index: u32,
}

impl std::fmt::Display for ChareRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}[{}]", self.collection, self.index)
    }
}

/// Mapping rule from chare indices to PEs.
pub enum Mapping {
    /// Contiguous near-square 2-D blocks per PE (see [`block_map`]).
    Block,
    /// Explicit placement, one PE per linear index.
    Custom(Vec<PeId>),
}

/// A chare collection: index space, overdecomposition factor, placement and
/// the per-chare device stream.
pub struct Collection {
    pub name: String,
    pub dims: (u32, u32),
    pub odf: u32,
    pub home: Vec<PeId>,
    pub streams: Vec<u32>,
}

impl Collection {
    pub fn len(&self) -> usize {
        self.home.len()
    }

    pub fn is_empty(&self) -> bool {
        self.home.is_empty()
    }

    pub fn linear(&self, i: u32, j: u32) -> u32 {
        i * self.dims.1 + j
    }

    pub fn coords(&self, index: u32) -> (u32, u32) {
        (index / self.dims.1, index % self.dims.1)
    }
}

/// Pick the PE grid (px, py) for a block decomposition: a divisor pair of
/// `n_pes` whose blocks match the chare grid aspect as closely as possible.
pub fn choose_pe_grid(dims: (u32, u32), n_pes: u32) -> (u32, u32) {
    let (cx, cy) = (dims.0 as u64, dims.1 as u64);
    let mut best = (1, n_pes);
    let mut best_score = u64::MAX;
    for px in 1..=n_pes {
        if !n_pes.is_multiple_of(px) {
            continue;
        }
        let py = n_pes / px;
        // balanced blocks: cx/px close to cy/py, compared cross-multiplied
        let score = (cx * py as u64).abs_diff(cy * px as u64);
        if score < best_score {
            best_score = score;
            best = (px, py);
        }
    }
    best
}

/// Contiguous near-square block mapping of a 2-D index space onto PEs,
/// row-major over the PE grid; uneven extents spread their remainder over
/// adjacent blocks.
pub fn block_map(dims: (u32, u32), index: (u32, u32), n_pes: u32) -> PeId {
    let (px, py) = choose_pe_grid(dims, n_pes);
    let bi = (index.0 as u64 * px as u64) / dims.0.max(1) as u64;
    let bj = (index.1 as u64 * py as u64) / dims.1.max(1) as u64;
    (bi * py as u64 + bj) as PeId
}

/// Destination-addressed device payload: source and destination buffer
/// ranges plus the byte count in flight.
#[derive(Clone, Copy, Debug)]
pub struct DevPayload {
    pub src_buf: usize,
    pub src_off: usize,
    pub dst_buf: usize,
    pub dst_off: usize,
    pub bytes: usize,
}

/// Asynchronous entry-method invocation.
#[derive(Debug)]
pub struct EntryMessage<T> {
    pub src: ChareRef,
    pub dest: ChareRef,
    pub method: MethodId,
    pub args: Vec<u64>,
    pub payload: Option<DevPayload>,
    pub send_time: SimTime<T>,
    /// Transfer record index when the message moved device bytes.
    pub transfer: Option<usize>,
    /// Whether the message went through routing (vs. an app-internal seed
    /// or callback continuation).
    pub routed: bool,
}

/// Work items queued at a PE: application messages plus protocol
/// continuations of the communication layer.
#[derive(Debug)]
pub enum PeTask<T> {
    Entry(EntryMessage<T>),
    /// IPC receiver side: enqueue the wait + staging copy-out.
    IpcControl {
        transfer: usize,
    },
    /// IPC sender side: staging resources granted, run the copy-in.
    IpcGrant {
        transfer: usize,
    },
    /// Rendezvous sender side: registration slot granted.
    RegGrant {
        transfer: usize,
    },
    /// Rendezvous receiver side: control message arrived, issue the get.
    NetControl {
        transfer: usize,
    },
    /// Rendezvous sender side: completion ack, release registration.
    NetAck {
        transfer: usize,
    },
}

impl<T> PeTask<T> {
    pub fn label(&self) -> String {
        match self {
            PeTask::Entry(m) => format!("entry(m{} {}->{})", m.method, m.src, m.dest),
            PeTask::IpcControl { transfer } => format!("ipc_control(t{transfer})"),
            PeTask::IpcGrant { transfer } => format!("ipc_grant(t{transfer})"),
            PeTask::RegGrant { transfer } => format!("reg_grant(t{transfer})"),
            PeTask::NetControl { transfer } => format!("net_control(t{transfer})"),
            PeTask::NetAck { transfer } => format!("net_ack(t{transfer})"),
        }
    }
}

/// A worker with a FIFO user-space scheduler. Tasks run one at a time; the
/// busy interval of each handler is charged before the next task starts.
pub struct Pe<T> {
    pub id: PeId,
    pub process: ProcId,
    pub queue: VecDeque<PeTask<T>>,
    pub busy_until: SimTime<T>,
    pub wake_pending: bool,
    pub busy_time: T,
}

impl<T: TimeScalar> Pe<T> {
    pub fn new(id: PeId, process: ProcId) -> Self {
        Pe {
            id,
            process,
            queue: VecDeque::new(),
            busy_until: SimTime::zero(),
            wake_pending: false,
            busy_time: T::zero(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_topology_has_one_pe() {
        let t = Topology::new(1, 1, 1, 1).unwrap();
        assert_eq!(t.n_pes(), 1);
        assert_eq!(t.pe_process(0), 0);
        assert_eq!(t.pe_gpu(0), 0);
        assert_eq!(t.pe_node(0), 0);
    }

    #[test]
    fn row_major_identifier_arithmetic() {
        // (1 node, 2 gpus, 2 procs/gpu, 2 pes/proc): PE5 is in proc2 on gpu1.
        let t = Topology::new(1, 2, 2, 2).unwrap();
        assert_eq!(t.n_pes(), 8);
        assert_eq!(t.pe_process(5), 2);
        assert_eq!(t.process_gpu(2), 1);
        assert_eq!(t.pe_node(5), 0);
    }

    #[test]
    fn counts_multiply_through_the_hierarchy() {
        let t = Topology::new(2, 4, 1, 4).unwrap();
        assert_eq!(t.n_pes(), 32);
        assert_eq!(t.n_gpus(), 8);
        assert_eq!(t.n_processes(), 8);
        assert_eq!(t.pe_node(31), 1);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(Topology::new(0, 1, 1, 1).is_err());
        assert!(Topology::new(1, 1, 0, 1).is_err());
    }

    #[test]
    fn block_map_bijection_on_matching_grid() {
        // 2x2 chares on 4 PEs: chare (i, j) -> PE 2i + j.
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(block_map((2, 2), (i, j), 4), 2 * i + j);
            }
        }
    }

    #[test]
    fn block_map_assigns_square_blocks() {
        // 4x4 chares on 4 PEs: each PE owns a 2x2 block.
        let mut per_pe = vec![Vec::new(); 4];
        for i in 0..4 {
            for j in 0..4 {
                per_pe[block_map((4, 4), (i, j), 4) as usize].push((i, j));
            }
        }
        assert_eq!(per_pe[0], vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(per_pe[3], vec![(2, 2), (2, 3), (3, 2), (3, 3)]);
    }

    #[test]
    fn block_map_single_chare() {
        assert_eq!(block_map((1, 1), (0, 0), 1), 0);
    }

    #[test]
    fn one_dimensional_spaces_split_linearly() {
        assert_eq!(choose_pe_grid((8, 1), 4), (4, 1));
        assert_eq!(block_map((8, 1), (5, 0), 4), 2);
    }
}
