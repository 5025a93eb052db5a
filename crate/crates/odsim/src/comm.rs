//! Communication-layer state: location-table routing, the per-process
//! staging-buffer ring and cross-process event pool used by intra-node IPC,
//! network links with FIFO bulk serialization, and transfer records.
//!
//! The protocol state machines themselves advance inside the world
//! dispatcher; this module owns their resources and bookkeeping.

use crate::device::{BufferId, DevEventId};
use crate::error::{SimError, SimResult};
use crate::runtime::{ChareRef, EntryMessage, NodeId, PeId, ProcId};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use std::collections::VecDeque;

/// Chare placement: resolved once at collection creation, read-only after.
#[derive(Clone, Copy, Debug)]
pub struct LocEntry {
    pub node: NodeId,
    pub process: ProcId,
    pub pe: PeId,
}

#[derive(Default)]
pub struct LocationTable {
    per_collection: Vec<Vec<LocEntry>>,
}

impl LocationTable {
    pub fn register_collection(&mut self, entries: Vec<LocEntry>) -> u32 {
        self.per_collection.push(entries);
        (self.per_collection.len() - 1) as u32
    }

    pub fn lookup(&self, chare: ChareRef) -> SimResult<LocEntry> {
        self.per_collection
            .get(chare.collection as usize)
            .and_then(|c| c.get(chare.index as usize))
            .copied()
            .ok_or_else(|| SimError::Routing(format!("no location table entry for {chare}")))
    }
}

/// The three transport paths for device-payload messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    IntraProcess,
    IntraNodeIpc,
    InterNode,
}

impl Path {
    pub fn as_str(&self) -> &'static str {
        match self {
            Path::IntraProcess => "intra_process",
            Path::IntraNodeIpc => "intra_node_ipc",
            Path::InterNode => "inter_node",
        }
    }
}

/// Placement predicate: same process, same node, or across nodes.
pub fn select_transport(src: &LocEntry, dst: &LocEntry) -> Path {
    if src.process == dst.process {
        Path::IntraProcess
    } else if src.node == dst.node {
        Path::IntraNodeIpc
    } else {
        Path::InterNode
    }
}

/// First-fit extent allocator over the pre-allocated staging buffer of one
/// process. Offsets are byte offsets into the staging device buffer.
pub struct CommRing {
    pub capacity: u64,
    pub staging_buf: BufferId,
    free: Vec<(u64, u64)>, // (offset, bytes), sorted by offset, coalesced
    pub audit: Vec<RingAudit>,
}

#[derive(Clone, Copy, Debug)]
pub struct RingAudit {
    pub alloc: bool,
    pub offset: u64,
    pub bytes: u64,
}

impl CommRing {
    pub fn new(capacity: u64, staging_buf: BufferId) -> Self {
        CommRing {
            capacity,
            staging_buf,
            free: vec![(0, capacity)],
            audit: Vec::new(),
        }
    }

    pub fn alloc(&mut self, bytes: u64) -> Option<u64> {
        debug_assert!(bytes > 0);
        let pos = self.free.iter().position(|&(_, len)| len >= bytes)?;
        let (off, len) = self.free[pos];
        if len == bytes {
            self.free.remove(pos);
        } else {
            self.free[pos] = (off + bytes, len - bytes);
        }
        self.audit.push(RingAudit {
            alloc: true,
            offset: off,
            bytes,
        });
        Some(off)
    }

    pub fn release(&mut self, offset: u64, bytes: u64) {
        self.audit.push(RingAudit {
            alloc: false,
            offset,
            bytes,
        });
        let pos = self.free.partition_point(|&(o, _)| o < offset);
        self.free.insert(pos, (offset, bytes));
        // coalesce with neighbors
        if pos + 1 < self.free.len() && self.free[pos].0 + self.free[pos].1 == self.free[pos + 1].0
        {
            let (o, l) = self.free[pos];
            let (_, l2) = self.free.remove(pos + 1);
            self.free[pos] = (o, l + l2);
        }
        if pos > 0 && self.free[pos - 1].0 + self.free[pos - 1].1 == self.free[pos].0 {
            let (_, l) = self.free.remove(pos);
            self.free[pos - 1].1 += l;
        }
    }
}

/// Pool of cross-process synchronization events, one per process. Slots are
/// recycled only after the destination-side waiter consumed them.
pub struct IpcEventPool {
    pub slots: Vec<DevEventId>,
    free: VecDeque<u32>,
}

impl IpcEventPool {
    pub fn new(slots: Vec<DevEventId>) -> Self {
        let free = (0..slots.len() as u32).collect();
        IpcEventPool { slots, free }
    }

    pub fn acquire(&mut self) -> Option<u32> {
        self.free.pop_front()
    }

    pub fn release(&mut self, slot: u32) {
        debug_assert!(!self.free.contains(&slot));
        self.free.push_back(slot);
    }
}

/// One bulk transfer at a time per unordered node pair; control messages
/// bypass the bulk queue and only pay the latency.
pub struct Link<T> {
    pub bandwidth_gbps: T,
    pub latency_us: T,
    pub busy_until: SimTime<T>,
}

impl<T: TimeScalar> Link<T> {
    pub fn bulk_duration(&self, bytes: u64) -> T {
        T::from_count(bytes) / (self.bandwidth_gbps * T::from_count(1000))
    }
}

/// Lifecycle timestamps and routing facts of one device-payload message.
pub struct Transfer<T> {
    pub id: usize,
    pub src: ChareRef,
    pub dst: ChareRef,
    pub src_loc: LocEntry,
    pub dst_loc: LocEntry,
    pub path: Path,
    pub bytes: u64,
    pub send_us: SimTime<T>,
    pub staged_us: Option<SimTime<T>>,
    pub delivered_us: Option<SimTime<T>>,
    /// IPC resources held while staging: (ring offset, bytes, pool slot).
    pub ipc: Option<IpcHold>,
    pub chunks: u32,
    /// The entry message, parked until the payload lands.
    pub pending_msg: Option<EntryMessage<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct IpcHold {
    pub offset: u64,
    pub bytes: u64,
    pub slot: u32,
    pub generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommConfig<T> {
    pub bandwidth_gbps: T,
    pub latency_us: T,
    pub registration_cost_us: T,
    pub chunk_size_bytes: u64,
    pub ring_capacity_bytes: u64,
    pub ipc_event_pool_size: u32,
}

impl<T: TimeScalar> CommConfig<T> {
    pub fn defaults() -> Self {
        let p = |s: &str| T::parse_decimal(s).unwrap();
        CommConfig {
            bandwidth_gbps: p("21"),
            latency_us: p("2"),
            registration_cost_us: p("10"),
            chunk_size_bytes: 512 * 1024,
            ring_capacity_bytes: 64 * 1024 * 1024,
            ipc_event_pool_size: 128,
        }
    }

    pub fn validate(&self) -> SimResult<()> {
        if self.bandwidth_gbps <= T::zero() {
            return Err(SimError::Config(
                "network.bandwidth_gbps must be > 0".into(),
            ));
        }
        if self.latency_us < T::zero() || self.registration_cost_us < T::zero() {
            return Err(SimError::Config("network latencies must be >= 0".into()));
        }
        if self.chunk_size_bytes == 0 {
            return Err(SimError::Config(
                "network.chunk_size_bytes must be > 0".into(),
            ));
        }
        if self.ring_capacity_bytes == 0 || !self.ring_capacity_bytes.is_multiple_of(8) {
            return Err(SimError::Config(
                "network.ring_capacity_bytes must be a positive multiple of 8".into(),
            ));
        }
        if self.ipc_event_pool_size == 0 {
            return Err(SimError::Config(
                "network.ipc_event_pool_size must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// All communication state of a run.
pub struct Comm<T> {
    pub cfg: CommConfig<T>,
    pub table: LocationTable,
    pub rings: Vec<CommRing>,
    pub pools: Vec<IpcEventPool>,
    /// Transfers waiting for staging resources, FIFO per source process.
    pub pending_ipc: Vec<VecDeque<usize>>,
    /// The in-flight registered send per process, if any.
    pub reg_busy: Vec<Option<usize>>,
    /// Sends waiting for the registration slot, FIFO per source process.
    pub pending_reg: Vec<VecDeque<usize>>,
    links: Vec<Link<T>>,
    nodes: u32,
    pub transfers: Vec<Transfer<T>>,
    pub pool_audit: Vec<(u32, u32, bool)>, // (process, slot, acquired)
}

impl<T: TimeScalar> Comm<T> {
    pub fn new(cfg: CommConfig<T>, nodes: u32, processes: u32) -> SimResult<Self> {
        cfg.validate()?;
        let mut links = Vec::new();
        for _ in 0..(nodes as usize * nodes as usize) {
            links.push(Link {
                bandwidth_gbps: cfg.bandwidth_gbps,
                latency_us: cfg.latency_us,
                busy_until: SimTime::zero(),
            });
        }
        Ok(Comm {
            cfg,
            table: LocationTable::default(),
            rings: Vec::with_capacity(processes as usize),
            pools: Vec::with_capacity(processes as usize),
            pending_ipc: (0..processes).map(|_| VecDeque::new()).collect(),
            reg_busy: vec![None; processes as usize],
            pending_reg: (0..processes).map(|_| VecDeque::new()).collect(),
            links,
            nodes,
            transfers: Vec::new(),
            pool_audit: Vec::new(),
        })
    }

    pub fn link_mut(&mut self, a: NodeId, b: NodeId) -> &mut Link<T> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        &mut self.links[(lo * self.nodes + hi) as usize]
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> &Link<T> {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        &self.links[(lo * self.nodes + hi) as usize]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_transfer(
        &mut self,
        src: ChareRef,
        dst: ChareRef,
        src_loc: LocEntry,
        dst_loc: LocEntry,
        path: Path,
        bytes: u64,
        send_us: SimTime<T>,
    ) -> usize {
        let id = self.transfers.len();
        let chunks = if path == Path::InterNode {
            bytes.div_ceil(self.cfg.chunk_size_bytes).max(1) as u32
        } else {
            1
        };
        self.transfers.push(Transfer {
            id,
            src,
            dst,
            src_loc,
            dst_loc,
            path,
            bytes,
            send_us,
            staged_us: None,
            delivered_us: None,
            ipc: None,
            chunks,
            pending_msg: None,
        });
        id
    }

    /// Try to reserve staging resources (ring extent + event slot) for an
    /// IPC transfer. Both or neither are taken.
    pub fn try_reserve_ipc(&mut self, transfer: usize) -> bool {
        let proc = self.transfers[transfer].src_loc.process as usize;
        let bytes = self.transfers[transfer].bytes;
        if self.pools[proc].free_count() == 0 {
            return false;
        }
        let Some(offset) = self.rings[proc].alloc(bytes) else {
            return false;
        };
        let slot = self.pools[proc].acquire().expect("checked free count");
        self.pool_audit.push((proc as u32, slot, true));
        self.transfers[transfer].ipc = Some(IpcHold {
            offset,
            bytes,
            slot,
            generation: 0, // filled in by the caller with the device generation
        });
        true
    }

    /// Release staging resources after the destination copy completed.
    pub fn release_ipc(&mut self, transfer: usize) -> IpcHold {
        let proc = self.transfers[transfer].src_loc.process as usize;
        let hold = self.transfers[transfer]
            .ipc
            .take()
            .expect("ipc hold present");
        self.rings[proc].release(hold.offset, hold.bytes);
        self.pools[proc].release(hold.slot);
        self.pool_audit.push((proc as u32, hold.slot, false));
        hold
    }

    pub fn counters(&self) -> (u64, u64, u64) {
        let mut c = (0, 0, 0);
        for t in &self.transfers {
            match t.path {
                Path::IntraProcess => c.0 += 1,
                Path::IntraNodeIpc => c.1 += 1,
                Path::InterNode => c.2 += 1,
            }
        }
        c
    }
}

impl IpcEventPool {
    pub fn free_count(&self) -> usize {
        self.free.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(node: u32, process: u32, pe: u32) -> LocEntry {
        LocEntry { node, process, pe }
    }

    #[test]
    fn transport_selection_follows_placement() {
        assert_eq!(
            select_transport(&loc(0, 0, 0), &loc(0, 0, 1)),
            Path::IntraProcess
        );
        assert_eq!(
            select_transport(&loc(0, 0, 0), &loc(0, 1, 2)),
            Path::IntraNodeIpc
        );
        assert_eq!(
            select_transport(&loc(0, 0, 0), &loc(1, 2, 4)),
            Path::InterNode
        );
    }

    #[test]
    fn missing_table_entry_is_routing_error() {
        let table = LocationTable::default();
        assert!(matches!(
            table.lookup(ChareRef {
                collection: 0,
                index: 0
            }),
            Err(SimError::Routing(_))
        ));
    }

    #[test]
    fn ring_first_fit_allocates_and_coalesces() {
        let mut ring = CommRing::new(100, 0);
        let a = ring.alloc(40).unwrap();
        let b = ring.alloc(40).unwrap();
        assert_eq!((a, b), (0, 40));
        assert!(ring.alloc(40).is_none());
        ring.release(a, 40);
        // freed head, next fit lands back at 0
        assert_eq!(ring.alloc(30).unwrap(), 0);
        ring.release(b, 40);
        ring.release(0, 30);
        // fully coalesced again
        assert_eq!(ring.alloc(100).unwrap(), 0);
    }

    #[test]
    fn pool_slots_recycle_fifo() {
        let mut pool = IpcEventPool::new(vec![0, 1, 2]);
        assert_eq!(pool.acquire(), Some(0));
        assert_eq!(pool.acquire(), Some(1));
        pool.release(0);
        assert_eq!(pool.acquire(), Some(2));
        assert_eq!(pool.acquire(), Some(0));
        assert_eq!(pool.acquire(), None);
    }

    #[test]
    fn link_bulk_duration_is_exact() {
        use num_rational::Ratio;
        let link = Link::<Ratio<i128>> {
            bandwidth_gbps: Ratio::from_count(21),
            latency_us: Ratio::from_count(2),
            busy_until: SimTime::zero(),
        };
        // 4 MiB at 21 GB/s: 4194304 / 21000 us
        assert_eq!(
            link.bulk_duration(4 * 1024 * 1024),
            Ratio::new(4_194_304, 21_000)
        );
    }
}
