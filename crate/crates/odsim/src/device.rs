//! The modeled GPU: streams with FIFO op queues, a split launch-cost
//! pipeline, occupancy-gated concurrent kernels, recordable/waitable events,
//! host-flag stream waits, and completion callbacks.
//!
//! Timing model per stream op:
//!   * the issuing PE pays `launch_host_us` for each kernel/copy enqueue, and
//!     the op becomes visible to its stream when that host work ends;
//!   * a kernel additionally needs `launch_device_us` of dispatch after the
//!     op ahead of it has started (so dispatch overlaps the predecessor's
//!     execution), then competes for SM capacity;
//!   * kernels run `max(min_kernel_us, work_items / throughput)` (zero-work
//!     kernels cost nothing); copies run `bytes / (bandwidth_gbps * 1000)`;
//!   * blocked kernels are admitted in `(eligibility time, seq)` order, under
//!     `Concurrent` whenever they fit, under `TimeSliced` only while the
//!     device is owned by their process (or idle).
//!
//! All state mutates only from inside the event loop; the subsystem emits
//! follow-up steps through a caller-provided sink instead of scheduling
//! directly, which keeps it independently testable.

use crate::error::{SimError, SimResult};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use std::collections::{BTreeSet, VecDeque};

pub type DeviceId = u32;
pub type StreamId = u32;
pub type DevEventId = u32;
pub type FlagId = u32;
pub type BufferId = usize;

/// Calibration parameters of the modeled device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceCostModel<T> {
    /// PE-side busy time per kernel/copy enqueue.
    pub launch_host_us: T,
    /// Device-side dispatch latency per kernel.
    pub launch_device_us: T,
    /// Device-internal copy bandwidth.
    pub d2d_bandwidth_gbps: T,
    /// Delay from op completion to callback arrival at the PE queue.
    pub callback_latency_us: T,
    /// Work items retired per microsecond at full occupancy.
    pub kernel_throughput_items_per_us: T,
    /// Floor on any nonzero kernel's duration.
    pub min_kernel_us: T,
}

impl<T: TimeScalar> DeviceCostModel<T> {
    pub fn defaults() -> Self {
        let p = |s: &str| T::parse_decimal(s).unwrap();
        DeviceCostModel {
            launch_host_us: p("5"),
            launch_device_us: p("5"),
            d2d_bandwidth_gbps: p("300"),
            callback_latency_us: p("2"),
            kernel_throughput_items_per_us: p("100"),
            min_kernel_us: p("1"),
        }
    }

    pub fn zero_cost() -> Self {
        DeviceCostModel {
            launch_host_us: T::zero(),
            launch_device_us: T::zero(),
            d2d_bandwidth_gbps: T::one(),
            callback_latency_us: T::zero(),
            kernel_throughput_items_per_us: T::one(),
            min_kernel_us: T::zero(),
        }
    }

    pub fn validate(&self) -> SimResult<()> {
        let nonneg = [
            ("launch_host_us", self.launch_host_us),
            ("launch_device_us", self.launch_device_us),
            ("callback_latency_us", self.callback_latency_us),
            ("min_kernel_us", self.min_kernel_us),
        ];
        for (name, v) in nonneg {
            if v < T::zero() {
                return Err(SimError::Config(format!("device.{name} must be >= 0")));
            }
        }
        if self.d2d_bandwidth_gbps <= T::zero() {
            return Err(SimError::Config(
                "device.d2d_bandwidth_gbps must be > 0".into(),
            ));
        }
        if self.kernel_throughput_items_per_us <= T::zero() {
            return Err(SimError::Config(
                "device.kernel_throughput_items_per_us must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// How kernels from different processes share one device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SharingPolicy {
    /// MPS-like: kernels co-run subject to SM capacity.
    Concurrent,
    /// No MPS: the device runs one process context at a time.
    TimeSliced,
}

/// Per-op application effect, run against buffer contents at completion.
pub type KernelEffect = Box<dyn FnOnce(&mut BufferPool)>;

/// Contiguous byte range inside a device buffer.
#[derive(Clone, Copy, Debug)]
pub struct BufRange {
    pub buf: BufferId,
    pub offset: usize,
    pub bytes: usize,
}

/// Stream operation kinds.
pub enum OpKind<M> {
    Kernel {
        work_items: u64,
        sm_request: u32,
        effect: Option<KernelEffect>,
    },
    CopyD2D {
        src: BufRange,
        dst: BufRange,
    },
    RecordEvent {
        event: DevEventId,
    },
    WaitEvent {
        event: DevEventId,
        generation: u64,
    },
    WaitHostFlag {
        flag: FlagId,
    },
    HostCallback {
        pe: u32,
        meta: Option<M>,
    },
}

impl<M> OpKind<M> {
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Kernel { .. } => "kernel",
            OpKind::CopyD2D { .. } => "copy",
            OpKind::RecordEvent { .. } => "record_event",
            OpKind::WaitEvent { .. } => "wait_event",
            OpKind::WaitHostFlag { .. } => "wait_flag",
            OpKind::HostCallback { .. } => "callback",
        }
    }

    fn charges_host(&self) -> bool {
        matches!(self, OpKind::Kernel { .. } | OpKind::CopyD2D { .. })
    }
}

struct OpEntry<T, M> {
    seq: u64,
    kind: OpKind<M>,
    meta: Option<M>,
    enqueue_time: SimTime<T>,
    ready_at: SimTime<T>,
    dispatch_scheduled: bool,
    eligible_at: Option<SimTime<T>>,
    queued_for_admission: bool,
    started_at: Option<SimTime<T>>,
}

struct Stream<T, M> {
    device: DeviceId,
    process: u32,
    queue: VecDeque<OpEntry<T, M>>,
    running: bool,
    /// Registered as a waiter on an event or flag.
    parked: bool,
}

struct DeviceState<T> {
    sm_capacity: u32,
    policy: SharingPolicy,
    sm_in_use: u32,
    resident: u32,
    owner: Option<u32>,
    // kernels ready for SM allocation, keyed (eligibility time, op seq)
    eligible: BTreeSet<(SimTime<T>, u64, StreamId)>,
    busy_integral: f64,
    last_change: SimTime<T>,
}

struct EventSlot<T> {
    generation: u64,
    recorded: Option<SimTime<T>>,
    waiters: Vec<StreamId>,
}

struct FlagSlot {
    set: bool,
    waiters: Vec<StreamId>,
}

/// Completed-op log row; the base record for metrics and invariant checks.
#[derive(Clone, Debug)]
pub struct OpRecord<T> {
    pub stream: StreamId,
    pub device: DeviceId,
    pub process: u32,
    pub kind: &'static str,
    pub seq: u64,
    pub sm_request: u32,
    pub enqueue_us: SimTime<T>,
    pub ready_us: SimTime<T>,
    pub start_us: SimTime<T>,
    pub end_us: SimTime<T>,
}

/// Internal progression steps, scheduled as engine events by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DevStep {
    /// Re-evaluate a stream head.
    Advance { stream: StreamId },
    /// A kernel's dispatch latency elapsed.
    Dispatched { stream: StreamId, op: u64 },
    /// A running op finished.
    Complete { stream: StreamId, op: u64 },
}

/// Emissions of the device subsystem: future steps plus host callbacks.
pub enum DevEmit<T, M> {
    Step { at: SimTime<T>, step: DevStep },
    Callback { at: SimTime<T>, pe: u32, meta: M },
}

/// A finished kernel/copy handed back to the dispatcher together with the
/// caller-supplied meta value.
pub struct FinishedOp<T, M> {
    pub meta: Option<M>,
    pub record: OpRecord<T>,
}

/// Device memory stand-in: host-resident f64 arrays, mutated only by kernel
/// effects and protocol copies.
#[derive(Default)]
pub struct BufferPool {
    bufs: Vec<Buffer>,
}

pub struct Buffer {
    pub device: DeviceId,
    pub data: Vec<f64>,
}

impl BufferPool {
    pub fn alloc(&mut self, device: DeviceId, len: usize) -> BufferId {
        self.bufs.push(Buffer {
            device,
            data: vec![0.0; len],
        });
        self.bufs.len() - 1
    }

    pub fn count(&self) -> usize {
        self.bufs.len()
    }

    pub fn device_of(&self, id: BufferId) -> DeviceId {
        self.bufs[id].device
    }

    pub fn len_bytes(&self, id: BufferId) -> usize {
        self.bufs[id].data.len() * 8
    }

    pub fn data(&self, id: BufferId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn data_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.bufs[id].data
    }

    /// Disjoint (source, destination) view of two distinct buffers.
    pub fn pair_mut(&mut self, src: BufferId, dst: BufferId) -> (&[f64], &mut [f64]) {
        assert_ne!(src, dst, "source and destination buffers must differ");
        if src < dst {
            let (a, b) = self.bufs.split_at_mut(dst);
            (&a[src].data, &mut b[0].data)
        } else {
            let (a, b) = self.bufs.split_at_mut(src);
            (&b[0].data, &mut a[dst].data)
        }
    }

    pub fn check_range(&self, r: &BufRange) -> SimResult<()> {
        if !r.offset.is_multiple_of(8) || !r.bytes.is_multiple_of(8) {
            return Err(SimError::Size(format!(
                "buffer range must be 8-byte aligned (offset {}, bytes {})",
                r.offset, r.bytes
            )));
        }
        if r.offset + r.bytes > self.len_bytes(r.buf) {
            return Err(SimError::Size(format!(
                "range [{}, {}) exceeds buffer {} of {} bytes",
                r.offset,
                r.offset + r.bytes,
                r.buf,
                self.len_bytes(r.buf)
            )));
        }
        Ok(())
    }

    pub fn copy_range(&mut self, src: BufRange, dst: BufRange) {
        debug_assert_eq!(src.bytes, dst.bytes);
        if src.bytes == 0 {
            return;
        }
        let (s_off, len) = (src.offset / 8, src.bytes / 8);
        let d_off = dst.offset / 8;
        if src.buf == dst.buf {
            self.bufs[src.buf]
                .data
                .copy_within(s_off..s_off + len, d_off);
        } else {
            let (s, d) = self.pair_mut(src.buf, dst.buf);
            d[d_off..d_off + len].copy_from_slice(&s[s_off..s_off + len]);
        }
    }
}

pub struct Devices<T: TimeScalar, M> {
    pub cost: DeviceCostModel<T>,
    devices: Vec<DeviceState<T>>,
    streams: Vec<Stream<T, M>>,
    events: Vec<EventSlot<T>>,
    flags: Vec<FlagSlot>,
    pub buffers: BufferPool,
    /// Every completed op, in completion order.
    pub log: Vec<OpRecord<T>>,
    pub kernels_completed: u64,
    op_seq: u64,
}

impl<T: TimeScalar, M> Devices<T, M> {
    pub fn new(cost: DeviceCostModel<T>) -> SimResult<Self> {
        cost.validate()?;
        Ok(Devices {
            cost,
            devices: Vec::new(),
            streams: Vec::new(),
            events: Vec::new(),
            flags: Vec::new(),
            buffers: BufferPool::default(),
            log: Vec::new(),
            kernels_completed: 0,
            op_seq: 0,
        })
    }

    pub fn add_device(&mut self, sm_capacity: u32, policy: SharingPolicy) -> SimResult<DeviceId> {
        if sm_capacity == 0 {
            return Err(SimError::Config("sm_capacity must be >= 1".into()));
        }
        self.devices.push(DeviceState {
            sm_capacity,
            policy,
            sm_in_use: 0,
            resident: 0,
            owner: None,
            eligible: BTreeSet::new(),
            busy_integral: 0.0,
            last_change: SimTime::zero(),
        });
        Ok((self.devices.len() - 1) as DeviceId)
    }

    pub fn add_stream(&mut self, device: DeviceId, process: u32) -> StreamId {
        self.streams.push(Stream {
            device,
            process,
            queue: VecDeque::new(),
            running: false,
            parked: false,
        });
        (self.streams.len() - 1) as StreamId
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn stream_process(&self, stream: StreamId) -> u32 {
        self.streams[stream as usize].process
    }

    pub fn stream_device(&self, stream: StreamId) -> DeviceId {
        self.streams[stream as usize].device
    }

    pub fn sm_capacity(&self, device: DeviceId) -> u32 {
        self.devices[device as usize].sm_capacity
    }

    pub fn create_event(&mut self) -> DevEventId {
        self.events.push(EventSlot {
            generation: 0,
            recorded: None,
            waiters: Vec::new(),
        });
        (self.events.len() - 1) as DevEventId
    }

    pub fn event_generation(&self, ev: DevEventId) -> u64 {
        self.events[ev as usize].generation
    }

    /// Recycle an event slot for its next use; any stale waiter is a protocol
    /// violation surfaced on wait.
    pub fn reset_event(&mut self, ev: DevEventId) {
        let slot = &mut self.events[ev as usize];
        slot.generation += 1;
        slot.recorded = None;
    }

    pub fn create_flag(&mut self) -> FlagId {
        self.flags.push(FlagSlot {
            set: false,
            waiters: Vec::new(),
        });
        (self.flags.len() - 1) as FlagId
    }

    /// Whether the host charge for this op kind is `launch_host_us` (kernel
    /// and copy submissions) or free (synchronization ops and callbacks).
    pub fn host_charge(&self, kind: &OpKind<M>) -> T {
        if kind.charges_host() {
            self.cost.launch_host_us
        } else {
            T::zero()
        }
    }

    pub fn kernel_duration(&self, work_items: u64) -> T {
        if work_items == 0 {
            return T::zero();
        }
        let raw = T::from_count(work_items) / self.cost.kernel_throughput_items_per_us;
        if raw < self.cost.min_kernel_us {
            self.cost.min_kernel_us
        } else {
            raw
        }
    }

    pub fn copy_duration(&self, bytes: u64) -> T {
        T::from_count(bytes) / (self.cost.d2d_bandwidth_gbps * T::from_count(1000))
    }

    /// Append an op to a stream FIFO. `ready_at` is when the host-side push
    /// completes (the caller charges the issuing PE); `enqueue_time` is when
    /// the call was made.
    pub fn enqueue(
        &mut self,
        stream: StreamId,
        kind: OpKind<M>,
        meta: Option<M>,
        enqueue_time: SimTime<T>,
        ready_at: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) -> SimResult<u64> {
        let sid = stream as usize;
        if sid >= self.streams.len() {
            return Err(SimError::Config(format!("unknown stream {stream}")));
        }
        match &kind {
            OpKind::Kernel { sm_request, .. } => {
                let cap = self.devices[self.streams[sid].device as usize].sm_capacity;
                if *sm_request == 0 || *sm_request > cap {
                    return Err(SimError::Config(format!(
                        "kernel sm_request {sm_request} outside [1, {cap}]"
                    )));
                }
            }
            OpKind::CopyD2D { src, dst } => {
                self.buffers.check_range(src)?;
                self.buffers.check_range(dst)?;
                if src.bytes != dst.bytes {
                    return Err(SimError::Size(
                        "copy source/destination size mismatch".into(),
                    ));
                }
            }
            OpKind::WaitEvent { event, .. } | OpKind::RecordEvent { event } => {
                if *event as usize >= self.events.len() {
                    return Err(SimError::Config(format!("unknown device event {event}")));
                }
            }
            OpKind::WaitHostFlag { flag } => {
                if *flag as usize >= self.flags.len() {
                    return Err(SimError::Config(format!("unknown host flag {flag}")));
                }
            }
            OpKind::HostCallback { .. } => {}
        }
        let seq = self.op_seq;
        self.op_seq += 1;
        self.streams[sid].queue.push_back(OpEntry {
            seq,
            kind,
            meta,
            enqueue_time,
            ready_at,
            dispatch_scheduled: false,
            eligible_at: None,
            queued_for_admission: false,
            started_at: None,
        });
        emits.push(DevEmit::Step {
            at: ready_at,
            step: DevStep::Advance { stream },
        });
        Ok(seq)
    }

    /// Release every stream blocked on `flag`, simultaneously in virtual time.
    pub fn set_flag(&mut self, flag: FlagId, now: SimTime<T>, emits: &mut Vec<DevEmit<T, M>>) {
        let slot = &mut self.flags[flag as usize];
        slot.set = true;
        for s in slot.waiters.drain(..) {
            emits.push(DevEmit::Step {
                at: now,
                step: DevStep::Advance { stream: s },
            });
        }
    }

    pub fn flag_is_set(&self, flag: FlagId) -> bool {
        self.flags[flag as usize].set
    }

    /// Advance one internal step. `Complete` steps return the finished
    /// kernel/copy so the caller can act on its meta value.
    pub fn step(
        &mut self,
        step: DevStep,
        now: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) -> SimResult<Option<FinishedOp<T, M>>> {
        match step {
            DevStep::Advance { stream } => {
                self.advance(stream, now, emits)?;
                Ok(None)
            }
            DevStep::Dispatched { stream, op } => {
                self.on_dispatched(stream, op, now, emits)?;
                Ok(None)
            }
            DevStep::Complete { stream, op } => self.on_complete(stream, op, now, emits).map(Some),
        }
    }

    /// Walk the stream head, firing instantaneous ops and starting the first
    /// op that needs execution or blocking.
    fn advance(
        &mut self,
        stream: StreamId,
        now: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) -> SimResult<()> {
        enum View<T> {
            NotReady(SimTime<T>),
            Record(DevEventId),
            Wait(DevEventId, u64),
            WaitFlag(FlagId),
            Callback,
            Copy {
                seq: u64,
                bytes: u64,
            },
            Kernel {
                seq: u64,
                eligible: bool,
                dispatch_scheduled: bool,
                queued: bool,
            },
        }
        let sid = stream as usize;
        loop {
            if self.streams[sid].running {
                return Ok(());
            }
            let view = {
                let Some(front) = self.streams[sid].queue.front() else {
                    return Ok(());
                };
                if now < front.ready_at {
                    View::NotReady(front.ready_at)
                } else {
                    match &front.kind {
                        OpKind::RecordEvent { event } => View::Record(*event),
                        OpKind::WaitEvent { event, generation } => View::Wait(*event, *generation),
                        OpKind::WaitHostFlag { flag } => View::WaitFlag(*flag),
                        OpKind::HostCallback { .. } => View::Callback,
                        OpKind::CopyD2D { src, .. } => View::Copy {
                            seq: front.seq,
                            bytes: src.bytes as u64,
                        },
                        OpKind::Kernel { .. } => View::Kernel {
                            seq: front.seq,
                            eligible: front.eligible_at.is_some(),
                            dispatch_scheduled: front.dispatch_scheduled,
                            queued: front.queued_for_admission,
                        },
                    }
                }
            };
            match view {
                View::NotReady(at) => {
                    emits.push(DevEmit::Step {
                        at,
                        step: DevStep::Advance { stream },
                    });
                    return Ok(());
                }
                View::Record(ev) => {
                    self.finish_instant(stream, now);
                    let slot = &mut self.events[ev as usize];
                    slot.recorded = Some(now);
                    for w in slot.waiters.drain(..) {
                        emits.push(DevEmit::Step {
                            at: now,
                            step: DevStep::Advance { stream: w },
                        });
                    }
                }
                View::Wait(ev, gen) => {
                    let slot = &self.events[ev as usize];
                    if slot.generation != gen {
                        return Err(SimError::Protocol(format!(
                            "stream {stream} waits on recycled event {ev} (generation {gen}, now {})",
                            slot.generation
                        )));
                    }
                    if slot.recorded.is_some() {
                        self.finish_instant(stream, now);
                    } else {
                        if !self.streams[sid].parked {
                            self.streams[sid].parked = true;
                            self.events[ev as usize].waiters.push(stream);
                        }
                        return Ok(());
                    }
                }
                View::WaitFlag(f) => {
                    if self.flags[f as usize].set {
                        self.finish_instant(stream, now);
                    } else {
                        if !self.streams[sid].parked {
                            self.streams[sid].parked = true;
                            self.flags[f as usize].waiters.push(stream);
                        }
                        return Ok(());
                    }
                }
                View::Callback => {
                    let front = self.streams[sid].queue.front_mut().unwrap();
                    let (pe, meta) = match &mut front.kind {
                        OpKind::HostCallback { pe, meta } => (*pe, meta.take()),
                        _ => unreachable!(),
                    };
                    if let Some(meta) = meta {
                        emits.push(DevEmit::Callback {
                            at: now + SimTime(self.cost.callback_latency_us),
                            pe,
                            meta,
                        });
                    }
                    self.finish_instant(stream, now);
                }
                View::Copy { seq, bytes } => {
                    let dur = self.copy_duration(bytes);
                    self.streams[sid].queue.front_mut().unwrap().started_at = Some(now);
                    self.streams[sid].running = true;
                    emits.push(DevEmit::Step {
                        at: now + SimTime(dur),
                        step: DevStep::Complete { stream, op: seq },
                    });
                    self.dispatch_follower(stream, now, emits);
                    return Ok(());
                }
                View::Kernel {
                    seq,
                    eligible,
                    dispatch_scheduled,
                    queued,
                } => {
                    if eligible {
                        if !queued {
                            self.streams[sid]
                                .queue
                                .front_mut()
                                .unwrap()
                                .queued_for_admission = true;
                            let dev = self.streams[sid].device;
                            self.devices[dev as usize]
                                .eligible
                                .insert((now, seq, stream));
                            self.try_admit(dev, now, emits);
                        }
                    } else if !dispatch_scheduled {
                        self.streams[sid]
                            .queue
                            .front_mut()
                            .unwrap()
                            .dispatch_scheduled = true;
                        emits.push(DevEmit::Step {
                            at: now + SimTime(self.cost.launch_device_us),
                            step: DevStep::Dispatched { stream, op: seq },
                        });
                    }
                    return Ok(());
                }
            }
        }
    }

    /// Pop the front op as instantaneous (fired at `now`) and log it.
    fn finish_instant(&mut self, stream: StreamId, now: SimTime<T>) {
        let sid = stream as usize;
        self.streams[sid].parked = false;
        let entry = self.streams[sid].queue.pop_front().unwrap();
        self.log.push(OpRecord {
            stream,
            device: self.streams[sid].device,
            process: self.streams[sid].process,
            kind: entry.kind.tag(),
            seq: entry.seq,
            sm_request: 0,
            enqueue_us: entry.enqueue_time,
            ready_us: entry.ready_at,
            start_us: now,
            end_us: now,
        });
        // The follower becomes the front; the advance loop dispatches it.
    }

    /// Begin dispatch for the op after the front once the front has started.
    fn dispatch_follower(
        &mut self,
        stream: StreamId,
        now: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) {
        let sid = stream as usize;
        if let Some(next) = self.streams[sid].queue.get_mut(1) {
            if let OpKind::Kernel { .. } = next.kind {
                if !next.dispatch_scheduled && next.eligible_at.is_none() {
                    next.dispatch_scheduled = true;
                    let begin = now.max(next.ready_at);
                    let seq = next.seq;
                    emits.push(DevEmit::Step {
                        at: begin + SimTime(self.cost.launch_device_us),
                        step: DevStep::Dispatched { stream, op: seq },
                    });
                }
            }
        }
    }

    fn on_dispatched(
        &mut self,
        stream: StreamId,
        op: u64,
        now: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) -> SimResult<()> {
        let sid = stream as usize;
        let Some(pos) = self.streams[sid].queue.iter().position(|e| e.seq == op) else {
            return Ok(()); // op already completed or cancelled stream state
        };
        self.streams[sid].queue[pos].eligible_at = Some(now);
        // Only a front op with no running predecessor can enter admission.
        if pos == 0 && !self.streams[sid].running {
            let front = &mut self.streams[sid].queue[0];
            if now >= front.ready_at && !front.queued_for_admission {
                front.queued_for_admission = true;
                let dev = self.streams[sid].device;
                self.devices[dev as usize]
                    .eligible
                    .insert((now, op, stream));
                self.try_admit(dev, now, emits);
            }
        }
        Ok(())
    }

    /// Admit eligible kernels in `(eligibility, seq)` order while capacity
    /// and the sharing policy allow; a too-large kernel does not block
    /// smaller ones behind it.
    fn try_admit(&mut self, device: DeviceId, now: SimTime<T>, emits: &mut Vec<DevEmit<T, M>>) {
        let did = device as usize;
        loop {
            let mut chosen: Option<(SimTime<T>, u64, StreamId)> = None;
            for &(t, seq, stream) in &self.devices[did].eligible {
                let st = &self.streams[stream as usize];
                let Some(front) = st.queue.front() else {
                    continue;
                };
                let OpKind::Kernel { sm_request, .. } = front.kind else {
                    continue;
                };
                let dev = &self.devices[did];
                if dev.sm_in_use + sm_request > dev.sm_capacity {
                    continue;
                }
                if dev.policy == SharingPolicy::TimeSliced {
                    if let Some(owner) = dev.owner {
                        if owner != st.process {
                            continue;
                        }
                    }
                }
                chosen = Some((t, seq, stream));
                break;
            }
            let Some(key) = chosen else { return };
            self.devices[did].eligible.remove(&key);
            self.start_kernel(key.2, now, emits);
        }
    }

    fn start_kernel(&mut self, stream: StreamId, now: SimTime<T>, emits: &mut Vec<DevEmit<T, M>>) {
        let sid = stream as usize;
        let process = self.streams[sid].process;
        let device = self.streams[sid].device;
        let front = self.streams[sid].queue.front_mut().unwrap();
        let (items, req) = match &front.kind {
            OpKind::Kernel {
                work_items,
                sm_request,
                ..
            } => (*work_items, *sm_request),
            _ => unreachable!("admission queue held a non-kernel"),
        };
        front.started_at = Some(now);
        let seq = front.seq;
        self.streams[sid].running = true;
        let dur = self.kernel_duration(items);
        self.occupancy_change(device, now, |d| {
            d.sm_in_use += req;
            d.resident += 1;
            d.owner = Some(process);
        });
        emits.push(DevEmit::Step {
            at: now + SimTime(dur),
            step: DevStep::Complete { stream, op: seq },
        });
        self.dispatch_follower(stream, now, emits);
    }

    fn on_complete(
        &mut self,
        stream: StreamId,
        op: u64,
        now: SimTime<T>,
        emits: &mut Vec<DevEmit<T, M>>,
    ) -> SimResult<FinishedOp<T, M>> {
        let sid = stream as usize;
        let entry = self.streams[sid]
            .queue
            .pop_front()
            .filter(|e| e.seq == op)
            .unwrap_or_else(|| {
                panic!("completion for op {op} that is not at stream {stream} head")
            });
        self.streams[sid].running = false;
        let device = self.streams[sid].device;
        let kind_tag = entry.kind.tag();
        let mut sm = 0;
        let mut effect = None;
        match entry.kind {
            OpKind::Kernel {
                sm_request,
                effect: eff,
                ..
            } => {
                sm = sm_request;
                effect = eff;
                self.kernels_completed += 1;
                self.occupancy_change(device, now, |d| {
                    d.sm_in_use -= sm_request;
                    d.resident -= 1;
                    if d.resident == 0 {
                        d.owner = None;
                    }
                });
            }
            OpKind::CopyD2D { src, dst } => {
                self.buffers.copy_range(src, dst);
            }
            _ => unreachable!("only kernels and copies run to completion events"),
        }
        if let Some(eff) = effect {
            eff(&mut self.buffers);
        }
        let record = OpRecord {
            stream,
            device,
            process: self.streams[sid].process,
            kind: kind_tag,
            seq: entry.seq,
            sm_request: sm,
            enqueue_us: entry.enqueue_time,
            ready_us: entry.ready_at,
            start_us: entry.started_at.unwrap_or(now),
            end_us: now,
        };
        self.log.push(record.clone());
        // The stream head moved and capacity may have freed.
        self.advance(stream, now, emits)?;
        self.try_admit(device, now, emits);
        Ok(FinishedOp {
            meta: entry.meta,
            record,
        })
    }

    fn occupancy_change(
        &mut self,
        device: DeviceId,
        now: SimTime<T>,
        f: impl FnOnce(&mut DeviceState<T>),
    ) {
        let d = &mut self.devices[device as usize];
        let dt = (now - d.last_change).to_f64();
        d.busy_integral += dt * d.sm_in_use as f64 / d.sm_capacity as f64;
        d.last_change = now;
        f(d);
    }

    pub fn sm_in_use(&self, device: DeviceId) -> u32 {
        self.devices[device as usize].sm_in_use
    }

    /// Mean SM occupancy over `[0, end]`, averaged across devices.
    pub fn mean_sm_utilization(&mut self, end: SimTime<T>) -> f64 {
        if self.devices.is_empty() {
            return 0.0;
        }
        let horizon = end.to_f64();
        if horizon <= 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for d in 0..self.devices.len() {
            self.occupancy_change(d as DeviceId, end, |_| {});
            total += self.devices[d].busy_integral / horizon;
        }
        total / self.devices.len() as f64
    }
}
