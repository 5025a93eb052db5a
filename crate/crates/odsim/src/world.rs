//! Ties the subsystems together: the simulated machine state, the event
//! payload dispatched by the engine, message routing over the three GPU
//! transport paths, and the PE scheduler loop.
//!
//! Protocol walkthrough for a device-payload send from chare S to chare R:
//!   * same process: one device-to-device copy on R's stream, then a host
//!     callback delivers the entry message;
//!   * same node, different process: copy into the source process's staging
//!     ring, record a pool event, control message to R's PE which enqueues a
//!     wait plus the copy out of staging; resources free when the second
//!     copy completes;
//!   * different nodes: the source PE charges registration and sends a
//!     control message; the destination issues a chunked one-sided get that
//!     occupies the link after a request delay; the completion ack releases
//!     the source registration slot (one in-flight registered send per
//!     process, further sends queue FIFO).

use crate::comm::{select_transport, Comm, CommConfig, Path};
use crate::device::{BufRange, DevEmit, DevStep, DeviceCostModel, Devices, OpKind, SharingPolicy};
use crate::error::{SimError, SimResult};
use crate::runtime::{
    block_map, ChareRef, Collection, DevPayload, EntryMessage, Mapping, MethodId, Pe, PeId, PeTask,
    Topology,
};
use crate::scalar::TimeScalar;
use crate::sim::{Engine, EntityTag, EventPayload, SimTime};

/// Completion notes attached to device ops by the world/comm layers.
pub enum OpMeta<T> {
    /// Deliver a PE task (host callbacks).
    Task { pe: PeId, task: PeTask<T> },
    /// Intra-process payload copy finished; `staged` was its start.
    IpCopied { transfer: usize },
    /// IPC copy into the staging ring finished.
    IpcStage1 { transfer: usize },
    /// IPC copy out of the staging ring finished; release resources.
    IpcStage2 { transfer: usize },
}

/// Engine event payload.
pub enum Action<T> {
    /// A task arrives in a PE's queue.
    Deliver { pe: PeId, task: PeTask<T> },
    /// A PE picks up its next queued task.
    PeStep { pe: PeId },
    /// Device-internal progression.
    Dev(DevStep),
    /// Host-side synchronization flag write.
    SetFlag { flag: u32 },
    /// Last chunk of a one-sided get arrived.
    LinkDone { transfer: usize },
}

impl<T> EventPayload for Action<T> {
    fn target(&self) -> EntityTag {
        match self {
            Action::Deliver { pe, .. } | Action::PeStep { pe } => EntityTag {
                kind: "pe",
                index: *pe as u64,
            },
            Action::Dev(step) => {
                let s = match step {
                    DevStep::Advance { stream }
                    | DevStep::Dispatched { stream, .. }
                    | DevStep::Complete { stream, .. } => *stream,
                };
                EntityTag {
                    kind: "stream",
                    index: s as u64,
                }
            }
            Action::SetFlag { flag } => EntityTag {
                kind: "flag",
                index: *flag as u64,
            },
            Action::LinkDone { transfer } => EntityTag {
                kind: "transfer",
                index: *transfer as u64,
            },
        }
    }

    fn label(&self) -> String {
        match self {
            Action::Deliver { task, .. } => format!("deliver {}", task.label()),
            Action::PeStep { .. } => "pe_step".into(),
            Action::Dev(DevStep::Advance { .. }) => "stream_advance".into(),
            Action::Dev(DevStep::Dispatched { op, .. }) => format!("kernel_dispatched(op{op})"),
            Action::Dev(DevStep::Complete { op, .. }) => format!("op_complete(op{op})"),
            Action::SetFlag { .. } => "set_flag".into(),
            Action::LinkDone { transfer } => format!("link_done(t{transfer})"),
        }
    }
}

/// Absolute-time emission buffer filled during one dispatch, drained into
/// the engine afterwards.
pub struct Outbox<T> {
    now: SimTime<T>,
    items: Vec<(SimTime<T>, Action<T>)>,
}

impl<T: TimeScalar> Outbox<T> {
    pub fn new(now: SimTime<T>) -> Self {
        Outbox {
            now,
            items: Vec::new(),
        }
    }

    pub fn at(&mut self, time: SimTime<T>, action: Action<T>) {
        debug_assert!(time >= self.now, "emission into the past");
        self.items.push((time, action));
    }

    pub fn drain_into(self, engine: &mut Engine<T, Action<T>>) -> SimResult<()> {
        for (t, a) in self.items {
            engine.schedule_at(t, a)?;
        }
        Ok(())
    }
}

/// Execution context of one PE handler: the running PE and its busy cursor.
/// Charges accumulate on the cursor; the PE is busy until the final value.
pub struct HandlerCtx<T> {
    pub pe: PeId,
    pub chare: Option<ChareRef>,
    pub cursor: SimTime<T>,
}

impl<T: TimeScalar> HandlerCtx<T> {
    pub fn charge(&mut self, us: T) {
        self.cursor += SimTime(us);
    }
}

/// Runtime-level cost knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeConfig<T> {
    pub send_overhead_us: T,
    pub max_events: u64,
}

impl<T: TimeScalar> RuntimeConfig<T> {
    pub fn defaults() -> Self {
        RuntimeConfig {
            send_overhead_us: T::parse_decimal("0.5").unwrap(),
            max_events: crate::sim::DEFAULT_MAX_EVENTS,
        }
    }
}

/// The full simulated machine.
pub struct World<T: TimeScalar> {
    pub topo: Topology,
    pub pes: Vec<Pe<T>>,
    pub dev: Devices<T, OpMeta<T>>,
    pub comm: Comm<T>,
    pub collections: Vec<Collection>,
    pub runtime_cfg: RuntimeConfig<T>,
    pub sends: u64,
    pub deliveries: u64,
}

impl<T: TimeScalar> World<T> {
    pub fn build(
        topo: Topology,
        sm_capacity: u32,
        policy: SharingPolicy,
        cost: DeviceCostModel<T>,
        comm_cfg: CommConfig<T>,
        runtime_cfg: RuntimeConfig<T>,
    ) -> SimResult<Self> {
        topo.validate()?;
        let mut dev = Devices::new(cost)?;
        for _ in 0..topo.n_gpus() {
            dev.add_device(sm_capacity, policy)?;
        }
        let mut comm = Comm::new(comm_cfg, topo.nodes, topo.n_processes())?;
        // Staging ring + event pool per process, preallocated at startup;
        // peer handle exchange is off the measured path and costs nothing.
        for proc in 0..topo.n_processes() {
            let gpu = topo.process_gpu(proc);
            let staging = dev
                .buffers
                .alloc(gpu, (comm.cfg.ring_capacity_bytes / 8) as usize);
            comm.rings.push(crate::comm::CommRing::new(
                comm.cfg.ring_capacity_bytes,
                staging,
            ));
            let slots: Vec<_> = (0..comm.cfg.ipc_event_pool_size)
                .map(|_| dev.create_event())
                .collect();
            comm.pools.push(crate::comm::IpcEventPool::new(slots));
        }
        let pes = (0..topo.n_pes())
            .map(|pe| Pe::new(pe, topo.pe_process(pe)))
            .collect();
        Ok(World {
            topo,
            pes,
            dev,
            comm,
            collections: Vec::new(),
            runtime_cfg,
            sends: 0,
            deliveries: 0,
        })
    }

    /// Instantiate a chare collection: validates the implied ODF, resolves
    /// the mapping, pre-fills the location table and creates the per-chare
    /// streams.
    pub fn create_collection(
        &mut self,
        name: &str,
        dims: (u32, u32),
        mapping: Mapping,
    ) -> SimResult<u32> {
        let count = dims.0 as u64 * dims.1 as u64;
        if count == 0 {
            return Err(SimError::Config(format!(
                "collection {name} has an empty index space"
            )));
        }
        let gpus = self.topo.n_gpus() as u64;
        if !count.is_multiple_of(gpus) {
            return Err(SimError::Config(format!(
                "collection {name}: {count} chares not divisible by {gpus} GPUs (fractional ODF unsupported)"
            )));
        }
        let odf = (count / gpus) as u32;
        let n_pes = self.topo.n_pes();
        let home: Vec<PeId> = match mapping {
            Mapping::Block => (0..count as u32)
                .map(|i| block_map(dims, (i / dims.1, i % dims.1), n_pes))
                .collect(),
            Mapping::Custom(v) => {
                if v.len() as u64 != count {
                    return Err(SimError::Config(format!(
                        "collection {name}: custom mapping covers {} of {count} chares",
                        v.len()
                    )));
                }
                if let Some(pe) = v.iter().find(|&&pe| pe >= n_pes) {
                    return Err(SimError::Config(format!(
                        "collection {name}: mapping names PE {pe} outside 0..{n_pes}"
                    )));
                }
                v
            }
        };
        let streams: Vec<u32> = home
            .iter()
            .map(|&pe| {
                let proc = self.topo.pe_process(pe);
                self.dev.add_stream(self.topo.process_gpu(proc), proc)
            })
            .collect();
        let entries = home
            .iter()
            .map(|&pe| crate::comm::LocEntry {
                node: self.topo.pe_node(pe),
                process: self.topo.pe_process(pe),
                pe,
            })
            .collect();
        let id = self.comm.table.register_collection(entries);
        self.collections.push(Collection {
            name: name.to_string(),
            dims,
            odf,
            home,
            streams,
        });
        debug_assert_eq!(id as usize, self.collections.len() - 1);
        Ok(id)
    }

    pub fn chare_pe(&self, c: ChareRef) -> PeId {
        self.collections[c.collection as usize].home[c.index as usize]
    }

    pub fn chare_stream(&self, c: ChareRef) -> u32 {
        self.collections[c.collection as usize].streams[c.index as usize]
    }

    pub fn chare_device(&self, c: ChareRef) -> u32 {
        self.topo
            .process_gpu(self.topo.pe_process(self.chare_pe(c)))
    }

    /// Enqueue a device op from a handler: kernel/copy submissions charge
    /// `launch_host_us` to the issuing PE and become visible to the stream
    /// when that host work ends; sync ops and callbacks are free.
    pub fn enqueue_op(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        stream: u32,
        kind: OpKind<OpMeta<T>>,
        meta: Option<OpMeta<T>>,
    ) -> SimResult<u64> {
        let pe_proc = self.topo.pe_process(ctx.pe);
        if self.dev.stream_process(stream) != pe_proc {
            return Err(SimError::Config(format!(
                "PE {} (process {pe_proc}) cannot enqueue on stream {stream} of process {}",
                ctx.pe,
                self.dev.stream_process(stream)
            )));
        }
        if let OpKind::HostCallback { pe, .. } = &kind {
            if *pe >= self.topo.n_pes() {
                return Err(SimError::Config(format!(
                    "host callback targets PE {pe} outside 0..{}",
                    self.topo.n_pes()
                )));
            }
        }
        let enqueue_time = ctx.cursor;
        ctx.charge(self.dev.host_charge(&kind));
        let mut emits = Vec::new();
        let seq = self
            .dev
            .enqueue(stream, kind, meta, enqueue_time, ctx.cursor, &mut emits)?;
        self.absorb_dev(emits, out);
        Ok(seq)
    }

    /// Pre-load a stream op during setup, outside any PE handler (used by
    /// benchmarks that stage work before releasing it at t=0).
    pub fn preload_op(
        &mut self,
        out: &mut Outbox<T>,
        stream: u32,
        kind: OpKind<OpMeta<T>>,
    ) -> SimResult<u64> {
        let mut emits = Vec::new();
        let seq = self.dev.enqueue(
            stream,
            kind,
            None,
            SimTime::zero(),
            SimTime::zero(),
            &mut emits,
        )?;
        self.absorb_dev(emits, out);
        Ok(seq)
    }

    fn absorb_dev(&mut self, emits: Vec<DevEmit<T, OpMeta<T>>>, out: &mut Outbox<T>) {
        for e in emits {
            match e {
                DevEmit::Step { at, step } => out.at(at, Action::Dev(step)),
                DevEmit::Callback { at, pe, meta } => match meta {
                    OpMeta::Task { task, .. } => out.at(at, Action::Deliver { pe, task }),
                    _ => unreachable!("host callbacks carry PE tasks"),
                },
            }
        }
    }

    /// Asynchronous entry-method send. Returns immediately in virtual time;
    /// the sender pays `send_overhead_us` and, depending on the payload
    /// path, protocol submission costs.
    #[allow(clippy::too_many_arguments)]
    pub fn send(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        src: ChareRef,
        dest: ChareRef,
        method: MethodId,
        args: Vec<u64>,
        payload: Option<DevPayload>,
    ) -> SimResult<()> {
        self.sends += 1;
        ctx.charge(self.runtime_cfg.send_overhead_us);
        let src_loc = self.comm.table.lookup(src)?;
        let dst_loc = self.comm.table.lookup(dest)?;
        let send_time = ctx.cursor;
        let mut msg = EntryMessage {
            src,
            dest,
            method,
            args,
            payload,
            send_time,
            transfer: None,
            routed: true,
        };
        // Zero-byte payloads take the control-only path.
        let payload = match payload {
            Some(p) if p.bytes > 0 => p,
            _ => {
                msg.payload = None;
                let latency = if src_loc.node == dst_loc.node {
                    T::zero()
                } else {
                    self.comm.link(src_loc.node, dst_loc.node).latency_us
                };
                out.at(
                    send_time + SimTime(latency),
                    Action::Deliver {
                        pe: dst_loc.pe,
                        task: PeTask::Entry(msg),
                    },
                );
                return Ok(());
            }
        };
        self.dev.buffers.check_range(&BufRange {
            buf: payload.src_buf,
            offset: payload.src_off,
            bytes: payload.bytes,
        })?;
        self.dev.buffers.check_range(&BufRange {
            buf: payload.dst_buf,
            offset: payload.dst_off,
            bytes: payload.bytes,
        })?;
        let path = select_transport(&src_loc, &dst_loc);
        if path == Path::IntraNodeIpc && payload.bytes as u64 > self.comm.cfg.ring_capacity_bytes {
            return Err(SimError::Size(format!(
                "IPC payload of {} bytes can never fit the {}-byte staging ring",
                payload.bytes, self.comm.cfg.ring_capacity_bytes
            )));
        }
        let tid = self.comm.new_transfer(
            src,
            dest,
            src_loc,
            dst_loc,
            path,
            payload.bytes as u64,
            send_time,
        );
        msg.transfer = Some(tid);
        match path {
            Path::IntraProcess => {
                // Single async device-to-device copy on the receiver's stream.
                let stream = self.chare_stream(dest);
                self.enqueue_op(
                    ctx,
                    out,
                    stream,
                    OpKind::CopyD2D {
                        src: BufRange {
                            buf: payload.src_buf,
                            offset: payload.src_off,
                            bytes: payload.bytes,
                        },
                        dst: BufRange {
                            buf: payload.dst_buf,
                            offset: payload.dst_off,
                            bytes: payload.bytes,
                        },
                    },
                    Some(OpMeta::IpCopied { transfer: tid }),
                )?;
                self.enqueue_op(
                    ctx,
                    out,
                    stream,
                    OpKind::HostCallback {
                        pe: dst_loc.pe,
                        meta: Some(OpMeta::Task {
                            pe: dst_loc.pe,
                            task: PeTask::Entry(msg),
                        }),
                    },
                    None,
                )?;
            }
            Path::IntraNodeIpc => {
                self.comm.transfers[tid].pending_msg = Some(msg);
                if self.comm.try_reserve_ipc(tid) {
                    self.stage_ipc(ctx, out, tid)?;
                } else {
                    let proc = src_loc.process as usize;
                    self.comm.pending_ipc[proc].push_back(tid);
                }
            }
            Path::InterNode => {
                self.comm.transfers[tid].pending_msg = Some(msg);
                let proc = src_loc.process as usize;
                if self.comm.reg_busy[proc].is_none() {
                    self.comm.reg_busy[proc] = Some(tid);
                    ctx.charge(self.comm.cfg.registration_cost_us);
                    let lat = self.comm.link(src_loc.node, dst_loc.node).latency_us;
                    out.at(
                        ctx.cursor + SimTime(lat),
                        Action::Deliver {
                            pe: dst_loc.pe,
                            task: PeTask::NetControl { transfer: tid },
                        },
                    );
                } else {
                    self.comm.pending_reg[proc].push_back(tid);
                }
            }
        }
        Ok(())
    }

    /// Sender-side IPC staging: copy into the ring, record the pool event,
    /// send the {offset, slot} control message to the destination PE.
    fn stage_ipc(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        tid: usize,
    ) -> SimResult<()> {
        let (payload, src_loc, dst_loc) = {
            let t = &self.comm.transfers[tid];
            (
                t.pending_msg.as_ref().unwrap().payload.unwrap(),
                t.src_loc,
                t.dst_loc,
            )
        };
        let hold = self.comm.transfers[tid]
            .ipc
            .expect("ipc resources reserved");
        let ring_buf = self.comm.rings[src_loc.process as usize].staging_buf;
        let event = self.comm.pools[src_loc.process as usize].slots[hold.slot as usize];
        let generation = self.dev.event_generation(event);
        self.comm.transfers[tid].ipc.as_mut().unwrap().generation = generation;
        let offset = hold.offset;
        let src_stream = self.chare_stream(self.comm.transfers[tid].src);
        self.enqueue_op(
            ctx,
            out,
            src_stream,
            OpKind::CopyD2D {
                src: BufRange {
                    buf: payload.src_buf,
                    offset: payload.src_off,
                    bytes: payload.bytes,
                },
                dst: BufRange {
                    buf: ring_buf,
                    offset: offset as usize,
                    bytes: payload.bytes,
                },
            },
            Some(OpMeta::IpcStage1 { transfer: tid }),
        )?;
        self.enqueue_op(ctx, out, src_stream, OpKind::RecordEvent { event }, None)?;
        out.at(
            ctx.cursor,
            Action::Deliver {
                pe: dst_loc.pe,
                task: PeTask::IpcControl { transfer: tid },
            },
        );
        Ok(())
    }
}

/// Application state machine: seeds initial work and handles entry messages
/// delivered to its chares. Handlers must be pure functions of chare state
/// and the message, interacting only through the world APIs.
pub trait App<T: TimeScalar> {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()>;

    fn handle(
        &mut self,
        w: &mut World<T>,
        out: &mut Outbox<T>,
        ctx: &mut HandlerCtx<T>,
        msg: &EntryMessage<T>,
    ) -> SimResult<()>;
}

impl<T: TimeScalar> World<T> {
    /// Process one engine event.
    pub fn dispatch<A: App<T> + ?Sized>(
        &mut self,
        app: &mut A,
        now: SimTime<T>,
        action: Action<T>,
        out: &mut Outbox<T>,
    ) -> SimResult<()> {
        match action {
            Action::Deliver { pe, task } => {
                if let PeTask::Entry(msg) = &task {
                    if msg.routed {
                        self.deliveries += 1;
                    }
                    if let Some(tid) = msg.transfer {
                        let t = &mut self.comm.transfers[tid];
                        if t.delivered_us.is_none() {
                            t.delivered_us = Some(now);
                        }
                    }
                }
                let p = &mut self.pes[pe as usize];
                p.queue.push_back(task);
                if !p.wake_pending {
                    p.wake_pending = true;
                    let at = now.max(p.busy_until);
                    out.at(at, Action::PeStep { pe });
                }
                Ok(())
            }
            Action::PeStep { pe } => self.pe_step(app, pe, now, out),
            Action::Dev(step) => {
                let mut emits = Vec::new();
                let finished = self.dev.step(step, now, &mut emits)?;
                self.absorb_dev(emits, out);
                if let Some(fin) = finished {
                    if let Some(meta) = fin.meta {
                        self.on_op_meta(meta, now, out)?;
                    }
                }
                Ok(())
            }
            Action::SetFlag { flag } => {
                let mut emits = Vec::new();
                self.dev.set_flag(flag, now, &mut emits);
                self.absorb_dev(emits, out);
                Ok(())
            }
            Action::LinkDone { transfer } => self.on_link_done(transfer, now, out),
        }
    }

    /// Run the next queued task on a PE; the PE is busy until the handler's
    /// accumulated charges end, then picks up the next task.
    fn pe_step<A: App<T> + ?Sized>(
        &mut self,
        app: &mut A,
        pe: PeId,
        now: SimTime<T>,
        out: &mut Outbox<T>,
    ) -> SimResult<()> {
        {
            let p = &mut self.pes[pe as usize];
            if now < p.busy_until {
                // woken early; re-arm at the busy horizon
                out.at(p.busy_until, Action::PeStep { pe });
                return Ok(());
            }
            p.wake_pending = false;
        }
        let Some(task) = self.pes[pe as usize].queue.pop_front() else {
            return Ok(());
        };
        let mut ctx = HandlerCtx {
            pe,
            chare: None,
            cursor: now,
        };
        match task {
            PeTask::Entry(msg) => {
                ctx.chare = Some(msg.dest);
                app.handle(self, out, &mut ctx, &msg).map_err(|e| match e {
                    SimError::Handler { .. } => e,
                    other => SimError::Handler {
                        chare: msg.dest.to_string(),
                        time_us: now.to_f64(),
                        message: other.to_string(),
                    },
                })?;
            }
            PeTask::IpcControl { transfer } => self.on_ipc_control(&mut ctx, out, transfer)?,
            PeTask::IpcGrant { transfer } => self.stage_ipc(&mut ctx, out, transfer)?,
            PeTask::RegGrant { transfer } => self.on_reg_grant(&mut ctx, out, transfer)?,
            PeTask::NetControl { transfer } => self.on_net_control(&mut ctx, out, transfer)?,
            PeTask::NetAck { transfer } => self.on_net_ack(&mut ctx, out, transfer)?,
        }
        let p = &mut self.pes[pe as usize];
        p.busy_time = p.busy_time + (ctx.cursor - now).micros();
        p.busy_until = ctx.cursor;
        if !p.queue.is_empty() {
            p.wake_pending = true;
            out.at(p.busy_until, Action::PeStep { pe });
        }
        Ok(())
    }

    fn on_op_meta(
        &mut self,
        meta: OpMeta<T>,
        now: SimTime<T>,
        out: &mut Outbox<T>,
    ) -> SimResult<()> {
        match meta {
            OpMeta::Task { pe, task } => {
                // copies never carry tasks, callbacks are emitted by the
                // device directly; kept for completeness
                out.at(now, Action::Deliver { pe, task });
                Ok(())
            }
            OpMeta::IpCopied { transfer } => {
                let t = &mut self.comm.transfers[transfer];
                if t.staged_us.is_none() {
                    t.staged_us = Some(now);
                }
                Ok(())
            }
            OpMeta::IpcStage1 { transfer } => {
                self.comm.transfers[transfer].staged_us = Some(now);
                Ok(())
            }
            OpMeta::IpcStage2 { transfer } => {
                // staging extent and pool slot free; recycle the event and
                // grant queued transfers in FIFO order while resources last
                let hold = self.comm.release_ipc(transfer);
                let proc = self.comm.transfers[transfer].src_loc.process as usize;
                let event = self.comm.pools[proc].slots[hold.slot as usize];
                self.dev.reset_event(event);
                while let Some(&next) = self.comm.pending_ipc[proc].front() {
                    if !self.comm.try_reserve_ipc(next) {
                        break;
                    }
                    self.comm.pending_ipc[proc].pop_front();
                    let src_pe = self.comm.transfers[next].src_loc.pe;
                    out.at(
                        now,
                        Action::Deliver {
                            pe: src_pe,
                            task: PeTask::IpcGrant { transfer: next },
                        },
                    );
                }
                Ok(())
            }
        }
    }

    /// Destination side of the IPC staging protocol: wait for the source
    /// copy's pool event, copy out of the staging ring, deliver.
    fn on_ipc_control(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        tid: usize,
    ) -> SimResult<()> {
        let (payload, dst_loc, hold) = {
            let t = &self.comm.transfers[tid];
            (
                t.pending_msg.as_ref().unwrap().payload.unwrap(),
                t.dst_loc,
                t.ipc.unwrap(),
            )
        };
        let msg = self.comm.transfers[tid].pending_msg.take().unwrap();
        let src_proc = self.comm.transfers[tid].src_loc.process as usize;
        let ring_buf = self.comm.rings[src_proc].staging_buf;
        let event = self.comm.pools[src_proc].slots[hold.slot as usize];
        let stream = self.chare_stream(msg.dest);
        ctx.chare = Some(msg.dest);
        self.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::WaitEvent {
                event,
                generation: hold.generation,
            },
            None,
        )?;
        self.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::CopyD2D {
                src: BufRange {
                    buf: ring_buf,
                    offset: hold.offset as usize,
                    bytes: payload.bytes,
                },
                dst: BufRange {
                    buf: payload.dst_buf,
                    offset: payload.dst_off,
                    bytes: payload.bytes,
                },
            },
            Some(OpMeta::IpcStage2 { transfer: tid }),
        )?;
        self.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::HostCallback {
                pe: dst_loc.pe,
                meta: Some(OpMeta::Task {
                    pe: dst_loc.pe,
                    task: PeTask::Entry(msg),
                }),
            },
            None,
        )?;
        Ok(())
    }

    /// Sender side: the registration slot became available for a queued
    /// rendezvous send.
    fn on_reg_grant(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        tid: usize,
    ) -> SimResult<()> {
        ctx.charge(self.comm.cfg.registration_cost_us);
        let (src_node, dst_node, dst_pe) = {
            let t = &self.comm.transfers[tid];
            (t.src_loc.node, t.dst_loc.node, t.dst_loc.pe)
        };
        let lat = self.comm.link(src_node, dst_node).latency_us;
        out.at(
            ctx.cursor + SimTime(lat),
            Action::Deliver {
                pe: dst_pe,
                task: PeTask::NetControl { transfer: tid },
            },
        );
        Ok(())
    }

    /// Destination side: issue the chunked one-sided get. The request pays
    /// the link latency, then the chunks stream back-to-back at full
    /// bandwidth once the link's bulk queue reaches this transfer.
    fn on_net_control(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        tid: usize,
    ) -> SimResult<()> {
        let (src_node, dst_node, bytes) = {
            let t = &self.comm.transfers[tid];
            (t.src_loc.node, t.dst_loc.node, t.bytes)
        };
        let link = self.comm.link_mut(src_node, dst_node);
        let request_arrives = ctx.cursor + SimTime(link.latency_us);
        let start = request_arrives.max(link.busy_until);
        let end = start + SimTime(link.bulk_duration(bytes));
        link.busy_until = end;
        self.comm.transfers[tid].staged_us = Some(start);
        out.at(end, Action::LinkDone { transfer: tid });
        Ok(())
    }

    /// Last chunk landed: materialize the bytes in the destination buffer,
    /// deliver the entry message, and ack the source to release its slot.
    fn on_link_done(&mut self, tid: usize, now: SimTime<T>, out: &mut Outbox<T>) -> SimResult<()> {
        let msg = self.comm.transfers[tid].pending_msg.take().unwrap();
        let payload = msg.payload.unwrap();
        self.dev.buffers.copy_range(
            BufRange {
                buf: payload.src_buf,
                offset: payload.src_off,
                bytes: payload.bytes,
            },
            BufRange {
                buf: payload.dst_buf,
                offset: payload.dst_off,
                bytes: payload.bytes,
            },
        );
        let (src_node, dst_node, src_pe, dst_pe) = {
            let t = &self.comm.transfers[tid];
            (t.src_loc.node, t.dst_loc.node, t.src_loc.pe, t.dst_loc.pe)
        };
        out.at(
            now,
            Action::Deliver {
                pe: dst_pe,
                task: PeTask::Entry(msg),
            },
        );
        let lat = self.comm.link(src_node, dst_node).latency_us;
        out.at(
            now + SimTime(lat),
            Action::Deliver {
                pe: src_pe,
                task: PeTask::NetAck { transfer: tid },
            },
        );
        Ok(())
    }

    /// Sender side: completion ack releases the registration; the next
    /// queued send (if any) gets the slot.
    fn on_net_ack(
        &mut self,
        ctx: &mut HandlerCtx<T>,
        out: &mut Outbox<T>,
        tid: usize,
    ) -> SimResult<()> {
        let proc = self.comm.transfers[tid].src_loc.process as usize;
        debug_assert_eq!(self.comm.reg_busy[proc], Some(tid));
        self.comm.reg_busy[proc] = None;
        if let Some(next) = self.comm.pending_reg[proc].pop_front() {
            self.comm.reg_busy[proc] = Some(next);
            let src_pe = self.comm.transfers[next].src_loc.pe;
            out.at(
                ctx.cursor,
                Action::Deliver {
                    pe: src_pe,
                    task: PeTask::RegGrant { transfer: next },
                },
            );
        }
        Ok(())
    }
}

/// Drive an application to quiescence on a fresh engine.
pub fn run_to_quiescence<T: TimeScalar, A: App<T> + ?Sized>(
    world: &mut World<T>,
    app: &mut A,
    engine: &mut Engine<T, Action<T>>,
) -> SimResult<SimTime<T>> {
    let mut out = Outbox::new(engine.now());
    app.init(world, &mut out)?;
    out.drain_into(engine)?;
    let mut state = (world, app);
    engine.run_until_quiescent(&mut state, |eng, (world, app), ev| {
        let mut out = Outbox::new(ev.time);
        world.dispatch(&mut **app, ev.time, ev.payload, &mut out)?;
        out.drain_into(eng)
    })
}
