//! Shared helpers for the integration and acceptance suites: a serial
//! reference for the Jacobi sweep, and a small configurable application for
//! driving the communication layer directly.

#![allow(dead_code)]

use odsim::config::RunConfig;
use odsim::error::SimResult;
use odsim::runtime::{ChareRef, DevPayload, EntryMessage, Mapping, PeTask};
use odsim::scalar::TimeScalar;
use odsim::sim::SimTime;
use odsim::world::{Action, App, HandlerCtx, Outbox, World};
use odsim::Micros;

/// Serial full-grid Jacobi reference, independent of the simulator: the same
/// initial pattern, fixed borders, and a 5-point average with the identical
/// per-cell expression order.
pub mod jacobi_oracle {
    pub fn initial_value(r: u64, c: u64) -> f64 {
        let h = r
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
        ((h >> 20) % 4096) as f64 / 4096.0
    }

    /// Checksum of the grid after `iterations` sweeps (row-major sum).
    pub fn checksum(rows: usize, cols: usize, iterations: u64) -> f64 {
        let mut cur: Vec<f64> = (0..rows * cols)
            .map(|i| initial_value((i / cols) as u64, (i % cols) as u64))
            .collect();
        let mut next = vec![0.0_f64; rows * cols];
        for _ in 0..iterations {
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    next[i] = if r == 0 || r == rows - 1 || c == 0 || c == cols - 1 {
                        cur[i]
                    } else {
                        (cur[i] + cur[i - cols] + cur[i + cols] + cur[i - 1] + cur[i + 1]) / 5.0
                    };
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mut sum = 0.0_f64;
        for v in &cur {
            sum += *v;
        }
        sum
    }
}

pub const M_START: u16 = 0;
pub const M_RECV: u16 = 1;

/// One scripted payload send: src chare, dst chare, byte count.
#[derive(Clone, Copy, Debug)]
pub struct SendSpec {
    pub src: u32,
    pub dst: u32,
    pub bytes: usize,
}

/// Deterministic fill for spec `k` so destination contents are checkable.
pub fn pattern(k: usize, i: usize) -> f64 {
    ((k * 37 + i * 11) % 512) as f64 + 0.125
}

/// A minimal app: a custom-mapped chare collection, one scripted send per
/// spec (each with its own buffer pair), fixed per-handler host cost, and a
/// log of handler completion cursors.
pub struct CommTestApp {
    pub mapping: Vec<u32>,
    pub sends: Vec<SendSpec>,
    pub host_compute_us: u64,
    pub col: u32,
    pub bufs: Vec<(usize, usize)>,
    /// (method, spec index, cursor after handler charge) per handled entry.
    pub log: Vec<(u16, u64, f64)>,
    /// Extra kernels to enqueue per START handler (work_items, sm_request).
    pub kernels_per_start: Vec<(u64, u32)>,
    /// Whether START handlers perform their scripted send.
    pub send_in_start: bool,
}

impl CommTestApp {
    pub fn new(mapping: Vec<u32>, sends: Vec<SendSpec>) -> Self {
        CommTestApp {
            mapping,
            sends,
            host_compute_us: 0,
            col: 0,
            bufs: Vec::new(),
            log: Vec::new(),
            kernels_per_start: Vec::new(),
            send_in_start: true,
        }
    }
}

impl<T: TimeScalar> App<T> for CommTestApp {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()> {
        let count = self.mapping.len() as u32;
        self.col =
            w.create_collection("test", (count, 1), Mapping::Custom(self.mapping.clone()))?;
        for (k, spec) in self.sends.iter().enumerate() {
            let elems = spec.bytes.div_ceil(8).max(1);
            let src_chare = ChareRef {
                collection: self.col,
                index: spec.src,
            };
            let src_buf = w.dev.buffers.alloc(w.chare_device(src_chare), elems);
            // destinations outside the collection exercise routing errors;
            // park their buffer on the source device
            let dst_dev = if spec.dst < count {
                w.chare_device(ChareRef {
                    collection: self.col,
                    index: spec.dst,
                })
            } else {
                w.chare_device(src_chare)
            };
            let dst_buf = w.dev.buffers.alloc(dst_dev, elems);
            for (i, v) in w.dev.buffers.data_mut(src_buf).iter_mut().enumerate() {
                *v = pattern(k, i);
            }
            self.bufs.push((src_buf, dst_buf));
            out.at(
                SimTime::zero(),
                Action::Deliver {
                    pe: w.chare_pe(src_chare),
                    task: PeTask::Entry(EntryMessage {
                        src: src_chare,
                        dest: src_chare,
                        method: M_START,
                        args: vec![k as u64],
                        payload: None,
                        send_time: SimTime::zero(),
                        transfer: None,
                        routed: false,
                    }),
                },
            );
        }
        Ok(())
    }

    fn handle(
        &mut self,
        w: &mut World<T>,
        out: &mut Outbox<T>,
        ctx: &mut HandlerCtx<T>,
        msg: &EntryMessage<T>,
    ) -> SimResult<()> {
        ctx.charge(T::from_count(self.host_compute_us));
        let k = msg.args[0];
        match msg.method {
            M_START => {
                if self.send_in_start {
                    let spec = self.sends[k as usize];
                    let (src_buf, dst_buf) = self.bufs[k as usize];
                    let dst_chare = ChareRef {
                        collection: self.col,
                        index: spec.dst,
                    };
                    let payload = (spec.bytes > 0).then_some(DevPayload {
                        src_buf,
                        src_off: 0,
                        dst_buf,
                        dst_off: 0,
                        bytes: spec.bytes,
                    });
                    w.send(ctx, out, msg.dest, dst_chare, M_RECV, vec![k], payload)?;
                }
                for &(items, sm) in &self.kernels_per_start {
                    let stream = w.chare_stream(msg.dest);
                    w.enqueue_op(
                        ctx,
                        out,
                        stream,
                        odsim::device::OpKind::Kernel {
                            work_items: items,
                            sm_request: sm,
                            effect: None,
                        },
                        None,
                    )?;
                }
            }
            M_RECV => {}
            other => panic!("unexpected method {other}"),
        }
        self.log.push((msg.method, k, ctx.cursor.to_f64()));
        Ok(())
    }
}

/// Run a CommTestApp on the given topology/config and return (app, world,
/// final clock).
pub fn run_comm_app(
    cfg: &RunConfig<Micros>,
    mapping: Vec<u32>,
    sends: Vec<SendSpec>,
    host_compute_us: u64,
) -> (CommTestApp, odsim::SimWorld, odsim::TimeUs) {
    let mut world = World::build(
        cfg.topology,
        cfg.device.sm_capacity,
        cfg.device.sharing_policy,
        cfg.device.cost,
        cfg.network,
        cfg.runtime,
    )
    .expect("world build");
    let mut engine = odsim::SimEngine::new().with_max_events(cfg.runtime.max_events);
    let mut app = CommTestApp::new(mapping, sends);
    app.host_compute_us = host_compute_us;
    let end = odsim::world::run_to_quiescence(&mut world, &mut app, &mut engine).expect("run");
    (app, world, end)
}

/// Exact rational helper.
pub fn rat(n: i128, d: i128) -> Micros {
    Micros::new(n, d)
}
