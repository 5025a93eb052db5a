//! Pipelined communication benchmark: a fixed total volume is split across
//! `odf` sender/receiver pairs straddling two nodes. Every receiver can
//! optionally append an O(n) kernel to each receive, so the total time
//! captures both the per-message overhead growth and the benefit of
//! communication/computation overlap.

use crate::config::RunConfig;
use crate::device::OpKind;
use crate::error::{SimError, SimResult};
use crate::metrics::Measurements;
use crate::runtime::{ChareRef, DevPayload, EntryMessage, Mapping, PeTask};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use crate::world::{Action, App, HandlerCtx, Outbox, World};

const M_START: u16 = 0;
const M_RECV: u16 = 1;

pub struct PipelineApp {
    odf: u64,
    with_compute: bool,
    per_pair: u64,
    col: u32,
    bufs: Vec<(usize, usize)>, // (src, dst) per pair
}

impl PipelineApp {
    pub fn from_config<T: TimeScalar>(cfg: &RunConfig<T>) -> SimResult<Self> {
        let (total, odf) = (cfg.app.total_bytes, cfg.app.odf);
        if odf == 0 {
            return Err(SimError::Config("pipeline: odf must be >= 1".into()));
        }
        if total % odf != 0 {
            return Err(SimError::Config(format!(
                "pipeline: total_bytes {total} not divisible by odf {odf}"
            )));
        }
        let per_pair = total / odf;
        if per_pair == 0 || per_pair % 8 != 0 {
            return Err(SimError::Config(format!(
                "pipeline: per-pair payload {per_pair} must be a positive multiple of 8"
            )));
        }
        Ok(PipelineApp {
            odf,
            with_compute: cfg.app.with_compute,
            per_pair,
            col: 0,
            bufs: Vec::new(),
        })
    }

    /// Deterministic payload pattern, checked end-to-end by tests.
    pub fn fill_value(pair: u64, i: u64) -> f64 {
        ((pair * 131 + i * 7) % 1024) as f64 + 0.25
    }
}

impl<T: TimeScalar> App<T> for PipelineApp {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()> {
        if w.topo.nodes < 2 {
            return Err(SimError::Config(
                "pipeline: needs at least 2 nodes (senders on node 0, receivers on node 1)".into(),
            ));
        }
        let pes_per_node = w.topo.n_pes() / w.topo.nodes;
        // pairs interleaved: even chares send from node 0, odd ones receive
        // on node 1, round-robin over each node's PEs
        let mapping: Vec<u32> = (0..2 * self.odf as u32)
            .map(|i| {
                let pair = i / 2;
                if i % 2 == 0 {
                    pair % pes_per_node
                } else {
                    pes_per_node + pair % pes_per_node
                }
            })
            .collect();
        self.col =
            w.create_collection("pairs", (2 * self.odf as u32, 1), Mapping::Custom(mapping))?;
        let elems = (self.per_pair / 8) as usize;
        for pair in 0..self.odf {
            let sender = ChareRef {
                collection: self.col,
                index: 2 * pair as u32,
            };
            let receiver = ChareRef {
                collection: self.col,
                index: 2 * pair as u32 + 1,
            };
            let src = w.dev.buffers.alloc(w.chare_device(sender), elems);
            let dst = w.dev.buffers.alloc(w.chare_device(receiver), elems);
            for (i, v) in w.dev.buffers.data_mut(src).iter_mut().enumerate() {
                *v = Self::fill_value(pair, i as u64);
            }
            self.bufs.push((src, dst));
            let pe = w.chare_pe(sender);
            out.at(
                SimTime::zero(),
                Action::Deliver {
                    pe,
                    task: PeTask::Entry(EntryMessage {
                        src: sender,
                        dest: sender,
                        method: M_START,
                        args: vec![pair],
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
        match msg.method {
            M_START => {
                let pair = msg.args[0];
                let (src, dst) = self.bufs[pair as usize];
                let sender = msg.dest;
                let receiver = ChareRef {
                    collection: self.col,
                    index: sender.index + 1,
                };
                w.send(
                    ctx,
                    out,
                    sender,
                    receiver,
                    M_RECV,
                    vec![pair],
                    Some(DevPayload {
                        src_buf: src,
                        src_off: 0,
                        dst_buf: dst,
                        dst_off: 0,
                        bytes: self.per_pair as usize,
                    }),
                )?;
                Ok(())
            }
            M_RECV => {
                if self.with_compute {
                    let stream = w.chare_stream(msg.dest);
                    let cap = w.dev.sm_capacity(w.chare_device(msg.dest));
                    w.enqueue_op(
                        ctx,
                        out,
                        stream,
                        OpKind::Kernel {
                            work_items: self.per_pair / 8,
                            sm_request: cap,
                            effect: None,
                        },
                        None,
                    )?;
                }
                Ok(())
            }
            other => Err(SimError::Protocol(format!(
                "pipeline: unknown method {other}"
            ))),
        }
    }
}

impl<T: TimeScalar> super::Bench<T> for PipelineApp {
    fn results(&self, world: &World<T>, end: SimTime<T>) -> Measurements {
        let comm = world
            .comm
            .transfers
            .iter()
            .filter_map(|t| t.delivered_us)
            .map(|t| t.to_f64())
            .fold(0.0_f64, f64::max);
        Measurements {
            comm_us: Some(comm),
            total_us: Some(end.to_f64()),
            ..Default::default()
        }
    }
}
