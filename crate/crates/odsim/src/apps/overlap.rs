//! Overdecomposition overlap benchmark: a fixed amount of work is split
//! into `odf` full-occupancy kernels, pre-enqueued on one stream per chare
//! behind a host-mapped flag, then released simultaneously at t=0. The
//! measurement is the completion time of the last kernel.

use crate::config::RunConfig;
use crate::device::OpKind;
use crate::error::{SimError, SimResult};
use crate::metrics::Measurements;
use crate::runtime::{EntryMessage, Mapping};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use crate::world::{Action, App, HandlerCtx, Outbox, World};

pub struct OverlapApp {
    total_work_items: u64,
    odf: u64,
}

impl OverlapApp {
    pub fn from_config<T: TimeScalar>(cfg: &RunConfig<T>) -> SimResult<Self> {
        let (w, odf) = (cfg.app.total_work_items, cfg.app.odf);
        if odf == 0 {
            return Err(SimError::Config("overlap: odf must be >= 1".into()));
        }
        if w % odf != 0 {
            return Err(SimError::Config(format!(
                "overlap: total_work_items {w} not divisible by odf {odf}"
            )));
        }
        Ok(OverlapApp {
            total_work_items: w,
            odf,
        })
    }
}

impl<T: TimeScalar> App<T> for OverlapApp {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()> {
        let col = w.create_collection("workers", (self.odf as u32, 1), Mapping::Block)?;
        let flag = w.dev.create_flag();
        let per_kernel = self.total_work_items / self.odf;
        for index in 0..self.odf as u32 {
            let chare = crate::runtime::ChareRef {
                collection: col,
                index,
            };
            let stream = w.chare_stream(chare);
            let cap = w.dev.sm_capacity(w.chare_device(chare));
            w.preload_op(out, stream, OpKind::WaitHostFlag { flag })?;
            w.preload_op(
                out,
                stream,
                OpKind::Kernel {
                    work_items: per_kernel,
                    sm_request: cap,
                    effect: None,
                },
            )?;
        }
        out.at(SimTime::zero(), Action::SetFlag { flag });
        Ok(())
    }

    fn handle(
        &mut self,
        _w: &mut World<T>,
        _out: &mut Outbox<T>,
        _ctx: &mut HandlerCtx<T>,
        msg: &EntryMessage<T>,
    ) -> SimResult<()> {
        Err(SimError::Protocol(format!(
            "overlap benchmark received unexpected message m{}",
            msg.method
        )))
    }
}

impl<T: TimeScalar> super::Bench<T> for OverlapApp {
    fn results(&self, _world: &World<T>, end: SimTime<T>) -> Measurements {
        Measurements {
            completion_us: Some(end.to_f64()),
            ..Default::default()
        }
    }
}
