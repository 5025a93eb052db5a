//! Kernel launch-rate benchmark: every chare loops kernel -> callback ->
//! kernel on its own stream, firing full-occupancy zero-work kernels, and
//! the completions inside the measurement window are counted.
//!
//! With more than one chare per PE the scheduler can launch the next
//! chare's kernel while the first waits on its callback; the handler's own
//! cost bounds the rate once the PE saturates.

use crate::config::RunConfig;
use crate::device::OpKind;
use crate::error::{SimError, SimResult};
use crate::metrics::Measurements;
use crate::runtime::{ChareRef, EntryMessage, Mapping, PeTask};
use crate::scalar::TimeScalar;
use crate::sim::SimTime;
use crate::world::{Action, App, HandlerCtx, OpMeta, Outbox, World};

const M_FIRE: u16 = 0;
/// Host-side scheduler work per callback handled, in microseconds.
const HANDLER_COST_US: u64 = 1;

pub struct LaunchRateApp {
    chares_per_pe: u64,
    window_us: u64,
    col: u32,
}

impl LaunchRateApp {
    pub fn from_config<T: TimeScalar>(cfg: &RunConfig<T>) -> SimResult<Self> {
        if cfg.app.chares_per_pe == 0 {
            return Err(SimError::Config(
                "launch_rate: chares_per_pe must be >= 1".into(),
            ));
        }
        if cfg.app.window_us == 0 {
            return Err(SimError::Config(
                "launch_rate: window_us must be >= 1".into(),
            ));
        }
        Ok(LaunchRateApp {
            chares_per_pe: cfg.app.chares_per_pe,
            window_us: cfg.app.window_us,
            col: 0,
        })
    }

    fn fire_msg<T: TimeScalar>(chare: ChareRef, at: SimTime<T>) -> EntryMessage<T> {
        EntryMessage {
            src: chare,
            dest: chare,
            method: M_FIRE,
            args: Vec::new(),
            payload: None,
            send_time: at,
            transfer: None,
            routed: false,
        }
    }
}

impl<T: TimeScalar> App<T> for LaunchRateApp {
    fn init(&mut self, w: &mut World<T>, out: &mut Outbox<T>) -> SimResult<()> {
        let n_pes = w.topo.n_pes();
        let count = self.chares_per_pe as u32 * n_pes;
        let mapping: Vec<u32> = (0..count).map(|i| i % n_pes).collect();
        self.col = w.create_collection("firers", (count, 1), Mapping::Custom(mapping))?;
        for index in 0..count {
            let chare = ChareRef {
                collection: self.col,
                index,
            };
            let pe = w.chare_pe(chare);
            out.at(
                SimTime::zero(),
                Action::Deliver {
                    pe,
                    task: PeTask::Entry(Self::fire_msg(chare, SimTime::zero())),
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
        debug_assert_eq!(msg.method, M_FIRE);
        let now = ctx.cursor;
        ctx.charge(T::from_count(HANDLER_COST_US));
        if now >= SimTime(T::from_count(self.window_us)) {
            return Ok(());
        }
        let chare = msg.dest;
        let stream = w.chare_stream(chare);
        let cap = w.dev.sm_capacity(w.chare_device(chare));
        w.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::Kernel {
                work_items: 0,
                sm_request: cap,
                effect: None,
            },
            None,
        )?;
        w.enqueue_op(
            ctx,
            out,
            stream,
            OpKind::HostCallback {
                pe: ctx.pe,
                meta: Some(OpMeta::Task {
                    pe: ctx.pe,
                    task: PeTask::Entry(Self::fire_msg(chare, ctx.cursor)),
                }),
            },
            None,
        )?;
        Ok(())
    }
}

impl<T: TimeScalar> super::Bench<T> for LaunchRateApp {
    fn results(&self, world: &World<T>, _end: SimTime<T>) -> Measurements {
        let window = SimTime(T::from_count(self.window_us));
        let in_window = world
            .dev
            .log
            .iter()
            .filter(|r| r.kind == "kernel" && r.end_us <= window)
            .count() as f64;
        Measurements {
            kernels_per_second: Some(in_window * 1e6 / self.window_us as f64),
            ..Default::default()
        }
    }
}
