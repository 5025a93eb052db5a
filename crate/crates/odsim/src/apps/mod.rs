//! The measurable workloads: the pre-enqueued-release overlap benchmark,
//! the kernel launch-rate benchmark, the pipelined inter-node communication
//! benchmark, and the Jacobi2D halo-exchange mini-app.

pub mod jacobi;
pub mod launch_rate;
pub mod overlap;
pub mod pipeline;

use crate::config::RunConfig;
use crate::error::{SimError, SimResult};
use crate::metrics::{collect_counters, Counters, Measurements};
use crate::scalar::TimeScalar;
use crate::sim::{Engine, SimTime, TraceRow};
use crate::world::{run_to_quiescence, App, World};

/// Everything a single simulation run produces.
pub struct RunOutput<T: TimeScalar> {
    pub final_clock: SimTime<T>,
    pub measurements: Measurements,
    pub counters: Counters,
    pub trace: Option<Vec<TraceRow>>,
    pub world: World<T>,
}

/// Apps report their measurements after quiescence.
pub trait Bench<T: TimeScalar>: App<T> {
    fn results(&self, world: &World<T>, end: SimTime<T>) -> Measurements;
}

/// Instantiate the application registered under the config's app name.
pub fn build_app<T: TimeScalar>(cfg: &RunConfig<T>) -> SimResult<Box<dyn Bench<T>>> {
    match cfg.app.name.as_str() {
        "overlap" => Ok(Box::new(overlap::OverlapApp::from_config(cfg)?)),
        "launch_rate" => Ok(Box::new(launch_rate::LaunchRateApp::from_config(cfg)?)),
        "pipeline" => Ok(Box::new(pipeline::PipelineApp::from_config(cfg)?)),
        "jacobi2d" => Ok(Box::new(jacobi::JacobiApp::from_config(cfg)?)),
        other => Err(SimError::Config(format!(
            "unknown app `{other}` (expected jacobi2d, launch_rate, overlap, or pipeline)"
        ))),
    }
}

/// Build the world from the config, run the app to quiescence, and collect
/// measurements, counters and optional traces.
pub fn run_once<T: TimeScalar>(cfg: &RunConfig<T>, trace: bool) -> SimResult<RunOutput<T>> {
    let mut world = World::build(
        cfg.topology,
        cfg.device.sm_capacity,
        cfg.device.sharing_policy,
        cfg.device.cost,
        cfg.network,
        cfg.runtime,
    )?;
    let mut engine = Engine::new().with_max_events(cfg.runtime.max_events);
    engine.set_trace(trace);
    let mut app = build_app(cfg)?;
    let end = run_to_quiescence(&mut world, &mut *app, &mut engine)?;
    debug_assert_eq!(world.sends, world.deliveries, "message conservation");
    let measurements = app.results(&world, end);
    let counters = collect_counters(&mut world, end);
    Ok(RunOutput {
        final_clock: end,
        measurements,
        counters,
        trace: trace.then(|| engine.take_trace()),
        world,
    })
}
