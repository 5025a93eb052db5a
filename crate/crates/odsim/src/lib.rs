//! odsim: a deterministic discrete-event simulator of an overdecomposed,
//! GPU-aware asynchronous-tasking runtime.
//!
//! The simulator models a node/GPU/process/PE hierarchy with chare
//! collections scheduled onto PEs, a GPU with streams, launch costs,
//! occupancy-gated kernels, events and host callbacks, and a communication
//! layer that picks between intra-process device copies, intra-node IPC
//! staging and inter-node one-sided gets based on a pre-filled location
//! table. Four benchmark applications (overlap, launch_rate, pipeline,
//! jacobi2d) reproduce the cost trends of overdecomposed GPU execution at
//! desk scale.
//!
//! Everything that touches virtual time is generic over a
//! [`scalar::TimeScalar`]; the default instantiation below uses exact
//! rational microseconds so that identical configurations yield
//! bit-identical results.

pub mod apps;
pub mod cli;
pub mod comm;
pub mod config;
pub mod device;
pub mod error;
pub mod metrics;
pub mod runtime;
pub mod scalar;
pub mod sim;
pub mod world;

/// Exact-rational microsecond scalar: the default for every run.
pub type Micros = num_rational::Ratio<i128>;

/// Virtual time under the default scalar.
pub type TimeUs = sim::SimTime<Micros>;

/// The default world instantiation.
pub type SimWorld = world::World<Micros>;

/// The default engine instantiation.
pub type SimEngine = sim::Engine<Micros, world::Action<Micros>>;

/// The default run configuration.
pub type SimConfig = config::RunConfig<Micros>;

pub use error::{SimError, SimResult};
pub use scalar::TimeScalar;
