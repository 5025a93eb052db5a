//! Deterministic discrete-event engine: virtual clock, totally ordered event
//! queue, and the run loop every other subsystem is driven by.
//!
//! Events are ordered lexicographically by `(time, seq)` where `seq` is a
//! global scheduling counter, so runs with identical inputs produce
//! bit-identical event traces. The engine is strictly single threaded; all
//! simulated entities are only ever touched from inside the run loop.

use crate::error::{SimError, SimResult};
use crate::scalar::TimeScalar;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

/// Virtual time in microseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimTime<T>(pub T);

impl<T: TimeScalar> SimTime<T> {
    pub fn zero() -> Self {
        SimTime(T::zero())
    }

    pub fn from_us(t: T) -> Self {
        SimTime(t)
    }

    pub fn micros(self) -> T {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite_scalar()
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64_lossy()
    }
}

// Scheduled times are finite by construction (schedule rejects anything
// else), so the total order below never observes incomparable values.
impl<T: TimeScalar> Eq for SimTime<T> {}

impl<T: TimeScalar> Ord for SimTime<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("non-finite virtual time in comparison")
    }
}

impl<T: TimeScalar> PartialOrd for SimTime<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: TimeScalar> Add for SimTime<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        SimTime(self.0 + rhs.0)
    }
}

impl<T: TimeScalar> AddAssign for SimTime<T> {
    fn add_assign(&mut self, rhs: Self) {
        self.0 = self.0 + rhs.0;
    }
}

impl<T: TimeScalar> Sub for SimTime<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        SimTime(self.0 - rhs.0)
    }
}

impl<T: TimeScalar> fmt::Display for SimTime<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Identifies the simulated entity an event is delivered to; used for trace
/// output and livelock diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EntityTag {
    pub kind: &'static str,
    pub index: u64,
}

impl fmt::Display for EntityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind, self.index)
    }
}

/// Payload carried by a scheduled event.
pub trait EventPayload {
    fn target(&self) -> EntityTag;
    fn label(&self) -> String;
}

/// An event popped from the queue, handed to the dispatcher.
#[derive(Debug)]
pub struct SimEvent<T, P> {
    pub time: SimTime<T>,
    pub seq: u64,
    pub payload: P,
}

/// Handle returned by `schedule`; permits cancellation before firing.
#[derive(Clone, Copy, Debug)]
pub struct EventHandle<T> {
    time: SimTime<T>,
    seq: u64,
}

/// One line of the optional event trace.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub time_us: f64,
    pub seq: u64,
    pub target: String,
    pub action: String,
}

pub const DEFAULT_MAX_EVENTS: u64 = 100_000_000;

pub struct Engine<T: TimeScalar, P> {
    clock: SimTime<T>,
    next_seq: u64,
    processed: u64,
    max_events: u64,
    queue: BTreeMap<(SimTime<T>, u64), P>,
    target_counts: HashMap<EntityTag, u64>,
    trace: Option<Vec<TraceRow>>,
}

impl<T: TimeScalar, P: EventPayload> Engine<T, P> {
    pub fn new() -> Self {
        Engine {
            clock: SimTime::zero(),
            next_seq: 0,
            processed: 0,
            max_events: DEFAULT_MAX_EVENTS,
            queue: BTreeMap::new(),
            target_counts: HashMap::new(),
            trace: None,
        }
    }

    pub fn with_max_events(mut self, max: u64) -> Self {
        self.max_events = max;
        self
    }

    pub fn set_trace(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.take().unwrap_or_default()
    }

    pub fn now(&self) -> SimTime<T> {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Enqueue an event `delay` after the current clock.
    pub fn schedule(&mut self, delay: SimTime<T>, payload: P) -> SimResult<EventHandle<T>> {
        if !delay.is_finite() || delay < SimTime::zero() {
            return Err(SimError::InvalidArgument(format!(
                "event delay must be finite and non-negative, got {delay}"
            )));
        }
        self.insert(self.clock + delay, payload)
    }

    /// Enqueue an event at an absolute virtual time (must not be in the past).
    pub fn schedule_at(&mut self, time: SimTime<T>, payload: P) -> SimResult<EventHandle<T>> {
        if !time.is_finite() || time < self.clock {
            return Err(SimError::InvalidArgument(format!(
                "event time {time} precedes clock {}",
                self.clock
            )));
        }
        self.insert(time, payload)
    }

    fn insert(&mut self, time: SimTime<T>, payload: P) -> SimResult<EventHandle<T>> {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((time, seq), payload);
        Ok(EventHandle { time, seq })
    }

    /// Remove a not-yet-fired event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle<T>) -> bool {
        self.queue.remove(&(handle.time, handle.seq)).is_some()
    }

    fn pop(&mut self) -> Option<SimEvent<T, P>> {
        let ((time, seq), payload) = self.queue.pop_first()?;
        self.clock = time;
        self.processed += 1;
        Some(SimEvent { time, seq, payload })
    }

    /// Process events in `(time, seq)` order until the queue drains, then
    /// return the final clock. The handler may schedule further events.
    pub fn run_until_quiescent<S, F>(
        &mut self,
        state: &mut S,
        mut handler: F,
    ) -> SimResult<SimTime<T>>
    where
        F: FnMut(&mut Self, &mut S, SimEvent<T, P>) -> SimResult<()>,
    {
        while let Some(ev) = self.pop() {
            let tag = ev.payload.target();
            *self.target_counts.entry(tag).or_insert(0) += 1;
            if self.processed > self.max_events {
                let (hot, count) = self
                    .target_counts
                    .iter()
                    .max_by_key(|(t, c)| (**c, std::cmp::Reverse((t.kind, t.index))))
                    .map(|(t, c)| (t.to_string(), *c))
                    .unwrap_or_else(|| ("unknown".into(), 0));
                return Err(SimError::Livelock {
                    limit: self.max_events,
                    entity: hot,
                    count,
                });
            }
            if let Some(rows) = self.trace.as_mut() {
                rows.push(TraceRow {
                    time_us: ev.time.to_f64(),
                    seq: ev.seq,
                    target: tag.to_string(),
                    action: ev.payload.label(),
                });
            }
            handler(self, state, ev)?;
        }
        Ok(self.clock)
    }
}

impl<T: TimeScalar, P: EventPayload> Default for Engine<T, P> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use num_traits::One;

    type R = Ratio<i128>;

    #[derive(Debug, Clone)]
    struct Tick(u64);

    impl EventPayload for Tick {
        fn target(&self) -> EntityTag {
            EntityTag {
                kind: "tick",
                index: self.0,
            }
        }
        fn label(&self) -> String {
            format!("tick{}", self.0)
        }
    }

    fn us(v: i64) -> SimTime<R> {
        SimTime(R::from_count(v.unsigned_abs()) * if v < 0 { -R::one() } else { R::one() })
    }

    fn drain(eng: &mut Engine<R, Tick>) -> (Vec<u64>, SimTime<R>) {
        let mut order = Vec::new();
        let end = eng
            .run_until_quiescent(&mut order, |_, order, ev| {
                order.push(ev.payload.0);
                Ok(())
            })
            .unwrap();
        (order, end)
    }

    #[test]
    fn empty_run_returns_zero() {
        let mut eng: Engine<R, Tick> = Engine::new();
        let (order, end) = drain(&mut eng);
        assert!(order.is_empty());
        assert_eq!(end, SimTime::zero());
        assert_eq!(eng.now(), SimTime::zero());
    }

    #[test]
    fn equal_times_fire_in_schedule_order() {
        let mut eng: Engine<R, Tick> = Engine::new();
        eng.schedule(us(10), Tick(1)).unwrap();
        eng.schedule(us(10), Tick(2)).unwrap();
        eng.schedule(us(3), Tick(0)).unwrap();
        let (order, end) = drain(&mut eng);
        assert_eq!(order, vec![0, 1, 2]);
        assert_eq!(end, us(10));
    }

    #[test]
    fn zero_delay_fires_after_current_event() {
        // An event scheduled with delay 0 while processing t=5 fires at t=5,
        // after the current event completes.
        let mut eng: Engine<R, Tick> = Engine::new();
        eng.schedule(us(5), Tick(1)).unwrap();
        let mut seen = Vec::new();
        eng.run_until_quiescent(&mut seen, |eng, seen, ev| {
            seen.push((ev.payload.0, ev.time));
            if ev.payload.0 == 1 {
                eng.schedule(SimTime::zero(), Tick(2)).unwrap();
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, us(5)), (2, us(5))]);
    }

    #[test]
    fn negative_delay_rejected() {
        let mut eng: Engine<R, Tick> = Engine::new();
        assert!(matches!(
            eng.schedule(us(-1), Tick(0)),
            Err(SimError::InvalidArgument(_))
        ));
    }

    #[test]
    fn chain_of_four_links_ends_at_forty() {
        let mut eng: Engine<R, Tick> = Engine::new();
        eng.schedule(SimTime::zero(), Tick(0)).unwrap();
        let mut count = 0u64;
        let end = eng
            .run_until_quiescent(&mut count, |eng, count, ev| {
                *count += 1;
                if ev.payload.0 < 4 {
                    eng.schedule(us(10), Tick(ev.payload.0 + 1)).unwrap();
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(count, 5);
        assert_eq!(end, us(40));
    }

    #[test]
    fn now_inside_event_matches_event_time() {
        let mut eng: Engine<R, Tick> = Engine::new();
        eng.schedule(us(17), Tick(0)).unwrap();
        eng.run_until_quiescent(&mut (), |eng, _, ev| {
            assert_eq!(eng.now(), ev.time);
            assert_eq!(eng.now(), us(17));
            Ok(())
        })
        .unwrap();
        assert_eq!(eng.now(), us(17));
    }

    #[test]
    fn cancellation_prevents_firing() {
        let mut eng: Engine<R, Tick> = Engine::new();
        let h = eng.schedule(us(5), Tick(1)).unwrap();
        eng.schedule(us(6), Tick(2)).unwrap();
        assert!(eng.cancel(h));
        assert!(!eng.cancel(h));
        let (order, _) = drain(&mut eng);
        assert_eq!(order, vec![2]);
    }

    #[test]
    fn livelock_guard_names_hot_entity() {
        let mut eng: Engine<R, Tick> = Engine::new().with_max_events(50);
        eng.schedule(SimTime::zero(), Tick(7)).unwrap();
        let err = eng
            .run_until_quiescent(&mut (), |eng, _, _| {
                eng.schedule(SimTime::zero(), Tick(7)).unwrap();
                Ok(())
            })
            .unwrap_err();
        match err {
            SimError::Livelock { entity, .. } => assert_eq!(entity, "tick7"),
            other => panic!("expected livelock, got {other:?}"),
        }
    }

    #[test]
    fn trace_collects_one_row_per_event() {
        let mut eng: Engine<R, Tick> = Engine::new();
        eng.set_trace(true);
        eng.schedule(us(1), Tick(0)).unwrap();
        eng.schedule(us(2), Tick(1)).unwrap();
        drain(&mut eng);
        let rows = eng.take_trace();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].target, "tick0");
        assert_eq!(rows[1].time_us, 2.0);
    }
}
