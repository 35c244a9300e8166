//! Deterministic discrete-event core.
//!
//! Time is kept as integer microseconds ([`SimTime`]) so that long runs never
//! accumulate floating point drift. Events are ordered by `(time, sequence)`,
//! where the sequence number is the insertion order; two events scheduled for
//! the same instant therefore fire in the order they were scheduled.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MICROS_PER_SEC: f64 = 1_000_000.0;

/// A point on the simulated timeline, in microseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(u64);

/// A non-negative span of simulated time, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimDuration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Rounds to the nearest microsecond. Negative inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        SimTime(secs_to_micros(secs))
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimDuration(ms * 1000)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        SimDuration(secs_to_micros(secs))
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC
    }

    pub fn saturating_sub(self, other: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_sub(other.0))
    }
}

fn secs_to_micros(secs: f64) -> u64 {
    if secs.is_finite() && secs > 0.0 {
        (secs * MICROS_PER_SEC).round() as u64
    } else {
        0
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        self.since(rhs)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}s", self.as_secs_f64())
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}s", self.as_secs_f64())
    }
}

/// How the duration of a timed operation is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub kind: DurationKind,
    /// Median duration in seconds.
    pub median: f64,
    /// Half-width of the uniform jitter band, as a fraction of the median.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DurationKind {
    Constant,
    UniformJitter,
}

/// Smallest duration a sample may return; sampled durations are strictly positive.
const MIN_SAMPLE: SimDuration = SimDuration::from_micros(1);

impl DurationModel {
    pub const fn constant(median: f64) -> Self {
        DurationModel { kind: DurationKind::Constant, median, jitter: 0.0 }
    }

    pub const fn jittered(median: f64, jitter: f64) -> Self {
        DurationModel { kind: DurationKind::UniformJitter, median, jitter }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.median.is_finite() && self.median >= 0.0) {
            return Err(SimError::InvalidModel(format!("median {} must be finite and >= 0", self.median)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(SimError::InvalidModel(format!("jitter {} must lie in [0, 1)", self.jitter)));
        }
        Ok(())
    }

    /// Draws a duration. A constant model never touches the RNG, so adding or
    /// removing constant operations does not perturb other streams.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimDuration {
        let secs = match self.kind {
            DurationKind::Constant => self.median,
            DurationKind::UniformJitter if self.jitter == 0.0 => self.median,
            DurationKind::UniformJitter => {
                let u: f64 = rng.random_range(-self.jitter..self.jitter);
                self.median * (1.0 + u)
            }
        };
        SimDuration::from_secs_f64(secs).max(MIN_SAMPLE)
    }

    /// The duration a zero-jitter draw would return.
    pub fn nominal(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.median).max(MIN_SAMPLE)
    }
}

/// Seeded random stream used for every stochastic choice in a run.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event scheduled in the past: at {at} but clock is {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },
    #[error("invalid duration model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(u64);

struct Entry<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Virtual clock plus ordered event queue.
pub struct EventQueue<E> {
    now: SimTime,
    heap: BinaryHeap<Reverse<Entry<E>>>,
    next_seq: u64,
    cancelled: BTreeSet<u64>,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { now: SimTime::ZERO, heap: BinaryHeap::new(), next_seq: 0, cancelled: BTreeSet::new(), dispatched: 0 }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of events popped so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::ScheduledInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { at, seq, event }));
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: SimDuration, event: E) -> EventId {
        let at = self.now + delay;
        self.schedule(at, event).expect("a relative delay is never in the past")
    }

    /// Cancels a pending event. Cancelling an already-fired id is a no-op.
    pub fn cancel(&mut self, id: EventId) {
        if self.heap.iter().any(|Reverse(e)| e.seq == id.0) {
            self.cancelled.insert(id.0);
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.skip_cancelled();
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    /// Pops the next event at or before `deadline`, advancing the clock to it.
    pub fn pop_until(&mut self, deadline: SimTime) -> Option<(SimTime, E)> {
        self.skip_cancelled();
        let Reverse(head) = self.heap.peek()?;
        if head.at > deadline {
            return None;
        }
        let Reverse(entry) = self.heap.pop().expect("peeked");
        debug_assert!(entry.at >= self.now, "clock moved backwards");
        self.now = entry.at;
        self.dispatched += 1;
        Some((entry.at, entry.event))
    }

    /// Advances the clock to `deadline` once no events at or before it remain.
    pub fn advance_to(&mut self, deadline: SimTime) {
        if deadline > self.now {
            self.now = deadline;
        }
    }

    /// Dispatches every event with time at or before `deadline` to `handler`,
    /// then leaves the clock at `deadline`. Returns the final clock value.
    pub fn run_until<F>(&mut self, deadline: SimTime, mut handler: F) -> SimTime
    where
        F: FnMut(&mut Self, SimTime, E),
    {
        while let Some((at, event)) = self.pop_until(deadline) {
            handler(self, at, event);
        }
        self.advance_to(deadline);
        self.now
    }

    fn skip_cancelled(&mut self) {
        while let Some(Reverse(head)) = self.heap.peek() {
            if self.cancelled.remove(&head.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }
}
