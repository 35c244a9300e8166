//! Producer and consumer application model.
//!
//! The consumer is a single-threaded worker that reads the front queue of an
//! ordered list. Replay mode suppresses external side effects; an already
//! applied sequence number is skipped at no cost.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::broker::{Broker, Message, MessageKind};
use crate::cluster::PodUid;
use crate::sim::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Arrivals {
    /// Inter-publish interval exactly `1 / rate`.
    #[default]
    Constant,
    /// Exponential inter-arrival times with mean `1 / rate`.
    Poisson,
}

/// Rate-driven publisher. In constant mode message `k` (1-based) goes out at
/// `start + k / rate`, computed from `k` so rounding never accumulates.
#[derive(Debug, Clone, PartialEq)]
pub struct Producer {
    pub rate: f64,
    pub arrivals: Arrivals,
    pub start: SimTime,
    pub stopped: bool,
    sent: u64,
    next: SimTime,
}

impl Producer {
    pub fn new(rate: f64, start: SimTime) -> Self {
        let mut p = Producer { rate, arrivals: Arrivals::Constant, start, stopped: false, sent: 0, next: start };
        p.next = p.constant_due(1);
        p
    }

    pub fn poisson<R: Rng>(rate: f64, start: SimTime, rng: &mut R) -> Self {
        let mut p = Producer { rate, arrivals: Arrivals::Poisson, start, stopped: false, sent: 0, next: start };
        p.next = start + p.exp_gap(rng);
        p
    }

    fn constant_due(&self, k: u64) -> SimTime {
        self.start + SimDuration::from_secs_f64(k as f64 / self.rate)
    }

    fn exp_gap<R: Rng>(&self, rng: &mut R) -> SimDuration {
        let exp = Exp::new(self.rate).expect("positive rate");
        SimDuration::from_secs_f64(exp.sample(rng))
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    /// When the next message is due, or None once stopped or if the rate is zero.
    pub fn next_due(&self) -> Option<SimTime> {
        if self.stopped || self.rate <= 0.0 {
            return None;
        }
        Some(self.next)
    }

    pub fn mark_sent<R: Rng>(&mut self, rng: &mut R) {
        self.sent += 1;
        self.next = match self.arrivals {
            Arrivals::Constant => self.constant_due(self.sent + 1),
            Arrivals::Poisson => self.next + self.exp_gap(rng),
        };
    }
}

/// Set of applied sequence numbers stored as a gapless prefix plus extras.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedSet {
    prefix: u64,
    extras: BTreeSet<u64>,
}

impl AppliedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, seq: u64) -> bool {
        seq != 0 && (seq <= self.prefix || self.extras.contains(&seq))
    }

    /// Returns false if `seq` was already present.
    pub fn insert(&mut self, seq: u64) -> bool {
        if self.contains(seq) || seq == 0 {
            return false;
        }
        if seq == self.prefix + 1 {
            self.prefix = seq;
            while self.extras.remove(&(self.prefix + 1)) {
                self.prefix += 1;
            }
        } else {
            self.extras.insert(seq);
        }
        true
    }

    pub fn len(&self) -> u64 {
        self.prefix + self.extras.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `n` such that every seq in `1..=n` is present.
    pub fn prefix(&self) -> u64 {
        self.prefix
    }

    /// Sequence numbers in `1..=upto` that are absent.
    pub fn missing(&self, upto: u64) -> Vec<u64> {
        (self.prefix + 1..=upto).filter(|s| !self.extras.contains(s)).collect()
    }

    pub fn highest(&self) -> u64 {
        self.extras.last().copied().unwrap_or(self.prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsumerMode {
    Normal,
    Replay,
}

/// One message application, reported for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Application {
    pub seq: u64,
    pub at: SimTime,
    pub side_effect: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consumer {
    pub pod: PodUid,
    /// Queue ids, consumed strictly front-first.
    pub queues: Vec<usize>,
    pub mode: ConsumerMode,
    pub applied: AppliedSet,
    /// Held consumers do not read until released.
    pub held: bool,
    pub detached: bool,
    pub service: SimDuration,
    pub busy: Option<Message>,
    pub side_effects: u64,
    pub suppressed: u64,
    pub duplicates_skipped: u64,
}

impl Consumer {
    pub fn new(pod: PodUid, queues: Vec<usize>, service: SimDuration) -> Self {
        Consumer {
            pod,
            queues,
            mode: ConsumerMode::Normal,
            applied: AppliedSet::new(),
            held: false,
            detached: false,
            service,
            busy: None,
            side_effects: 0,
            suppressed: 0,
            duplicates_skipped: 0,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.busy.is_none()
    }

    pub fn processed_count(&self) -> u64 {
        self.applied.len()
    }

    pub fn last_seq(&self) -> u64 {
        self.applied.highest()
    }

    /// Pulls messages until one needs service. Returns the service time if
    /// work started; None if the consumer is idle, held, or detached.
    pub fn start_next(&mut self, broker: &mut Broker) -> Option<SimDuration> {
        if self.held || self.detached || self.busy.is_some() {
            return None;
        }
        loop {
            let &front = self.queues.first()?;
            let m = broker.pop(front)?;
            match m.kind {
                MessageKind::Data if self.applied.contains(m.seq) => self.duplicates_skipped += 1,
                MessageKind::Data => {
                    self.busy = Some(m);
                    return Some(self.service);
                }
                MessageKind::StartReplay => self.mode = ConsumerMode::Replay,
                MessageKind::EndReplay => {
                    self.queues.remove(0);
                    self.mode = ConsumerMode::Normal;
                }
            }
        }
    }

    /// Finishes the in-flight message.
    pub fn complete(&mut self, now: SimTime) -> Option<Application> {
        let m = self.busy.take()?;
        if !self.applied.insert(m.seq) {
            self.duplicates_skipped += 1;
            return None;
        }
        let side_effect = self.mode == ConsumerMode::Normal;
        if side_effect {
            self.side_effects += 1;
        } else {
            self.suppressed += 1;
        }
        Some(Application { seq: m.seq, at: now, side_effect })
    }

    /// Stops reading. Any in-flight message is abandoned.
    pub fn detach(&mut self) -> Option<Message> {
        self.detached = true;
        self.busy.take()
    }
}

/// A pod is healthy when it is ready and its consumer is running.
pub fn health_check(pod_ready: bool, consumer_running: bool) -> bool {
    pod_ready && consumer_running
}
