//! In-memory message broker: one fanout exchange, named FIFO queues with
//! runtime bind/unbind, and per-queue accounting for conservation checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("queue {0} does not exist")]
    UnknownQueue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Data,
    StartReplay,
    EndReplay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    /// Producer sequence number; 0 for control messages.
    pub seq: u64,
    pub published_at: SimTime,
    pub kind: MessageKind,
}

impl Message {
    pub fn data(seq: u64, published_at: SimTime) -> Self {
        Message { seq, published_at, kind: MessageKind::Data }
    }

    pub fn control(kind: MessageKind, at: SimTime) -> Self {
        Message { seq: 0, published_at: at, kind }
    }

    pub fn is_control(&self) -> bool {
        self.kind != MessageKind::Data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub consumed: u64,
    pub purged: u64,
    pub moved_out: u64,
    pub dropped_on_delete: u64,
    pub depth: u64,
}

impl QueueStats {
    /// Every message that entered the queue is accounted for exactly once.
    pub fn conserved(&self) -> bool {
        self.enqueued == self.consumed + self.purged + self.moved_out + self.dropped_on_delete + self.depth
    }
}

#[derive(Debug, Clone)]
pub struct Queue {
    pub name: String,
    messages: VecDeque<Message>,
    stats: QueueStats,
    pub deleted: bool,
    injected_start: bool,
    injected_end: bool,
    first_bind_seq: Option<u64>,
}

impl Queue {
    fn new(name: &str) -> Self {
        Queue {
            name: name.to_string(),
            messages: VecDeque::new(),
            stats: QueueStats::default(),
            deleted: false,
            injected_start: false,
            injected_end: false,
            first_bind_seq: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.messages.len()
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats { depth: self.messages.len() as u64, ..self.stats }
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter()
    }

    fn push_back(&mut self, m: Message) {
        self.stats.enqueued += 1;
        self.messages.push_back(m);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Broker {
    queues: Vec<Queue>,
    by_name: BTreeMap<String, usize>,
    bindings: BTreeSet<usize>,
    /// Publish time of every data message; index `seq - 1`.
    publish_times: Vec<SimTime>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates the queue if missing; returns its id. A deleted queue of the
    /// same name is replaced by a fresh one.
    pub fn declare_queue(&mut self, name: &str) -> usize {
        if let Some(&id) = self.by_name.get(name) {
            if !self.queues[id].deleted {
                return id;
            }
        }
        let id = self.queues.len();
        self.queues.push(Queue::new(name));
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn queue_id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied().filter(|&id| !self.queues[id].deleted)
    }

    fn id(&self, name: &str) -> Result<usize, BrokerError> {
        self.queue_id(name).ok_or_else(|| BrokerError::UnknownQueue(name.to_string()))
    }

    pub fn queue(&self, id: usize) -> &Queue {
        &self.queues[id]
    }

    pub fn queue_by_name(&self, name: &str) -> Option<&Queue> {
        self.queue_id(name).map(|id| &self.queues[id])
    }

    pub fn all_queues(&self) -> impl Iterator<Item = &Queue> {
        self.queues.iter()
    }

    pub fn exists(&self, name: &str) -> bool {
        self.queue_id(name).is_some()
    }

    pub fn depth(&self, name: &str) -> usize {
        self.queue_by_name(name).map_or(0, Queue::depth)
    }

    /// Deletes the queue. Messages still in it are counted as dropped.
    pub fn delete_queue(&mut self, name: &str) -> Result<u64, BrokerError> {
        let id = self.id(name)?;
        self.bindings.remove(&id);
        let q = &mut self.queues[id];
        let dropped = q.messages.len() as u64;
        q.stats.dropped_on_delete += dropped;
        q.messages.clear();
        q.deleted = true;
        Ok(dropped)
    }

    /// Binds the queue to the exchange. Returns the last sequence number
    /// published before the binding took effect.
    pub fn bind(&mut self, name: &str) -> Result<u64, BrokerError> {
        let id = self.id(name)?;
        self.bindings.insert(id);
        let seq = self.last_seq();
        self.queues[id].first_bind_seq.get_or_insert(seq);
        Ok(seq)
    }

    /// Sequence number returned by the queue's first [`Broker::bind`].
    pub fn first_bind_seq(&self, name: &str) -> Option<u64> {
        self.queue_by_name(name).and_then(|q| q.first_bind_seq)
    }

    pub fn unbind(&mut self, name: &str) -> Result<(), BrokerError> {
        let id = self.id(name)?;
        self.bindings.remove(&id);
        Ok(())
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.queue_id(name).is_some_and(|id| self.bindings.contains(&id))
    }

    pub fn bound_queues(&self) -> Vec<String> {
        self.bindings.iter().map(|&id| self.queues[id].name.clone()).collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.publish_times.len() as u64
    }

    pub fn publish_time(&self, seq: u64) -> Option<SimTime> {
        seq.checked_sub(1).and_then(|i| self.publish_times.get(i as usize)).copied()
    }

    /// Highest sequence number published at or before `t`.
    pub fn last_seq_at(&self, t: SimTime) -> u64 {
        self.publish_times.partition_point(|&p| p <= t) as u64
    }

    /// Publishes the next data message to every bound queue. Returns its
    /// sequence number and the ids of the queues that received it.
    pub fn publish(&mut self, now: SimTime) -> (u64, Vec<usize>) {
        self.publish_times.push(now);
        let seq = self.last_seq();
        let m = Message::data(seq, now);
        let targets: Vec<usize> = self.bindings.iter().copied().collect();
        for &id in &targets {
            self.queues[id].push_back(m);
        }
        (seq, targets)
    }

    /// Assigns the next sequence number without delivering the message
    /// anywhere. Used to inject message loss when testing the auditor.
    #[doc(hidden)]
    pub fn publish_undelivered(&mut self, now: SimTime) -> u64 {
        self.publish_times.push(now);
        self.last_seq()
    }

    /// Injects a control message at the head or tail. Each control kind is
    /// injected at most once per queue; repeated calls are no-ops that
    /// return false.
    pub fn inject_control(&mut self, name: &str, kind: MessageKind, at_head: bool, now: SimTime) -> Result<bool, BrokerError> {
        let id = self.id(name)?;
        let q = &mut self.queues[id];
        let flag = match kind {
            MessageKind::StartReplay => &mut q.injected_start,
            MessageKind::EndReplay => &mut q.injected_end,
            MessageKind::Data => return Ok(false),
        };
        if *flag {
            return Ok(false);
        }
        *flag = true;
        let m = Message::control(kind, now);
        q.stats.enqueued += 1;
        if at_head {
            q.messages.push_front(m);
        } else {
            q.messages.push_back(m);
        }
        Ok(true)
    }

    pub fn has_injected(&self, name: &str, kind: MessageKind) -> bool {
        self.queue_by_name(name).is_some_and(|q| match kind {
            MessageKind::StartReplay => q.injected_start,
            MessageKind::EndReplay => q.injected_end,
            MessageKind::Data => false,
        })
    }

    pub fn peek(&self, id: usize) -> Option<&Message> {
        let q = &self.queues[id];
        if q.deleted {
            None
        } else {
            q.messages.front()
        }
    }

    pub fn pop(&mut self, id: usize) -> Option<Message> {
        let q = &mut self.queues[id];
        if q.deleted {
            return None;
        }
        let m = q.messages.pop_front()?;
        q.stats.consumed += 1;
        Some(m)
    }

    /// Moves every message from `src` to the tail of `dst`, in order.
    pub fn drain_to(&mut self, src: &str, dst: &str) -> Result<u64, BrokerError> {
        let s = self.id(src)?;
        let d = self.id(dst)?;
        let moved: Vec<Message> = self.queues[s].messages.drain(..).collect();
        let n = moved.len() as u64;
        self.queues[s].stats.moved_out += n;
        for m in moved {
            self.queues[d].push_back(m);
        }
        Ok(n)
    }

    /// Discards every message in the queue.
    pub fn purge(&mut self, name: &str) -> Result<Vec<Message>, BrokerError> {
        let id = self.id(name)?;
        let q = &mut self.queues[id];
        let purged: Vec<Message> = q.messages.drain(..).collect();
        q.stats.purged += purged.len() as u64;
        Ok(purged)
    }

    /// Per-queue accounting for every queue ever declared.
    pub fn stats(&self) -> Vec<(String, QueueStats)> {
        self.queues.iter().map(|q| (q.name.clone(), q.stats())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: f64) -> SimTime {
        SimTime::from_secs_f64(s)
    }

    #[test]
    fn fanout_copies_to_both_bound_queues() {
        let mut b = Broker::new();
        b.declare_queue("primary");
        b.declare_queue("replay");
        b.bind("primary").unwrap();
        b.bind("replay").unwrap();
        let (seq, targets) = b.publish(t(1.0));
        assert_eq!(seq, 1);
        assert_eq!(targets.len(), 2);
        assert_eq!(b.depth("primary"), 1);
        assert_eq!(b.depth("replay"), 1);
    }

    #[test]
    fn binding_is_not_retroactive() {
        let mut b = Broker::new();
        b.declare_queue("primary");
        b.declare_queue("replay");
        b.bind("primary").unwrap();
        for i in 0..3 {
            b.publish(t(i as f64));
        }
        assert_eq!(b.bind("replay").unwrap(), 3);
        b.publish(t(4.0));
        b.unbind("replay").unwrap();
        assert_eq!(b.bind("replay").unwrap(), 4);
        assert_eq!(b.first_bind_seq("replay"), Some(3));
        b.publish(t(5.0));
        let seqs: Vec<u64> = b.queue_by_name("replay").unwrap().messages().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![4, 5]);
        assert_eq!(b.first_bind_seq("primary"), Some(0));
    }

    #[test]
    fn unbound_queue_stops_receiving_and_keeps_backlog() {
        let mut b = Broker::new();
        b.declare_queue("replay");
        b.bind("replay").unwrap();
        b.publish(t(0.0));
        b.unbind("replay").unwrap();
        b.publish(t(1.0));
        assert_eq!(b.depth("replay"), 1);
    }

    #[test]
    fn no_bindings_means_publish_reaches_nobody() {
        let mut b = Broker::new();
        b.declare_queue("primary");
        let (_, targets) = b.publish(t(0.0));
        assert!(targets.is_empty());
        assert_eq!(b.depth("primary"), 0);
    }

    #[test]
    fn control_injection_is_idempotent() {
        let mut b = Broker::new();
        b.declare_queue("replay");
        b.bind("replay").unwrap();
        b.publish(t(0.0));
        assert!(b.inject_control("replay", MessageKind::StartReplay, true, t(1.0)).unwrap());
        assert!(!b.inject_control("replay", MessageKind::StartReplay, true, t(1.0)).unwrap());
        let id = b.queue_id("replay").unwrap();
        assert_eq!(b.peek(id).unwrap().kind, MessageKind::StartReplay);
        assert_eq!(b.depth("replay"), 2);
    }

    #[test]
    fn drain_preserves_order() {
        let mut b = Broker::new();
        b.declare_queue("buffer");
        b.declare_queue("primary");
        b.bind("buffer").unwrap();
        for i in 0..4 {
            b.publish(t(i as f64));
        }
        assert_eq!(b.drain_to("buffer", "primary").unwrap(), 4);
        let seqs: Vec<u64> = b.queue_by_name("primary").unwrap().messages().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4]);
        assert!(b.stats().iter().all(|(_, s)| s.conserved()));
    }

    #[test]
    fn last_seq_at_uses_publish_history() {
        let mut b = Broker::new();
        for i in 1..=5 {
            b.publish(t(i as f64));
        }
        assert_eq!(b.last_seq_at(t(0.5)), 0);
        assert_eq!(b.last_seq_at(t(3.0)), 3);
        assert_eq!(b.last_seq_at(t(9.0)), 5);
        assert_eq!(b.publish_time(2), Some(t(2.0)));
        assert_eq!(b.publish_time(0), None);
    }

    #[test]
    fn deleted_queue_can_be_redeclared_fresh() {
        let mut b = Broker::new();
        b.declare_queue("replay");
        b.bind("replay").unwrap();
        b.publish(t(0.0));
        assert_eq!(b.delete_queue("replay").unwrap(), 1);
        assert!(!b.exists("replay"));
        b.declare_queue("replay");
        assert_eq!(b.depth("replay"), 0);
        assert!(!b.is_bound("replay"));
        assert_eq!(b.stats().len(), 2);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Publish,
        Bind(usize),
        Unbind(usize),
        Pop(usize),
        Purge(usize),
        Drain(usize, usize),
        Inject(usize, bool),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => Just(Op::Publish),
            1 => (0..3usize).prop_map(Op::Bind),
            1 => (0..3usize).prop_map(Op::Unbind),
            3 => (0..3usize).prop_map(Op::Pop),
            1 => (0..3usize).prop_map(Op::Purge),
            1 => (0..3usize, 0..3usize).prop_map(|(a, b)| Op::Drain(a, b)),
            1 => (0..3usize, any::<bool>()).prop_map(|(a, h)| Op::Inject(a, h)),
        ]
    }

    proptest! {
        #[test]
        fn every_queue_conserves_messages(ops in prop::collection::vec(op(), 0..200)) {
            let names = ["a", "b", "c"];
            let mut b = Broker::new();
            for n in names {
                b.declare_queue(n);
            }
            for (i, o) in ops.into_iter().enumerate() {
                let now = SimTime::from_micros(i as u64);
                match o {
                    Op::Publish => { b.publish(now); }
                    Op::Bind(q) => { b.bind(names[q]).unwrap(); }
                    Op::Unbind(q) => { b.unbind(names[q]).unwrap(); }
                    Op::Pop(q) => { let id = b.queue_id(names[q]).unwrap(); b.pop(id); }
                    Op::Purge(q) => { b.purge(names[q]).unwrap(); }
                    Op::Drain(s, d) if s != d => { b.drain_to(names[s], names[d]).unwrap(); }
                    Op::Drain(..) => {}
                    Op::Inject(q, h) => { b.inject_control(names[q], MessageKind::EndReplay, h, now).unwrap(); }
                }
                for (name, s) in b.stats() {
                    prop_assert!(s.conserved(), "{name}: {s:?}");
                }
            }
        }

        #[test]
        fn data_in_each_queue_stays_in_publish_order(ops in prop::collection::vec(op(), 0..200)) {
            let names = ["a", "b", "c"];
            let mut b = Broker::new();
            for n in names {
                b.declare_queue(n);
            }
            for (i, o) in ops.into_iter().enumerate() {
                let now = SimTime::from_micros(i as u64);
                match o {
                    Op::Publish => { b.publish(now); }
                    Op::Bind(q) => { b.bind(names[q]).unwrap(); }
                    Op::Unbind(q) => { b.unbind(names[q]).unwrap(); }
                    Op::Pop(q) => { let id = b.queue_id(names[q]).unwrap(); b.pop(id); }
                    _ => {}
                }
            }
            for n in names {
                let seqs: Vec<u64> = b.queue_by_name(n).unwrap().messages().map(|m| m.seq).collect();
                prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
