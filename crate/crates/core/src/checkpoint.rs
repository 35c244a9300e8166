//! Checkpoint archives, transfer modes, and restore semantics.
//!
//! Timing is driven by the simulation loop; this module owns the data: what
//! an archive captures, how long a transfer takes, and what a restored
//! consumer starts with.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::Message;
use crate::cluster::{Cluster, PodUid};
use crate::sim::{DurationModel, SimDuration, SimTime};
use crate::workload::{AppliedSet, Consumer, ConsumerMode};

pub const DEFAULT_ARCHIVE_BYTES: u64 = 27 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("pod {0} is not running a consumer")]
    PodNotRunning(String),
    #[error("node {0} has no checkpoint agent")]
    AgentMissing(String),
    #[error("image {image} not present on node {node}")]
    ImageNotPresent { image: String, node: String },
}

/// Consumer state captured at the pause instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerSnapshot {
    pub applied: AppliedSet,
    pub mode: ConsumerMode,
    pub side_effects: u64,
    /// Message taken off the queue but not yet applied at the pause instant.
    pub in_flight: Option<Message>,
}

impl ConsumerSnapshot {
    pub fn of(c: &Consumer) -> Self {
        ConsumerSnapshot { applied: c.applied.clone(), mode: c.mode, side_effects: c.side_effects, in_flight: c.busy }
    }

    pub fn last_seq(&self) -> u64 {
        self.applied.highest()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointArchive {
    pub id: String,
    pub snapshot: ConsumerSnapshot,
    pub captured_hostname: String,
    pub size_bytes: u64,
    pub created_at: SimTime,
    pub source_node: String,
}

impl CheckpointArchive {
    pub fn image_ref(&self) -> String {
        format!("localhost/checkpoint-{}:latest", self.id)
    }
}

/// Builds a fresh consumer for `pod` from the archive. The in-flight message
/// is processed first, before anything read from the queues.
pub fn restore_consumer(archive: &CheckpointArchive, pod: PodUid, queues: Vec<usize>, service: SimDuration) -> (Consumer, Option<Message>) {
    let mut c = Consumer::new(pod, queues, service);
    c.applied = archive.snapshot.applied.clone();
    c.mode = archive.snapshot.mode;
    c.side_effects = archive.snapshot.side_effects;
    (c, archive.snapshot.in_flight)
}

/// The name a restored process should use for its own identity. The kernel
/// hostname captured in the archive is stale after a restore under a new pod
/// name, so the pod's actual name always wins.
pub fn resolve_hostname(_archive: &CheckpointArchive, actual_pod_name: &str) -> String {
    actual_pod_name.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransferKind {
    RegistryJob,
    AgentRegistry,
    Direct,
}

impl TransferKind {
    pub fn needs_agent(self) -> bool {
        matches!(self, TransferKind::AgentRegistry | TransferKind::Direct)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransferLatency {
    Fixed(DurationModel),
    /// Size-proportional latency for sensitivity runs.
    Throughput { bytes_per_sec: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferMode {
    pub kind: TransferKind,
    pub latency: TransferLatency,
}

impl TransferMode {
    pub fn fixed(kind: TransferKind, latency: DurationModel) -> Self {
        TransferMode { kind, latency: TransferLatency::Fixed(latency) }
    }

    pub fn check_agents(&self, cluster: &Cluster, source: &str, target: &str) -> Result<(), CheckpointError> {
        if !self.kind.needs_agent() {
            return Ok(());
        }
        for node in [source, target] {
            if !cluster.nodes.get(node).is_some_and(|n| n.has_agent) {
                return Err(CheckpointError::AgentMissing(node.to_string()));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, archive: &CheckpointArchive, rng: &mut R) -> SimDuration {
        match self.latency {
            TransferLatency::Fixed(m) => m.sample(rng),
            TransferLatency::Throughput { bytes_per_sec } => {
                SimDuration::from_secs_f64(archive.size_bytes as f64 / bytes_per_sec)
            }
        }
    }
}

/// Archives by id. Archives are immutable once stored.
#[derive(Debug, Clone, Default)]
pub struct ArchiveStore {
    archives: BTreeMap<String, CheckpointArchive>,
}

impl ArchiveStore {
    pub fn insert(&mut self, archive: CheckpointArchive) {
        self.archives.entry(archive.id.clone()).or_insert(archive);
    }

    pub fn get(&self, id: &str) -> Option<&CheckpointArchive> {
        self.archives.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.archives.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.archives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.archives.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CheckpointArchive> {
        self.archives.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::Broker;
    use crate::sim::seeded_rng;

    fn archive(hostname: &str) -> CheckpointArchive {
        let mut c = Consumer::new(1, vec![], SimDuration::from_millis(12));
        for s in 1..=5 {
            c.applied.insert(s);
        }
        CheckpointArchive {
            id: "m1-a".into(),
            snapshot: ConsumerSnapshot::of(&c),
            captured_hostname: hostname.into(),
            size_bytes: DEFAULT_ARCHIVE_BYTES,
            created_at: SimTime::ZERO,
            source_node: "worker-1".into(),
        }
    }

    #[test]
    fn hostname_resolution_uses_actual_pod_name() {
        let a = archive("consumer-0");
        assert_eq!(resolve_hostname(&a, "consumer-0-shadow"), "consumer-0-shadow");
        assert_eq!(resolve_hostname(&a, "consumer-0"), "consumer-0");
        let b = archive("consumer-0-shadow");
        assert_eq!(resolve_hostname(&b, "consumer-0"), "consumer-0");
    }

    #[test]
    fn restoring_twice_gives_identical_state() {
        let a = archive("consumer-0");
        let (c1, f1) = restore_consumer(&a, 7, vec![], SimDuration::from_millis(12));
        let (c2, f2) = restore_consumer(&a, 8, vec![], SimDuration::from_millis(12));
        assert_eq!(c1.applied, c2.applied);
        assert_eq!(f1, f2);
        assert_eq!(c1.last_seq(), a.snapshot.last_seq());
        assert_eq!(c1.applied, a.snapshot.applied);
    }

    #[test]
    fn snapshot_captures_in_flight_message() {
        let mut b = Broker::new();
        let q = b.declare_queue("primary");
        b.bind("primary").unwrap();
        b.publish(SimTime::ZERO);
        let mut c = Consumer::new(1, vec![q], SimDuration::from_millis(12));
        c.start_next(&mut b).unwrap();
        let snap = ConsumerSnapshot::of(&c);
        assert_eq!(snap.in_flight.map(|m| m.seq), Some(1));
        assert_eq!(snap.last_seq(), 0);
    }

    #[test]
    fn transfer_latencies() {
        let mut rng = seeded_rng(1);
        let a = archive("consumer-0");
        let reg = TransferMode::fixed(TransferKind::RegistryJob, DurationModel::constant(5.35));
        assert_eq!(reg.sample(&a, &mut rng), SimDuration::from_secs_f64(5.35));
        let agent = TransferMode::fixed(TransferKind::AgentRegistry, DurationModel::constant(0.19));
        assert_eq!(agent.sample(&a, &mut rng), SimDuration::from_secs_f64(0.19));
        let tput = TransferMode { kind: TransferKind::Direct, latency: TransferLatency::Throughput { bytes_per_sec: 27.0 * 1024.0 * 1024.0 } };
        assert_eq!(tput.sample(&a, &mut rng), SimDuration::from_secs_f64(1.0));
    }

    #[test]
    fn agent_modes_require_agents() {
        let mut cluster = Cluster::new(SimDuration::ZERO);
        cluster.add_node("worker-1", true);
        cluster.add_node("worker-2", false);
        let direct = TransferMode::fixed(TransferKind::Direct, DurationModel::constant(1.0));
        assert_eq!(direct.check_agents(&cluster, "worker-1", "worker-2"), Err(CheckpointError::AgentMissing("worker-2".into())));
        let reg = TransferMode::fixed(TransferKind::RegistryJob, DurationModel::constant(5.35));
        assert!(reg.check_agents(&cluster, "worker-1", "worker-2").is_ok());
    }

    #[test]
    fn store_keeps_first_archive_per_id() {
        let mut s = ArchiveStore::default();
        s.insert(archive("consumer-0"));
        s.insert(archive("other"));
        assert_eq!(s.len(), 1);
        assert_eq!(s.get("m1-a").unwrap().captured_hostname, "consumer-0");
    }
}
