//! One simulated cluster: the event loop plus every component it drives.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audit::Auditor;
use crate::broker::Broker;
use crate::checkpoint::{resolve_hostname, restore_consumer, ArchiveStore, TransferKind, TransferMode};
use crate::cluster::{Cluster, ClusterEvent, Labels, Lifecycle, PodTemplate, PodTimer, PullPolicy, StatefulSetRecord};
use crate::cluster::PodUid;
use crate::probe::{ProbeTrace, DEFAULT_GAP_THRESHOLD, DEFAULT_INTERVAL};
use crate::reconciler::{
    Backoff, CutoffPolicy, FaultPlan, MigrationResource, MigrationSpec, MigrationStatus, QueueConfig, StrategyRequest,
};
use crate::sim::{seeded_rng, DurationModel, EventQueue, SimDuration, SimTime};
use crate::workload::{Arrivals, Consumer, Producer};

pub const SOURCE_NODE: &str = "worker-1";
pub const TARGET_NODE: &str = "worker-2";
pub const APP: &str = "consumer";
pub const SERVICE: &str = "consumer";
pub const APP_IMAGE: &str = "registry.local/consumer:1.0";
pub const EXCHANGE: &str = "events";
pub const PRIMARY_QUEUE: &str = "events.consumer";
pub const REPLAY_QUEUE: &str = "events.consumer.replay";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    StatefulSet,
    Deployment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub workload: WorkloadKind,
    pub strategy: StrategyRequest,
    pub transfer: TransferKind,
}

/// Every timing knob of a run, already resolved for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub rate: f64,
    pub arrivals: Arrivals,
    pub mu: f64,
    pub warmup: f64,
    pub cutoff: CutoffPolicy,
    pub grace: f64,
    pub checkpoint: DurationModel,
    pub transfer: TransferMode,
    pub restore_shadow: DurationModel,
    /// Source-gone to target-ready delay of the stop-recreate cycle.
    pub recreate_restore: DurationModel,
    pub finalize: DurationModel,
    pub broker_op: DurationModel,
    pub swap_recheckpoint: DurationModel,
    pub swap_image_build: DurationModel,
    pub swap_restore: DurationModel,
    pub fence_timeout: f64,
    pub replay_start_delay: f64,
    pub probe_interval: SimDuration,
    pub gap_threshold: f64,
    /// Hard stop for the event loop, seconds.
    pub max_time: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            rate: 10.0,
            arrivals: Arrivals::Constant,
            mu: 84.0,
            warmup: 5.0,
            cutoff: CutoffPolicy::fixed(120.0),
            grace: 7.4,
            checkpoint: DurationModel::constant(0.34),
            transfer: TransferMode::fixed(TransferKind::RegistryJob, DurationModel::constant(5.64)),
            restore_shadow: DurationModel::constant(2.89),
            recreate_restore: DurationModel::constant(31.01),
            finalize: DurationModel::constant(0.02),
            broker_op: DurationModel::constant(0.01),
            swap_recheckpoint: DurationModel::constant(0.39),
            swap_image_build: DurationModel::constant(0.19),
            swap_restore: DurationModel::constant(3.02),
            fence_timeout: 60.0,
            replay_start_delay: 0.0,
            probe_interval: DEFAULT_INTERVAL,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
            max_time: 3600.0,
        }
    }
}

impl SimParams {
    pub fn service_time(&self) -> SimDuration {
        SimDuration::from_secs_f64(1.0 / self.mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TestFaults {
    /// Publish this seq without delivering it anywhere.
    pub drop_seq: Option<u64>,
    /// Report the application of this seq to the auditor twice.
    pub duplicate_apply_seq: Option<u64>,
    /// Force a second live pod with the source's name at this time.
    pub identity_conflict_at: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub(crate) struct Worker {
    pub consumer: Consumer,
    pub identity: String,
    pub gen: u64,
    pub busy_until: Option<SimTime>,
    pub paused: bool,
    pub remaining: Option<SimDuration>,
}

#[derive(Debug, Clone)]
pub(crate) enum Event {
    Produce,
    Pod(PodTimer),
    ConsumerDone { pod: PodUid, gen: u64 },
    ConsumerResume { pod: PodUid, gen: u64 },
    ConsumerRelease { pod: PodUid },
    OpDone(String),
    Requeue { gen: u64 },
    Trigger,
    Deadline,
    Probe,
    StartMigration,
    InjectIdentityConflict,
}

#[derive(Debug, Clone)]
pub(crate) struct LaunchPlan {
    pub queues: Vec<String>,
    pub held: bool,
}

#[derive(Debug, Clone)]
pub(crate) enum OpEffect {
    None,
    AddImage { node: String, image: String },
}

#[derive(Debug, Clone)]
pub(crate) struct Op {
    pub started: SimTime,
    pub done_at: Option<SimTime>,
    pub effect: OpEffect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OpState {
    NotStarted,
    Running,
    Done(SimTime),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FenceReport {
    pub window_s: f64,
    pub buffered: u64,
    /// Depths of primary and swap queue when the fence started.
    pub depths_at_start: (u64, u64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub recheckpoint_s: f64,
    pub image_build_s: f64,
    pub source_drain_s: f64,
    pub replacement_restore_s: f64,
    pub fence: Option<FenceReport>,
}

/// Inputs the replay oracle needs, as observed in the run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayObservation {
    pub bind_at: Option<SimTime>,
    /// When the checkpointed state stopped advancing (the consistent cut).
    pub frozen_at: Option<SimTime>,
    pub release_at: Option<SimTime>,
    pub start_delay: f64,
}

pub struct World {
    pub(crate) engine: EventQueue<Event>,
    pub(crate) rng: ChaCha8Rng,
    pub params: SimParams,
    pub scenario: Scenario,
    pub cluster: Cluster,
    pub broker: Broker,
    pub(crate) workers: BTreeMap<PodUid, Worker>,
    pub producer: Producer,
    pub archives: ArchiveStore,
    pub(crate) launch_plans: BTreeMap<String, LaunchPlan>,
    pub(crate) ops: BTreeMap<String, Op>,
    pub migration: Option<MigrationResource>,
    pub(crate) backoff: Backoff,
    pub(crate) requeue_gen: u64,
    pub(crate) trigger_pending: bool,
    pub(crate) released: BTreeSet<PodUid>,
    pub(crate) watched_queues: BTreeSet<usize>,
    pub(crate) cut_watch: Option<(PodUid, u64)>,
    pub(crate) cutoff_timer: Option<SimTime>,
    pub probe: ProbeTrace,
    probing: bool,
    pub auditor: Auditor,
    pub audit_enabled: bool,
    pub timeline: Vec<TimelineEntry>,
    pub fault: Option<FaultPlan>,
    pub(crate) fault_fired: bool,
    pub test_faults: TestFaults,
    pub swap: SwapReport,
    pub replay: ReplayObservation,
    pub completed_at: Option<SimTime>,
    pub transient_failures: u32,
}

impl World {
    pub fn new(params: SimParams, scenario: Scenario, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let producer = match params.arrivals {
            Arrivals::Constant => Producer::new(params.rate, SimTime::ZERO),
            Arrivals::Poisson => Producer::poisson(params.rate, SimTime::ZERO, &mut rng),
        };
        let mut w = World {
            engine: EventQueue::new(),
            rng,
            cluster: Cluster::new(SimDuration::from_secs_f64(params.grace)),
            broker: Broker::new(),
            workers: BTreeMap::new(),
            producer,
            archives: ArchiveStore::default(),
            launch_plans: BTreeMap::new(),
            ops: BTreeMap::new(),
            migration: None,
            backoff: Backoff::default(),
            requeue_gen: 0,
            trigger_pending: false,
            released: BTreeSet::new(),
            watched_queues: BTreeSet::new(),
            cut_watch: None,
            cutoff_timer: None,
            probe: ProbeTrace::new(params.probe_interval),
            probing: false,
            auditor: Auditor::new(),
            audit_enabled: true,
            timeline: Vec::new(),
            fault: None,
            fault_fired: false,
            test_faults: TestFaults::default(),
            swap: SwapReport::default(),
            replay: ReplayObservation::default(),
            completed_at: None,
            transient_failures: 0,
            params,
            scenario,
        };
        w.setup();
        w
    }

    fn setup(&mut self) {
        let labels: Labels = [("app".to_string(), APP.to_string())].into();
        self.cluster.add_node(SOURCE_NODE, true);
        self.cluster.add_node(TARGET_NODE, true);
        self.cluster.add_service(SERVICE, labels.clone());
        self.broker.declare_queue(PRIMARY_QUEUE);
        self.broker.bind(PRIMARY_QUEUE).expect("declared");

        let template = PodTemplate {
            labels: labels.clone(),
            image_ref: APP_IMAGE.to_string(),
            node: Some(SOURCE_NODE.to_string()),
            pull_policy: PullPolicy::IfNotPresent,
            startup_delay: SimDuration::ZERO,
            restore_from: None,
        };
        match self.scenario.workload {
            WorkloadKind::StatefulSet => {
                self.cluster.add_statefulset(
                    StatefulSetRecord { name: APP.to_string(), replicas: 1, template, selector: labels },
                    SimTime::ZERO,
                );
            }
            WorkloadKind::Deployment => {
                self.cluster.add_deployment(APP, 1, template, labels, SimTime::ZERO);
            }
        }
        self.apply_cluster_events();
        if let Some(t) = self.producer.next_due() {
            self.schedule(t, Event::Produce);
        }
        self.schedule(SimTime::from_secs_f64(self.params.warmup), Event::StartMigration);
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub(crate) fn schedule(&mut self, at: SimTime, e: Event) {
        let at = at.max(self.now());
        self.engine.schedule(at, e).expect("not in the past");
    }

    pub(crate) fn note(&mut self, kind: &str, detail: impl Into<String>) {
        self.timeline.push(TimelineEntry { t: self.now().as_secs_f64(), kind: kind.to_string(), detail: detail.into() });
    }

    /// The spec of the migration this world runs.
    pub fn migration_spec(&self) -> MigrationSpec {
        let source = match self.scenario.workload {
            WorkloadKind::StatefulSet => format!("{APP}-0"),
            WorkloadKind::Deployment => self
                .cluster
                .live_pods()
                .find(|p| p.node == SOURCE_NODE)
                .map(|p| p.name.clone())
                .unwrap_or_else(|| APP.to_string()),
        };
        MigrationSpec {
            source_pod: source,
            target_node: TARGET_NODE.to_string(),
            migration_strategy: self.scenario.strategy,
            transfer_mode: self.scenario.transfer,
            message_queue_config: QueueConfig {
                exchange: EXCHANGE.to_string(),
                primary_queue: PRIMARY_QUEUE.to_string(),
                replay_queue: REPLAY_QUEUE.to_string(),
            },
            replay_cutoff_seconds: self.params.cutoff.t_replay_max,
        }
    }

    /// Runs until the migration is terminal and every queue has drained, or
    /// the hard time limit passes.
    pub fn run(&mut self) {
        let deadline = SimTime::from_secs_f64(self.params.max_time);
        if let Some(t) = self.test_faults.identity_conflict_at {
            self.schedule(t, Event::InjectIdentityConflict);
        }
        while let Some((_, ev)) = self.engine.pop_until(deadline) {
            self.dispatch(ev);
            if self.finished() {
                break;
            }
        }
    }

    /// Dispatches events up to `until` (for step-wise driving).
    pub fn run_until(&mut self, until: SimTime) -> bool {
        while let Some((_, ev)) = self.engine.pop_until(until) {
            self.dispatch(ev);
            if self.finished() {
                return true;
            }
        }
        self.engine.advance_to(until);
        false
    }

    pub fn finished(&mut self) -> bool {
        let Some(m) = &self.migration else { return false };
        match m.status.phase {
            crate::reconciler::Phase::Failed => true,
            crate::reconciler::Phase::Completed => {
                self.janitor();
                self.drained()
            }
            _ => false,
        }
    }

    fn drained(&self) -> bool {
        self.broker.all_queues().all(|q| q.deleted || q.depth() == 0)
            && self.workers.values().all(|w| w.consumer.busy.is_none() && !w.paused && (!w.consumer.held || w.consumer.detached))
            && self.cluster.live_pods().all(|p| p.lifecycle != Lifecycle::Terminating)
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Produce => self.on_produce(),
            Event::Pod(t) => {
                let now = self.now();
                self.cluster.fire_timer(t, now);
                self.apply_cluster_events();
            }
            Event::ConsumerDone { pod, gen } => self.on_consumer_done(pod, gen),
            Event::ConsumerResume { pod, gen } => self.on_consumer_resume(pod, gen),
            Event::ConsumerRelease { pod } => {
                if let Some(w) = self.workers.get_mut(&pod) {
                    w.consumer.held = false;
                }
                self.kick(pod);
            }
            Event::OpDone(key) => self.on_op_done(&key),
            Event::Requeue { gen } => {
                if gen == self.requeue_gen {
                    self.reconcile();
                }
            }
            Event::Trigger => {
                self.trigger_pending = false;
                self.reconcile();
            }
            Event::Deadline => self.reconcile(),
            Event::Probe => {
                if self.probing {
                    let up = self.cluster.service_has_endpoints(SERVICE);
                    self.probe.record(self.now(), up);
                    let next = self.now() + self.params.probe_interval;
                    self.schedule(next, Event::Probe);
                }
            }
            Event::StartMigration => self.start_migration(),
            Event::InjectIdentityConflict => self.inject_identity_conflict(),
        }
        if self.audit_enabled {
            let now = self.now();
            self.auditor.check_event(&self.cluster, &self.broker, now);
        }
    }

    fn start_migration(&mut self) {
        let spec = self.migration_spec();
        let now = self.now();
        self.note("migration", format!("created for {} -> {}", spec.source_pod, spec.target_node));
        self.migration = Some(MigrationResource {
            name: format!("migrate-{}", spec.source_pod),
            spec,
            status: MigrationStatus { phase_started: now, ..Default::default() },
            created_at: now,
        });
        self.probing = true;
        self.schedule(now, Event::Probe);
        self.reconcile();
    }

    pub(crate) fn stop_probing(&mut self) {
        if self.probing {
            self.probing = false;
            let up = self.cluster.service_has_endpoints(SERVICE);
            self.probe.record(self.now(), up);
        }
    }

    fn inject_identity_conflict(&mut self) {
        let name = self.migration_spec().source_pod;
        if let Some(p) = self.cluster.live_pod(&name).cloned() {
            self.cluster.force_insert_pod(p);
            self.note("fault", format!("forced a second live pod named {name}"));
        }
    }

    fn on_produce(&mut self) {
        if self.producer.next_due() != Some(self.now()) {
            return;
        }
        let now = self.now();
        let next_seq = self.broker.last_seq() + 1;
        if self.test_faults.drop_seq == Some(next_seq) {
            let seq = self.broker.publish_undelivered(now);
            self.auditor.on_publish(seq, now, 0);
        } else {
            let (seq, targets) = self.broker.publish(now);
            self.auditor.on_publish(seq, now, targets.len());
        }
        self.producer.mark_sent(&mut self.rng);
        if let Some(t) = self.producer.next_due() {
            self.schedule(t, Event::Produce);
        }
        let idle: Vec<PodUid> = self.workers.iter().filter(|(_, w)| w.busy_until.is_none()).map(|(&k, _)| k).collect();
        for uid in idle {
            self.kick(uid);
        }
    }

    pub(crate) fn apply_cluster_events(&mut self) {
        loop {
            let events = self.cluster.drain_events();
            if events.is_empty() {
                break;
            }
            for e in events {
                match e {
                    ClusterEvent::Timer(t) => self.schedule(t.at, Event::Pod(t)),
                    ClusterEvent::Ready(uid) => {
                        self.on_pod_ready(uid);
                        self.trigger();
                    }
                    ClusterEvent::Terminating(uid) => {
                        if let Some(w) = self.workers.get_mut(&uid) {
                            w.consumer.detach();
                            w.gen += 1;
                            w.busy_until = None;
                        }
                        let name = self.cluster.pod(uid).map(|p| p.name.clone()).unwrap_or_default();
                        self.note("pod", format!("{name} terminating"));
                    }
                    ClusterEvent::Gone(uid) => {
                        self.workers.remove(&uid);
                        let name = self.cluster.pod(uid).map(|p| p.name.clone()).unwrap_or_default();
                        self.note("pod", format!("{name} gone"));
                        self.trigger();
                    }
                    ClusterEvent::Created(uid) => {
                        let p = self.cluster.pod(uid).expect("created");
                        let detail = format!("{} created on {}", p.name, p.node);
                        self.note("pod", detail);
                    }
                    ClusterEvent::Adopted(uid) => {
                        let p = self.cluster.pod(uid).expect("adopted");
                        let owner = p.owner.as_ref().map(|o| format!("{:?}/{}", o.kind, o.controller)).unwrap_or_default();
                        let detail = format!("{} adopted by {owner}", p.name);
                        self.note("pod", detail);
                    }
                }
            }
        }
    }

    fn on_pod_ready(&mut self, uid: PodUid) {
        let Some(pod) = self.cluster.pod(uid).cloned() else { return };
        let service = self.params.service_time();
        let (consumer, identity) = match pod.restore_from.as_ref().and_then(|id| self.archives.get(id)) {
            Some(archive) => {
                let plan = self.launch_plans.remove(&pod.name).unwrap_or(LaunchPlan {
                    queues: vec![PRIMARY_QUEUE.to_string()],
                    held: false,
                });
                let queues = plan.queues.iter().filter_map(|q| self.broker.queue_id(q)).collect();
                let (mut c, in_flight) = restore_consumer(archive, uid, queues, service);
                c.busy = in_flight;
                c.held = plan.held;
                (c, resolve_hostname(archive, &pod.name))
            }
            None => {
                let primary = self.broker.queue_id(PRIMARY_QUEUE).expect("primary exists");
                (Consumer::new(uid, vec![primary], service), pod.name.clone())
            }
        };
        if let Some(p) = self.cluster.pod_mut(uid) {
            p.app = Some(uid);
        }
        self.note("pod", format!("{} ready", pod.name));
        self.workers.insert(uid, Worker { consumer, identity, gen: 0, busy_until: None, paused: false, remaining: None });
        self.kick(uid);
    }

    /// Lets an idle consumer pick up its next message.
    pub(crate) fn kick(&mut self, uid: PodUid) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&uid) else { return };
        if w.paused || w.consumer.held || w.consumer.detached || w.busy_until.is_some() {
            return;
        }
        let service = if w.consumer.busy.is_some() { Some(w.consumer.service) } else { w.consumer.start_next(&mut self.broker) };
        if let Some(svc) = service {
            w.busy_until = Some(now + svc);
            let gen = w.gen;
            self.schedule(now + svc, Event::ConsumerDone { pod: uid, gen });
        }
        if self.watched_queues.iter().any(|&q| self.broker.queue(q).depth() == 0) {
            self.trigger();
        }
        if let Some((pod, cut)) = self.cut_watch {
            if pod == uid && self.cut_reached(uid, cut) {
                self.cut_watch = None;
                self.trigger();
            }
        }
    }

    /// True once nothing at or below `cut` is still queued for the consumer;
    /// a message in service is part of its snapshot.
    pub(crate) fn cut_reached(&self, uid: PodUid, cut: u64) -> bool {
        let Some(w) = self.workers.get(&uid) else { return false };
        w.consumer.queues.iter().all(|&q| self.broker.peek(q).is_none_or(|m| m.seq > cut))
    }

    fn on_consumer_done(&mut self, uid: PodUid, gen: u64) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&uid) else { return };
        if w.gen != gen || w.busy_until != Some(now) {
            return;
        }
        w.busy_until = None;
        let mode = w.consumer.mode;
        if let Some(app) = w.consumer.complete(now) {
            self.auditor.on_apply(uid, app, mode);
            if self.test_faults.duplicate_apply_seq == Some(app.seq) {
                self.test_faults.duplicate_apply_seq = None;
                self.auditor.on_apply(uid, app, mode);
            }
        }
        self.kick(uid);
    }

    /// Freezes a consumer for `dur`; in-flight work resumes afterwards.
    pub(crate) fn pause(&mut self, uid: PodUid, dur: SimDuration) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&uid) else { return };
        w.gen += 1;
        w.paused = true;
        w.remaining = w.busy_until.take().map(|u| u.since(now));
        let gen = w.gen;
        self.schedule(now + dur, Event::ConsumerResume { pod: uid, gen });
    }

    fn on_consumer_resume(&mut self, uid: PodUid, gen: u64) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&uid) else { return };
        if w.gen != gen {
            return;
        }
        w.paused = false;
        if let Some(r) = w.remaining.take() {
            w.busy_until = Some(now + r);
            self.schedule(now + r, Event::ConsumerDone { pod: uid, gen });
        } else {
            self.kick(uid);
        }
    }

    pub(crate) fn op_state(&self, key: &str) -> OpState {
        match self.ops.get(key) {
            None => OpState::NotStarted,
            Some(Op { done_at: Some(t), .. }) => OpState::Done(*t),
            Some(_) => OpState::Running,
        }
    }

    pub(crate) fn start_op(&mut self, key: &str, dur: SimDuration, effect: OpEffect) {
        let now = self.now();
        self.ops.insert(key.to_string(), Op { started: now, done_at: None, effect });
        self.schedule(now + dur, Event::OpDone(key.to_string()));
    }

    fn on_op_done(&mut self, key: &str) {
        let now = self.now();
        let Some(op) = self.ops.get_mut(key) else { return };
        op.done_at = Some(now);
        if let OpEffect::AddImage { node, image } = op.effect.clone() {
            let _ = self.cluster.add_image(&node, &image);
        }
        self.trigger();
    }

    /// Schedules a reconcile for the current instant, coalescing repeats.
    pub(crate) fn trigger(&mut self) {
        if !self.trigger_pending && self.migration.as_ref().is_some_and(|m| !m.status.phase.is_terminal()) {
            self.trigger_pending = true;
            let now = self.now();
            self.schedule(now, Event::Trigger);
        }
    }

    pub(crate) fn requeue(&mut self) {
        let delay = self.backoff.next_delay();
        self.requeue_gen += 1;
        let gen = self.requeue_gen;
        let at = self.now() + delay;
        self.schedule(at, Event::Requeue { gen });
    }

    /// Deletes the replay queue once it is unbound, drained, and nobody reads it.
    pub(crate) fn janitor(&mut self) {
        let Some(id) = self.broker.queue_id(REPLAY_QUEUE) else { return };
        let unused = !self.workers.values().any(|w| !w.consumer.detached && w.consumer.queues.contains(&id));
        if !self.broker.is_bound(REPLAY_QUEUE) && self.broker.queue(id).depth() == 0 && unused && self.broker.has_injected(REPLAY_QUEUE, crate::broker::MessageKind::EndReplay) {
            self.broker.delete_queue(REPLAY_QUEUE).expect("exists");
            self.note("broker", "replay queue deleted");
        }
    }

    pub(crate) fn worker_for(&self, name: &str) -> Option<PodUid> {
        let p = self.cluster.live_pod(name)?;
        self.workers.contains_key(&p.uid).then_some(p.uid)
    }

    pub fn consumer(&self, uid: PodUid) -> Option<&Consumer> {
        self.workers.get(&uid).map(|w| &w.consumer)
    }

    pub fn consumer_identity(&self, uid: PodUid) -> Option<&str> {
        self.workers.get(&uid).map(|w| w.identity.as_str())
    }

    /// The one non-terminating pod still running a consumer, if unique.
    pub fn survivor(&self) -> Option<PodUid> {
        let live: Vec<PodUid> = self
            .cluster
            .live_pods()
            .filter(|p| p.lifecycle == Lifecycle::Running && self.workers.contains_key(&p.uid))
            .map(|p| p.uid)
            .collect();
        (live.len() == 1).then(|| live[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconciler::Phase;

    fn shadow_world(rate: f64) -> World {
        let params = SimParams { rate, replay_start_delay: 2.25, ..Default::default() };
        let scenario =
            Scenario { workload: WorkloadKind::StatefulSet, strategy: StrategyRequest::ShadowPod, transfer: TransferKind::RegistryJob };
        World::new(params, scenario, 7)
    }

    #[test]
    fn warmup_consumer_keeps_up() {
        let mut w = shadow_world(10.0);
        w.run_until(SimTime::from_secs_f64(4.99));
        assert!(w.migration.is_none());
        let uid = w.survivor().unwrap();
        // 49 messages published by 4.9 s, each served in 1/84 s.
        assert_eq!(w.broker.last_seq(), 49);
        assert_eq!(w.consumer(uid).unwrap().applied.prefix(), 49);
        assert_eq!(w.consumer_identity(uid), Some("consumer-0"));
    }

    #[test]
    fn shadow_run_phase_sums() {
        let mut w = shadow_world(10.0);
        w.run();
        let status = &w.migration.as_ref().unwrap().status;
        assert_eq!(status.phase, Phase::Completed);
        let t = &status.phase_timings;
        assert!((t[&Phase::Checkpointing] - 0.34).abs() < 1e-6);
        assert!((t[&Phase::Transferring] - 5.64).abs() < 1e-6);
        assert!((t[&Phase::Restoring] - 2.89).abs() < 1e-6);
        // Backlog from 8.87 s of accumulation plus 2.25 s of start delay, drained at 74 msg/s.
        let predicted = 2.25 + 10.0 * (8.87 + 2.25) / 74.0;
        assert!((t[&Phase::Replaying] - predicted).abs() < 0.1, "{}", t[&Phase::Replaying]);
        assert!(w.auditor.violations().is_empty());
    }

    #[test]
    fn shadow_survivor_holds_everything() {
        let mut w = shadow_world(40.0);
        w.run();
        let uid = w.survivor().unwrap();
        let pod = w.cluster.pod(uid).unwrap();
        assert_eq!(pod.name, "consumer-0-shadow");
        assert_eq!(pod.node, TARGET_NODE);
        let applied = &w.consumer(uid).unwrap().applied;
        assert!(w.auditor.finalize(w.broker.last_seq(), Some(applied)).clean());
        assert!(!w.broker.exists(REPLAY_QUEUE));
        assert!(w.probe.samples.iter().all(|&(_, up)| up));
    }

    #[test]
    fn run_until_is_resumable() {
        let mut a = shadow_world(20.0);
        a.run();
        let mut b = shadow_world(20.0);
        let mut t = 0.0;
        while !b.run_until(SimTime::from_secs_f64(t)) {
            t += 0.7;
        }
        let sa = &a.migration.as_ref().unwrap().status;
        let sb = &b.migration.as_ref().unwrap().status;
        assert_eq!(sa.phase_timings, sb.phase_timings);
        assert_eq!(a.broker.last_seq(), b.broker.last_seq());
    }
}
