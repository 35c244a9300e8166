//! The migration resource, its phase machine, and the reconcile handlers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::MessageKind;
use crate::checkpoint::{CheckpointArchive, CheckpointError, ConsumerSnapshot, TransferKind, DEFAULT_ARCHIVE_BYTES};
use crate::cluster::{Labels, Lifecycle, OwnerKind, OwnerRef, PodRecord, PodSpec, PodTemplate, PodUid, PullPolicy};
use crate::oracle::cutoff_bound;
use crate::sim::{SimDuration, SimTime};
use crate::workload::ConsumerMode;
use crate::world::{Event, FenceReport, LaunchPlan, OpEffect, OpState, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Pending,
    Checkpointing,
    Transferring,
    Restoring,
    Replaying,
    Finalizing,
    Completed,
    Failed,
}

impl Phase {
    pub const ACTIVE: [Phase; 5] =
        [Phase::Checkpointing, Phase::Transferring, Phase::Restoring, Phase::Replaying, Phase::Finalizing];

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed)
    }

    /// The successor on the success path.
    pub fn next(self) -> Phase {
        match self {
            Phase::Pending => Phase::Checkpointing,
            Phase::Checkpointing => Phase::Transferring,
            Phase::Transferring => Phase::Restoring,
            Phase::Restoring => Phase::Replaying,
            Phase::Replaying => Phase::Finalizing,
            Phase::Finalizing => Phase::Completed,
            Phase::Completed => Phase::Completed,
            Phase::Failed => Phase::Failed,
        }
    }

    pub fn can_transition(from: Phase, to: Phase) -> bool {
        if from.is_terminal() {
            return false;
        }
        to == from.next() || to == Phase::Failed
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pending => "Pending",
            Phase::Checkpointing => "Checkpointing",
            Phase::Transferring => "Transferring",
            Phase::Restoring => "Restoring",
            Phase::Replaying => "Replaying",
            Phase::Finalizing => "Finalizing",
            Phase::Completed => "Completed",
            Phase::Failed => "Failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Sequential,
    ShadowPod,
    ShadowPodSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StrategyRequest {
    #[default]
    Auto,
    Sequential,
    ShadowPod,
    ShadowPodSwap,
}

/// An explicit request wins; otherwise StatefulSet pods migrate
/// sequentially and everything else gets a shadow pod.
pub fn detect_strategy(pod: &PodRecord, requested: StrategyRequest) -> Strategy {
    match requested {
        StrategyRequest::Sequential => Strategy::Sequential,
        StrategyRequest::ShadowPod => Strategy::ShadowPod,
        StrategyRequest::ShadowPodSwap => Strategy::ShadowPodSwap,
        StrategyRequest::Auto => match pod.owner.as_ref().map(|o| o.kind) {
            Some(OwnerKind::StatefulSet) => Strategy::Sequential,
            Some(OwnerKind::Deployment) | None => Strategy::ShadowPod,
        },
    }
}

/// Requeue delays: 0.25 s doubling up to 4 s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Backoff {
    attempt: u32,
}

impl Backoff {
    pub const BASE: SimDuration = SimDuration::from_millis(250);
    pub const CAP: SimDuration = SimDuration::from_millis(4000);

    pub fn next_delay(&mut self) -> SimDuration {
        let factor = 1u64 << self.attempt.min(16);
        self.attempt = self.attempt.saturating_add(1);
        SimDuration::from_micros((Self::BASE.as_micros() * factor).min(Self::CAP.as_micros()))
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffPolicy {
    /// Longest the replay phase may run, seconds.
    pub t_replay_max: f64,
    pub lambda: Option<f64>,
    pub mu_target: Option<f64>,
}

impl CutoffPolicy {
    pub fn fixed(t_replay_max: f64) -> Self {
        CutoffPolicy { t_replay_max, lambda: None, mu_target: None }
    }

    /// Seconds after replay start at which replay is cut off. With rate
    /// estimates configured the analytic bound applies, never exceeding
    /// `t_replay_max`.
    pub fn t_cutoff(&self) -> f64 {
        match (self.lambda, self.mu_target) {
            (Some(l), Some(m)) => cutoff_bound(self.t_replay_max, l, m).min(self.t_replay_max),
            _ => self.t_replay_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueueConfig {
    pub exchange: String,
    pub primary_queue: String,
    pub replay_queue: String,
}

impl QueueConfig {
    pub fn swap_queue(&self) -> String {
        format!("{}.swap", self.primary_queue)
    }

    pub fn fence_queue(&self) -> String {
        format!("{}.fence", self.primary_queue)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MigrationSpec {
    pub source_pod: String,
    pub target_node: String,
    pub migration_strategy: StrategyRequest,
    pub transfer_mode: TransferKind,
    pub message_queue_config: QueueConfig,
    pub replay_cutoff_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PodMeta {
    pub labels: Labels,
    pub owner: Option<OwnerRef>,
    pub node: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MigrationStatus {
    pub phase: Phase,
    pub phase_timings: BTreeMap<Phase, f64>,
    pub checkpoint_id: Option<String>,
    pub cached_pod_meta: Option<PodMeta>,
    pub strategy: Option<Strategy>,
    pub phase_started: SimTime,
    pub cutoff_fired: bool,
    pub failure: Option<String>,
}

impl Default for MigrationStatus {
    fn default() -> Self {
        MigrationStatus {
            phase: Phase::Pending,
            phase_timings: BTreeMap::new(),
            checkpoint_id: None,
            cached_pod_meta: None,
            strategy: None,
            phase_started: SimTime::ZERO,
            cutoff_fired: false,
            failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationResource {
    pub name: String,
    pub spec: MigrationSpec,
    pub status: MigrationStatus,
    pub created_at: SimTime,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReconcileError {
    /// Retryable; the phase handler will run again.
    #[error("transient failure in {0:?}")]
    Transient(Phase),
    #[error("{0}")]
    Fatal(String),
}

/// What a handler decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Advance,
    Wait,
}

/// Injects one transient failure into the named phase's handler, right after
/// its first side effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub phase: Phase,
}

const CHECKPOINT_OP: &str = "checkpoint";
const TRANSFER_OP: &str = "transfer";
const FINALIZE_OP: &str = "finalize";
const RECHECKPOINT_OP: &str = "swap-recheckpoint";
const IMAGE_BUILD_OP: &str = "swap-image-build";
const FENCE_OPS: [&str; 4] = ["fence-bind", "fence-unbind", "fence-drain", "fence-handoff"];

fn fatal(e: impl std::fmt::Display) -> ReconcileError {
    ReconcileError::Fatal(e.to_string())
}

impl World {
    fn mig(&self) -> &MigrationResource {
        self.migration.as_ref().expect("migration exists")
    }

    fn mig_mut(&mut self) -> &mut MigrationResource {
        self.migration.as_mut().expect("migration exists")
    }

    fn strategy(&self) -> Strategy {
        self.mig().status.strategy.expect("set in Pending")
    }

    fn meta(&self) -> PodMeta {
        self.mig().status.cached_pod_meta.clone().expect("set in Pending")
    }

    fn archive_id(&self, generation: char) -> String {
        format!("{}-{generation}", self.mig().name)
    }

    fn shadow_name(&self) -> String {
        format!("{}-shadow", self.mig().spec.source_pod)
    }

    /// Name of the pod that receives the restored state.
    fn target_pod_name(&self) -> String {
        match self.strategy() {
            Strategy::Sequential => self.mig().spec.source_pod.clone(),
            Strategy::ShadowPod | Strategy::ShadowPodSwap => self.shadow_name(),
        }
    }

    fn fault_point(&mut self, phase: Phase) -> Result<(), ReconcileError> {
        if !self.fault_fired && self.fault.is_some_and(|f| f.phase == phase) {
            self.fault_fired = true;
            return Err(ReconcileError::Transient(phase));
        }
        Ok(())
    }

    /// Runs the handler for the current phase, chaining through phases that
    /// complete synchronously.
    pub(crate) fn reconcile(&mut self) {
        let Some(m) = self.migration.as_ref() else { return };
        if m.status.phase.is_terminal() {
            return;
        }
        let saved = m.status.clone();
        self.janitor();
        loop {
            let result = match self.mig().status.phase {
                Phase::Pending => self.handle_pending(),
                Phase::Checkpointing => self.handle_checkpointing(),
                Phase::Transferring => self.handle_transferring(),
                Phase::Restoring => self.handle_restoring(),
                Phase::Replaying => self.handle_replaying(),
                Phase::Finalizing => self.handle_finalizing(),
                Phase::Completed | Phase::Failed => return,
            };
            match result {
                Ok(Step::Advance) => {
                    self.advance();
                    if self.mig().status.phase.is_terminal() {
                        return;
                    }
                }
                Ok(Step::Wait) => {
                    self.requeue();
                    return;
                }
                Err(ReconcileError::Transient(phase)) => {
                    // Status writes from this pass are lost; world side effects stay.
                    self.mig_mut().status = saved;
                    self.transient_failures += 1;
                    self.note("fault", format!("transient failure in {}, retrying", phase.name()));
                    self.requeue();
                    return;
                }
                Err(ReconcileError::Fatal(reason)) => {
                    self.fail(reason);
                    return;
                }
            }
        }
    }

    fn advance(&mut self) {
        let now = self.now();
        let status = &mut self.mig_mut().status;
        let from = status.phase;
        let to = from.next();
        status.phase_timings.insert(from, now.since(status.phase_started).as_secs_f64());
        status.phase = to;
        status.phase_started = now;
        self.auditor.on_phase(from, to, now);
        self.note("phase", to.name());
        self.backoff.reset();
        self.watched_queues.clear();
        self.cut_watch = None;
        self.cutoff_timer = None;
        if to == Phase::Completed {
            self.completed_at = Some(now);
            self.producer.stopped = true;
            self.stop_probing();
        }
    }

    fn fail(&mut self, reason: String) {
        let now = self.now();
        let status = &mut self.mig_mut().status;
        let from = status.phase;
        status.phase = Phase::Failed;
        status.failure = Some(reason.clone());
        self.auditor.on_phase(from, Phase::Failed, now);
        self.note("phase", format!("Failed: {reason}"));
        self.producer.stopped = true;
        self.stop_probing();
    }

    fn handle_pending(&mut self) -> Result<Step, ReconcileError> {
        let spec = self.mig().spec.clone();
        let pod = self
            .cluster
            .live_pod(&spec.source_pod)
            .cloned()
            .ok_or_else(|| fatal(format!("source pod {} not found", spec.source_pod)))?;
        if pod.lifecycle != Lifecycle::Running {
            return Err(fatal(format!("source pod {} is not running", pod.name)));
        }
        if !self.cluster.nodes.contains_key(&spec.target_node) {
            return Err(fatal(format!("unknown target node {}", spec.target_node)));
        }
        let strategy = detect_strategy(&pod, spec.migration_strategy);
        let ss_owned = pod.owner.as_ref().is_some_and(|o| o.kind == OwnerKind::StatefulSet);
        if strategy != Strategy::ShadowPod && !ss_owned {
            return Err(fatal(format!("{strategy:?} needs a StatefulSet-owned pod")));
        }
        let status = &mut self.mig_mut().status;
        status.strategy = Some(strategy);
        status.cached_pod_meta =
            Some(PodMeta { labels: pod.labels.clone(), owner: pod.owner.clone(), node: pod.node.clone(), image: pod.image_ref.clone() });
        self.note("strategy", format!("{strategy:?}"));
        Ok(Step::Advance)
    }

    fn handle_checkpointing(&mut self) -> Result<Step, ReconcileError> {
        let spec = self.mig().spec.clone();
        let replay = &spec.message_queue_config.replay_queue;
        if !self.broker.exists(replay) {
            self.broker.declare_queue(replay);
        }
        if self.broker.first_bind_seq(replay).is_none() {
            self.broker.bind(replay).map_err(fatal)?;
            self.replay.bind_at = Some(self.now());
            self.note("broker", "replay queue bound");
        }
        self.fault_point(Phase::Checkpointing)?;

        let archive_id = self.archive_id('a');
        if !self.archives.contains(&archive_id) {
            let uid = self
                .worker_for(&spec.source_pod)
                .ok_or_else(|| fatal(CheckpointError::PodNotRunning(spec.source_pod.clone())))?;
            // Consistent cut: everything published before the bind must be in the snapshot.
            let cut = self.broker.first_bind_seq(replay).expect("bound");
            if !self.cut_reached(uid, cut) {
                self.cut_watch = Some((uid, cut));
                return Ok(Step::Wait);
            }
            let pod = self.cluster.pod(uid).expect("live").clone();
            let archive = CheckpointArchive {
                id: archive_id.clone(),
                snapshot: ConsumerSnapshot::of(&self.workers[&uid].consumer),
                captured_hostname: pod.name.clone(),
                size_bytes: DEFAULT_ARCHIVE_BYTES,
                created_at: self.now(),
                source_node: pod.node.clone(),
            };
            self.archives.insert(archive);
            self.replay.frozen_at = Some(self.now());
            let dur = self.params.checkpoint.sample(&mut self.rng);
            self.pause(uid, dur);
            self.start_op(CHECKPOINT_OP, dur, OpEffect::None);
            self.note("checkpoint", format!("{} paused for {dur}", pod.name));
            return Ok(Step::Wait);
        }
        match self.op_state(CHECKPOINT_OP) {
            OpState::Done(_) => {
                self.mig_mut().status.checkpoint_id = Some(archive_id);
                Ok(Step::Advance)
            }
            _ => Ok(Step::Wait),
        }
    }

    fn handle_transferring(&mut self) -> Result<Step, ReconcileError> {
        let target = self.mig().spec.target_node.clone();
        let id = self.mig().status.checkpoint_id.clone().ok_or_else(|| fatal("no checkpoint recorded"))?;
        let archive = self.archives.get(&id).ok_or_else(|| fatal(format!("archive {id} missing")))?.clone();
        let image = archive.image_ref();
        if self.cluster.has_image(&target, &image) {
            return Ok(Step::Advance);
        }
        if self.op_state(TRANSFER_OP) == OpState::NotStarted {
            let mode = self.params.transfer;
            mode.check_agents(&self.cluster, &archive.source_node, &target).map_err(fatal)?;
            let dur = mode.sample(&archive, &mut self.rng);
            self.start_op(TRANSFER_OP, dur, OpEffect::AddImage { node: target.clone(), image });
            self.note("transfer", format!("{:?} to {target}, {dur}", mode.kind));
            self.fault_point(Phase::Transferring)?;
        }
        Ok(Step::Wait)
    }

    fn handle_restoring(&mut self) -> Result<Step, ReconcileError> {
        match self.strategy() {
            Strategy::Sequential => self.restore_sequential(),
            Strategy::ShadowPod | Strategy::ShadowPodSwap => self.restore_shadow(),
        }
    }

    fn restore_shadow(&mut self) -> Result<Step, ReconcileError> {
        let shadow = self.shadow_name();
        if let Some(p) = self.cluster.live_pod(&shadow) {
            let up = p.ready && self.workers.contains_key(&p.uid);
            return Ok(if up { Step::Advance } else { Step::Wait });
        }
        let spec = self.mig().spec.clone();
        let archive_id = self.mig().status.checkpoint_id.clone().expect("checkpointed");
        let image = self.archives.get(&archive_id).expect("archived").image_ref();
        let delay = self.params.restore_shadow.sample(&mut self.rng);
        self.launch_plans
            .insert(shadow.clone(), LaunchPlan { queues: vec![spec.message_queue_config.replay_queue.clone()], held: true });
        let pod = PodSpec {
            name: shadow.clone(),
            labels: self.meta().labels,
            node: spec.target_node.clone(),
            image_ref: image,
            pull_policy: PullPolicy::Never,
            startup_delay: delay,
            restore_from: Some(archive_id),
        };
        let now = self.now();
        self.cluster.create_pod(pod, None, now).map_err(fatal)?;
        self.apply_cluster_events();
        self.fault_point(Phase::Restoring)?;
        Ok(Step::Wait)
    }

    fn restore_sequential(&mut self) -> Result<Step, ReconcileError> {
        let spec = self.mig().spec.clone();
        let archive_id = self.mig().status.checkpoint_id.clone().expect("checkpointed");
        let ss = self.meta().owner.map(|o| o.controller).ok_or_else(|| fatal("source has no owner"))?;
        let now = self.now();
        if let Some(p) = self.cluster.live_pod(&spec.source_pod) {
            if p.node == spec.target_node && p.restore_from.as_deref() == Some(archive_id.as_str()) {
                let up = p.ready && self.workers.contains_key(&p.uid);
                return Ok(if up { Step::Advance } else { Step::Wait });
            }
        }
        let record = self.cluster.statefulsets.get(&ss).ok_or_else(|| fatal(format!("statefulset {ss} missing")))?.clone();
        if record.replicas > 0 && record.template.node.as_deref() != Some(spec.target_node.as_str()) {
            self.cluster.scale_statefulset(&ss, 0, now).map_err(fatal)?;
            self.apply_cluster_events();
            self.fault_point(Phase::Restoring)?;
            return Ok(Step::Wait);
        }
        if self.cluster.live_pod(&spec.source_pod).is_some() {
            return Ok(Step::Wait);
        }
        let image = self.archives.get(&archive_id).expect("archived").image_ref();
        let delay = self.params.recreate_restore.sample(&mut self.rng);
        let template = PodTemplate {
            labels: record.template.labels.clone(),
            image_ref: image,
            node: Some(spec.target_node.clone()),
            pull_policy: PullPolicy::Never,
            startup_delay: delay,
            restore_from: Some(archive_id),
        };
        self.cluster.retarget_statefulset(&ss, template).map_err(fatal)?;
        self.launch_plans.insert(
            spec.source_pod.clone(),
            LaunchPlan { queues: vec![spec.message_queue_config.replay_queue.clone()], held: true },
        );
        self.cluster.scale_statefulset(&ss, 1, now).map_err(fatal)?;
        self.apply_cluster_events();
        Ok(Step::Wait)
    }

    fn handle_replaying(&mut self) -> Result<Step, ReconcileError> {
        let now = self.now();
        let replay = self.mig().spec.message_queue_config.replay_queue.clone();
        let target = self.target_pod_name();
        let uid = self.worker_for(&target).ok_or_else(|| fatal(format!("restored consumer {target} is not running")))?;
        self.broker.inject_control(&replay, MessageKind::StartReplay, true, now).map_err(fatal)?;
        self.fault_point(Phase::Replaying)?;
        if self.released.insert(uid) {
            let delay = SimDuration::from_secs_f64(self.params.replay_start_delay);
            self.schedule(now + delay, Event::ConsumerRelease { pod: uid });
            self.replay.release_at = Some(now);
            self.replay.start_delay = delay.as_secs_f64();
            self.note("replay", format!("{target} starts replay"));
        }
        let deadline = self.mig().status.phase_started + SimDuration::from_secs_f64(self.params.cutoff.t_cutoff());
        if now >= deadline {
            self.mig_mut().status.cutoff_fired = true;
            self.note("replay", "cutoff reached");
            return Ok(Step::Advance);
        }
        if self.cutoff_timer != Some(deadline) {
            self.cutoff_timer = Some(deadline);
            self.schedule(deadline, Event::Deadline);
        }
        let qid = self.broker.queue_id(&replay).ok_or_else(|| fatal("replay queue vanished"))?;
        self.watched_queues = [qid].into();
        // In-flight messages are unacknowledged and still count as queued.
        let w = &self.workers[&uid];
        let idle = !w.consumer.held && w.busy_until.is_none() && w.consumer.busy.is_none();
        if idle && self.broker.queue(qid).depth() == 0 {
            return Ok(Step::Advance);
        }
        Ok(Step::Wait)
    }

    fn handle_finalizing(&mut self) -> Result<Step, ReconcileError> {
        if self.strategy() == Strategy::ShadowPodSwap {
            return self.identity_swap();
        }
        let now = self.now();
        let spec = self.mig().spec.clone();
        let qc = &spec.message_queue_config;
        let target = self.target_pod_name();
        let uid = self.worker_for(&target).ok_or_else(|| fatal(format!("{target} is not running")))?;
        // Every prefix of these steps is safe to retry: the source stops
        // before the target gives up its replay queue, and the target reads
        // primary only after the replay queue is exhausted.
        let owner = self.meta().owner.ok_or_else(|| fatal("source has no owner"));
        let source_serving =
            self.cluster.live_pod(&spec.source_pod).is_some_and(|p| p.lifecycle != Lifecycle::Terminating);
        match (self.strategy(), owner) {
            (Strategy::ShadowPod, Ok(OwnerRef { kind: OwnerKind::Deployment, controller })) => {
                if source_serving {
                    let grace = self.cluster.termination_grace;
                    self.cluster.delete_pod(&spec.source_pod, grace, now).map_err(fatal)?;
                }
                self.cluster.patch_deployment_affinity(&controller, &spec.target_node).map_err(fatal)?;
            }
            (Strategy::ShadowPod, Ok(OwnerRef { kind: OwnerKind::StatefulSet, controller })) => {
                let replicas = self.cluster.statefulsets.get(&controller).map_or(0, |s| s.replicas);
                if replicas > 0 {
                    self.cluster.scale_statefulset(&controller, replicas - 1, now).map_err(fatal)?;
                }
            }
            (Strategy::ShadowPod, Err(_)) if source_serving => {
                let grace = self.cluster.termination_grace;
                self.cluster.delete_pod(&spec.source_pod, grace, now).map_err(fatal)?;
            }
            _ => {}
        }
        self.apply_cluster_events();

        let primary = self.broker.queue_id(&qc.primary_queue).ok_or_else(|| fatal("primary queue missing"))?;
        let queues = &mut self.workers.get_mut(&uid).expect("worker").consumer.queues;
        if !queues.contains(&primary) {
            queues.push(primary);
        }
        self.fault_point(Phase::Finalizing)?;
        if self.broker.exists(&qc.replay_queue) {
            self.broker.unbind(&qc.replay_queue).map_err(fatal)?;
            self.broker.inject_control(&qc.replay_queue, MessageKind::EndReplay, false, now).map_err(fatal)?;
        }
        self.kick(uid);
        match self.op_state(FINALIZE_OP) {
            OpState::NotStarted => {
                let dur = self.params.finalize.sample(&mut self.rng);
                self.start_op(FINALIZE_OP, dur, OpEffect::None);
                Ok(Step::Wait)
            }
            OpState::Running => Ok(Step::Wait),
            OpState::Done(_) => Ok(Step::Advance),
        }
    }

    /// Replaces the unowned shadow with a StatefulSet-owned pod that carries
    /// the original ordinal name, then hands traffic over through the fence.
    fn identity_swap(&mut self) -> Result<Step, ReconcileError> {
        let now = self.now();
        let spec = self.mig().spec.clone();
        let qc = spec.message_queue_config.clone();
        let (swap_q, fence_q) = (qc.swap_queue(), qc.fence_queue());
        let ss = self.meta().owner.map(|o| o.controller).ok_or_else(|| fatal("source has no owner"))?;
        let shadow = self.shadow_name();
        let archive_b = self.archive_id('b');
        let t1 = self.mig().status.phase_started;

        if self.op_state(RECHECKPOINT_OP) == OpState::NotStarted {
            if self.cluster.statefulsets.get(&ss).is_some_and(|s| s.replicas > 0) {
                self.cluster.scale_statefulset(&ss, 0, now).map_err(fatal)?;
                self.apply_cluster_events();
            }
            self.fault_point(Phase::Finalizing)?;
            let uid = self.worker_for(&shadow).ok_or_else(|| fatal(format!("{shadow} is not running")))?;
            // Everything below happens at one instant: the cut for snapshot B.
            let purged = self.broker.purge(&qc.primary_queue).map_err(fatal)?.len();
            if self.broker.exists(&qc.replay_queue) {
                self.broker.unbind(&qc.replay_queue).map_err(fatal)?;
                self.broker.inject_control(&qc.replay_queue, MessageKind::EndReplay, false, now).map_err(fatal)?;
            }
            self.broker.declare_queue(&swap_q);
            self.broker.bind(&swap_q).map_err(fatal)?;
            self.broker.inject_control(&swap_q, MessageKind::StartReplay, true, now).map_err(fatal)?;
            let archive = CheckpointArchive {
                id: archive_b.clone(),
                snapshot: ConsumerSnapshot::of(&self.workers[&uid].consumer),
                captured_hostname: shadow.clone(),
                size_bytes: DEFAULT_ARCHIVE_BYTES,
                created_at: now,
                source_node: spec.target_node.clone(),
            };
            self.archives.insert(archive);
            let primary = self.broker.queue_id(&qc.primary_queue).expect("primary");
            let c = &mut self.workers.get_mut(&uid).expect("worker").consumer;
            c.queues = vec![primary];
            c.mode = ConsumerMode::Normal;
            let dur = self.params.swap_recheckpoint.sample(&mut self.rng);
            self.pause(uid, dur);
            self.start_op(RECHECKPOINT_OP, dur, OpEffect::None);
            self.note("swap", format!("{shadow} re-checkpointed, {purged} redundant primary messages purged"));
            return Ok(Step::Wait);
        }
        let OpState::Done(rechecked) = self.op_state(RECHECKPOINT_OP) else { return Ok(Step::Wait) };
        let image = self.archives.get(&archive_b).expect("archived").image_ref();
        if self.op_state(IMAGE_BUILD_OP) == OpState::NotStarted {
            self.swap.recheckpoint_s = rechecked.since(t1).as_secs_f64();
            let dur = self.params.swap_image_build.sample(&mut self.rng);
            self.start_op(IMAGE_BUILD_OP, dur, OpEffect::AddImage { node: spec.target_node.clone(), image: image.clone() });
            return Ok(Step::Wait);
        }
        let OpState::Done(built) = self.op_state(IMAGE_BUILD_OP) else { return Ok(Step::Wait) };

        let replacement = self
            .cluster
            .live_pod(&spec.source_pod)
            .filter(|p| p.node == spec.target_node && p.restore_from.as_deref() == Some(archive_b.as_str()))
            .cloned();
        let Some(replacement) = replacement else {
            if self.cluster.live_pod(&spec.source_pod).is_some() {
                return Ok(Step::Wait);
            }
            self.swap.image_build_s = built.since(rechecked).as_secs_f64();
            self.swap.source_drain_s = now.since(t1).as_secs_f64();
            let delay = self.params.swap_restore.sample(&mut self.rng);
            let labels = self.meta().labels;
            self.launch_plans.insert(spec.source_pod.clone(), LaunchPlan { queues: vec![swap_q.clone()], held: false });
            let pod = PodSpec {
                name: spec.source_pod.clone(),
                labels: labels.clone(),
                node: spec.target_node.clone(),
                image_ref: image.clone(),
                pull_policy: PullPolicy::Never,
                startup_delay: delay,
                restore_from: Some(archive_b.clone()),
            };
            self.cluster.create_pod(pod, None, now).map_err(fatal)?;
            let template = PodTemplate {
                labels,
                image_ref: image,
                node: Some(spec.target_node.clone()),
                pull_policy: PullPolicy::Never,
                startup_delay: delay,
                restore_from: Some(archive_b),
            };
            self.cluster.retarget_statefulset(&ss, template).map_err(fatal)?;
            self.cluster.scale_statefulset(&ss, 1, now).map_err(fatal)?;
            self.apply_cluster_events();
            return Ok(Step::Wait);
        };
        let Some(rep_uid) = self.worker_for(&replacement.name).filter(|_| replacement.ready) else {
            return Ok(Step::Wait);
        };
        if self.op_state(FENCE_OPS[0]) == OpState::NotStarted {
            self.swap.replacement_restore_s = now.since(replacement.created_at).as_secs_f64();
        }
        self.exchange_fence(rep_uid, &shadow, &qc, &swap_q, &fence_q)
    }

    fn exchange_fence(
        &mut self,
        replacement: PodUid,
        shadow: &str,
        qc: &QueueConfig,
        swap_q: &str,
        fence_q: &str,
    ) -> Result<Step, ReconcileError> {
        let now = self.now();
        let step = |w: &World, i: usize| w.op_state(FENCE_OPS[i]);
        let latency = |w: &mut World| w.params.broker_op.sample(&mut w.rng);

        if step(self, 0) == OpState::NotStarted {
            self.broker.declare_queue(fence_q);
            self.broker.bind(fence_q).map_err(fatal)?;
            let depths = (self.broker.depth(&qc.primary_queue) as u64, self.broker.depth(swap_q) as u64);
            self.swap.fence = Some(FenceReport { depths_at_start: depths, ..Default::default() });
            let d = latency(self);
            self.start_op(FENCE_OPS[0], d, OpEffect::None);
            self.note("fence", "buffer bound");
            return Ok(Step::Wait);
        }
        let OpState::Done(_) = step(self, 0) else { return Ok(Step::Wait) };

        if step(self, 1) == OpState::NotStarted {
            self.broker.unbind(&qc.primary_queue).map_err(fatal)?;
            self.broker.unbind(swap_q).map_err(fatal)?;
            let d = latency(self);
            self.start_op(FENCE_OPS[1], d, OpEffect::None);
            return Ok(Step::Wait);
        }
        let OpState::Done(unbound) = step(self, 1) else { return Ok(Step::Wait) };

        if step(self, 2) == OpState::NotStarted {
            let timeout = unbound + SimDuration::from_secs_f64(self.params.fence_timeout);
            if now >= timeout {
                return Err(fatal("fence drain timed out"));
            }
            let ids = [self.broker.queue_id(&qc.primary_queue), self.broker.queue_id(swap_q)];
            self.watched_queues = ids.into_iter().flatten().collect();
            if self.watched_queues.iter().any(|&q| self.broker.queue(q).depth() > 0) {
                if self.cutoff_timer != Some(timeout) {
                    self.cutoff_timer = Some(timeout);
                    self.schedule(timeout, Event::Deadline);
                }
                return Ok(Step::Wait);
            }
            self.watched_queues.clear();
            let d = latency(self);
            self.start_op(FENCE_OPS[2], d, OpEffect::None);
            return Ok(Step::Wait);
        }
        let OpState::Done(_) = step(self, 2) else { return Ok(Step::Wait) };

        if step(self, 3) == OpState::NotStarted {
            if self.cluster.live_pod(shadow).is_some_and(|p| p.lifecycle != Lifecycle::Terminating) {
                let grace = self.cluster.termination_grace;
                self.cluster.delete_pod(shadow, grace, now).map_err(fatal)?;
                self.apply_cluster_events();
            }
            let buffered = self.broker.drain_to(fence_q, &qc.primary_queue).map_err(fatal)?;
            self.broker.bind(&qc.primary_queue).map_err(fatal)?;
            self.broker.delete_queue(fence_q).map_err(fatal)?;
            self.broker.delete_queue(swap_q).map_err(fatal)?;
            let mut queues: Vec<usize> = self.broker.queue_id(&qc.replay_queue).into_iter().collect();
            queues.push(self.broker.queue_id(&qc.primary_queue).expect("primary"));
            self.workers.get_mut(&replacement).expect("worker").consumer.queues = queues;
            self.kick(replacement);
            let bound_at = self.ops[FENCE_OPS[0]].started;
            if let Some(f) = self.swap.fence.as_mut() {
                f.window_s = now.since(bound_at).as_secs_f64();
                f.buffered = buffered;
            }
            self.note("fence", format!("handoff complete, {buffered} buffered messages delivered"));
            let d = latency(self);
            self.start_op(FENCE_OPS[3], d, OpEffect::None);
            return Ok(Step::Wait);
        }
        match step(self, 3) {
            OpState::Done(_) => Ok(Step::Advance),
            _ => Ok(Step::Wait),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Lifecycle;

    fn pod(owner: Option<OwnerKind>) -> PodRecord {
        PodRecord {
            uid: 1,
            name: "consumer-0".into(),
            labels: Labels::new(),
            node: "worker-1".into(),
            owner: owner.map(|kind| OwnerRef { kind, controller: "consumer".into() }),
            lifecycle: Lifecycle::Running,
            ready: true,
            image_ref: "consumer:v1".into(),
            restore_from: None,
            app: None,
            created_at: SimTime::ZERO,
        }
    }

    #[test]
    fn strategy_detection() {
        assert_eq!(detect_strategy(&pod(Some(OwnerKind::StatefulSet)), StrategyRequest::Auto), Strategy::Sequential);
        assert_eq!(
            detect_strategy(&pod(Some(OwnerKind::StatefulSet)), StrategyRequest::ShadowPodSwap),
            Strategy::ShadowPodSwap
        );
        assert_eq!(detect_strategy(&pod(Some(OwnerKind::Deployment)), StrategyRequest::Auto), Strategy::ShadowPod);
        assert_eq!(detect_strategy(&pod(None), StrategyRequest::Auto), Strategy::ShadowPod);
    }

    #[test]
    fn backoff_sequence() {
        let mut b = Backoff::default();
        let got: Vec<f64> = (0..7).map(|_| b.next_delay().as_secs_f64()).collect();
        assert_eq!(got, vec![0.25, 0.5, 1.0, 2.0, 4.0, 4.0, 4.0]);
        b.reset();
        assert_eq!(b.next_delay().as_secs_f64(), 0.25);
    }

    #[test]
    fn transitions_follow_the_chain() {
        let order = [
            Phase::Pending,
            Phase::Checkpointing,
            Phase::Transferring,
            Phase::Restoring,
            Phase::Replaying,
            Phase::Finalizing,
            Phase::Completed,
        ];
        for w in order.windows(2) {
            assert!(Phase::can_transition(w[0], w[1]));
            assert!(!Phase::can_transition(w[1], w[0]));
        }
        for p in Phase::ACTIVE {
            assert!(Phase::can_transition(p, Phase::Failed));
        }
        assert!(!Phase::can_transition(Phase::Pending, Phase::Restoring));
        assert!(!Phase::can_transition(Phase::Completed, Phase::Failed));
        assert!(!Phase::can_transition(Phase::Failed, Phase::Pending));
    }

    #[test]
    fn cutoff_policy() {
        assert_eq!(CutoffPolicy::fixed(120.0).t_cutoff(), 120.0);
        let armed = CutoffPolicy { t_replay_max: 120.0, lambda: Some(120.0), mu_target: Some(84.0) };
        assert!((armed.t_cutoff() - 84.0).abs() < 1e-12);
        let slack = CutoffPolicy { t_replay_max: 120.0, lambda: Some(60.0), mu_target: Some(84.0) };
        assert_eq!(slack.t_cutoff(), 120.0);
    }

    #[test]
    fn spec_field_names() {
        let spec = MigrationSpec {
            source_pod: "consumer-0".into(),
            target_node: "worker-2".into(),
            migration_strategy: StrategyRequest::Auto,
            transfer_mode: TransferKind::RegistryJob,
            message_queue_config: QueueConfig {
                exchange: "events".into(),
                primary_queue: "events.primary".into(),
                replay_queue: "events.replay".into(),
            },
            replay_cutoff_seconds: 120.0,
        };
        let v = serde_json::to_value(&spec).unwrap();
        for key in ["sourcePod", "targetNode", "migrationStrategy", "transferMode", "messageQueueConfig", "replayCutoffSeconds"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: MigrationSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
    }
}
