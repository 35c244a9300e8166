//! Miniature model of the Kubernetes objects the migration touches: nodes,
//! pods, owner references, label-selector services, and the StatefulSet and
//! Deployment controllers.
//!
//! Mutations push [`ClusterEvent`]s into an outbox that the simulation loop
//! drains; delayed transitions (pod ready, pod gone) are returned as timers
//! for the loop to schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{SimDuration, SimTime};

pub type PodUid = u64;
pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("pod name {0} is held by a live pod")]
    IdentityConflict(String),
    #[error("pod {0} not found")]
    NotFound(String),
    #[error("adoption of {pod} by {controller} refused: {reason}")]
    AdoptionRefused { pod: String, controller: String, reason: String },
    #[error("image {image} not present on node {node}")]
    ImageNotPresent { image: String, node: String },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown controller {0}")]
    UnknownController(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lifecycle {
    Pending,
    Running,
    Terminating,
    Gone,
}

impl Lifecycle {
    pub fn is_live(self) -> bool {
        self != Lifecycle::Gone
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OwnerKind {
    StatefulSet,
    Deployment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerRef {
    pub kind: OwnerKind,
    pub controller: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PullPolicy {
    #[default]
    IfNotPresent,
    Never,
}

/// What a pod should be created with.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PodSpec {
    pub name: String,
    pub labels: Labels,
    pub node: String,
    pub image_ref: String,
    pub pull_policy: PullPolicy,
    /// Time from creation until the pod is Running and ready.
    pub startup_delay: SimDuration,
    /// Checkpoint archive the container is restored from, if any.
    pub restore_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodRecord {
    pub uid: PodUid,
    pub name: String,
    pub labels: Labels,
    pub node: String,
    pub owner: Option<OwnerRef>,
    pub lifecycle: Lifecycle,
    pub ready: bool,
    pub image_ref: String,
    pub restore_from: Option<String>,
    /// Handle of the consumer instance running in this pod.
    pub app: Option<PodUid>,
    pub created_at: SimTime,
}

impl PodRecord {
    pub fn is_live(&self) -> bool {
        self.lifecycle.is_live()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodTemplate {
    pub labels: Labels,
    pub image_ref: String,
    /// Node the controller places pods on. For a StatefulSet this is the
    /// node constraint; for a Deployment, the node affinity.
    pub node: Option<String>,
    pub pull_policy: PullPolicy,
    pub startup_delay: SimDuration,
    pub restore_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatefulSetRecord {
    pub name: String,
    pub replicas: u32,
    pub template: PodTemplate,
    pub selector: Labels,
}

impl StatefulSetRecord {
    pub fn ordinal_name(&self, ordinal: u32) -> String {
        format!("{}-{}", self.name, ordinal)
    }

    /// Parses `<name>-<ordinal>`.
    pub fn ordinal_of(&self, pod_name: &str) -> Option<u32> {
        let rest = pod_name.strip_prefix(&self.name)?.strip_prefix('-')?;
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || (rest.len() > 1 && rest.starts_with('0')) {
            return None;
        }
        rest.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentRecord {
    pub name: String,
    pub replicas: u32,
    pub template: PodTemplate,
    pub selector: Labels,
    next_suffix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceRecord {
    pub name: String,
    pub selector: Labels,
    pub endpoints: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub images: BTreeSet<String>,
    pub has_agent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    Ready,
    Gone,
}

/// A delayed pod transition the simulation loop must schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PodTimer {
    pub at: SimTime,
    pub uid: PodUid,
    pub kind: TimerKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClusterEvent {
    Created(PodUid),
    Ready(PodUid),
    Terminating(PodUid),
    Gone(PodUid),
    Adopted(PodUid),
    Timer(PodTimer),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PodChange {
    Created,
    Terminating,
    Adopted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodTransition {
    pub pod: String,
    pub change: PodChange,
}

pub fn selector_matches(selector: &Labels, labels: &Labels) -> bool {
    !selector.is_empty() && selector.iter().all(|(k, v)| labels.get(k) == Some(v))
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub nodes: BTreeMap<String, NodeRecord>,
    pods: BTreeMap<PodUid, PodRecord>,
    pub statefulsets: BTreeMap<String, StatefulSetRecord>,
    pub deployments: BTreeMap<String, DeploymentRecord>,
    pub services: BTreeMap<String, ServiceRecord>,
    /// How long a Terminating pod keeps serving before it is gone.
    pub termination_grace: SimDuration,
    next_uid: PodUid,
    outbox: Vec<ClusterEvent>,
}

impl Cluster {
    pub fn new(termination_grace: SimDuration) -> Self {
        Cluster {
            nodes: BTreeMap::new(),
            pods: BTreeMap::new(),
            statefulsets: BTreeMap::new(),
            deployments: BTreeMap::new(),
            services: BTreeMap::new(),
            termination_grace,
            next_uid: 1,
            outbox: Vec::new(),
        }
    }

    pub fn add_node(&mut self, id: &str, has_agent: bool) {
        self.nodes.insert(id.to_string(), NodeRecord { id: id.to_string(), images: BTreeSet::new(), has_agent });
    }

    pub fn add_service(&mut self, name: &str, selector: Labels) {
        self.services.insert(name.to_string(), ServiceRecord { name: name.to_string(), selector, endpoints: BTreeSet::new() });
        self.refresh_endpoints();
    }

    pub fn add_image(&mut self, node: &str, image: &str) -> Result<(), ClusterError> {
        let n = self.nodes.get_mut(node).ok_or_else(|| ClusterError::UnknownNode(node.to_string()))?;
        n.images.insert(image.to_string());
        Ok(())
    }

    pub fn remove_image(&mut self, node: &str, image: &str) {
        if let Some(n) = self.nodes.get_mut(node) {
            n.images.remove(image);
        }
    }

    pub fn has_image(&self, node: &str, image: &str) -> bool {
        self.nodes.get(node).is_some_and(|n| n.images.contains(image))
    }

    pub fn drain_events(&mut self) -> Vec<ClusterEvent> {
        std::mem::take(&mut self.outbox)
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodRecord> {
        self.pods.values()
    }

    pub fn live_pods(&self) -> impl Iterator<Item = &PodRecord> {
        self.pods.values().filter(|p| p.is_live())
    }

    pub fn pod(&self, uid: PodUid) -> Option<&PodRecord> {
        self.pods.get(&uid)
    }

    pub fn pod_mut(&mut self, uid: PodUid) -> Option<&mut PodRecord> {
        self.pods.get_mut(&uid)
    }

    /// The live pod currently holding `name`, if any.
    pub fn live_pod(&self, name: &str) -> Option<&PodRecord> {
        self.pods.values().find(|p| p.is_live() && p.name == name)
    }

    pub fn create_pod(&mut self, spec: PodSpec, owner: Option<OwnerRef>, now: SimTime) -> Result<PodUid, ClusterError> {
        if self.live_pod(&spec.name).is_some() {
            return Err(ClusterError::IdentityConflict(spec.name));
        }
        let node = self.nodes.get(&spec.node).ok_or_else(|| ClusterError::UnknownNode(spec.node.clone()))?;
        if spec.pull_policy == PullPolicy::Never && !node.images.contains(&spec.image_ref) {
            return Err(ClusterError::ImageNotPresent { image: spec.image_ref, node: spec.node });
        }
        let uid = self.next_uid;
        self.next_uid += 1;
        self.pods.insert(
            uid,
            PodRecord {
                uid,
                name: spec.name,
                labels: spec.labels,
                node: spec.node,
                owner,
                lifecycle: Lifecycle::Pending,
                ready: false,
                image_ref: spec.image_ref,
                restore_from: spec.restore_from,
                app: None,
                created_at: now,
            },
        );
        self.outbox.push(ClusterEvent::Created(uid));
        self.outbox.push(ClusterEvent::Timer(PodTimer { at: now + spec.startup_delay, uid, kind: TimerKind::Ready }));
        Ok(uid)
    }

    /// Applies a timer previously handed out by this cluster.
    pub fn fire_timer(&mut self, timer: PodTimer, now: SimTime) {
        let Some(pod) = self.pods.get_mut(&timer.uid) else { return };
        match timer.kind {
            TimerKind::Ready => {
                if pod.lifecycle == Lifecycle::Pending {
                    pod.lifecycle = Lifecycle::Running;
                    pod.ready = true;
                    self.outbox.push(ClusterEvent::Ready(timer.uid));
                }
            }
            TimerKind::Gone => {
                if pod.lifecycle == Lifecycle::Terminating {
                    pod.lifecycle = Lifecycle::Gone;
                    pod.ready = false;
                    let owner = pod.owner.clone();
                    self.outbox.push(ClusterEvent::Gone(timer.uid));
                    if let Some(owner) = owner {
                        self.reconcile_controller(&owner, now);
                    }
                }
            }
        }
        self.refresh_endpoints();
    }

    /// Marks the pod Terminating. It keeps serving for `grace`, then is gone.
    pub fn delete_pod(&mut self, name: &str, grace: SimDuration, now: SimTime) -> Result<PodTimer, ClusterError> {
        let uid = self.live_pod(name).map(|p| p.uid).ok_or_else(|| ClusterError::NotFound(name.to_string()))?;
        let timer = self.terminate(uid, grace, now).ok_or_else(|| ClusterError::NotFound(name.to_string()))?;
        // A ReplicaSet replaces pods as soon as they start terminating.
        if let Some(owner) = self.pods[&uid].owner.clone() {
            if owner.kind == OwnerKind::Deployment {
                self.reconcile_controller(&owner, now);
            }
        }
        Ok(timer)
    }

    fn terminate(&mut self, uid: PodUid, grace: SimDuration, now: SimTime) -> Option<PodTimer> {
        let pod = self.pods.get_mut(&uid)?;
        match pod.lifecycle {
            Lifecycle::Gone => return None,
            Lifecycle::Terminating => {
                return Some(PodTimer { at: now, uid, kind: TimerKind::Gone });
            }
            Lifecycle::Pending | Lifecycle::Running => {}
        }
        pod.lifecycle = Lifecycle::Terminating;
        let timer = PodTimer { at: now + grace, uid, kind: TimerKind::Gone };
        self.outbox.push(ClusterEvent::Terminating(uid));
        self.outbox.push(ClusterEvent::Timer(timer));
        self.refresh_endpoints();
        Some(timer)
    }

    pub fn add_statefulset(&mut self, ss: StatefulSetRecord, now: SimTime) -> Vec<PodTransition> {
        let name = ss.name.clone();
        self.statefulsets.insert(name.clone(), ss);
        self.reconcile_statefulset(&name, now)
    }

    pub fn add_deployment(&mut self, name: &str, replicas: u32, template: PodTemplate, selector: Labels, now: SimTime) -> Vec<PodTransition> {
        self.deployments.insert(
            name.to_string(),
            DeploymentRecord { name: name.to_string(), replicas, template, selector, next_suffix: 0 },
        );
        self.reconcile_deployment(name, now)
    }

    pub fn scale_statefulset(&mut self, name: &str, replicas: u32, now: SimTime) -> Result<Vec<PodTransition>, ClusterError> {
        let ss = self.statefulsets.get_mut(name).ok_or_else(|| ClusterError::UnknownController(name.to_string()))?;
        ss.replicas = replicas;
        Ok(self.reconcile_statefulset(name, now))
    }

    /// Points the StatefulSet pod template at a new node and image.
    pub fn retarget_statefulset(&mut self, name: &str, template: PodTemplate) -> Result<(), ClusterError> {
        let ss = self.statefulsets.get_mut(name).ok_or_else(|| ClusterError::UnknownController(name.to_string()))?;
        ss.template = template;
        Ok(())
    }

    pub fn patch_deployment_affinity(&mut self, name: &str, node: &str) -> Result<(), ClusterError> {
        let d = self.deployments.get_mut(name).ok_or_else(|| ClusterError::UnknownController(name.to_string()))?;
        d.template.node = Some(node.to_string());
        Ok(())
    }

    pub fn adopt_pod(&mut self, ss_name: &str, pod_name: &str) -> Result<PodRecord, ClusterError> {
        let ss = self.statefulsets.get(ss_name).ok_or_else(|| ClusterError::UnknownController(ss_name.to_string()))?;
        let refuse = |reason: &str| ClusterError::AdoptionRefused {
            pod: pod_name.to_string(),
            controller: ss_name.to_string(),
            reason: reason.to_string(),
        };
        let pod = self.live_pod(pod_name).ok_or_else(|| ClusterError::NotFound(pod_name.to_string()))?;
        match ss.ordinal_of(pod_name) {
            Some(o) if o < ss.replicas => {}
            _ => return Err(refuse("name is not an expected ordinal")),
        }
        if !selector_matches(&ss.selector, &pod.labels) {
            return Err(refuse("labels do not match selector"));
        }
        if pod.owner.is_some() {
            return Err(refuse("pod already has an owner"));
        }
        let uid = pod.uid;
        let owner = OwnerRef { kind: OwnerKind::StatefulSet, controller: ss_name.to_string() };
        let pod = self.pods.get_mut(&uid).expect("live pod");
        pod.owner = Some(owner);
        self.outbox.push(ClusterEvent::Adopted(uid));
        Ok(pod.clone())
    }

    fn reconcile_controller(&mut self, owner: &OwnerRef, now: SimTime) {
        match owner.kind {
            OwnerKind::StatefulSet => {
                self.reconcile_statefulset(&owner.controller, now);
            }
            OwnerKind::Deployment => {
                self.reconcile_deployment(&owner.controller, now);
            }
        }
    }

    fn owned_by<'a>(&'a self, kind: OwnerKind, controller: &'a str) -> impl Iterator<Item = &'a PodRecord> + 'a {
        self.live_pods()
            .filter(move |p| p.owner.as_ref().is_some_and(|o| o.kind == kind && o.controller == controller))
    }

    fn reconcile_statefulset(&mut self, name: &str, now: SimTime) -> Vec<PodTransition> {
        let Some(ss) = self.statefulsets.get(name).cloned() else { return Vec::new() };
        let mut transitions = Vec::new();

        let mut excess: Vec<(u32, PodUid, String)> = self
            .owned_by(OwnerKind::StatefulSet, name)
            .filter(|p| p.lifecycle != Lifecycle::Terminating)
            .filter_map(|p| ss.ordinal_of(&p.name).map(|o| (o, p.uid, p.name.clone())))
            .filter(|(o, _, _)| *o >= ss.replicas)
            .collect();
        excess.sort_by_key(|e| std::cmp::Reverse(e.0));
        for (_, uid, pod) in excess {
            if self.terminate(uid, self.termination_grace, now).is_some() {
                transitions.push(PodTransition { pod, change: PodChange::Terminating });
            }
        }

        for ordinal in 0..ss.replicas {
            let pod_name = ss.ordinal_name(ordinal);
            match self.live_pod(&pod_name) {
                Some(p) if p.owner.is_none() => {
                    if self.adopt_pod(name, &pod_name).is_ok() {
                        transitions.push(PodTransition { pod: pod_name, change: PodChange::Adopted });
                    }
                }
                Some(_) => {}
                None => {
                    let Some(node) = ss.template.node.clone().or_else(|| self.nodes.keys().next().cloned()) else {
                        continue;
                    };
                    let spec = PodSpec {
                        name: pod_name.clone(),
                        labels: ss.template.labels.clone(),
                        node,
                        image_ref: ss.template.image_ref.clone(),
                        pull_policy: ss.template.pull_policy,
                        startup_delay: ss.template.startup_delay,
                        restore_from: ss.template.restore_from.clone(),
                    };
                    let owner = OwnerRef { kind: OwnerKind::StatefulSet, controller: name.to_string() };
                    if self.create_pod(spec, Some(owner), now).is_ok() {
                        transitions.push(PodTransition { pod: pod_name, change: PodChange::Created });
                    }
                }
            }
        }
        self.refresh_endpoints();
        transitions
    }

    fn reconcile_deployment(&mut self, name: &str, now: SimTime) -> Vec<PodTransition> {
        let Some(dep) = self.deployments.get(name).cloned() else { return Vec::new() };
        let mut transitions = Vec::new();
        let mut active: Vec<(SimTime, PodUid, String)> = self
            .owned_by(OwnerKind::Deployment, name)
            .filter(|p| p.lifecycle != Lifecycle::Terminating)
            .map(|p| (p.created_at, p.uid, p.name.clone()))
            .collect();

        if (active.len() as u32) > dep.replicas {
            active.sort();
            while (active.len() as u32) > dep.replicas {
                let (_, uid, pod) = active.pop().expect("nonempty");
                if self.terminate(uid, self.termination_grace, now).is_some() {
                    transitions.push(PodTransition { pod, change: PodChange::Terminating });
                }
            }
        }

        let mut missing = dep.replicas.saturating_sub(active.len() as u32);
        if missing > 0 {
            // Orphans matching the selector are adopted before anything new is created.
            let orphans: Vec<PodUid> = self
                .live_pods()
                .filter(|p| p.owner.is_none() && p.lifecycle == Lifecycle::Running)
                .filter(|p| selector_matches(&dep.selector, &p.labels))
                .map(|p| p.uid)
                .collect();
            for uid in orphans.into_iter().take(missing as usize) {
                let pod = self.pods.get_mut(&uid).expect("live");
                pod.owner = Some(OwnerRef { kind: OwnerKind::Deployment, controller: name.to_string() });
                transitions.push(PodTransition { pod: pod.name.clone(), change: PodChange::Adopted });
                self.outbox.push(ClusterEvent::Adopted(uid));
                missing -= 1;
            }
        }
        for _ in 0..missing {
            let Some(node) = dep.template.node.clone().or_else(|| self.nodes.keys().next().cloned()) else { break };
            let pod_name = self.next_deployment_pod_name(name);
            let spec = PodSpec {
                name: pod_name.clone(),
                labels: dep.template.labels.clone(),
                node,
                image_ref: dep.template.image_ref.clone(),
                pull_policy: dep.template.pull_policy,
                startup_delay: dep.template.startup_delay,
                restore_from: dep.template.restore_from.clone(),
            };
            let owner = OwnerRef { kind: OwnerKind::Deployment, controller: name.to_string() };
            if self.create_pod(spec, Some(owner), now).is_ok() {
                transitions.push(PodTransition { pod: pod_name, change: PodChange::Created });
            }
        }
        self.refresh_endpoints();
        transitions
    }

    fn next_deployment_pod_name(&mut self, name: &str) -> String {
        let dep = self.deployments.get_mut(name).expect("deployment exists");
        dep.next_suffix += 1;
        // Knuth multiplicative hash gives stable, distinct, random-looking suffixes.
        let suffix = (dep.next_suffix.wrapping_mul(2_654_435_761)) & 0xf_ffff;
        format!("{name}-{suffix:05x}")
    }

    /// Ready pods whose labels match the service selector.
    pub fn compute_endpoints(&self, selector: &Labels) -> BTreeSet<String> {
        self.pods
            .values()
            .filter(|p| p.ready && selector_matches(selector, &p.labels))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn service_endpoints(&self, service: &str) -> BTreeSet<String> {
        self.services.get(service).map(|s| s.endpoints.clone()).unwrap_or_default()
    }

    pub fn service_has_endpoints(&self, service: &str) -> bool {
        self.services.get(service).is_some_and(|s| !s.endpoints.is_empty())
    }

    fn refresh_endpoints(&mut self) {
        let updated: Vec<(String, BTreeSet<String>)> =
            self.services.values().map(|s| (s.name.clone(), self.compute_endpoints(&s.selector))).collect();
        for (name, eps) in updated {
            self.services.get_mut(&name).expect("exists").endpoints = eps;
        }
    }

    /// Marks a pod ready or unready out of band (used by fault-injection tests).
    pub fn set_ready(&mut self, uid: PodUid, ready: bool) {
        if let Some(p) = self.pods.get_mut(&uid) {
            p.ready = ready && p.lifecycle == Lifecycle::Running;
        }
        self.refresh_endpoints();
    }

    /// Test hook: inserts a pod bypassing the identity check.
    #[doc(hidden)]
    pub fn force_insert_pod(&mut self, mut pod: PodRecord) -> PodUid {
        let uid = self.next_uid;
        self.next_uid += 1;
        pod.uid = uid;
        self.pods.insert(uid, pod);
        self.refresh_endpoints();
        uid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Labels {
        [("app".to_string(), "consumer".to_string())].into()
    }

    fn cluster() -> Cluster {
        let mut c = Cluster::new(SimDuration::from_secs_f64(7.4));
        c.add_node("worker-1", true);
        c.add_node("worker-2", true);
        c.add_service("consumer", labels());
        c
    }

    fn template(node: &str) -> PodTemplate {
        PodTemplate {
            labels: labels(),
            image_ref: "consumer:v1".into(),
            node: Some(node.into()),
            pull_policy: PullPolicy::IfNotPresent,
            startup_delay: SimDuration::ZERO,
            restore_from: None,
        }
    }

    fn fire_all(c: &mut Cluster, now: SimTime) {
        loop {
            let timers: Vec<_> = c
                .drain_events()
                .into_iter()
                .filter_map(|e| match e {
                    ClusterEvent::Timer(t) if t.at <= now => Some(t),
                    _ => None,
                })
                .collect();
            if timers.is_empty() {
                break;
            }
            for t in timers {
                c.fire_timer(t, now);
            }
        }
    }

    fn statefulset(c: &mut Cluster, replicas: u32) {
        c.add_statefulset(
            StatefulSetRecord { name: "consumer".into(), replicas, template: template("worker-1"), selector: labels() },
            SimTime::ZERO,
        );
        fire_all(c, SimTime::ZERO);
    }

    fn spec(name: &str) -> PodSpec {
        PodSpec { name: name.into(), labels: labels(), node: "worker-2".into(), ..Default::default() }
    }

    #[test]
    fn shadow_coexists_with_source() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        c.create_pod(spec("consumer-0-shadow"), None, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        let names: BTreeSet<_> = c.live_pods().map(|p| p.name.clone()).collect();
        assert_eq!(names, ["consumer-0".to_string(), "consumer-0-shadow".to_string()].into());
        assert_eq!(c.service_endpoints("consumer"), names);
    }

    #[test]
    fn same_name_pod_is_an_identity_conflict() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        let err = c.create_pod(spec("consumer-0"), None, SimTime::ZERO).unwrap_err();
        assert_eq!(err, ClusterError::IdentityConflict("consumer-0".into()));
    }

    #[test]
    fn unlabeled_pod_never_becomes_an_endpoint() {
        let mut c = cluster();
        let mut s = spec("loner");
        s.labels.clear();
        c.create_pod(s, None, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        assert_eq!(c.live_pod("loner").unwrap().lifecycle, Lifecycle::Running);
        assert!(c.service_endpoints("consumer").is_empty());
    }

    #[test]
    fn scale_down_terminates_source() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        let t = c.scale_statefulset("consumer", 0, SimTime::ZERO).unwrap();
        assert_eq!(t, vec![PodTransition { pod: "consumer-0".into(), change: PodChange::Terminating }]);
        assert_eq!(c.live_pod("consumer-0").unwrap().lifecycle, Lifecycle::Terminating);
        // Still serving during the grace period.
        assert!(c.service_has_endpoints("consumer"));
    }

    #[test]
    fn scale_down_removes_highest_ordinal_first() {
        let mut c = cluster();
        statefulset(&mut c, 3);
        let t = c.scale_statefulset("consumer", 1, SimTime::ZERO).unwrap();
        let order: Vec<_> = t.iter().map(|t| t.pod.as_str()).collect();
        assert_eq!(order, vec!["consumer-2", "consumer-1"]);
    }

    #[test]
    fn scale_up_adopts_existing_unowned_pod() {
        let mut c = cluster();
        statefulset(&mut c, 0);
        c.create_pod(spec("consumer-0"), None, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        let t = c.scale_statefulset("consumer", 1, SimTime::ZERO).unwrap();
        assert_eq!(t, vec![PodTransition { pod: "consumer-0".into(), change: PodChange::Adopted }]);
        assert_eq!(c.live_pods().count(), 1);
        let pod = c.live_pod("consumer-0").unwrap();
        assert_eq!(pod.owner.as_ref().unwrap().kind, OwnerKind::StatefulSet);
        assert_eq!(pod.node, "worker-2");
    }

    #[test]
    fn scaling_to_same_replicas_is_a_no_op() {
        let mut c = cluster();
        statefulset(&mut c, 2);
        assert!(c.scale_statefulset("consumer", 2, SimTime::ZERO).unwrap().is_empty());
    }

    #[test]
    fn adoption_refusals() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        c.create_pod(spec("consumer-0-shadow"), None, SimTime::ZERO).unwrap();
        assert!(matches!(c.adopt_pod("consumer", "consumer-0-shadow"), Err(ClusterError::AdoptionRefused { .. })));
        // consumer-0 is already owned by the StatefulSet.
        assert!(matches!(c.adopt_pod("consumer", "consumer-0"), Err(ClusterError::AdoptionRefused { .. })));
    }

    #[test]
    fn adoption_accepts_matching_orphan() {
        let mut c = cluster();
        statefulset(&mut c, 0);
        c.create_pod(spec("consumer-0"), None, SimTime::ZERO).unwrap();
        c.statefulsets.get_mut("consumer").unwrap().replicas = 1;
        let pod = c.adopt_pod("consumer", "consumer-0").unwrap();
        assert_eq!(pod.owner, Some(OwnerRef { kind: OwnerKind::StatefulSet, controller: "consumer".into() }));
    }

    #[test]
    fn deleting_unowned_pod_does_not_recreate() {
        let mut c = cluster();
        c.create_pod(spec("consumer-0-shadow"), None, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        c.delete_pod("consumer-0-shadow", SimDuration::ZERO, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        assert_eq!(c.live_pods().count(), 0);
    }

    #[test]
    fn deleting_statefulset_pod_with_replicas_recreates_it() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        let first = c.live_pod("consumer-0").unwrap().uid;
        c.delete_pod("consumer-0", SimDuration::ZERO, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        let again = c.live_pod("consumer-0").expect("recreated");
        assert_ne!(again.uid, first);
    }

    #[test]
    fn deleting_deployment_pod_recreates_it() {
        let mut c = cluster();
        let mut t = template("worker-1");
        t.node = None;
        c.add_deployment("consumer", 1, t, labels(), SimTime::ZERO);
        fire_all(&mut c, SimTime::ZERO);
        let name = c.live_pods().next().unwrap().name.clone();
        c.delete_pod(&name, SimDuration::from_secs_f64(1.0), SimTime::ZERO).unwrap();
        let live: Vec<_> = c.live_pods().filter(|p| p.lifecycle != Lifecycle::Terminating).collect();
        assert_eq!(live.len(), 1);
        assert_ne!(live[0].name, name);
    }

    #[test]
    fn deployment_adopts_orphan_after_source_deletion() {
        let mut c = cluster();
        c.add_deployment("consumer", 1, template("worker-1"), labels(), SimTime::ZERO);
        fire_all(&mut c, SimTime::ZERO);
        let source = c.live_pods().next().unwrap().name.clone();
        c.create_pod(spec(&format!("{source}-shadow")), None, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::ZERO);
        c.patch_deployment_affinity("consumer", "worker-2").unwrap();
        c.delete_pod(&source, SimDuration::from_secs_f64(7.4), SimTime::ZERO).unwrap();
        let shadow = c.live_pod(&format!("{source}-shadow")).unwrap();
        assert_eq!(shadow.owner.as_ref().unwrap().kind, OwnerKind::Deployment);
        assert_eq!(c.live_pods().count(), 2, "source terminating + adopted shadow, nothing new");
    }

    #[test]
    fn all_terminating_means_no_endpoints() {
        let mut c = cluster();
        statefulset(&mut c, 1);
        c.scale_statefulset("consumer", 0, SimTime::ZERO).unwrap();
        fire_all(&mut c, SimTime::from_secs_f64(7.4));
        assert!(c.service_endpoints("consumer").is_empty());
        assert_eq!(c.live_pods().count(), 0);
    }

    #[test]
    fn restore_requires_image_for_never_pull() {
        let mut c = cluster();
        let mut s = spec("consumer-0-shadow");
        s.pull_policy = PullPolicy::Never;
        s.image_ref = "ckpt:1".into();
        assert!(matches!(c.create_pod(s.clone(), None, SimTime::ZERO), Err(ClusterError::ImageNotPresent { .. })));
        c.add_image("worker-2", "ckpt:1").unwrap();
        assert!(c.create_pod(s, None, SimTime::ZERO).is_ok());
    }

    #[test]
    fn ordinal_parsing() {
        let ss = StatefulSetRecord { name: "consumer".into(), replicas: 1, template: template("w"), selector: labels() };
        assert_eq!(ss.ordinal_of("consumer-0"), Some(0));
        assert_eq!(ss.ordinal_of("consumer-12"), Some(12));
        assert_eq!(ss.ordinal_of("consumer-0-shadow"), None);
        assert_eq!(ss.ordinal_of("consumer-01"), None);
        assert_eq!(ss.ordinal_of("other-0"), None);
    }

    /// Exhaustively drives a StatefulSet through every short sequence of
    /// controller actions and checks that no two live pods ever share a name.
    #[test]
    fn no_reachable_controller_state_duplicates_a_name() {
        #[derive(Clone, Copy, Debug)]
        enum Action {
            Scale(u32),
            CreateOrphan,
            DeleteZero,
            Tick,
        }
        let actions = [Action::Scale(0), Action::Scale(1), Action::Scale(2), Action::CreateOrphan, Action::DeleteZero, Action::Tick];
        fn check(c: &Cluster) {
            let mut seen = BTreeSet::new();
            for p in c.live_pods() {
                assert!(seen.insert(p.name.clone()), "duplicate live pod {}", p.name);
            }
        }
        let mut stack: Vec<Vec<Action>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let mut c = cluster();
            statefulset(&mut c, 1);
            let mut now = SimTime::ZERO;
            let mut pending: Vec<PodTimer> = Vec::new();
            for a in &seq {
                match *a {
                    Action::Scale(n) => {
                        c.scale_statefulset("consumer", n, now).unwrap();
                    }
                    Action::CreateOrphan => {
                        let _ = c.create_pod(spec("consumer-0"), None, now);
                    }
                    Action::DeleteZero => {
                        let _ = c.delete_pod("consumer-0", SimDuration::from_secs_f64(1.0), now);
                    }
                    Action::Tick => {
                        now += SimDuration::from_secs_f64(1.0);
                    }
                }
                loop {
                    pending.extend(c.drain_events().into_iter().filter_map(|e| match e {
                        ClusterEvent::Timer(t) => Some(t),
                        _ => None,
                    }));
                    let due: Vec<_> = pending.iter().copied().filter(|t| t.at <= now).collect();
                    pending.retain(|t| t.at > now);
                    if due.is_empty() {
                        break;
                    }
                    for t in due {
                        c.fire_timer(t, now);
                    }
                }
                check(&c);
            }
            if seq.len() < 5 {
                for a in actions {
                    let mut next = seq.clone();
                    next.push(a);
                    stack.push(next);
                }
            }
        }
    }
}
