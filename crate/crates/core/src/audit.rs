//! Run-time invariant checker. Observes the simulation, never steers it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::broker::Broker;
use crate::cluster::{Cluster, PodUid};
use crate::reconciler::Phase;
use crate::sim::SimTime;
use crate::workload::{AppliedSet, Application, ConsumerMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    Identity,
    Endpoints,
    Conservation,
    SideEffect,
    PhaseLegality,
    Duplication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub at: f64,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeqRecord {
    pub published_at: SimTime,
    pub copies: usize,
    pub applications: Vec<(PodUid, SimTime, ConsumerMode)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LossAudit {
    pub published: u64,
    pub applied_by_survivor: u64,
    pub missing_seqs: Vec<u64>,
    pub duplicate_applications: u64,
}

impl LossAudit {
    pub fn clean(&self) -> bool {
        self.missing_seqs.is_empty() && self.duplicate_applications == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct Auditor {
    records: Vec<SeqRecord>,
    violations: Vec<Violation>,
    /// Rules already reported, so a standing violation is logged once.
    standing: BTreeSet<(Rule, String)>,
    duplicates: u64,
}

impl Auditor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn record(&self, seq: u64) -> Option<&SeqRecord> {
        seq.checked_sub(1).and_then(|i| self.records.get(i as usize))
    }

    fn violate(&mut self, at: SimTime, rule: Rule, detail: String) {
        if self.standing.insert((rule, detail.clone())) {
            self.violations.push(Violation { at: at.as_secs_f64(), rule, detail });
        }
    }

    pub fn on_publish(&mut self, seq: u64, at: SimTime, copies: usize) {
        let idx = (seq - 1) as usize;
        if self.records.len() <= idx {
            self.records.resize_with(idx + 1, SeqRecord::default);
        }
        self.records[idx] = SeqRecord { published_at: at, copies, applications: Vec::new() };
    }

    pub fn on_apply(&mut self, pod: PodUid, app: Application, mode: ConsumerMode) {
        if mode == ConsumerMode::Replay && app.side_effect {
            self.violate(app.at, Rule::SideEffect, format!("seq {} emitted a side effect during replay", app.seq));
        }
        let Some(rec) = app.seq.checked_sub(1).and_then(|i| self.records.get_mut(i as usize)) else {
            self.violate(app.at, Rule::Conservation, format!("seq {} applied but never published", app.seq));
            return;
        };
        let again = rec.applications.iter().any(|(p, _, _)| *p == pod);
        rec.applications.push((pod, app.at, mode));
        if again {
            self.duplicates += 1;
            self.violate(app.at, Rule::Duplication, format!("seq {} applied twice by pod {pod}", app.seq));
        }
    }

    pub fn on_phase(&mut self, from: Phase, to: Phase, at: SimTime) {
        if !Phase::can_transition(from, to) {
            self.violate(at, Rule::PhaseLegality, format!("{from:?} -> {to:?}"));
        }
    }

    /// Structural checks run after every dispatched event.
    pub fn check_event(&mut self, cluster: &Cluster, broker: &Broker, now: SimTime) {
        let mut names: BTreeMap<&str, usize> = BTreeMap::new();
        for p in cluster.live_pods() {
            *names.entry(p.name.as_str()).or_default() += 1;
        }
        let dupes: Vec<String> = names.iter().filter(|(_, &n)| n > 1).map(|(name, _)| name.to_string()).collect();
        for name in dupes {
            self.violate(now, Rule::Identity, format!("two live pods named {name}"));
        }
        let stale: Vec<String> = cluster
            .services
            .values()
            .filter(|s| s.endpoints != cluster.compute_endpoints(&s.selector))
            .map(|s| s.name.clone())
            .collect();
        for name in stale {
            self.violate(now, Rule::Endpoints, format!("service {name} endpoints are stale"));
        }
        let leaks: Vec<String> =
            broker.stats().into_iter().filter(|(_, s)| !s.conserved()).map(|(name, s)| format!("{name}: {s:?}")).collect();
        for detail in leaks {
            self.violate(now, Rule::Conservation, detail);
        }
    }

    /// Compares what was published with what the surviving consumer holds.
    /// The survivor's set already includes everything carried forward through
    /// checkpoint restores.
    pub fn finalize(&self, published: u64, survivor: Option<&AppliedSet>) -> LossAudit {
        let (applied, missing) = match survivor {
            Some(s) => (s.len(), s.missing(published)),
            None => (0, (1..=published).collect()),
        };
        LossAudit { published, applied_by_survivor: applied, missing_seqs: missing, duplicate_applications: self.duplicates }
    }
}
