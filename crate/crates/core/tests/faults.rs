//! Transient and fatal failures in the reconcile loop.

use shadow_core::harness::{run_seed, Calibration, Configuration, ExperimentConfig, Injection, RATES};
use shadow_core::reconciler::{FaultPlan, Phase};
use shadow_core::world::{Scenario, SimParams, World, WorkloadKind, SOURCE_NODE};
use shadow_core::checkpoint::TransferKind;
use shadow_core::reconciler::StrategyRequest;

fn fault(phase: Phase) -> Injection {
    Injection { fault: Some(FaultPlan { phase }), ..Default::default() }
}

#[test]
fn one_transient_failure_anywhere_is_absorbed() {
    for c in Configuration::ALL {
        for rate in RATES {
            let cfg = ExperimentConfig::new(c, rate);
            let baseline = run_seed(&cfg, 3, Injection::default());
            for phase in Phase::ACTIVE {
                let r = run_seed(&cfg, 3, fault(phase));
                let cell = format!("{c}@{rate} fault in {}", phase.name());
                assert_eq!(r.phase, Phase::Completed, "{cell}: {:?}", r.failure);
                assert_eq!(r.transient_failures, 1, "{cell}");
                assert!(r.loss_audit.clean(), "{cell}: {:?}", r.loss_audit.missing_seqs.len());
                assert!(r.violations.is_empty(), "{cell}: {:?}", r.violations);
                assert_eq!(r.terminal_state, baseline.terminal_state, "{cell}");
                if c.is_shadow_family() {
                    assert_eq!(r.downtime.longest_streak_s, 0.0, "{cell}");
                }
            }
        }
    }
}

#[test]
fn retry_costs_at_most_one_backoff_step() {
    let cfg = ExperimentConfig::new(Configuration::SsShadow, 10.0);
    let baseline = run_seed(&cfg, 1, Injection::default());
    for phase in Phase::ACTIVE {
        let r = run_seed(&cfg, 1, fault(phase));
        // The first retry fires 0.25 s later; waits that were already in
        // progress absorb some or all of it.
        let extra = r.total - baseline.total;
        assert!((-0.05..=0.30).contains(&extra), "{}: {extra}", phase.name());
    }
}

#[test]
fn fault_in_pending_is_never_injected() {
    // Pending has no side effects, so the plan never fires.
    let cfg = ExperimentConfig::new(Configuration::DReg, 20.0);
    let r = run_seed(&cfg, 1, fault(Phase::Pending));
    assert_eq!(r.transient_failures, 0);
    assert_eq!(r.phase, Phase::Completed);
}

fn swap_world() -> World {
    let cfg = ExperimentConfig::new(Configuration::SsSwap, 10.0);
    World::new(cfg.params(), Configuration::SsSwap.scenario(), 1)
}

#[test]
fn missing_agent_fails_the_transfer() {
    let mut w = swap_world();
    w.cluster.nodes.get_mut(SOURCE_NODE).unwrap().has_agent = false;
    w.run();
    let status = &w.migration.as_ref().unwrap().status;
    assert_eq!(status.phase, Phase::Failed);
    assert!(status.failure.as_deref().unwrap().contains(SOURCE_NODE));
    // The source keeps serving after a failed migration.
    assert!(w.survivor().is_some());
}

#[test]
fn unknown_target_node_fails_before_any_side_effect() {
    let mut w = swap_world();
    w.cluster.nodes.remove("worker-2");
    w.run();
    let status = &w.migration.as_ref().unwrap().status;
    assert_eq!(status.phase, Phase::Failed);
    assert!(status.phase_timings.is_empty());
    assert!(w.broker.queue_by_name("events.consumer.replay").is_none());
}

#[test]
fn swap_requires_a_statefulset_owner() {
    let params = SimParams::default();
    let scenario = Scenario {
        workload: WorkloadKind::Deployment,
        strategy: StrategyRequest::ShadowPodSwap,
        transfer: TransferKind::AgentRegistry,
    };
    let mut w = World::new(params, scenario, 1);
    w.run();
    let status = &w.migration.as_ref().unwrap().status;
    assert_eq!(status.phase, Phase::Failed);
    assert!(status.failure.as_deref().unwrap().contains("StatefulSet"));
}

#[test]
fn fence_timeout_fails_the_swap() {
    // The consumer is slower than the producer, so the fence never drains.
    let cal = Calibration { mu: 5.0, fence_timeout: 1.0, cutoff: 2.0, ..Default::default() };
    let cfg = ExperimentConfig { calibration: cal, cutoff: 2.0, ..ExperimentConfig::new(Configuration::SsSwap, 10.0) };
    let r = run_seed(&cfg, 1, Injection::default());
    assert_eq!(r.phase, Phase::Failed);
    assert!(r.failure.as_deref().unwrap().contains("fence"), "{:?}", r.failure);
}

#[test]
fn run_stops_at_the_time_limit() {
    let cal = Calibration { max_time: 8.0, ..Default::default() };
    let cfg = ExperimentConfig { calibration: cal, ..ExperimentConfig::new(Configuration::SsSeq, 10.0) };
    let r = run_seed(&cfg, 1, Injection::default());
    assert!(r.failed());
    assert_eq!(r.phase, Phase::Transferring);
    assert!(r.end_time <= 8.0);
}
