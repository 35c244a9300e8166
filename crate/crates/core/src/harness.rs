//! Experiment runner: calibration, single runs, the evaluation matrix,
//! per-cell summaries, and comparison against the reference measurements.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{LossAudit, Violation};
use crate::checkpoint::{TransferKind, TransferLatency, TransferMode};
use crate::cluster::{Lifecycle, OwnerKind};
use crate::oracle::{predict_replay, ReplayModel};
use crate::probe::{compute_downtime, DowntimeReport};
use crate::reconciler::{CutoffPolicy, FaultPlan, MigrationResource, Phase, StrategyRequest};
use crate::sim::{DurationModel, SimDuration};
use crate::workload::Arrivals;
use crate::world::{Scenario, SimParams, SwapReport, TestFaults, WorkloadKind, World, APP};

pub const RATES: [f64; 7] = [10.0, 20.0, 40.0, 60.0, 80.0, 100.0, 120.0];
pub const DEFAULT_REPS: u32 = 10;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Configuration {
    #[serde(rename = "SS-Seq")]
    SsSeq,
    #[serde(rename = "SS-Shadow")]
    SsShadow,
    #[serde(rename = "SS-Swap")]
    SsSwap,
    #[serde(rename = "D-Reg")]
    DReg,
}

impl Configuration {
    pub const ALL: [Configuration; 4] =
        [Configuration::SsSeq, Configuration::SsShadow, Configuration::SsSwap, Configuration::DReg];

    pub fn name(self) -> &'static str {
        match self {
            Configuration::SsSeq => "SS-Seq",
            Configuration::SsShadow => "SS-Shadow",
            Configuration::SsSwap => "SS-Swap",
            Configuration::DReg => "D-Reg",
        }
    }

    pub fn scenario(self) -> Scenario {
        let (workload, strategy, transfer) = match self {
            Configuration::SsSeq => (WorkloadKind::StatefulSet, StrategyRequest::Sequential, TransferKind::RegistryJob),
            Configuration::SsShadow => (WorkloadKind::StatefulSet, StrategyRequest::ShadowPod, TransferKind::RegistryJob),
            Configuration::SsSwap => {
                (WorkloadKind::StatefulSet, StrategyRequest::ShadowPodSwap, TransferKind::AgentRegistry)
            }
            Configuration::DReg => (WorkloadKind::Deployment, StrategyRequest::ShadowPod, TransferKind::RegistryJob),
        };
        Scenario { workload, strategy, transfer }
    }

    /// Every configuration except the sequential baseline keeps the source
    /// serving while the target restores.
    pub fn is_shadow_family(self) -> bool {
        self != Configuration::SsSeq
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Configuration {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CalibrationError::UnknownConfiguration(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{value}` is not a valid value for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("unknown configuration `{0}` (expected SS-Seq, SS-Shadow, SS-Swap or D-Reg)")]
    UnknownConfiguration(String),
    #[error("{0}")]
    Invalid(String),
}

/// Median phase durations for one configuration, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMedians {
    pub checkpoint: f64,
    pub transfer: f64,
    /// Phase-level restore: shadow startup for the shadow family, the full
    /// stop-and-recreate cycle (including termination grace) for Sequential.
    pub restore: f64,
    pub finalize: f64,
    /// Delay between replay release and the target's first replayed message.
    pub replay_start_delay: f64,
}

const PHASE_KEYS: [&str; 5] = ["checkpoint", "transfer", "restore", "finalize", "replay_start_delay"];

impl PhaseMedians {
    fn get_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "checkpoint" => &mut self.checkpoint,
            "transfer" => &mut self.transfer,
            "restore" => &mut self.restore,
            "finalize" => &mut self.finalize,
            "replay_start_delay" => &mut self.replay_start_delay,
            _ => return None,
        })
    }

    fn get(&self, key: &str) -> f64 {
        let mut copy = *self;
        *copy.get_mut(key).expect("known key")
    }
}

/// Every λ-independent timing knob. Round-trips through a `key = value` text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mu: f64,
    pub warmup: f64,
    pub cutoff: f64,
    pub grace: f64,
    /// Uniform jitter half-width as a fraction of each median; 0 = constant.
    pub jitter: f64,
    pub arrivals: Arrivals,
    pub broker_op: f64,
    pub probe_interval: f64,
    pub gap_threshold: f64,
    pub fence_timeout: f64,
    pub swap_recheckpoint: f64,
    pub swap_image_build: f64,
    pub swap_restore: f64,
    /// Transfer latency of the Direct mode, which has no measured median.
    pub direct_transfer: f64,
    /// When positive, transfers take archive size / this rate instead of the median.
    pub transfer_bytes_per_sec: f64,
    pub max_time: f64,
    pub phases: BTreeMap<Configuration, PhaseMedians>,
}

impl Default for Calibration {
    fn default() -> Self {
        let p = |checkpoint, transfer, restore, finalize, replay_start_delay| PhaseMedians {
            checkpoint,
            transfer,
            restore,
            finalize,
            replay_start_delay,
        };
        Calibration {
            mu: 84.0,
            warmup: 5.0,
            cutoff: 120.0,
            grace: 7.4,
            jitter: 0.0,
            arrivals: Arrivals::Constant,
            broker_op: 0.01,
            probe_interval: 0.01,
            gap_threshold: 3.0,
            fence_timeout: 60.0,
            swap_recheckpoint: 0.39,
            swap_image_build: 0.19,
            swap_restore: 3.02,
            direct_transfer: 1.0,
            transfer_bytes_per_sec: 0.0,
            max_time: 3600.0,
            phases: [
                (Configuration::SsSeq, p(0.34, 5.35, 38.41, 0.0, 0.5)),
                (Configuration::SsShadow, p(0.34, 5.64, 2.89, 0.02, 2.25)),
                (Configuration::SsSwap, p(0.39, 0.19, 3.02, 0.0, 0.0)),
                (Configuration::DReg, p(0.33, 5.38, 2.50, 0.04, 2.8)),
            ]
            .into(),
        }
    }
}

impl Calibration {
    fn scalar_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "mu" => &mut self.mu,
            "warmup" => &mut self.warmup,
            "cutoff" => &mut self.cutoff,
            "grace" => &mut self.grace,
            "jitter" => &mut self.jitter,
            "broker_op" => &mut self.broker_op,
            "probe_interval" => &mut self.probe_interval,
            "gap_threshold" => &mut self.gap_threshold,
            "fence_timeout" => &mut self.fence_timeout,
            "swap.recheckpoint" => &mut self.swap_recheckpoint,
            "swap.image_build" => &mut self.swap_image_build,
            "swap.restore" => &mut self.swap_restore,
            "direct_transfer" => &mut self.direct_transfer,
            "transfer_bytes_per_sec" => &mut self.transfer_bytes_per_sec,
            "max_time" => &mut self.max_time,
            _ => return None,
        })
    }

    /// Parses a calibration file. Keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self, CalibrationError> {
        let mut cal = Calibration::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(CalibrationError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || CalibrationError::BadValue { line, key: key.to_string(), value: value.to_string() };
            if key == "arrivals" {
                cal.arrivals = match value {
                    "constant" => Arrivals::Constant,
                    "poisson" => Arrivals::Poisson,
                    _ => return Err(bad()),
                };
                continue;
            }
            let number: f64 = value.parse().map_err(|_| bad())?;
            if !number.is_finite() {
                return Err(bad());
            }
            if let Some(slot) = cal.scalar_mut(key) {
                *slot = number;
                continue;
            }
            let unknown = || CalibrationError::UnknownKey { line, key: key.to_string() };
            let (config, field) = key.split_once('.').ok_or_else(unknown)?;
            let config: Configuration = config.parse().map_err(|_| unknown())?;
            let slot = cal.phases.get_mut(&config).and_then(|p| p.get_mut(field)).ok_or_else(unknown)?;
            *slot = number;
        }
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let invalid = |what: &str| Err(CalibrationError::Invalid(what.to_string()));
        if self.mu <= 0.0 {
            return invalid("mu must be positive");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return invalid("jitter must lie in [0, 1)");
        }
        if self.cutoff <= 0.0 || self.probe_interval <= 0.0 || self.max_time <= 0.0 {
            return invalid("cutoff, probe_interval and max_time must be positive");
        }
        let mut all = vec![self.warmup, self.grace, self.broker_op, self.gap_threshold, self.fence_timeout];
        all.extend([self.swap_recheckpoint, self.swap_image_build, self.swap_restore, self.direct_transfer]);
        all.push(self.transfer_bytes_per_sec);
        for p in self.phases.values() {
            all.extend(PHASE_KEYS.iter().map(|k| p.get(k)));
        }
        if all.iter().any(|v| *v < 0.0) {
            return invalid("durations must not be negative");
        }
        Ok(())
    }

    /// Renders the calibration in the format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Simulator calibration. Durations are median seconds.");
        let _ = writeln!(out, "# Lines are `key = value`; `#` starts a comment; omitted keys keep defaults.");
        let _ = writeln!(out);
        let _ = writeln!(out, "# consumer capacity, msg/s");
        let _ = writeln!(out, "mu = {}", self.mu);
        let _ = writeln!(out, "# production and consumption before the migration starts");
        let _ = writeln!(out, "warmup = {}", self.warmup);
        let _ = writeln!(out, "# longest replay phase");
        let _ = writeln!(out, "cutoff = {}", self.cutoff);
        let _ = writeln!(out, "# pod termination grace period");
        let _ = writeln!(out, "grace = {}", self.grace);
        let _ = writeln!(out, "# uniform jitter half-width as a fraction of each median (0 = deterministic)");
        let _ = writeln!(out, "jitter = {}", self.jitter);
        let _ = writeln!(out, "# constant or poisson");
        let arrivals = match self.arrivals {
            Arrivals::Constant => "constant",
            Arrivals::Poisson => "poisson",
        };
        let _ = writeln!(out, "arrivals = {arrivals}");
        let _ = writeln!(out, "broker_op = {}", self.broker_op);
        let _ = writeln!(out, "probe_interval = {}", self.probe_interval);
        let _ = writeln!(out, "gap_threshold = {}", self.gap_threshold);
        let _ = writeln!(out, "fence_timeout = {}", self.fence_timeout);
        let _ = writeln!(out, "swap.recheckpoint = {}", self.swap_recheckpoint);
        let _ = writeln!(out, "swap.image_build = {}", self.swap_image_build);
        let _ = writeln!(out, "swap.restore = {}", self.swap_restore);
        let _ = writeln!(out, "direct_transfer = {}", self.direct_transfer);
        let _ = writeln!(out, "# > 0 switches transfers to size / rate");
        let _ = writeln!(out, "transfer_bytes_per_sec = {}", self.transfer_bytes_per_sec);
        let _ = writeln!(out, "max_time = {}", self.max_time);
        for (config, p) in &self.phases {
            let _ = writeln!(out);
            for key in PHASE_KEYS {
                let _ = writeln!(out, "{config}.{key} = {}", p.get(key));
            }
        }
        out
    }

    fn model(&self, median: f64) -> DurationModel {
        if self.jitter > 0.0 {
            DurationModel::jittered(median, self.jitter)
        } else {
            DurationModel::constant(median)
        }
    }

    /// Resolves the knobs for one configuration at one rate.
    pub fn params(&self, config: Configuration, rate: f64, cutoff: f64) -> SimParams {
        let p = self.phases[&config];
        let scenario = config.scenario();
        let transfer_median = if scenario.transfer == TransferKind::Direct { self.direct_transfer } else { p.transfer };
        let latency = if self.transfer_bytes_per_sec > 0.0 {
            TransferLatency::Throughput { bytes_per_sec: self.transfer_bytes_per_sec }
        } else {
            TransferLatency::Fixed(self.model(transfer_median))
        };
        SimParams {
            rate,
            arrivals: self.arrivals,
            mu: self.mu,
            warmup: self.warmup,
            cutoff: CutoffPolicy::fixed(cutoff),
            grace: self.grace,
            checkpoint: self.model(p.checkpoint),
            transfer: TransferMode { kind: scenario.transfer, latency },
            restore_shadow: self.model(p.restore),
            recreate_restore: self.model((p.restore - self.grace).max(0.0)),
            finalize: self.model(p.finalize),
            broker_op: self.model(self.broker_op),
            swap_recheckpoint: self.model(self.swap_recheckpoint),
            swap_image_build: self.model(self.swap_image_build),
            swap_restore: self.model(self.swap_restore),
            fence_timeout: self.fence_timeout,
            replay_start_delay: p.replay_start_delay,
            probe_interval: SimDuration::from_secs_f64(self.probe_interval),
            gap_threshold: self.gap_threshold,
            max_time: self.max_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub configuration: Configuration,
    pub rate: f64,
    pub repetitions: u32,
    pub seed: u64,
    pub calibration: Calibration,
    pub cutoff: f64,
}

impl ExperimentConfig {
    pub fn new(configuration: Configuration, rate: f64) -> Self {
        let calibration = Calibration::default();
        ExperimentConfig { configuration, rate, repetitions: DEFAULT_REPS, seed: DEFAULT_SEED, cutoff: calibration.cutoff, calibration }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self }
    }

    pub fn params(&self) -> SimParams {
        self.calibration.params(self.configuration, self.rate, self.cutoff)
    }

    /// Seeds of the repetitions: `seed`, `seed + 1`, ...
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repetitions as u64).map(|i| self.seed + i)
    }
}

/// Builds the full matrix: every configuration at every rate.
pub fn default_matrix(calibration: &Calibration, reps: u32, seed: u64) -> Vec<ExperimentConfig> {
    Configuration::ALL
        .into_iter()
        .flat_map(|c| RATES.into_iter().map(move |r| (c, r)))
        .map(|(configuration, rate)| ExperimentConfig {
            configuration,
            rate,
            repetitions: reps,
            seed,
            calibration: calibration.clone(),
            cutoff: calibration.cutoff,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalState {
    pub survivor: Option<String>,
    pub owner_kind: Option<OwnerKind>,
    pub node: Option<String>,
    /// Live consumer pods once the run has drained.
    pub consumer_pods: usize,
}

/// Simulated replay phase next to the closed-form prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub t_accum: f64,
    pub start_delay: f64,
    pub predicted: f64,
    pub simulated: f64,
    pub cutoff_fired: bool,
}

impl ReplayCheck {
    pub fn tolerance(mu: f64) -> f64 {
        (2.0 / mu).max(0.1)
    }

    pub fn agrees(&self, mu: f64) -> bool {
        (self.simulated - self.predicted).abs() <= Self::tolerance(mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Configuration,
    pub rate: f64,
    pub seed: u64,
    pub phase: Phase,
    pub failure: Option<String>,
    pub phase_timings: BTreeMap<Phase, f64>,
    pub total: f64,
    pub downtime: DowntimeReport,
    pub loss_audit: LossAudit,
    pub terminal_state: TerminalState,
    pub violations: Vec<Violation>,
    pub replay: Option<ReplayCheck>,
    pub swap: Option<SwapReport>,
    pub transient_failures: u32,
    pub end_time: f64,
    pub migration: Option<MigrationResource>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.phase != Phase::Completed
    }

    /// Completed with no loss, no duplicates and no audit violations.
    pub fn clean(&self) -> bool {
        !self.failed() && self.loss_audit.clean() && self.violations.is_empty()
    }

    pub fn timing(&self, phase: Phase) -> f64 {
        self.phase_timings.get(&phase).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Extra hooks for directed tests; the default injects nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Injection {
    pub fault: Option<FaultPlan>,
    pub test_faults: TestFaults,
    pub audit: Option<bool>,
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64, injection: Injection) -> World {
    let mut world = World::new(cfg.params(), cfg.configuration.scenario(), seed);
    world.fault = injection.fault;
    world.test_faults = injection.test_faults;
    if let Some(audit) = injection.audit {
        world.audit_enabled = audit;
    }
    world
}

/// Runs one repetition (the first seed of `cfg`).
pub fn run_single(cfg: &ExperimentConfig) -> RunReport {
    run_seed(cfg, cfg.seed, Injection::default())
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, injection: Injection) -> RunReport {
    let mut world = build_world(cfg, seed, injection);
    world.run();
    finish(&mut world, cfg, seed)
}

/// Cleans up after a finished run and builds its report.
pub fn finish(world: &mut World, cfg: &ExperimentConfig, seed: u64) -> RunReport {
    cleanup_images(world);
    report(world, cfg, seed)
}

/// Removes checkpoint images from every node, as between real runs.
fn cleanup_images(world: &mut World) {
    let images: Vec<String> = world.archives.iter().map(|a| a.image_ref()).collect();
    let nodes: Vec<String> = world.cluster.nodes.keys().cloned().collect();
    for node in &nodes {
        for image in &images {
            world.cluster.remove_image(node, image);
        }
    }
}

pub fn report(world: &World, cfg: &ExperimentConfig, seed: u64) -> RunReport {
    let migration = world.migration.clone();
    let (phase, failure, timings) = match &migration {
        Some(m) => (m.status.phase, m.status.failure.clone(), m.status.phase_timings.clone()),
        None => (Phase::Pending, Some("migration never started".to_string()), BTreeMap::new()),
    };
    let survivor = world.survivor();
    let applied = survivor.and_then(|u| world.consumer(u)).map(|c| &c.applied);
    let loss_audit = world.auditor.finalize(world.broker.last_seq(), applied);
    let survivor_pod = survivor.and_then(|u| world.cluster.pod(u));
    let terminal_state = TerminalState {
        survivor: survivor_pod.map(|p| p.name.clone()),
        owner_kind: survivor_pod.and_then(|p| p.owner.as_ref()).map(|o| o.kind),
        node: survivor_pod.map(|p| p.node.clone()),
        consumer_pods: world
            .cluster
            .live_pods()
            .filter(|p| p.lifecycle != Lifecycle::Gone && p.labels.get("app").map(String::as_str) == Some(APP))
            .count(),
    };
    let params = &world.params;
    let replay = match (world.replay.frozen_at, world.replay.release_at, timings.get(&Phase::Replaying)) {
        (Some(frozen), Some(release), Some(&simulated)) => {
            let t_accum = release.since(frozen).as_secs_f64();
            let model = ReplayModel::new(params.rate, params.mu, t_accum, params.cutoff.t_cutoff())
                .with_start_delay(world.replay.start_delay);
            Some(ReplayCheck {
                t_accum,
                start_delay: world.replay.start_delay,
                predicted: predict_replay(&model),
                simulated,
                cutoff_fired: migration.as_ref().is_some_and(|m| m.status.cutoff_fired),
            })
        }
        _ => None,
    };
    let swap = (cfg.configuration.scenario().strategy == StrategyRequest::ShadowPodSwap).then(|| world.swap.clone());
    RunReport {
        config: cfg.configuration,
        rate: cfg.rate,
        seed,
        phase,
        failure,
        total: timings.values().sum(),
        phase_timings: timings,
        downtime: compute_downtime(&world.probe, params.gap_threshold),
        loss_audit,
        terminal_state,
        violations: world.auditor.violations().to_vec(),
        replay,
        swap,
        transient_failures: world.transient_failures,
        end_time: world.now().as_secs_f64(),
        migration,
    }
}

/// Runs every repetition of every config. With `parallel` (and the
/// `parallel` feature) runs execute on a thread pool; output order is the
/// same either way.
pub fn run_matrix(matrix: &[ExperimentConfig], parallel: bool) -> Vec<RunReport> {
    let jobs: Vec<(&ExperimentConfig, u64)> = matrix.iter().flat_map(|c| c.seeds().map(move |s| (c, s))).collect();
    let run = |&(cfg, seed): &(&ExperimentConfig, u64)| run_seed(cfg, seed, Injection::default());
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return jobs.par_iter().map(run).collect();
    }
    let _ = parallel;
    jobs.iter().map(run).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Spread {
        let mut v: Vec<f64> = values.into_iter().collect();
        v.sort_by(f64::total_cmp);
        Spread { median: quantile(&v, 0.5), q1: quantile(&v, 0.25), q3: quantile(&v, 0.75) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub config: Configuration,
    pub rate: f64,
    pub runs: usize,
    pub failed: usize,
    pub total: Spread,
    pub phases: BTreeMap<Phase, Spread>,
    pub downtime: Spread,
    pub max_downtime: f64,
    pub missing: usize,
    pub duplicates: u64,
    pub violations: usize,
    pub cutoff_runs: usize,
}

impl CellSummary {
    pub fn phase_median(&self, phase: Phase) -> f64 {
        self.phases.get(&phase).map_or(0.0, |s| s.median)
    }
}

/// Groups reports by (configuration, rate) in matrix order.
pub fn summarize(reports: &[RunReport]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(Configuration, u64), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        cells.entry((r.config, r.rate.to_bits())).or_default().push(r);
    }
    let mut out: Vec<CellSummary> = cells
        .into_values()
        .map(|runs| {
            let first = runs[0];
            let phases = Phase::ACTIVE
                .into_iter()
                .map(|p| (p, Spread::of(runs.iter().map(|r| r.timing(p)))))
                .collect();
            CellSummary {
                config: first.config,
                rate: first.rate,
                runs: runs.len(),
                failed: runs.iter().filter(|r| r.failed()).count(),
                total: Spread::of(runs.iter().map(|r| r.total)),
                phases,
                downtime: Spread::of(runs.iter().map(|r| r.downtime.longest_streak_s)),
                max_downtime: runs.iter().map(|r| r.downtime.longest_streak_s).fold(0.0, f64::max),
                missing: runs.iter().map(|r| r.loss_audit.missing_seqs.len()).sum(),
                duplicates: runs.iter().map(|r| r.loss_audit.duplicate_applications).sum(),
                violations: runs.iter().map(|r| r.violations.len()).sum(),
                cutoff_runs: runs.iter().filter(|r| r.replay.is_some_and(|c| c.cutoff_fired)).count(),
            }
        })
        .collect();
    out.sort_by(|a, b| (a.config, a.rate).partial_cmp(&(b.config, b.rate)).expect("finite rates"));
    out
}

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["config".to_string(), "rate".into(), "seed".into()];
    h.extend(Phase::ACTIVE.iter().map(|p| p.name().to_lowercase()));
    h.extend(["total", "downtime_s", "loss", "dups"].map(String::from));
    h
}

/// One row per run, seconds rendered with two decimals.
pub fn write_csv<W: std::io::Write>(reports: &[RunReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header())?;
    for r in reports {
        let mut row = vec![r.config.to_string(), format!("{}", r.rate), r.seed.to_string()];
        row.extend(Phase::ACTIVE.iter().map(|&p| format!("{:.2}", r.timing(p))));
        row.push(format!("{:.2}", r.total));
        row.push(format!("{:.2}", r.downtime.longest_streak_s));
        row.push(r.loss_audit.missing_seqs.len().to_string());
        row.push(r.loss_audit.duplicate_applications.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Median total migration time, seconds, by configuration and rate.
pub const REFERENCE_TOTALS: [(Configuration, [f64; 7]); 4] = [
    (Configuration::SsSeq, [50.8, 59.2, 81.1, 157.5, 164.7, 165.0, 164.8]),
    (Configuration::SsShadow, [13.8, 14.3, 19.5, 36.0, 117.2, 129.8, 129.0]),
    (Configuration::SsSwap, [15.8, 17.6, 23.1, 31.8, 58.3, 139.9, 141.6]),
    (Configuration::DReg, [12.4, 14.0, 20.3, 58.2, 126.0, 128.9, 129.2]),
];

/// Median phase durations (checkpoint, transfer, restore, replay, finalize) at 10 msg/s.
pub const REFERENCE_PHASES_10: [(Configuration, [f64; 5]); 4] = [
    (Configuration::SsSeq, [0.33, 5.30, 38.49, 6.53, 0.01]),
    (Configuration::SsShadow, [0.33, 5.60, 3.23, 4.08, 0.02]),
    (Configuration::SsSwap, [0.37, 0.20, 2.61, 3.78, 8.64]),
    (Configuration::DReg, [0.34, 5.26, 2.28, 4.30, 0.03]),
];

/// Median phase durations at 60 msg/s.
pub const REFERENCE_PHASES_60: [(Configuration, [f64; 5]); 4] = [
    (Configuration::SsSeq, [0.34, 5.35, 38.41, 112.80, 0.00]),
    (Configuration::SsShadow, [0.34, 5.64, 2.89, 27.68, 0.02]),
    (Configuration::SsSwap, [0.39, 0.19, 3.02, 13.44, 14.73]),
    (Configuration::DReg, [0.33, 5.38, 2.50, 49.33, 0.04]),
];

/// Median sequential downtime, seconds; every other configuration measured 0.
pub const REFERENCE_SEQ_DOWNTIME: [f64; 7] = [31.2, 31.2, 31.2, 31.2, 31.1, 31.1, 30.9];

pub fn reference_total(config: Configuration, rate: f64) -> Option<f64> {
    let i = RATES.iter().position(|&r| r == rate)?;
    REFERENCE_TOTALS.iter().find(|(c, _)| *c == config).map(|(_, v)| v[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub cell: String,
    pub expected: String,
    pub actual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Comparison {
    pub checks: Vec<Check>,
}

impl Comparison {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, criterion: &str, cell: String, expected: String, actual: f64, pass: bool) {
        self.checks.push(Check { criterion: criterion.to_string(), cell, expected, actual, pass });
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{mark}  {:<18} {:<16} expected {:<22} got {:.2}", c.criterion, c.cell, c.expected, c.actual);
        }
        out
    }
}

fn within_pct(actual: f64, target: f64, pct: f64) -> bool {
    (actual - target).abs() <= target * pct
}

/// Per-cell checks of simulated medians against the reference measurements.
/// Cells missing from `summary` are skipped.
pub fn compare_to_reference(summary: &[CellSummary]) -> Comparison {
    let mut cmp = Comparison::default();
    let cell = |c: Configuration, r: f64| summary.iter().find(|s| s.config == c && s.rate == r);
    let label = |s: &CellSummary| format!("{}@{}", s.config, s.rate);

    for s in summary {
        cmp.push("zero-loss", label(s), "0 missing, 0 dups".into(), (s.missing as u64 + s.duplicates) as f64, s.missing == 0 && s.duplicates == 0);
        cmp.push("completed", label(s), "0 failed".into(), s.failed as f64, s.failed == 0);
        if s.config.is_shadow_family() {
            cmp.push("downtime", label(s), "exactly 0".into(), s.max_downtime, s.max_downtime == 0.0);
        } else {
            let ok = (s.downtime.median - 31.1).abs() <= 2.0;
            cmp.push("downtime", label(s), "31.1 ± 2.0".into(), s.downtime.median, ok);
        }
    }

    let restore = |c| cell(c, 60.0).or_else(|| cell(c, 10.0)).map(|s| s.phase_median(Phase::Restoring));
    if let Some(seq) = restore(Configuration::SsSeq) {
        cmp.push("restore", "SS-Seq".into(), ">= 38".into(), seq, seq >= 38.0);
        for c in [Configuration::SsShadow, Configuration::SsSwap, Configuration::DReg] {
            if let Some(shadow) = restore(c) {
                cmp.push("restore", c.to_string(), "<= 3.3".into(), shadow, shadow <= 3.3);
                let reduction = 100.0 * (1.0 - shadow / seq);
                cmp.push("restore-reduction", c.to_string(), ">= 90%".into(), reduction, reduction >= 90.0);
            }
        }
    }

    let totals = [
        (Configuration::SsSeq, 10.0, 0.15),
        (Configuration::SsShadow, 10.0, 0.15),
        (Configuration::SsSwap, 10.0, 0.15),
        (Configuration::DReg, 10.0, 0.15),
        (Configuration::SsSeq, 60.0, 0.15),
        (Configuration::SsShadow, 60.0, 0.20),
    ];
    for (c, r, pct) in totals {
        if let (Some(s), Some(target)) = (cell(c, r), reference_total(c, r)) {
            let ok = within_pct(s.total.median, target, pct);
            cmp.push("total", label(s), format!("{target} ± {}%", pct * 100.0), s.total.median, ok);
        }
    }

    let cutoff_cells = [
        (Configuration::SsSeq, 80.0),
        (Configuration::SsSeq, 100.0),
        (Configuration::SsSeq, 120.0),
        (Configuration::SsShadow, 100.0),
        (Configuration::SsShadow, 120.0),
        (Configuration::DReg, 100.0),
        (Configuration::DReg, 120.0),
    ];
    for (c, r) in cutoff_cells {
        let Some(s) = cell(c, r) else { continue };
        let replay = s.phase_median(Phase::Replaying);
        cmp.push("cutoff-replay", label(s), "120".into(), replay, replay == 120.0 && s.cutoff_runs == s.runs);
        let others: f64 = Phase::ACTIVE.iter().filter(|&&p| p != Phase::Replaying).map(|&p| s.phase_median(p)).sum();
        let bound = 120.0 + others;
        cmp.push("cutoff-total", label(s), format!("{bound:.2} ± 10%"), s.total.median, within_pct(s.total.median, bound, 0.10));
        if let Some(target) = reference_total(c, r) {
            let ok = within_pct(s.total.median, target, 0.10);
            cmp.push("cutoff-reference", label(s), format!("{target} ± 10%"), s.total.median, ok);
        }
    }
    cmp
}

/// Simulated versus predicted replay for every run that drained before the cutoff.
pub fn oracle_checks(reports: &[RunReport], mu: f64) -> Comparison {
    let mut cmp = Comparison::default();
    for r in reports {
        let Some(c) = r.replay.filter(|c| !c.cutoff_fired) else { continue };
        let tol = ReplayCheck::tolerance(mu);
        cmp.push(
            "oracle",
            format!("{}@{}#{}", r.config, r.rate, r.seed),
            format!("{:.2} ± {tol:.2}", c.predicted),
            c.simulated,
            c.agrees(mu),
        );
    }
    cmp
}

/// Summary table: median total (Q1-Q3), downtime and loss per cell.
pub fn render_summary(summary: &[CellSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>5} {:>4} {:>24} {:>10} {:>8} {:>6} {:>6}",
        "config", "rate", "runs", "total median (Q1-Q3)", "reference", "down_s", "loss", "failed"
    );
    for s in summary {
        let reference = reference_total(s.config, s.rate).map_or("-".to_string(), |t| format!("{t:.1}"));
        let total = format!("{:.2} ({:.2}-{:.2})", s.total.median, s.total.q1, s.total.q3);
        let _ = writeln!(
            out,
            "{:<10} {:>5} {:>4} {:>24} {:>10} {:>8.2} {:>6} {:>6}",
            s.config.name(),
            s.rate,
            s.runs,
            total,
            reference,
            s.downtime.median,
            s.missing as u64 + s.duplicates,
            s.failed
        );
    }
    out
}

/// Median per-phase durations at one rate, one row per configuration.
pub fn render_phase_breakdown(summary: &[CellSummary], rate: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Phase breakdown at {rate} msg/s (median seconds)");
    let _ = write!(out, "{:<10}", "config");
    for p in Phase::ACTIVE {
        let _ = write!(out, " {:>13}", p.name());
    }
    let _ = writeln!(out, " {:>9}", "total");
    for s in summary.iter().filter(|s| s.rate == rate) {
        let _ = write!(out, "{:<10}", s.config.name());
        for p in Phase::ACTIVE {
            let _ = write!(out, " {:>13.2}", s.phase_median(p));
        }
        let _ = writeln!(out, " {:>9.2}", s.total.median);
    }
    out
}

/// Horizontal stacked bars of the phase breakdown, one character per `scale` seconds.
pub fn render_phase_bars(summary: &[CellSummary], rate: f64, scale: f64) -> String {
    const GLYPHS: [char; 5] = ['c', 't', 'R', '=', 'f'];
    let mut out = String::new();
    for s in summary.iter().filter(|s| s.rate == rate) {
        let mut bar = String::new();
        for (p, g) in Phase::ACTIVE.iter().zip(GLYPHS) {
            let n = (s.phase_median(*p) / scale).round() as usize;
            bar.extend(std::iter::repeat_n(g, n.max(usize::from(s.phase_median(*p) > 0.0))));
        }
        let _ = writeln!(out, "{:<10} |{bar} {:.1}s", s.config.name(), s.total.median);
    }
    let _ = writeln!(out, "c=checkpoint t=transfer R=restore ==replay f=finalize, 1 char = {scale}s");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_round_trips() {
        let mut cal = Calibration { mu: 90.5, arrivals: Arrivals::Poisson, ..Default::default() };
        cal.phases.get_mut(&Configuration::DReg).unwrap().replay_start_delay = 1.25;
        assert_eq!(Calibration::parse(&cal.to_text()).unwrap(), cal);
    }

    #[test]
    fn calibration_errors_name_the_line() {
        assert_eq!(Calibration::parse("mu = 84\nbogus"), Err(CalibrationError::Syntax { line: 2 }));
        assert!(matches!(Calibration::parse("nope = 1"), Err(CalibrationError::UnknownKey { line: 1, .. })));
        assert!(matches!(Calibration::parse("SS-Seq.nope = 1"), Err(CalibrationError::UnknownKey { .. })));
        assert!(matches!(Calibration::parse("mu = fast"), Err(CalibrationError::BadValue { .. })));
        assert!(matches!(Calibration::parse("mu = 0"), Err(CalibrationError::Invalid(_))));
        assert_eq!(Calibration::parse("# only a comment\n\n").unwrap(), Calibration::default());
    }

    #[test]
    fn configuration_names_parse() {
        for c in Configuration::ALL {
            assert_eq!(c.name().parse::<Configuration>().unwrap(), c);
        }
        assert!("ss-seq".parse::<Configuration>().is_ok());
        assert!("SS".parse::<Configuration>().is_err());
    }

    #[test]
    fn sequential_restore_splits_around_grace() {
        let p = Calibration::default().params(Configuration::SsSeq, 10.0, 120.0);
        let composite = p.grace + p.recreate_restore.median;
        assert!((composite - 38.41).abs() < 1e-9);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = Spread::of([4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        let one = Spread::of([7.0]);
        assert_eq!((one.q1, one.median, one.q3), (7.0, 7.0, 7.0));
    }

    #[test]
    fn reference_lookup() {
        assert_eq!(reference_total(Configuration::SsShadow, 60.0), Some(36.0));
        assert_eq!(reference_total(Configuration::DReg, 55.0), None);
    }
}
