//! Runs a scenario through a pipeline on the event kernel and records the
//! reaction-time decomposition, latencies and safety samples.

mod sim;
mod trace;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use trace::{
    CaptureRecord, ControlRecord, FrameRecord, GroupUsage, JobKind, NodePath, ObjectRecord, ReactionOutcome,
    ReactionRecord, RunSummary, RunTrace, SafetySample, Span, TraceHeader, TRACE_FORMAT,
};

use crate::error::Result;
use crate::mitigation::MitigationConfig;
use crate::pipeline::Pipeline;
use crate::safety::RssParams;
use crate::scenario::{scenario_to_json, Hazard, LaneChange, Scenario, Segment, TrajectorySpec};
use crate::simkernel::SimTime;

/// Workers that run a fixed set of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorGroup {
    pub name: String,
    pub workers: u32,
    pub nodes: Vec<String>,
    /// Completion allowance for the group's tasks, measured from release.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_us: Option<SimTime>,
}

impl ProcessorGroup {
    pub fn new(name: &str, workers: u32, nodes: &[&str]) -> Self {
        ProcessorGroup {
            name: name.to_string(),
            workers,
            nodes: nodes.iter().map(|s| s.to_string()).collect(),
            budget_us: None,
        }
    }

    pub fn budget(mut self, b: SimTime) -> Self {
        self.budget_us = Some(b);
        self
    }
}

/// One group per node, one worker each.
pub fn dedicated_groups(p: &Pipeline) -> Vec<ProcessorGroup> {
    p.nodes()
        .iter()
        .map(|n| ProcessorGroup::new(&n.name, 1, &[n.name.as_str()]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Safety sampling period.
    pub tick_us: SimTime,
    pub actuation_delay_us: SimTime,
    pub brake_decel_mps2: f64,
    /// Brake once an object's remaining budget drops below this.
    pub brake_margin_us: SimTime,
    /// Horizon for raw reaction budgets.
    pub budget_horizon_us: SimTime,
    pub payload_base_bytes: u64,
    pub payload_bytes_per_object: u64,
    pub rss: RssParams,
    pub mitigation: MitigationConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tick_us: SimTime::from_millis(10),
            actuation_delay_us: SimTime::from_millis(20),
            brake_decel_mps2: 6.0,
            brake_margin_us: SimTime::from_millis(500),
            budget_horizon_us: SimTime::from_secs(10),
            payload_base_bytes: 0,
            payload_bytes_per_object: 0,
            rss: RssParams::default(),
            mitigation: MitigationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Decision {
    Hold,
    /// Constant acceleration, negative when braking.
    Brake { accel_mps2: f64 },
    /// `dir` lanes to the left (+) or right (-).
    LaneChange { dir: i32 },
}

/// Applies `decision`, taken at `decided_at`, from `decided_at + delay` on.
/// A later decision replaces whatever an earlier one scheduled from the same
/// instant onwards.
pub fn apply_control(ego: &TrajectorySpec, decision: Decision, decided_at: SimTime, delay: SimTime) -> TrajectorySpec {
    let at = decided_at.saturating_add(delay);
    let mut out = ego.clone();
    match decision {
        Decision::Hold => {}
        Decision::Brake { accel_mps2 } => {
            out.segments.retain(|s| s.start < at);
            out.segments.push(Segment { start: at, accel: accel_mps2 });
        }
        Decision::LaneChange { dir } => {
            let lane = ego.state_at(at).lane + dir;
            out.lane_changes.retain(|c| c.at < at);
            out.lane_changes.push(LaneChange { at, lane });
        }
    }
    out
}

/// Hex SHA-256 of the scenario's canonical JSON.
pub fn scenario_hash(sc: &Scenario) -> String {
    let digest = Sha256::digest(scenario_to_json(sc).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Options beyond the configuration that shape one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Free-form label copied into the trace header.
    pub label: String,
}

/// Checks pinning and configuration without running.
pub fn check_setup(scenario: &Scenario, pipeline: &Pipeline, groups: &[ProcessorGroup], config: &EngineConfig) -> Result<()> {
    sim::Simulator::new(scenario, pipeline, groups, config, 0).map(|_| ())
}

/// Simulates `scenario` through `pipeline` for the scenario's duration.
pub fn run_simulation(
    scenario: &Scenario,
    pipeline: &Pipeline,
    groups: &[ProcessorGroup],
    config: &EngineConfig,
    seed: u64,
) -> Result<RunTrace> {
    run_simulation_with(scenario, pipeline, groups, config, seed, &RunOptions::default())
}

pub fn run_simulation_with(
    scenario: &Scenario,
    pipeline: &Pipeline,
    groups: &[ProcessorGroup],
    config: &EngineConfig,
    seed: u64,
    options: &RunOptions,
) -> Result<RunTrace> {
    let mut trace = sim::Simulator::new(scenario, pipeline, groups, config, seed)?.run()?;
    trace.header.label = options.label.clone();
    trace.reactions = scenario
        .hazards
        .iter()
        .map(|h| ReactionOutcome {
            agent: h.agent,
            hazard_time: h.time,
            label: h.label.clone(),
            reaction: measure_reaction(&trace, h),
        })
        .collect();
    Ok(trace)
}

/// Decomposes the reaction to `hazard`. `T1` is the earliest control output
/// carrying the hazard agent from a capture at or after `T0`; `t_sensor` runs
/// to the first capture at or after `T0` that detected the agent; `t_module`
/// is the execution time along the lineage that reached control; the rest is
/// bubble. `None` when no such output exists.
pub fn measure_reaction(trace: &RunTrace, hazard: &Hazard) -> Option<ReactionRecord> {
    let t0 = hazard.time;
    let hit = trace
        .objects
        .iter()
        .filter(|o| o.agent == hazard.agent && o.capture >= t0)
        .min_by_key(|o| (o.completed, o.capture))?;
    let first_capture = trace
        .captures
        .iter()
        .filter(|c| c.time >= t0 && c.agents.contains(&hazard.agent))
        .map(|c| c.time)
        .min()
        .unwrap_or(hit.capture);
    let t_sensor = first_capture - t0;
    let t_module = hit.module;
    let t_bubble = hit
        .completed
        .checked_sub(t0)
        .and_then(|r| r.checked_sub(t_sensor))
        .and_then(|r| r.checked_sub(t_module))
        .expect("lineage execution time never exceeds the reaction window");
    Some(ReactionRecord {
        hazard_time: t0,
        decision_time: hit.completed,
        t_sensor,
        t_module,
        t_bubble,
        agent: hazard.agent,
        path: hit.path.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::AgentState;

    #[test]
    fn brake_takes_effect_after_delay() {
        let ego = TrajectorySpec::constant(AgentState::new(0.0, 10.0, 0.0, 1));
        let t = apply_control(&ego, Decision::Brake { accel_mps2: -6.0 }, SimTime::from_secs(1), SimTime::from_millis(20));
        assert_eq!(t.segments, [Segment { start: SimTime::from_millis(1020), accel: -6.0 }]);
        assert_eq!(t.state_at(SimTime::from_millis(1020)).v, 10.0);
        assert!(t.state_at(SimTime::from_millis(1120)).v < 10.0);
    }

    #[test]
    fn hold_is_identity() {
        let ego = TrajectorySpec::constant(AgentState::new(0.0, 10.0, 0.0, 1));
        assert_eq!(apply_control(&ego, Decision::Hold, SimTime::from_secs(1), SimTime::from_millis(20)), ego);
    }

    #[test]
    fn later_decision_wins() {
        let ego = TrajectorySpec::constant(AgentState::new(0.0, 10.0, 0.0, 1));
        let d = SimTime::from_millis(20);
        let a = apply_control(&ego, Decision::Brake { accel_mps2: -3.0 }, SimTime::from_secs(1), d);
        let b = apply_control(&a, Decision::Brake { accel_mps2: -6.0 }, SimTime::from_secs(1), d);
        assert_eq!(b.segments.len(), 1);
        assert_eq!(b.segments[0].accel, -6.0);
        let c = apply_control(&b, Decision::LaneChange { dir: -1 }, SimTime::from_secs(2), d);
        assert_eq!(c.state_at(SimTime::from_secs(3)).lane, 0);
    }
}
