//! Scenario JSON format (version 1). Units are encoded in key names.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Agent, AgentId, AgentKind, AgentState, Hazard, LaneChange, Scenario, Segment, TrajectorySpec,
    DEFAULT_LANE_COUNT, DEFAULT_LANE_WIDTH,
};
use crate::error::{Error, FieldError, Result};
use crate::simkernel::SimTime;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    format: u32,
    #[serde(default)]
    name: String,
    #[serde(default = "default_lane_count")]
    lane_count: i32,
    #[serde(default = "default_lane_width")]
    lane_width_m: f64,
    ego: StateFile,
    #[serde(default)]
    agents: Vec<AgentFile>,
    duration_us: i64,
    #[serde(default)]
    hazards: Vec<HazardFile>,
    d_buffer_m: f64,
}

fn default_lane_count() -> i32 {
    DEFAULT_LANE_COUNT
}

fn default_lane_width() -> f64 {
    DEFAULT_LANE_WIDTH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    s_m: f64,
    #[serde(default)]
    l_m: f64,
    v_mps: f64,
    #[serde(default)]
    a_mps2: f64,
    lane: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: u32,
    kind: AgentKind,
    initial: StateFile,
    #[serde(default)]
    segments: Vec<SegmentFile>,
    #[serde(default)]
    lane_changes: Vec<LaneChangeFile>,
    #[serde(default)]
    visible_from_us: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentFile {
    start_us: i64,
    accel_mps2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneChangeFile {
    at_us: i64,
    lane: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HazardFile {
    time_us: i64,
    agent_id: u32,
    #[serde(default)]
    label: String,
}

impl From<&AgentState> for StateFile {
    fn from(s: &AgentState) -> Self {
        StateFile {
            s_m: s.s,
            l_m: s.l,
            v_mps: s.v,
            a_mps2: s.a,
            lane: s.lane,
        }
    }
}

impl From<&StateFile> for AgentState {
    fn from(s: &StateFile) -> Self {
        AgentState {
            s: s.s_m,
            l: s.l_m,
            v: s.v_mps,
            a: s.a_mps2,
            lane: s.lane,
        }
    }
}

fn us(t: SimTime) -> i64 {
    t.as_micros() as i64
}

impl From<&Scenario> for ScenarioFile {
    fn from(sc: &Scenario) -> Self {
        ScenarioFile {
            format: FORMAT_VERSION,
            name: sc.name.clone(),
            lane_count: sc.lane_count,
            lane_width_m: sc.lane_width,
            ego: (&sc.ego_initial).into(),
            agents: sc
                .agents
                .iter()
                .map(|a| AgentFile {
                    id: a.id.0,
                    kind: a.kind,
                    initial: (&a.trajectory.initial).into(),
                    segments: a
                        .trajectory
                        .segments
                        .iter()
                        .map(|s| SegmentFile {
                            start_us: us(s.start),
                            accel_mps2: s.accel,
                        })
                        .collect(),
                    lane_changes: a
                        .trajectory
                        .lane_changes
                        .iter()
                        .map(|c| LaneChangeFile {
                            at_us: us(c.at),
                            lane: c.lane,
                        })
                        .collect(),
                    visible_from_us: us(a.trajectory.visible_from),
                })
                .collect(),
            duration_us: us(sc.duration),
            hazards: sc
                .hazards
                .iter()
                .map(|h| HazardFile {
                    time_us: us(h.time),
                    agent_id: h.agent.0,
                    label: h.label.clone(),
                })
                .collect(),
            d_buffer_m: sc.d_buffer,
        }
    }
}

struct Checker {
    errors: Vec<FieldError>,
}

impl Checker {
    fn check(&mut self, ok: bool, field: impl FnOnce() -> String, msg: impl Into<String>) {
        if !ok {
            self.errors.push(FieldError::new(field(), msg));
        }
    }

    fn time(&mut self, v: i64, field: impl FnOnce() -> String) -> SimTime {
        self.check(v >= 0, field, format!("must be non-negative, got {v}"));
        SimTime::from_micros(v.max(0) as u64)
    }

    fn state(&mut self, s: &StateFile, lanes: i32, field: &str) {
        self.check(
            s.v_mps.is_finite() && s.v_mps >= 0.0,
            || format!("{field}.v_mps"),
            format!("velocity must be finite and >= 0, got {}", s.v_mps),
        );
        self.check(
            s.s_m.is_finite() && s.l_m.is_finite() && s.a_mps2.is_finite(),
            || field.to_string(),
            "position and acceleration must be finite",
        );
        self.check(
            (0..lanes).contains(&s.lane),
            || format!("{field}.lane"),
            format!("lane {} outside road lanes 0..{lanes}", s.lane),
        );
    }
}

fn validate(file: &ScenarioFile) -> Result<Scenario> {
    let mut c = Checker { errors: Vec::new() };
    c.check(
        file.format == FORMAT_VERSION,
        || "format".into(),
        format!("unsupported format {}, expected {FORMAT_VERSION}", file.format),
    );
    c.check(file.lane_count >= 1, || "lane_count".into(), "must be >= 1");
    c.check(
        file.lane_width_m.is_finite() && file.lane_width_m > 0.0,
        || "lane_width_m".into(),
        "must be > 0",
    );
    c.check(
        file.duration_us > 0,
        || "duration_us".into(),
        format!("duration must be > 0, got {}", file.duration_us),
    );
    c.check(
        file.d_buffer_m.is_finite() && file.d_buffer_m >= 0.0,
        || "d_buffer_m".into(),
        "must be finite and >= 0",
    );
    let lanes = file.lane_count;
    c.state(&file.ego, lanes, "ego");

    let mut seen = HashSet::new();
    let mut agents = Vec::with_capacity(file.agents.len());
    for (i, a) in file.agents.iter().enumerate() {
        let f = format!("agents[{i}]");
        c.check(
            seen.insert(a.id),
            || format!("{f}.id"),
            format!("duplicate agent id {}", a.id),
        );
        c.state(&a.initial, lanes, &format!("{f}.initial"));
        let mut segments = Vec::with_capacity(a.segments.len());
        for (j, s) in a.segments.iter().enumerate() {
            let start = c.time(s.start_us, || format!("{f}.segments[{j}].start_us"));
            if let Some(prev) = segments.last().map(|p: &Segment| p.start) {
                c.check(
                    start > prev,
                    || format!("{f}.segments[{j}].start_us"),
                    format!(
                        "segment start times must be strictly increasing ({} after {})",
                        start.as_micros(),
                        prev.as_micros()
                    ),
                );
            }
            c.check(
                s.accel_mps2.is_finite(),
                || format!("{f}.segments[{j}].accel_mps2"),
                "must be finite",
            );
            segments.push(Segment {
                start,
                accel: s.accel_mps2,
            });
        }
        let mut lane_changes = Vec::with_capacity(a.lane_changes.len());
        for (j, lc) in a.lane_changes.iter().enumerate() {
            let at = c.time(lc.at_us, || format!("{f}.lane_changes[{j}].at_us"));
            if let Some(prev) = lane_changes.last().map(|p: &LaneChange| p.at) {
                c.check(
                    at > prev,
                    || format!("{f}.lane_changes[{j}].at_us"),
                    "lane change times must be strictly increasing",
                );
            }
            c.check(
                (0..lanes).contains(&lc.lane),
                || format!("{f}.lane_changes[{j}].lane"),
                format!("lane {} outside road lanes 0..{lanes}", lc.lane),
            );
            lane_changes.push(LaneChange { at, lane: lc.lane });
        }
        let visible_from = c.time(a.visible_from_us, || format!("{f}.visible_from_us"));
        agents.push(Agent {
            id: AgentId(a.id),
            kind: a.kind,
            trajectory: TrajectorySpec {
                initial: (&a.initial).into(),
                segments,
                lane_changes,
                visible_from,
            },
        });
    }

    let mut hazards = Vec::with_capacity(file.hazards.len());
    for (i, h) in file.hazards.iter().enumerate() {
        let time = c.time(h.time_us, || format!("hazards[{i}].time_us"));
        c.check(
            h.time_us < file.duration_us,
            || format!("hazards[{i}].time_us"),
            "hazard time must be before the scenario end",
        );
        c.check(
            seen.contains(&h.agent_id),
            || format!("hazards[{i}].agent_id"),
            format!("unknown agent id {}", h.agent_id),
        );
        hazards.push(Hazard {
            time,
            agent: AgentId(h.agent_id),
            label: h.label.clone(),
        });
    }

    if !c.errors.is_empty() {
        return Err(Error::invalid("scenario", c.errors));
    }
    Ok(Scenario {
        name: file.name.clone(),
        lane_count: file.lane_count,
        lane_width: file.lane_width_m,
        ego_initial: (&file.ego).into(),
        agents,
        duration: SimTime::from_micros(file.duration_us as u64),
        hazards,
        d_buffer: file.d_buffer_m,
    })
}

/// Parses and validates a scenario document. `origin` labels diagnostics.
pub fn scenario_from_json(text: &str, origin: &Path) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
    validate(&file)
}

pub fn scenario_to_json(sc: &Scenario) -> String {
    let file = ScenarioFile::from(sc);
    serde_json::to_string_pretty(&file).expect("scenario serialization is infallible")
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scenario_from_json(&text, path)
}

pub fn save_scenario(sc: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scenario_to_json(sc) + "\n").map_err(|e| Error::io(path, e))
}
