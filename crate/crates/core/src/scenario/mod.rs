//! Kinematic world model: the ego vehicle, traffic agents with piecewise
//! constant-acceleration trajectories, and hazard events.

mod file;
pub mod suite;
mod traffic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::simkernel::SimTime;

pub use file::{load_scenario, save_scenario, scenario_from_json, scenario_to_json, FORMAT_VERSION};
pub use traffic::{generate_traffic, KindMix, RoadSpec, TRAFFIC_ID_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Vehicle, AgentKind::Pedestrian, AgentKind::Cyclist];

    /// Footprint as (length, width) in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            AgentKind::Vehicle => (4.6, 1.9),
            AgentKind::Pedestrian => (0.6, 0.6),
            AgentKind::Cyclist => (1.8, 0.7),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Vehicle => "vehicle",
            AgentKind::Pedestrian => "pedestrian",
            AgentKind::Cyclist => "cyclist",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Kinematic state in the lane frame: `s` runs along the road, `l` is the
/// lateral offset from the center of lane `lane`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentState {
    pub s: f64,
    pub l: f64,
    pub v: f64,
    pub a: f64,
    pub lane: i32,
}

impl AgentState {
    pub fn new(s: f64, v: f64, a: f64, lane: i32) -> Self {
        AgentState {
            s,
            l: 0.0,
            v,
            a,
            lane,
        }
    }

    /// Lateral road coordinate: lane center plus offset.
    pub fn lateral(&self, lane_width: f64) -> f64 {
        self.lane as f64 * lane_width + self.l
    }

    /// Center-to-center distance.
    pub fn distance_to(&self, other: &AgentState, lane_width: f64) -> f64 {
        let ds = other.s - self.s;
        let dl = other.lateral(lane_width) - self.lateral(lane_width);
        ds.hypot(dl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: SimTime,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChange {
    pub at: SimTime,
    pub lane: i32,
}

/// Piecewise constant-acceleration trajectory. `initial.a` applies until the
/// first segment starts; lane changes are instantaneous.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub initial: AgentState,
    pub segments: Vec<Segment>,
    pub lane_changes: Vec<LaneChange>,
    /// The agent cannot be detected before this instant (occlusion).
    pub visible_from: SimTime,
}

impl TrajectorySpec {
    pub fn constant(initial: AgentState) -> Self {
        TrajectorySpec {
            initial,
            segments: Vec::new(),
            lane_changes: Vec::new(),
            visible_from: SimTime::ZERO,
        }
    }

    pub fn with_segment(mut self, start: SimTime, accel: f64) -> Self {
        self.segments.push(Segment { start, accel });
        self
    }

    pub fn with_lane_change(mut self, at: SimTime, lane: i32) -> Self {
        self.lane_changes.push(LaneChange { at, lane });
        self
    }

    pub fn visible_from(mut self, t: SimTime) -> Self {
        self.visible_from = t;
        self
    }

    pub fn state_at(&self, t: SimTime) -> AgentState {
        agent_state_at(self, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: AgentId,
    pub kind: AgentKind,
    pub trajectory: TrajectorySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hazard {
    pub time: SimTime,
    pub agent: AgentId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub lane_count: i32,
    pub lane_width: f64,
    pub ego_initial: AgentState,
    pub agents: Vec<Agent>,
    pub duration: SimTime,
    pub hazards: Vec<Hazard>,
    pub d_buffer: f64,
}

pub const DEFAULT_LANE_COUNT: i32 = 3;
pub const DEFAULT_LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, PartialEq)]
pub struct VisibleAgent {
    pub id: AgentId,
    pub kind: AgentKind,
    pub state: AgentState,
}

impl Scenario {
    pub fn new(name: impl Into<String>, ego_initial: AgentState, duration: SimTime) -> Self {
        Scenario {
            name: name.into(),
            lane_count: DEFAULT_LANE_COUNT,
            lane_width: DEFAULT_LANE_WIDTH,
            ego_initial,
            agents: Vec::new(),
            duration,
            hazards: Vec::new(),
            d_buffer: 1.0,
        }
    }

    pub fn agent(&self, id: AgentId) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    /// Ego state with no control applied (the ego keeps its initial acceleration).
    pub fn uncontrolled_ego_at(&self, t: SimTime) -> AgentState {
        agent_state_at(&TrajectorySpec::constant(self.ego_initial), t)
    }

    /// Agents detectable at `t` by a sensor on the uncontrolled ego.
    pub fn visible_agents(&self, t: SimTime, sensor_range: f64) -> Vec<VisibleAgent> {
        self.visible_agents_from(&self.uncontrolled_ego_at(t), t, sensor_range)
    }

    /// Agents with `visible_from <= t` within `sensor_range` (center distance) of `ego`.
    pub fn visible_agents_from(
        &self,
        ego: &AgentState,
        t: SimTime,
        sensor_range: f64,
    ) -> Vec<VisibleAgent> {
        self.agents
            .iter()
            .filter(|a| a.trajectory.visible_from <= t)
            .filter_map(|a| {
                let state = agent_state_at(&a.trajectory, t);
                (ego.distance_to(&state, self.lane_width) <= sensor_range).then_some(VisibleAgent {
                    id: a.id,
                    kind: a.kind,
                    state,
                })
            })
            .collect()
    }
}

/// Advances `(s, v)` by `dt` seconds under constant acceleration `a`, clamping
/// the velocity at zero.
fn advance(s: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
    if dt <= 0.0 {
        return (s, v);
    }
    if a < 0.0 {
        let stop = v / -a;
        if stop <= dt {
            return (s + 0.5 * v * stop, 0.0);
        }
    }
    (s + v * dt + 0.5 * a * dt * dt, (v + a * dt).max(0.0))
}

/// Closed-form state of `traj` at `t`.
pub fn agent_state_at(traj: &TrajectorySpec, t: SimTime) -> AgentState {
    let init = traj.initial;
    let (mut s, mut v, mut a) = (init.s, init.v.max(0.0), init.a);
    let mut at = SimTime::ZERO;
    for seg in traj.segments.iter().take_while(|seg| seg.start <= t) {
        let dt = (seg.start.saturating_sub(at)).as_secs_f64();
        (s, v) = advance(s, v, a, dt);
        at = at.max(seg.start);
        a = seg.accel;
    }
    (s, v) = advance(s, v, a, t.saturating_sub(at).as_secs_f64());
    let lane = traj
        .lane_changes
        .iter()
        .take_while(|c| c.at <= t)
        .last()
        .map_or(init.lane, |c| c.lane);
    let a_eff = if v == 0.0 && a < 0.0 { 0.0 } else { a };
    AgentState {
        s,
        l: init.l,
        v,
        a: a_eff,
        lane,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(sec: f64) -> SimTime {
        SimTime::from_secs_f64(sec)
    }

    #[test]
    fn braking_kinematics() {
        let traj = TrajectorySpec::constant(AgentState::new(0.0, 10.0, -5.0, 0));
        let st = agent_state_at(&traj, s(1.0));
        assert!((st.v - 5.0).abs() < 1e-12);
        assert!((st.s - 7.5).abs() < 1e-12);
    }

    #[test]
    fn braking_clamps_at_stop() {
        let traj = TrajectorySpec::constant(AgentState::new(0.0, 10.0, -5.0, 0));
        let st = agent_state_at(&traj, s(3.0));
        assert_eq!(st.v, 0.0);
        assert!((st.s - 10.0).abs() < 1e-12);
        assert_eq!(st.a, 0.0);
    }

    #[test]
    fn zero_accel_is_linear() {
        let traj = TrajectorySpec::constant(AgentState::new(3.0, 12.5, 0.0, 1));
        for t in [0.0, 0.37, 5.0, 123.456] {
            let st = agent_state_at(&traj, s(t));
            assert!((st.s - (3.0 + 12.5 * t)).abs() < 1e-6);
            assert_eq!(st.v, 12.5);
        }
    }

    #[test]
    fn segments_and_lane_changes_apply_in_order() {
        let traj = TrajectorySpec::constant(AgentState::new(0.0, 10.0, 0.0, 1))
            .with_segment(s(1.0), -2.0)
            .with_segment(s(2.0), 1.0)
            .with_lane_change(s(1.5), 0);
        let st = agent_state_at(&traj, s(3.0));
        // 10 m, then 9 m, then 8*1 + 0.5 = 8.5 m
        assert!((st.s - 27.5).abs() < 1e-9);
        assert!((st.v - 9.0).abs() < 1e-9);
        assert_eq!(agent_state_at(&traj, s(1.4)).lane, 1);
        assert_eq!(st.lane, 0);
    }

    #[test]
    fn visibility_by_time_and_range() {
        let mut sc = Scenario::new("vis", AgentState::new(0.0, 0.0, 0.0, 1), s(10.0));
        sc.agents.push(Agent {
            id: AgentId(1),
            kind: AgentKind::Pedestrian,
            trajectory: TrajectorySpec::constant(AgentState::new(10.0, 0.0, 0.0, 1))
                .visible_from(s(3.0)),
        });
        sc.agents.push(Agent {
            id: AgentId(2),
            kind: AgentKind::Vehicle,
            trajectory: TrajectorySpec::constant(AgentState::new(30.0, 0.0, 0.0, 1)),
        });
        sc.agents.push(Agent {
            id: AgentId(3),
            kind: AgentKind::Vehicle,
            trajectory: TrajectorySpec::constant(AgentState::new(20.0, 0.0, 0.0, 1)),
        });
        let ids = |t| -> Vec<u32> {
            sc.visible_agents(t, 25.0)
                .iter()
                .map(|v| v.id.0)
                .collect()
        };
        assert_eq!(ids(s(2.0)), vec![3]);
        assert_eq!(ids(s(3.0) - SimTime::from_micros(1)), vec![3]);
        assert_eq!(ids(s(3.0)), vec![1, 3]);
    }

    /// 1 ms time-stepping oracle; each step advances position with the
    /// step's mean velocity and clamps at zero.
    fn euler_displacement(traj: &TrajectorySpec, t_end_ms: u64) -> f64 {
        let dt = 1e-3;
        let (mut pos, mut v) = (traj.initial.s, traj.initial.v);
        let mut a = traj.initial.a;
        let mut segs = traj.segments.iter().peekable();
        for step in 0..t_end_ms {
            let now = SimTime::from_millis(step);
            while let Some(seg) = segs.peek() {
                if seg.start <= now {
                    a = seg.accel;
                    segs.next();
                } else {
                    break;
                }
            }
            let v_next = (v + a * dt).max(0.0);
            let used = if v + a * dt < 0.0 { v / -a } else { dt };
            pos += 0.5 * (v + v_next) * used;
            v = v_next;
        }
        pos - traj.initial.s
    }

    proptest! {
        #[test]
        fn closed_form_matches_euler_oracle(
            v0 in 0.0f64..30.0,
            accels in prop::collection::vec((-8.0f64..3.0, 1u64..30_000), 0..4),
        ) {
            let mut traj = TrajectorySpec::constant(AgentState::new(0.0, v0, 0.0, 0));
            let mut starts: Vec<u64> = accels.iter().map(|a| a.1).collect();
            starts.sort_unstable();
            starts.dedup();
            for (st, (acc, _)) in starts.iter().zip(&accels) {
                traj = traj.with_segment(SimTime::from_millis(*st), *acc);
            }
            let closed = agent_state_at(&traj, SimTime::from_secs(30)).s;
            let euler = euler_displacement(&traj, 30_000);
            prop_assert!((closed - euler).abs() < 0.01, "closed {closed} euler {euler}");
        }

        #[test]
        fn state_is_continuous(
            v0 in 0.0f64..30.0, a0 in -8.0f64..3.0, a1 in -8.0f64..3.0, switch_ms in 1u64..10_000
        ) {
            let traj = TrajectorySpec::constant(AgentState::new(0.0, v0, a0, 0))
                .with_segment(SimTime::from_millis(switch_ms), a1);
            let mut probes = vec![SimTime::from_millis(switch_ms)];
            if a0 < 0.0 && v0 / -a0 < switch_ms as f64 / 1e3 {
                probes.push(SimTime::from_secs_f64(v0 / -a0));
            }
            if a1 < 0.0 {
                let v_switch = (v0 + a0 * switch_ms as f64 / 1e3).max(0.0);
                probes.push(SimTime::from_millis(switch_ms) + SimTime::from_secs_f64(v_switch / -a1));
            }
            for p in probes {
                let before = agent_state_at(&traj, p.saturating_sub(SimTime::from_micros(1)));
                let at = agent_state_at(&traj, p);
                let after = agent_state_at(&traj, p + SimTime::from_micros(1));
                prop_assert!((before.s - at.s).abs() < 1e-3 && (after.s - at.s).abs() < 1e-3);
                prop_assert!((before.v - at.v).abs() < 1e-3 && (after.v - at.v).abs() < 1e-3);
            }
        }
    }
}
