//! Built-in corner-case scenarios: vehicle following, encroaching cut-in and
//! occluded cut-in at several speeds and distances.

use super::{Agent, AgentId, AgentKind, AgentState, Hazard, Scenario, TrajectorySpec};
use crate::simkernel::SimTime;

const EGO_LANE: i32 = 1;
const HAZARD_AT: SimTime = SimTime::from_millis(2_000);
const DURATION: SimTime = SimTime::from_millis(8_000);

fn kmh(v: f64) -> f64 {
    v / 3.6
}

/// Center-to-center distance for a bumper gap between the ego and an agent.
fn center_gap(gap_m: f64, kind: AgentKind) -> f64 {
    gap_m + 0.5 * (AgentKind::Vehicle.footprint().0 + kind.footprint().0)
}

fn base(name: String, speed_kmh: f64) -> Scenario {
    Scenario::new(name, AgentState::new(0.0, kmh(speed_kmh), 0.0, EGO_LANE), DURATION)
}

fn with_hazard(mut sc: Scenario, agent: Agent, label: &str) -> Scenario {
    sc.hazards.push(Hazard {
        time: HAZARD_AT,
        agent: agent.id,
        label: label.to_string(),
    });
    sc.agents.push(agent);
    sc
}

/// Lead vehicle `gap_m` ahead at the ego's speed brakes at `decel` from the hazard time.
pub fn vehicle_following(speed_kmh: f64, gap_m: f64, decel: f64) -> Scenario {
    let v = kmh(speed_kmh);
    let s0 = center_gap(gap_m, AgentKind::Vehicle);
    let lead = Agent {
        id: AgentId(1),
        kind: AgentKind::Vehicle,
        trajectory: TrajectorySpec::constant(AgentState::new(s0, v, 0.0, EGO_LANE)).with_segment(HAZARD_AT, -decel),
    };
    let sc = base(format!("vehicle-following-{speed_kmh}kmh-{gap_m}m-{decel}mps2"), speed_kmh);
    with_hazard(sc, lead, "lead vehicle brakes")
}

/// A slower vehicle in the adjacent lane changes into the ego lane and is
/// `gap_m` ahead of the ego at the hazard time.
pub fn encroaching_cut_in(speed_kmh: f64, gap_m: f64, cut_in_speed_kmh: f64) -> Scenario {
    let (ve, vc) = (kmh(speed_kmh), kmh(cut_in_speed_kmh));
    let t = HAZARD_AT.as_secs_f64();
    let s0 = center_gap(gap_m, AgentKind::Vehicle) + (ve - vc) * t;
    let car = Agent {
        id: AgentId(1),
        kind: AgentKind::Vehicle,
        trajectory: TrajectorySpec::constant(AgentState::new(s0, vc, 0.0, EGO_LANE + 1)).with_lane_change(HAZARD_AT, EGO_LANE),
    };
    let sc = base(format!("encroaching-cut-in-{speed_kmh}kmh-{gap_m}m"), speed_kmh);
    with_hazard(sc, car, "adjacent vehicle cuts in")
}

/// A pedestrian or cyclist hidden behind parked vehicles steps into the ego
/// lane `gap_m` ahead of the ego; it cannot be detected before it does.
pub fn occluded_cut_in(speed_kmh: f64, gap_m: f64, kind: AgentKind) -> Scenario {
    let ve = kmh(speed_kmh);
    let v = match kind {
        AgentKind::Pedestrian => 1.0,
        _ => 3.0,
    };
    let t = HAZARD_AT.as_secs_f64();
    let s0 = center_gap(gap_m, kind) + (ve - v) * t;
    let agent = Agent {
        id: AgentId(1),
        kind,
        trajectory: TrajectorySpec::constant(AgentState::new(s0, v, 0.0, EGO_LANE - 1))
            .with_lane_change(HAZARD_AT, EGO_LANE)
            .visible_from(HAZARD_AT),
    };
    let sc = base(format!("occluded-cut-in-{kind}-{speed_kmh}kmh-{gap_m}m"), speed_kmh);
    with_hazard(sc, agent, "occluded road user enters the lane")
}

/// Adds vehicles travelling alongside in the other lanes.
fn with_side_traffic(mut sc: Scenario, count: u32) -> Scenario {
    let v = sc.ego_initial.v;
    for k in 0..count {
        let lane = if k % 2 == 0 { EGO_LANE + 1 } else { EGO_LANE - 1 };
        let s = -20.0 + 12.0 * k as f64;
        sc.agents.push(Agent {
            id: AgentId(100 + k),
            kind: AgentKind::Vehicle,
            trajectory: TrajectorySpec::constant(AgentState::new(s, v, 0.0, lane)),
        });
    }
    sc.name.push_str(&format!("-traffic{count}"));
    sc
}

/// The full corner-case suite (24 scenarios).
pub fn corner_case_suite() -> Vec<Scenario> {
    let mut out = Vec::new();
    for (speed, gap, decel) in [
        (20.0, 6.0, 6.0),
        (25.0, 7.0, 6.0),
        (30.0, 8.0, 7.0),
        (35.0, 10.0, 8.0),
        (40.0, 12.0, 8.0),
        (45.0, 14.0, 8.0),
        (50.0, 16.0, 8.0),
        (35.0, 8.0, 6.0),
    ] {
        out.push(vehicle_following(speed, gap, decel));
    }
    for (speed, gap, cut_in) in [
        (25.0, 4.7, 15.0),
        (30.0, 6.0, 15.0),
        (35.0, 7.0, 20.0),
        (40.0, 8.0, 25.0),
        (25.0, 5.5, 10.0),
        (45.0, 10.0, 25.0),
    ] {
        out.push(encroaching_cut_in(speed, gap, cut_in));
    }
    for (speed, gap, kind) in [
        (25.0, 3.9, AgentKind::Pedestrian),
        (20.0, 4.5, AgentKind::Pedestrian),
        (30.0, 6.0, AgentKind::Pedestrian),
        (25.0, 5.0, AgentKind::Cyclist),
        (35.0, 8.0, AgentKind::Cyclist),
        (30.0, 7.0, AgentKind::Cyclist),
    ] {
        out.push(occluded_cut_in(speed, gap, kind));
    }
    let with_traffic: Vec<Scenario> = [out[3].clone(), out[8].clone(), out[14].clone(), out[17].clone()]
        .into_iter()
        .map(|sc| with_side_traffic(sc, 4))
        .collect();
    out.extend(with_traffic);
    out
}
