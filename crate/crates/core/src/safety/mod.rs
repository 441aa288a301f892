//! RSS safety envelope, reaction-time budgets, object deadlines and runtime
//! safety classification.

pub mod requirements;

use serde::{Deserialize, Serialize};

use crate::scenario::{AgentKind, AgentState};
use crate::simkernel::SimTime;

/// Responsibility-sensitive-safety parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RssParams {
    pub response_time_us: u64,
    pub a_max_accel_mps2: f64,
    pub a_min_brake_mps2: f64,
    pub a_max_brake_mps2: f64,
    pub lateral_mu_m: f64,
}

impl Default for RssParams {
    fn default() -> Self {
        RssParams {
            response_time_us: 100_000,
            a_max_accel_mps2: 2.0,
            a_min_brake_mps2: 6.0,
            a_max_brake_mps2: 8.0,
            lateral_mu_m: 0.3,
        }
    }
}

impl RssParams {
    pub fn response_time(&self) -> SimTime {
        SimTime::from_micros(self.response_time_us)
    }

    pub fn validate(&self) -> Result<(), String> {
        let all_positive = self.response_time_us > 0
            && self.a_max_accel_mps2 > 0.0
            && self.a_min_brake_mps2 > 0.0
            && self.a_max_brake_mps2 > 0.0
            && self.lateral_mu_m > 0.0;
        if !all_positive {
            return Err("all RSS parameters must be positive".into());
        }
        if self.a_min_brake_mps2 > self.a_max_brake_mps2 {
            return Err(format!(
                "a_min_brake_mps2 ({}) exceeds a_max_brake_mps2 ({})",
                self.a_min_brake_mps2, self.a_max_brake_mps2
            ));
        }
        Ok(())
    }
}

/// Minimum safe longitudinal distance between a rear vehicle at `v_rear` and a
/// front vehicle at `v_front`, clamped at zero.
pub fn rss_longitudinal_min_distance(v_rear: f64, v_front: f64, p: &RssParams) -> f64 {
    let rho = p.response_time().as_secs_f64();
    let v_r = v_rear.max(0.0);
    let v_f = v_front.max(0.0);
    let v_after = v_r + rho * p.a_max_accel_mps2;
    let d = v_r * rho + 0.5 * p.a_max_accel_mps2 * rho * rho
        + v_after * v_after / (2.0 * p.a_min_brake_mps2)
        - v_f * v_f / (2.0 * p.a_max_brake_mps2);
    d.max(0.0)
}

/// Displacement after `t` seconds at constant acceleration, velocity clamped at 0.
fn displacement(v: f64, a: f64, t: f64) -> f64 {
    if a < 0.0 && v / -a < t {
        return v * v / (-2.0 * a);
    }
    v * t + 0.5 * a * t * t
}

/// Reduction of the longitudinal gap after `t`: the ego holds its speed (it has
/// not reacted yet) while the obstacle keeps its current acceleration.
pub fn closure_distance(ego: &AgentState, obstacle: &AgentState, t: SimTime) -> f64 {
    let secs = t.as_secs_f64();
    ego.v.max(0.0) * secs - displacement(obstacle.v.max(0.0), obstacle.a, secs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "us")]
pub enum Budget {
    Bounded(SimTime),
    Unbounded,
}

impl Budget {
    pub fn bounded(self) -> Option<SimTime> {
        match self {
            Budget::Bounded(t) => Some(t),
            Budget::Unbounded => None,
        }
    }

    /// Applies a cap; unbounded budgets become the cap.
    pub fn capped(self, cap: SimTime) -> SimTime {
        match self {
            Budget::Bounded(t) => t.min(cap),
            Budget::Unbounded => cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetDerivation {
    pub ego: AgentState,
    pub obstacle: AgentState,
    pub d_buffer: f64,
    pub assumed_ego_decel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionBudget {
    pub budget: Budget,
    pub derivation: BudgetDerivation,
}

const MS: u64 = 1_000;

/// Absorbs floating-point noise so that exact crossings such as `5 m/s * 200 ms = 1 m`
/// land on their grid instant.
const CROSSING_TOLERANCE_M: f64 = 1e-9;

/// Largest reaction time (1 ms grid) the ego can spend before the closure
/// reaches `d_buffer`, i.e. the first grid instant where it does.
///
/// The closure rate `v_ego - v_obstacle(t)` is monotone in `t`, so the closure
/// is convex or concave; the first crossing lies on its increasing branch,
/// where plain bisection is sound.
pub fn reaction_budget(
    ego: &AgentState,
    obstacle: &AgentState,
    d_buffer: f64,
    p: &RssParams,
    horizon: SimTime,
) -> ReactionBudget {
    let derivation = BudgetDerivation {
        ego: *ego,
        obstacle: *obstacle,
        d_buffer,
        assumed_ego_decel: p.a_min_brake_mps2,
    };
    let budget = first_crossing_ms(ego, obstacle, d_buffer, horizon);
    ReactionBudget { budget, derivation }
}

fn first_crossing_ms(ego: &AgentState, obstacle: &AgentState, d_buffer: f64, horizon: SimTime) -> Budget {
    if d_buffer <= 0.0 {
        return Budget::Bounded(SimTime::ZERO);
    }
    let crossed = |ms: u64| closure_distance(ego, obstacle, SimTime::from_micros(ms * MS)) >= d_buffer - CROSSING_TOLERANCE_M;
    let h = horizon.as_micros() / MS;

    let v_e = ego.v.max(0.0);
    let v_o = obstacle.v.max(0.0);
    let a_o = obstacle.a;
    // instant where the closure rate changes sign, if any
    let turn = if a_o != 0.0 {
        let t = (v_e - v_o) / a_o;
        (t > 0.0).then_some(t)
    } else {
        None
    };
    let (lo, hi) = if a_o < 0.0 {
        // convex: decreasing until `turn`, increasing afterwards
        let start = turn.map_or(0, |t| ((t * 1e3).floor() as u64).min(h));
        (start, h)
    } else if a_o > 0.0 {
        // concave: increasing until `turn`, then decreasing; the grid peak is
        // on one side of it
        let end = turn.map_or(0, |t| {
            let below = ((t * 1e3).floor() as u64).min(h);
            let above = ((t * 1e3).ceil() as u64).min(h);
            let at = |ms: u64| closure_distance(ego, obstacle, SimTime::from_micros(ms * MS));
            if at(above) >= at(below) {
                above
            } else {
                below
            }
        });
        (0, end)
    } else {
        (0, h)
    };
    if !crossed(hi) {
        return Budget::Unbounded;
    }
    if crossed(lo) {
        return Budget::Bounded(SimTime::from_micros(lo * MS));
    }
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if crossed(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Budget::Bounded(SimTime::from_micros(hi * MS))
}

/// `now + budget`, with unbounded and over-long budgets capped at `cap`.
pub fn object_deadline(
    now: SimTime,
    ego: &AgentState,
    obstacle: &AgentState,
    d_buffer: f64,
    p: &RssParams,
    cap: SimTime,
) -> SimTime {
    let b = reaction_budget(ego, obstacle, d_buffer, p, cap);
    now.saturating_add(b.budget.capped(cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SafetyKind {
    Safe,
    Violation,
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyStatus {
    pub kind: SafetyKind,
    pub longitudinal_m: f64,
    pub lateral_m: f64,
}

/// Bumper-to-bumper longitudinal and side-to-side lateral gaps. Negative
/// values mean overlap.
pub fn gaps(
    ego: &AgentState,
    obstacle: &AgentState,
    obstacle_kind: AgentKind,
    lane_width: f64,
) -> (f64, f64) {
    let (el, ew) = AgentKind::Vehicle.footprint();
    let (ol, ow) = obstacle_kind.footprint();
    let long = (obstacle.s - ego.s).abs() - 0.5 * (el + ol);
    let lat = (obstacle.lateral(lane_width) - ego.lateral(lane_width)).abs() - 0.5 * (ew + ow);
    (long, lat)
}

/// Violation threshold for the pair: RSS minimum distance plus `d_buffer`.
pub fn violation_threshold(
    ego: &AgentState,
    obstacle: &AgentState,
    p: &RssParams,
    d_buffer: f64,
) -> f64 {
    let (v_rear, v_front) = if obstacle.s >= ego.s {
        (ego.v, obstacle.v)
    } else {
        (obstacle.v, ego.v)
    };
    rss_longitudinal_min_distance(v_rear, v_front, p) + d_buffer
}

pub fn classify(long: f64, lat: f64, threshold: f64, lateral_mu: f64) -> SafetyStatus {
    let kind = if long <= 0.0 && lat <= 0.0 {
        SafetyKind::Collision
    } else if long < threshold && lat < lateral_mu {
        SafetyKind::Violation
    } else {
        SafetyKind::Safe
    };
    SafetyStatus {
        kind,
        longitudinal_m: long,
        lateral_m: lat,
    }
}

pub fn check_safety(
    ego: &AgentState,
    obstacle: &AgentState,
    obstacle_kind: AgentKind,
    p: &RssParams,
    d_buffer: f64,
    lane_width: f64,
) -> SafetyStatus {
    let (long, lat) = gaps(ego, obstacle, obstacle_kind, lane_width);
    classify(long, lat, violation_threshold(ego, obstacle, p, d_buffer), p.lateral_mu_m)
}

/// Distance the ego may still close on an obstacle ahead in its path before
/// entering the violation zone. `None` when the obstacle is behind or
/// laterally clear.
pub fn envelope_slack(
    ego: &AgentState,
    obstacle: &AgentState,
    obstacle_kind: AgentKind,
    p: &RssParams,
    d_buffer: f64,
    lane_width: f64,
) -> Option<f64> {
    if obstacle.s < ego.s {
        return None;
    }
    let (long, lat) = gaps(ego, obstacle, obstacle_kind, lane_width);
    if lat >= p.lateral_mu_m {
        return None;
    }
    Some(long - violation_threshold(ego, obstacle, p, d_buffer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(rho_us: u64, acc: f64, min_b: f64, max_b: f64) -> RssParams {
        RssParams {
            response_time_us: rho_us,
            a_max_accel_mps2: acc,
            a_min_brake_mps2: min_b,
            a_max_brake_mps2: max_b,
            lateral_mu_m: 0.3,
        }
    }

    #[test]
    fn rss_distance_examples() {
        let sym = params(0, 2.0, 6.0, 6.0);
        assert_eq!(rss_longitudinal_min_distance(12.0, 12.0, &sym), 0.0);

        let p = params(100_000, 2.0, 4.0, 8.0);
        // 10*0.1 + 0.5*2*0.01 + 10.2^2/8 - 0 = 1 + 0.01 + 13.005
        let d = rss_longitudinal_min_distance(10.0, 0.0, &p);
        assert!((d - 14.015).abs() < 1e-9, "{d}");

        assert_eq!(rss_longitudinal_min_distance(0.0, 10.0, &p), 0.0);
    }

    #[test]
    fn closure_examples() {
        let ego = AgentState::new(0.0, 10.0, 0.0, 1);
        let obs = AgentState::new(20.0, 5.0, 0.0, 1);
        assert!((closure_distance(&ego, &obs, SimTime::from_millis(100)) - 0.5).abs() < 1e-12);

        let same = AgentState::new(20.0, 10.0, 0.0, 1);
        for ms in [0, 1, 250, 10_000] {
            assert_eq!(closure_distance(&ego, &same, SimTime::from_millis(ms)), 0.0);
        }

        let braking = AgentState::new(20.0, 10.0, -6.0, 1);
        assert!((closure_distance(&ego, &braking, SimTime::from_secs(1)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn budget_examples() {
        let p = RssParams::default();
        let ego = AgentState::new(0.0, 10.0, 0.0, 1);
        let obs = AgentState::new(20.0, 5.0, 0.0, 1);
        let b = reaction_budget(&ego, &obs, 1.0, &p, SimTime::from_secs(10));
        assert_eq!(b.budget, Budget::Bounded(SimTime::from_millis(200)));

        let still = AgentState::new(0.0, 0.0, 0.0, 1);
        let far = AgentState::new(100.0, 0.0, 0.0, 1);
        let b = reaction_budget(&still, &far, 1.0, &p, SimTime::from_secs(10));
        assert_eq!(b.budget, Budget::Unbounded);
        assert_eq!(b.derivation.assumed_ego_decel, p.a_min_brake_mps2);
    }

    #[test]
    fn deadline_examples() {
        let p = RssParams::default();
        let ego = AgentState::new(0.0, 10.0, 0.0, 1);
        let obs = AgentState::new(20.0, 5.0, 0.0, 1);
        let cap = SimTime::from_secs(2);
        assert_eq!(
            object_deadline(SimTime::from_secs(1), &ego, &obs, 1.0, &p, cap),
            SimTime::from_millis(1_200)
        );
        let still = AgentState::new(0.0, 0.0, 0.0, 1);
        assert_eq!(
            object_deadline(SimTime::from_secs(1), &still, &obs, 1.0, &p, cap),
            SimTime::from_secs(3)
        );
    }

    #[test]
    fn nearer_faster_obstacle_has_earlier_deadline() {
        let p = RssParams::default();
        let cap = SimTime::from_secs(2);
        let now = SimTime::from_secs(1);
        let ego = AgentState::new(0.0, 12.0, 0.0, 1);
        let slow_near = AgentState::new(15.0, 4.0, 0.0, 1);
        let fast_far = AgentState::new(40.0, 9.0, 0.0, 1);
        let (d_near, d_far) = (1.5, 4.0);
        let near = object_deadline(now, &ego, &slow_near, d_near, &p, cap);
        let far = object_deadline(now, &ego, &fast_far, d_far, &p, cap);
        assert!(near < far);
        // cross-check against the budgets directly
        let b_near = reaction_budget(&ego, &slow_near, d_near, &p, cap).budget.bounded().unwrap();
        let b_far = reaction_budget(&ego, &fast_far, d_far, &p, cap).budget.capped(cap);
        assert!(b_near < b_far);
    }

    #[test]
    fn safety_classification_boundaries() {
        let p = RssParams::default();
        let ego = AgentState::new(0.0, 10.0, 0.0, 1);
        let (len, _) = AgentKind::Vehicle.footprint();
        // bumper contact
        let touching = AgentState::new(len, 10.0, 0.0, 1);
        assert_eq!(check_safety(&ego, &touching, AgentKind::Vehicle, &p, 1.0, 3.5).kind, SafetyKind::Collision);

        let threshold = violation_threshold(&ego, &touching, &p, 1.0);
        let far = AgentState::new(len + threshold + 5.0, 10.0, 0.0, 1);
        assert_eq!(check_safety(&ego, &far, AgentKind::Vehicle, &p, 1.0, 3.5).kind, SafetyKind::Safe);

        let just_inside = AgentState::new(len + threshold - 1e-6, 10.0, 0.0, 1);
        assert_eq!(
            check_safety(&ego, &just_inside, AgentKind::Vehicle, &p, 1.0, 3.5).kind,
            SafetyKind::Violation
        );

        let other_lane = AgentState::new(len + 0.5, 10.0, 0.0, 2);
        assert_eq!(check_safety(&ego, &other_lane, AgentKind::Vehicle, &p, 1.0, 3.5).kind, SafetyKind::Safe);
    }

    /// Brute-force 1 ms stepping: first grid instant where the closure reaches the buffer.
    fn stepping_oracle(ego: &AgentState, obs: &AgentState, d: f64, horizon_ms: u64) -> Budget {
        for ms in 0..=horizon_ms {
            if closure_distance(ego, obs, SimTime::from_millis(ms)) >= d {
                return Budget::Bounded(SimTime::from_millis(ms));
            }
        }
        Budget::Unbounded
    }

    #[test]
    fn bisection_matches_stepping_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let p = RssParams::default();
        for _ in 0..1000 {
            let ego = AgentState::new(0.0, rng.random_range(0.0..30.0), 0.0, 1);
            let obs = AgentState::new(
                30.0,
                rng.random_range(0.0..30.0),
                rng.random_range(-9.0..3.0),
                1,
            );
            let d = rng.random_range(0.05..20.0);
            let got = reaction_budget(&ego, &obs, d, &p, SimTime::from_secs(5)).budget;
            let want = stepping_oracle(&ego, &obs, d, 5_000);
            match (got, want) {
                (Budget::Bounded(a), Budget::Bounded(b)) => {
                    let diff = a.as_micros().abs_diff(b.as_micros());
                    assert!(diff <= 1_000, "{ego:?} {obs:?} {d}: {a} vs {b}");
                }
                (a, b) => assert_eq!(a, b, "{ego:?} {obs:?} {d}"),
            }
        }
    }

    proptest! {
        #[test]
        fn budget_monotone_in_speed_and_buffer(
            v in 0.0f64..30.0, dv in 0.0f64..10.0,
            vo in 0.0f64..30.0, ao in -9.0f64..3.0,
            d in 0.1f64..20.0, dd in 0.0f64..10.0,
        ) {
            let p = RssParams::default();
            let h = SimTime::from_secs(5);
            let obs = AgentState::new(30.0, vo, ao, 1);
            let base = reaction_budget(&AgentState::new(0.0, v, 0.0, 1), &obs, d, &p, h).budget.capped(h);
            let faster = reaction_budget(&AgentState::new(0.0, v + dv, 0.0, 1), &obs, d, &p, h).budget.capped(h);
            let roomier = reaction_budget(&AgentState::new(0.0, v, 0.0, 1), &obs, d + dd, &p, h).budget.capped(h);
            prop_assert!(faster <= base);
            prop_assert!(roomier >= base);
        }

        #[test]
        fn violation_implies_exhausted_budget(
            v in 0.0f64..30.0, vo in 0.0f64..30.0, ao in -9.0f64..3.0, gap in -1.0f64..60.0, d in 0.0f64..3.0,
        ) {
            let p = RssParams::default();
            let ego = AgentState::new(0.0, v, 0.0, 1);
            let len = AgentKind::Vehicle.footprint().0;
            let obs = AgentState::new(len + gap.max(0.01), vo, ao, 1);
            let st = check_safety(&ego, &obs, AgentKind::Vehicle, &p, d, 3.5);
            if st.kind == SafetyKind::Violation {
                let slack = envelope_slack(&ego, &obs, AgentKind::Vehicle, &p, d, 3.5).unwrap();
                let b = reaction_budget(&ego, &obs, slack, &p, SimTime::from_secs(5));
                prop_assert!(b.budget.capped(SimTime::MAX) <= p.response_time());
            }
        }
    }
}
