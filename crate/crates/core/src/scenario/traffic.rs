//! Synthetic background traffic at a target density.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentKind, AgentState, TrajectorySpec};
use crate::simkernel::RandomStream;

/// Generated agents get ids starting here so they never clash with
/// hand-authored scenario agents.
pub const TRAFFIC_ID_BASE: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMix {
    pub vehicle: f64,
    pub pedestrian: f64,
    pub cyclist: f64,
}

impl Default for KindMix {
    fn default() -> Self {
        KindMix {
            vehicle: 0.7,
            pedestrian: 0.2,
            cyclist: 0.1,
        }
    }
}

impl KindMix {
    fn pick(&self, u: f64) -> AgentKind {
        let total = self.vehicle + self.pedestrian + self.cyclist;
        let x = u * total;
        if x < self.vehicle {
            AgentKind::Vehicle
        } else if x < self.vehicle + self.pedestrian {
            AgentKind::Pedestrian
        } else {
            AgentKind::Cyclist
        }
    }
}

/// Road layout and placement rules for [`generate_traffic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadSpec {
    pub lane_count: i32,
    pub lane_width_m: f64,
    pub ego_lane: i32,
    pub ego_s_m: f64,
    pub ego_speed_mps: f64,
    /// Agents are placed with `|s - ego_s| <= half_length_m`.
    pub half_length_m: f64,
    /// No agent is placed in the ego lane within this distance of the ego.
    pub clear_zone_m: f64,
    /// Agents outside the ego lane drift by up to this much relative to the ego.
    pub speed_jitter_mps: f64,
    /// Radius the density refers to.
    pub radius_m: f64,
    pub mix: KindMix,
}

impl Default for RoadSpec {
    fn default() -> Self {
        RoadSpec {
            lane_count: 3,
            lane_width_m: 3.5,
            ego_lane: 1,
            ego_s_m: 0.0,
            ego_speed_mps: 10.0,
            half_length_m: 50.0,
            clear_zone_m: 12.0,
            speed_jitter_mps: 0.5,
            radius_m: 25.0,
            mix: KindMix::default(),
        }
    }
}

impl RoadSpec {
    /// Admissible placement length per lane, and the part of it within the radius.
    fn lane_measures(&self) -> Vec<(f64, f64)> {
        (0..self.lane_count)
            .map(|lane| {
                let dl = (lane - self.ego_lane) as f64 * self.lane_width_m;
                let r = if dl.abs() < self.radius_m {
                    (self.radius_m * self.radius_m - dl * dl).sqrt().min(self.half_length_m)
                } else {
                    0.0
                };
                let (mut total, mut inside) = (2.0 * self.half_length_m, 2.0 * r);
                if lane == self.ego_lane {
                    total -= 2.0 * self.clear_zone_m.min(self.half_length_m);
                    inside -= 2.0 * self.clear_zone_m.min(r);
                }
                (total.max(0.0), inside.max(0.0))
            })
            .collect()
    }

    fn sample_offset(&self, lane: i32, u: f64) -> f64 {
        let half = self.half_length_m;
        if lane != self.ego_lane {
            return -half + u * 2.0 * half;
        }
        let clear = self.clear_zone_m.min(half);
        let side = half - clear;
        let x = u * 2.0 * side;
        if x < side {
            -half + x
        } else {
            clear + (x - side)
        }
    }
}

/// Places agents uniformly over the admissible road area so the expected
/// number within `radius_m` of the ego equals `density`. The total count is
/// `floor(n) + Bernoulli(frac(n))` for the expected total `n`, which keeps
/// run-to-run count variation small.
pub fn generate_traffic(density: f64, seed: u64, road: &RoadSpec) -> Vec<(AgentKind, TrajectorySpec)> {
    if density <= 0.0 || road.lane_count <= 0 {
        return Vec::new();
    }
    let measures = road.lane_measures();
    let inside: f64 = measures.iter().map(|m| m.1).sum();
    let total: f64 = measures.iter().map(|m| m.0).sum();
    if inside <= 0.0 || total <= 0.0 {
        return Vec::new();
    }
    let per_meter = density / inside;
    let expected = per_meter * total;

    let mut rng = RandomStream::new(seed, "traffic").rng_at(0);
    let mut count = expected.floor() as usize;
    if rng.random::<f64>() < expected.fract() {
        count += 1;
    }

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x = rng.random::<f64>() * total;
        let mut lane = road.lane_count - 1;
        for (i, m) in measures.iter().enumerate() {
            if x < m.0 {
                lane = i as i32;
                break;
            }
            x -= m.0;
        }
        let offset = road.sample_offset(lane, rng.random());
        let kind = road.mix.pick(rng.random());
        let jitter = if lane == road.ego_lane {
            0.0
        } else {
            (rng.random::<f64>() * 2.0 - 1.0) * road.speed_jitter_mps
        };
        let v = (road.ego_speed_mps + jitter).max(0.0);
        out.push((
            kind,
            TrajectorySpec::constant(AgentState::new(road.ego_s_m + offset, v, 0.0, lane)),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within_radius(agents: &[(AgentKind, TrajectorySpec)], road: &RoadSpec) -> usize {
        let ego = AgentState::new(road.ego_s_m, road.ego_speed_mps, 0.0, road.ego_lane);
        agents
            .iter()
            .filter(|(_, t)| ego.distance_to(&t.initial, road.lane_width_m) <= road.radius_m)
            .count()
    }

    #[test]
    fn zero_density_is_empty() {
        assert!(generate_traffic(0.0, 1, &RoadSpec::default()).is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let road = RoadSpec::default();
        assert_eq!(generate_traffic(5.0, 42, &road), generate_traffic(5.0, 42, &road));
        assert_ne!(generate_traffic(5.0, 42, &road), generate_traffic(5.0, 43, &road));
    }

    #[test]
    fn monte_carlo_density_within_radius() {
        let road = RoadSpec::default();
        let n = 1000;
        let total: usize = (0..n)
            .map(|seed| within_radius(&generate_traffic(5.0, seed, &road), &road))
            .sum();
        let mean = total as f64 / n as f64;
        assert!((4.5..=5.5).contains(&mean), "mean {mean}");
    }

    #[test]
    fn ego_lane_clear_zone_respected() {
        let road = RoadSpec::default();
        for seed in 0..50 {
            for (_, t) in generate_traffic(10.0, seed, &road) {
                if t.initial.lane == road.ego_lane {
                    assert!((t.initial.s - road.ego_s_m).abs() >= road.clear_zone_m);
                    assert_eq!(t.initial.v, road.ego_speed_mps);
                }
                assert!((t.initial.s - road.ego_s_m).abs() <= road.half_length_m);
            }
        }
    }

    #[test]
    fn kind_mix_respected() {
        let road = RoadSpec {
            mix: KindMix {
                vehicle: 0.0,
                pedestrian: 1.0,
                cyclist: 0.0,
            },
            ..RoadSpec::default()
        };
        assert!(generate_traffic(8.0, 3, &road)
            .iter()
            .all(|(k, _)| *k == AgentKind::Pedestrian));
    }
}
