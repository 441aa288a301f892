//! Per-node latency models: a linear predictor over obstacle counts plus an
//! offset, optional lookahead cost, stochastic noise and a contention add-on.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::scenario::AgentKind;
use crate::simkernel::{RandomStream, SimTime};

/// Obstacle counts per kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KindCounts([u32; 3]);

fn slot(kind: AgentKind) -> usize {
    match kind {
        AgentKind::Vehicle => 0,
        AgentKind::Pedestrian => 1,
        AgentKind::Cyclist => 2,
    }
}

impl KindCounts {
    pub fn new(vehicle: u32, pedestrian: u32, cyclist: u32) -> Self {
        KindCounts([vehicle, pedestrian, cyclist])
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn add(&mut self, kind: AgentKind) {
        self[kind] += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentKind, u32)> + '_ {
        AgentKind::ALL.iter().map(move |&k| (k, self[k]))
    }
}

impl Index<AgentKind> for KindCounts {
    type Output = u32;
    fn index(&self, kind: AgentKind) -> &u32 {
        &self.0[slot(kind)]
    }
}

impl IndexMut<AgentKind> for KindCounts {
    fn index_mut(&mut self, kind: AgentKind) -> &mut u32 {
        &mut self.0[slot(kind)]
    }
}

impl FromIterator<AgentKind> for KindCounts {
    fn from_iter<I: IntoIterator<Item = AgentKind>>(iter: I) -> Self {
        let mut c = KindCounts::default();
        for k in iter {
            c.add(k);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    #[default]
    None,
    /// Multiplies the prediction by `exp(sigma * Z)`, `Z ~ N(0, 1)`.
    Lognormal { sigma: f64 },
    /// Adds a value drawn uniformly from `[-jitter_us, +jitter_us]`.
    Uniform { jitter_us: u64 },
}

/// Additive memory-contention term: `slope_us_per_miss * misses`, with misses
/// growing linearly in the payload size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contention {
    pub slope_us_per_miss: f64,
    #[serde(default)]
    pub base_misses: f64,
    #[serde(default)]
    pub misses_per_kib: f64,
}

impl Contention {
    pub fn misses(&self, payload_bytes: u64) -> f64 {
        self.base_misses + self.misses_per_kib * payload_bytes as f64 / 1024.0
    }

    pub fn added(&self, payload_bytes: u64) -> f64 {
        self.slope_us_per_miss * self.misses(payload_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    #[serde(default)]
    pub per_kind_us: PerKindCost,
    #[serde(default)]
    pub offset_us: SimTime,
    #[serde(default = "default_floor")]
    pub floor_us: SimTime,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contention: Option<Contention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead_us_per_m: Option<f64>,
}

fn default_floor() -> SimTime {
    SimTime::from_micros(1)
}

/// The per-kind `Time_i` coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerKindCost {
    pub vehicle: SimTime,
    pub pedestrian: SimTime,
    pub cyclist: SimTime,
}

impl PerKindCost {
    pub fn uniform(cost: SimTime) -> Self {
        PerKindCost {
            vehicle: cost,
            pedestrian: cost,
            cyclist: cost,
        }
    }

    pub fn get(&self, kind: AgentKind) -> SimTime {
        match kind {
            AgentKind::Vehicle => self.vehicle,
            AgentKind::Pedestrian => self.pedestrian,
            AgentKind::Cyclist => self.cyclist,
        }
    }
}

impl LatencyModel {
    /// A noiseless model with a fixed latency.
    pub fn fixed(latency: SimTime) -> Self {
        LatencyModel {
            per_kind_us: PerKindCost::default(),
            offset_us: latency,
            floor_us: SimTime::ZERO.max(latency.min(default_floor())),
            noise: Noise::None,
            contention: None,
            lookahead_us_per_m: None,
        }
    }

    pub fn linear(per_kind: PerKindCost, offset: SimTime) -> Self {
        LatencyModel {
            per_kind_us: per_kind,
            offset_us: offset,
            ..LatencyModel::fixed(SimTime::ZERO)
        }
    }

    pub fn with_noise(mut self, noise: Noise) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_lookahead_cost(mut self, us_per_m: f64) -> Self {
        self.lookahead_us_per_m = Some(us_per_m);
        self
    }

    pub fn with_contention(mut self, c: Contention) -> Self {
        self.contention = Some(c);
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.noise {
            Noise::Lognormal { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                return Err(format!("lognormal sigma must be finite and >= 0, got {sigma}"))
            }
            _ => {}
        }
        if let Some(c) = self.contention {
            if !(c.slope_us_per_miss >= 0.0 && c.base_misses >= 0.0 && c.misses_per_kib >= 0.0) {
                return Err("contention coefficients must be >= 0".into());
            }
        }
        if let Some(l) = self.lookahead_us_per_m {
            if !(l.is_finite() && l >= 0.0) {
                return Err("lookahead_us_per_m must be finite and >= 0".into());
            }
        }
        Ok(())
    }
}

fn round_us(x: f64) -> u64 {
    if x <= 0.0 {
        0
    } else {
        x.round() as u64
    }
}

/// Deterministic bound: sum of per-kind cost times count, plus offset, plus
/// the lookahead term when a lookahead is given.
pub fn predict_latency(m: &LatencyModel, counts: &KindCounts, lookahead_m: Option<f64>) -> SimTime {
    let linear: u64 = counts
        .iter()
        .map(|(k, n)| m.per_kind_us.get(k).as_micros().saturating_mul(n as u64))
        .fold(m.offset_us.as_micros(), u64::saturating_add);
    let look = match (lookahead_m, m.lookahead_us_per_m) {
        (Some(d), Some(cost)) => round_us(d.max(0.0) * cost),
        _ => 0,
    };
    SimTime::from_micros(linear.saturating_add(look))
}

/// One latency draw for the given counts. Draw `draw` of `stream` is always
/// the same number, independent of any other draws.
pub fn sample_latency(
    m: &LatencyModel,
    counts: &KindCounts,
    lookahead_m: Option<f64>,
    payload_bytes: u64,
    stream: &RandomStream,
    draw: u64,
) -> SimTime {
    let base = predict_latency(m, counts, lookahead_m).as_micros() as f64;
    let noisy = match m.noise {
        Noise::None => base,
        Noise::Lognormal { sigma } if sigma > 0.0 => {
            let mut rng = stream.rng_at(draw);
            let factor = LogNormal::new(0.0, sigma)
                .expect("sigma validated")
                .sample(&mut rng);
            base * factor
        }
        Noise::Lognormal { .. } => base,
        Noise::Uniform { jitter_us } => {
            let mut rng = stream.rng_at(draw);
            let j = jitter_us as f64;
            base + rng.random_range(-j..=j)
        }
    };
    let contended = noisy + m.contention.map_or(0.0, |c| c.added(payload_bytes));
    SimTime::from_micros(round_us(contended)).max(m.floor_us)
}
