//! Per-scenario latency requirements: the reaction budget of a hazard that
//! appears in the ego lane at a given distance, and a two-parameter
//! calibration of the buffer against measured requirements.
//!
//! The hazard (stopped lead, cut-in vehicle, crossing pedestrian) is taken to
//! have no longitudinal speed once it blocks the lane. The buffer the ego may
//! consume is `buffer_fraction * distance - standstill_margin_m`.

use serde::{Deserialize, Serialize};

use super::{reaction_budget, Budget, RssParams};
use crate::scenario::AgentState;
use crate::simkernel::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementCase {
    pub label: String,
    pub speed_kmh: f64,
    pub distance_m: f64,
    /// Measured requirement the calibration targets.
    pub reference_ms: f64,
}

impl RequirementCase {
    pub fn new(label: &str, speed_kmh: f64, distance_m: f64, reference_ms: f64) -> Self {
        RequirementCase {
            label: label.to_string(),
            speed_kmh,
            distance_m,
            reference_ms,
        }
    }
}

/// Vehicle following at 35 and 20 km/h, encroaching cut-in and occluded cut-in.
pub fn reference_cases() -> Vec<RequirementCase> {
    vec![
        RequirementCase::new("vehicle-following-35", 35.0, 10.0, 411.2),
        RequirementCase::new("vehicle-following-20", 20.0, 10.0, 621.8),
        RequirementCase::new("encroaching-cut-in", 25.0, 4.7, 235.5),
        RequirementCase::new("occluded-cut-in", 25.0, 3.9, 159.5),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferCalibration {
    pub buffer_fraction: f64,
    pub standstill_margin_m: f64,
}

impl BufferCalibration {
    pub fn d_buffer(&self, distance_m: f64) -> f64 {
        self.buffer_fraction * distance_m - self.standstill_margin_m
    }
}

const HORIZON: SimTime = SimTime::from_secs(10);

pub fn requirement_budget(case: &RequirementCase, calib: &BufferCalibration, p: &RssParams) -> Budget {
    let ego = AgentState::new(0.0, case.speed_kmh / 3.6, 0.0, 1);
    let hazard = AgentState::new(case.distance_m, 0.0, 0.0, 1);
    reaction_budget(&ego, &hazard, calib.d_buffer(case.distance_m), p, HORIZON).budget
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub calibration: BufferCalibration,
    pub budgets_ms: Vec<f64>,
    pub max_relative_error: f64,
}

fn relative_errors(cases: &[RequirementCase], budgets_ms: &[f64]) -> f64 {
    cases
        .iter()
        .zip(budgets_ms)
        .map(|(c, b)| (b - c.reference_ms).abs() / c.reference_ms)
        .fold(0.0, f64::max)
}

pub fn evaluate(cases: &[RequirementCase], calib: BufferCalibration, p: &RssParams) -> Option<CalibrationResult> {
    let budgets_ms = cases
        .iter()
        .map(|c| requirement_budget(c, &calib, p).bounded().map(|t| t.as_millis_f64()))
        .collect::<Option<Vec<_>>>()?;
    if budgets_ms.iter().any(|&b| b <= 0.0) {
        return None;
    }
    Some(CalibrationResult {
        calibration: calib,
        max_relative_error: relative_errors(cases, &budgets_ms),
        budgets_ms,
    })
}

/// Grid search minimizing the worst relative error: fraction in [0.05, 1.0]
/// step 0.005, margin in [-2, 3] m step 0.025.
pub fn calibrate(cases: &[RequirementCase], p: &RssParams) -> Option<CalibrationResult> {
    let mut best: Option<CalibrationResult> = None;
    for fi in 0..=190 {
        let buffer_fraction = 0.05 + fi as f64 * 0.005;
        for mi in 0..=200 {
            let standstill_margin_m = -2.0 + mi as f64 * 0.025;
            let calib = BufferCalibration {
                buffer_fraction,
                standstill_margin_m,
            };
            if let Some(r) = evaluate(cases, calib, p) {
                if best
                    .as_ref()
                    .is_none_or(|b| r.max_relative_error < b.max_relative_error)
                {
                    best = Some(r);
                }
            }
        }
    }
    best
}
