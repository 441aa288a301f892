//! a-of-n track confirmation: an object is published only after it has been
//! detected in at least `a` of the last `n` fusion frames.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::scenario::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub a: u32,
    pub n: u32,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec { a: 3, n: 5 }
    }
}

impl FusionSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.a < 1 || self.a > self.n || self.n > 64 {
            return Err(format!("need 1 <= a <= n <= 64, got a={} n={}", self.a, self.n));
        }
        Ok(())
    }

    fn mask(&self) -> u64 {
        if self.n >= 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }
}

/// Per-object detection bitsets; bit 0 is the most recent frame.
pub type DetectionHistory = BTreeMap<AgentId, u64>;

/// Shifts every window by one frame, records `detections`, and returns the
/// confirmed objects together with the new history. Objects absent from all
/// of the last `n` frames are dropped from the history.
pub fn fusion_update(
    spec: &FusionSpec,
    history: &DetectionHistory,
    detections: &BTreeSet<AgentId>,
) -> (Vec<AgentId>, DetectionHistory) {
    let mask = spec.mask();
    let mut next = DetectionHistory::new();
    for (&id, &bits) in history {
        let shifted = (bits << 1) & mask;
        if shifted != 0 {
            next.insert(id, shifted);
        }
    }
    for &id in detections {
        *next.entry(id).or_insert(0) |= 1;
    }
    let published = next
        .iter()
        .filter(|(_, bits)| bits.count_ones() >= spec.a)
        .map(|(&id, _)| id)
        .collect();
    (published, next)
}

/// Stateful wrapper owned by a fusion node.
#[derive(Debug, Clone, Default)]
pub struct FusionTracker {
    spec: FusionSpec,
    history: DetectionHistory,
}

impl FusionTracker {
    pub fn new(spec: FusionSpec) -> Self {
        FusionTracker {
            spec,
            history: DetectionHistory::new(),
        }
    }

    pub fn update(&mut self, detections: &BTreeSet<AgentId>) -> Vec<AgentId> {
        let (published, next) = fusion_update(&self.spec, &self.history, detections);
        self.history = next;
        published
    }
}
