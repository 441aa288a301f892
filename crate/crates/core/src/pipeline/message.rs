use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::safety::Budget;
use crate::scenario::{AgentId, AgentKind, AgentState};
use crate::simkernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathChoice {
    #[default]
    Normal,
    Fastpath,
}

/// One node a message passed through and the path it took there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub node: usize,
    pub path: PathChoice,
}

/// A detected object as carried through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub id: AgentId,
    pub kind: AgentKind,
    /// Snapshot at capture.
    pub state: AgentState,
    /// Ego-to-object distance at capture.
    pub distance_m: f64,
    pub deadline: SimTime,
    /// Reaction budget at capture, before the deadline cap.
    pub budget: Budget,
    /// Capture instant of the frame this entry was detected in.
    pub capture: SimTime,
    /// Execution time accumulated by the spans that carried this entry.
    pub module: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    /// Frame number at the originating sensor.
    pub seq: u64,
    /// Index of the originating sensor node.
    pub sensor: usize,
    pub sensor_ts: SimTime,
    pub created_ts: SimTime,
    /// When the message reached the consumer queue it sits in.
    pub delivered_at: SimTime,
    pub objects: Vec<ObjectEntry>,
    pub message_deadline: SimTime,
    pub partial: bool,
    pub provenance: Arc<str>,
    /// Execution time accumulated along the primary lineage.
    pub module: SimTime,
    pub hops: Vec<Hop>,
}

impl FrameMessage {
    pub fn empty(seq: u64, sensor_ts: SimTime, message_deadline: SimTime) -> Self {
        FrameMessage {
            seq,
            sensor: 0,
            sensor_ts,
            created_ts: sensor_ts,
            delivered_at: sensor_ts,
            objects: Vec::new(),
            message_deadline,
            partial: false,
            provenance: Arc::from(""),
            module: SimTime::ZERO,
            hops: Vec::new(),
        }
    }

    /// Earliest object deadline, or `fallback` when there are no objects.
    pub fn earliest_deadline(objects: &[ObjectEntry], fallback: SimTime) -> SimTime {
        objects.iter().map(|o| o.deadline).min().unwrap_or(fallback)
    }
}
