//! Run trace: spans, captures, per-frame and per-object latencies, control
//! decisions, safety samples and reaction records, with NDJSON export.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Decision;
use crate::error::{Error, Result};
use crate::pipeline::PathChoice;
use crate::safety::SafetyKind;
use crate::scenario::{AgentId, AgentKind};
use crate::simkernel::SimTime;

pub const TRACE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: u32,
    pub scenario: String,
    /// SHA-256 of the scenario (including generated traffic) in canonical JSON.
    pub scenario_hash: String,
    pub seed: u64,
    pub duration_us: SimTime,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Normal,
    /// In-radius half of a partial update.
    Critical,
    /// Remainder of a partial update.
    Residual,
    /// Proactive precomputation on a group worker.
    Precompute,
}

/// One execution of a node on a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub node: String,
    pub sensor: String,
    pub frame: u64,
    pub release: SimTime,
    pub start: SimTime,
    pub end: SimTime,
    pub worker: String,
    pub path: PathChoice,
    pub kind: JobKind,
    pub stolen: bool,
    pub objects: u32,
}

/// Agents a sensor detected in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub sensor: String,
    pub frame: u64,
    pub time: SimTime,
    pub agents: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePath {
    pub node: String,
    pub path: PathChoice,
}

/// First arrival of a sensor frame's lineage at a control node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sensor: String,
    pub frame: u64,
    pub capture: SimTime,
    pub completed: SimTime,
    pub e2e: SimTime,
    pub module: SimTime,
    pub bubble: SimTime,
    pub partial: bool,
    pub path: Vec<NodePath>,
}

/// First arrival of one detection (agent, capture) at a control node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub agent: AgentId,
    pub kind: AgentKind,
    pub capture: SimTime,
    pub completed: SimTime,
    pub latency: SimTime,
    pub module: SimTime,
    pub deadline: SimTime,
    pub distance_m: f64,
    pub in_radius: bool,
    pub path: Vec<NodePath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub decided_at: SimTime,
    pub effective_at: SimTime,
    pub decision: Decision,
}

/// Worst ego safety status at one tick, over agents ahead of the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySample {
    pub time: SimTime,
    pub kind: SafetyKind,
    pub agent: Option<AgentId>,
    pub longitudinal_m: Option<f64>,
    pub lateral_m: Option<f64>,
}

/// Reaction-time decomposition `T1 - T0 = t_sensor + t_module + t_bubble`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRecord {
    pub hazard_time: SimTime,
    pub decision_time: SimTime,
    pub t_sensor: SimTime,
    pub t_module: SimTime,
    pub t_bubble: SimTime,
    pub agent: AgentId,
    pub path: Vec<NodePath>,
}

impl ReactionRecord {
    pub fn reaction_time(&self) -> SimTime {
        self.decision_time - self.hazard_time
    }
}

/// A hazard and its reaction; `reaction` is absent when nothing responded
/// before the end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionOutcome {
    pub agent: AgentId,
    pub hazard_time: SimTime,
    pub label: String,
    pub reaction: Option<ReactionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUsage {
    pub name: String,
    pub workers: u32,
    pub busy_us: SimTime,
    pub budget_violations: u64,
    pub guest_jobs: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub duration_us: SimTime,
    pub frames_captured: u64,
    pub frames_completed: u64,
    pub violation_ticks: u64,
    pub collisions: Vec<AgentId>,
    pub min_gap_m: Option<f64>,
    pub groups: Vec<GroupUsage>,
    pub fastpath_jobs: u64,
    pub proactive_saved_us: SimTime,
    pub proactive_cancelled: u64,
    pub dropped_messages: u64,
}

impl RunSummary {
    /// Busy time over available worker time, across all groups.
    pub fn busy_fraction(&self) -> f64 {
        let busy: u64 = self.groups.iter().map(|g| g.busy_us.as_micros()).sum();
        let avail: u64 = self
            .groups
            .iter()
            .map(|g| g.workers as u64 * self.duration_us.as_micros())
            .sum();
        if avail == 0 {
            0.0
        } else {
            busy as f64 / avail as f64
        }
    }

    pub fn budget_violations(&self) -> u64 {
        self.groups.iter().map(|g| g.budget_violations).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub spans: Vec<Span>,
    pub captures: Vec<CaptureRecord>,
    pub frames: Vec<FrameRecord>,
    pub objects: Vec<ObjectRecord>,
    pub controls: Vec<ControlRecord>,
    pub safety: Vec<SafetySample>,
    pub reactions: Vec<ReactionOutcome>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(TraceHeader),
    Span(Span),
    Capture(CaptureRecord),
    Frame(FrameRecord),
    Object(ObjectRecord),
    Control(ControlRecord),
    Safety(SafetySample),
    Reaction(ReactionOutcome),
    Summary(RunSummary),
}

fn write_line<W: Write>(w: &mut W, line: &Line) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")
}

impl RunTrace {
    pub fn frame_latencies(&self) -> Vec<SimTime> {
        self.frames.iter().map(|f| f.e2e).collect()
    }

    pub fn violation_count(&self) -> u64 {
        self.safety.iter().filter(|s| s.kind == SafetyKind::Violation).count() as u64
    }

    pub fn reaction_records(&self) -> impl Iterator<Item = &ReactionRecord> {
        self.reactions.iter().filter_map(|r| r.reaction.as_ref())
    }

    /// Writes the trace as newline-delimited JSON: header, spans, captures,
    /// frames, objects, controls, safety samples, reactions, summary.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_line(&mut w, &Line::Header(self.header.clone()))?;
        for s in &self.spans {
            write_line(&mut w, &Line::Span(s.clone()))?;
        }
        for c in &self.captures {
            write_line(&mut w, &Line::Capture(c.clone()))?;
        }
        for f in &self.frames {
            write_line(&mut w, &Line::Frame(f.clone()))?;
        }
        for o in &self.objects {
            write_line(&mut w, &Line::Object(o.clone()))?;
        }
        for c in &self.controls {
            write_line(&mut w, &Line::Control(c.clone()))?;
        }
        for s in &self.safety {
            write_line(&mut w, &Line::Safety(s.clone()))?;
        }
        for r in &self.reactions {
            write_line(&mut w, &Line::Reaction(r.clone()))?;
        }
        write_line(&mut w, &Line::Summary(self.summary.clone()))?;
        w.flush()
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_ndjson<R: BufRead>(r: R, origin: &Path) -> Result<RunTrace> {
        let mut header = None;
        let mut summary = None;
        let mut t = RunTrace {
            header: TraceHeader {
                format: TRACE_FORMAT,
                scenario: String::new(),
                scenario_hash: String::new(),
                seed: 0,
                duration_us: SimTime::ZERO,
                label: String::new(),
            },
            spans: Vec::new(),
            captures: Vec::new(),
            frames: Vec::new(),
            objects: Vec::new(),
            controls: Vec::new(),
            safety: Vec::new(),
            reactions: Vec::new(),
            summary: RunSummary::default(),
        };
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line).map_err(|e| Error::parse(origin, format!("line {}: {e}", i + 1)))?;
            match rec {
                Line::Header(h) => header = Some(h),
                Line::Span(s) => t.spans.push(s),
                Line::Capture(c) => t.captures.push(c),
                Line::Frame(f) => t.frames.push(f),
                Line::Object(o) => t.objects.push(o),
                Line::Control(c) => t.controls.push(c),
                Line::Safety(s) => t.safety.push(s),
                Line::Reaction(r) => t.reactions.push(r),
                Line::Summary(s) => summary = Some(s),
            }
        }
        t.header = header.ok_or_else(|| Error::parse(origin, "missing header record"))?;
        if t.header.format != TRACE_FORMAT {
            return Err(Error::parse(origin, format!("unsupported trace format {}", t.header.format)));
        }
        t.summary = summary.ok_or_else(|| Error::parse(origin, "missing summary record"))?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ndjson(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunTrace> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        RunTrace::read_ndjson(std::io::BufReader::new(f), path)
    }
}
