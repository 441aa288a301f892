//! Dataflow graph description: nodes, execution patterns, channels, messages,
//! latency models and the fusion track manager.

mod channel;
mod file;
mod fusion;
mod latency;
mod message;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use channel::{ChannelPolicy, ChannelQueue};
pub use file::{load_pipeline, pipeline_from_json, pipeline_to_json, save_pipeline};
pub use fusion::{fusion_update, DetectionHistory, FusionSpec, FusionTracker};
pub use latency::{
    predict_latency, sample_latency, Contention, KindCounts, LatencyModel, Noise, PerKindCost,
};
pub use message::{FrameMessage, Hop, ObjectEntry, PathChoice};

use crate::error::{Error, FieldError, Result};
use crate::simkernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Sensor,
    Perception,
    Fusion,
    Prediction,
    Planning,
    Control,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// Fires every `period_us`, first at `phase_us`.
    Timing {
        period_us: SimTime,
        #[serde(default)]
        phase_us: SimTime,
    },
    /// Fires when a message arrives on the first input.
    Interrupt,
}

impl Pattern {
    pub fn timing(period: SimTime) -> Self {
        Pattern::Timing {
            period_us: period,
            phase_us: SimTime::ZERO,
        }
    }
}

fn one() -> u32 {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub role: Role,
    pub pattern: Pattern,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub latency: LatencyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_latency: Option<LatencyModel>,
    /// Planning horizon fed to the latency model's lookahead term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead_m: Option<f64>,
    /// Detection range; sensors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_range_m: Option<f64>,
    #[serde(default = "one")]
    pub max_instances: u32,
    /// May run on another group's idle worker when admission allows it.
    #[serde(default, skip_serializing_if = "is_false")]
    pub nice_guest: bool,
}

impl NodeSpec {
    pub fn new(name: &str, role: Role, pattern: Pattern, latency: LatencyModel) -> Self {
        NodeSpec {
            name: name.to_string(),
            role,
            pattern,
            inputs: Vec::new(),
            outputs: Vec::new(),
            latency,
            fast_latency: None,
            lookahead_m: None,
            sensor_range_m: None,
            max_instances: 1,
            nice_guest: false,
        }
    }

    pub fn inputs(mut self, ids: &[&str]) -> Self {
        self.inputs = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn outputs(mut self, ids: &[&str]) -> Self {
        self.outputs = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn fast(mut self, m: LatencyModel) -> Self {
        self.fast_latency = Some(m);
        self
    }

    pub fn lookahead(mut self, m: f64) -> Self {
        self.lookahead_m = Some(m);
        self
    }

    pub fn range(mut self, m: f64) -> Self {
        self.sensor_range_m = Some(m);
        self
    }

    pub fn nice_guest(mut self) -> Self {
        self.nice_guest = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: String,
    pub policy: ChannelPolicy,
}

impl ChannelSpec {
    pub fn fifo(id: &str, capacity: usize) -> Self {
        ChannelSpec {
            id: id.to_string(),
            policy: ChannelPolicy::Fifo { capacity },
        }
    }

    pub fn latest(id: &str) -> Self {
        ChannelSpec {
            id: id.to_string(),
            policy: ChannelPolicy::LatestOnly,
        }
    }
}

/// Unvalidated graph description. Edges are implied by node inputs/outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineGraph {
    pub nodes: Vec<NodeSpec>,
    pub channels: Vec<ChannelSpec>,
    pub fusion: FusionSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub producer: String,
    pub channel: String,
    pub consumer: String,
}

impl PipelineGraph {
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for p in &self.nodes {
            for ch in &p.outputs {
                for c in self.nodes.iter().filter(|c| c.inputs.contains(ch)) {
                    out.push(Edge {
                        producer: p.name.clone(),
                        channel: ch.clone(),
                        consumer: c.name.clone(),
                    });
                }
            }
        }
        out
    }
}

/// A consumer endpoint: node index and the position of the channel among its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumer {
    pub node: usize,
    pub slot: usize,
}

/// A validated graph with resolved indices.
#[derive(Debug, Clone)]
pub struct Pipeline {
    graph: PipelineGraph,
    node_index: HashMap<String, usize>,
    channel_index: HashMap<String, usize>,
    producer: Vec<usize>,
    consumers: Vec<Vec<Consumer>>,
    /// Channel indices per node input slot.
    inputs: Vec<Vec<usize>>,
    outputs: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl Pipeline {
    pub fn graph(&self) -> &PipelineGraph {
        &self.graph
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.graph.nodes
    }

    pub fn node(&self, i: usize) -> &NodeSpec {
        &self.graph.nodes[i]
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_index.get(name).copied()
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channel_index.get(id).copied()
    }

    pub fn channel(&self, c: usize) -> &ChannelSpec {
        &self.graph.channels[c]
    }

    pub fn producer(&self, channel: usize) -> usize {
        self.producer[channel]
    }

    pub fn consumers(&self, channel: usize) -> &[Consumer] {
        &self.consumers[channel]
    }

    pub fn input_channels(&self, node: usize) -> &[usize] {
        &self.inputs[node]
    }

    pub fn output_channels(&self, node: usize) -> &[usize] {
        &self.outputs[node]
    }

    /// Nodes in dependency order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.outputs[node]
            .iter()
            .flat_map(move |&c| self.consumers[c].iter().map(|k| k.node))
    }

    pub fn fusion(&self) -> FusionSpec {
        self.graph.fusion
    }
}

/// Checks every graph invariant and resolves indices. Field-level problems
/// are reported together; structural ones (dangling channel, shared producer,
/// cycle) are reported individually in that order.
pub fn validate_graph(g: &PipelineGraph) -> Result<Pipeline> {
    let mut errors = Vec::new();
    let mut node_index = HashMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let at = |f: &str| format!("nodes[{i}].{f}");
        if n.name.is_empty() {
            errors.push(FieldError::new(at("name"), "must not be empty"));
        }
        if node_index.insert(n.name.clone(), i).is_some() {
            errors.push(FieldError::new(at("name"), format!("duplicate node name `{}`", n.name)));
        }
        if let Pattern::Timing { period_us, .. } = n.pattern {
            if period_us == SimTime::ZERO {
                errors.push(FieldError::new(at("pattern.timing.period_us"), "period must be > 0"));
            }
        }
        if n.outputs.is_empty() {
            errors.push(FieldError::new(at("outputs"), "at least one output is required"));
        }
        if n.role == Role::Sensor {
            if !n.inputs.is_empty() {
                errors.push(FieldError::new(at("inputs"), "sensor nodes take no inputs"));
            }
            if n.pattern == Pattern::Interrupt {
                errors.push(FieldError::new(at("pattern"), "sensor nodes must be timing-based"));
            }
        } else if n.inputs.is_empty() {
            errors.push(FieldError::new(at("inputs"), "non-sensor nodes need at least one input"));
        }
        if n.max_instances == 0 {
            errors.push(FieldError::new(at("max_instances"), "must be >= 1"));
        }
        if let Err(e) = n.latency.validate() {
            errors.push(FieldError::new(at("latency"), e));
        }
        if let Some(Err(e)) = n.fast_latency.as_ref().map(LatencyModel::validate) {
            errors.push(FieldError::new(at("fast_latency"), e));
        }
        for (f, v) in [("lookahead_m", n.lookahead_m), ("sensor_range_m", n.sensor_range_m)] {
            if v.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
                errors.push(FieldError::new(at(f), "must be finite and >= 0"));
            }
        }
        let mut seen = HashSet::new();
        for (k, ch) in n.inputs.iter().enumerate() {
            if !seen.insert(ch) {
                errors.push(FieldError::new(at(&format!("inputs[{k}]")), "duplicate input"));
            }
        }
    }
    let mut channel_index = HashMap::new();
    for (i, c) in g.channels.iter().enumerate() {
        if channel_index.insert(c.id.clone(), i).is_some() {
            errors.push(FieldError::new(format!("channels[{i}].id"), format!("duplicate channel id `{}`", c.id)));
        }
        if c.policy.capacity() == 0 {
            errors.push(FieldError::new(format!("channels[{i}].policy"), "capacity must be >= 1"));
        }
    }
    if let Err(e) = g.fusion.validate() {
        errors.push(FieldError::new("fusion", e));
    }
    if !errors.is_empty() {
        return Err(Error::invalid("pipeline", errors));
    }

    let resolve = |node: &NodeSpec, ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                channel_index.get(id).copied().ok_or_else(|| Error::DanglingChannel {
                    node: node.name.clone(),
                    channel: id.clone(),
                })
            })
            .collect()
    };
    let mut inputs = Vec::with_capacity(g.nodes.len());
    let mut outputs = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        inputs.push(resolve(n, &n.inputs)?);
        outputs.push(resolve(n, &n.outputs)?);
    }

    let mut producers: Vec<Vec<usize>> = vec![Vec::new(); g.channels.len()];
    for (i, outs) in outputs.iter().enumerate() {
        for &c in outs {
            if !producers[c].contains(&i) {
                producers[c].push(i);
            }
        }
    }
    let mut producer = Vec::with_capacity(g.channels.len());
    for (c, ps) in producers.iter().enumerate() {
        match ps.as_slice() {
            [p] => producer.push(*p),
            [] => {
                return Err(Error::invalid(
                    "pipeline",
                    vec![FieldError::new(format!("channels[{c}]"), format!("channel `{}` has no producer", g.channels[c].id))],
                ))
            }
            _ => {
                return Err(Error::MultiProducer {
                    channel: g.channels[c].id.clone(),
                    producers: ps.iter().map(|&p| g.nodes[p].name.clone()).collect(),
                })
            }
        }
    }

    let mut consumers: Vec<Vec<Consumer>> = vec![Vec::new(); g.channels.len()];
    for (node, ins) in inputs.iter().enumerate() {
        for (slot, &c) in ins.iter().enumerate() {
            consumers[c].push(Consumer { node, slot });
        }
    }

    let succ: Vec<Vec<usize>> = outputs
        .iter()
        .map(|outs| {
            let mut s: Vec<usize> = outs.iter().flat_map(|&c| consumers[c].iter().map(|k| k.node)).collect();
            s.sort_unstable();
            s.dedup();
            s
        })
        .collect();
    let topo = topo_sort(&succ).map_err(|cycle| Error::Cycle(cycle.into_iter().map(|i| g.nodes[i].name.clone()).collect()))?;

    Ok(Pipeline {
        graph: g.clone(),
        node_index,
        channel_index,
        producer,
        consumers,
        inputs,
        outputs,
        topo,
    })
}

/// Depth-first topological sort. On failure returns the cycle as a closed
/// path, e.g. `[a, b, a]`.
fn topo_sort(succ: &[Vec<usize>]) -> std::result::Result<Vec<usize>, Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = succ.len();
    let mut mark = vec![Mark::New; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        // stack of (node, next successor position)
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(&mut (v, ref mut pos)) = stack.last_mut() {
            if let Some(&w) = succ[v].get(*pos) {
                *pos += 1;
                match mark[w] {
                    Mark::New => {
                        mark[w] = Mark::Active;
                        stack.push((w, 0));
                    }
                    Mark::Active => {
                        let start = stack.iter().position(|&(u, _)| u == w).expect("active node is on the stack");
                        let mut cycle: Vec<usize> = stack[start..].iter().map(|&(u, _)| u).collect();
                        cycle.push(w);
                        return Err(cycle);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[v] = Mark::Done;
                order.push(v);
                stack.pop();
            }
        }
    }
    order.reverse();
    Ok(order)
}

/// Longest predicted path (sum of per-node estimates) starting at each node,
/// including the node itself.
pub fn longest_paths(p: &Pipeline, estimate: impl Fn(usize) -> SimTime) -> BTreeMap<usize, SimTime> {
    let mut best = BTreeMap::new();
    for &v in p.topo_order().iter().rev() {
        let tail = p.successors(v).map(|w| best[&w]).max().unwrap_or(SimTime::ZERO);
        best.insert(v, estimate(v).saturating_add(tail));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(ms: u64) -> LatencyModel {
        LatencyModel::fixed(SimTime::from_millis(ms))
    }

    fn chain() -> PipelineGraph {
        PipelineGraph {
            nodes: vec![
                NodeSpec::new("lidar", Role::Sensor, Pattern::timing(SimTime::from_millis(100)), fixed(0)).outputs(&["raw"]),
                NodeSpec::new("perception", Role::Perception, Pattern::Interrupt, fixed(20)).inputs(&["raw"]).outputs(&["obj"]),
                NodeSpec::new("planning", Role::Planning, Pattern::Interrupt, fixed(30)).inputs(&["obj"]).outputs(&["traj"]),
            ],
            channels: vec![ChannelSpec::fifo("raw", 4), ChannelSpec::fifo("obj", 4), ChannelSpec::latest("traj")],
            fusion: FusionSpec::default(),
        }
    }

    #[test]
    fn chain_is_valid() {
        let p = validate_graph(&chain()).unwrap();
        assert_eq!(p.topo_order(), &[0, 1, 2]);
        assert_eq!(chain().edges().len(), 2);
        let lp = longest_paths(&p, |i| p.node(i).latency.offset_us);
        assert_eq!(lp[&0], SimTime::from_millis(50));
    }

    #[test]
    fn two_node_cycle_reports_path() {
        let mut g = chain();
        g.nodes.push(NodeSpec::new("A", Role::Other, Pattern::Interrupt, fixed(1)).inputs(&["ba"]).outputs(&["ab"]));
        g.nodes.push(NodeSpec::new("B", Role::Other, Pattern::Interrupt, fixed(1)).inputs(&["ab"]).outputs(&["ba"]));
        g.channels.push(ChannelSpec::fifo("ab", 1));
        g.channels.push(ChannelSpec::fifo("ba", 1));
        let err = validate_graph(&g).unwrap_err();
        match &err {
            Error::Cycle(path) => assert_eq!(path, &["A", "B", "A"]),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(err.to_string(), "cycle: A→B→A");
    }

    #[test]
    fn multi_producer_names_both() {
        let mut g = chain();
        g.nodes.push(NodeSpec::new("radar", Role::Sensor, Pattern::timing(SimTime::from_millis(50)), fixed(0)).outputs(&["raw"]));
        match validate_graph(&g).unwrap_err() {
            Error::MultiProducer { channel, producers } => {
                assert_eq!(channel, "raw");
                assert_eq!(producers, ["lidar", "radar"]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn dangling_channel() {
        let mut g = chain();
        g.nodes[2].inputs.push("nowhere".into());
        assert!(matches!(validate_graph(&g), Err(Error::DanglingChannel { channel, .. }) if channel == "nowhere"));
    }

    #[test]
    fn field_errors() {
        let mut g = chain();
        g.nodes[0].pattern = Pattern::timing(SimTime::ZERO);
        g.nodes[0].inputs.push("obj".into());
        g.nodes[1].outputs.clear();
        match validate_graph(&g).unwrap_err() {
            Error::Invalid { errors, .. } => {
                let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
                assert_eq!(fields, ["nodes[0].pattern.timing.period_us", "nodes[0].inputs", "nodes[1].outputs"]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn channel_without_producer() {
        let mut g = chain();
        g.channels.push(ChannelSpec::fifo("orphan", 1));
        assert!(matches!(validate_graph(&g), Err(Error::Invalid { .. })));
    }
}
