//! Tail-latency mitigations: object-level deadlines, fastpath selection,
//! partial updates, proactive precomputation and best-effort work stealing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::pipeline::{
    longest_paths, predict_latency, FrameMessage, KindCounts, LatencyModel, ObjectEntry, PathChoice, Pipeline, Role,
};
use crate::simkernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancelPolicy {
    #[default]
    Never,
    /// Every precomputation is discarded before the node triggers.
    Always,
    /// Discarded when the control decision changed since the upstream arrival.
    OnDecisionChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProactiveSpec {
    pub node: String,
    pub precompute_cost_us: SimTime,
    #[serde(default)]
    pub cancel: CancelPolicy,
    /// Run on a dedicated precompute worker instead of a free group worker.
    #[serde(default = "yes")]
    pub dedicated_worker: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationConfig {
    pub fastpath: bool,
    pub radius_m: f64,
    pub fast_lookahead_m: f64,
    /// Nodes to enable fastpath on; `None` means every prediction/planning
    /// node that has a fast latency model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fastpath_nodes: Option<Vec<String>>,
    pub proactive: bool,
    pub proactive_tasks: Vec<ProactiveSpec>,
    pub stealing: bool,
    pub safety_factor: f64,
    pub deadline_cap_us: SimTime,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            fastpath: false,
            radius_m: 20.0,
            fast_lookahead_m: 40.0,
            fastpath_nodes: None,
            proactive: false,
            proactive_tasks: Vec::new(),
            stealing: false,
            safety_factor: 1.25,
            deadline_cap_us: SimTime::from_secs(2),
        }
    }
}

impl MitigationConfig {
    /// All mitigations on.
    pub fn all(mut self) -> Self {
        self.fastpath = true;
        self.proactive = true;
        self.stealing = true;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.radius_m.is_finite() && self.radius_m > 0.0) {
            return Err("radius_m must be > 0".into());
        }
        if !(self.fast_lookahead_m.is_finite() && self.fast_lookahead_m >= 0.0) {
            return Err("fast_lookahead_m must be >= 0".into());
        }
        if !(self.safety_factor.is_finite() && self.safety_factor >= 1.0) {
            return Err("safety_factor must be >= 1".into());
        }
        if self.deadline_cap_us == SimTime::ZERO {
            return Err("deadline_cap_us must be > 0".into());
        }
        Ok(())
    }
}

/// Resolved fastpath settings for one pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FastpathConfig {
    pub criticality_radius: f64,
    pub enabled_nodes: BTreeSet<usize>,
    pub fast_lookahead: f64,
}

impl FastpathConfig {
    /// Resolves the enabled node set. Only prediction and planning nodes with
    /// a fast latency model qualify.
    pub fn resolve(p: &Pipeline, cfg: &MitigationConfig) -> Result<Self, String> {
        let eligible = |i: usize| {
            let n = p.node(i);
            matches!(n.role, Role::Prediction | Role::Planning) && n.fast_latency.is_some()
        };
        let enabled_nodes = match &cfg.fastpath_nodes {
            None => (0..p.nodes().len()).filter(|&i| eligible(i)).collect(),
            Some(names) => {
                let mut set = BTreeSet::new();
                for name in names {
                    let i = p.node_index(name).ok_or_else(|| format!("fastpath node `{name}` does not exist"))?;
                    if !eligible(i) {
                        return Err(format!(
                            "fastpath node `{name}` must be a prediction or planning node with fast_latency"
                        ));
                    }
                    set.insert(i);
                }
                set
            }
        };
        Ok(FastpathConfig {
            criticality_radius: cfg.radius_m,
            enabled_nodes,
            fast_lookahead: cfg.fast_lookahead_m,
        })
    }

    pub fn is_enabled(&self, node: usize) -> bool {
        self.enabled_nodes.contains(&node)
    }

    /// Predicted latency of `node` on the path it would take under pressure.
    pub fn node_estimate(&self, p: &Pipeline, node: usize, counts: &KindCounts) -> SimTime {
        let n = p.node(node);
        match (&n.fast_latency, self.is_enabled(node)) {
            (Some(fast), true) => {
                let look = n.lookahead_m.map(|_| self.fast_lookahead);
                predict_latency(fast, counts, look)
            }
            _ => predict_latency(&n.latency, counts, n.lookahead_m),
        }
    }

    /// Longest predicted path through the nodes strictly downstream of `node`.
    pub fn downstream_estimate(&self, p: &Pipeline, node: usize, counts: &KindCounts) -> SimTime {
        let paths = longest_paths(p, |i| self.node_estimate(p, i, counts));
        p.successors(node).map(|s| paths[&s]).max().unwrap_or(SimTime::ZERO)
    }
}

/// Earliest object deadline; `now + cap` when there are no objects.
pub fn message_deadline(objects: &[ObjectEntry], now: SimTime, cap: SimTime) -> SimTime {
    FrameMessage::earliest_deadline(objects, now.saturating_add(cap))
}

/// Fastpath iff the normal-path prediction does not fit the time left after
/// reserving the downstream estimate. A non-positive remainder always selects
/// the fastpath.
pub fn choose_path(normal_predicted: SimTime, deadline: SimTime, now: SimTime, downstream: SimTime) -> PathChoice {
    let remaining = deadline.saturating_sub(now).saturating_sub(downstream);
    if remaining == SimTime::ZERO || normal_predicted > remaining {
        PathChoice::Fastpath
    } else {
        PathChoice::Normal
    }
}

/// Splits a message into the in-radius objects, sorted by deadline, and the
/// rest. Both halves are marked partial; an empty half gets `fallback` as its
/// deadline.
pub fn partial_update(msg: &FrameMessage, radius: f64, fallback: SimTime) -> (FrameMessage, FrameMessage) {
    let (mut critical, residual): (Vec<ObjectEntry>, Vec<ObjectEntry>) =
        msg.objects.iter().cloned().partition(|o| o.distance_m <= radius);
    critical.sort_by_key(|o| o.deadline);
    let part = |objects: Vec<ObjectEntry>| FrameMessage {
        message_deadline: FrameMessage::earliest_deadline(&objects, fallback),
        objects,
        partial: true,
        ..msg.clone()
    };
    (part(critical), part(residual))
}

/// Planning latency with the shortened lookahead.
pub fn fastpath_planning_latency(m: &LatencyModel, counts: &KindCounts, fast_lookahead: f64) -> SimTime {
    predict_latency(m, counts, Some(fast_lookahead))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProactiveStatus {
    Pending,
    Done,
    Cancelled,
}

/// Input-independent work started when upstream data arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct ProactiveTask {
    pub node: usize,
    pub precompute_cost: SimTime,
    pub triggered_by: usize,
    pub arrival: SimTime,
    pub status: ProactiveStatus,
}

impl ProactiveTask {
    pub fn new(node: usize, precompute_cost: SimTime, triggered_by: usize, arrival: SimTime) -> Self {
        ProactiveTask {
            node,
            precompute_cost,
            triggered_by,
            arrival,
            status: ProactiveStatus::Pending,
        }
    }

    /// Latency removed from the node's next execution if it starts at `trigger`.
    pub fn saving_at(&self, trigger: SimTime) -> SimTime {
        match self.status {
            ProactiveStatus::Cancelled => SimTime::ZERO,
            _ => self.precompute_cost.min(trigger.saturating_sub(self.arrival)),
        }
    }

    pub fn cancel(&mut self) {
        self.status = ProactiveStatus::Cancelled;
    }
}

/// Effective latency of an execution after a proactive saving.
pub fn proactive_latency(base: SimTime, saving: SimTime) -> SimTime {
    base.saturating_sub(saving)
}

/// A guest task asking to run on one of the host group's workers.
#[derive(Debug, Clone, PartialEq)]
pub struct StealRequest {
    pub guest: usize,
    pub counts: KindCounts,
    pub host_group: usize,
    pub predicted_guest_cost: SimTime,
}

/// A host task the projection must keep within budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostTask {
    pub release: SimTime,
    pub predicted_cost: SimTime,
}

/// Host-group snapshot used for admission.
#[derive(Debug, Clone, PartialEq)]
pub struct HostState {
    pub now: SimTime,
    pub budget: SimTime,
    /// Predicted instant each worker becomes free (`now` or earlier when idle).
    pub worker_free_at: Vec<SimTime>,
    /// Ready host tasks not yet started, in dispatch order.
    pub pending: Vec<HostTask>,
    /// Host tasks known to be released later (timer firings).
    pub future: Vec<HostTask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Admission {
    Admit { worker: usize },
    Reject,
}

fn scale(t: SimTime, factor: f64) -> SimTime {
    SimTime::from_micros((t.as_micros() as f64 * factor).ceil() as u64)
}

/// Projects the host schedule with the guest placed on the least-loaded
/// worker and admits only if the guest and every pending or known future host
/// task complete within the host budget. Predictions are multiplied by
/// `safety_factor`; host tasks are never delayed by preemption, only by the
/// guest occupying a worker.
pub fn steal_admission(req: &StealRequest, host: &HostState, safety_factor: f64) -> Admission {
    if host.worker_free_at.is_empty() {
        return Admission::Reject;
    }
    let mut free: Vec<SimTime> = host.worker_free_at.iter().map(|&t| t.max(host.now)).collect();
    let worker = (0..free.len()).min_by_key(|&w| (free[w], w)).expect("non-empty");
    let guest_end = free[worker].saturating_add(scale(req.predicted_guest_cost, safety_factor));
    if guest_end.saturating_sub(host.now) > host.budget {
        return Admission::Reject;
    }
    free[worker] = guest_end;

    let mut future = host.future.clone();
    future.sort_by_key(|t| t.release);
    for task in host.pending.iter().chain(&future) {
        let w = (0..free.len()).min_by_key(|&w| (free[w], w)).expect("non-empty");
        let start = free[w].max(task.release);
        let end = start.saturating_add(scale(task.predicted_cost, safety_factor));
        if end.saturating_sub(task.release) > host.budget {
            return Admission::Reject;
        }
        free[w] = end;
    }
    Admission::Admit { worker }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PerKindCost, Pattern};
    use crate::safety::Budget;
    use crate::scenario::{AgentId, AgentKind, AgentState};
    use proptest::prelude::*;

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn obj(id: u32, distance: f64, deadline_ms: u64) -> ObjectEntry {
        ObjectEntry {
            id: AgentId(id),
            kind: AgentKind::Vehicle,
            state: AgentState::new(distance, 0.0, 0.0, 1),
            distance_m: distance,
            deadline: ms(deadline_ms),
            budget: Budget::Unbounded,
            capture: SimTime::ZERO,
            module: SimTime::ZERO,
        }
    }

    fn msg(objects: Vec<ObjectEntry>) -> FrameMessage {
        let mut m = FrameMessage::empty(1, SimTime::ZERO, SimTime::ZERO);
        m.message_deadline = FrameMessage::earliest_deadline(&objects, ms(2000));
        m.objects = objects;
        m
    }

    #[test]
    fn message_deadline_examples() {
        let objs = vec![obj(1, 5.0, 500), obj(2, 5.0, 300), obj(3, 5.0, 800)];
        assert_eq!(message_deadline(&objs, ms(0), ms(2000)), ms(300));
        assert_eq!(message_deadline(&[], ms(1000), ms(2000)), ms(3000));
        assert_eq!(message_deadline(&objs[..1], ms(0), ms(2000)), ms(500));
    }

    #[test]
    fn choose_path_examples() {
        // deadline 125 ms after capture at 0, now 40 ms, downstream 40 ms: 45 ms left
        assert_eq!(choose_path(ms(60), ms(125), ms(40), ms(40)), PathChoice::Fastpath);
        assert_eq!(choose_path(ms(30), ms(125), ms(40), ms(40)), PathChoice::Normal);
        assert_eq!(choose_path(ms(0), ms(100), ms(100), ms(0)), PathChoice::Fastpath);
        assert_eq!(choose_path(ms(1), ms(100), ms(150), ms(0)), PathChoice::Fastpath);
    }

    #[test]
    fn partial_update_examples() {
        let (c, r) = partial_update(&msg(vec![obj(1, 5.0, 100), obj(2, 30.0, 50)]), 20.0, ms(2000));
        assert_eq!(c.objects.iter().map(|o| o.id.0).collect::<Vec<_>>(), [1]);
        assert_eq!(r.objects.iter().map(|o| o.id.0).collect::<Vec<_>>(), [2]);
        assert!(c.partial && r.partial);
        assert_eq!(c.message_deadline, ms(100));
        assert_eq!(r.message_deadline, ms(50));

        let (c, r) = partial_update(&msg(vec![obj(1, 5.0, 100), obj(2, 10.0, 50)]), 20.0, ms(2000));
        assert!(r.objects.is_empty());
        assert_eq!(r.message_deadline, ms(2000));
        assert_eq!(c.objects.iter().map(|o| o.id.0).collect::<Vec<_>>(), [2, 1]);
    }

    #[test]
    fn planning_fastpath_examples() {
        let m = LatencyModel::linear(PerKindCost::default(), ms(10)).with_lookahead_cost(100.0);
        let c = KindCounts::default();
        let normal = predict_latency(&m, &c, Some(100.0));
        assert_eq!(normal - fastpath_planning_latency(&m, &c, 40.0), ms(6));
        let flat = LatencyModel::linear(PerKindCost::default(), ms(10));
        assert_eq!(fastpath_planning_latency(&flat, &c, 40.0), predict_latency(&flat, &c, Some(100.0)));
        let grid: Vec<SimTime> = [20.0, 40.0, 60.0, 80.0, 100.0]
            .iter()
            .map(|&l| fastpath_planning_latency(&m, &c, l))
            .collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn proactive_examples() {
        let t = ProactiveTask::new(0, ms(8), 0, ms(100));
        assert_eq!(t.saving_at(ms(120)), ms(8));
        assert_eq!(t.saving_at(ms(103)), ms(3));
        let mut c = t.clone();
        c.cancel();
        assert_eq!(c.saving_at(ms(120)), SimTime::ZERO);
        assert_eq!(proactive_latency(ms(20), t.saving_at(ms(120))), ms(12));
    }

    fn host(budget: u64, busy_until: u64) -> HostState {
        HostState {
            now: SimTime::ZERO,
            budget: ms(budget),
            worker_free_at: vec![ms(busy_until)],
            pending: Vec::new(),
            future: Vec::new(),
        }
    }

    fn guest(cost: u64) -> StealRequest {
        StealRequest {
            guest: 0,
            counts: KindCounts::default(),
            host_group: 0,
            predicted_guest_cost: ms(cost),
        }
    }

    #[test]
    fn steal_admission_examples() {
        assert_eq!(steal_admission(&guest(3), &host(10, 6), 1.0), Admission::Admit { worker: 0 });
        assert_eq!(steal_admission(&guest(5), &host(10, 6), 1.0), Admission::Reject);
        assert_eq!(steal_admission(&guest(10), &host(10, 0), 1.0), Admission::Admit { worker: 0 });
        // the safety factor turns a tight fit into a rejection
        assert_eq!(steal_admission(&guest(4), &host(10, 6), 1.25), Admission::Reject);
    }

    #[test]
    fn future_host_release_blocks_guest() {
        let mut h = host(10, 0);
        h.future.push(HostTask {
            release: ms(2),
            predicted_cost: ms(5),
        });
        // guest 0..6, host task released at 2 would finish at 11: 9 ms after release
        assert_eq!(steal_admission(&guest(6), &h, 1.0), Admission::Admit { worker: 0 });
        // guest 0..8, host task finishes at 13: 11 ms after release
        assert_eq!(steal_admission(&guest(8), &h, 1.0), Admission::Reject);
    }

    #[test]
    fn least_loaded_worker_is_chosen() {
        let mut h = host(10, 6);
        h.worker_free_at.push(ms(2));
        assert_eq!(steal_admission(&guest(5), &h, 1.0), Admission::Admit { worker: 1 });
    }

    #[test]
    fn fastpath_resolution_rejects_ineligible_nodes() {
        use crate::pipeline::{validate_graph, ChannelSpec, NodeSpec, PipelineGraph};
        let fixed = |v| LatencyModel::fixed(ms(v));
        let g = PipelineGraph {
            nodes: vec![
                NodeSpec::new("s", Role::Sensor, Pattern::timing(ms(100)), fixed(0)).outputs(&["a"]),
                NodeSpec::new("perc", Role::Perception, Pattern::Interrupt, fixed(10)).inputs(&["a"]).outputs(&["b"]).fast(fixed(1)),
                NodeSpec::new("pred", Role::Prediction, Pattern::Interrupt, fixed(20)).inputs(&["b"]).outputs(&["c"]).fast(fixed(5)),
                NodeSpec::new("ctl", Role::Control, Pattern::Interrupt, fixed(1)).inputs(&["c"]).outputs(&["d"]),
            ],
            channels: vec![ChannelSpec::fifo("a", 1), ChannelSpec::fifo("b", 1), ChannelSpec::fifo("c", 1), ChannelSpec::fifo("d", 1)],
            fusion: Default::default(),
        };
        let p = validate_graph(&g).unwrap();
        let all = FastpathConfig::resolve(&p, &MitigationConfig::default()).unwrap();
        assert_eq!(all.enabled_nodes, [2].into());
        let bad = MitigationConfig {
            fastpath_nodes: Some(vec!["perc".into()]),
            ..MitigationConfig::default()
        };
        assert!(FastpathConfig::resolve(&p, &bad).is_err());
        // downstream of perception: fast prediction (5) + control (1)
        assert_eq!(all.downstream_estimate(&p, 1, &KindCounts::default()), ms(6));
    }

    proptest! {
        #[test]
        fn partial_update_conserves_objects(
            objs in prop::collection::vec((0.0f64..60.0, 0u64..2000), 0..30),
            radius in 1.0f64..50.0,
        ) {
            let objects: Vec<ObjectEntry> = objs.iter().enumerate().map(|(i, &(d, dl))| obj(i as u32, d, dl)).collect();
            let m = msg(objects);
            let (c, r) = partial_update(&m, radius, ms(5000));
            let mut ids: Vec<u32> = c.objects.iter().chain(&r.objects).map(|o| o.id.0).collect();
            ids.sort_unstable();
            let expect: Vec<u32> = (0..objs.len() as u32).collect();
            prop_assert_eq!(ids, expect);
            prop_assert!(c.objects.windows(2).all(|w| w[0].deadline <= w[1].deadline));
            prop_assert!(c.objects.iter().all(|o| o.distance_m <= radius));
            prop_assert!(r.objects.iter().all(|o| o.distance_m > radius));
        }

        #[test]
        fn admission_never_admits_over_budget(
            busy in prop::collection::vec(0u64..20, 1..4),
            pending in prop::collection::vec((0u64..10, 1u64..8), 0..4),
            g in 1u64..20, budget in 1u64..30,
        ) {
            let h = HostState {
                now: SimTime::ZERO,
                budget: ms(budget),
                worker_free_at: busy.iter().map(|&b| ms(b)).collect(),
                pending: pending.iter().map(|&(r, c)| HostTask { release: ms(r), predicted_cost: ms(c) }).collect(),
                future: Vec::new(),
            };
            if let Admission::Admit { worker } = steal_admission(&guest(g), &h, 1.0) {
                prop_assert!(busy[worker] + g <= budget);
                prop_assert_eq!(busy[worker], *busy.iter().min().unwrap());
            }
        }
    }
}
