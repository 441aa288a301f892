use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use super::trace::*;
use super::{apply_control, scenario_hash, Decision, EngineConfig, ProcessorGroup};
use crate::error::{Error, Result};
use crate::mitigation::{
    choose_path, partial_update, steal_admission, Admission, CancelPolicy, FastpathConfig, HostState, HostTask,
    ProactiveSpec, ProactiveTask, StealRequest,
};
use crate::pipeline::{
    predict_latency, sample_latency, ChannelQueue, FrameMessage, FusionTracker, Hop, KindCounts, ObjectEntry,
    PathChoice, Pattern, Pipeline, Role,
};
use crate::safety::{check_safety, envelope_slack, reaction_budget, Budget, SafetyKind};
use crate::scenario::{AgentId, AgentState, Scenario, TrajectorySpec, VisibleAgent};
use crate::simkernel::{EventHandle, Kernel, RandomStream, SimTime};

const DEFAULT_SENSOR_RANGE_M: f64 = 100.0;
const CAPTURE_BACKLOG: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Ev {
    Capture(usize),
    Timer(usize),
    Done(u64),
    Tick,
}

type FrameKey = (usize, u64);

struct PrecomputeRt {
    task: ProactiveTask,
    epoch: u64,
    job: Option<u64>,
}

struct NodeRt {
    group: usize,
    queues: Vec<ChannelQueue>,
    captures: VecDeque<FrameMessage>,
    timer: Option<SimTime>,
    next_fire: SimTime,
    ticks: u64,
    last_input: Option<FrameMessage>,
    residual: VecDeque<FrameMessage>,
    running: u32,
    in_wake: bool,
    tracker: Option<FusionTracker>,
    last_published: BTreeSet<AgentId>,
    last_counts: KindCounts,
    frames: u64,
    proactive: Option<ProactiveSpec>,
    tasks: BTreeMap<FrameKey, PrecomputeRt>,
}

struct GroupRt {
    name: String,
    workers: Vec<Option<u64>>,
    wake: VecDeque<usize>,
    budget: Option<SimTime>,
    busy: SimTime,
    violations: u64,
    guests: u64,
}

struct Job {
    node: usize,
    group: usize,
    worker: usize,
    release: SimTime,
    start: SimTime,
    end: SimTime,
    kind: JobKind,
    path: PathChoice,
    stolen: bool,
    predicted: SimTime,
    msg: FrameMessage,
    residual: Option<FrameMessage>,
    handle: EventHandle,
}

pub(super) struct Simulator<'a> {
    sc: &'a Scenario,
    p: &'a Pipeline,
    cfg: &'a EngineConfig,
    seed: u64,
    cap: SimTime,
    kernel: Kernel<Ev>,
    nodes: Vec<NodeRt>,
    groups: Vec<GroupRt>,
    jobs: BTreeMap<u64, Job>,
    next_job: u64,
    streams: Vec<[RandomStream; 3]>,
    names: Vec<Arc<str>>,
    fast: Option<FastpathConfig>,
    ego: TrajectorySpec,
    braking: bool,
    epoch: u64,
    seen_frames: BTreeSet<FrameKey>,
    seen_objects: BTreeSet<(AgentId, SimTime)>,
    collisions: BTreeSet<AgentId>,
    min_gap: Option<f64>,
    capture_drops: u64,
    fastpath_jobs: u64,
    proactive_saved: SimTime,
    proactive_cancelled: u64,
    spans: Vec<Span>,
    captures: Vec<CaptureRecord>,
    frames: Vec<FrameRecord>,
    objects: Vec<ObjectRecord>,
    controls: Vec<ControlRecord>,
    safety: Vec<SafetySample>,
}

fn resolve_groups(p: &Pipeline, groups: &[ProcessorGroup]) -> Result<Vec<usize>> {
    let mut pinned: Vec<Option<usize>> = vec![None; p.nodes().len()];
    let mut names = BTreeSet::new();
    for (g, grp) in groups.iter().enumerate() {
        if !names.insert(grp.name.as_str()) {
            return Err(Error::Config(format!("duplicate group name `{}`", grp.name)));
        }
        if grp.workers == 0 {
            return Err(Error::Config(format!("group `{}` needs at least one worker", grp.name)));
        }
        for n in &grp.nodes {
            let i = p.node_index(n).ok_or_else(|| Error::MissingNode {
                group: grp.name.clone(),
                node: n.clone(),
            })?;
            if let Some(prev) = pinned[i] {
                return Err(Error::Config(format!(
                    "node `{n}` is pinned to both `{}` and `{}`",
                    groups[prev].name, grp.name
                )));
            }
            pinned[i] = Some(g);
        }
    }
    pinned
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.ok_or_else(|| Error::Unpinned(p.node(i).name.clone())))
        .collect()
}

fn scale(t: SimTime, factor: f64) -> SimTime {
    SimTime::from_micros((t.as_micros() as f64 * factor).ceil() as u64)
}

fn kinds(objects: &[ObjectEntry]) -> KindCounts {
    objects.iter().map(|o| o.kind).collect()
}

impl<'a> Simulator<'a> {
    pub(super) fn new(
        sc: &'a Scenario,
        p: &'a Pipeline,
        groups: &[ProcessorGroup],
        cfg: &'a EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        if cfg.tick_us == SimTime::ZERO {
            return Err(Error::Config("tick_us must be > 0".into()));
        }
        if !(cfg.brake_decel_mps2.is_finite() && cfg.brake_decel_mps2 > 0.0) {
            return Err(Error::Config("brake_decel_mps2 must be > 0".into()));
        }
        cfg.rss.validate().map_err(Error::Config)?;
        let m = &cfg.mitigation;
        m.validate().map_err(Error::Config)?;
        let pin = resolve_groups(p, groups)?;
        let fast = if m.fastpath {
            Some(FastpathConfig::resolve(p, m).map_err(Error::Config)?)
        } else {
            None
        };
        let mut proactive: Vec<Option<ProactiveSpec>> = vec![None; p.nodes().len()];
        if m.proactive {
            for spec in &m.proactive_tasks {
                let i = p
                    .node_index(&spec.node)
                    .ok_or_else(|| Error::Config(format!("proactive node `{}` does not exist", spec.node)))?;
                if p.input_channels(i).is_empty() {
                    return Err(Error::Config(format!("proactive node `{}` has no upstream input", spec.node)));
                }
                proactive[i] = Some(spec.clone());
            }
        }

        let nodes = p
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRt {
                group: pin[i],
                queues: p.input_channels(i).iter().map(|&c| ChannelQueue::new(p.channel(c).policy)).collect(),
                captures: VecDeque::new(),
                timer: None,
                next_fire: SimTime::ZERO,
                ticks: 0,
                last_input: None,
                residual: VecDeque::new(),
                running: 0,
                in_wake: false,
                tracker: (n.role == Role::Fusion).then(|| FusionTracker::new(p.fusion())),
                last_published: BTreeSet::new(),
                last_counts: KindCounts::default(),
                frames: 0,
                proactive: proactive[i].take(),
                tasks: BTreeMap::new(),
            })
            .collect();
        let groups = groups
            .iter()
            .map(|g| GroupRt {
                name: g.name.clone(),
                workers: vec![None; g.workers as usize],
                wake: VecDeque::new(),
                budget: g.budget_us,
                busy: SimTime::ZERO,
                violations: 0,
                guests: 0,
            })
            .collect();
        let streams = p
            .nodes()
            .iter()
            .map(|n| {
                ["normal", "fast", "residual"].map(|v| RandomStream::new(seed, format!("latency/{}/{v}", n.name)))
            })
            .collect();
        Ok(Simulator {
            sc,
            p,
            cfg,
            seed,
            cap: m.deadline_cap_us,
            kernel: Kernel::new(),
            nodes,
            groups,
            jobs: BTreeMap::new(),
            next_job: 0,
            streams,
            names: p.nodes().iter().map(|n| Arc::from(n.name.as_str())).collect(),
            fast,
            ego: TrajectorySpec::constant(sc.ego_initial),
            braking: false,
            epoch: 0,
            seen_frames: BTreeSet::new(),
            seen_objects: BTreeSet::new(),
            collisions: BTreeSet::new(),
            min_gap: None,
            capture_drops: 0,
            fastpath_jobs: 0,
            proactive_saved: SimTime::ZERO,
            proactive_cancelled: 0,
            spans: Vec::new(),
            captures: Vec::new(),
            frames: Vec::new(),
            objects: Vec::new(),
            controls: Vec::new(),
            safety: Vec::new(),
        })
    }

    pub(super) fn run(mut self) -> Result<RunTrace> {
        let horizon = self.sc.duration;
        for v in 0..self.p.nodes().len() {
            if let Pattern::Timing { phase_us, .. } = self.p.node(v).pattern {
                let ev = if self.p.node(v).role == Role::Sensor { Ev::Capture(v) } else { Ev::Timer(v) };
                self.nodes[v].next_fire = phase_us;
                if phase_us <= horizon {
                    self.kernel.schedule(phase_us, ev)?;
                }
            }
        }
        self.kernel.schedule(SimTime::ZERO, Ev::Tick)?;
        while let Some((t, ev)) = self.kernel.pop_until(horizon) {
            match ev {
                Ev::Capture(v) => self.on_capture(v, t)?,
                Ev::Timer(v) => self.on_timer(v, t)?,
                Ev::Done(j) => self.on_done(j, t)?,
                Ev::Tick => self.on_tick(t)?,
            }
            self.pump()?;
        }
        Ok(self.finish())
    }

    fn schedule_next(&mut self, v: usize, t: SimTime, ev: Ev) -> Result<()> {
        if let Pattern::Timing { period_us, .. } = self.p.node(v).pattern {
            let next = t.checked_add(period_us)?;
            self.nodes[v].next_fire = next;
            if next <= self.sc.duration {
                self.kernel.schedule(next, ev)?;
            }
        }
        Ok(())
    }

    fn object_entry(&self, ego: &AgentState, a: &VisibleAgent, t: SimTime) -> ObjectEntry {
        let rss = &self.cfg.rss;
        let slack = envelope_slack(ego, &a.state, a.kind, rss, self.sc.d_buffer, self.sc.lane_width);
        let budget = slack.map_or(Budget::Unbounded, |s| {
            reaction_budget(ego, &a.state, s, rss, self.cfg.budget_horizon_us).budget
        });
        ObjectEntry {
            id: a.id,
            kind: a.kind,
            state: a.state,
            distance_m: ego.distance_to(&a.state, self.sc.lane_width),
            deadline: t.saturating_add(budget.capped(self.cap)),
            budget,
            capture: t,
            module: SimTime::ZERO,
        }
    }

    fn on_capture(&mut self, v: usize, t: SimTime) -> Result<()> {
        let range = self.p.node(v).sensor_range_m.unwrap_or(DEFAULT_SENSOR_RANGE_M);
        let ego = self.ego.state_at(t);
        let objects: Vec<ObjectEntry> = self
            .sc
            .visible_agents_from(&ego, t, range)
            .iter()
            .map(|a| self.object_entry(&ego, a, t))
            .collect();
        let frame = self.nodes[v].frames;
        self.nodes[v].frames += 1;
        self.captures.push(CaptureRecord {
            sensor: self.p.node(v).name.clone(),
            frame,
            time: t,
            agents: objects.iter().map(|o| o.id).collect(),
        });
        let msg = FrameMessage {
            seq: frame,
            sensor: v,
            sensor_ts: t,
            created_ts: t,
            delivered_at: t,
            message_deadline: FrameMessage::earliest_deadline(&objects, t.saturating_add(self.cap)),
            objects,
            partial: false,
            provenance: self.names[v].clone(),
            module: SimTime::ZERO,
            hops: Vec::new(),
        };
        let node = &mut self.nodes[v];
        if node.captures.len() >= CAPTURE_BACKLOG {
            node.captures.pop_front();
            self.capture_drops += 1;
        }
        node.captures.push_back(msg);
        self.wake(v);
        self.schedule_next(v, t, Ev::Capture(v))
    }

    fn on_timer(&mut self, v: usize, t: SimTime) -> Result<()> {
        let node = &mut self.nodes[v];
        node.ticks += 1;
        // A timer with nothing to consume yet is skipped, not deferred.
        let has_input = node.last_input.is_some() || !node.queues[0].is_empty();
        if node.timer.is_none() && has_input {
            node.timer = Some(t);
        }
        self.wake(v);
        self.schedule_next(v, t, Ev::Timer(v))
    }

    fn on_tick(&mut self, t: SimTime) -> Result<()> {
        let ego = self.ego.state_at(t);
        let rss = &self.cfg.rss;
        let mut worst: Option<(AgentId, crate::safety::SafetyStatus)> = None;
        for a in &self.sc.agents {
            let st = a.trajectory.state_at(t);
            if st.s < ego.s {
                continue;
            }
            let status = check_safety(&ego, &st, a.kind, rss, self.sc.d_buffer, self.sc.lane_width);
            if status.kind == SafetyKind::Collision {
                self.collisions.insert(a.id);
            }
            if status.lateral_m < rss.lateral_mu_m {
                let g = status.longitudinal_m;
                self.min_gap = Some(self.min_gap.map_or(g, |m: f64| m.min(g)));
            }
            let worse = worst.as_ref().is_none_or(|(_, w)| {
                (status.kind, -status.longitudinal_m) > (w.kind, -w.longitudinal_m)
            });
            if worse {
                worst = Some((a.id, status));
            }
        }
        self.safety.push(match worst {
            Some((id, s)) => SafetySample {
                time: t,
                kind: s.kind,
                agent: Some(id),
                longitudinal_m: Some(s.longitudinal_m),
                lateral_m: Some(s.lateral_m),
            },
            None => SafetySample {
                time: t,
                kind: SafetyKind::Safe,
                agent: None,
                longitudinal_m: None,
                lateral_m: None,
            },
        });
        let next = t.checked_add(self.cfg.tick_us)?;
        if next <= self.sc.duration {
            self.kernel.schedule(next, Ev::Tick)?;
        }
        Ok(())
    }

    fn can_start(&self, v: usize) -> bool {
        let n = &self.nodes[v];
        let spec = self.p.node(v);
        if n.running >= spec.max_instances {
            return false;
        }
        if !n.residual.is_empty() {
            return true;
        }
        match (spec.role, spec.pattern) {
            (Role::Sensor, _) => !n.captures.is_empty(),
            (_, Pattern::Timing { .. }) => n.timer.is_some() && (!n.queues[0].is_empty() || n.last_input.is_some()),
            (_, Pattern::Interrupt) => !n.queues[0].is_empty(),
        }
    }

    fn pending_release(&self, v: usize) -> SimTime {
        let n = &self.nodes[v];
        let now = self.kernel.now();
        if let Some(m) = n.residual.front() {
            return m.delivered_at;
        }
        match (self.p.node(v).role, self.p.node(v).pattern) {
            (Role::Sensor, _) => n.captures.front().map_or(now, |m| m.sensor_ts),
            (_, Pattern::Timing { .. }) => n.timer.unwrap_or(now),
            (_, Pattern::Interrupt) => n.queues[0].front().map_or(now, |m| m.delivered_at),
        }
    }

    fn wake(&mut self, v: usize) {
        if !self.nodes[v].in_wake && self.can_start(v) {
            let g = self.nodes[v].group;
            self.groups[g].wake.push_back(v);
            self.nodes[v].in_wake = true;
        }
    }

    fn free_worker(&self, g: usize) -> Option<usize> {
        self.groups[g].workers.iter().position(Option::is_none)
    }

    /// Dispatches ready nodes onto free workers until nothing changes.
    fn pump(&mut self) -> Result<()> {
        loop {
            let mut progress = false;
            for g in 0..self.groups.len() {
                while let Some(w) = self.free_worker(g) {
                    let Some(v) = self.groups[g].wake.pop_front() else { break };
                    self.nodes[v].in_wake = false;
                    if self.can_start(v) {
                        self.start_job(v, g, w, false)?;
                        progress = true;
                        self.wake(v);
                    }
                }
            }
            if self.cfg.mitigation.stealing && self.try_steal()? {
                progress = true;
            }
            if !progress {
                return Ok(());
            }
        }
    }

    fn predict_node(&self, v: usize) -> SimTime {
        let n = self.p.node(v);
        predict_latency(&n.latency, &self.nodes[v].last_counts, n.lookahead_m)
    }

    fn host_state(&self, h: usize, guest_cost: SimTime) -> Option<HostState> {
        let grp = &self.groups[h];
        let budget = grp.budget?;
        let now = self.kernel.now();
        let sf = self.cfg.mitigation.safety_factor;
        let worker_free_at = grp
            .workers
            .iter()
            .map(|w| match w {
                None => now,
                Some(id) => {
                    let j = &self.jobs[id];
                    let end = j.start.saturating_add(scale(j.predicted, sf));
                    end.max(now + SimTime::from_micros(1))
                }
            })
            .collect();
        let pending = grp
            .wake
            .iter()
            .map(|&v| HostTask {
                release: self.pending_release(v),
                predicted_cost: self.predict_node(v),
            })
            .collect();
        let limit = now.saturating_add(scale(guest_cost, sf)).saturating_add(budget);
        let mut future = Vec::new();
        for v in 0..self.nodes.len() {
            if self.nodes[v].group != h {
                continue;
            }
            if let Pattern::Timing { period_us, .. } = self.p.node(v).pattern {
                let mut t = self.nodes[v].next_fire;
                while t <= limit && t <= self.sc.duration {
                    if t >= now {
                        future.push(HostTask {
                            release: t,
                            predicted_cost: self.predict_node(v),
                        });
                    }
                    t = t.saturating_add(period_us);
                }
            }
        }
        Some(HostState {
            now,
            budget,
            worker_free_at,
            pending,
            future,
        })
    }

    /// Moves one waiting nice-guest task onto an idle worker of another group
    /// if admission allows it.
    fn try_steal(&mut self) -> Result<bool> {
        for g in 0..self.groups.len() {
            if self.groups[g].wake.is_empty() || self.free_worker(g).is_some() {
                continue;
            }
            let Some(v) = self
                .groups[g]
                .wake
                .iter()
                .copied()
                .find(|&v| self.p.node(v).nice_guest && self.can_start(v))
            else {
                continue;
            };
            let counts = self.peek_counts(v);
            let spec = self.p.node(v);
            let req = StealRequest {
                guest: v,
                counts,
                host_group: 0,
                predicted_guest_cost: predict_latency(&spec.latency, &counts, spec.lookahead_m),
            };
            for h in 0..self.groups.len() {
                if h == g || self.free_worker(h).is_none() {
                    continue;
                }
                let Some(host) = self.host_state(h, req.predicted_guest_cost) else { continue };
                let req = StealRequest { host_group: h, ..req.clone() };
                if let Admission::Admit { worker } = steal_admission(&req, &host, self.cfg.mitigation.safety_factor) {
                    if self.groups[h].workers[worker].is_some() {
                        continue;
                    }
                    self.groups[g].wake.retain(|&x| x != v);
                    self.nodes[v].in_wake = false;
                    self.start_job(v, h, worker, true)?;
                    self.groups[h].guests += 1;
                    self.wake(v);
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Object counts of the input the node would consume next.
    fn peek_counts(&self, v: usize) -> KindCounts {
        let n = &self.nodes[v];
        let msg = n
            .residual
            .front()
            .or_else(|| n.captures.front())
            .or_else(|| match self.p.node(v).pattern {
                Pattern::Timing { .. } => n.queues.first().and_then(|q| q.peek_latest()).or(n.last_input.as_ref()),
                Pattern::Interrupt => n.queues.first().and_then(|q| q.front()),
            });
        msg.map_or(n.last_counts, |m| kinds(&m.objects))
    }

    /// Takes the next input. Returns the message, its release time, the job
    /// kind and whether the primary input is fresh.
    fn take_input(&mut self, v: usize) -> (FrameMessage, SimTime, JobKind, bool) {
        let spec = self.p.node(v);
        let node = &mut self.nodes[v];
        if let Some(m) = node.residual.pop_front() {
            let r = m.delivered_at;
            return (m, r, JobKind::Residual, false);
        }
        match (spec.role, spec.pattern) {
            (Role::Sensor, _) => {
                let m = node.captures.pop_front().expect("can_start checked");
                let r = m.sensor_ts;
                (m, r, JobKind::Normal, true)
            }
            (_, Pattern::Timing { .. }) => {
                let release = node.timer.take().expect("can_start checked");
                match node.queues[0].take_latest() {
                    Some(m) => {
                        node.last_input = Some(m.clone());
                        (m, release, JobKind::Normal, true)
                    }
                    None => (node.last_input.clone().expect("can_start checked"), release, JobKind::Normal, false),
                }
            }
            (_, Pattern::Interrupt) => {
                let m = node.queues[0].pop().expect("can_start checked");
                let r = m.delivered_at;
                (m, r, JobKind::Normal, true)
            }
        }
    }

    /// Adds the newest objects of the secondary inputs; per agent the entry
    /// from the most recent capture wins, the primary input on ties.
    fn merge_secondary(&self, v: usize, msg: &mut FrameMessage) {
        let node = &self.nodes[v];
        if node.queues.len() < 2 {
            return;
        }
        let mut by_id: BTreeMap<AgentId, ObjectEntry> = BTreeMap::new();
        for o in msg.objects.drain(..) {
            by_id.insert(o.id, o);
        }
        for q in &node.queues[1..] {
            if let Some(m) = q.peek_latest() {
                for o in &m.objects {
                    match by_id.get(&o.id) {
                        Some(cur) if cur.capture >= o.capture => {}
                        _ => {
                            by_id.insert(o.id, o.clone());
                        }
                    }
                }
            }
        }
        msg.objects = by_id.into_values().collect();
    }

    fn start_job(&mut self, v: usize, group: usize, worker: usize, stolen: bool) -> Result<()> {
        let now = self.kernel.now();
        let spec = self.p.node(v);
        let (mut msg, release, mut kind, fresh) = self.take_input(v);
        self.merge_secondary(v, &mut msg);

        if kind == JobKind::Normal {
            if let Some(tracker) = self.nodes[v].tracker.as_mut() {
                if fresh {
                    let ids: BTreeSet<AgentId> = msg.objects.iter().map(|o| o.id).collect();
                    self.nodes[v].last_published = tracker.update(&ids).into_iter().collect();
                }
                let published = &self.nodes[v].last_published;
                msg.objects.retain(|o| published.contains(&o.id));
            }
        }

        let mut counts = kinds(&msg.objects);
        let mut model = &spec.latency;
        let mut lookahead = spec.lookahead_m;
        let mut variant = if kind == JobKind::Residual { 2 } else { 0 };
        let mut path = PathChoice::Normal;
        let mut residual = None;
        if let (JobKind::Normal, Some(fast), Some(fast_model)) = (kind, &self.fast, &spec.fast_latency) {
            if fast.is_enabled(v) {
                let normal = predict_latency(&spec.latency, &counts, spec.lookahead_m);
                let downstream = fast.downstream_estimate(self.p, v, &counts);
                if choose_path(normal, msg.message_deadline, now, downstream) == PathChoice::Fastpath {
                    path = PathChoice::Fastpath;
                    model = fast_model;
                    variant = 1;
                    self.fastpath_jobs += 1;
                    if spec.role == Role::Prediction {
                        let fallback = msg.sensor_ts.saturating_add(self.cap);
                        let (critical, rest) = partial_update(&msg, fast.criticality_radius, fallback);
                        msg = critical;
                        residual = Some(rest);
                        kind = JobKind::Critical;
                        counts = kinds(&msg.objects);
                    } else {
                        lookahead = lookahead.map(|_| fast.fast_lookahead);
                    }
                }
            }
        }
        self.nodes[v].last_counts = counts;

        let predicted = predict_latency(model, &counts, lookahead);
        let draw = match (spec.role, spec.pattern) {
            (Role::Sensor, _) | (_, Pattern::Interrupt) => msg.seq * 64 + (msg.sensor as u64 % 64),
            (_, Pattern::Timing { .. }) => self.nodes[v].ticks,
        };
        let payload = self.cfg.payload_base_bytes + self.cfg.payload_bytes_per_object * msg.objects.len() as u64;
        let mut latency = sample_latency(model, &counts, lookahead, payload, &self.streams[v][variant], draw);

        if fresh && kind != JobKind::Residual && self.nodes[v].proactive.is_some() {
            let saving = self.consume_precompute(v, (msg.sensor, msg.seq), now)?;
            latency = latency.saturating_sub(saving);
            self.proactive_saved = self.proactive_saved.saturating_add(saving);
        }

        let end = now.checked_add(latency)?;
        let id = self.next_job;
        self.next_job += 1;
        let handle = self.kernel.schedule(end, Ev::Done(id))?;
        self.groups[group].workers[worker] = Some(id);
        self.nodes[v].running += 1;
        self.jobs.insert(
            id,
            Job {
                node: v,
                group,
                worker,
                release,
                start: now,
                end,
                kind,
                path,
                stolen,
                predicted,
                msg,
                residual,
                handle,
            },
        );
        Ok(())
    }

    /// Saving from the precomputation tied to `key`, cancelling it first when
    /// the policy says so. Older tasks of the same node are discarded.
    fn consume_precompute(&mut self, v: usize, key: FrameKey, now: SimTime) -> Result<SimTime> {
        let policy = self.nodes[v].proactive.as_ref().map_or(CancelPolicy::Never, |p| p.cancel);
        let stale: Vec<FrameKey> = self.nodes[v].tasks.range(..key).map(|(k, _)| *k).collect();
        for k in stale {
            if let Some(rt) = self.nodes[v].tasks.remove(&k) {
                if let Some(job) = rt.job {
                    self.stop_precompute(job, now);
                }
            }
        }
        let Some(mut rt) = self.nodes[v].tasks.remove(&key) else {
            return Ok(SimTime::ZERO);
        };
        let cancel = match policy {
            CancelPolicy::Never => false,
            CancelPolicy::Always => true,
            CancelPolicy::OnDecisionChange => rt.epoch != self.epoch,
        };
        if cancel {
            rt.task.cancel();
            self.proactive_cancelled += 1;
        }
        let saving = rt.task.saving_at(now);
        if let Some(job) = rt.job {
            self.stop_precompute(job, now);
        }
        Ok(saving)
    }

    /// Ends a running precomputation early and releases its worker.
    fn stop_precompute(&mut self, id: u64, now: SimTime) {
        if let Some(mut j) = self.jobs.remove(&id) {
            self.kernel.cancel(j.handle);
            j.end = now;
            self.release_worker(&j);
            self.push_span(&j);
        }
    }

    fn on_arrival(&mut self, v: usize, msg: &FrameMessage, now: SimTime) -> Result<()> {
        let Some(spec) = self.nodes[v].proactive.clone() else {
            return Ok(());
        };
        let key = (msg.sensor, msg.seq);
        let channel = self.p.input_channels(v)[0];
        let task = ProactiveTask::new(v, spec.precompute_cost_us, channel, now);
        let mut job = None;
        if !spec.dedicated_worker {
            let g = self.nodes[v].group;
            let Some(w) = self.free_worker(g) else {
                return Ok(());
            };
            let id = self.next_job;
            self.next_job += 1;
            let end = now.checked_add(spec.precompute_cost_us)?;
            let handle = self.kernel.schedule(end, Ev::Done(id))?;
            self.groups[g].workers[w] = Some(id);
            self.jobs.insert(
                id,
                Job {
                    node: v,
                    group: g,
                    worker: w,
                    release: now,
                    start: now,
                    end,
                    kind: JobKind::Precompute,
                    path: PathChoice::Normal,
                    stolen: false,
                    predicted: spec.precompute_cost_us,
                    msg: msg.clone(),
                    residual: None,
                    handle,
                },
            );
            job = Some(id);
        }
        if let Some(old) = self.nodes[v].tasks.insert(key, PrecomputeRt { task, epoch: self.epoch, job }) {
            if let Some(j) = old.job {
                self.stop_precompute(j, now);
            }
        }
        Ok(())
    }

    fn release_worker(&mut self, j: &Job) {
        self.groups[j.group].workers[j.worker] = None;
        let busy = j.end.saturating_sub(j.start);
        self.groups[j.group].busy = self.groups[j.group].busy.saturating_add(busy);
    }

    fn push_span(&mut self, j: &Job) {
        let g = &self.groups[j.group];
        self.spans.push(Span {
            node: self.p.node(j.node).name.clone(),
            sensor: self.p.node(j.msg.sensor).name.clone(),
            frame: j.msg.seq,
            release: j.release,
            start: j.start,
            end: j.end,
            worker: format!("{}/{}", g.name, j.worker),
            path: j.path,
            kind: j.kind,
            stolen: j.stolen,
            objects: j.msg.objects.len() as u32,
        });
    }

    fn on_done(&mut self, id: u64, now: SimTime) -> Result<()> {
        let Some(j) = self.jobs.remove(&id) else {
            return Ok(());
        };
        self.release_worker(&j);
        self.push_span(&j);
        let v = j.node;
        if j.kind == JobKind::Precompute {
            for rt in self.nodes[v].tasks.values_mut() {
                if rt.job == Some(id) {
                    rt.job = None;
                    rt.task.status = crate::mitigation::ProactiveStatus::Done;
                }
            }
            return Ok(());
        }
        self.nodes[v].running -= 1;
        let own = self.nodes[v].group;
        if let Some(b) = self.groups[own].budget {
            if now.saturating_sub(j.release) > b {
                self.groups[own].violations += 1;
            }
        }

        let dur = j.end - j.start;
        let mut out = j.msg;
        for o in &mut out.objects {
            o.module = o.module.saturating_add(dur);
        }
        out.module = out.module.saturating_add(dur);
        out.hops.push(Hop { node: v, path: j.path });
        out.created_ts = now;
        out.delivered_at = now;
        out.provenance = self.names[v].clone();
        out.partial |= matches!(j.kind, JobKind::Critical | JobKind::Residual);
        let fallback = out.sensor_ts.saturating_add(self.cap);
        out.message_deadline = FrameMessage::earliest_deadline(&out.objects, fallback);

        if let Some(mut r) = j.residual {
            r.delivered_at = now;
            self.nodes[v].residual.push_back(r);
        }

        if self.p.node(v).role == Role::Control {
            self.on_control_output(&out, now);
        } else {
            let forward = j.kind != JobKind::Residual || out.objects.iter().any(|o| o.deadline < fallback);
            if forward {
                for &c in self.p.output_channels(v) {
                    for k in self.p.consumers(c).to_vec() {
                        self.nodes[k.node].queues[k.slot].push(out.clone());
                        if k.slot == 0 {
                            self.on_arrival(k.node, &out, now)?;
                        }
                        self.wake(k.node);
                    }
                }
            }
        }
        self.wake(v);
        Ok(())
    }

    fn path_names(&self, hops: &[Hop]) -> Vec<NodePath> {
        hops.iter()
            .map(|h| NodePath {
                node: self.p.node(h.node).name.clone(),
                path: h.path,
            })
            .collect()
    }

    fn on_control_output(&mut self, out: &FrameMessage, now: SimTime) {
        let path = self.path_names(&out.hops);
        if self.seen_frames.insert((out.sensor, out.seq)) {
            let e2e = now - out.sensor_ts;
            self.frames.push(FrameRecord {
                sensor: self.p.node(out.sensor).name.clone(),
                frame: out.seq,
                capture: out.sensor_ts,
                completed: now,
                e2e,
                module: out.module,
                bubble: e2e - out.module,
                partial: out.partial,
                path: path.clone(),
            });
        }
        let radius = self.cfg.mitigation.radius_m;
        for o in &out.objects {
            if self.seen_objects.insert((o.id, o.capture)) {
                self.objects.push(ObjectRecord {
                    agent: o.id,
                    kind: o.kind,
                    capture: o.capture,
                    completed: now,
                    latency: now - o.capture,
                    module: o.module,
                    deadline: o.deadline,
                    distance_m: o.distance_m,
                    in_radius: o.distance_m <= radius,
                    path: path.clone(),
                });
            }
        }
        if self.braking {
            return;
        }
        let margin = self.cfg.brake_margin_us;
        let urgent = out.objects.iter().any(|o| match o.budget {
            Budget::Bounded(b) => b.saturating_sub(now - o.capture) < margin,
            Budget::Unbounded => false,
        });
        if urgent {
            let decision = Decision::Brake {
                accel_mps2: -self.cfg.brake_decel_mps2,
            };
            let delay = self.cfg.actuation_delay_us;
            self.ego = apply_control(&self.ego, decision, now, delay);
            self.braking = true;
            self.epoch += 1;
            self.controls.push(ControlRecord {
                decided_at: now,
                effective_at: now.saturating_add(delay),
                decision,
            });
        }
    }

    fn finish(self) -> RunTrace {
        let dropped: u64 = self
            .nodes
            .iter()
            .flat_map(|n| n.queues.iter().map(ChannelQueue::dropped))
            .sum::<u64>()
            + self.capture_drops;
        let frames_captured = self.nodes.iter().map(|n| n.frames).sum();
        let summary = RunSummary {
            duration_us: self.sc.duration,
            frames_captured,
            frames_completed: self.frames.len() as u64,
            violation_ticks: self.safety.iter().filter(|s| s.kind == SafetyKind::Violation).count() as u64,
            collisions: self.collisions.iter().copied().collect(),
            min_gap_m: self.min_gap,
            groups: self
                .groups
                .iter()
                .map(|g| GroupUsage {
                    name: g.name.clone(),
                    workers: g.workers.len() as u32,
                    busy_us: g.busy,
                    budget_violations: g.violations,
                    guest_jobs: g.guests,
                })
                .collect(),
            fastpath_jobs: self.fastpath_jobs,
            proactive_saved_us: self.proactive_saved,
            proactive_cancelled: self.proactive_cancelled,
            dropped_messages: dropped,
        };
        RunTrace {
            header: TraceHeader {
                format: TRACE_FORMAT,
                scenario: self.sc.name.clone(),
                scenario_hash: scenario_hash(self.sc),
                seed: self.seed,
                duration_us: self.sc.duration,
                label: String::new(),
            },
            spans: self.spans,
            captures: self.captures,
            frames: self.frames,
            objects: self.objects,
            controls: self.controls,
            safety: self.safety,
            reactions: Vec::new(),
            summary,
        }
    }
}
