use cola_sim::engine::{dedicated_groups, run_simulation, EngineConfig, JobKind, ProcessorGroup, RunTrace};
use cola_sim::pipeline::{
    validate_graph, ChannelSpec, LatencyModel, Noise, NodeSpec, Pattern, PerKindCost, Pipeline, PipelineGraph, Role,
};
use cola_sim::scenario::{Agent, AgentId, AgentKind, AgentState, Hazard, Scenario, TrajectorySpec};
use cola_sim::{Error, SimTime};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn sensor() -> NodeSpec {
    NodeSpec::new("cam", Role::Sensor, Pattern::timing(ms(100)), LatencyModel::fixed(SimTime::ZERO)).outputs(&["raw"])
}

/// cam -> stages... -> ctl, every stage interrupt-driven.
fn chain(stages: &[(&str, LatencyModel)], capacity: usize) -> Pipeline {
    let mut nodes = vec![sensor()];
    let mut channels = vec![ChannelSpec::fifo("raw", capacity)];
    let mut prev = "raw".to_string();
    for (name, model) in stages {
        let out = format!("{name}_out");
        nodes.push(
            NodeSpec::new(name, Role::Perception, Pattern::Interrupt, model.clone())
                .inputs(&[&prev])
                .outputs(&[&out]),
        );
        channels.push(ChannelSpec::fifo(&out, capacity));
        prev = out;
    }
    nodes.push(NodeSpec::new("ctl", Role::Control, Pattern::Interrupt, LatencyModel::fixed(SimTime::ZERO)).inputs(&[&prev]).outputs(&["act"]));
    channels.push(ChannelSpec::fifo("act", 1));
    validate_graph(&PipelineGraph {
        nodes,
        channels,
        ..Default::default()
    })
    .unwrap()
}

fn lead_scenario(duration: SimTime) -> Scenario {
    let mut sc = Scenario::new("lead", AgentState::new(0.0, 10.0, 0.0, 1), duration);
    sc.agents.push(Agent {
        id: AgentId(1),
        kind: AgentKind::Vehicle,
        trajectory: TrajectorySpec::constant(AgentState::new(60.0, 10.0, 0.0, 1)),
    });
    sc
}

fn run(sc: &Scenario, p: &Pipeline) -> RunTrace {
    run_simulation(sc, p, &dedicated_groups(p), &EngineConfig::default(), 7).unwrap()
}

fn spans_of<'a>(t: &'a RunTrace, node: &'a str) -> impl Iterator<Item = &'a cola_sim::engine::Span> + 'a {
    t.spans.iter().filter(move |s| s.node == node)
}

#[test]
fn sensor_captures_on_its_period() {
    let p = chain(&[("det", LatencyModel::fixed(ms(10)))], 4);
    let t = run(&lead_scenario(ms(450)), &p);
    let times: Vec<u64> = t.captures.iter().map(|c| c.time.as_millis()).collect();
    assert_eq!(times, [0, 100, 200, 300, 400]);
}

#[test]
fn uncontended_interrupt_node() {
    let p = chain(&[("det", LatencyModel::fixed(ms(30)))], 4);
    let t = run(&lead_scenario(ms(250)), &p);
    let s = spans_of(&t, "det").find(|s| s.frame == 1).unwrap();
    assert_eq!((s.start, s.end), (ms(100), ms(130)));
    assert_eq!(t.frames[1].completed, ms(130));
}

#[test]
fn fifo_queueing_hand_trace() {
    let p = chain(&[("det", LatencyModel::fixed(ms(150)))], 8);
    let t = run(&lead_scenario(ms(500)), &p);
    let got: Vec<(u64, u64, u64, u64)> = t
        .frames
        .iter()
        .take(3)
        .map(|f| (f.completed.as_millis(), f.e2e.as_millis(), f.module.as_millis(), f.bubble.as_millis()))
        .collect();
    assert_eq!(got, [(150, 150, 150, 0), (300, 200, 150, 50), (450, 250, 150, 100)]);
}

#[test]
fn sensor_wait_is_time_to_next_capture() {
    let p = chain(&[("det", LatencyModel::fixed(ms(20)))], 4);
    let mut sc = lead_scenario(ms(500));
    sc.hazards.push(Hazard {
        time: ms(35),
        agent: AgentId(1),
        label: "lead".into(),
    });
    let t = run(&sc, &p);
    let r = t.reactions[0].reaction.as_ref().unwrap();
    assert_eq!(r.t_sensor, ms(65));
    assert_eq!((r.t_module, r.t_bubble), (ms(20), SimTime::ZERO));
    assert_eq!(r.decision_time, ms(120));
}

#[test]
fn idle_chain_has_no_bubble() {
    let p = chain(
        &[
            ("a", LatencyModel::fixed(ms(20))),
            ("b", LatencyModel::fixed(ms(30))),
            ("c", LatencyModel::fixed(ms(40))),
        ],
        4,
    );
    let mut sc = lead_scenario(ms(500));
    sc.hazards.push(Hazard {
        time: ms(100),
        agent: AgentId(1),
        label: "lead".into(),
    });
    let t = run(&sc, &p);
    let r = t.reactions[0].reaction.as_ref().unwrap();
    assert_eq!((r.t_sensor, r.t_module, r.t_bubble), (SimTime::ZERO, ms(90), SimTime::ZERO));
    assert!(t.frames.iter().all(|f| f.e2e == ms(90) && f.bubble == SimTime::ZERO));
}

#[test]
fn hazard_without_reaction_is_marked() {
    let p = chain(&[("det", LatencyModel::fixed(ms(20)))], 4);
    let mut sc = lead_scenario(ms(300));
    sc.hazards.push(Hazard {
        time: ms(290),
        agent: AgentId(1),
        label: "late".into(),
    });
    let t = run(&sc, &p);
    assert!(t.reactions[0].reaction.is_none());
}

#[test]
fn timing_node_consumes_latest_input() {
    let mut nodes = vec![sensor()];
    nodes.push(
        NodeSpec::new("plan", Role::Planning, Pattern::Timing { period_us: ms(250), phase_us: ms(10) }, LatencyModel::fixed(ms(10)))
            .inputs(&["raw"])
            .outputs(&["cmd"]),
    );
    nodes.push(NodeSpec::new("ctl", Role::Control, Pattern::Interrupt, LatencyModel::fixed(SimTime::ZERO)).inputs(&["cmd"]).outputs(&["act"]));
    let p = validate_graph(&PipelineGraph {
        nodes,
        channels: vec![ChannelSpec::latest("raw"), ChannelSpec::fifo("cmd", 4), ChannelSpec::fifo("act", 1)],
        ..Default::default()
    })
    .unwrap();
    let t = run(&lead_scenario(ms(800)), &p);
    let frames: Vec<(u64, u64)> = spans_of(&t, "plan").map(|s| (s.start.as_millis(), s.frame)).collect();
    assert_eq!(frames, [(10, 0), (260, 2), (510, 5), (760, 7)]);
}

#[test]
fn pinning_errors() {
    let p = chain(&[("det", LatencyModel::fixed(ms(20)))], 4);
    let sc = lead_scenario(ms(100));
    let cfg = EngineConfig::default();
    let groups = [ProcessorGroup::new("g", 1, &["cam", "det"])];
    assert!(matches!(run_simulation(&sc, &p, &groups, &cfg, 1), Err(Error::Unpinned(n)) if n == "ctl"));
    let groups = [ProcessorGroup::new("g", 1, &["cam", "det", "ctl", "ghost"])];
    assert!(matches!(run_simulation(&sc, &p, &groups, &cfg, 1), Err(Error::MissingNode { .. })));
    let bad = EngineConfig {
        tick_us: SimTime::ZERO,
        ..Default::default()
    };
    assert!(matches!(run_simulation(&sc, &p, &dedicated_groups(&p), &bad, 1), Err(Error::Config(_))));
}

#[test]
fn control_output_brakes_the_ego() {
    let p = chain(&[("det", LatencyModel::fixed(ms(20)))], 4);
    let mut sc = Scenario::new("stop", AgentState::new(0.0, 15.0, 0.0, 1), SimTime::from_secs(6));
    sc.agents.push(Agent {
        id: AgentId(1),
        kind: AgentKind::Vehicle,
        trajectory: TrajectorySpec::constant(AgentState::new(30.0, 15.0, 0.0, 1)).with_segment(ms(1000), -8.0),
    });
    let t = run(&sc, &p);
    let c = t.controls.first().expect("a brake decision");
    assert!(c.decided_at > ms(1000));
    assert_eq!(c.effective_at, c.decided_at + ms(20));
    assert!(t.summary.collisions.is_empty());
}

fn noisy_pipeline(sigma: f64) -> Pipeline {
    let per = PerKindCost::uniform(SimTime::from_micros(800));
    chain(
        &[
            ("det", LatencyModel::linear(per, ms(40)).with_noise(Noise::Lognormal { sigma })),
            ("pred", LatencyModel::linear(per, ms(20)).with_noise(Noise::Lognormal { sigma })),
            ("plan", LatencyModel::fixed(ms(35)).with_noise(Noise::Uniform { jitter_us: 5_000 })),
        ],
        3,
    )
}

fn busy_scenario(agents: u32) -> Scenario {
    let mut sc = Scenario::new("busy", AgentState::new(0.0, 10.0, 0.0, 1), SimTime::from_secs(5));
    for i in 0..agents {
        sc.agents.push(Agent {
            id: AgentId(i + 1),
            kind: AgentKind::ALL[i as usize % 3],
            trajectory: TrajectorySpec::constant(AgentState::new(15.0 + 7.0 * i as f64, 9.0, 0.0, (i % 3) as i32)),
        });
        sc.hazards.push(Hazard {
            time: SimTime::from_millis(37 * i as u64 + 5),
            agent: AgentId(i + 1),
            label: format!("h{i}"),
        });
    }
    sc
}

#[test]
fn trace_round_trips_and_is_deterministic() {
    let p = noisy_pipeline(0.4);
    let sc = busy_scenario(8);
    let a = run(&sc, &p).to_ndjson();
    let b = run(&sc, &p).to_ndjson();
    assert_eq!(a, b);
    let back = RunTrace::read_ndjson(a.as_bytes(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back.to_ndjson(), a);
}

fn check_invariants(t: &RunTrace) {
    for r in t.reaction_records() {
        assert_eq!(r.reaction_time(), r.t_sensor + r.t_module + r.t_bubble);
    }
    for f in &t.frames {
        assert_eq!(f.e2e, f.module + f.bubble);
    }
    let mut by_worker: BTreeMap<&str, Vec<(SimTime, SimTime)>> = BTreeMap::new();
    for s in &t.spans {
        assert!(s.release <= s.start && s.start <= s.end);
        by_worker.entry(&s.worker).or_default().push((s.start, s.end));
    }
    for spans in by_worker.values_mut() {
        spans.sort();
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "overlap on one worker: {w:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reaction_identity_and_worker_exclusivity(seed in any::<u64>(), agents in 0u32..10, sigma in 0.0f64..0.8) {
        let p = noisy_pipeline(sigma);
        let t = run_simulation(&busy_scenario(agents), &p, &dedicated_groups(&p), &EngineConfig::default(), seed).unwrap();
        check_invariants(&t);
    }

    #[test]
    fn more_workers_never_slow_a_frame(seed in any::<u64>(), agents in 0u32..10) {
        let p = chain(
            &[
                ("det", LatencyModel::linear(PerKindCost::uniform(ms(4)), ms(40)).with_noise(Noise::Lognormal { sigma: 0.3 })),
                ("pred", LatencyModel::linear(PerKindCost::uniform(ms(2)), ms(30))),
                ("plan", LatencyModel::fixed(ms(45)).with_noise(Noise::Lognormal { sigma: 0.2 })),
            ],
            1000,
        );
        let names = ["cam", "det", "pred", "plan", "ctl"];
        let sc = busy_scenario(agents);
        let cfg = EngineConfig::default();
        let one = run_simulation(&sc, &p, &[ProcessorGroup::new("all", 1, &names)], &cfg, seed).unwrap();
        let two = run_simulation(&sc, &p, &[ProcessorGroup::new("all", 2, &names)], &cfg, seed).unwrap();
        let slow: BTreeMap<u64, SimTime> = one.frames.iter().map(|f| (f.frame, f.e2e)).collect();
        for f in &two.frames {
            if let Some(&e) = slow.get(&f.frame) {
                prop_assert!(f.e2e <= e, "frame {} took {} with 2 workers vs {}", f.frame, f.e2e, e);
            }
        }
        prop_assert!(two.frames.len() >= one.frames.len());
    }

    #[test]
    fn noiseless_chain_latency_is_sum_of_offsets(a in 1u64..60, b in 1u64..60, c in 1u64..60) {
        let p = chain(
            &[("a", LatencyModel::fixed(ms(a))), ("b", LatencyModel::fixed(ms(b))), ("c", LatencyModel::fixed(ms(c)))],
            4,
        );
        let t = run(&lead_scenario(SimTime::from_secs(1)), &p);
        prop_assert!(t.frames.iter().all(|f| f.e2e == ms(a + b + c)));
        prop_assert!(t.spans.iter().all(|s| s.kind == JobKind::Normal));
    }
}
