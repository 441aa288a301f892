//! Reference pipelines and small hand-traceable fixtures shared by tests,
//! benches and the bundled example files.

use crate::engine::{EngineConfig, ProcessorGroup};
use crate::mitigation::{CancelPolicy, MitigationConfig, ProactiveSpec};
use crate::pipeline::{
    validate_graph, ChannelSpec, FusionSpec, LatencyModel, Noise, NodeSpec, Pattern, PerKindCost,
    Pipeline, PipelineGraph, Role,
};
use crate::scenario::{Agent, AgentId, AgentKind, AgentState, Scenario, TrajectorySpec};
use crate::simkernel::SimTime;

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn us(v: u64) -> SimTime {
    SimTime::from_micros(v)
}

fn per_kind(vehicle: u64, pedestrian: u64, cyclist: u64) -> PerKindCost {
    PerKindCost {
        vehicle: us(vehicle),
        pedestrian: us(pedestrian),
        cyclist: us(cyclist),
    }
}

fn build(nodes: Vec<NodeSpec>, channels: Vec<ChannelSpec>, fusion: FusionSpec) -> PipelineGraph {
    PipelineGraph { nodes, channels, fusion }
}

/// Validates a fixture graph; fixtures are valid by construction.
pub fn pipeline(g: &PipelineGraph) -> Pipeline {
    validate_graph(g).expect("fixture graphs are valid")
}

/// Camera -> perception -> tracker -> prediction -> planning -> control.
/// Planning runs on a 10 Hz timer; prediction and planning have fast variants.
pub fn reference_graph() -> PipelineGraph {
    let nodes = vec![
        NodeSpec::new("camera", Role::Sensor, Pattern::timing(ms(100)), LatencyModel::fixed(ms(2)))
            .outputs(&["images"])
            .range(100.0),
        NodeSpec::new(
            "perception",
            Role::Perception,
            Pattern::Interrupt,
            LatencyModel::linear(per_kind(600, 400, 500), ms(25)).with_noise(Noise::Lognormal { sigma: 0.2 }),
        )
        .inputs(&["images"])
        .outputs(&["detections"])
        .nice_guest(),
        NodeSpec::new(
            "tracker",
            Role::Fusion,
            Pattern::Interrupt,
            LatencyModel::linear(PerKindCost::uniform(us(100)), ms(3)),
        )
        .inputs(&["detections"])
        .outputs(&["tracks"]),
        NodeSpec::new(
            "prediction",
            Role::Prediction,
            Pattern::Interrupt,
            LatencyModel::linear(PerKindCost::uniform(us(500)), ms(10)).with_noise(Noise::Lognormal { sigma: 0.3 }),
        )
        .inputs(&["tracks"])
        .outputs(&["trajectories"])
        .fast(LatencyModel::linear(PerKindCost::uniform(us(200)), ms(3))),
        NodeSpec::new(
            "planning",
            Role::Planning,
            Pattern::Timing {
                period_us: ms(100),
                phase_us: ms(60),
            },
            LatencyModel::linear(PerKindCost::uniform(us(200)), ms(20))
                .with_lookahead_cost(200.0)
                .with_noise(Noise::Uniform { jitter_us: 4_000 }),
        )
        .inputs(&["trajectories"])
        .outputs(&["commands"])
        .fast(LatencyModel::linear(PerKindCost::uniform(us(100)), ms(12)).with_lookahead_cost(200.0))
        .lookahead(100.0),
        NodeSpec::new("control", Role::Control, Pattern::Interrupt, LatencyModel::fixed(ms(2)))
            .inputs(&["commands"])
            .outputs(&["actuation"]),
    ];
    let channels = vec![
        ChannelSpec::fifo("images", 2),
        ChannelSpec::fifo("detections", 2),
        ChannelSpec::fifo("tracks", 2),
        ChannelSpec::latest("trajectories"),
        ChannelSpec::fifo("commands", 2),
        ChannelSpec::fifo("actuation", 1),
    ];
    build(nodes, channels, FusionSpec { a: 2, n: 3 })
}

pub fn reference_groups() -> Vec<ProcessorGroup> {
    vec![
        ProcessorGroup::new("sensing", 1, &["camera"]),
        ProcessorGroup::new("perception", 1, &["perception", "tracker"]),
        ProcessorGroup::new("planning", 2, &["prediction", "planning"]).budget(ms(100)),
        ProcessorGroup::new("control", 1, &["control"]),
    ]
}

/// Every mitigation on: fastpath, proactive planning and work stealing.
pub fn all_mitigations() -> MitigationConfig {
    MitigationConfig {
        proactive_tasks: vec![ProactiveSpec {
            node: "planning".into(),
            precompute_cost_us: ms(6),
            cancel: CancelPolicy::OnDecisionChange,
            dedicated_worker: true,
        }],
        ..MitigationConfig::default().all()
    }
}

/// Camera at 10 Hz -> one 150 ms interrupt node behind a FIFO -> control.
pub fn queueing_graph() -> PipelineGraph {
    let nodes = vec![
        NodeSpec::new("camera", Role::Sensor, Pattern::timing(ms(100)), LatencyModel::fixed(SimTime::ZERO))
            .outputs(&["frames"]),
        NodeSpec::new("detector", Role::Perception, Pattern::Interrupt, LatencyModel::fixed(ms(150)))
            .inputs(&["frames"])
            .outputs(&["objects"]),
        NodeSpec::new("control", Role::Control, Pattern::Interrupt, LatencyModel::fixed(SimTime::ZERO))
            .inputs(&["objects"])
            .outputs(&["actuation"]),
    ];
    let channels = vec![
        ChannelSpec::fifo("frames", 8),
        ChannelSpec::fifo("objects", 8),
        ChannelSpec::fifo("actuation", 1),
    ];
    build(nodes, channels, FusionSpec::default())
}

/// Ego at 10 m/s with a lead vehicle 60 m ahead at the same speed.
pub fn cruise_scenario(duration: SimTime) -> Scenario {
    let mut sc = Scenario::new("cruise", AgentState::new(0.0, 10.0, 0.0, 1), duration);
    sc.agents.push(Agent {
        id: AgentId(1),
        kind: AgentKind::Vehicle,
        trajectory: TrajectorySpec::constant(AgentState::new(60.0, 10.0, 0.0, 1)),
    });
    sc
}

/// Fully interrupt-driven chain with a noisy perception stage and fast
/// variants of prediction and planning whose predictions fit a 125 ms cap.
pub fn deadline_graph() -> PipelineGraph {
    let nodes = vec![
        NodeSpec::new("camera", Role::Sensor, Pattern::timing(ms(100)), LatencyModel::fixed(SimTime::ZERO))
            .outputs(&["images"])
            .range(100.0),
        NodeSpec::new(
            "perception",
            Role::Perception,
            Pattern::Interrupt,
            LatencyModel::linear(PerKindCost::uniform(ms(2)), ms(25)).with_noise(Noise::Lognormal { sigma: 0.2 }),
        )
        .inputs(&["images"])
        .outputs(&["detections"]),
        NodeSpec::new(
            "prediction",
            Role::Prediction,
            Pattern::Interrupt,
            LatencyModel::linear(PerKindCost::uniform(ms(2)), ms(10)),
        )
        .inputs(&["detections"])
        .outputs(&["trajectories"])
        .fast(LatencyModel::linear(PerKindCost::uniform(us(500)), ms(3))),
        NodeSpec::new(
            "planning",
            Role::Planning,
            Pattern::Interrupt,
            LatencyModel::fixed(ms(15)).with_lookahead_cost(250.0),
        )
        .inputs(&["trajectories"])
        .outputs(&["commands"])
        .fast(LatencyModel::linear(PerKindCost::uniform(us(200)), ms(4)).with_lookahead_cost(100.0))
        .lookahead(100.0),
        NodeSpec::new("control", Role::Control, Pattern::Interrupt, LatencyModel::fixed(ms(1)))
            .inputs(&["commands"])
            .outputs(&["actuation"]),
    ];
    let channels = vec![
        ChannelSpec::fifo("images", 4),
        ChannelSpec::fifo("detections", 4),
        ChannelSpec::fifo("trajectories", 4),
        ChannelSpec::fifo("commands", 4),
        ChannelSpec::fifo("actuation", 1),
    ];
    build(nodes, channels, FusionSpec::default())
}

/// Fastpath on with the given deadline cap.
pub fn deadline_config(cap: SimTime, fastpath: bool) -> EngineConfig {
    EngineConfig {
        mitigation: MitigationConfig {
            fastpath,
            deadline_cap_us: cap,
            fast_lookahead_m: 40.0,
            ..MitigationConfig::default()
        },
        ..EngineConfig::default()
    }
}

/// Side-lane traffic travelling with the ego: four vehicles within 20 m and
/// six further out.
pub fn convoy_scenario(duration: SimTime) -> Scenario {
    let mut sc = Scenario::new("convoy", AgentState::new(0.0, 10.0, 0.0, 1), duration);
    let near = [(0, -6.0), (0, 7.0), (2, -4.0), (2, 9.0)];
    let far = [(0, 35.0), (0, 55.0), (2, 40.0), (2, -45.0), (1, 70.0), (0, -60.0)];
    for (i, &(lane, s)) in near.iter().chain(&far).enumerate() {
        sc.agents.push(Agent {
            id: AgentId(i as u32 + 1),
            kind: AgentKind::Vehicle,
            trajectory: TrajectorySpec::constant(AgentState::new(s, 10.0, 0.0, lane)),
        });
    }
    sc
}

/// Two groups: a saturated one-worker perception group whose detector may run
/// as a nice guest, and a two-worker planning group with a budget that hosts
/// the camera, a 10 Hz planner and control.
pub fn stealing_graph() -> PipelineGraph {
    let mut detector = NodeSpec::new("detector", Role::Perception, Pattern::Interrupt, LatencyModel::fixed(ms(60)))
        .inputs(&["frames"])
        .outputs(&["objects"])
        .nice_guest();
    detector.max_instances = 2;
    let nodes = vec![
        NodeSpec::new("camera", Role::Sensor, Pattern::timing(ms(50)), LatencyModel::fixed(SimTime::ZERO))
            .outputs(&["frames"]),
        detector,
        NodeSpec::new(
            "planner",
            Role::Planning,
            Pattern::Timing {
                period_us: ms(100),
                phase_us: ms(5),
            },
            LatencyModel::fixed(ms(30)),
        )
        .inputs(&["objects"])
        .outputs(&["commands"]),
        NodeSpec::new("control", Role::Control, Pattern::Interrupt, LatencyModel::fixed(ms(1)))
            .inputs(&["commands"])
            .outputs(&["actuation"]),
    ];
    let channels = vec![
        ChannelSpec::latest("frames"),
        ChannelSpec::latest("objects"),
        ChannelSpec::fifo("commands", 2),
        ChannelSpec::fifo("actuation", 1),
    ];
    build(nodes, channels, FusionSpec::default())
}

pub fn stealing_groups() -> Vec<ProcessorGroup> {
    vec![
        ProcessorGroup::new("perception", 1, &["detector"]),
        ProcessorGroup::new("planning", 2, &["camera", "planner", "control"]).budget(ms(80)),
    ]
}

pub fn stealing_config(stealing: bool) -> EngineConfig {
    EngineConfig {
        mitigation: MitigationConfig {
            stealing,
            ..MitigationConfig::default()
        },
        ..EngineConfig::default()
    }
}

/// Perception finishes 20 ms after each capture; planning fires 30 ms after
/// it, leaving a 10 ms gap before every trigger.
pub fn proactive_graph() -> PipelineGraph {
    let nodes = vec![
        NodeSpec::new("camera", Role::Sensor, Pattern::timing(ms(100)), LatencyModel::fixed(SimTime::ZERO))
            .outputs(&["frames"]),
        NodeSpec::new("perception", Role::Perception, Pattern::Interrupt, LatencyModel::fixed(ms(20)))
            .inputs(&["frames"])
            .outputs(&["objects"]),
        NodeSpec::new(
            "planner",
            Role::Planning,
            Pattern::Timing {
                period_us: ms(100),
                phase_us: ms(30),
            },
            LatencyModel::linear(PerKindCost::uniform(us(500)), ms(25)),
        )
        .inputs(&["objects"])
        .outputs(&["commands"]),
        NodeSpec::new("control", Role::Control, Pattern::Interrupt, LatencyModel::fixed(ms(1)))
            .inputs(&["commands"])
            .outputs(&["actuation"]),
    ];
    let channels = vec![
        ChannelSpec::fifo("frames", 2),
        ChannelSpec::latest("objects"),
        ChannelSpec::fifo("commands", 2),
        ChannelSpec::fifo("actuation", 1),
    ];
    build(nodes, channels, FusionSpec::default())
}

pub fn proactive_config(cost: SimTime, cancel: Option<CancelPolicy>) -> EngineConfig {
    EngineConfig {
        mitigation: MitigationConfig {
            proactive: cancel.is_some(),
            proactive_tasks: vec![ProactiveSpec {
                node: "planner".into(),
                precompute_cost_us: cost,
                cancel: cancel.unwrap_or(CancelPolicy::Never),
                dedicated_worker: true,
            }],
            ..MitigationConfig::default()
        },
        ..EngineConfig::default()
    }
}
