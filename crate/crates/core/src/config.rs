//! Run configuration files. Paths inside a config resolve relative to the
//! directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{dedicated_groups, run_simulation_with, EngineConfig, ProcessorGroup, RunOptions, RunTrace};
use crate::error::{Error, Result};
use crate::pipeline::{load_pipeline, Noise, Pipeline};
use crate::scenario::{generate_traffic, load_scenario, Agent, AgentId, RoadSpec, Scenario, TRAFFIC_ID_BASE};

/// Background traffic added to the scenario before the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    /// Expected agents within the road's radius of the ego.
    pub density: f64,
    /// Defaults to the scenario's lanes and ego state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road: Option<RoadSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub pipeline: PathBuf,
    /// Defaults to one single-worker group per node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<ProcessorGroup>>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.scenario, &mut cfg.pipeline] {
            *p = base.join(&*p);
        }
        if let Some(out) = cfg.out.as_mut() {
            *out = base.join(&*out);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text, path)
    }

    /// Loads and validates everything the run needs.
    pub fn resolve(&self) -> Result<RunSetup> {
        let scenario = load_scenario(&self.scenario)?;
        let pipeline = load_pipeline(&self.pipeline)?;
        let groups = self.groups.clone().unwrap_or_else(|| dedicated_groups(&pipeline));
        let setup = RunSetup {
            base: scenario,
            pipeline,
            groups,
            engine: self.engine.clone(),
            traffic: self.traffic.clone(),
            seed: self.seed,
            label: self.label.clone(),
        };
        if setup.seed.is_none() && setup.is_stochastic() {
            return Err(Error::Usage(
                "a seed is required: the pipeline has latency noise or the config adds traffic".into(),
            ));
        }
        Ok(setup)
    }
}

/// Everything one run needs, already loaded.
#[derive(Debug, Clone)]
pub struct RunSetup {
    /// Scenario before traffic is added.
    pub base: Scenario,
    pub pipeline: Pipeline,
    pub groups: Vec<ProcessorGroup>,
    pub engine: EngineConfig,
    pub traffic: Option<TrafficConfig>,
    pub seed: Option<u64>,
    pub label: String,
}

/// Road matching the scenario's lanes and ego.
pub fn road_for(sc: &Scenario) -> RoadSpec {
    RoadSpec {
        lane_count: sc.lane_count,
        lane_width_m: sc.lane_width,
        ego_lane: sc.ego_initial.lane,
        ego_s_m: sc.ego_initial.s,
        ego_speed_mps: sc.ego_initial.v,
        ..RoadSpec::default()
    }
}

/// `sc` plus generated traffic with ids from [`TRAFFIC_ID_BASE`].
pub fn with_traffic(sc: &Scenario, traffic: &TrafficConfig, seed: u64) -> Scenario {
    let road = traffic.road.clone().unwrap_or_else(|| road_for(sc));
    let mut out = sc.clone();
    out.agents.extend(
        generate_traffic(traffic.density, seed, &road)
            .into_iter()
            .enumerate()
            .map(|(i, (kind, trajectory))| Agent {
                id: AgentId(TRAFFIC_ID_BASE + i as u32),
                kind,
                trajectory,
            }),
    );
    out
}

impl RunSetup {
    /// True when the seed changes the outcome.
    pub fn is_stochastic(&self) -> bool {
        let noisy = self
            .pipeline
            .nodes()
            .iter()
            .flat_map(|n| std::iter::once(&n.latency).chain(n.fast_latency.as_ref()))
            .any(|m| m.noise != Noise::None);
        noisy || self.traffic.as_ref().is_some_and(|t| t.density > 0.0)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// The scenario actually simulated.
    pub fn scenario(&self) -> Scenario {
        match &self.traffic {
            Some(t) => with_traffic(&self.base, t, self.seed()),
            None => self.base.clone(),
        }
    }

    pub fn run(&self) -> Result<RunTrace> {
        let options = RunOptions {
            label: self.label.clone(),
        };
        run_simulation_with(&self.scenario(), &self.pipeline, &self.groups, &self.engine, self.seed(), &options)
    }
}
