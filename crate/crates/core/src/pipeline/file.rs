//! Pipeline JSON format (version 1).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_graph, ChannelSpec, FusionSpec, NodeSpec, Pipeline, PipelineGraph};
use crate::error::{Error, FieldError, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    format: u32,
    channels: Vec<ChannelSpec>,
    nodes: Vec<NodeSpec>,
    #[serde(default)]
    fusion: FusionSpec,
}

pub fn pipeline_from_json(text: &str, origin: &Path) -> Result<Pipeline> {
    let file: PipelineFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
    if file.format != FORMAT_VERSION {
        return Err(Error::invalid(
            "pipeline",
            vec![FieldError::new("format", format!("unsupported format {}, expected {FORMAT_VERSION}", file.format))],
        ));
    }
    validate_graph(&PipelineGraph {
        nodes: file.nodes,
        channels: file.channels,
        fusion: file.fusion,
    })
}

pub fn pipeline_to_json(g: &PipelineGraph) -> String {
    let file = PipelineFile {
        format: FORMAT_VERSION,
        channels: g.channels.clone(),
        nodes: g.nodes.clone(),
        fusion: g.fusion,
    };
    serde_json::to_string_pretty(&file).expect("pipeline serialization is infallible")
}

pub fn load_pipeline(path: impl AsRef<Path>) -> Result<Pipeline> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    pipeline_from_json(&text, path)
}

pub fn save_pipeline(g: &PipelineGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pipeline_to_json(g) + "\n").map_err(|e| Error::io(path, e))
}
