//! Versioned JSON form of a [`NetworkGraph`].
//!
//! ```json
//! {
//!   "version": 1,
//!   "input_shape": [4],
//!   "seed": 7,
//!   "nodes": [
//!     {"kind": "linear", "inputs": 4, "outputs": 3},
//!     {"kind": "lif", "shape": [3], "alpha": 0.9, "beta": 0.8}
//!   ],
//!   "edges": [{"src": 0, "dst": 1, "delay": 0}],
//!   "params": [{"node": 0, "data": [...]}]
//! }
//! ```
//!
//! `edges` defaults to a chain, `inputs` to `[0]` and `outputs` to the last
//! node. Parameters not listed in `params` are drawn from `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, GraphSpec, Layer, LayerKind, NetworkGraph, ParamKey};
use crate::error::{Error, Result};
use crate::neurons::{LifParams, ResetMode};
use crate::surrogate::SurrogateFn;
use crate::tensor::{Scalar, Tensor};

pub const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub version: u32,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<NodeFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<Edge>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeFile {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    #[serde(flatten)]
    pub kind: KindFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KindFile {
    Lif {
        shape: Vec<usize>,
        alpha: f64,
        beta: f64,
        #[serde(default = "one")]
        thr: f64,
        #[serde(default)]
        surrogate: SurrogateFn,
        #[serde(default)]
        reset: ResetMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        smooth: Option<f64>,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one_usize")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Flatten,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    fn key(&self) -> Result<ParamKey> {
        match (self.node, self.edge) {
            (Some(n), None) => Ok(ParamKey::Node(n)),
            (None, Some(e)) => Ok(ParamKey::Edge(e)),
            _ => Err(Error::validation(
                "param entry",
                "needs exactly one of 'node' or 'edge'",
            )),
        }
    }
}

impl From<&Layer> for NodeFile {
    fn from(layer: &Layer) -> Self {
        let kind = match &layer.kind {
            LayerKind::Lif {
                params,
                shape,
                smooth,
            } => KindFile::Lif {
                shape: shape.clone(),
                alpha: params.alpha,
                beta: params.beta,
                thr: params.thr,
                surrogate: params.surrogate,
                reset: params.reset,
                smooth: *smooth,
            },
            LayerKind::Linear { inputs, outputs } => KindFile::Linear {
                inputs: *inputs,
                outputs: *outputs,
            },
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => KindFile::Conv {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            LayerKind::Flatten => KindFile::Flatten,
        };
        NodeFile {
            name: layer.name.clone(),
            kind,
        }
    }
}

impl From<&NodeFile> for Layer {
    fn from(node: &NodeFile) -> Self {
        let kind = match &node.kind {
            KindFile::Lif {
                shape,
                alpha,
                beta,
                thr,
                surrogate,
                reset,
                smooth,
            } => LayerKind::Lif {
                params: LifParams {
                    alpha: *alpha,
                    beta: *beta,
                    thr: *thr,
                    surrogate: *surrogate,
                    reset: *reset,
                },
                shape: shape.clone(),
                smooth: *smooth,
            },
            KindFile::Linear { inputs, outputs } => LayerKind::Linear {
                inputs: *inputs,
                outputs: *outputs,
            },
            KindFile::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerKind::Conv {
                in_channels: *in_channels,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            KindFile::Flatten => LayerKind::Flatten,
        };
        Layer {
            name: node.name.clone(),
            kind,
        }
    }
}

impl GraphFile {
    /// Snapshot of a graph including its current parameters.
    pub fn from_graph<F: Scalar>(g: &NetworkGraph<F>, seed: u64) -> Self {
        GraphFile {
            version: GRAPH_VERSION,
            input_shape: g.input_shape().to_vec(),
            seed,
            nodes: g.nodes().iter().map(NodeFile::from).collect(),
            edges: Some(g.edges().to_vec()),
            inputs: Some(g.inputs().to_vec()),
            outputs: Some(g.outputs().to_vec()),
            params: g
                .params()
                .iter()
                .map(|(k, v)| {
                    let (node, edge) = match *k {
                        ParamKey::Node(n) => (Some(n), None),
                        ParamKey::Edge(e) => (None, Some(e)),
                    };
                    ParamEntry {
                        node,
                        edge,
                        data: v.to_f64_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn into_graph<F: Scalar>(&self) -> Result<NetworkGraph<F>> {
        if self.version != GRAPH_VERSION {
            return Err(Error::validation(
                "graph version",
                format!("expected {GRAPH_VERSION}, got {}", self.version),
            ));
        }
        let n = self.nodes.len();
        let spec = GraphSpec {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.iter().map(Layer::from).collect(),
            edges: self
                .edges
                .clone()
                .unwrap_or_else(|| (1..n).map(|i| Edge::forward(i - 1, i)).collect()),
            inputs: self.inputs.clone().unwrap_or_else(|| vec![0]),
            outputs: self
                .outputs
                .clone()
                .unwrap_or_else(|| vec![n.saturating_sub(1)]),
        };
        let mut g = NetworkGraph::build(spec, self.seed)?;
        for entry in &self.params {
            let key = entry.key()?;
            let shape = g
                .param_shapes()
                .remove(&key)
                .ok_or_else(|| Error::validation("param entry", format!("no parameter {key:?}")))?;
            g.set_param(key, Tensor::from_f64(shape, &entry.data)?)?;
        }
        Ok(g)
    }
}

impl<F: Scalar> NetworkGraph<F> {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(s)?;
        file.into_graph()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile::from_graph(
            self, 0,
        ))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}
