//! Network structure: layers, edges with optional one-step delays, and the
//! trainable parameters attached to both.
//!
//! A node receives the sum of its incoming edges (in edge order), plus the
//! external input if it is an input node. An edge may carry a learned
//! projection, applied to the flattened source output. Delay-1 edges deliver
//! the source's output from the previous step; at step 0 they deliver zeros.

mod json;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::neurons::LifParams;
use crate::tensor::{Scalar, Tensor};

pub use json::GraphFile;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// LIF neurons arranged in `shape`. With `smooth` set, the hard threshold
    /// is replaced by the surrogate's smooth primitive at that sharpness.
    Lif {
        params: LifParams,
        shape: Vec<usize>,
        smooth: Option<f64>,
    },
    /// Dense map `[inputs] -> [outputs]` with weights `[inputs×outputs]`.
    Linear {
        inputs: usize,
        outputs: usize,
    },
    /// Cross-correlation `[C_in×H×W] -> [C_out×H'×W']`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Lif { .. } => "lif",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn is_stateful(&self) -> bool {
        matches!(self, LayerKind::Lif { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(kind: LayerKind) -> Self {
        Layer {
            name: String::new(),
            kind,
        }
    }

    pub fn lif(shape: &[usize], params: LifParams) -> Self {
        Self::new(LayerKind::Lif {
            params,
            shape: shape.to_vec(),
            smooth: None,
        })
    }

    pub fn linear(inputs: usize, outputs: usize) -> Self {
        Self::new(LayerKind::Linear { inputs, outputs })
    }

    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::new(LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// 0 (same step) or 1 (previous step).
    pub delay: u8,
    /// Whether the edge carries a learned projection.
    #[serde(default)]
    pub projected: bool,
}

impl Edge {
    pub fn forward(src: usize, dst: usize) -> Self {
        Edge {
            src,
            dst,
            delay: 0,
            projected: false,
        }
    }

    pub fn delayed(src: usize, dst: usize) -> Self {
        Edge {
            src,
            dst,
            delay: 1,
            projected: false,
        }
    }

    pub fn with_projection(mut self) -> Self {
        self.projected = true;
        self
    }
}

/// Identifies one trainable tensor of a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "owner", content = "id", rename_all = "snake_case")]
pub enum ParamKey {
    /// Weights of a linear or conv node.
    Node(usize),
    /// Projection of an edge.
    Edge(usize),
}

pub type ParamMap<F> = BTreeMap<ParamKey, Tensor<F>>;

/// Explicit graph description for [`NetworkGraph::build`].
#[derive(Debug, Clone)]
pub struct GraphSpec {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Layer>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NetworkGraph<F: Scalar> {
    input_shape: Vec<usize>,
    nodes: Vec<Layer>,
    edges: Vec<Edge>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    params: ParamMap<F>,
    order: Vec<usize>,
    in_edges: Vec<Vec<usize>>,
    in_shapes: Vec<Vec<usize>>,
    out_shapes: Vec<Vec<usize>>,
    diagnostics: Vec<String>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> NetworkGraph<F> {
    /// Chain of layers fed by the external input, last layer as output.
    pub fn sequential(input_shape: &[usize], layers: Vec<Layer>, seed: u64) -> Result<Self> {
        Self::sequential_recurrent(input_shape, layers, &[], seed)
    }

    /// Chain plus delay-1 feedback edges `(from, to)` with `from >= to`,
    /// delivering `from`'s output into `to`'s input. A projection is added
    /// when the shapes differ.
    pub fn sequential_recurrent(
        input_shape: &[usize],
        layers: Vec<Layer>,
        feedback: &[(usize, usize)],
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Construction {
                from: "input".into(),
                to: "output".into(),
                reason: "sequential needs at least one layer".into(),
            });
        }
        let n = layers.len();
        let mut edges: Vec<Edge> = (1..n).map(|i| Edge::forward(i - 1, i)).collect();
        let chain = Self::build(
            GraphSpec {
                input_shape: input_shape.to_vec(),
                nodes: layers.clone(),
                edges: edges.clone(),
                inputs: vec![0],
                outputs: vec![n - 1],
            },
            seed,
        )?;
        for &(from, to) in feedback {
            if from >= n || to >= n {
                return Err(Error::validation(
                    "feedback",
                    format!("({from}, {to}) references a layer outside 0..{n}"),
                ));
            }
            if from < to {
                return Err(Error::validation(
                    "feedback",
                    format!("({from}, {to}) must point backwards (from >= to)"),
                ));
            }
            let mut e = Edge::delayed(from, to);
            if chain.out_shapes[from] != chain.in_shapes[to] {
                e = e.with_projection();
            }
            edges.push(e);
        }
        Self::build(
            GraphSpec {
                input_shape: input_shape.to_vec(),
                nodes: layers,
                edges,
                inputs: vec![0],
                outputs: vec![n - 1],
            },
            seed,
        )
    }

    /// Validates an explicit graph and initialises its parameters uniformly
    /// in `±1/sqrt(fan_in)` from `seed`.
    pub fn build(spec: GraphSpec, seed: u64) -> Result<Self> {
        let mut g = Self::build_uninit(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<ParamKey> = g.param_shapes().into_keys().collect();
        for key in keys {
            let shape = g.param_shapes()[&key].clone();
            let fan_in = g.fan_in(key);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..numel(&shape))
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            g.params.insert(key, Tensor::new(shape, data)?);
        }
        Ok(g)
    }

    fn build_uninit(spec: GraphSpec) -> Result<Self> {
        let GraphSpec {
            input_shape,
            mut nodes,
            edges,
            inputs,
            outputs,
        } = spec;
        if nodes.is_empty() {
            return Err(Error::validation("graph", "needs at least one node"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::validation(
                "input shape",
                format!("extents must be positive, got {input_shape:?}"),
            ));
        }
        let n = nodes.len();
        for (id, node) in nodes.iter_mut().enumerate() {
            if node.name.is_empty() {
                node.name = format!("{}{id}", node.kind.tag());
            }
            validate_kind(node)?;
        }
        for (k, e) in edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return Err(Error::validation(
                    "edge",
                    format!(
                        "edge {k} ({} -> {}) references a missing node",
                        e.src, e.dst
                    ),
                ));
            }
            if e.delay > 1 {
                return Err(Error::validation(
                    "edge delay",
                    format!("edge {k} has delay {}, only 0 and 1 are supported", e.delay),
                ));
            }
        }
        if inputs.is_empty() || outputs.is_empty() {
            return Err(Error::validation(
                "graph",
                "needs at least one input node and one output node",
            ));
        }
        for &id in inputs.iter().chain(&outputs) {
            if id >= n {
                return Err(Error::validation(
                    "graph",
                    format!("input/output id {id} is not a node"),
                ));
            }
        }

        let mut in_edges = vec![Vec::new(); n];
        for (k, e) in edges.iter().enumerate() {
            in_edges[e.dst].push(k);
        }
        let order = topo_sort(n, &edges)?;

        let mut g = NetworkGraph {
            input_shape,
            nodes,
            edges,
            inputs,
            outputs,
            params: BTreeMap::new(),
            order,
            in_edges,
            in_shapes: vec![Vec::new(); n],
            out_shapes: vec![Vec::new(); n],
            diagnostics: Vec::new(),
        };
        g.infer_shapes()?;
        g.check_reachability();
        Ok(g)
    }

    fn infer_shapes(&mut self) -> Result<()> {
        let n = self.nodes.len();
        let mut known = vec![false; n];
        for idx in 0..n {
            let id = self.order[idx];
            let mut arriving: Vec<(String, Vec<usize>)> = Vec::new();
            if self.inputs.contains(&id) {
                arriving.push(("input".into(), self.input_shape.clone()));
            }
            for &k in &self.in_edges[id] {
                let e = self.edges[k];
                if e.delay == 0 && !e.projected {
                    arriving.push((
                        self.nodes[e.src].name.clone(),
                        self.out_shapes[e.src].clone(),
                    ));
                }
            }
            let in_shape = match arriving.first() {
                Some((_, s)) => s.clone(),
                None => natural_input(&self.nodes[id].kind).ok_or_else(|| Error::Construction {
                    from: "-".into(),
                    to: self.nodes[id].name.clone(),
                    reason: "no instantaneous input fixes this node's input shape".into(),
                })?,
            };
            for (from, s) in &arriving {
                if *s != in_shape {
                    return Err(Error::Construction {
                        from: from.clone(),
                        to: self.nodes[id].name.clone(),
                        reason: format!("fan-in shapes {s:?} and {in_shape:?} differ"),
                    });
                }
            }
            let out = output_shape(&self.nodes[id].kind, &in_shape).map_err(|reason| {
                Error::Construction {
                    from: arriving
                        .first()
                        .map(|(f, _)| f.clone())
                        .unwrap_or_else(|| "-".into()),
                    to: self.nodes[id].name.clone(),
                    reason,
                }
            })?;
            self.in_shapes[id] = in_shape;
            self.out_shapes[id] = out;
            known[id] = true;
        }
        debug_assert!(known.iter().all(|&k| k));
        for e in &self.edges {
            if !e.projected && self.out_shapes[e.src] != self.in_shapes[e.dst] {
                return Err(Error::Construction {
                    from: self.nodes[e.src].name.clone(),
                    to: self.nodes[e.dst].name.clone(),
                    reason: format!(
                        "output {:?} does not match input {:?}",
                        self.out_shapes[e.src], self.in_shapes[e.dst]
                    ),
                });
            }
        }
        Ok(())
    }

    fn check_reachability(&mut self) {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut stack = self.inputs.clone();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            for e in &self.edges {
                if e.src == v && !seen[e.dst] {
                    stack.push(e.dst);
                }
            }
        }
        for (id, s) in seen.iter().enumerate() {
            if !s {
                self.diagnostics.push(format!(
                    "warning: node {id} ('{}') is not reachable from any input",
                    self.nodes[id].name
                ));
            }
        }
    }

    fn fan_in(&self, key: ParamKey) -> usize {
        match key {
            ParamKey::Node(id) => match self.nodes[id].kind {
                LayerKind::Linear { inputs, .. } => inputs,
                LayerKind::Conv {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                _ => 1,
            },
            ParamKey::Edge(k) => numel(&self.out_shapes[self.edges[k].src]),
        }
    }

    /// Expected shape of every trainable tensor.
    pub fn param_shapes(&self) -> BTreeMap<ParamKey, Vec<usize>> {
        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            match node.kind {
                LayerKind::Linear { inputs, outputs } => {
                    out.insert(ParamKey::Node(id), vec![inputs, outputs]);
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.insert(
                        ParamKey::Node(id),
                        vec![out_channels, in_channels, kernel, kernel],
                    );
                }
                _ => {}
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            if e.projected {
                out.insert(
                    ParamKey::Edge(k),
                    vec![
                        numel(&self.out_shapes[e.src]),
                        numel(&self.in_shapes[e.dst]),
                    ],
                );
            }
        }
        out
    }

    pub fn params(&self) -> &ParamMap<F> {
        &self.params
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<F>> {
        self.params.get(&key)
    }

    /// Replaces one parameter tensor; the shape must match.
    pub fn set_param(&mut self, key: ParamKey, value: Tensor<F>) -> Result<()> {
        let cur = self
            .params
            .get(&key)
            .ok_or_else(|| Error::Contract(format!("graph has no parameter {key:?}")))?;
        if cur.shape() != value.shape() {
            return Err(Error::shape("set_param", cur.shape(), value.shape()));
        }
        self.params.insert(key, value.detach());
        Ok(())
    }

    /// Replaces all parameters; keys and shapes must match exactly.
    pub fn set_params(&mut self, params: ParamMap<F>) -> Result<()> {
        if params.len() != self.params.len() || params.keys().ne(self.params.keys()) {
            return Err(Error::Contract(
                "parameter keys do not match the graph".into(),
            ));
        }
        for (k, v) in params {
            self.set_param(k, v)?;
        }
        Ok(())
    }

    /// Same graph with every LIF layer's threshold replaced by its smooth
    /// primitive at `sharpness`.
    pub fn smooth_twin(&self, sharpness: f64) -> Result<Self> {
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::validation(
                "sharpness",
                format!("must be positive and finite, got {sharpness}"),
            ));
        }
        let mut g = self.clone();
        for node in &mut g.nodes {
            if let LayerKind::Lif { smooth, .. } = &mut node.kind {
                *smooth = Some(sharpness);
            }
        }
        Ok(g)
    }

    /// Converts parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> NetworkGraph<G> {
        NetworkGraph {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            params: self.params.iter().map(|(k, v)| (*k, v.cast())).collect(),
            order: self.order.clone(),
            in_edges: self.in_edges.clone(),
            in_shapes: self.in_shapes.clone(),
            out_shapes: self.out_shapes.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Layer] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Execution order over delay-0 edges, ties broken by ascending id.
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    /// Incoming edge indices of `node`, in edge order.
    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    pub fn in_shape(&self, node: usize) -> &[usize] {
        &self.in_shapes[node]
    }

    pub fn out_shape(&self, node: usize) -> &[usize] {
        &self.out_shapes[node]
    }

    /// Ids of the LIF nodes, ascending.
    pub fn stateful_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_stateful())
            .collect()
    }

    pub fn has_delays(&self) -> bool {
        self.edges.iter().any(|e| e.delay == 1)
    }

    /// Non-fatal findings from validation, such as unreachable nodes.
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

fn validate_kind(node: &Layer) -> Result<()> {
    let bad = |reason: String| Error::Construction {
        from: node.name.clone(),
        to: node.name.clone(),
        reason,
    };
    match &node.kind {
        LayerKind::Lif {
            params,
            shape,
            smooth,
        } => {
            params.validate()?;
            if shape.is_empty() || shape.contains(&0) {
                return Err(bad(format!("invalid neuron shape {shape:?}")));
            }
            if let Some(s) = smooth {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(Error::validation("sharpness", format!("got {s}")));
                }
            }
        }
        LayerKind::Linear { inputs, outputs } => {
            if *inputs == 0 || *outputs == 0 {
                return Err(bad("linear extents must be positive".into()));
            }
        }
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            ..
        } => {
            if *in_channels == 0 || *out_channels == 0 || *kernel == 0 || *stride == 0 {
                return Err(bad(
                    "conv channels, kernel and stride must be positive".into()
                ));
            }
        }
        LayerKind::Flatten => {}
    }
    Ok(())
}

/// Input shape implied by the layer itself, when it has one.
fn natural_input(kind: &LayerKind) -> Option<Vec<usize>> {
    match kind {
        LayerKind::Lif { shape, .. } => Some(shape.clone()),
        LayerKind::Linear { inputs, .. } => Some(vec![*inputs]),
        _ => None,
    }
}

fn output_shape(kind: &LayerKind, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match kind {
        LayerKind::Lif { shape, .. } => {
            if input == shape.as_slice() {
                Ok(shape.clone())
            } else {
                Err(format!(
                    "LIF shape {shape:?} does not match input {input:?}"
                ))
            }
        }
        LayerKind::Linear { inputs, outputs } => {
            if input == [*inputs] {
                Ok(vec![*outputs])
            } else {
                Err(format!("linear expects input [{inputs}], got {input:?}"))
            }
        }
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if input.len() != 3 || input[0] != *in_channels {
                return Err(format!(
                    "conv expects input [{in_channels}×H×W], got {input:?}"
                ));
            }
            let ho = ConvGeom::out_extent(input[1], *kernel, *stride, *padding);
            let wo = ConvGeom::out_extent(input[2], *kernel, *stride, *padding);
            match (ho, wo) {
                (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                _ => Err(format!(
                    "kernel {kernel} does not fit input {input:?} with padding {padding}"
                )),
            }
        }
        LayerKind::Flatten => Ok(vec![numel(input)]),
    }
}

/// Kahn's algorithm over delay-0 edges with a min-heap, so ready nodes are
/// emitted by ascending id. Fails with a cycle witness.
fn topo_sort(n: usize, edges: &[Edge]) -> Result<Vec<usize>> {
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for e in edges.iter().filter(|e| e.delay == 0) {
        indeg[e.dst] += 1;
        succ[e.src].push(e.dst);
    }
    let mut heap: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                heap.push(Reverse(w));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node has a leftover predecessor, so walking
    // predecessors must revisit a node.
    let start = (0..n).find(|&v| indeg[v] > 0).unwrap();
    let mut pos = vec![usize::MAX; n];
    let mut walk = Vec::new();
    let mut v = start;
    while pos[v] == usize::MAX {
        pos[v] = walk.len();
        walk.push(v);
        v = edges
            .iter()
            .filter(|e| e.delay == 0 && e.dst == v && indeg[e.src] > 0)
            .map(|e| e.src)
            .min()
            .unwrap();
    }
    let mut cycle: Vec<usize> = walk[pos[v]..].to_vec();
    cycle.reverse();
    let lo = cycle
        .iter()
        .enumerate()
        .min_by_key(|(_, &id)| id)
        .unwrap()
        .0;
    cycle.rotate_left(lo);
    Err(Error::Cycle(cycle))
}
