//! Time-loop evaluation of a [`NetworkGraph`].
//!
//! Two schedulers are provided. `StepByStep` runs every node once per time
//! step and supports delayed feedback. `LayerByLayer` runs each node over all
//! time steps before moving on: stateless layers see the whole sequence as one
//! batched call and LIF layers scan it step by step.
//!
//! Carried values (membrane potential, synaptic current and delayed edge
//! outputs) pass through an identity node at every internal step boundary.
//! This keeps the order in which gradient contributions are summed the same
//! whether a sequence is replayed in one piece or segment by segment, which
//! makes checkpointed gradients bit-identical to full backpropagation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neurons::{init_state_shaped, lif_smooth_step, lif_step, InitMode, NeuronState};
use crate::tape::{Seed, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::topology::{LayerKind, NetworkGraph, ParamKey, ParamMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    StepByStep,
    LayerByLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    #[serde(default)]
    pub scheduler: Scheduler,
    /// Steps per loop iteration in layer-by-layer LIF scans.
    #[serde(default = "one")]
    pub unroll: usize,
    /// Segment length for gradient checkpointing.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for ExecutionPlan {
    fn default() -> Self {
        Self::step_by_step()
    }
}

impl ExecutionPlan {
    pub fn step_by_step() -> Self {
        ExecutionPlan {
            scheduler: Scheduler::StepByStep,
            unroll: 1,
            checkpoint_every: None,
        }
    }

    pub fn layer_by_layer(unroll: usize) -> Self {
        ExecutionPlan {
            scheduler: Scheduler::LayerByLayer,
            unroll,
            checkpoint_every: None,
        }
    }

    pub fn with_checkpoint(mut self, every: usize) -> Self {
        self.checkpoint_every = Some(every);
        self
    }

    /// Checks the plan against a graph and sequence length.
    pub fn validate<F: Scalar>(&self, graph: &NetworkGraph<F>, t: usize) -> Result<()> {
        if self.unroll == 0 {
            return Err(Error::validation("unroll", "must be at least 1"));
        }
        if self.scheduler == Scheduler::LayerByLayer && graph.has_delays() {
            return Err(Error::Plan(
                "layer_by_layer cannot run a graph with delayed feedback edges; \
                 use step_by_step"
                    .into(),
            ));
        }
        if let Some(k) = self.checkpoint_every {
            if k == 0 || k > t {
                return Err(Error::validation(
                    "checkpoint_every",
                    format!("must lie in 1..={t}, got {k}"),
                ));
            }
        }
        Ok(())
    }
}

/// One state per LIF node, keyed by node id.
pub type StateMap<F> = BTreeMap<usize, NeuronState<F>>;

/// Initial states for every LIF node, drawn in ascending node order.
pub fn init_states<F: Scalar>(
    graph: &NetworkGraph<F>,
    mode: InitMode,
    seed: u64,
) -> Result<StateMap<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for id in graph.stateful_nodes() {
        out.insert(id, init_state_shaped(graph.out_shape(id), mode, &mut rng)?);
    }
    Ok(out)
}

/// Outputs over time: `[T × node shape]` per recorded node.
#[derive(Debug, Clone)]
pub struct SpikeRecord<F: Scalar> {
    pub steps: usize,
    pub outputs: BTreeMap<usize, Tensor<F>>,
    /// Every other LIF node, when tracing is enabled.
    pub hidden: BTreeMap<usize, Tensor<F>>,
}

impl<F: Scalar> SpikeRecord<F> {
    pub fn output(&self, node: usize) -> Option<&Tensor<F>> {
        self.outputs.get(&node)
    }

    /// Record of the lowest-id output node.
    pub fn first_output(&self) -> &Tensor<F> {
        self.outputs
            .values()
            .next()
            .expect("records hold at least one output")
    }

    /// Writes `t,node_id,neuron_idx,spike` rows for all recorded nodes,
    /// ordered by step, then node id, then neuron.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut all: BTreeMap<usize, &Tensor<F>> =
            self.hidden.iter().map(|(k, v)| (*k, v)).collect();
        all.extend(self.outputs.iter().map(|(k, v)| (*k, v)));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "node_id", "neuron_idx", "spike"])?;
        for t in 0..self.steps {
            for (&id, rec) in &all {
                let per_step = rec.numel() / self.steps;
                for n in 0..per_step {
                    let v = rec.data()[t * per_step + n].to_f64();
                    w.write_record([
                        t.to_string(),
                        id.to_string(),
                        n.to_string(),
                        crate::fmt::fmt_g(v),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_trace_csv(std::io::BufWriter::new(f))
    }
}

/// Scalar loss computed from the recorded outputs.
pub trait LossHead<F: Scalar>: Sync {
    /// `outputs` holds `[T × shape]` per output node, recorded on `tape`.
    fn loss(&self, tape: &mut Tape<F>, outputs: &BTreeMap<usize, Tensor<F>>) -> Result<Tensor<F>>;
}

/// Memory accounting for one gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointStats {
    pub segments: usize,
    /// Largest tape recorded at any one time.
    pub peak_tape_nodes: usize,
    pub peak_saved_elements: usize,
    /// Tensors held at segment boundaries during the forward pass.
    pub boundary_tensors: usize,
}

impl CheckpointStats {
    /// Bound on values alive at once: stored boundaries plus one tape.
    pub fn peak_live(&self) -> usize {
        self.peak_tape_nodes + self.boundary_tensors
    }
}

#[derive(Debug, Clone)]
pub struct GradOutput<F: Scalar> {
    pub loss: F,
    pub grads: ParamMap<F>,
    pub record: SpikeRecord<F>,
    pub stats: CheckpointStats,
}

/// Values carried from one step to the next.
#[derive(Debug, Clone)]
struct Carry<F: Scalar> {
    states: StateMap<F>,
    /// Last output of every delayed-edge source.
    delayed: BTreeMap<usize, Tensor<F>>,
}

impl<F: Scalar> Carry<F> {
    fn initial(graph: &NetworkGraph<F>, states: &StateMap<F>) -> Self {
        let mut delayed = BTreeMap::new();
        for e in graph.edges().iter().filter(|e| e.delay == 1) {
            delayed
                .entry(e.src)
                .or_insert_with(|| Tensor::zeros(graph.out_shape(e.src)));
        }
        Carry {
            states: states.iter().map(|(k, v)| (*k, v.detach())).collect(),
            delayed,
        }
    }

    /// Tensors that influence later steps, in a fixed order.
    fn carried(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for s in self.states.values() {
            out.push(&s.u);
            out.push(&s.i);
        }
        out.extend(self.delayed.values());
        out
    }

    fn map_carried(&self, mut f: impl FnMut(&Tensor<F>) -> Result<Tensor<F>>) -> Result<Self> {
        let mut states = BTreeMap::new();
        for (k, s) in &self.states {
            states.insert(
                *k,
                NeuronState {
                    u: f(&s.u)?,
                    i: f(&s.i)?,
                    s: s.s.clone(),
                },
            );
        }
        let mut delayed = BTreeMap::new();
        for (k, v) in &self.delayed {
            delayed.insert(*k, f(v)?);
        }
        Ok(Carry { states, delayed })
    }

    fn tensor_count(&self) -> usize {
        self.states.len() * 3 + self.delayed.len()
    }
}

struct SimOut<F: Scalar> {
    carry: Carry<F>,
    outputs: BTreeMap<usize, Tensor<F>>,
    hidden: BTreeMap<usize, Tensor<F>>,
    /// Tape length where carried-state gradients from a later segment enter.
    mark: usize,
}

fn check_inputs<F: Scalar>(
    graph: &NetworkGraph<F>,
    input: &Tensor<F>,
    states: &StateMap<F>,
) -> Result<usize> {
    if input.rank() != graph.input_shape().len() + 1 || &input.shape()[1..] != graph.input_shape() {
        let mut want = vec![0];
        want.extend_from_slice(graph.input_shape());
        return Err(Error::shape("run input [T×...]", input.shape(), &want));
    }
    let ids = graph.stateful_nodes();
    if states.len() != ids.len() || !ids.iter().all(|id| states.contains_key(id)) {
        return Err(Error::Contract(format!(
            "initial states for nodes {:?} expected, got {:?}",
            ids,
            states.keys().collect::<Vec<_>>()
        )));
    }
    for (id, s) in states {
        for t in [&s.u, &s.i, &s.s] {
            if t.shape() != graph.out_shape(*id) {
                return Err(Error::shape(
                    "initial state",
                    graph.out_shape(*id),
                    t.shape(),
                ));
            }
        }
    }
    Ok(input.shape()[0])
}

fn rows<F: Scalar>(t: &Tensor<F>, start: usize, end: usize) -> Tensor<F> {
    let len = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * len..end * len].to_vec()).expect("row range in bounds")
}

fn concat_rows<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data).expect("consistent row blocks")
}

fn stack_detached<F: Scalar>(xs: &[Tensor<F>]) -> Tensor<F> {
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(xs[0].shape());
    let mut data = Vec::with_capacity(xs.len() * xs[0].numel());
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data).expect("equal shapes")
}

/// Prepends a leading extent to a shape.
fn batched(k: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![k];
    s.extend_from_slice(shape);
    s
}

/// Sum of a node's incoming values. `lead` is `Some(k)` for the batched
/// layer-by-layer form `[k × ...]`.
#[allow(clippy::too_many_arguments)]
fn gather<F: Scalar>(
    tape: &mut Tape<F>,
    graph: &NetworkGraph<F>,
    params: &ParamMap<F>,
    id: usize,
    external: &Tensor<F>,
    current: &[Option<Tensor<F>>],
    delayed: &BTreeMap<usize, Tensor<F>>,
    lead: Option<usize>,
) -> Result<Tensor<F>> {
    let mut acc: Option<Tensor<F>> = None;
    if graph.inputs().contains(&id) {
        acc = Some(external.clone());
    }
    for &k in graph.in_edges(id) {
        let e = graph.edges()[k];
        let src = if e.delay == 0 {
            current[e.src].as_ref().expect("topological order")
        } else {
            &delayed[&e.src]
        };
        let v = if e.projected {
            let w = &params[&ParamKey::Edge(k)];
            let src_n: usize = graph.out_shape(e.src).iter().product();
            let dst_shape = graph.in_shape(e.dst);
            let (flat, back) = match lead {
                Some(r) => (vec![r, src_n], batched(r, dst_shape)),
                None => (vec![src_n], dst_shape.to_vec()),
            };
            let x = tape.reshape(src, &flat)?;
            let y = tape.linear(&x, w)?;
            tape.reshape(&y, &back)?
        } else {
            src.clone()
        };
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(&a, &v)?,
        });
    }
    Ok(acc.unwrap_or_else(|| {
        let shape = graph.in_shape(id);
        match lead {
            Some(r) => Tensor::zeros(&batched(r, shape)),
            None => Tensor::zeros(shape),
        }
    }))
}

/// Applies a stateless layer to `x` (per step, or batched with `lead`).
fn apply_stateless<F: Scalar>(
    tape: &mut Tape<F>,
    graph: &NetworkGraph<F>,
    params: &ParamMap<F>,
    id: usize,
    x: &Tensor<F>,
    lead: Option<usize>,
) -> Result<Tensor<F>> {
    match graph.nodes()[id].kind {
        LayerKind::Linear { .. } => tape.linear(x, &params[&ParamKey::Node(id)]),
        LayerKind::Conv {
            stride, padding, ..
        } => tape.conv2d(x, &params[&ParamKey::Node(id)], stride, padding),
        LayerKind::Flatten => {
            let n: usize = graph.in_shape(id).iter().product();
            match lead {
                Some(r) => tape.reshape(x, &[r, n]),
                None => tape.reshape(x, &[n]),
            }
        }
        LayerKind::Lif { .. } => unreachable!("stateful layers are scanned"),
    }
}

fn lif_apply<F: Scalar>(
    tape: &mut Tape<F>,
    kind: &LayerKind,
    state: &NeuronState<F>,
    x: &Tensor<F>,
) -> Result<(NeuronState<F>, Tensor<F>)> {
    match kind {
        LayerKind::Lif {
            params,
            smooth: None,
            ..
        } => lif_step(tape, state, x, params),
        LayerKind::Lif {
            params,
            smooth: Some(sharpness),
            ..
        } => lif_smooth_step(tape, state, x, params, *sharpness),
        _ => unreachable!(),
    }
}

fn simulate<F: Scalar>(
    tape: &mut Tape<F>,
    graph: &NetworkGraph<F>,
    params: &ParamMap<F>,
    input: &Tensor<F>,
    carry: Carry<F>,
    plan: &ExecutionPlan,
    trace: bool,
) -> Result<SimOut<F>> {
    match plan.scheduler {
        Scheduler::StepByStep => simulate_steps(tape, graph, params, input, carry, trace),
        Scheduler::LayerByLayer => {
            simulate_layers(tape, graph, params, input, carry, plan.unroll, trace)
        }
    }
}

fn simulate_steps<F: Scalar>(
    tape: &mut Tape<F>,
    graph: &NetworkGraph<F>,
    params: &ParamMap<F>,
    input: &Tensor<F>,
    mut carry: Carry<F>,
    trace: bool,
) -> Result<SimOut<F>> {
    let steps = input.shape()[0];
    let n = graph.nodes().len();
    let mut per_step: Vec<Vec<Tensor<F>>> = vec![Vec::with_capacity(steps); n];
    for t in 0..steps {
        if t > 0 {
            carry = carry.map_carried(|v| tape.identity(v))?;
        }
        let external = input.row(t)?;
        let mut current: Vec<Option<Tensor<F>>> = vec![None; n];
        for &id in graph.topo_order() {
            let x = gather(
                tape,
                graph,
                params,
                id,
                &external,
                &current,
                &carry.delayed,
                None,
            )?;
            let kind = &graph.nodes()[id].kind;
            let out = if kind.is_stateful() {
                let (state, s) = lif_apply(tape, kind, &carry.states[&id], &x)?;
                carry.states.insert(id, state);
                s
            } else {
                apply_stateless(tape, graph, params, id, &x, None)?
            };
            current[id] = Some(out);
        }
        for (src, v) in carry.delayed.iter_mut() {
            *v = current[*src].clone().expect("every node runs each step");
        }
        for (id, out) in current.into_iter().enumerate() {
            if trace || graph.outputs().contains(&id) {
                per_step[id].push(out.expect("every node runs each step"));
            }
        }
    }
    let mark = tape.len();
    let mut outputs = BTreeMap::new();
    for &id in graph.outputs() {
        if let std::collections::btree_map::Entry::Vacant(e) = outputs.entry(id) {
            e.insert(tape.stack(&per_step[id])?);
        }
    }
    let mut hidden = BTreeMap::new();
    if trace {
        for (id, rows) in per_step.iter().enumerate() {
            if !graph.outputs().contains(&id) && graph.nodes()[id].kind.is_stateful() {
                hidden.insert(id, stack_detached(rows));
            }
        }
    }
    Ok(SimOut {
        carry,
        outputs,
        hidden,
        mark,
    })
}

fn simulate_layers<F: Scalar>(
    tape: &mut Tape<F>,
    graph: &NetworkGraph<F>,
    params: &ParamMap<F>,
    input: &Tensor<F>,
    mut carry: Carry<F>,
    unroll: usize,
    trace: bool,
) -> Result<SimOut<F>> {
    let steps = input.shape()[0];
    let n = graph.nodes().len();
    let mut values: Vec<Option<Tensor<F>>> = vec![None; n];
    for &id in graph.topo_order() {
        let x = gather(
            tape,
            graph,
            params,
            id,
            input,
            &values,
            &carry.delayed,
            Some(steps),
        )?;
        let kind = &graph.nodes()[id].kind;
        let out = if kind.is_stateful() {
            let mut state = carry.states[&id].clone();
            let mut spikes = Vec::with_capacity(steps);
            let mut t = 0;
            while t < steps {
                let end = (t + unroll).min(steps);
                while t < end {
                    if t > 0 {
                        state.u = tape.identity(&state.u)?;
                        state.i = tape.identity(&state.i)?;
                    }
                    let xt = tape.select(&x, t)?;
                    let (next, s) = lif_apply(tape, kind, &state, &xt)?;
                    state = next;
                    spikes.push(s);
                    t += 1;
                }
            }
            carry.states.insert(id, state);
            tape.stack(&spikes)?
        } else {
            apply_stateless(tape, graph, params, id, &x, Some(steps))?
        };
        values[id] = Some(out);
    }
    let mark = tape.len();
    let mut outputs = BTreeMap::new();
    let mut hidden = BTreeMap::new();
    for (id, v) in values.into_iter().enumerate() {
        let v = v.expect("every node runs");
        if graph.outputs().contains(&id) {
            outputs.insert(id, v);
        } else if trace && graph.nodes()[id].kind.is_stateful() {
            hidden.insert(id, v.detach());
        }
    }
    Ok(SimOut {
        carry,
        outputs,
        hidden,
        mark,
    })
}

/// Forward simulation without gradient recording.
pub fn run<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    input: &Tensor<F>,
    init_states: &StateMap<F>,
) -> Result<(StateMap<F>, SpikeRecord<F>)> {
    run_traced(graph, plan, input, init_states, false)
}

/// As [`run`], optionally recording every node's output over time.
pub fn run_traced<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    input: &Tensor<F>,
    init_states: &StateMap<F>,
    trace: bool,
) -> Result<(StateMap<F>, SpikeRecord<F>)> {
    let steps = check_inputs(graph, input, init_states)?;
    plan.validate(graph, steps)?;
    let mut tape = Tape::new();
    let params: ParamMap<F> = graph
        .params()
        .iter()
        .map(|(k, v)| (*k, v.detach()))
        .collect();
    let out = simulate(
        &mut tape,
        graph,
        &params,
        &input.detach(),
        Carry::initial(graph, init_states),
        plan,
        trace,
    )?;
    debug_assert!(tape.is_empty());
    Ok((
        out.carry.states,
        SpikeRecord {
            steps,
            outputs: out.outputs,
            hidden: out.hidden,
        },
    ))
}

/// Loss and parameter gradients by backpropagation through time.
///
/// With `plan.checkpoint_every` set, the forward pass keeps only the carried
/// state at segment boundaries and each segment is re-recorded during the
/// backward pass. The gradients are bit-identical to the unsegmented run.
pub fn run_with_checkpointing<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    input: &Tensor<F>,
    init_states: &StateMap<F>,
    loss_head: &dyn LossHead<F>,
) -> Result<GradOutput<F>> {
    let steps = check_inputs(graph, input, init_states)?;
    plan.validate(graph, steps)?;
    let input = input.detach();
    let every = plan.checkpoint_every.unwrap_or(steps);
    let bounds: Vec<(usize, usize)> = (0..steps)
        .step_by(every)
        .map(|s| (s, (s + every).min(steps)))
        .collect();
    let mut stats = CheckpointStats {
        segments: bounds.len(),
        ..Default::default()
    };

    let initial = Carry::initial(graph, init_states);
    let detached: ParamMap<F> = graph
        .params()
        .iter()
        .map(|(k, v)| (*k, v.detach()))
        .collect();

    // Forward: keep boundary carries and the output record only.
    let mut boundaries = vec![initial.clone()];
    let mut record_parts: BTreeMap<usize, Vec<Tensor<F>>> = BTreeMap::new();
    let mut single = None;
    if bounds.len() == 1 {
        let mut tape = Tape::new();
        let params = track_params(&mut tape, &detached);
        let out = simulate(&mut tape, graph, &params, &input, initial, plan, false)?;
        for (id, v) in &out.outputs {
            record_parts.insert(*id, vec![v.detach()]);
        }
        single = Some((tape, params, out));
    } else {
        let mut carry = initial;
        let mut tape = Tape::new();
        for (i, &(s, e)) in bounds.iter().enumerate() {
            let out = simulate(
                &mut tape,
                graph,
                &detached,
                &rows(&input, s, e),
                carry,
                plan,
                false,
            )?;
            for (id, v) in out.outputs {
                record_parts.entry(id).or_default().push(v);
            }
            carry = out.carry;
            if i + 1 < bounds.len() {
                boundaries.push(carry.clone());
                stats.boundary_tensors += carry.tensor_count();
            }
        }
        debug_assert!(tape.is_empty());
    }
    let record: BTreeMap<usize, Tensor<F>> = record_parts
        .into_iter()
        .map(|(id, parts)| (id, concat_rows(&parts)))
        .collect();

    // Loss on its own tape, with the record as leaves.
    let mut loss_tape = Tape::new();
    let leaves: BTreeMap<usize, Tensor<F>> = record
        .iter()
        .map(|(id, v)| (*id, loss_tape.param(v)))
        .collect();
    let loss = loss_head.loss(&mut loss_tape, &leaves)?;
    let loss_value = loss.item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss_value}")));
    }
    let loss_grads = loss_tape.backward(&loss)?;
    let record_grads: BTreeMap<usize, Tensor<F>> = leaves
        .iter()
        .map(|(id, leaf)| (*id, loss_grads.get(leaf).expect("record leaf").clone()))
        .collect();

    // Backward, last segment first.
    let mut acc: Option<ParamMap<F>> = None;
    let mut carry_grads: Option<Vec<Tensor<F>>> = None;
    for (seg, &(s, e)) in bounds.iter().enumerate().rev() {
        let (tape, params, out, leaves) = match single.take() {
            Some((tape, params, out)) => (tape, params, out, Vec::new()),
            None => {
                let mut tape = Tape::new();
                let params = track_params(&mut tape, &detached);
                let start = if seg == 0 {
                    boundaries[0].clone()
                } else {
                    boundaries[seg].map_carried(|v| Ok(tape.param(v)))?
                };
                let leaves: Vec<Tensor<F>> = if seg == 0 {
                    Vec::new()
                } else {
                    start.carried().into_iter().cloned().collect()
                };
                let out = simulate(
                    &mut tape,
                    graph,
                    &params,
                    &rows(&input, s, e),
                    start,
                    plan,
                    false,
                )?;
                (tape, params, out, leaves)
            }
        };
        let ts = tape.stats();
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(ts.nodes);
        stats.peak_saved_elements = stats.peak_saved_elements.max(ts.saved_elements);

        let end = tape.len();
        let mut seeds = Vec::new();
        if let Some(acc) = &acc {
            for (k, p) in &params {
                seeds.push(Seed {
                    node: p.node().expect("tracked parameter"),
                    grad: acc[k].clone(),
                    position: end,
                });
            }
        }
        for (id, v) in &out.outputs {
            if let Some(node) = v.node() {
                seeds.push(Seed {
                    node,
                    grad: rows(&record_grads[id], s, e),
                    position: end,
                });
            }
        }
        if let Some(cg) = carry_grads.take() {
            for (v, g) in out.carry.carried().into_iter().zip(cg) {
                if let Some(node) = v.node() {
                    seeds.push(Seed {
                        node,
                        grad: g,
                        position: out.mark,
                    });
                }
            }
        }
        let grads = tape.backward_seeded(seeds)?;
        acc = Some(
            params
                .iter()
                .map(|(k, p)| (*k, grads.get(p).expect("parameter leaf").clone()))
                .collect(),
        );
        if seg > 0 {
            carry_grads = Some(
                leaves
                    .iter()
                    .map(|l| grads.get(l).expect("carry leaf").clone())
                    .collect(),
            );
        }
    }

    let grads = acc.unwrap_or_default();
    Ok(GradOutput {
        loss: loss_value,
        grads,
        record: SpikeRecord {
            steps,
            outputs: record,
            hidden: BTreeMap::new(),
        },
        stats,
    })
}

fn track_params<F: Scalar>(tape: &mut Tape<F>, params: &ParamMap<F>) -> ParamMap<F> {
    params.iter().map(|(k, v)| (*k, tape.param(v))).collect()
}
