//! Timing harness comparing schedulers and unroll factors.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::gen_random_spikes;
use crate::error::{Error, Result};
use crate::executor::{init_states, run, ExecutionPlan, Scheduler};
use crate::fmt::fmt_g;
use crate::neurons::{InitMode, LifParams};
use crate::tensor::{Scalar, Tensor};
use crate::topology::{Layer, NetworkGraph};
use crate::training::{loss_and_grad, LossKind, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    ForwardBackward,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::ForwardBackward => "forward_backward",
        }
    }
}

impl Scheduler {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheduler::StepByStep => "step_by_step",
            Scheduler::LayerByLayer => "layer_by_layer",
        }
    }
}

fn default_version() -> u32 {
    1
}
fn default_width() -> usize {
    256
}
fn default_depth() -> usize {
    2
}
fn default_channels() -> usize {
    8
}
fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_image() -> usize {
    48
}
fn default_t() -> usize {
    100
}
fn default_batch() -> usize {
    8
}
fn default_repeats() -> usize {
    10
}
fn default_schedulers() -> Vec<Scheduler> {
    vec![Scheduler::StepByStep, Scheduler::LayerByLayer]
}
fn default_unroll() -> Vec<usize> {
    vec![1, 8]
}
fn default_phases() -> Vec<Phase> {
    vec![Phase::Forward, Phase::ForwardBackward]
}
fn default_rate() -> f64 {
    0.1
}

/// Benchmark configuration. Every field has a desk-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default = "default_version")]
    pub version: u32,
    pub arch: Arch,
    /// LIF neurons per MLP layer; also the MLP input width.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Number of LIF layers.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    /// Side of the square two-channel CNN input.
    #[serde(default = "default_image")]
    pub image: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_schedulers")]
    pub schedulers: Vec<Scheduler>,
    /// Unroll factors timed for layer_by_layer.
    #[serde(default = "default_unroll")]
    pub unroll: Vec<usize>,
    #[serde(default = "default_phases")]
    pub phases: Vec<Phase>,
    #[serde(default = "default_rate")]
    pub input_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BenchSpec {
    /// Two LIF layers of 256 neurons, T=100, batch 8, ten repeats.
    pub fn desk_mlp() -> Self {
        BenchSpec {
            version: 1,
            arch: Arch::Mlp,
            width: default_width(),
            depth: default_depth(),
            channels: default_channels(),
            kernel: default_kernel(),
            stride: 1,
            image: default_image(),
            t: default_t(),
            batch_size: default_batch(),
            repeats: default_repeats(),
            schedulers: default_schedulers(),
            unroll: default_unroll(),
            phases: default_phases(),
            input_rate: default_rate(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::validation(
                "bench spec version",
                format!("expected 1, got {}", self.version),
            ));
        }
        if self.repeats < 3 {
            return Err(Error::validation(
                "repeats",
                format!("need at least 3, got {}", self.repeats),
            ));
        }
        let positive = [
            ("t", self.t),
            ("batch_size", self.batch_size),
            ("width", self.width),
            ("depth", self.depth),
            ("channels", self.channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("image", self.image),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(
                    "bench spec",
                    format!("{name} must be positive"),
                ));
            }
        }
        if self.schedulers.is_empty() || self.phases.is_empty() {
            return Err(Error::validation(
                "bench spec",
                "schedulers and phases must not be empty",
            ));
        }
        if self.schedulers.contains(&Scheduler::LayerByLayer) && self.unroll.is_empty() {
            return Err(Error::validation("unroll", "list must not be empty"));
        }
        if self.unroll.contains(&0) {
            return Err(Error::validation("unroll", "factors must be positive"));
        }
        if !(0.0..=1.0).contains(&self.input_rate) {
            return Err(Error::validation("input_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The benchmarked network.
    pub fn graph<F: Scalar>(&self) -> Result<NetworkGraph<F>> {
        let lif = LifParams::new(0.9, 0.8)?;
        match self.arch {
            Arch::Mlp => {
                let mut layers = Vec::new();
                for _ in 0..self.depth {
                    layers.push(Layer::linear(self.width, self.width));
                    layers.push(Layer::lif(&[self.width], lif));
                }
                NetworkGraph::sequential(&[self.width], layers, self.seed)
            }
            Arch::Cnn => {
                let pad = self.kernel / 2;
                let mut layers = Vec::new();
                let (mut c, mut side) = (2, self.image);
                for _ in 0..self.depth {
                    let out =
                        crate::kernels::ConvGeom::out_extent(side, self.kernel, self.stride, pad)
                            .ok_or_else(|| {
                            Error::validation("bench spec", "kernel larger than image")
                        })?;
                    layers.push(Layer::conv(c, self.channels, self.kernel, self.stride, pad));
                    layers.push(Layer::lif(&[self.channels, out, out], lif));
                    c = self.channels;
                    side = out;
                }
                NetworkGraph::sequential(&[2, self.image, self.image], layers, self.seed)
            }
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        match self.arch {
            Arch::Mlp => vec![self.width],
            Arch::Cnn => vec![2, self.image, self.image],
        }
    }

    /// Random input batch with random class targets.
    pub fn batch<F: Scalar>(&self, graph: &NetworkGraph<F>) -> Result<Vec<Sample<F>>> {
        let shape = self.input_shape();
        let n: usize = shape.iter().product();
        let classes: usize = graph
            .out_shape(*graph.outputs().last().unwrap())
            .iter()
            .product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let flat: Tensor<F> = gen_random_spikes(n, self.t, self.input_rate, rng.gen())?;
            let mut full = vec![self.t];
            full.extend_from_slice(&shape);
            let input = flat.reshaped(&full)?;
            out.push(Sample {
                input,
                target: Tensor::one_hot(rng.gen_range(0..classes), classes)?,
            });
        }
        Ok(out)
    }

    /// Timed cells in a fixed order: scheduler, then unroll, then phase.
    pub fn cells(&self) -> Vec<(Scheduler, usize, Phase)> {
        let mut out = Vec::new();
        for &s in &self.schedulers {
            let unrolls: Vec<usize> = match s {
                Scheduler::StepByStep => vec![1],
                Scheduler::LayerByLayer => self.unroll.clone(),
            };
            for u in unrolls {
                for &p in &self.phases {
                    out.push((s, u, p));
                }
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: BenchSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub scheduler: Scheduler,
    pub unroll: usize,
    pub phase: Phase,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<TimingRow>,
    /// Largest output difference between any plan and the first one.
    pub max_output_diff: f64,
}

/// Percentile `q` in [0, 1] of sorted data, interpolating linearly between
/// closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn plan_for(s: Scheduler, unroll: usize) -> ExecutionPlan {
    match s {
        Scheduler::StepByStep => ExecutionPlan::step_by_step(),
        Scheduler::LayerByLayer => ExecutionPlan::layer_by_layer(unroll),
    }
}

fn forward_all<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    batch: &[Sample<F>],
    states: &crate::executor::StateMap<F>,
) -> Result<Vec<Tensor<F>>> {
    batch
        .iter()
        .map(|s| Ok(run(graph, plan, &s.input, states)?.1.first_output().clone()))
        .collect()
}

/// Runs the benchmark on a single worker thread. Outputs of every plan are
/// compared once before timing starts; each timed repeat then visits every
/// cell in turn after one discarded warm-up pass per cell.
pub fn bench<F: Scalar>(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| bench_inner::<F>(spec))
}

fn bench_inner<F: Scalar>(spec: &BenchSpec) -> Result<BenchReport> {
    let graph: NetworkGraph<F> = spec.graph()?;
    let batch = spec.batch(&graph)?;
    let states = init_states(&graph, InitMode::Zeros, spec.seed)?;
    let cells = spec.cells();

    let mut reference: Option<Vec<Tensor<F>>> = None;
    let mut max_diff = 0.0f64;
    for &(s, u, _) in &cells {
        let outs = forward_all(&graph, &plan_for(s, u), &batch, &states)?;
        match &reference {
            None => reference = Some(outs),
            Some(r) => {
                for (a, b) in r.iter().zip(&outs) {
                    max_diff = max_diff.max(a.max_abs_diff(b).unwrap_or(f64::INFINITY));
                }
            }
        }
    }
    if max_diff >= 1e-6 {
        return Err(Error::Numerical(format!(
            "plans disagree on outputs (max difference {max_diff})"
        )));
    }

    let time_cell = |s: Scheduler, u: usize, p: Phase| -> Result<f64> {
        let plan = plan_for(s, u);
        let start = Instant::now();
        match p {
            Phase::Forward => {
                std::hint::black_box(forward_all(&graph, &plan, &batch, &states)?);
            }
            Phase::ForwardBackward => {
                std::hint::black_box(loss_and_grad(
                    &graph,
                    &plan,
                    &batch,
                    &states,
                    LossKind::CrossEntropy,
                )?);
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for &(s, u, p) in &cells {
        time_cell(s, u, p)?;
    }
    let mut samples = vec![Vec::with_capacity(spec.repeats); cells.len()];
    for _ in 0..spec.repeats {
        for (c, &(s, u, p)) in cells.iter().enumerate() {
            samples[c].push(time_cell(s, u, p)?);
        }
    }
    let rows = cells
        .iter()
        .zip(samples)
        .map(|(&(scheduler, unroll, phase), mut ms)| {
            ms.sort_by(f64::total_cmp);
            TimingRow {
                scheduler,
                unroll,
                phase,
                median_ms: percentile(&ms, 0.5),
                p10_ms: percentile(&ms, 0.1),
                p90_ms: percentile(&ms, 0.9),
            }
        })
        .collect();
    Ok(BenchReport {
        rows,
        max_output_diff: max_diff,
    })
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scheduler",
        "unroll",
        "phase",
        "median_ms",
        "p10_ms",
        "p90_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.scheduler.as_str().to_string(),
            r.unroll.to_string(),
            r.phase.as_str().to_string(),
            fmt_g(r.median_ms),
            fmt_g(r.p10_ms),
            fmt_g(r.p90_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_timing_csv(rows: &[TimingRow], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_timing_csv(rows, std::io::BufWriter::new(f))
}
