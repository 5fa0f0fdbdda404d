//! Gradient verification: automatic differentiation against finite
//! differences on smooth-twin networks, and against a hand-unrolled chain
//! rule on a single hard-threshold neuron.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_gradient, loss_and_grad, LossKind, Sample};
use crate::error::Result;
use crate::executor::{init_states, ExecutionPlan};
use crate::neurons::{InitMode, LifParams};
use crate::surrogate::{SurrogateFn, SurrogateKind};
use crate::tensor::Tensor;
use crate::topology::{Layer, NetworkGraph, ParamKey, ParamMap};

/// Denominator floor for relative errors, so that gradients near zero are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

/// Pass threshold for the finite-difference comparison.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Pass threshold for the hand-unrolled oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub label: String,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<ParamError>,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn from_entries(entries: Vec<ParamError>, threshold: f64) -> Self {
        let max_rel = entries.iter().map(|e| e.max_rel).fold(0.0, f64::max);
        let mean_rel = if entries.is_empty() {
            0.0
        } else {
            entries.iter().map(|e| e.mean_rel).sum::<f64>() / entries.len() as f64
        };
        GradReport {
            entries,
            max_rel,
            mean_rel,
            threshold,
            passed: max_rel < threshold,
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "  {:<28} max_rel={:.3e} mean_rel={:.3e}",
                e.label, e.max_rel, e.mean_rel
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (threshold {:.0e}): {}",
            self.max_rel,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Per-parameter relative errors between two gradient maps.
pub fn compare(prefix: &str, ad: &ParamMap<f64>, fd: &ParamMap<f64>) -> Vec<ParamError> {
    ad.iter()
        .map(|(k, a)| {
            let b = &fd[k];
            let errs: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| rel_error(x, y))
                .collect();
            let key = match k {
                ParamKey::Node(n) => format!("node {n}"),
                ParamKey::Edge(e) => format!("edge {e}"),
            };
            ParamError {
                label: format!("{prefix} {key}"),
                max_rel: errs.iter().copied().fold(0.0, f64::max),
                mean_rel: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
            }
        })
        .collect()
}

/// One smooth-twin configuration for the finite-difference suite.
#[derive(Debug, Clone)]
pub struct SmoothCase {
    pub label: String,
    pub graph: NetworkGraph<f64>,
    pub plan: ExecutionPlan,
    pub batch: Vec<Sample<f64>>,
}

const SUITE_SURROGATES: [SurrogateKind; 3] = [
    SurrogateKind::Superspike,
    SurrogateKind::SigmoidDerivative,
    SurrogateKind::Arctan,
];

/// Six random smooth-twin MLPs: one to three LIF layers of width 2 to 8,
/// T in {3, 10}. The last case adds delayed feedback from the output layer
/// to the first layer.
pub fn smooth_cases(seed: u64) -> Result<Vec<SmoothCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for idx in 0..6 {
        let depth = 1 + idx % 3;
        let steps = if idx % 2 == 0 { 3 } else { 10 };
        let n_in = rng.gen_range(2..=8);
        let kind = SUITE_SURROGATES[rng.gen_range(0..SUITE_SURROGATES.len())];
        let params = LifParams::new(0.9, 0.8)?.with_surrogate(SurrogateFn::new(kind, 10.0)?);
        let mut layers = Vec::new();
        let mut width = n_in;
        let mut widths = Vec::new();
        for _ in 0..depth {
            let next = rng.gen_range(2..=8);
            layers.push(Layer::linear(width, next));
            layers.push(Layer::lif(&[next], params));
            widths.push(next);
            width = next;
        }
        let recurrent = idx == 5;
        let feedback = if recurrent {
            vec![(layers.len() - 1, 0)]
        } else {
            Vec::new()
        };
        let base =
            NetworkGraph::<f64>::sequential_recurrent(&[n_in], layers, &feedback, rng.gen())?;
        let mut graph = base.smooth_twin(4.0)?;
        let scaled: ParamMap<f64> = graph
            .params()
            .iter()
            .map(|(k, v)| {
                let data: Vec<f64> = v.data().iter().map(|x| 2.0 * x).collect();
                (
                    *k,
                    Tensor::new(v.shape().to_vec(), data).expect("same shape"),
                )
            })
            .collect();
        graph.set_params(scaled)?;
        let plan = match idx {
            1 => ExecutionPlan::layer_by_layer(2),
            3 => ExecutionPlan::step_by_step().with_checkpoint(4),
            _ => ExecutionPlan::step_by_step(),
        };
        let classes = width;
        let mut batch = Vec::new();
        for _ in 0..2 {
            let data: Vec<f64> = (0..steps * n_in)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let input = Tensor::new(vec![steps, n_in], data)?;
            batch.push(Sample::labeled(input, rng.gen_range(0..classes), classes)?);
        }
        cases.push(SmoothCase {
            label: format!(
                "arch{idx} {}x{:?} T={steps}{}",
                n_in,
                widths,
                if recurrent { " fb" } else { "" }
            ),
            graph,
            plan,
            batch,
        });
    }
    Ok(cases)
}

/// Automatic vs finite-difference gradients over [`smooth_cases`].
pub fn smooth_suite(seed: u64, eps: f64) -> Result<GradReport> {
    let mut entries = Vec::new();
    for case in smooth_cases(seed)? {
        let states = init_states(&case.graph, InitMode::Zeros, 0)?;
        let ad = loss_and_grad(
            &case.graph,
            &case.plan,
            &case.batch,
            &states,
            LossKind::CrossEntropy,
        )?;
        let fd = fd_gradient(
            &case.graph,
            &case.plan,
            &case.batch,
            &states,
            LossKind::CrossEntropy,
            eps,
        )?;
        entries.extend(compare(&case.label, &ad.grads, &fd));
    }
    Ok(GradReport::from_entries(entries, FD_TOLERANCE))
}

/// Weight, inputs and target count of the single-neuron oracle.
pub const ORACLE_WEIGHT: f64 = 0.9;
pub const ORACLE_INPUTS: [f64; 3] = [1.2, 0.7, 1.5];
pub const ORACLE_TARGET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleReport {
    pub autodiff: f64,
    pub hand: f64,
    pub abs_error: f64,
    pub passed: bool,
}

/// Network of the single-neuron oracle: `linear(1,1) -> LIF(1)` with decays
/// 0.9 and 0.8, threshold 1 and a superspike surrogate of slope 10.
pub fn oracle_graph() -> Result<NetworkGraph<f64>> {
    let params = LifParams::new(0.9, 0.8)?;
    let mut g =
        NetworkGraph::sequential(&[1], vec![Layer::linear(1, 1), Layer::lif(&[1], params)], 0)?;
    g.set_param(
        ParamKey::Node(0),
        Tensor::new(vec![1, 1], vec![ORACLE_WEIGHT])?,
    )?;
    Ok(g)
}

/// dL/dw for `L = 0.5 (count - target)^2` by forward-mode tangents of the
/// recurrence, written out by hand in plain `f64`.
pub fn hand_unrolled_gradient(w: f64, x: &[f64], target: f64) -> f64 {
    let (alpha, beta, thr, slope) = (0.9, 0.8, 1.0, 10.0);
    let surrogate = |v: f64| 1.0 / (1.0 + slope * v.abs()).powi(2);
    let (mut u, mut i) = (0.0, 0.0);
    let (mut du, mut di) = (0.0, 0.0);
    let (mut count, mut dcount) = (0.0, 0.0);
    for &xt in x {
        i = beta * i + w * xt;
        di = beta * di + xt;
        let p = alpha * u + i;
        let dp = alpha * du + di;
        let s = if p >= thr { 1.0 } else { 0.0 };
        let ds = surrogate(p - thr) * dp;
        u = p - thr * s;
        du = dp - thr * ds;
        count += s;
        dcount += ds;
    }
    (count - target) * dcount
}

pub fn hard_oracle() -> Result<OracleReport> {
    let g = oracle_graph()?;
    let input = Tensor::new(vec![ORACLE_INPUTS.len(), 1], ORACLE_INPUTS.to_vec())?;
    let sample = Sample {
        input,
        target: Tensor::new(vec![1], vec![ORACLE_TARGET])?,
    };
    let states = init_states(&g, InitMode::Zeros, 0)?;
    let out = loss_and_grad(
        &g,
        &ExecutionPlan::step_by_step(),
        &[sample],
        &states,
        LossKind::SquaredError,
    )?;
    let autodiff = out.grads[&ParamKey::Node(0)].data()[0];
    let hand = hand_unrolled_gradient(ORACLE_WEIGHT, &ORACLE_INPUTS, ORACLE_TARGET);
    let abs_error = (autodiff - hand).abs();
    Ok(OracleReport {
        autodiff,
        hand,
        abs_error,
        passed: abs_error < ORACLE_TOLERANCE,
    })
}

/// Both checks, as run by the command-line `gradcheck`.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub oracle: OracleReport,
    pub smooth: GradReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.oracle.passed && self.smooth.passed
    }
}

pub fn run_suite(seed: u64, eps: f64) -> Result<SuiteReport> {
    Ok(SuiteReport {
        oracle: hard_oracle()?,
        smooth: smooth_suite(seed, eps)?,
    })
}
