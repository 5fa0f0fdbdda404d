//! Loss heads, batch gradients, optimizers and the training loop.

pub mod gradcheck;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{
    init_states, run, run_with_checkpointing, ExecutionPlan, LossHead, SpikeRecord, StateMap,
};
use crate::fmt::fmt_g;
use crate::neurons::InitMode;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::topology::{NetworkGraph, ParamMap};

pub use optim::{optimizer_step, OptState, Optimizer};

/// Per-class spike counts summed over time, scored by softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct SpikeCountCrossEntropy<F: Scalar> {
    pub target: Tensor<F>,
    /// Output node to score; the first output when `None`.
    pub node: Option<usize>,
}

/// `0.5 * ||counts - target||^2` on the per-neuron spike counts.
#[derive(Debug, Clone)]
pub struct SpikeCountSquaredError<F: Scalar> {
    pub target: Tensor<F>,
    pub node: Option<usize>,
}

fn pick<F: Scalar>(
    outputs: &BTreeMap<usize, Tensor<F>>,
    node: Option<usize>,
) -> Result<&Tensor<F>> {
    match node {
        Some(id) => outputs
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("node {id} is not an output"))),
        None => outputs
            .values()
            .next()
            .ok_or_else(|| Error::Contract("record has no outputs".into())),
    }
}

fn spike_counts<F: Scalar>(
    tape: &mut Tape<F>,
    out: &Tensor<F>,
    target: &Tensor<F>,
) -> Result<Tensor<F>> {
    let steps = out.shape().first().copied().unwrap_or(0);
    if out.rank() < 2 || out.numel() != steps * target.numel() || target.rank() != 1 {
        return Err(Error::shape(
            "spike count loss",
            out.shape(),
            target.shape(),
        ));
    }
    if out.rank() == 2 {
        return tape.sum_axis(out, 0);
    }
    let flat = tape.reshape(out, &[steps, target.numel()])?;
    tape.sum_axis(&flat, 0)
}

impl<F: Scalar> LossHead<F> for SpikeCountCrossEntropy<F> {
    fn loss(&self, tape: &mut Tape<F>, outputs: &BTreeMap<usize, Tensor<F>>) -> Result<Tensor<F>> {
        let out = pick(outputs, self.node)?;
        let counts = spike_counts(tape, out, &self.target)?;
        tape.softmax_cross_entropy(&counts, &self.target)
    }
}

impl<F: Scalar> LossHead<F> for SpikeCountSquaredError<F> {
    fn loss(&self, tape: &mut Tape<F>, outputs: &BTreeMap<usize, Tensor<F>>) -> Result<Tensor<F>> {
        let out = pick(outputs, self.node)?;
        let counts = spike_counts(tape, out, &self.target)?;
        let d = tape.sub(&counts, &self.target)?;
        let sq = tape.mul(&d, &d)?;
        let total = tape.sum_all(&sq)?;
        tape.scale(&total, F::from_f64(0.5))
    }
}

/// Cross-entropy of the summed spike counts of the first output node.
pub fn spike_count_ce_loss<F: Scalar>(record: &SpikeRecord<F>, target: &Tensor<F>) -> Result<F> {
    let head = SpikeCountCrossEntropy {
        target: target.clone(),
        node: None,
    };
    let mut tape = Tape::new();
    let outputs = record
        .outputs
        .iter()
        .map(|(k, v)| (*k, v.detach()))
        .collect();
    head.loss(&mut tape, &outputs)?.item()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    pub fn head<F: Scalar>(self, target: &Tensor<F>) -> Box<dyn LossHead<F>> {
        match self {
            LossKind::CrossEntropy => Box::new(SpikeCountCrossEntropy {
                target: target.clone(),
                node: None,
            }),
            LossKind::SquaredError => Box::new(SpikeCountSquaredError {
                target: target.clone(),
                node: None,
            }),
        }
    }
}

/// One training example: an input sequence `[T × input shape]` and a target
/// vector (one-hot for classification).
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub input: Tensor<F>,
    pub target: Tensor<F>,
}

impl<F: Scalar> Sample<F> {
    pub fn labeled(input: Tensor<F>, class: usize, classes: usize) -> Result<Self> {
        Ok(Sample {
            input,
            target: Tensor::one_hot(class, classes)?,
        })
    }

    /// Index of the largest target entry.
    pub fn label(&self) -> usize {
        argmax(self.target.data())
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Class predicted by a record: argmax of the first output's spike counts.
pub fn predict<F: Scalar>(record: &SpikeRecord<F>) -> usize {
    let out = record.first_output();
    let c = out.numel() / out.shape()[0];
    let mut counts = vec![F::ZERO; c];
    for t in 0..out.shape()[0] {
        for (j, cnt) in counts.iter_mut().enumerate() {
            *cnt += out.data()[t * c + j];
        }
    }
    argmax(&counts)
}

/// Mean batch loss and gradients.
#[derive(Debug, Clone)]
pub struct BatchGrad<F: Scalar> {
    pub loss: F,
    pub grads: ParamMap<F>,
    pub per_sample_loss: Vec<F>,
    pub predictions: Vec<usize>,
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
/// Samples are processed in parallel; their gradients are summed in batch
/// order and divided by the batch size.
pub fn loss_and_grad<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    batch: &[Sample<F>],
    states: &StateMap<F>,
    loss: LossKind,
) -> Result<BatchGrad<F>> {
    if batch.is_empty() {
        return Err(Error::validation(
            "batch",
            "must contain at least one sample",
        ));
    }
    let results: Vec<_> = batch
        .par_iter()
        .map(|s| {
            run_with_checkpointing(graph, plan, &s.input, states, loss.head(&s.target).as_ref())
        })
        .collect::<Result<_>>()?;
    let b = F::from_f64(batch.len() as f64);
    let mut total = F::ZERO;
    let mut sum: BTreeMap<_, Vec<F>> = BTreeMap::new();
    for r in &results {
        total += r.loss;
        for (k, g) in &r.grads {
            let acc = sum.entry(*k).or_insert_with(|| vec![F::ZERO; g.numel()]);
            for (a, &x) in acc.iter_mut().zip(g.data()) {
                *a += x;
            }
        }
    }
    let grads = sum
        .into_iter()
        .map(|(k, v)| {
            let shape = results[0].grads[&k].shape().to_vec();
            Ok((
                k,
                Tensor::new(shape, v.into_iter().map(|x| x / b).collect())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(BatchGrad {
        loss: total / b,
        grads,
        per_sample_loss: results.iter().map(|r| r.loss).collect(),
        predictions: results.iter().map(|r| predict(&r.record)).collect(),
    })
}

/// Mean loss over `batch` from plain forward runs.
pub fn batch_loss<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    batch: &[Sample<F>],
    states: &StateMap<F>,
    loss: LossKind,
) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::validation(
            "batch",
            "must contain at least one sample",
        ));
    }
    let mut plain = *plan;
    plain.checkpoint_every = None;
    let mut total = F::ZERO;
    for s in batch {
        let (_, record) = run(graph, &plain, &s.input, states)?;
        let mut tape = Tape::new();
        total += loss
            .head(&s.target)
            .loss(&mut tape, &record.outputs)?
            .item()?;
    }
    Ok(total / F::from_f64(batch.len() as f64))
}

/// Central finite differences of the mean batch loss, one parameter scalar
/// at a time. Intended for smooth-twin graphs at 64-bit precision.
pub fn fd_gradient<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    batch: &[Sample<F>],
    states: &StateMap<F>,
    loss: LossKind,
    eps: f64,
) -> Result<ParamMap<F>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::validation(
            "eps",
            format!("must be positive, got {eps}"),
        ));
    }
    let mut out = BTreeMap::new();
    let mut g = graph.clone();
    for (key, base) in graph.params() {
        let mut grad = Vec::with_capacity(base.numel());
        for j in 0..base.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = base.to_vec();
                data[j] = F::from_f64(data[j].to_f64() + delta);
                g.set_param(*key, Tensor::new(base.shape().to_vec(), data)?)?;
                Ok(batch_loss(&g, plan, batch, states, loss)?.to_f64())
            };
            let hi = eval(eps)?;
            let lo = eval(-eps)?;
            grad.push(F::from_f64((hi - lo) / (2.0 * eps)));
        }
        g.set_param(*key, base.clone())?;
        out.insert(*key, Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plan: ExecutionPlan,
    /// Initial neuron state for every batch.
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "learning_rate",
                format!(
                    "must be finite and not negative, got {}",
                    self.learning_rate
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        self.optimizer.validate()?;
        self.init.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub wall_ms: f64,
}

/// Trains `graph` on `dataset`, returning the trained graph and one metrics
/// row per epoch. Loss and accuracy come from the forward passes made while
/// training. Stops after the last epoch or with `Error::Numerical` if a batch
/// loss is not finite.
pub fn train<F: Scalar>(
    graph: &NetworkGraph<F>,
    dataset: &[Sample<F>],
    config: &TrainConfig,
) -> Result<(NetworkGraph<F>, Vec<EpochMetrics>)> {
    train_with(graph, dataset, config, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<F: Scalar>(
    graph: &NetworkGraph<F>,
    dataset: &[Sample<F>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(NetworkGraph<F>, Vec<EpochMetrics>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "must not be empty"));
    }
    let t = dataset[0].input.shape().first().copied().unwrap_or(0);
    config.plan.validate(graph, t)?;
    let mut g = graph.clone();
    let mut opt = OptState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = vec![F::ZERO; dataset.len()];
        let mut correct = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample<F>> = idx.iter().map(|&i| dataset[i].clone()).collect();
            let states = init_states(&g, config.init, rng.gen())?;
            let out = match loss_and_grad(&g, &config.plan, &batch, &states, config.loss) {
                Err(e) if e.is_numerical() => {
                    return Err(Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))
                }
                r => r?,
            };
            if !out.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, batch {b}: loss is {}",
                    out.loss
                )));
            }
            if let Some((k, _)) = out.grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, batch {b}: non-finite gradient for {k:?}"
                )));
            }
            for (k, &i) in idx.iter().enumerate() {
                losses[i] = out.per_sample_loss[k];
                if out.predictions[k] == batch[k].label() {
                    correct += 1;
                }
            }
            let next = optimizer_step(
                g.params(),
                &out.grads,
                &mut opt,
                &config.optimizer,
                config.learning_rate,
            )?;
            g.set_params(next)?;
        }
        let mut total = 0.0;
        for l in &losses {
            total += l.to_f64();
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: total / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((g, metrics))
}

/// Accuracy of plain forward runs with the given initial states.
pub fn evaluate<F: Scalar>(
    graph: &NetworkGraph<F>,
    plan: &ExecutionPlan,
    dataset: &[Sample<F>],
    states: &StateMap<F>,
) -> Result<f64> {
    let mut plain = *plan;
    plain.checkpoint_every = None;
    let correct: Vec<bool> = dataset
        .par_iter()
        .map(|s| Ok(predict(&run(graph, &plain, &s.input, states)?.1) == s.label()))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / dataset.len().max(1) as f64)
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss", "accuracy", "wall_ms"])?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            fmt_g(m.mean_loss),
            fmt_g(m.accuracy),
            fmt_g(m.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_metrics_csv(metrics, std::io::BufWriter::new(f))
}
