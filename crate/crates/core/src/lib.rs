//! Discrete-time spiking neural networks with surrogate-gradient training.

pub mod bench;
pub mod data;
pub mod error;
pub mod executor;
pub mod fmt;
pub mod kernels;
pub mod neurons;
pub mod surrogate;
pub mod tape;
pub mod tensor;
pub mod topology;
pub mod training;

pub use bench::{bench, BenchReport, BenchSpec, Phase, TimingRow};
pub use data::{gen_random_spikes, gen_toy, load_dataset, save_dataset};
pub use error::{Error, Result};
pub use executor::{
    init_states, run, run_traced, run_with_checkpointing, CheckpointStats, ExecutionPlan,
    GradOutput, LossHead, Scheduler, SpikeRecord, StateMap,
};
pub use neurons::{init_state, InitMode, LifParams, NeuronState, ResetMode};
pub use surrogate::{SurrogateFn, SurrogateKind};
pub use tape::{Gradients, NodeId, Seed, Tape, TapeStats};
pub use tensor::{Precision, Scalar, Tensor};
pub use topology::{Edge, GraphSpec, Layer, LayerKind, NetworkGraph, ParamKey, ParamMap};
pub use training::{
    evaluate, loss_and_grad, train, train_with, BatchGrad, EpochMetrics, LossKind, Sample,
    TrainConfig,
};
pub use training::{optimizer_step, OptState, Optimizer};
