use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use spikegrad::bench::save_timing_csv;
use spikegrad::training::gradcheck::run_suite;
use spikegrad::training::save_metrics_csv;
use spikegrad::{
    bench, gen_toy, init_states, load_dataset, run_traced, train, BenchSpec, Error, ExecutionPlan,
    Layer, LifParams, NetworkGraph, Precision, Result, Sample, Scalar, Tensor, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "spikegrad",
    version,
    about = "Spiking network simulation and training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the schedulers on a benchmark spec and write a timing CSV.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `toy` or the path of a dataset JSON file.
        #[arg(long, default_value = "toy")]
        data: String,
        #[arg(long)]
        metrics: PathBuf,
        /// Write the trained graph here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run the gradient oracle suite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a graph on a dense spike raster (one CSV row per step).
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use the layer-by-layer scheduler with this unroll.
        #[arg(long)]
        unroll: Option<usize>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    version: u32,
    train: TrainConfig,
    model: ModelSpec,
    #[serde(default)]
    toy: ToySpec,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_lif")]
        lif: LifParams,
    },
    Graph(PathBuf),
}

fn default_lif() -> LifParams {
    LifParams::new(0.9, 0.8).expect("valid defaults")
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ToySpec {
    classes: usize,
    n_in: usize,
    t: usize,
    samples_per_class: usize,
    seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 3,
            n_in: 30,
            t: 20,
            samples_per_class: 100,
            seed: 1,
        }
    }
}

enum Failure {
    Usage(String),
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn cmd_bench(spec: &Path, out: &Path) -> std::result::Result<(), Failure> {
    let spec: BenchSpec = BenchSpec::load(spec)?;
    let report = match Precision::from_env()? {
        Precision::F32 => bench::<f32>(&spec)?,
        Precision::F64 => bench::<f64>(&spec)?,
    };
    save_timing_csv(&report.rows, out)?;
    for r in &report.rows {
        println!(
            "{:<14} unroll={:<3} {:<16} median {:.3} ms",
            r.scheduler.as_str(),
            r.unroll,
            r.phase.as_str(),
            r.median_ms
        );
    }
    Ok(())
}

fn cmd_train<F: Scalar>(
    config: &Path,
    data: &str,
    metrics: &Path,
    save: Option<&Path>,
) -> std::result::Result<(), Failure> {
    let file: TrainFile = read_json(config)?;
    if file.version != 1 {
        return Err(Failure::Usage(format!(
            "train config version must be 1, got {}",
            file.version
        )));
    }
    let dataset: Vec<Sample<F>> = if data == "toy" {
        let t = &file.toy;
        gen_toy(t.classes, t.n_in, t.t, t.samples_per_class, t.seed)?
    } else {
        load_dataset(data)?
    };
    let first = dataset
        .first()
        .ok_or_else(|| Failure::Usage("dataset is empty".into()))?;
    let graph: NetworkGraph<F> = match &file.model {
        ModelSpec::Mlp { hidden, seed, lif } => {
            let mut layers = Vec::new();
            let mut w = first.input.numel() / first.input.shape()[0];
            for &h in hidden.iter().chain([first.target.numel()].iter()) {
                layers.push(Layer::linear(w, h));
                layers.push(Layer::lif(&[h], *lif));
                w = h;
            }
            NetworkGraph::sequential(
                &[first.input.numel() / first.input.shape()[0]],
                layers,
                *seed,
            )?
        }
        ModelSpec::Graph(p) => NetworkGraph::load(relative_to(config, p))?,
    };
    let (trained, rows) = train(&graph, &dataset, &file.train)?;
    save_metrics_csv(&rows, metrics)?;
    if let Some(last) = rows.last() {
        println!(
            "epochs {} final loss {:.6} accuracy {:.4}",
            rows.len(),
            last.mean_loss,
            last.accuracy
        );
    }
    if let Some(p) = save {
        trained.save(p)?;
    }
    Ok(())
}

fn cmd_gradcheck(eps: f64, seed: u64) -> std::result::Result<(), Failure> {
    let report = run_suite(seed, eps)?;
    let o = &report.oracle;
    println!(
        "hard-threshold oracle: autodiff {:.12} hand {:.12} abs_error {:.3e}: {}",
        o.autodiff,
        o.hand,
        o.abs_error,
        if o.passed { "PASS" } else { "FAIL" }
    );
    println!("smooth-twin finite differences (eps {eps:e}, seed {seed}):");
    println!("{}", report.smooth);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("gradient check failed".into()))
    }
}

fn read_raster<F: Scalar>(path: &Path, shape: &[usize]) -> Result<Tensor<F>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut data = Vec::new();
    let mut steps = 0;
    let n: usize = shape.iter().product();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Validation {
                what: "input raster",
                reason: format!(
                    "row {} has {} columns, graph input has {n}",
                    steps + 1,
                    rec.len()
                ),
            });
        }
        for v in rec.iter() {
            data.push(v.parse::<f64>().map_err(|e| Error::Validation {
                what: "input raster",
                reason: format!("row {}: '{v}': {e}", steps + 1),
            })?);
        }
        steps += 1;
    }
    let mut full = vec![steps];
    full.extend_from_slice(shape);
    Tensor::from_f64(full, &data)
}

fn cmd_simulate<F: Scalar>(
    graph: &Path,
    input: &Path,
    trace: Option<&Path>,
    unroll: Option<usize>,
) -> std::result::Result<(), Failure> {
    let g: NetworkGraph<F> = NetworkGraph::load(graph)?;
    let x: Tensor<F> = read_raster(input, g.input_shape())?;
    let plan = unroll.map_or_else(ExecutionPlan::step_by_step, ExecutionPlan::layer_by_layer);
    let states = init_states(&g, Default::default(), 0)?;
    let (_, rec) = run_traced(&g, &plan, &x, &states, trace.is_some())?;
    for &node in g.outputs() {
        let out = rec.output(node).expect("output recorded");
        let total: f64 = out.to_f64_vec().iter().sum();
        println!("node {node}: {total} spikes over {} steps", x.shape()[0]);
    }
    if let Some(p) = trace {
        rec.save_trace_csv(p)?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    let precision = Precision::from_env()?;
    match cmd {
        Command::Bench { spec, out } => cmd_bench(&spec, &out),
        Command::Train {
            config,
            data,
            metrics,
            save,
        } => match precision {
            Precision::F32 => cmd_train::<f32>(&config, &data, &metrics, save.as_deref()),
            Precision::F64 => cmd_train::<f64>(&config, &data, &metrics, save.as_deref()),
        },
        Command::Gradcheck { eps, seed } => cmd_gradcheck(eps, seed),
        Command::Simulate {
            graph,
            input,
            trace,
            unroll,
        } => match precision {
            Precision::F32 => cmd_simulate::<f32>(&graph, &input, trace.as_deref(), unroll),
            Precision::F64 => cmd_simulate::<f64>(&graph, &input, trace.as_deref(), unroll),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
