//! `gn` — dataset generation, training, evaluation, and rollout export for
//! the graph-block reference tasks.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 usage or
//! configuration error, 3 numerical failure (non-finite loss or state).
//! Every run is a deterministic function of its arguments, input files, and
//! `--seed`; no wall-clock entropy is used anywhere.

use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gnet::compose::{init_epd_params, EpdSpec};
use gnet::nn::{Optimizer, OptimizerKind, ParameterStore};
use gnet::tasks::physics::{self, physics_step, rollout, PhysicsState};
use gnet::tasks::{
    default_architecture, generate, oracle_predict, read_samples, write_samples, Sample, TaskKind,
};
use gnet::train::{
    evaluate_label_task, evaluate_physics, graph_predictor, init_rng, metrics_csv_header,
    physics_predictor, train, Metrics, TrainConfig, TrainState,
};

#[derive(Parser)]
#[command(
    name = "gn",
    version,
    about = "Graph-block models on reference tasks: generate data, train, evaluate, roll out"
)]
struct Cli {
    /// Upper bound on worker threads (the engine currently always runs the
    /// deterministic single-threaded path)
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a JSON-lines dataset of task samples
    Generate(GenerateArgs),
    /// Optimize model parameters on a dataset and write checkpoints
    Train(TrainArgs),
    /// Print evaluation metrics for a checkpoint or the task oracle as JSON
    Eval(EvalArgs),
    /// Feed a one-step physics model back into itself and write the
    /// trajectory as JSON lines
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Task name: shortest_path, sort, or physics
    #[arg(long)]
    task: String,
    /// Number of samples to write
    #[arg(long)]
    count: usize,
    /// Entities per sample: graph nodes, list elements, or masses
    #[arg(long, default_value_t = 6)]
    size: usize,
    /// Seed for the sample generator
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (JSON lines, one {input, target} pair per line)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Task name: shortest_path, sort, or physics
    #[arg(long)]
    task: String,
    /// Training dataset (JSON lines from `gn generate`)
    #[arg(long)]
    data: PathBuf,
    /// Architecture spec JSON; defaults to the task's built-in architecture
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Total optimization steps the run should reach (a resumed run
    /// continues toward this same absolute count)
    #[arg(long)]
    steps: usize,
    /// Graphs per optimization step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Learning rate (fresh runs only; resumed runs keep their optimizer)
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Optimizer for fresh runs: sgd or adam
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Seed for initialization and batch sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record a metrics row every N steps
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    /// Physics: integrator timestep matching the dataset (ignored by the
    /// label tasks)
    #[arg(long, default_value_t = physics::DEFAULT_DT)]
    dt: f64,
    /// Directory for checkpoint.json, state.json, metrics.csv, arch.json
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from the checkpoint in --out-dir instead of initializing
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Task name: shortest_path, sort, or physics
    #[arg(long)]
    task: String,
    /// Evaluation dataset (JSON lines)
    #[arg(long)]
    data: PathBuf,
    /// Trained parameters (required unless --oracle)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture spec JSON; defaults to the task's built-in architecture
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Substitute the task's ground-truth oracle for the model
    #[arg(long)]
    oracle: bool,
    /// Physics: rollout length before comparing positions
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// Physics: integrator timestep matching the dataset
    #[arg(long, default_value_t = physics::DEFAULT_DT)]
    dt: f64,
}

#[derive(Args)]
struct RolloutArgs {
    /// Number of feedback steps (the output holds steps + 1 states)
    #[arg(long)]
    steps: usize,
    /// Output trajectory path (JSON lines, one state per line)
    #[arg(long)]
    out: PathBuf,
    /// Trained parameters (required unless --oracle)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture spec JSON; defaults to the physics built-in architecture
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Roll out the reference simulator instead of a model
    #[arg(long)]
    oracle: bool,
    /// Initial state JSON file; omitted, a random state is generated
    #[arg(long)]
    state: Option<PathBuf>,
    /// Seed for the generated initial state
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Masses in the generated initial state
    #[arg(long, default_value_t = 4)]
    masses: usize,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Exit 2: bad arguments, unreadable/unwritable files, schema mismatch.
    Usage(String),
    /// Exit 3: non-finite loss or state; partial outputs are kept.
    Numerical(String),
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Rollout(a) => cmd_rollout(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn parse_task(name: &str) -> CliResult<TaskKind> {
    TaskKind::parse(name).ok_or_else(|| {
        let valid: Vec<&str> = TaskKind::ALL.iter().map(TaskKind::name).collect();
        usage(format!(
            "unknown task '{name}'; valid tasks: {}",
            valid.join(", ")
        ))
    })
}

fn min_size(task: TaskKind) -> usize {
    match task {
        TaskKind::ShortestPath => 2,
        TaskKind::Sort | TaskKind::Physics => 1,
    }
}

fn load_samples(path: &Path) -> CliResult<Vec<Sample>> {
    let f = fs::File::open(path)
        .map_err(|e| usage(format!("cannot open dataset {}: {e}", path.display())))?;
    read_samples(BufReader::new(f))
        .map_err(|e| usage(format!("dataset {}: {e}", path.display())))
}

fn load_arch(task: TaskKind, path: &Option<PathBuf>) -> CliResult<EpdSpec> {
    match path {
        None => Ok(default_architecture(task)),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read architecture {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("architecture {}: {e}", p.display())))
        }
    }
}

fn load_checkpoint(path: &Option<PathBuf>) -> CliResult<ParameterStore> {
    let p = path
        .as_ref()
        .ok_or_else(|| usage("pass --checkpoint (or --oracle to use the reference oracle)"))?;
    let text = fs::read_to_string(p)
        .map_err(|e| usage(format!("cannot read checkpoint {}: {e}", p.display())))?;
    ParameterStore::from_json(&text)
        .map_err(|e| usage(format!("checkpoint {}: {e}", p.display())))
}

fn write_file(path: &Path, content: &str) -> CliResult<()> {
    fs::write(path, content).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let task = parse_task(&a.task)?;
    if a.size < min_size(task) {
        return Err(usage(format!(
            "--size {} is below the minimum of {} for {task}",
            a.size,
            min_size(task)
        )));
    }
    let samples = generate(task, a.count, a.size, &mut init_rng(a.seed));
    let f = fs::File::create(&a.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    let mut w = BufWriter::new(f);
    write_samples(&mut w, &samples)
        .and_then(|()| w.flush())
        .map_err(|e| usage(format!("writing {}: {e}", a.out.display())))
}

/// Optimizer state and step counter stored beside the checkpoint, so a
/// resumed run continues bit-for-bit.
#[derive(Serialize, Deserialize)]
struct TrainSidecar {
    step: usize,
    optimizer: Optimizer,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let task = parse_task(&a.task)?;
    if !(a.lr > 0.0) {
        return Err(usage("--lr must be positive"));
    }
    let opt_kind = match a.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => return Err(usage(format!("unknown optimizer '{other}'; use sgd or adam"))),
    };
    let spec = load_arch(task, &a.arch)?;
    let data = load_samples(&a.data)?;
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", a.out_dir.display())))?;

    let checkpoint_path = a.out_dir.join("checkpoint.json");
    let sidecar_path = a.out_dir.join("state.json");
    let metrics_path = a.out_dir.join("metrics.csv");

    let mut state = if a.resume {
        let params_text = fs::read_to_string(&checkpoint_path).map_err(|e| {
            usage(format!(
                "cannot resume from {}: {e}",
                checkpoint_path.display()
            ))
        })?;
        let params = ParameterStore::from_json(&params_text)
            .map_err(|e| usage(format!("checkpoint {}: {e}", checkpoint_path.display())))?;
        let sidecar_text = fs::read_to_string(&sidecar_path).map_err(|e| {
            usage(format!("cannot resume from {}: {e}", sidecar_path.display()))
        })?;
        let sidecar: TrainSidecar = serde_json::from_str(&sidecar_text)
            .map_err(|e| usage(format!("state {}: {e}", sidecar_path.display())))?;
        TrainState {
            params,
            optimizer: sidecar.optimizer,
            step: sidecar.step,
        }
    } else {
        let mut params = ParameterStore::new();
        init_epd_params(&mut params, &mut init_rng(a.seed), &spec, task.input_dims())
            .map_err(|e| usage(format!("architecture: {e}")))?;
        TrainState {
            params,
            optimizer: Optimizer::new(opt_kind, a.lr),
            step: 0,
        }
    };

    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        seed: a.seed,
        log_every: a.log_every,
        dt: a.dt,
    };
    let outcome = train(task, &spec, &mut state, &data, &cfg).map_err(usage)?;

    write_file(
        &a.out_dir.join("arch.json"),
        &serde_json::to_string_pretty(&spec).expect("architecture serialization"),
    )?;
    write_file(&checkpoint_path, &state.params.to_json())?;
    let sidecar = TrainSidecar {
        step: state.step,
        optimizer: state.optimizer.clone(),
    };
    write_file(
        &sidecar_path,
        &serde_json::to_string(&sidecar).expect("sidecar serialization"),
    )?;
    let mut csv = if a.resume {
        fs::read_to_string(&metrics_path).unwrap_or_else(|_| format!("{}\n", metrics_csv_header(task)))
    } else {
        format!("{}\n", metrics_csv_header(task))
    };
    for row in &outcome.history {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    write_file(&metrics_path, &csv)?;

    if let Some(at) = outcome.diverged_at {
        return Err(Failure::Numerical(format!(
            "training stopped: the loss became non-finite after {at} completed steps; the checkpoint keeps the last finite parameters"
        )));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let task = parse_task(&a.task)?;
    let data = load_samples(&a.data)?;
    let metrics = if task.is_label_task() {
        if a.oracle {
            evaluate_label_task(|g| oracle_predict(task, g, a.dt), &data).map_err(usage)?
        } else {
            let params = load_checkpoint(&a.checkpoint)?;
            let spec = load_arch(task, &a.arch)?;
            evaluate_label_task(graph_predictor(&spec, &params), &data).map_err(usage)?
        }
    } else {
        if !(a.dt > 0.0) {
            return Err(usage("--dt must be positive"));
        }
        if data.is_empty() {
            return Err(usage("no samples"));
        }
        let states: Vec<PhysicsState> = data
            .iter()
            .enumerate()
            .map(|(i, s)| {
                physics::graph_to_state(&s.input, a.dt)
                    .map_err(|e| usage(format!("sample {i}: {e}")))
            })
            .collect::<CliResult<_>>()?;
        let eval = if a.oracle {
            evaluate_physics(|s| Ok(physics_step(s)), &states, a.horizon)
        } else {
            let params = load_checkpoint(&a.checkpoint)?;
            let spec = load_arch(task, &a.arch)?;
            evaluate_physics(physics_predictor(&spec, &params), &states, a.horizon)
        }
        .map_err(Failure::Numerical)?;
        Metrics {
            rmse: Some(eval.rmse),
            ..Metrics::default()
        }
    };
    println!("{}", metrics.to_json());
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> CliResult<()> {
    if a.oracle && a.checkpoint.is_some() {
        return Err(usage("pass either --oracle or --checkpoint, not both"));
    }
    let s0 = match &a.state {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read state {}: {e}", p.display())))?;
            let s: PhysicsState = serde_json::from_str(&text)
                .map_err(|e| usage(format!("state {}: {e}", p.display())))?;
            s.validate()
                .map_err(|e| usage(format!("state {}: {e}", p.display())))?;
            s
        }
        None => {
            if a.masses == 0 {
                return Err(usage("--masses must be at least 1"));
            }
            physics::gen_physics(a.masses, &mut init_rng(a.seed))
        }
    };

    let (traj, diag) = if a.oracle {
        rollout(|s| Ok(physics_step(s)), &s0, a.steps)
    } else {
        let params = load_checkpoint(&a.checkpoint)?;
        let spec = load_arch(TaskKind::Physics, &a.arch)?;
        rollout(physics_predictor(&spec, &params), &s0, a.steps)
    };

    let f = fs::File::create(&a.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;
    let mut w = BufWriter::new(f);
    for state in &traj {
        serde_json::to_writer(&mut w, state)
            .map_err(|e| usage(format!("writing {}: {e}", a.out.display())))?;
        w.write_all(b"\n")
            .map_err(|e| usage(format!("writing {}: {e}", a.out.display())))?;
    }
    w.flush()
        .map_err(|e| usage(format!("writing {}: {e}", a.out.display())))?;

    match diag {
        Some(d) => Err(Failure::Numerical(format!(
            "rollout truncated after {} states: {d}",
            traj.len()
        ))),
        None => Ok(()),
    }
}
