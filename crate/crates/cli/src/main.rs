//! `beamgraph` command-line driver.
//!
//! Exit status: 0 on success, 2 on invalid arguments, 1 on runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use beamgraph::channel::SimConfig;
use beamgraph::experiment::{
    evaluate, gen_dataset, join_with_ratios, save_metrics_csv, with_thread_cap, Dataset, EvalOptions, Method,
    MetricsRow, StorageMode, METHOD_NAMES,
};
use beamgraph::gblinks::{ModelParams, ModelSpec};
use beamgraph::grad::finite_diff_check;
use beamgraph::ldlf::{train, TrainConfig};
use beamgraph::problem::{selection_wsr, DualMultipliers};
use beamgraph::rng::RngState;
use beamgraph::sample::Sample;
use beamgraph::sca::{self, ScaConfig};
use beamgraph::Error;

#[derive(Parser)]
#[command(name = "beamgraph", version, about = "Beam selection and link activation for D2D mmWave networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a scenario JSON file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Store full tensors instead of stream ids.
        #[arg(long)]
        tensors: bool,
    },
    /// Train a model with the primal-dual loop.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Step size shared by all five multipliers.
        #[arg(long, default_value_t = 1e-6)]
        dual_step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Message-passing layers.
        #[arg(long, default_value_t = 1)]
        layers: usize,
        /// Per-epoch curves as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run one method on every sample.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two methods and add the per-sample ratio of the first to the second.
    Compare {
        #[arg(long)]
        data: PathBuf,
        /// Two comma-separated method names.
        #[arg(long)]
        methods: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the analytic gradient with central differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the SCA solver on every sample and keep its iteration log.
    SolveSca {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

type CliResult = std::result::Result<(), Failure>;

fn parse_method(name: &str) -> std::result::Result<Method, Failure> {
    Method::from_str(name.trim()).map_err(|_| {
        Failure::Usage(format!(
            "unknown method {name:?}; allowed methods: {}",
            METHOD_NAMES.join(", ")
        ))
    })
}

fn load_model(method: Method, path: Option<&Path>) -> std::result::Result<Option<ModelParams>, Failure> {
    match (method, path) {
        (Method::Gblinks, None) => Err(Failure::Usage("method gblinks needs --model".into())),
        (Method::Gblinks, Some(p)) => Ok(Some(ModelParams::load(p)?)),
        _ => Ok(None),
    }
}

fn gen_data(config: &Path, out: &Path, count: usize, seed: u64, tensors: bool) -> CliResult {
    let text = std::fs::read_to_string(config).map_err(|e| io_failure(config, e))?;
    let sim: SimConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: invalid scenario: {e}", config.display())))?;
    let mode = if tensors {
        StorageMode::Tensors
    } else {
        StorageMode::Seeds
    };
    let data = with_thread_cap(|| gen_dataset(&sim, count, seed, mode))??;
    data.save(out)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: &Path,
    out_model: &Path,
    epochs: usize,
    batch: usize,
    lr: f64,
    dual_step: f64,
    seed: u64,
    layers: usize,
    report: Option<&Path>,
) -> CliResult {
    let data = Dataset::load(data)?;
    let sim = data.config();
    let spec = ModelSpec::published(sim.nt, sim.nr, layers)?;
    let model = ModelParams::init(spec, &mut RngState::seed_from(seed, 0))?;
    let config = TrainConfig {
        epochs,
        batch_size: batch,
        zeta: lr,
        dual_steps: [dual_step; 5],
        seed,
        ..TrainConfig::default()
    };
    let (model, curves) = with_thread_cap(|| train(&data.samples, model, sim, &config))??;
    model.save(out_model)?;
    if let Some(path) = report {
        curves.save_csv(path)?;
    }
    if let (Some(w), Some(v)) = (curves.wsr.last(), curves.violation.last()) {
        println!("final epoch: rounded rate {w:.4}, mean violations {v:?}");
    }
    Ok(())
}

fn eval_cmd(data: &Path, method: &str, model: Option<&Path>, out: &Path) -> CliResult {
    let method = parse_method(method)?;
    let model = load_model(method, model)?;
    let data = Dataset::load(data)?;
    let opts = EvalOptions {
        model: model.as_ref(),
        ..EvalOptions::default()
    };
    let rows = evaluate(&data, method, &opts)?;
    save_metrics_csv(&rows, out)?;
    report_failures(&rows);
    Ok(())
}

fn report_failures(rows: &[MetricsRow]) {
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "sample {} ({}): {}",
            r.sample_id,
            r.method,
            r.error.as_deref().unwrap_or_default()
        );
    }
}

fn compare_cmd(data: &Path, methods: &str, model: Option<&Path>, out: &Path) -> CliResult {
    let names: Vec<&str> = methods.split(',').collect();
    if names.len() != 2 {
        return Err(Failure::Usage(format!(
            "--methods takes exactly two names, got {methods:?}; allowed methods: {}",
            METHOD_NAMES.join(", ")
        )));
    }
    let (first, second) = (parse_method(names[0])?, parse_method(names[1])?);
    let model_path = if first == Method::Gblinks || second == Method::Gblinks {
        Some(model.ok_or_else(|| Failure::Usage("method gblinks needs --model".into()))?)
    } else {
        None
    };
    let model = model_path.map(ModelParams::load).transpose()?;
    let data = Dataset::load(data)?;
    let opts = EvalOptions {
        model: model.as_ref(),
        ..EvalOptions::default()
    };
    let a = evaluate(&data, first, &opts)?;
    let b = evaluate(&data, second, &opts)?;
    report_failures(&a);
    report_failures(&b);
    let (rows, ratios) = join_with_ratios(a, b)?;
    save_metrics_csv(&rows, out)?;
    println!(
        "ra ({} / {}): mean {:.4}, share >= 0.9: {:.4}, undefined: {}",
        first.name(),
        second.name(),
        ratios.mean(),
        ratios.fraction_at_least(0.9),
        ratios.flagged()
    );
    Ok(())
}

fn check_grad_cmd(seed: u64) -> CliResult {
    let sim = SimConfig::new(3, 4, 4, 2, 50.0, (10.0, 40.0), 0.0)?;
    let codebook = beamgraph::channel::Codebook::dft(4, 4);
    let mut rng = RngState::seed_from(seed, 0);
    let sample = Sample::generate(&sim, &codebook, &mut rng)?;
    let model = ModelParams::init(ModelSpec::published(4, 4, 1)?, &mut rng)?;
    let mut duals = DualMultipliers::zeros(3, 4, 4);
    for x in duals.lambda.iter_mut().chain(duals.mu.iter_mut()) {
        *x = rng.uniform_in(0.0, 1.0);
    }
    let report = finite_diff_check(&model, &sample, &duals, &sim, 1e-5, 1000, &mut rng)?;
    println!(
        "checked {} parameters ({} skipped at kinks): max relative error {:.3e}, mean {:.3e}",
        report.checked, report.skipped, report.max_rel_err, report.mean_rel_err
    );
    if report.max_rel_err > 1e-4 {
        return Err(Failure::Runtime("gradient check failed: max relative error above 1e-4".into()));
    }
    Ok(())
}

fn solve_sca_cmd(data: &Path, out: &Path, trace: &Path) -> CliResult {
    let data = Dataset::load(data)?;
    let sim = data.config();
    let config = ScaConfig::default();
    let outcomes = with_thread_cap(|| {
        data.samples
            .par_iter()
            .map(|s| {
                let start = Instant::now();
                let result = sca::run(&s.gains, sim, &config);
                (result, start.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Vec<_>>()
    })?;

    let mut rows = Vec::with_capacity(outcomes.len());
    let file = File::create(trace).map_err(|e| io_failure(trace, e))?;
    let mut log = BufWriter::new(file);
    let write_log = |log: &mut BufWriter<File>, line: String| log.write_all(line.as_bytes());
    write_log(
        &mut log,
        "sample_id,outer,inner,surrogate,eta,theta,delta,max_violation\n".into(),
    )
    .map_err(|e| io_failure(trace, e))?;
    for (id, ((result, runtime_ms), sample)) in outcomes.into_iter().zip(&data.samples).enumerate() {
        let mut row = MetricsRow {
            sample_id: id,
            method: "sca".into(),
            wsr: None,
            active_pairs: None,
            runtime_ms,
            ra: None,
            error: None,
        };
        match result {
            Ok(outcome) => {
                row.wsr = Some(selection_wsr(&sample.gains, &outcome.selection, sim));
                row.active_pairs = Some(outcome.selection.active_count());
                for r in &outcome.trace.rows {
                    write_log(
                        &mut log,
                        format!(
                            "{id},{},{},{},{},{},{},{}\n",
                            r.outer, r.inner, r.surrogate, r.eta, r.theta, r.delta, r.max_violation
                        ),
                    )
                    .map_err(|e| io_failure(trace, e))?;
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        rows.push(row);
    }
    log.flush().map_err(|e| io_failure(trace, e))?;
    save_metrics_csv(&rows, out)?;
    report_failures(&rows);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
            tensors,
        } => gen_data(&config, &out, count, seed, tensors),
        Command::Train {
            data,
            out_model,
            epochs,
            batch,
            lr,
            dual_step,
            seed,
            layers,
            report,
        } => train_cmd(
            &data,
            &out_model,
            epochs,
            batch,
            lr,
            dual_step,
            seed,
            layers,
            report.as_deref(),
        ),
        Command::Eval {
            data,
            method,
            model,
            out,
        } => eval_cmd(&data, &method, model.as_deref(), &out),
        Command::Compare {
            data,
            methods,
            model,
            out,
        } => compare_cmd(&data, &methods, model.as_deref(), &out),
        Command::CheckGrad { seed } => check_grad_cmd(seed),
        Command::SolveSca { data, out, trace } => solve_sca_cmd(&data, &out, &trace),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
