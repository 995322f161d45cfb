//! `puot`: batch front end for the pearson-uot pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pearson_uot::io::{self, FieldFile};
use pearson_uot::metrics::{dbl_distance, DiscreteMeasure};
use pearson_uot::pipeline::{
    self, compile_stage, dynamics_stage, load_spec, run_pipeline, smooth_duals, solve_stage, RunConfig, Stage, StageError,
};
use pearson_uot::uot::kkt_residuals;
use pearson_uot::UotError;

#[derive(Parser)]
#[command(name = "puot", version, about = "Pearson-regularized unbalanced optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the proximal solver and write potentials, coupling and iteration tables.
    Solve(RunArgs),
    /// Solve, smooth the potentials and write the transport dynamics.
    Dynamics(RunArgs),
    /// Everything up to the compiled neural field.
    Compile(RunArgs),
    /// Bounded-Lipschitz distance between two density files.
    Metrics(MetricsArgs),
    /// Full run with the artifact bundle and metric report.
    Pipeline(RunArgs),
}

/// Flags mirror the configuration file keys and override them.
#[derive(Args, Default)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    /// Iteration count L.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    eps1: Option<f64>,
    /// Horizon T.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    time_stamps: Option<usize>,
    #[arg(long)]
    flow_substeps: Option<usize>,
    /// relu or sigmoid.
    #[arg(long)]
    activation: Option<String>,
    /// fejer or plain.
    #[arg(long)]
    truncation: Option<String>,
    /// Clamp at 1 − |Ω_g|/f without the δ factor.
    #[arg(long)]
    undamped_bound: bool,
    /// Refuse the tensor-product Monge–Ampère solver in d ≥ 2.
    #[arg(long)]
    no_tensor_ma: bool,
    /// Map exchange JSON used instead of the built-in Monge–Ampère solver.
    #[arg(long)]
    external_ma: Option<PathBuf>,
    #[arg(long)]
    no_reference: bool,
    /// Reserved; the pipeline is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Writes the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct SolveReport {
    summary: pipeline::SolveSummary,
    kkt: pearson_uot::uot::KktReport,
}

fn config_error(error: UotError) -> StageError {
    StageError {
        stage: Stage::Config,
        error,
    }
}

fn build_config(a: &RunArgs) -> Result<RunConfig, StageError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p).map_err(config_error)?,
        None => RunConfig::default(),
    }
    .with_env_out_dir();
    let mut set = |k: &str, v: Option<String>| -> Result<(), StageError> {
        match v {
            Some(v) => cfg.set(k, &v).map_err(config_error),
            None => Ok(()),
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    set("spec", path(&a.spec))?;
    set("out_dir", path(&a.out))?;
    set("delta", a.delta.map(|v| v.to_string()))?;
    set("iters", a.iters.map(|v| v.to_string()))?;
    set("eps0", a.eps0.map(|v| v.to_string()))?;
    set("eps1", a.eps1.map(|v| v.to_string()))?;
    set("horizon", a.horizon.map(|v| v.to_string()))?;
    set("time_stamps", a.time_stamps.map(|v| v.to_string()))?;
    set("flow_substeps", a.flow_substeps.map(|v| v.to_string()))?;
    set("activation", a.activation.clone())?;
    set("truncation", a.truncation.clone())?;
    set("external_ma", path(&a.external_ma))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    if a.undamped_bound {
        cfg.undamped_bound = true;
    }
    if a.no_tensor_ma {
        cfg.tensor_ma = false;
    }
    if a.no_reference {
        cfg.reference = false;
    }
    if cfg.spec.as_os_str().is_empty() {
        return Err(config_error(UotError::InvalidParameter(
            "no spec file given (--spec or spec = ...)".into(),
        )));
    }
    Ok(cfg)
}

fn tag<T>(stage: Stage, r: pearson_uot::Result<T>) -> Result<T, StageError> {
    r.map_err(|error| StageError { stage, error })
}

fn write(path: &Path, text: &str) -> Result<(), StageError> {
    tag(Stage::Output, io::write_text(path, text))
}

fn cmd_solve(a: &RunArgs) -> Result<(), StageError> {
    let cfg = build_config(a)?;
    let spec = load_spec(&cfg)?;
    let run = tag(Stage::Solve, solve_stage(&spec, &cfg))?;
    let kkt = tag(Stage::Solve, kkt_residuals(&run.coupling, &run.duals, &spec))?;
    // `--out run.json` names the report and puts the tables beside it.
    let (dir, report) = if cfg.out_dir.extension().is_some_and(|e| e == "json") {
        (cfg.out_dir.parent().unwrap_or(Path::new(".")).to_path_buf(), cfg.out_dir.clone())
    } else {
        (cfg.out_dir.clone(), cfg.out_dir.join("run.json"))
    };
    tag(Stage::Output, pipeline::write_solve_outputs(&dir, &spec, &run))?;
    let summary = tag(Stage::Solve, pipeline::solve_summary(&run, &spec))?;
    let text = tag(Stage::Output, io::to_json(&SolveReport { summary, kkt }))?;
    write(&report, &text)?;
    let last = run.diagnostics.records.last().expect("at least one iteration");
    println!(
        "iterations {}  primal {:.12e}  dual {:.12e}  gap {:.3e}  kkt {:.3e}  certificate {:.3e}",
        run.diagnostics.records.len(),
        last.primal,
        last.dual,
        last.gap,
        kkt.max_residual(),
        last.certificate
    );
    Ok(())
}

fn cmd_dynamics(a: &RunArgs, with_compile: bool) -> Result<(), StageError> {
    let cfg = build_config(a)?;
    let spec = load_spec(&cfg)?;
    let run = tag(Stage::Solve, solve_stage(&spec, &cfg))?;
    let (duals, smoothing) = tag(Stage::Smooth, smooth_duals(&spec, &run.duals, cfg.eps0))?;
    let dynb = dynamics_stage(&spec, &run.coupling, &duals, &cfg)?;
    tag(Stage::Output, pipeline::write_solve_outputs(&cfg.out_dir, &spec, &run))?;
    tag(Stage::Output, pipeline::write_dynamics_outputs(&cfg.out_dir, &spec, &duals, &dynb))?;
    println!(
        "smoothing widths {:e} {:e}  masses {:?}  MA residual {:.3e}",
        smoothing.width_k1, smoothing.width_k2, dynb.evolved.masses, dynb.ma.sup
    );
    if with_compile {
        let (compiled, _) = tag(Stage::Compile, compile_stage(&spec, &dynb, &cfg))?;
        write(
            &cfg.out_dir.join("neural_field.json"),
            &tag(Stage::Output, compiled.params.to_json())?,
        )?;
        write(
            &cfg.out_dir.join("compile_report.json"),
            &tag(Stage::Output, io::to_json(&compiled.report))?,
        )?;
        let r = &compiled.report;
        println!(
            "compiled: order {}  sigma {}  kernel width {}  stamps {}  neurons {}  L2 error {:.3e} (budget {:.3e})",
            r.order, r.sigma, r.kernel_width, r.stamps, r.neurons, r.total_l2, r.eps1_prime
        );
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), StageError> {
    let load = |p: &Path| -> Result<DiscreteMeasure, StageError> {
        let f = tag(Stage::Spec, FieldFile::read(p))?;
        let g = tag(Stage::Spec, f.grid())?;
        Ok(DiscreteMeasure::from_density(&g, &f.values))
    };
    let r = tag(Stage::Metrics, dbl_distance(&load(&a.a)?, &load(&a.b)?))?;
    let text = format!("{{\n  \"dbl\": {},\n  \"exact\": {}\n}}\n", r.value, r.exact);
    match &a.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_pipeline(a: &RunArgs) -> Result<(), StageError> {
    let cfg = build_config(a)?;
    let out = run_pipeline(&cfg)?;
    out.write_bundle()?;
    for m in &out.report.metrics {
        println!(
            "t = {:<6}  dbl(compiled, exact) {:>12}  dbl(compiled, reference) {:>12}",
            m.t,
            m.dbl_proxy.map_or("-".into(), |v| format!("{v:.4e}")),
            m.dbl_reference.map_or("-".into(), |v| format!("{v:.4e}")),
        );
    }
    println!("bundle written to {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Dynamics(a) => cmd_dynamics(a, false),
        Command::Compile(a) => cmd_dynamics(a, true),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
