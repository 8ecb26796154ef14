use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use marray_core::analytic::{self, ProblemShape};
use marray_core::mac::{BandwidthModel, CalibrationTable};
use marray_core::pe::{write_trace_csv, PortMode};
use marray_core::run::{self, explore_records, layer_table, simulate_point, to_csv, RunConfig};

#[derive(Parser)]
#[command(
    name = "marray",
    version,
    about = "Multi-array GEMM accelerator simulator and design-space explorer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one GEMM at one design point and check it.
    Run(RunArgs),
    /// Rank design points with the analytical model.
    Explore(ExploreArgs),
    /// Validate a bandwidth calibration CSV (n_p,s_i,bytes_per_second).
    Calibrate(CalibrateArgs),
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem shape as MxKxN.
    #[arg(long, conflicts_with = "preset")]
    shape: Option<ProblemShape>,
    /// AlexNet layer preset (conv-1 .. fc-8).
    #[arg(long)]
    preset: Option<String>,
    /// PEs per base array.
    #[arg(long)]
    p: Option<usize>,
    /// Number of base arrays.
    #[arg(long)]
    pm: Option<usize>,
    /// Accelerator clock in Hz.
    #[arg(long)]
    freq: Option<f64>,
    /// FMAC pipeline depth.
    #[arg(long)]
    stage: Option<usize>,
    /// Bandwidth model: calibration CSV path, `parametric:peak,L0,alpha` or `unlimited`.
    #[arg(long)]
    bw_model: Option<String>,
    /// Off-chip port arrangement.
    #[arg(long, value_enum)]
    port: Option<PortArg>,
    /// Disable work stealing.
    #[arg(long)]
    no_steal: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PortArg {
    PerArray,
    Shared,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of concurrently scheduled arrays.
    #[arg(long)]
    np: Option<usize>,
    /// Row block size.
    #[arg(long)]
    si: Option<usize>,
    /// Column block size (defaults to S_i).
    #[arg(long)]
    sj: Option<usize>,
    /// Pick the point that the explorer ranks first.
    #[arg(long, conflicts_with_all = ["np", "si", "sj"])]
    auto: bool,
    /// Seed for the random operands.
    #[arg(long)]
    seed: Option<u64>,
    /// Largest M*K*N simulated numerically and verified.
    #[arg(long)]
    verify_max_macs: Option<u64>,
    /// Write the per-array event trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ExploreArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Only this N_p.
    #[arg(long)]
    np: Option<usize>,
    /// Only this block size.
    #[arg(long)]
    si: Option<usize>,
    /// Comma-separated block sizes to search.
    #[arg(long, value_delimiter = ',', conflicts_with = "si")]
    candidates: Option<Vec<usize>>,
    /// Also simulate every feasible point.
    #[arg(long)]
    simulate: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Calibration CSV with header n_p,s_i,bytes_per_second.
    csv: PathBuf,
    /// Write the validated, sorted table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(model: &ModelArgs) -> Result<RunConfig> {
    let mut cfg = match &model.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(shape) = model.shape {
        cfg.shape = Some(shape);
        cfg.preset = None;
    }
    if let Some(name) = &model.preset {
        cfg.preset = Some(name.clone());
        cfg.shape = None;
    }
    let p = &mut cfg.params;
    if let Some(v) = model.p {
        p.p = v;
    }
    if let Some(v) = model.pm {
        p.p_m = v;
    }
    if let Some(v) = model.freq {
        p.f_acc = v;
    }
    if let Some(v) = model.stage {
        p.stage_fmac = v;
    }
    if let Some(text) = &model.bw_model {
        p.bandwidth = BandwidthModel::parse(text)?;
    }
    match model.port {
        Some(PortArg::PerArray) => cfg.port = PortMode::PerArray,
        Some(PortArg::Shared) => cfg.port = PortMode::Shared,
        None => {}
    }
    if model.no_steal {
        cfg.stealing = false;
    }
    Ok(cfg)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let mut cfg = base_config(&args.model)?;
    if args.auto {
        cfg.auto = true;
        cfg.n_p = None;
        cfg.s_i = None;
        cfg.s_j = None;
    }
    if args.np.is_some() || args.si.is_some() {
        cfg.auto = false;
    }
    cfg.n_p = args.np.or(cfg.n_p);
    cfg.s_i = args.si.or(cfg.s_i);
    cfg.s_j = args.sj.or(cfg.s_j);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.verify_max_macs = args.verify_max_macs.unwrap_or(cfg.verify_max_macs);
    cfg.trace = args.trace.is_some();

    let outcome = run::run(&cfg)?;
    let report = &outcome.report;
    if let Some(path) = &args.trace {
        let file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace_csv(&outcome.trace, file)?;
    }
    emit(&(report.to_json() + "\n"), args.out.as_deref())?;
    if args.out.is_some() {
        let s = &report.simulation;
        eprintln!(
            "{}x{}x{} at N_p={} S_i={} S_j={}: {:.6e} s, {:.3} GFLOPS, bounds [{:.6e}, {:.6e}] s",
            report.shape.m,
            report.shape.k,
            report.shape.n,
            report.point.n_p,
            report.point.s_i,
            report.point.s_j,
            s.total_time_s,
            s.gflops,
            report.estimate.t_lower,
            report.estimate.t_upper
        );
    }
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    Ok(report.ok())
}

fn cmd_explore(args: ExploreArgs) -> Result<bool> {
    let all = args
        .model
        .preset
        .as_deref()
        .is_some_and(|p| p.eq_ignore_ascii_case("all"));
    let model = ModelArgs {
        preset: if all { None } else { args.model.preset.clone() },
        ..args.model.clone()
    };
    let cfg = base_config(&model)?;
    let candidates = match (args.si, &args.candidates) {
        (Some(si), _) => vec![si],
        (None, Some(c)) => c.clone(),
        (None, None) => cfg.candidates(),
    };

    if all {
        if args.simulate || args.np.is_some() {
            bail!("--preset all produces the per-layer table; --simulate and --np are not supported with it");
        }
        let table = layer_table(&cfg.params, &candidates)?;
        let text = match args.format {
            Format::Csv => to_csv(&table)?,
            Format::Json => serde_json::to_string_pretty(&table)? + "\n",
        };
        emit(&text, args.out.as_deref())?;
        return Ok(true);
    }

    let shape = cfg.resolve_shape()?;
    let mut ex = analytic::explore(&shape, &cfg.params, &candidates)?;
    if let Some(n_p) = args.np {
        ex.rows.retain(|r| r.point.n_p == n_p);
        ex.ranked.retain(|(pt, _)| pt.n_p == n_p);
        if ex.rows.is_empty() {
            bail!("no rows with N_p = {n_p}");
        }
    }
    let sims = if args.simulate {
        ex.rows
            .par_iter()
            .map(|row| {
                row.feasible
                    .then(|| simulate_point(&shape, &row.point, &cfg))
                    .transpose()
            })
            .collect::<marray_core::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let records = explore_records(&ex, &sims);
    let text = match args.format {
        Format::Csv => to_csv(&records)?,
        Format::Json => serde_json::to_string_pretty(&records)? + "\n",
    };
    emit(&text, args.out.as_deref())?;
    Ok(records
        .iter()
        .all(|r| r.sim_within_bounds != Some(false) || cfg.port == PortMode::Shared))
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<bool> {
    let table = CalibrationTable::from_csv_path(&args.csv)
        .with_context(|| format!("calibration table {}", args.csv.display()))?;
    emit(&table.to_csv_string()?, args.out.as_deref())?;
    if args.out.is_some() {
        eprintln!("accepted {} points", table.points.len());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Explore(a) => cmd_explore(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
