//! Command-line harness: dataset generation, experiment execution,
//! Δm comparison between runs, and SVG plot emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O failure,
//! 4 missing inputs, 5 semantic mismatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, MethodName};
use crate::data;
use crate::error::{Error, Result};
use crate::fed;
use crate::plot;

#[derive(Parser)]
#[command(
    name = "fedsurg",
    version,
    about = "Deterministic multi-site federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic site datasets referenced by a config.
    GenData(GenDataArgs),
    /// Execute a federated experiment.
    Run(RunArgs),
    /// Compare a run against a baseline run with the Δm metric.
    DeltaM(DeltaMArgs),
    /// Plot a metric trajectory of one or more runs as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Dataset output root; each site lands in site{k}/ below it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded site loop (byte-reproducible artifacts).
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DeltaMArgs {
    /// Run directory to score.
    #[arg(long)]
    run: PathBuf,
    /// Baseline run directory (normally a local-training run).
    #[arg(long)]
    baseline: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    run: Vec<PathBuf>,
    /// Metric name (dice, iou, rmse).
    #[arg(long)]
    metric: String,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv and dispatches; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args.config, &args.out),
        Command::Run(args) => cmd_run(&args.config, &args.out, args.seed, args.sequential),
        Command::DeltaM(args) => cmd_delta_m(&args.run, &args.baseline),
        Command::Plot(args) => cmd_plot(&args.run, &args.metric, &args.out),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code_for(&e)
        }
    }
}

/// Maps error classes onto the documented exit codes.
pub fn exit_code_for(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::MissingInput(_) => 4,
        _ => 5,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::load(path)?;
    if config.method.name == MethodName::Surgfed && !config.method.lha_enabled {
        return Err(Error::Config(format!(
            "surgfed requires lha_enabled; valid methods: {}",
            MethodName::ALL.join(", ")
        )));
    }
    Ok(config)
}

/// Resolves a possibly relative path against the config file's parent.
fn resolve_near_config(config_path: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// `gen-data`: renders every site dataset. Re-running over intact data
/// is a checksum-verified no-op.
pub fn cmd_gen_data(config_path: &Path, out_root: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let size = [config.model.input[0], config.model.input[1]];
    for (k, site) in config.sites.iter().enumerate() {
        let spec = site.site_spec(size)?;
        let dir = data::site_dir(out_root, k);
        if data::dataset_up_to_date(&spec, site.samples, &dir)? {
            println!(
                "site {} ({}): up to date, {} samples",
                k, site.name, site.samples
            );
            continue;
        }
        let manifest = data::generate_site_dataset(&spec, site.samples, &dir)?;
        let eval = manifest
            .split
            .iter()
            .filter(|s| **s == data::Split::Eval)
            .count();
        println!(
            "site {} ({}): {} samples written ({} train / {} eval)",
            k,
            site.name,
            manifest.sample_count,
            manifest.sample_count - eval,
            eval
        );
    }
    Ok(())
}

/// `run`: executes the experiment and writes all artifacts.
pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    sequential: bool,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    let data_root = resolve_near_config(config_path, &config.data.dir);
    if let Some(baseline) = &config.data.baseline_run {
        config.data.baseline_run = Some(
            resolve_near_config(config_path, baseline)
                .display()
                .to_string(),
        );
    }
    let report = fed::run_experiment(&config, &data_root, out_dir, seed, sequential)?;
    for log in &report.logs {
        let losses: Vec<String> = log
            .site_losses
            .iter()
            .map(|l| match l.last() {
                Some(v) => format!("{:.4}", v),
                None => "-".into(),
            })
            .collect();
        println!("round {:>3}: losses [{}]", log.round, losses.join(", "));
    }
    if let Some(dm) = &report.summary.delta_m {
        println!("delta_m vs {}: {:.2}", dm.baseline_run, dm.average);
    }
    for warning in &report.summary.warnings {
        eprintln!("warning: {}", warning);
    }
    println!("run artifacts in {}", report.out_dir.display());
    Ok(())
}

/// `delta-m`: per-site Δm of a run against a baseline, plus the
/// cross-site average; writes `delta_m.json` into the run directory.
pub fn cmd_delta_m(run_dir: &Path, baseline_dir: &Path) -> Result<()> {
    let run = fed::read_final_metrics(run_dir)?;
    let baseline = fed::read_final_metrics(baseline_dir)?;
    let names = site_names_of(run_dir, run.iter().map(|(s, _, _)| *s).max().map_or(0, |m| m + 1));
    let mut report = fed::delta_m_between(&run, &baseline, &names)?;
    report.baseline_run = baseline_dir.display().to_string();
    for site in &report.per_site {
        println!("site {} ({}): delta_m {:+.2}", site.site, site.name, site.delta_m);
    }
    println!("average: {:+.2}", report.average);
    std::fs::write(
        run_dir.join("delta_m.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(())
}

fn site_names_of(run_dir: &Path, count: usize) -> Vec<String> {
    if let Ok(text) = std::fs::read_to_string(run_dir.join("config.json")) {
        if let Ok(config) = serde_json::from_str::<ExperimentConfig>(&text) {
            return config.sites.into_iter().map(|s| s.name).collect();
        }
    }
    (0..count).map(|k| format!("site{}", k)).collect()
}

/// `plot`: per-round mean of a metric across sites, one polyline per
/// run directory.
pub fn cmd_plot(run_dirs: &[PathBuf], metric: &str, out_file: &Path) -> Result<()> {
    let mut series = Vec::new();
    for dir in run_dirs {
        let rows = fed::read_metric_rows(dir)?;
        let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for row in rows {
            if row.metric == metric {
                by_round.entry(row.round).or_default().push(row.value);
            }
        }
        if by_round.is_empty() {
            return Err(Error::Input(format!(
                "run {} has no metric named {}",
                dir.display(),
                metric
            )));
        }
        series.push(plot::Series {
            label: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            points: by_round
                .into_iter()
                .map(|(round, vals)| {
                    (
                        round as f64,
                        vals.iter().sum::<f64>() / vals.len() as f64,
                    )
                })
                .collect(),
        });
    }
    let svg = plot::render_line_chart(metric, metric, &series)?;
    std::fs::write(out_file, svg)?;
    println!("wrote {}", out_file.display());
    Ok(())
}
