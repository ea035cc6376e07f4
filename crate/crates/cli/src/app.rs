//! The `m2dan` command line: argument parsing and the subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2dan_core::checkpoint::{load_checkpoint, peek_spec};
use m2dan_core::data::{benchmark_specs, export_dataset_dir, load_dataset_dir, synthesize, DomainData, Half, DEFAULT_FRACTION};
use m2dan_core::metrics::evaluate;
use m2dan_core::training::EpochRecord;

use crate::config::ExperimentConfig;
use crate::experiment::{
    ablation_configs, ablation_csv, io_err, load_data, run, run_grid, sweep_configs, sweep_csv, worker_threads,
    write, write_artifacts, Ablation, SweepParam,
};
use crate::svg::plot_history;
use crate::CliError;

const TRAIN_HELP: &str = "\
Artifacts written to out_dir:
  model.m2dn    checkpoint (parameters, hyperparameters, history)
  history.csv   epoch,l_fo,l_en,l_d, then acc_<domain>,auc_<domain> per domain
  curves.svg    loss curves and per-domain validation AUC
  metrics.json  final target metrics {domains:[{name,n,accuracy,auc}],mean_acc,mean_auc}
  config.txt    effective configuration; re-running from it reproduces the run";

const ABLATE_HELP: &str = "\
CSV columns: variant, acc_<target>, auc_<target> per target, mean_acc, mean_auc.
scales rows: s1, s3, s5, mixed. losses rows: ce, focal, focal+domain, focal+domain+entropy.";

const SWEEP_HELP: &str = "\
CSV columns: <param>, auc_<target> per target, mean_auc.
Grids: alpha 0.0003 0.003 0.03 0.3; eta and lambda 0.001 0.01 0.1 1.";

#[derive(Parser)]
#[command(name = "m2dan", version, about = "Multi-scale multi-target domain adversarial experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress the config echo and per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic benchmark as a PGM dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FRACTION)]
        scale_fraction: f64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train one model and write its artifacts.
    #[command(after_help = TRAIN_HELP)]
    Train(ConfigArgs),
    /// Evaluate a checkpoint and print the metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "synthetic_seed", required_unless_present = "synthetic_seed")]
        data: Option<PathBuf>,
        #[arg(long)]
        synthetic_seed: Option<u64>,
        #[arg(long, default_value = "none")]
        half: String,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = DEFAULT_FRACTION)]
        scale_fraction: f64,
    },
    /// Train the filter-size or loss ablation and write a CSV.
    #[command(after_help = ABLATE_HELP)]
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["scales", "losses"])]
        which: String,
        /// CSV path; defaults to <out_dir>/ablation_<which>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train over a hyperparameter grid and write a CSV.
    #[command(after_help = SWEEP_HELP)]
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["alpha", "eta", "lambda"])]
        param: String,
        /// CSV path; defaults to <out_dir>/sweep_<param>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a history CSV as an SVG plot.
    Plot {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value applied after the file, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(format!("reading {}", p.display())))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

fn log_epoch(quiet: bool, prefix: &str, r: &EpochRecord) {
    if quiet {
        return;
    }
    let scores: Vec<String> = r
        .domains
        .iter()
        .map(|d| format!("{} {:.3}/{:.3}", d.name, d.accuracy, d.auc))
        .collect();
    eprintln!(
        "{prefix}epoch {} l_fo {:.4} l_en {:.4} l_d {:.4} | {}",
        r.epoch,
        r.l_fo,
        r.l_en,
        r.l_d,
        scores.join(", ")
    );
}

fn class_counts(samples: &[m2dan_core::data::DomainSample]) -> String {
    let labeled: Vec<_> = samples.iter().filter_map(|s| s.class_label).collect();
    if labeled.is_empty() {
        return format!("{} (unlabeled)", samples.len());
    }
    let narrow = labeled.iter().filter(|&&l| l == m2dan_core::data::ClassLabel::Narrow).count();
    format!("{} (narrow {narrow}, open {})", samples.len(), labeled.len() - narrow)
}

fn gen_data(out: &PathBuf, seed: u64, fraction: f64, size: usize) -> Result<(), CliError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Usage(format!("--scale-fraction must lie in (0, 1], got {fraction}")));
    }
    let data = synthesize(&benchmark_specs(fraction), size, seed)?;
    export_dataset_dir(&data, out)?;
    for d in &data {
        println!("{}: train {}, test {}", d.name, class_counts(&d.train), class_counts(&d.test));
    }
    Ok(())
}

fn train_cmd(args: &ConfigArgs, quiet: bool) -> Result<(), CliError> {
    let cfg = args.load()?;
    worker_threads()?;
    if !quiet {
        eprint!("{}", cfg.to_text());
    }
    let data = load_data(&cfg)?;
    let out = run(&cfg, &data, |r| log_epoch(quiet, "", r))?;
    let dir = write_artifacts(&cfg, &out)?;
    println!("{}", out.report.to_json()?);
    if !quiet {
        eprintln!("artifacts written to {}", dir.display());
    }
    Ok(())
}

fn eval_cmd(
    checkpoint: &PathBuf,
    data_dir: Option<&PathBuf>,
    seed: Option<u64>,
    half: &str,
    size: usize,
    fraction: f64,
) -> Result<(), CliError> {
    let spec = peek_spec(checkpoint)?;
    let state = load_checkpoint(checkpoint, &spec)?;
    let data: Vec<DomainData> = match (data_dir, seed) {
        (Some(dir), _) => {
            let half = Half::parse(half).ok_or_else(|| CliError::Usage(format!("unknown --half `{half}`")))?;
            load_dataset_dir(dir, half, size)?
        }
        (None, Some(seed)) => synthesize(&benchmark_specs(fraction), size, seed)?,
        (None, None) => return Err(CliError::Usage("either --data or --synthetic-seed is required".into())),
    };
    if data.len() != spec.num_domains {
        return Err(m2dan_core::Error::SpecMismatch(format!(
            "checkpoint was trained on {} domains, data has {}",
            spec.num_domains,
            data.len()
        ))
        .into());
    }
    println!("{}", evaluate(&state.model, &data)?.to_json()?);
    Ok(())
}

fn ablate_cmd(args: &ConfigArgs, which: &str, out: Option<&PathBuf>, quiet: bool) -> Result<(), CliError> {
    let cfg = args.load()?;
    let threads = worker_threads()?;
    let which_kind = Ablation::parse(which).ok_or_else(|| CliError::Usage(format!("unknown ablation `{which}`")))?;
    let data = load_data(&cfg)?;
    let variants = ablation_configs(&cfg, which_kind);
    let configs: Vec<ExperimentConfig> = variants.iter().map(|v| v.1.clone()).collect();
    let reports = run_grid(&configs, &data, threads, |i, r| log_epoch(quiet, &format!("[{}] ", variants[i].0), r))?;
    let rows: Vec<_> = variants.into_iter().map(|v| v.0).zip(reports).collect();
    let path = out
        .cloned()
        .unwrap_or_else(|| cfg.out_dir.join(format!("ablation_{which}.csv")));
    emit_csv(&path, &ablation_csv(&rows))
}

fn sweep_cmd(args: &ConfigArgs, param: &str, out: Option<&PathBuf>, quiet: bool) -> Result<(), CliError> {
    let cfg = args.load()?;
    let threads = worker_threads()?;
    let p = SweepParam::parse(param).ok_or_else(|| CliError::Usage(format!("unknown sweep parameter `{param}`")))?;
    let data = load_data(&cfg)?;
    let grid = sweep_configs(&cfg, p);
    let configs: Vec<ExperimentConfig> = grid.iter().map(|g| g.1.clone()).collect();
    let reports = run_grid(&configs, &data, threads, |i, r| log_epoch(quiet, &format!("[{param}={}] ", grid[i].0), r))?;
    let rows: Vec<_> = grid.into_iter().map(|g| g.0).zip(reports).collect();
    let path = out.cloned().unwrap_or_else(|| cfg.out_dir.join(format!("sweep_{param}.csv")));
    emit_csv(&path, &sweep_csv(p, &rows))
}

fn emit_csv(path: &PathBuf, csv: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    write(path, csv)?;
    print!("{csv}");
    Ok(())
}

fn plot_cmd(history: &PathBuf, out: &PathBuf) -> Result<(), CliError> {
    let csv = fs::read_to_string(history).map_err(io_err(format!("reading {}", history.display())))?;
    write(out, &plot_history(&csv)?)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match &cli.command {
        Command::GenData {
            out,
            seed,
            scale_fraction,
            image_size,
        } => gen_data(out, *seed, *scale_fraction, *image_size),
        Command::Train(args) => train_cmd(args, quiet),
        Command::Eval {
            checkpoint,
            data,
            synthetic_seed,
            half,
            image_size,
            scale_fraction,
        } => eval_cmd(checkpoint, data.as_ref(), *synthetic_seed, half, *image_size, *scale_fraction),
        Command::Ablate { config, which, out } => ablate_cmd(config, which, out.as_ref(), quiet),
        Command::Sweep { config, param, out } => sweep_cmd(config, param, out.as_ref(), quiet),
        Command::Plot { history, out } => plot_cmd(history, out),
    }
}

/// Parses `args` (program name first) and runs the subcommand. Help and
/// version requests come back as [`CliError::Args`] with exit code 0.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch(Cli::try_parse_from(args).map_err(CliError::Args)?)
}

/// [`run_from`] with diagnostics printed and mapped to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run_from(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Args(e)) => {
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { 1 } else { 0 })
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("m2dan: error: {line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
