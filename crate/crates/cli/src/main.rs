use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser};
use collapsim_cli::run::OUT_ENV;
use collapsim_cli::{output_dir, run, run_sweep, CliResult, RunConfig, RunOptions, RunSummary};

/// Run a collapsim experiment described by a JSON config.
#[derive(Debug, Parser)]
#[command(name = "collapsim", version, group(ArgGroup::new("input").required(true).args(["config", "sweep"])))]
struct Args {
    /// Experiment config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// JSON array of config paths, each run into `<out>/<config stem>`.
    #[arg(long, value_name = "PATH")]
    sweep: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Also write the sampled noise paths (trajectories task).
    #[arg(long)]
    dump_paths: bool,
}

fn stem(p: &std::path::Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

fn dispatch(args: &Args) -> CliResult<Vec<RunSummary>> {
    if let Some(list) = &args.sweep {
        if args.dump_paths {
            return Err(collapsim_cli::CliError::Config("--dump-paths is not available for sweeps".into()));
        }
        let out = args
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(|r| PathBuf::from(r).join(stem(list))))
            .unwrap_or_else(|| PathBuf::from(collapsim_cli::run::DEFAULT_OUT_ROOT).join(stem(list)));
        return run_sweep(list, &out, args.workers, args.seed);
    }
    let path = args.config.as_ref().expect("clap enforces --config or --sweep");
    let cfg = RunConfig::load(path)?;
    let base_dir = path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    let out = output_dir(args.out.as_deref(), &cfg, &base_dir, &stem(path), std::env::var_os(OUT_ENV));
    let opts = RunOptions { out, workers: args.workers, seed: args.seed, dump_paths: args.dump_paths, base_dir };
    Ok(vec![run(&cfg, &opts)?])
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(&args) {
        Ok(runs) => {
            for r in runs {
                eprintln!("wrote {} to {}", r.files.join(", "), r.out.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
