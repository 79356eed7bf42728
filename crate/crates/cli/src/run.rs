//! Validates a configuration into a plan, writes the manifest, then runs.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use collapsim::dynamics::{run_ensemble, write_checkpoint_csv, Checkpoints, Solver, TrajectoryProblem};
use collapsim::ensemble::{EnsembleConfig, Lineage};
use collapsim::fncheck::{fn_validate, write_fn_csv, Functional};
use collapsim::hilbert::{CommutingSet, DensityMatrix, Hamiltonian, StateVector};
use collapsim::kernels::CorrelationKernel;
use collapsim::macrobody::{rate_table, write_rates_csv, MacroBody, MacroParams};
use collapsim::master::{
    ensemble_to_density, evolve_colored_master, evolve_lindblad_csl, write_density_csv, DensityMode,
};
use collapsim::noise::{NoiseModel, NoiseRealization, Proposal, TimeGrid};
use collapsim::reduction::{born_frequencies, cook_weights, outcome_proposal, write_stats_csv};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ProposalChoice, RunConfig, SolverChoice, SystemConfig, Task, TrajectoryOptions};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_OUT_ROOT: &str = "collapsim-out";
pub const OUT_ENV: &str = "COLLAPSIM_OUT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub dump_paths: bool,
    /// Directory that relative paths inside the config resolve against.
    pub base_dir: PathBuf,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), workers: None, seed: None, dump_paths: false, base_dir: PathBuf::from(".") }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    task: Task,
    config_sha256: String,
    master_seed: Option<u64>,
    workers: Option<usize>,
    files: &'a [String],
}

/// `--out`, then the config's `output`, then `$COLLAPSIM_OUT/<stem>`, then
/// `collapsim-out/<stem>`.
pub fn output_dir(flag: Option<&Path>, cfg: &RunConfig, base_dir: &Path, stem: &str, env: Option<OsString>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output {
        return if p.is_absolute() { p.clone() } else { base_dir.join(p) };
    }
    match env.filter(|v| !v.is_empty()) {
        Some(root) => PathBuf::from(root).join(stem),
        None => PathBuf::from(DEFAULT_OUT_ROOT).join(stem),
    }
}

struct TrajectoryPlan {
    set: CommutingSet,
    psi0: StateVector,
    h: Hamiltonian,
    kernel: CorrelationKernel,
    grid: TimeGrid,
    ensemble: EnsembleConfig,
    checkpoints: Checkpoints,
    options: TrajectoryOptions,
    dump_paths: bool,
}

enum Plan {
    Trajectories(Box<TrajectoryPlan>),
    Master {
        set: CommutingSet,
        rho0: DensityMatrix,
        h: Hamiltonian,
        kernel: CorrelationKernel,
        grid: TimeGrid,
        origin: f64,
        nodes: Vec<usize>,
    },
    FnCheck {
        kernel: CorrelationKernel,
        grid: TimeGrid,
        ensemble: EnsembleConfig,
        functionals: Vec<Functional>,
    },
    MacroRate {
        params: MacroParams,
        body: MacroBody,
        separations: Vec<f64>,
        times: Vec<f64>,
    },
    KernelDiag {
        kernel: CorrelationKernel,
        times: Vec<f64>,
        t0: f64,
    },
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn build_system(sys: &SystemConfig) -> CliResult<(CommutingSet, StateVector, Hamiltonian)> {
    if sys.d == 0 {
        return Err(config_err("system dimension `d` must be at least 1"));
    }
    if sys.eigenvalues.is_empty() || sys.eigenvalues.iter().any(|row| row.len() != sys.d) {
        return Err(config_err(format!("`eigenvalues` needs one row of {} values per operator", sys.d)));
    }
    let set = match &sys.labels {
        Some(labels) => CommutingSet::with_labels(sys.eigenvalues.clone(), labels.clone())?,
        None => CommutingSet::new(sys.eigenvalues.clone())?,
    };
    if sys.psi0.len() != sys.d {
        return Err(config_err(format!("`psi0` needs {} amplitudes", sys.d)));
    }
    let psi0 = StateVector::new(sys.psi0.iter().map(|a| a.to_complex()).collect())?;
    let n2 = psi0.norm2()?;
    if (n2 - 1.0).abs() > 1e-10 {
        return Err(config_err(format!("`psi0` must be normalized, has squared norm {n2}")));
    }
    let h = match &sys.hamiltonian {
        None => Hamiltonian::zero(sys.d),
        Some(rows) => {
            if rows.len() != sys.d || rows.iter().any(|r| r.len() != sys.d) {
                return Err(config_err(format!("`hamiltonian` must be {0}×{0}", sys.d)));
            }
            Hamiltonian::new(DMatrix::from_fn(sys.d, sys.d, |i, j| rows[i][j].to_complex()))?
        }
    };
    Ok((set, psi0, h))
}

fn ensemble_config(cfg: &RunConfig, workers: Option<usize>) -> CliResult<EnsembleConfig> {
    let e = cfg.require(&cfg.ensemble, "ensemble")?;
    let ec = EnsembleConfig::new(e.n, e.master_seed, workers.unwrap_or(e.workers));
    ec.validate()?;
    Ok(ec)
}

fn check_times(times: &[f64], t0: f64) -> CliResult<()> {
    if times.is_empty() {
        return Err(config_err("`times` must not be empty"));
    }
    for &t in times {
        if !t.is_finite() {
            return Err(config_err("times must be finite"));
        }
        if t < t0 {
            return Err(collapsim::Error::InvalidInterval { t, t0 }.into());
        }
    }
    Ok(())
}

fn plan(cfg: &RunConfig, opts: &RunOptions) -> CliResult<(Plan, Vec<String>)> {
    let base = opts.base_dir.as_path();
    let kernel = || cfg.require(&cfg.kernel, "kernel")?.build(base);
    let grid = || cfg.require(&cfg.grid, "grid")?.build();
    Ok(match cfg.task {
        Task::Trajectories => {
            let (set, psi0, h) = build_system(cfg.require(&cfg.system, "system")?)?;
            let kernel = kernel()?;
            let grid = grid()?;
            let ensemble = ensemble_config(cfg, opts.workers)?;
            let options = cfg.trajectories.unwrap_or_default();
            if !(options.threshold > 0.5 && options.threshold < 1.0) {
                return Err(config_err("`threshold` must lie in (0.5, 1)"));
            }
            if options.batches < 2 || options.batches > ensemble.trajectories {
                return Err(config_err("`batches` must lie in [2, n]"));
            }
            if matches!(options.solver, SolverChoice::CslWhite | SolverChoice::RawLinear) && !kernel.is_white() {
                return Err(config_err("the csl-white and raw-linear solvers need a white kernel"));
            }
            let checkpoints = Checkpoints::even(&grid, cfg.ensemble.map(|e| e.checkpoints).unwrap_or_default());
            let mut files = vec!["trajectories.csv".to_string(), "density.csv".to_string()];
            if options.born_stats {
                files.push("stats.csv".into());
            }
            if opts.dump_paths {
                files.push("paths.csv".into());
            }
            let p = TrajectoryPlan {
                set,
                psi0,
                h,
                kernel,
                grid,
                ensemble,
                checkpoints,
                options,
                dump_paths: opts.dump_paths,
            };
            (Plan::Trajectories(Box::new(p)), files)
        }
        Task::Master => {
            let (set, psi0, h) = build_system(cfg.require(&cfg.system, "system")?)?;
            let kernel = kernel()?;
            let grid = grid()?;
            let options = cfg.master.clone().unwrap_or_default();
            let origin = match &options.origin {
                Some(o) => o.value()?,
                None => grid.t0(),
            };
            if kernel.is_white() && origin != grid.t0() {
                return Err(config_err("white-noise master equation has no origin"));
            }
            if !kernel.is_white() && !h.is_zero() {
                return Err(config_err("the colored master equation is implemented for H0 = 0 only"));
            }
            if origin > grid.t0() {
                return Err(collapsim::Error::InvalidInterval { t: grid.t0(), t0: origin }.into());
            }
            let nodes = Checkpoints::even(&grid, options.checkpoints).as_slice().to_vec();
            let rho0 = DensityMatrix::pure(&psi0)?;
            (Plan::Master { set, rho0, h, kernel, grid, origin, nodes }, vec!["density.csv".into()])
        }
        Task::FnCheck => {
            let functionals =
                cfg.fn_check.clone().unwrap_or_default().functionals.unwrap_or_else(|| Functional::ALL.to_vec());
            if functionals.is_empty() {
                return Err(config_err("`functionals` must not be empty"));
            }
            let plan = Plan::FnCheck {
                kernel: kernel()?,
                grid: grid()?,
                ensemble: ensemble_config(cfg, opts.workers)?,
                functionals,
            };
            (plan, vec!["fn_check.csv".into()])
        }
        Task::MacroRate => {
            let m = cfg.require(&cfg.macro_rate, "macro_rate")?;
            let params = m.params()?;
            let body = m.body(base)?;
            if m.separations.is_empty() || m.separations.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                return Err(config_err("`separations` must be non-empty, finite and non-negative"));
            }
            check_times(&m.times, params.t0)?;
            (
                Plan::MacroRate { params, body, separations: m.separations.clone(), times: m.times.clone() },
                vec!["rates.csv".into()],
            )
        }
        Task::KernelDiag => {
            let d = cfg.require(&cfg.kernel_diag, "kernel_diag")?;
            if !d.t0.is_finite() {
                return Err(config_err("`t0` must be finite"));
            }
            check_times(&d.times, d.t0)?;
            (Plan::KernelDiag { kernel: kernel()?, times: d.times.clone(), t0: d.t0 }, vec!["kernel_diag.csv".into()])
        }
    })
}

/// Applies the seed override to the config that gets hashed and recorded.
fn effective_config(cfg: &RunConfig, seed: Option<u64>) -> RunConfig {
    let mut cfg = cfg.clone();
    if let (Some(s), Some(e)) = (seed, cfg.ensemble.as_mut()) {
        e.master_seed = s;
    }
    cfg
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| CliError::Io { path, source })
}

fn finish(mut w: BufWriter<File>, dir: &Path, name: &str) -> CliResult<()> {
    w.flush().map_err(|source| CliError::Io { path: dir.join(name), source })
}

fn write_with(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> CliResult<()>) -> CliResult<()> {
    let mut w = create(dir, name)?;
    body(&mut w)?;
    finish(w, dir, name)
}

/// Runs one experiment. Everything is validated before the output directory
/// is touched; the manifest is written before any result file.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> CliResult<RunSummary> {
    let cfg = effective_config(cfg, opts.seed);
    if opts.dump_paths && cfg.task != Task::Trajectories {
        return Err(config_err("--dump-paths applies to the trajectories task only"));
    }
    let (plan, files) = plan(&cfg, opts)?;
    let dir = opts.out.as_path();
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
    let manifest = Manifest {
        tool: "collapsim",
        version: env!("CARGO_PKG_VERSION"),
        core_version: collapsim::VERSION,
        task: cfg.task,
        config_sha256: format!("{:x}", Sha256::digest(cfg.canonical_json().as_bytes())),
        master_seed: cfg.ensemble.map(|e| e.master_seed),
        workers: cfg.ensemble.map(|e| opts.workers.unwrap_or(e.workers)),
        files: &files,
    };
    write_with(dir, MANIFEST, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)
            .map_err(|e| CliError::Io { path: dir.join(MANIFEST), source: e.into() })?;
        writeln!(w).map_err(|source| CliError::Io { path: dir.join(MANIFEST), source })
    })?;
    execute(plan, dir)?;
    Ok(RunSummary { out: dir.to_path_buf(), files })
}

fn execute(plan: Plan, dir: &Path) -> CliResult<()> {
    match plan {
        Plan::Trajectories(p) => run_trajectories(*p, dir),
        Plan::Master { set, rho0, h, kernel, grid, origin, nodes } => {
            let path = if kernel.is_white() {
                evolve_lindblad_csl(&h, &set, &rho0, &grid, kernel.gamma(), &nodes)?
            } else {
                evolve_colored_master(&set, &rho0, &grid, &kernel, origin, &nodes)?
            };
            write_with(dir, "density.csv", |w| Ok(write_density_csv(w, &path.times, &path.rhos, None)?))
        }
        Plan::FnCheck { kernel, grid, ensemble, functionals } => {
            let reports = functionals
                .iter()
                .map(|&f| fn_validate(&kernel, f, &grid, &ensemble))
                .collect::<Result<Vec<_>, _>>()?;
            write_with(dir, "fn_check.csv", |w| Ok(write_fn_csv(&reports, w)?))
        }
        Plan::MacroRate { params, body, separations, times } => {
            let rows = rate_table(&body, &separations, &times, &params)?;
            write_with(dir, "rates.csv", |w| Ok(write_rates_csv(&rows, w)?))
        }
        Plan::KernelDiag { kernel, times, t0 } => {
            let mut rows = Vec::with_capacity(times.len());
            for &t in &times {
                // A white kernel is a delta at zero lag.
                let d = match kernel.eval(t, t0) {
                    Ok(v) => v,
                    Err(collapsim::Error::UnsupportedPointwiseEval) => {
                        if t == t0 {
                            f64::INFINITY
                        } else {
                            0.0
                        }
                    }
                    Err(e) => return Err(e.into()),
                };
                rows.push((t, d, kernel.cumulative(t, t0)?, kernel.double_integral(t, t0)?));
            }
            write_with(dir, "kernel_diag.csv", |w| {
                writeln!(w, "t,D,G,f")
                    .and_then(|_| rows.iter().try_for_each(|(t, d, g, f)| writeln!(w, "{t},{d},{g},{f}")))
                    .map_err(|source| CliError::Io { path: dir.join("kernel_diag.csv"), source })
            })
        }
    }
}

fn run_trajectories(p: TrajectoryPlan, dir: &Path) -> CliResult<()> {
    let model = NoiseModel::new(p.grid, &p.kernel, p.set.num_ops())?;
    let proposal = match p.options.proposal {
        ProposalChoice::Raw => Proposal::Raw,
        ProposalChoice::Outcome => Proposal::Mixture(outcome_proposal(&model, &p.set, &p.psi0, p.grid.steps())?),
    };
    let nonzero_h = (!p.h.is_zero()).then(|| p.h.clone());
    let solver = match p.options.solver {
        SolverChoice::Auto if p.kernel.is_white() => Solver::CslWhite { h: p.h.clone(), gamma: p.kernel.gamma() },
        SolverChoice::CslWhite => Solver::CslWhite { h: p.h.clone(), gamma: p.kernel.gamma() },
        SolverChoice::RawLinear => Solver::RawLinear { h: p.h.clone() },
        SolverChoice::Auto | SolverChoice::Colored => {
            Solver::ColoredCommuting { kernel: p.kernel.clone(), h: nonzero_h }
        }
    };
    let problem = TrajectoryProblem {
        set: p.set.clone(),
        psi0: p.psi0.clone(),
        model,
        solver,
        checkpoints: p.checkpoints.clone(),
        proposal,
    };
    let records = run_ensemble(&problem, &p.ensemble)?;
    write_with(dir, "trajectories.csv", |w| Ok(write_checkpoint_csv(&records, &p.set, w)?))?;
    let est = ensemble_to_density(&records, DensityMode::Cooked, p.options.batches)?;
    write_with(dir, "density.csv", |w| {
        Ok(write_density_csv(w, &est.times, &est.mean, Some((&est.stderr_re, &est.stderr_im)))?)
    })?;
    if p.options.born_stats {
        let last = p.checkpoints.len() - 1;
        let weights = cook_weights(&records, last)?;
        let report = born_frequencies(&records, &weights, &p.set, &p.psi0, last, p.options.threshold)?;
        write_with(dir, "stats.csv", |w| Ok(write_stats_csv(&report, w)?))?;
    }
    if p.dump_paths {
        write_with(dir, "paths.csv", |w| {
            let io = |source| CliError::Io { path: dir.join("paths.csv"), source };
            writeln!(w, "{}", NoiseRealization::csv_header(p.set.num_ops())).map_err(io)?;
            for i in 0..p.ensemble.trajectories as u64 {
                let noise = problem.model.sample_with(Lineage::new(p.ensemble.master_seed, i), &problem.proposal);
                noise.write_csv_rows(i, w).map_err(io)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Runs every config listed in a JSON array of paths, each into
/// `<out>/<config stem>`. Stops at the first failure.
pub fn run_sweep(list: &Path, out: &Path, workers: Option<usize>, seed: Option<u64>) -> CliResult<Vec<RunSummary>> {
    let text = std::fs::read_to_string(list).map_err(|source| CliError::Io { path: list.to_path_buf(), source })?;
    let entries: Vec<PathBuf> = serde_json::from_str(&text).map_err(|e| config_err(format!("sweep list: {e}")))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut stems = std::collections::BTreeSet::new();
    let mut jobs = Vec::with_capacity(entries.len());
    for e in entries {
        let path = if e.is_absolute() { e } else { base.join(e) };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(config_err(format!("sweep lists two configs named `{stem}`")));
        }
        let cfg = RunConfig::load(&path)?;
        jobs.push((path, stem, cfg));
    }
    jobs.into_iter()
        .map(|(path, stem, cfg)| {
            let opts = RunOptions {
                out: out.join(&stem),
                workers,
                seed,
                dump_paths: false,
                base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            run(&cfg, &opts)
        })
        .collect()
}
