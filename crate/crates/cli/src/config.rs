//! Run configuration: one JSON document describes one experiment.

use std::path::{Path, PathBuf};

use collapsim::kernels::{CorrelationKernel, KernelFamily, LagTable};
use collapsim::macrobody::{MacroBody, MacroParams};
use collapsim::noise::TimeGrid;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Trajectories,
    Master,
    FnCheck,
    MacroRate,
    KernelDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<TrajectoryOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master: Option<MasterOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fn_check: Option<FnCheckOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_rate: Option<MacroOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_diag: Option<KernelDiagOptions>,
}

/// A complex number written either as a real scalar or as `[re, im]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Real(f64),
    Complex([f64; 2]),
}

impl Amplitude {
    pub fn to_complex(self) -> Complex64 {
        match self {
            Amplitude::Real(r) => Complex64::new(r, 0.0),
            Amplitude::Complex([re, im]) => Complex64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub d: usize,
    /// One row of `d` eigenvalues per commuting operator.
    pub eigenvalues: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Dense `d × d` matrix, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<Vec<Vec<Amplitude>>>,
    pub psi0: Vec<Amplitude>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// `lag,value` CSV for the tabulated family, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

fn default_workers() -> usize {
    1
}

fn default_checkpoints() -> usize {
    collapsim::dynamics::DEFAULT_CHECKPOINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub n: usize,
    pub master_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    /// CSL stepping for white kernels, the commuting closed form otherwise.
    #[default]
    Auto,
    CslWhite,
    RawLinear,
    Colored,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalChoice {
    #[default]
    Raw,
    /// One shifted Gaussian per outcome branch at the final node.
    Outcome,
}

fn default_threshold() -> f64 {
    collapsim::reduction::DEFAULT_THRESHOLD
}

fn default_batches() -> usize {
    collapsim::master::DEFAULT_BATCHES
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryOptions {
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub proposal: ProposalChoice,
    /// Also write outcome statistics at the final checkpoint.
    #[serde(default)]
    pub born_stats: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self {
            solver: SolverChoice::Auto,
            proposal: ProposalChoice::Raw,
            born_stats: false,
            threshold: default_threshold(),
            batches: default_batches(),
        }
    }
}

/// A finite kernel origin or `"-inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Origin {
    At(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterOptions {
    /// Noise switch-on time; defaults to the grid start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    /// Recorded nodes, spread evenly over the grid.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnCheckOptions {
    /// Defaults to every shipped functional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functionals: Option<Vec<collapsim::fncheck::Functional>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum BodyConfig {
    Lattice { n: usize, spacing: f64 },
    Csv(PathBuf),
    Offsets(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    pub body: BodyConfig,
    /// Centre-of-mass separations `|ΔQ|` along x, cm.
    pub separations: Vec<f64>,
    /// Evaluation times, s.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDiagOptions {
    pub times: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
}

impl Default for MasterOptions {
    fn default() -> Self {
        Self { origin: None, checkpoints: default_checkpoints() }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Canonical serialization, hashed into the manifest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub(crate) fn require<'a, T>(&self, block: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        block.as_ref().ok_or_else(|| CliError::Config(format!("task {:?} needs a `{name}` block", self.task)))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl KernelConfig {
    pub fn build(&self, base: &Path) -> CliResult<CorrelationKernel> {
        let tau = || self.tau.ok_or_else(|| CliError::Config(format!("{} kernel needs `tau`", self.family)));
        let no_table = || match self.table {
            Some(_) => Err(CliError::Config("`table` only applies to the tabulated family".into())),
            None => Ok(()),
        };
        Ok(match self.family {
            KernelFamily::White => {
                no_table()?;
                if self.tau.is_some() {
                    return Err(CliError::Config("white kernel takes no `tau`".into()));
                }
                CorrelationKernel::white(self.gamma)?
            }
            KernelFamily::Gaussian => {
                no_table()?;
                CorrelationKernel::gaussian(self.gamma, tau()?)?
            }
            KernelFamily::Exponential => {
                no_table()?;
                CorrelationKernel::exponential(self.gamma, tau()?)?
            }
            KernelFamily::Tabulated => {
                let path =
                    self.table.as_ref().ok_or_else(|| CliError::Config("tabulated kernel needs `table`".into()))?;
                CorrelationKernel::tabulated(self.gamma, LagTable::from_csv_path(resolve(base, path))?)?
            }
        })
    }
}

impl GridConfig {
    pub fn build(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::new(self.t0, self.t1, self.steps)?)
    }
}

impl Origin {
    pub fn value(&self) -> CliResult<f64> {
        match self {
            Origin::At(t) if t.is_finite() => Ok(*t),
            Origin::Named(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(CliError::Config(format!("origin must be a finite number or \"-inf\", got {other:?}"))),
        }
    }
}

impl MacroOptions {
    pub fn params(&self) -> CliResult<MacroParams> {
        let d = MacroParams::default();
        let alpha = self.alpha.unwrap_or(d.alpha);
        let p = MacroParams {
            alpha,
            lambda: self.lambda.unwrap_or(d.lambda),
            beta: self.beta.unwrap_or(collapsim::macrobody::SPEED_OF_LIGHT.powi(2) * alpha),
            t0: self.t0.unwrap_or(d.t0),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn body(&self, base: &Path) -> CliResult<MacroBody> {
        Ok(match &self.body {
            BodyConfig::Lattice { n, spacing } => {
                if !(spacing.is_finite() && *spacing > 0.0) {
                    return Err(CliError::Config("lattice spacing must be positive".into()));
                }
                MacroBody::cubic_lattice(*n, *spacing)?
            }
            BodyConfig::Csv(p) => MacroBody::from_csv_path(resolve(base, p))?,
            BodyConfig::Offsets(o) => MacroBody::new(o.clone())?,
        })
    }
}
