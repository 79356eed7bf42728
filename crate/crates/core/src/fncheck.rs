//! Monte Carlo check of the Gaussian integration-by-parts identity
//! `⟨F[w] w(t)⟩ = γ ∫_{t₀}^{t} D(t, s) ⟨δF/δw(s)⟩ ds` for a fixed menu of
//! functionals of the integrated noise `x(t)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ensemble::{run_indexed, EnsembleConfig};
use crate::error::{Error, Result};
use crate::kernels::{CorrelationKernel, KernelShape};
use crate::noise::{NoiseModel, TimeGrid};
use crate::quad::gauss_legendre;
use crate::stats::{mean_stderr, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    /// `F = 1`.
    Constant,
    /// `F = x(t)`.
    LinearX,
    /// `F = e^{x(t)}`.
    ExpX,
}

impl Functional {
    pub const ALL: [Functional; 3] = [Functional::Constant, Functional::LinearX, Functional::ExpX];

    fn value(&self, x: f64) -> f64 {
        match self {
            Functional::Constant => 1.0,
            Functional::LinearX => x,
            Functional::ExpX => x.exp(),
        }
    }

    /// `⟨δF/δw(s)⟩` for `s ∈ [t₀, t]`, given `Var x(t) = γf`.
    fn mean_derivative(&self, gamma_f: f64) -> f64 {
        match self {
            Functional::Constant => 0.0,
            Functional::LinearX => 1.0,
            Functional::ExpX => (0.5 * gamma_f).exp(),
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Functional::Constant => "constant",
            Functional::LinearX => "linear-x",
            Functional::ExpX => "exp-x",
        })
    }
}

impl FromStr for Functional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Functional::Constant),
            "linear-x" => Ok(Functional::LinearX),
            "exp-x" => Ok(Functional::ExpX),
            other => Err(Error::UnknownFunctional(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnReport {
    pub kernel: String,
    pub functional: Functional,
    pub lhs: Estimate,
    pub rhs: f64,
}

impl FnReport {
    pub fn sigmas(&self) -> f64 {
        self.lhs.sigmas_from(self.rhs)
    }
}

/// `∫_{t₀}^{t} D(t, s) ds` by composite Gauss–Legendre. White noise
/// contributes half its delta at the endpoint.
pub fn kernel_integral(kernel: &CorrelationKernel, t: f64, t0: f64, panels: usize) -> Result<f64> {
    if t < t0 {
        return Err(Error::InvalidInterval { t, t0 });
    }
    if let KernelShape::White = kernel.shape() {
        return Ok(0.5);
    }
    let mut breaks = vec![t0];
    if let KernelShape::Tabulated(table) = kernel.shape() {
        for &l in table.lags() {
            if l > 0.0 && t - l > t0 {
                breaks.push(t - l);
            }
        }
        breaks.sort_by(f64::total_cmp);
    }
    breaks.push(t);
    let per = panels.div_ceil(breaks.len() - 1).max(1);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += gauss_legendre(|s| kernel.eval(t, s).unwrap_or(0.0), w[0], w[1], per);
    }
    Ok(total)
}

pub const RHS_PANELS: usize = 64;

/// `γ ∫ D(t, s) ⟨δF/δw(s)⟩ ds` on `[t₀, t]`.
pub fn fn_rhs(kernel: &CorrelationKernel, functional: Functional, t: f64, t0: f64, panels: usize) -> Result<f64> {
    let d = functional.mean_derivative(kernel.gamma() * kernel.double_integral(t, t0)?);
    if d == 0.0 {
        return Ok(0.0);
    }
    Ok(kernel.gamma() * kernel_integral(kernel, t, t0, panels)? * d)
}

/// Both sides of the identity at `t = grid.t1()` from `cfg.trajectories`
/// noise paths.
pub fn fn_validate(
    kernel: &CorrelationKernel,
    functional: Functional,
    grid: &TimeGrid,
    cfg: &EnsembleConfig,
) -> Result<FnReport> {
    let model = NoiseModel::new(*grid, kernel, 1)?;
    let k = grid.steps();
    let samples = run_indexed(cfg, |l| {
        let r = model.sample(l);
        Ok(functional.value(r.x(0)[k]) * r.value_at(0, k))
    })?;
    Ok(FnReport {
        kernel: kernel.family().to_string(),
        functional,
        lhs: mean_stderr(&samples),
        rhs: fn_rhs(kernel, functional, grid.t1(), grid.t0(), RHS_PANELS)?,
    })
}

pub const FN_HEADER: &str = "kernel,functional,lhs,rhs,stderr,sigmas";

pub fn write_fn_csv<W: Write>(reports: &[FnReport], out: &mut W) -> Result<()> {
    writeln!(out, "{FN_HEADER}")?;
    for r in reports {
        writeln!(out, "{},{},{},{},{},{}", r.kernel, r.functional, r.lhs.mean, r.rhs, r.lhs.stderr, r.sigmas())?;
    }
    Ok(())
}
