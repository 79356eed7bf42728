//! Deterministic density-matrix evolutions and the ensemble estimator they
//! are compared against.

use std::io::Write;

use nalgebra::DMatrix;

use crate::dynamics::TrajectoryRecord;
use crate::error::{invalid, Error, Result};
use crate::hilbert::{CommutingSet, DensityMatrix, Hamiltonian, C64};
use crate::kernels::CorrelationKernel;
use crate::noise::TimeGrid;
use crate::quad::CompensatedSum;
use crate::stats::batch_ranges;

pub const TRACE_DRIFT_LIMIT: f64 = 1e-8;
const MAX_HALVINGS: u32 = 8;
pub const DEFAULT_BATCHES: usize = 100;

/// A density-matrix path at selected grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    pub times: Vec<f64>,
    pub rhos: Vec<DMatrix<C64>>,
}

impl DensityPath {
    pub fn entry(&self, k: usize, i: usize, j: usize) -> C64 {
        self.rhos[k][(i, j)]
    }
}

fn commutator(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a * b - b * a
}

/// RK4 over each grid interval with `substeps` equal substeps. A trace drift
/// above the limit halves the substep size, up to eight times.
fn integrate<F>(
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    nodes: &[usize],
    base_substeps: usize,
    rhs: F,
) -> Result<DensityPath>
where
    F: Fn(f64, &DMatrix<C64>) -> DMatrix<C64>,
{
    let mut rho = rho0.matrix().clone();
    let mut times = Vec::with_capacity(nodes.len());
    let mut rhos = Vec::with_capacity(nodes.len());
    let mut next = nodes.iter().peekable();
    let dt = grid.dt();
    let half = C64::new(0.5, 0.0);
    for k in 0..=grid.steps() {
        if next.peek() == Some(&&k) {
            next.next();
            times.push(grid.node(k));
            rhos.push(rho.clone());
            if next.peek().is_none() {
                break;
            }
        }
        if k == grid.steps() {
            break;
        }
        let t_start = grid.node(k);
        let mut substeps = base_substeps;
        let mut attempt = 0;
        loop {
            let h = dt / substeps as f64;
            let hc = C64::new(h, 0.0);
            let mut y = rho.clone();
            for n in 0..substeps {
                let t = t_start + n as f64 * h;
                let k1 = rhs(t, &y);
                let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (hc * half)));
                let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (hc * half)));
                let k4 = rhs(t + h, &(&y + &k3 * hc));
                y += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * (hc / 6.0);
            }
            let drift = (y.trace() - C64::new(1.0, 0.0)).norm();
            if drift <= TRACE_DRIFT_LIMIT {
                rho = y;
                break;
            }
            attempt += 1;
            if attempt > MAX_HALVINGS {
                return Err(Error::StepRejected { t: t_start, drift });
            }
            substeps *= 2;
        }
    }
    Ok(DensityPath { times, rhos })
}

fn substeps_for(dt: f64, rate: f64, tau: Option<f64>) -> usize {
    let mut h = if rate > 0.0 { 0.01 / rate } else { dt };
    if let Some(tau) = tau {
        h = h.min(tau / 50.0);
    }
    ((dt / h).ceil() as usize).max(1)
}

fn max_gap_sq(set: &CommutingSet) -> f64 {
    (0..set.num_ops())
        .map(|i| {
            let r = set.row(i);
            let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
            (hi - lo).powi(2)
        })
        .sum()
}

fn check_dims(set: &CommutingSet, rho0: &DensityMatrix) -> Result<()> {
    if rho0.dim() != set.dim() {
        return Err(invalid("density matrix dimension does not match the operators"));
    }
    Ok(())
}

/// `dρ/dt = −i[H₀, ρ] − (γ/2) Σ_i [A_i, [A_i, ρ]]`.
pub fn evolve_lindblad_csl(
    h: &Hamiltonian,
    set: &CommutingSet,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    gamma: f64,
    nodes: &[usize],
) -> Result<DensityPath> {
    check_dims(set, rho0)?;
    let ops: Vec<DMatrix<C64>> = (0..set.num_ops()).map(|i| set.operator_matrix(i)).collect();
    let hm = h.matrix().clone();
    let rate = 2.0 * h.spectral_radius() + gamma * max_gap_sq(set);
    let sub = substeps_for(grid.dt(), rate, None);
    let mi = C64::new(0.0, -1.0);
    let g = C64::new(-0.5 * gamma, 0.0);
    integrate(rho0, grid, nodes, sub, |_, rho| {
        let mut out = commutator(&hm, rho) * mi;
        for a in &ops {
            out += commutator(a, &commutator(a, rho)) * g;
        }
        out
    })
}

/// `dρ/dt = −γ G(t; t₀) Σ_i [A_i, [A_i, ρ]]` with `G` from the kernel.
/// `origin` is the kernel's `t₀` and may be `-∞`.
pub fn evolve_colored_master(
    set: &CommutingSet,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    kernel: &CorrelationKernel,
    origin: f64,
    nodes: &[usize],
) -> Result<DensityPath> {
    check_dims(set, rho0)?;
    if origin > grid.t0() {
        return Err(Error::InvalidInterval { t: grid.t0(), t0: origin });
    }
    let ops: Vec<DMatrix<C64>> = (0..set.num_ops()).map(|i| set.operator_matrix(i)).collect();
    let gamma = kernel.gamma();
    let rate = gamma * max_gap_sq(set);
    let sub = substeps_for(grid.dt(), rate, kernel.tau());
    // G is needed at the stage times only; evaluate each lazily through the kernel.
    integrate(rho0, grid, nodes, sub, |t, rho| {
        let g = kernel.cumulative(t, origin).unwrap_or(0.0);
        let c = C64::new(-gamma * g, 0.0);
        let mut out = DMatrix::zeros(rho.nrows(), rho.ncols());
        for a in &ops {
            out += commutator(a, &commutator(a, rho)) * c;
        }
        out
    })
}

/// `exp(−(γ/2) Σ_i (a_{iα} − a_{iβ})² f(t; t₀))`.
pub fn offdiag_analytic(
    set: &CommutingSet,
    kernel: &CorrelationKernel,
    alpha: usize,
    beta: usize,
    t: f64,
    t0: f64,
) -> Result<f64> {
    if alpha >= set.dim() || beta >= set.dim() {
        return Err(invalid("basis label out of range"));
    }
    let gap = set.gap_sq(alpha, beta);
    if gap == 0.0 {
        return Ok(1.0);
    }
    Ok((-0.5 * kernel.gamma() * gap * kernel.double_integral(t, t0)?).exp())
}

/// `⟨O⟩(t) = Tr(O ρ(t))` along a path, with the finite-difference derivative
/// and the right-hand side `−γ G(t) Σ_i Tr([A_i,[A_i,O]] ρ(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Central differences at interior checkpoints.
    pub derivative: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl ObservableTrace {
    /// Largest `|derivative − rhs|` over interior checkpoints.
    pub fn max_residual(&self) -> f64 {
        self.derivative
            .iter()
            .zip(&self.rhs[1..self.rhs.len().saturating_sub(1)])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn observable_mean(
    o: &DMatrix<C64>,
    path: &DensityPath,
    set: &CommutingSet,
    kernel: &CorrelationKernel,
    origin: f64,
) -> Result<ObservableTrace> {
    if o.nrows() != set.dim() || o.ncols() != set.dim() {
        return Err(invalid("observable dimension does not match the operators"));
    }
    let ops: Vec<DMatrix<C64>> = (0..set.num_ops()).map(|i| set.operator_matrix(i)).collect();
    let dd: DMatrix<C64> =
        ops.iter().fold(DMatrix::zeros(o.nrows(), o.ncols()), |acc, a| acc + commutator(a, &commutator(a, o)));
    let values: Vec<f64> = path.rhos.iter().map(|r| (o * r).trace().re).collect();
    let rhs = path
        .times
        .iter()
        .zip(&path.rhos)
        .map(|(&t, r)| Ok(-kernel.gamma() * kernel.cumulative(t, origin)? * (&dd * r).trace().re))
        .collect::<Result<Vec<f64>>>()?;
    let derivative = (1..values.len().saturating_sub(1))
        .map(|k| (values[k + 1] - values[k - 1]) / (path.times[k + 1] - path.times[k - 1]))
        .collect();
    Ok(ObservableTrace { times: path.times.clone(), values, derivative, rhs })
}

/// How trajectories are averaged into a density matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityMode {
    /// Mean of `‖ψ_raw‖² |φ⟩⟨φ|` times the sampling ratio `P_raw/q`.
    Raw,
    /// Self-normalized cooked weights on `|φ⟩⟨φ|`.
    Cooked,
}

/// Entry-wise ensemble estimate with batch-means standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub times: Vec<f64>,
    pub mean: Vec<DMatrix<C64>>,
    pub stderr_re: Vec<DMatrix<f64>>,
    pub stderr_im: Vec<DMatrix<f64>>,
}

impl DensityEstimate {
    pub fn entry(&self, k: usize, i: usize, j: usize) -> C64 {
        self.mean[k][(i, j)]
    }

    pub fn stderr(&self, k: usize, i: usize, j: usize) -> (f64, f64) {
        (self.stderr_re[k][(i, j)], self.stderr_im[k][(i, j)])
    }

    pub fn trace(&self, k: usize) -> f64 {
        self.mean[k].trace().re
    }
}

fn batch_spread(values: &[DMatrix<C64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = values.len() as f64;
    let (r, c) = values[0].shape();
    let mut se_re = DMatrix::zeros(r, c);
    let mut se_im = DMatrix::zeros(r, c);
    if values.len() < 2 {
        return (se_re.map(|_: f64| f64::NAN), se_im.map(|_: f64| f64::NAN));
    }
    for i in 0..r {
        for j in 0..c {
            let mr = values.iter().map(|m| m[(i, j)].re).sum::<f64>() / b;
            let mi = values.iter().map(|m| m[(i, j)].im).sum::<f64>() / b;
            let vr = values.iter().map(|m| (m[(i, j)].re - mr).powi(2)).sum::<f64>() / (b - 1.0);
            let vi = values.iter().map(|m| (m[(i, j)].im - mi).powi(2)).sum::<f64>() / (b - 1.0);
            se_re[(i, j)] = (vr / b).sqrt();
            se_im[(i, j)] = (vi / b).sqrt();
        }
    }
    (se_re, se_im)
}

fn compensated_matrix_sum(terms: impl Iterator<Item = (f64, DMatrix<C64>)>, d: usize) -> (f64, DMatrix<C64>) {
    let mut w = CompensatedSum::new();
    let mut re = vec![CompensatedSum::new(); d * d];
    let mut im = vec![CompensatedSum::new(); d * d];
    for (weight, m) in terms {
        w.add(weight);
        for (idx, c) in m.iter().enumerate() {
            re[idx].add(weight * c.re);
            im[idx].add(weight * c.im);
        }
    }
    let m = DMatrix::from_iterator(d, d, re.iter().zip(&im).map(|(a, b)| C64::new(a.value(), b.value())));
    (w.value(), m)
}

pub fn ensemble_to_density(records: &[TrajectoryRecord], mode: DensityMode, batches: usize) -> Result<DensityEstimate> {
    if records.len() < 2 {
        return Err(invalid("density estimate needs at least two trajectories"));
    }
    let times = records[0].times.clone();
    if records.iter().any(|r| r.times != times) {
        return Err(invalid("trajectories have different checkpoints"));
    }
    let d = records[0].states[0].dim();
    let ranges = batch_ranges(records.len(), batches);
    let mut out = DensityEstimate { times: times.clone(), mean: vec![], stderr_re: vec![], stderr_im: vec![] };
    for k in 0..times.len() {
        let logw: Vec<f64> = records.iter().map(|r| r.log_cooked_weight(k)).collect();
        let shift = match mode {
            DensityMode::Raw => 0.0,
            DensityMode::Cooked => logw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        if !shift.is_finite() && mode == DensityMode::Cooked {
            return Err(Error::DegenerateEnsemble("all trajectory weights vanished".into()));
        }
        let weights: Vec<f64> = logw.iter().map(|l| (l - shift).exp()).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::DegenerateEnsemble("trajectory weight overflowed".into()));
        }
        let term = |n: usize| (weights[n], records[n].states[k].outer());
        let (total_w, total) = compensated_matrix_sum((0..records.len()).map(term), d);
        let per_batch: Vec<DMatrix<C64>> = ranges
            .iter()
            .map(|r| {
                let (w, m) = compensated_matrix_sum(r.clone().map(term), d);
                match mode {
                    DensityMode::Raw => m / C64::new(r.len() as f64, 0.0),
                    DensityMode::Cooked => m / C64::new(w, 0.0),
                }
            })
            .collect();
        let mean = match mode {
            DensityMode::Raw => total / C64::new(records.len() as f64, 0.0),
            DensityMode::Cooked => {
                if total_w.is_nan() || total_w <= 0.0 {
                    return Err(Error::DegenerateEnsemble("all trajectory weights vanished".into()));
                }
                total / C64::new(total_w, 0.0)
            }
        };
        let (se_re, se_im) = batch_spread(&per_batch);
        out.mean.push(mean);
        out.stderr_re.push(se_re);
        out.stderr_im.push(se_im);
    }
    Ok(out)
}

/// Analytic vs ensemble off-diagonal element over time.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub alpha: usize,
    pub beta: usize,
    pub times: Vec<f64>,
    pub analytic: Vec<C64>,
    pub ensemble: Vec<C64>,
    pub stderr: Vec<(f64, f64)>,
}

impl DecayReport {
    /// Largest deviation in combined standard errors over real and imaginary
    /// parts; entries the estimator reproduces exactly count as zero.
    pub fn max_sigmas(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.times.len() {
            let d = self.ensemble[k] - self.analytic[k];
            for (gap, se) in [(d.re.abs(), self.stderr[k].0), (d.im.abs(), self.stderr[k].1)] {
                if gap > 0.0 {
                    worst = worst.max(gap / se);
                }
            }
        }
        worst
    }
}

pub fn decay_report(
    estimate: &DensityEstimate,
    set: &CommutingSet,
    kernel: &CorrelationKernel,
    rho0: &DensityMatrix,
    alpha: usize,
    beta: usize,
    t0: f64,
) -> Result<DecayReport> {
    let analytic = estimate
        .times
        .iter()
        .map(|&t| Ok(rho0.matrix()[(alpha, beta)] * offdiag_analytic(set, kernel, alpha, beta, t, t0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecayReport {
        alpha,
        beta,
        times: estimate.times.clone(),
        analytic,
        ensemble: (0..estimate.times.len()).map(|k| estimate.entry(k, alpha, beta)).collect(),
        stderr: (0..estimate.times.len()).map(|k| estimate.stderr(k, alpha, beta)).collect(),
    })
}

pub const DENSITY_HEADER: &str = "t,i,j,re,im,stderr_re,stderr_im";

/// Entry-wise standard errors of the real and imaginary parts, one matrix
/// per recorded time.
pub type EntryStderr<'a> = (&'a [DMatrix<f64>], &'a [DMatrix<f64>]);

/// Density path CSV; deterministic paths carry zero standard errors.
pub fn write_density_csv<W: Write>(
    out: &mut W,
    times: &[f64],
    rhos: &[DMatrix<C64>],
    stderr: Option<EntryStderr<'_>>,
) -> Result<()> {
    writeln!(out, "{DENSITY_HEADER}")?;
    for (k, (t, rho)) in times.iter().zip(rhos).enumerate() {
        for i in 0..rho.nrows() {
            for j in 0..rho.ncols() {
                let (sr, si) = match stderr {
                    Some((re, im)) => (re[k][(i, j)], im[k][(i, j)]),
                    None => (0.0, 0.0),
                };
                let c = rho[(i, j)];
                writeln!(out, "{t},{i},{j},{},{},{sr},{si}", c.re, c.im)?;
            }
        }
    }
    Ok(())
}
