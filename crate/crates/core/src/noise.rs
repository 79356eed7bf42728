//! Gaussian noise paths on a uniform time grid.
//!
//! Colored noise is represented by its values at the grid nodes, drawn as
//! `L z` from the Cholesky factor of `γ D(t_k, t_l)`, and integrated with the
//! trapezoid rule. White noise is represented by one value per step,
//! `w_k ~ N(0, γ/Δt)` standing for the average over `[t_k, t_{k+1})`, and
//! integrated left to right (`x(t_k) = Δt Σ_{j<k} w_j`). Both layouts store
//! `M + 1` values per process; the last white value belongs to the step
//! after the grid and never enters `x`.
//!
//! Random draws per trajectory, in order: for a mixture proposal one uniform
//! component selector, then `M + 1` standard normals for each process.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ensemble::{run_indexed, EnsembleConfig, Lineage};
use crate::error::{invalid, Error, Result};
use crate::kernels::CorrelationKernel;
use crate::stats::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite()) || t1 <= t0 {
            return Err(invalid(format!("time grid needs finite t1 > t0, got [{t0}, {t1}]")));
        }
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Node index of `t`, if `t` lies on the grid (to `1e-9 Δt`).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let r = (t - self.t0) / self.dt();
        let k = r.round();
        if k < 0.0 || k > self.steps as f64 || (r - k).abs() > 1e-9 {
            None
        } else {
            Some(k as usize)
        }
    }
}

/// How a stored path is integrated into `x(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integration {
    /// Nodal values, trapezoid rule.
    Trapezoid,
    /// Per-step values, left-endpoint accumulation.
    LeftEndpoint,
}

impl Integration {
    /// Weights `ω` with `x(t_k) = Σ_j ω_j w_j` over `len` stored values.
    pub fn weights_to(&self, node: usize, len: usize, dt: f64) -> Vec<f64> {
        let mut w = vec![0.0; len];
        match self {
            Integration::Trapezoid => {
                if node > 0 {
                    for (j, v) in w.iter_mut().enumerate().take(node + 1) {
                        *v = if j == 0 || j == node { 0.5 * dt } else { dt };
                    }
                }
            }
            Integration::LeftEndpoint => {
                for v in w.iter_mut().take(node) {
                    *v = dt;
                }
            }
        }
        w
    }

    fn integrate(&self, w: &[f64], dt: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        x.push(0.0);
        for k in 1..w.len() {
            acc += match self {
                Integration::Trapezoid => 0.5 * dt * (w[k - 1] + w[k]),
                Integration::LeftEndpoint => dt * w[k - 1],
            };
            x.push(acc);
        }
        x
    }
}

/// One sample of `m` noise processes on a grid, with their integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    grid: TimeGrid,
    integration: Integration,
    w: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    lineage: Option<Lineage>,
    log_proposal_ratio: f64,
}

impl NoiseRealization {
    /// Builds a realization from explicit paths (one `Vec` of `M + 1` values
    /// per process) and recomputes the integrated paths.
    pub fn from_paths(grid: TimeGrid, integration: Integration, w: Vec<Vec<f64>>) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("realization needs at least one process"));
        }
        if w.iter().any(|p| p.len() != grid.len()) {
            return Err(invalid(format!("each path needs {} values", grid.len())));
        }
        let dt = grid.dt();
        let x = w.iter().map(|p| integration.integrate(p, dt)).collect();
        Ok(Self { grid, integration, w, x, lineage: None, log_proposal_ratio: 0.0 })
    }

    /// An all-zero realization.
    pub fn zeros(grid: TimeGrid, integration: Integration, processes: usize) -> Result<Self> {
        Self::from_paths(grid, integration, vec![vec![0.0; grid.len()]; processes])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn integration(&self) -> Integration {
        self.integration
    }

    pub fn processes(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self, process: usize) -> &[f64] {
        &self.w[process]
    }

    pub fn x(&self, process: usize) -> &[f64] {
        &self.x[process]
    }

    pub fn lineage(&self) -> Option<Lineage> {
        self.lineage
    }

    /// `ln(q / P_raw)` of the proposal this path was drawn from; zero for raw
    /// sampling.
    pub fn log_proposal_ratio(&self) -> f64 {
        self.log_proposal_ratio
    }

    /// Noise value "at" node `k` for pointwise averages. Colored paths return
    /// the nodal value. White paths return the mean of the two steps that meet
    /// at `t_k`, which carries half of the delta on each side.
    pub fn value_at(&self, process: usize, k: usize) -> f64 {
        let w = &self.w[process];
        match self.integration {
            Integration::Trapezoid => w[k],
            Integration::LeftEndpoint => {
                if k == 0 {
                    w[0]
                } else {
                    0.5 * (w[k - 1] + w[k])
                }
            }
        }
    }

    /// Adds a hat bump of area `area` centred at node `s` to process `j`.
    /// Colored: the nodal value at `s` grows by `area/Δt`. White: each of the
    /// two steps adjacent to `s` grows by `area/(2Δt)`.
    pub fn with_bump(&self, j: usize, s: usize, area: f64) -> Result<Self> {
        if j >= self.processes() || s > self.grid.steps() {
            return Err(invalid("bump outside the realization"));
        }
        let dt = self.grid.dt();
        let mut w = self.w.clone();
        match self.integration {
            Integration::Trapezoid => w[j][s] += area / dt,
            Integration::LeftEndpoint => {
                w[j][s] += 0.5 * area / dt;
                if s > 0 {
                    w[j][s - 1] += 0.5 * area / dt;
                }
            }
        }
        let mut out = Self::from_paths(self.grid, self.integration, w)?;
        out.lineage = self.lineage;
        out.log_proposal_ratio = self.log_proposal_ratio;
        Ok(out)
    }

    /// Writes `trajectory,k,t_k,w_1..w_m,x_1..x_m` rows (no header).
    pub fn write_csv_rows<W: Write>(&self, trajectory: u64, out: &mut W) -> std::io::Result<()> {
        for k in 0..self.grid.len() {
            write!(out, "{trajectory},{k},{}", self.grid.node(k))?;
            for p in &self.w {
                write!(out, ",{}", p[k])?;
            }
            for p in &self.x {
                write!(out, ",{}", p[k])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn csv_header(processes: usize) -> String {
        let mut h = String::from("trajectory,k,t_k");
        for i in 1..=processes {
            h.push_str(&format!(",w_{i}"));
        }
        for i in 1..=processes {
            h.push_str(&format!(",x_{i}"));
        }
        h
    }
}

/// `C[k, l] = γ D(t_k, t_l)` on the grid nodes.
pub fn build_covariance(grid: &TimeGrid, kernel: &CorrelationKernel) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let nodes = grid.nodes();
    let gamma = kernel.gamma();
    let mut c = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..=k {
            let v = gamma * kernel.lag_value(nodes[k] - nodes[l])?;
            c[(k, l)] = v;
            c[(l, k)] = v;
        }
    }
    Ok(c)
}

/// Lower Cholesky factor of a covariance plus the diagonal jitter it needed.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    n: usize,
    // packed lower triangle, row-major
    packed: Vec<f64>,
    jitter: f64,
}

const JITTER_LEVELS: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

impl CovarianceFactor {
    /// Factorizes `cov + ε max(diag) I`, starting at `ε = 1e-12` and escalating
    /// by decades up to `1e-8`.
    pub fn factorize(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if n == 0 || cov.ncols() != n {
            return Err(invalid("covariance must be square and non-empty"));
        }
        let max_diag = cov.diagonal().iter().copied().fold(0.0, f64::max);
        if max_diag <= 0.0 {
            return Err(Error::KernelNotPSD { jitter: 0.0 });
        }
        for eps in JITTER_LEVELS {
            let jitter = eps * max_diag;
            let mut m = cov.clone();
            for k in 0..n {
                m[(k, k)] += jitter;
            }
            if let Some(ch) = Cholesky::new(m) {
                let l = ch.l();
                let mut packed = Vec::with_capacity(n * (n + 1) / 2);
                for r in 0..n {
                    for c in 0..=r {
                        packed.push(l[(r, c)]);
                    }
                }
                return Ok(Self { n, packed, jitter });
            }
        }
        Err(Error::KernelNotPSD { jitter: JITTER_LEVELS[4] * max_diag })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn row(&self, r: usize) -> &[f64] {
        let start = r * (r + 1) / 2;
        &self.packed[start..start + r + 1]
    }

    /// `L z`.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Lᵀ h`.
    pub fn apply_transpose(&self, h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, &hr) in h.iter().enumerate().take(self.n) {
            if hr != 0.0 {
                for (o, a) in out.iter_mut().zip(self.row(r)) {
                    *o += a * hr;
                }
            }
        }
        out
    }
}

/// Eigenvalue floor test `λ_min ≥ −ε max(diag)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub max_diagonal: f64,
    pub passes: bool,
}

pub const PSD_EPS: f64 = 1e-10;

pub fn psd_report(cov: &DMatrix<f64>) -> PsdReport {
    let max_diagonal = cov.diagonal().iter().copied().fold(0.0, f64::max);
    let eig = SymmetricEigen::new(cov.clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    PsdReport { min_eigenvalue, max_diagonal, passes: min_eigenvalue >= -PSD_EPS * max_diagonal }
}

/// Sampler for `m` independent processes sharing one kernel.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    grid: TimeGrid,
    processes: usize,
    gamma: f64,
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    White,
    Colored(CovarianceFactor),
}

impl NoiseModel {
    pub fn new(grid: TimeGrid, kernel: &CorrelationKernel, processes: usize) -> Result<Self> {
        if processes == 0 {
            return Err(invalid("need at least one noise process"));
        }
        let source = if kernel.is_white() {
            Source::White
        } else {
            Source::Colored(CovarianceFactor::factorize(&build_covariance(&grid, kernel)?)?)
        };
        Ok(Self { grid, processes, gamma: kernel.gamma(), source })
    }

    pub fn white(grid: TimeGrid, gamma: f64, processes: usize) -> Result<Self> {
        Self::new(grid, &CorrelationKernel::white(gamma)?, processes)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn processes(&self) -> usize {
        self.processes
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn integration(&self) -> Integration {
        match self.source {
            Source::White => Integration::LeftEndpoint,
            Source::Colored(_) => Integration::Trapezoid,
        }
    }

    pub fn factor(&self) -> Option<&CovarianceFactor> {
        match &self.source {
            Source::White => None,
            Source::Colored(f) => Some(f),
        }
    }

    fn correlate(&self, z: Vec<f64>) -> Vec<f64> {
        match &self.source {
            Source::White => {
                let sd = (self.gamma / self.grid.dt()).sqrt();
                z.into_iter().map(|v| sd * v).collect()
            }
            Source::Colored(f) => f.apply(&z),
        }
    }

    /// Covariance of the sampled values applied to `h`.
    fn apply_covariance(&self, h: &[f64]) -> Vec<f64> {
        match &self.source {
            Source::White => {
                let s = self.gamma / self.grid.dt();
                h.iter().map(|v| s * v).collect()
            }
            Source::Colored(f) => f.apply(&f.apply_transpose(h)),
        }
    }

    /// Exact variance of the discrete integrated path `x(t_k)`.
    pub fn integrated_variance(&self, k: usize) -> f64 {
        let omega = self.integration().weights_to(k, self.grid.len(), self.grid.dt());
        match &self.source {
            Source::White => self.gamma / self.grid.dt() * omega.iter().map(|v| v * v).sum::<f64>(),
            Source::Colored(f) => f.apply_transpose(&omega).iter().map(|v| v * v).sum(),
        }
    }

    fn draw_standard<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.processes)
            .map(|_| (0..self.grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    /// Raw (zero-mean) sample for one trajectory.
    pub fn sample(&self, lineage: Lineage) -> NoiseRealization {
        let mut rng = lineage.rng();
        let w = self.draw_standard(&mut rng).into_iter().map(|z| self.correlate(z)).collect();
        let mut r = NoiseRealization::from_paths(self.grid, self.integration(), w).expect("shapes fixed by the model");
        r.lineage = Some(lineage);
        r
    }

    /// Sample from `proposal`; the realization records `ln(q/P_raw)`.
    pub fn sample_with(&self, lineage: Lineage, proposal: &Proposal) -> NoiseRealization {
        match proposal {
            Proposal::Raw => self.sample(lineage),
            Proposal::Mixture(mix) => {
                let mut rng = lineage.rng();
                let u: f64 = rng.random();
                let comp = mix.pick(u);
                let w: Vec<Vec<f64>> = self
                    .draw_standard(&mut rng)
                    .into_iter()
                    .enumerate()
                    .map(|(i, z)| {
                        let mut p = self.correlate(z);
                        for (v, s) in p.iter_mut().zip(&mix.shifts[comp][i]) {
                            *v += s;
                        }
                        p
                    })
                    .collect();
                let mut r =
                    NoiseRealization::from_paths(self.grid, self.integration(), w).expect("shapes fixed by the model");
                r.lineage = Some(lineage);
                r.log_proposal_ratio = mix.log_ratio(&r);
                r
            }
        }
    }
}

/// Path-sampling distribution used by an ensemble.
#[derive(Debug, Clone, Default)]
pub enum Proposal {
    /// The Gaussian law of the noise itself.
    #[default]
    Raw,
    /// A mixture of mean-shifted copies of the raw law (see
    /// [`ShiftedMixture`]).
    Mixture(ShiftedMixture),
}

/// Mixture `q = Σ_g π_g P_g` where `P_g` is the raw Gaussian law tilted by
/// `exp(Σ_i c_{gi} x_i(t_K) − ½ Σ_i c_{gi}² Var x(t_K))`. Each component is
/// the raw law with mean shifted by `c_{gi} C ω_K`, so the likelihood ratio of
/// a path is available in closed form from `x(t_K)` alone.
#[derive(Debug, Clone)]
pub struct ShiftedMixture {
    target_node: usize,
    log_pi: Vec<f64>,
    cumulative: Vec<f64>,
    tilts: Vec<Vec<f64>>,
    variance: f64,
    shifts: Vec<Vec<Vec<f64>>>,
}

impl ShiftedMixture {
    /// `components` holds `(π_g, [c_{g1}, …, c_{gm}])`.
    pub fn new(model: &NoiseModel, target_node: usize, components: &[(f64, Vec<f64>)]) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("mixture needs at least one component"));
        }
        if target_node > model.grid.steps() {
            return Err(invalid("mixture target beyond the grid"));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.iter().any(|c| c.0.is_nan() || c.0 <= 0.0 || c.1.len() != model.processes) {
            return Err(invalid("mixture components need positive weight and one tilt per process"));
        }
        let omega = model.integration().weights_to(target_node, model.grid.len(), model.grid.dt());
        let c_omega = model.apply_covariance(&omega);
        let variance = model.integrated_variance(target_node);
        let mut acc = 0.0;
        let mut cumulative = Vec::new();
        for c in components {
            acc += c.0 / total;
            cumulative.push(acc);
        }
        Ok(Self {
            target_node,
            log_pi: components.iter().map(|c| (c.0 / total).ln()).collect(),
            cumulative,
            tilts: components.iter().map(|c| c.1.clone()).collect(),
            variance,
            shifts: components
                .iter()
                .map(|c| c.1.iter().map(|&ci| c_omega.iter().map(|v| ci * v).collect()).collect())
                .collect(),
        })
    }

    pub fn target_node(&self) -> usize {
        self.target_node
    }

    pub fn components(&self) -> usize {
        self.log_pi.len()
    }

    fn pick(&self, u: f64) -> usize {
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1)
    }

    /// `ln(q/P_raw)` at a realization.
    pub fn log_ratio(&self, r: &NoiseRealization) -> f64 {
        let k = self.target_node;
        log_sum_exp(
            self.log_pi
                .iter()
                .zip(&self.tilts)
                .map(|(lp, c)| {
                    lp + c.iter().enumerate().map(|(i, ci)| ci * r.x(i)[k] - 0.5 * ci * ci * self.variance).sum::<f64>()
                })
                .collect::<Vec<_>>(),
        )
    }
}

/// Colored paths for `n` trajectories from a prepared model.
pub fn sample_paths(model: &NoiseModel, n: usize, master_seed: u64, workers: usize) -> Result<Vec<NoiseRealization>> {
    run_indexed(&EnsembleConfig::new(n, master_seed, workers), |l| Ok(model.sample(l)))
}

/// White increments `w_k ~ N(0, γ/Δt)` for `n` trajectories.
pub fn sample_white_increments(
    grid: TimeGrid,
    gamma: f64,
    processes: usize,
    n: usize,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<NoiseRealization>> {
    let model = NoiseModel::white(grid, gamma, processes)?;
    sample_paths(&model, n, master_seed, workers)
}
