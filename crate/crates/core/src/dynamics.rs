//! Trajectory solvers.
//!
//! The linear equations are stepped with a symmetric splitting: a unitary
//! half step under `H₀`, the diagonal noise factor
//! `exp(Σ_i A_i Δx_i − c Σ_i A_i² Δt)` applied exactly in the shared eigenbasis,
//! then another unitary half step. `c = γ` gives the norm-compensated white
//! equation, `c = 0` the raw linear one. When `H₀` commutes with every `A_i`
//! the colored equation is solved in closed form instead.
//!
//! States are carried as unit vectors plus a log offset, so the cooking
//! weight `‖ψ_raw‖²` is available as a logarithm at every checkpoint.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{run_indexed, EnsembleConfig, Lineage};
use crate::error::{invalid, Error, Result};
use crate::hilbert::{commutation_check, CommutingSet, Hamiltonian, StateVector, C64, COMMUTATION_TOL};
use crate::kernels::CorrelationKernel;
use crate::noise::{NoiseModel, NoiseRealization, Proposal, TimeGrid};

pub const DEFAULT_CHECKPOINTS: usize = 50;

/// Grid nodes at which a trajectory is recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoints(Vec<usize>);

impl Checkpoints {
    /// `count` nodes spread evenly over the grid, first and last included.
    pub fn even(grid: &TimeGrid, count: usize) -> Self {
        let m = grid.steps();
        if count < 2 || count > m {
            return Self::all(grid);
        }
        let mut nodes: Vec<usize> =
            (0..count).map(|j| ((j * m) as f64 / (count - 1) as f64).round() as usize).collect();
        nodes.dedup();
        Self(nodes)
    }

    pub fn all(grid: &TimeGrid) -> Self {
        Self((0..=grid.steps()).collect())
    }

    pub fn nodes(nodes: Vec<usize>, grid: &TimeGrid) -> Result<Self> {
        if nodes.is_empty() || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("checkpoints must be a non-empty increasing node list"));
        }
        if *nodes.last().unwrap() > grid.steps() {
            return Err(invalid("checkpoint beyond the grid"));
        }
        Ok(Self(nodes))
    }

    pub fn last_only(grid: &TimeGrid) -> Self {
        Self(vec![grid.steps()])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A solved trajectory sampled at its checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub lineage: Option<Lineage>,
    pub nodes: Vec<usize>,
    pub times: Vec<f64>,
    /// Normalized physical states.
    pub states: Vec<StateVector>,
    /// `ln ‖ψ_raw(t)‖²`.
    pub log_weights: Vec<f64>,
    /// `ln(q/P_raw)` of the noise path; zero under raw sampling.
    pub log_proposal_ratio: f64,
    /// Integrated noise `x_i` at the last checkpoint.
    pub x_last: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.log_weights[k].exp()
    }

    /// Log of the importance weight that turns samples from the proposal
    /// into the cooked (physical) ensemble.
    pub fn log_cooked_weight(&self, k: usize) -> f64 {
        self.log_weights[k] - self.log_proposal_ratio
    }

    /// `ψ_raw` at checkpoint `k` in log-offset form.
    pub fn raw_state(&self, k: usize) -> StateVector {
        let s = &self.states[k];
        StateVector::from_parts(s.amps().clone(), 0.5 * self.log_weights[k])
    }

    pub fn probabilities(&self, k: usize) -> Vec<f64> {
        self.states[k].amps().iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn last(&self) -> usize {
        self.times.len() - 1
    }

    pub fn checkpoint_of(&self, node: usize) -> Option<usize> {
        self.nodes.iter().position(|&n| n == node)
    }
}

struct Recorder {
    nodes: Vec<usize>,
    times: Vec<f64>,
    states: Vec<StateVector>,
    log_weights: Vec<f64>,
}

impl Recorder {
    fn new(cps: &Checkpoints) -> Self {
        let n = cps.len();
        Self {
            nodes: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            log_weights: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, node: usize, t: f64, raw: &StateVector) -> Result<()> {
        let (unit, lw) = raw.normalize()?;
        self.nodes.push(node);
        self.times.push(t);
        self.states.push(unit);
        self.log_weights.push(lw);
        Ok(())
    }

    fn finish(self, noise: &NoiseRealization) -> TrajectoryRecord {
        let last = self.nodes.last().copied().unwrap_or(0);
        TrajectoryRecord {
            x_last: (0..noise.processes()).map(|i| noise.x(i)[last]).collect(),
            lineage: noise.lineage(),
            nodes: self.nodes,
            times: self.times,
            states: self.states,
            log_weights: self.log_weights,
            log_proposal_ratio: noise.log_proposal_ratio(),
        }
    }
}

/// Multiplies amplitude `α` by `exp(exponent_α)`, moving the largest exponent
/// into the log offset.
fn apply_log_diagonal(amps: &mut DVector<C64>, log_scale: &mut f64, exponents: &[f64]) {
    let peak = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (c, e) in amps.iter_mut().zip(exponents) {
        *c *= (e - peak).exp();
    }
    *log_scale += peak;
}

fn rebalance(amps: &mut DVector<C64>, log_scale: &mut f64) -> Result<()> {
    let n = amps.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::ZeroNorm);
    }
    *amps /= C64::new(n, 0.0);
    *log_scale += n.ln();
    Ok(())
}

#[derive(Debug, Clone)]
enum HalfStep {
    Identity,
    Phases(DVector<C64>),
    Dense(DMatrix<C64>),
}

impl HalfStep {
    fn new(h: &Hamiltonian, dt: f64) -> Self {
        if h.is_zero() {
            HalfStep::Identity
        } else if let Some(e) = h.diagonal_energies() {
            HalfStep::Phases(DVector::from_iterator(e.len(), e.iter().map(|&v| C64::from_polar(1.0, -v * 0.5 * dt))))
        } else {
            HalfStep::Dense(h.propagator(0.5 * dt))
        }
    }

    fn apply(&self, amps: &mut DVector<C64>) {
        match self {
            HalfStep::Identity => {}
            HalfStep::Phases(p) => amps.component_mul_assign(p),
            HalfStep::Dense(u) => *amps = u * &*amps,
        }
    }
}

/// Symmetric-splitting propagator for the linear equation with diagonal
/// noise operators.
#[derive(Debug, Clone)]
pub struct SplitStepper {
    set: CommutingSet,
    half: HalfStep,
    dt: f64,
    compensation: f64,
}

impl SplitStepper {
    /// `compensation` multiplies `−Σ_i A_i² Δt` in the noise factor: `γ` for
    /// the norm-preserving-on-average equation, `0` for the raw one.
    pub fn new(h: &Hamiltonian, set: &CommutingSet, grid: &TimeGrid, compensation: f64) -> Result<Self> {
        if h.dim() != set.dim() {
            return Err(invalid("Hamiltonian and operator set dimensions differ"));
        }
        if !compensation.is_finite() || compensation < 0.0 {
            return Err(invalid("compensation must be a finite non-negative rate"));
        }
        Ok(Self { set: set.clone(), half: HalfStep::new(h, grid.dt()), dt: grid.dt(), compensation })
    }

    pub fn evolve(&self, psi0: &StateVector, noise: &NoiseRealization, cps: &Checkpoints) -> Result<TrajectoryRecord> {
        let grid = noise.grid();
        check_inputs(&self.set, psi0, noise, cps)?;
        if (grid.dt() - self.dt).abs() > 1e-12 * self.dt {
            return Err(invalid("noise grid does not match the stepper"));
        }
        let d = self.set.dim();
        let m = self.set.num_ops();
        let penalty: Vec<f64> = (0..d).map(|a| self.compensation * self.set.sum_sq(a) * self.dt).collect();
        let mut amps = psi0.amps().clone();
        let mut log_scale = psi0.log_scale();
        rebalance(&mut amps, &mut log_scale)?;
        let mut rec = Recorder::new(cps);
        let mut next = cps.as_slice().iter().peekable();
        let mut exponents = vec![0.0; d];
        for k in 0..=grid.steps() {
            if next.peek() == Some(&&k) {
                next.next();
                rec.push(k, grid.node(k), &StateVector::from_parts(amps.clone(), log_scale))?;
                if next.peek().is_none() {
                    break;
                }
            }
            if k == grid.steps() {
                break;
            }
            self.half.apply(&mut amps);
            for (a, e) in exponents.iter_mut().enumerate() {
                let mut s = -penalty[a];
                for i in 0..m {
                    s += self.set.value(i, a) * (noise.x(i)[k + 1] - noise.x(i)[k]);
                }
                *e = s;
            }
            apply_log_diagonal(&mut amps, &mut log_scale, &exponents);
            self.half.apply(&mut amps);
            rebalance(&mut amps, &mut log_scale)?;
        }
        Ok(rec.finish(noise))
    }
}

fn check_inputs(set: &CommutingSet, psi0: &StateVector, noise: &NoiseRealization, cps: &Checkpoints) -> Result<()> {
    if psi0.dim() != set.dim() {
        return Err(invalid("initial state dimension does not match the operators"));
    }
    if noise.processes() != set.num_ops() {
        return Err(invalid(format!(
            "noise has {} processes but there are {} operators",
            noise.processes(),
            set.num_ops()
        )));
    }
    if cps.as_slice().last().is_some_and(|&n| n > noise.grid().steps()) {
        return Err(invalid("checkpoint beyond the noise grid"));
    }
    Ok(())
}

/// Norm-compensated white-noise equation.
pub fn evolve_csl_white(
    h: &Hamiltonian,
    set: &CommutingSet,
    psi0: &StateVector,
    gamma: f64,
    noise: &NoiseRealization,
    cps: &Checkpoints,
) -> Result<TrajectoryRecord> {
    SplitStepper::new(h, set, noise.grid(), gamma)?.evolve(psi0, noise, cps)
}

/// The linear equation without the compensating `−γΣA_i²` term.
pub fn evolve_raw_linear(
    h: &Hamiltonian,
    set: &CommutingSet,
    psi0: &StateVector,
    noise: &NoiseRealization,
    cps: &Checkpoints,
) -> Result<TrajectoryRecord> {
    SplitStepper::new(h, set, noise.grid(), 0.0)?.evolve(psi0, noise, cps)
}

/// Closed-form solution of the colored equation when `H₀` commutes with all
/// `A_i`:
/// `ψ(t) = exp(Σ_i A_i x_i(t) − γ Σ_i A_i² f(t)) e^{−iH₀(t−t₀)} ψ₀`.
#[derive(Debug, Clone)]
pub struct CommutingSolver {
    set: CommutingSet,
    gamma: f64,
    hamiltonian: Option<Hamiltonian>,
    grid: TimeGrid,
    nodes: Vec<usize>,
    f_at: Vec<f64>,
}

impl CommutingSolver {
    pub fn new(
        set: &CommutingSet,
        kernel: &CorrelationKernel,
        h: Option<&Hamiltonian>,
        grid: &TimeGrid,
        cps: &Checkpoints,
    ) -> Result<Self> {
        let hamiltonian = match h {
            Some(h) => {
                let norm = commutation_check(h, set)?;
                if norm > COMMUTATION_TOL {
                    return Err(Error::NonCommuting { norm });
                }
                (!h.is_zero()).then(|| h.clone())
            }
            None => None,
        };
        let f_at = cps
            .as_slice()
            .iter()
            .map(|&k| kernel.double_integral(grid.node(k), grid.t0()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            set: set.clone(),
            gamma: kernel.gamma(),
            hamiltonian,
            grid: *grid,
            nodes: cps.as_slice().to_vec(),
            f_at,
        })
    }

    pub fn evolve(&self, psi0: &StateVector, noise: &NoiseRealization) -> Result<TrajectoryRecord> {
        let cps = Checkpoints(self.nodes.clone());
        check_inputs(&self.set, psi0, noise, &cps)?;
        if noise.grid() != &self.grid {
            return Err(invalid("noise grid does not match the solver"));
        }
        let d = self.set.dim();
        let mut rec = Recorder::new(&cps);
        let mut exponents = vec![0.0; d];
        for (&k, &f) in self.nodes.iter().zip(&self.f_at) {
            let t = self.grid.node(k);
            let mut amps = match &self.hamiltonian {
                Some(h) => h.propagator(t - self.grid.t0()) * psi0.amps(),
                None => psi0.amps().clone(),
            };
            let mut log_scale = psi0.log_scale();
            for (a, e) in exponents.iter_mut().enumerate() {
                *e = (0..self.set.num_ops()).map(|i| self.set.value(i, a) * noise.x(i)[k]).sum::<f64>()
                    - self.gamma * self.set.sum_sq(a) * f;
            }
            apply_log_diagonal(&mut amps, &mut log_scale, &exponents);
            rec.push(k, t, &StateVector::from_parts(amps, log_scale))?;
        }
        Ok(rec.finish(noise))
    }
}

pub fn evolve_colored_commuting(
    set: &CommutingSet,
    psi0: &StateVector,
    kernel: &CorrelationKernel,
    noise: &NoiseRealization,
    h: Option<&Hamiltonian>,
    cps: &Checkpoints,
) -> Result<TrajectoryRecord> {
    CommutingSolver::new(set, kernel, h, noise.grid(), cps)?.evolve(psi0, noise)
}

/// Which closed-case equation a trajectory follows.
#[derive(Debug, Clone)]
pub enum Solver {
    CslWhite { h: Hamiltonian, gamma: f64 },
    RawLinear { h: Hamiltonian },
    ColoredCommuting { kernel: CorrelationKernel, h: Option<Hamiltonian> },
}

/// A solver prepared for one grid and checkpoint schedule.
#[derive(Debug, Clone)]
pub enum PreparedSolver {
    Split(SplitStepper, Checkpoints),
    Commuting(CommutingSolver),
}

impl PreparedSolver {
    pub fn new(solver: &Solver, set: &CommutingSet, grid: &TimeGrid, cps: &Checkpoints) -> Result<Self> {
        Ok(match solver {
            Solver::CslWhite { h, gamma } => {
                PreparedSolver::Split(SplitStepper::new(h, set, grid, *gamma)?, cps.clone())
            }
            Solver::RawLinear { h } => PreparedSolver::Split(SplitStepper::new(h, set, grid, 0.0)?, cps.clone()),
            Solver::ColoredCommuting { kernel, h } => {
                PreparedSolver::Commuting(CommutingSolver::new(set, kernel, h.as_ref(), grid, cps)?)
            }
        })
    }

    pub fn evolve(&self, psi0: &StateVector, noise: &NoiseRealization) -> Result<TrajectoryRecord> {
        match self {
            PreparedSolver::Split(s, cps) => s.evolve(psi0, noise, cps),
            PreparedSolver::Commuting(s) => s.evolve(psi0, noise),
        }
    }
}

/// Everything needed to run an ensemble.
#[derive(Debug, Clone)]
pub struct TrajectoryProblem {
    pub set: CommutingSet,
    pub psi0: StateVector,
    pub model: NoiseModel,
    pub solver: Solver,
    pub checkpoints: Checkpoints,
    pub proposal: Proposal,
}

pub fn run_ensemble(problem: &TrajectoryProblem, cfg: &EnsembleConfig) -> Result<Vec<TrajectoryRecord>> {
    let prepared = PreparedSolver::new(&problem.solver, &problem.set, problem.model.grid(), &problem.checkpoints)?;
    run_indexed(cfg, |l| {
        let noise = problem.model.sample_with(l, &problem.proposal);
        prepared.evolve(&problem.psi0, &noise)
    })
}

/// Re-runs one trajectory with a hat bump of area `eps` added to process `j`
/// at node `s` and returns `(ψ_raw^ε(t) − ψ_raw(t)) / ε` at node `t`.
pub fn functional_derivative_probe(
    solver: &PreparedSolver,
    psi0: &StateVector,
    noise: &NoiseRealization,
    t: usize,
    s: usize,
    j: usize,
    eps: f64,
) -> Result<Vec<C64>> {
    let base = solver.evolve(psi0, noise)?;
    let k = base.checkpoint_of(t).ok_or_else(|| invalid("probe time is not a checkpoint"))?;
    let bumped = solver.evolve(psi0, &noise.with_bump(j, s, eps)?)?;
    let u = base.raw_state(k);
    let v = bumped.raw_state(k);
    let rel = (v.log_scale() - u.log_scale()).exp();
    let scale = u.log_scale().exp();
    Ok(u.amps().iter().zip(v.amps().iter()).map(|(a, b)| (b * rel - a) * scale / eps).collect())
}

/// Richardson combination `(ε₁E₂ − ε₂E₁)/(ε₁ − ε₂)` of two probes, which
/// cancels the `O(ε)` bias.
pub fn richardson_probe(
    solver: &PreparedSolver,
    psi0: &StateVector,
    noise: &NoiseRealization,
    t: usize,
    s: usize,
    j: usize,
    eps: (f64, f64),
) -> Result<Vec<C64>> {
    let e1 = functional_derivative_probe(solver, psi0, noise, t, s, j, eps.0)?;
    let e2 = functional_derivative_probe(solver, psi0, noise, t, s, j, eps.1)?;
    Ok(e1.iter().zip(&e2).map(|(a, b)| (b * eps.0 - a * eps.1) / (eps.0 - eps.1)).collect())
}

/// Index of the outcome group carrying the largest probability.
pub fn dominant_outcome(set: &CommutingSet, probs: &[f64]) -> usize {
    let groups = set.outcome_groups();
    let mut best = (0, f64::NEG_INFINITY);
    for (g, grp) in groups.iter().enumerate() {
        let p: f64 = grp.members.iter().map(|&a| probs[a]).sum();
        if p > best.1 {
            best = (g, p);
        }
    }
    best.0
}

/// Checkpoint dump: `trajectory,t,weight,|c_1|²,…,|c_d|²,dominant_outcome`.
/// `weight` is the importance weight of the checkpoint, which equals
/// `‖ψ_raw‖²` under raw sampling.
pub fn write_checkpoint_csv<W: Write>(records: &[TrajectoryRecord], set: &CommutingSet, out: &mut W) -> Result<()> {
    let mut header = String::from("trajectory,t,weight");
    for a in 1..=set.dim() {
        header.push_str(&format!(",p_{a}"));
    }
    header.push_str(",dominant_outcome");
    writeln!(out, "{header}")?;
    for (n, r) in records.iter().enumerate() {
        let id = r.lineage.map(|l| l.index).unwrap_or(n as u64);
        for k in 0..r.len() {
            let probs = r.probabilities(k);
            write!(out, "{id},{},{}", r.times[k], r.log_cooked_weight(k).exp())?;
            for p in &probs {
                write!(out, ",{p}")?;
            }
            writeln!(out, ",{}", dominant_outcome(set, &probs))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Integration;
    use crate::stats::mean_stderr;
    use approx::assert_relative_eq;

    fn two_state() -> (CommutingSet, StateVector) {
        (CommutingSet::single(&[1.0, -1.0]).unwrap(), StateVector::from_real(&[0.6, 0.8]).unwrap())
    }

    fn sx(scale: f64) -> Hamiltonian {
        Hamiltonian::from_pairs(2, &[[0.3, 0.0], [scale, 0.0], [scale, 0.0], [-0.3, 0.0]]).unwrap()
    }

    #[test]
    fn unitary_when_gamma_zero() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 5.0, 1000).unwrap();
        let noise = NoiseRealization::zeros(grid, Integration::LeftEndpoint, 1).unwrap();
        let r = evolve_csl_white(&sx(0.8), &set, &psi, 0.0, &noise, &Checkpoints::all(&grid)).unwrap();
        for lw in &r.log_weights {
            assert!(lw.abs() < 2e-10);
        }
        // against the exact propagator
        let exact = sx(0.8).propagator(5.0) * psi.amps();
        for (a, b) in exact.iter().zip(r.states.last().unwrap().amps().iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn mean_weight_is_conserved() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let problem = TrajectoryProblem {
            set,
            psi0: psi,
            model: NoiseModel::white(grid, 0.5, 1).unwrap(),
            solver: Solver::CslWhite { h: Hamiltonian::zero(2), gamma: 0.5 },
            checkpoints: Checkpoints::even(&grid, 5),
            proposal: Proposal::Raw,
        };
        let recs = run_ensemble(&problem, &EnsembleConfig::new(10_000, 7, 4)).unwrap();
        for k in 0..5 {
            let w: Vec<f64> = recs.iter().map(|r| r.weight(k)).collect();
            assert!(mean_stderr(&w).sigmas_from(1.0) < 5.0, "checkpoint {k}");
        }
    }

    #[test]
    fn compensated_raw_linear_is_csl_white() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let model = NoiseModel::white(grid, 0.8, 1).unwrap();
        let noise = model.sample(Lineage::new(1, 2));
        let cps = Checkpoints::all(&grid);
        let a = evolve_csl_white(&sx(0.5), &set, &psi, 0.8, &noise, &cps).unwrap();
        let b = SplitStepper::new(&sx(0.5), &set, &grid, 0.8).unwrap().evolve(&psi, &noise, &cps).unwrap();
        assert_eq!(a, b);
        let raw = evolve_raw_linear(&sx(0.5), &set, &psi, &noise, &cps).unwrap();
        // with A² = 1 the compensator is a scalar factor e^{−γt}
        for k in 0..raw.len() {
            assert_relative_eq!(raw.log_weights[k] - 2.0 * 0.8 * raw.times[k], a.log_weights[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_noise_closed_form() {
        let set = CommutingSet::single(&[1.0, 0.0, -2.0]).unwrap();
        let psi = StateVector::from_real(&[0.5, 0.5, 0.5f64.sqrt()]).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 20).unwrap();
        let kernel = CorrelationKernel::gaussian(0.7, 0.4).unwrap();
        let noise = NoiseRealization::zeros(grid, Integration::Trapezoid, 1).unwrap();
        let r = evolve_colored_commuting(&set, &psi, &kernel, &noise, None, &Checkpoints::last_only(&grid)).unwrap();
        let f = kernel.double_integral(2.0, 0.0).unwrap();
        let raw = r.raw_state(0);
        for a in 0..3 {
            let expected = psi.amps()[a].re * (-0.7 * set.sum_sq(a) * f).exp();
            assert_relative_eq!(raw.amplitude(a).re, expected, max_relative = 1e-13);
        }
    }

    #[test]
    fn log_ratio_law() {
        // ln(p_α/p_β) − ln(p_α/p_β)(0) = 2(α−β)x − 2γ(α²−β²)f
        let set = CommutingSet::single(&[1.5, -0.5]).unwrap();
        let psi = StateVector::from_real(&[0.6, 0.8]).unwrap();
        let grid = TimeGrid::new(0.0, 3.0, 60).unwrap();
        let kernel = CorrelationKernel::exponential(1.2, 0.3).unwrap();
        let model = NoiseModel::new(grid, &kernel, 1).unwrap();
        let noise = model.sample(Lineage::new(3, 0));
        let cps = Checkpoints::even(&grid, 7);
        let r = evolve_colored_commuting(&set, &psi, &kernel, &noise, None, &cps).unwrap();
        for k in 0..r.len() {
            let p = r.probabilities(k);
            let lhs = (p[0] / p[1]).ln() - (0.36f64 / 0.64).ln();
            let x = noise.x(0)[r.nodes[k]];
            let f = kernel.double_integral(r.times[k], 0.0).unwrap();
            let rhs = 2.0 * 2.0 * x - 2.0 * 1.2 * (1.5f64.powi(2) - 0.25) * f;
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn white_exact_matches_stepped() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 2.0, 100).unwrap();
        let kernel = CorrelationKernel::white(0.6).unwrap();
        let model = NoiseModel::new(grid, &kernel, 1).unwrap();
        let cps = Checkpoints::even(&grid, 11);
        for seed in 0..20 {
            let noise = model.sample(Lineage::new(seed, 0));
            let a = evolve_colored_commuting(&set, &psi, &kernel, &noise, None, &cps).unwrap();
            let b = evolve_csl_white(&Hamiltonian::zero(2), &set, &psi, 0.6, &noise, &cps).unwrap();
            for k in 0..a.len() {
                assert!((a.weight(k) - b.weight(k)).abs() <= 1e-6 * b.weight(k));
            }
        }
    }

    #[test]
    fn commuting_h0_phases() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let kernel = CorrelationKernel::gaussian(0.5, 0.2).unwrap();
        let noise = NoiseRealization::zeros(grid, Integration::Trapezoid, 1).unwrap();
        let h = Hamiltonian::diagonal(&[2.0, -1.0]);
        let r =
            evolve_colored_commuting(&set, &psi, &kernel, &noise, Some(&h), &Checkpoints::last_only(&grid)).unwrap();
        let c = r.states[0].amps();
        assert_relative_eq!(
            (c[0] / c[1]).arg(),
            (-3.0f64).rem_euclid(2.0 * std::f64::consts::PI) - 2.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert!(matches!(
            evolve_colored_commuting(&set, &psi, &kernel, &noise, Some(&sx(1.0)), &Checkpoints::last_only(&grid)),
            Err(Error::NonCommuting { .. })
        ));
    }

    /// RK4 with step doubling on dψ/dt = [A w(t) − 2γ A² G(t)] ψ, with w the
    /// piecewise-linear interpolant of the nodal noise.
    #[test]
    fn closed_form_matches_ode() {
        let set = CommutingSet::single(&[1.0, 0.5, -1.0]).unwrap();
        let psi = StateVector::from_real(&[0.5, 0.7, 0.5]).unwrap();
        let grid = TimeGrid::new(0.0, 1.5, 30).unwrap();
        let kernel = CorrelationKernel::gaussian(0.8, 0.3).unwrap();
        let model = NoiseModel::new(grid, &kernel, 1).unwrap();
        let noise = model.sample(Lineage::new(21, 4));
        let exact =
            evolve_colored_commuting(&set, &psi, &kernel, &noise, None, &Checkpoints::last_only(&grid)).unwrap();
        let w = noise.w(0).to_vec();
        let dt = grid.dt();
        let w_at = |t: f64| {
            let k = ((t / dt).floor() as usize).min(grid.steps() - 1);
            let r = t / dt - k as f64;
            w[k] * (1.0 - r) + w[k + 1] * r
        };
        let integrate = |sub: usize| -> Vec<f64> {
            let mut y: Vec<f64> = psi.amps().iter().map(|c| c.re).collect();
            let h = dt / sub as f64;
            let rhs = |t: f64, y: &[f64]| -> Vec<f64> {
                let g = kernel.cumulative(t, 0.0).unwrap();
                (0..3)
                    .map(|a| {
                        let av = set.value(0, a);
                        (av * w_at(t) - 2.0 * 0.8 * av * av * g) * y[a]
                    })
                    .collect()
            };
            for n in 0..grid.steps() * sub {
                let t = n as f64 * h;
                let k1 = rhs(t, &y);
                let y2: Vec<f64> = (0..3).map(|a| y[a] + 0.5 * h * k1[a]).collect();
                let k2 = rhs(t + 0.5 * h, &y2);
                let y3: Vec<f64> = (0..3).map(|a| y[a] + 0.5 * h * k2[a]).collect();
                let k3 = rhs(t + 0.5 * h, &y3);
                let y4: Vec<f64> = (0..3).map(|a| y[a] + h * k3[a]).collect();
                let k4 = rhs(t + h, &y4);
                for a in 0..3 {
                    y[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
                }
            }
            y
        };
        let coarse = integrate(40);
        let fine = integrate(80);
        let raw = exact.raw_state(0);
        for a in 0..3 {
            // fine step and its doubling agree, and both agree with the closed form
            let rich = fine[a] + (fine[a] - coarse[a]) / 15.0;
            assert!((rich - raw.amplitude(a).re).abs() < 1e-8 * rich.abs());
        }
    }

    fn smooth_path(grid: &TimeGrid, dt_scale: usize) -> NoiseRealization {
        // exact cell averages of w(t) = sin 3t + 0.5 cos 7t so that x is exact
        let x = |t: f64| (1.0 - (3.0 * t).cos()) / 3.0 + 0.5 * (7.0 * t).sin() / 7.0;
        let dt = grid.dt();
        let w: Vec<f64> = (0..=grid.steps()).map(|k| (x(grid.node(k) + dt) - x(grid.node(k))) / dt).collect();
        let _ = dt_scale;
        NoiseRealization::from_paths(*grid, Integration::LeftEndpoint, vec![w]).unwrap()
    }

    fn final_amps(m: usize, noise_for: impl Fn(&TimeGrid) -> NoiseRealization) -> DVector<C64> {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 2.0, m).unwrap();
        let r = evolve_csl_white(&sx(1.3), &set, &psi, 0.4, &noise_for(&grid), &Checkpoints::last_only(&grid)).unwrap();
        let raw = r.raw_state(0);
        raw.amps().map(|c| c * raw.log_scale().exp())
    }

    #[test]
    fn splitting_is_second_order_on_smooth_drive() {
        let errs: Vec<f64> = {
            let reference = final_amps(8192, |g| smooth_path(g, 1));
            [64, 128, 256].iter().map(|&m| (final_amps(m, |g| smooth_path(g, 1)) - &reference).norm()).collect()
        };
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 >= 1.8 && order2 >= 1.8, "orders {order1} {order2}");
    }

    #[test]
    fn splitting_converges_pathwise_on_brownian_paths() {
        // one fine Brownian path, coarsened by summing increments
        let fine_m = 4096;
        let fine_grid = TimeGrid::new(0.0, 2.0, fine_m).unwrap();
        let fine = NoiseModel::white(fine_grid, 0.4, 1).unwrap().sample(Lineage::new(77, 0));
        let coarse = |g: &TimeGrid| {
            let r = fine_m / g.steps();
            let mut w: Vec<f64> =
                (0..g.steps()).map(|k| fine.w(0)[k * r..(k + 1) * r].iter().sum::<f64>() / r as f64).collect();
            w.push(0.0);
            NoiseRealization::from_paths(*g, Integration::LeftEndpoint, vec![w]).unwrap()
        };
        let reference = final_amps(fine_m, |g| coarse(g));
        let errs: Vec<f64> =
            [32, 64, 128, 256].iter().map(|&m| (final_amps(m, |g| coarse(g)) - &reference).norm()).collect();
        let order = (errs[0] / errs[3]).log2() / 3.0;
        assert!(order >= 0.9, "order {order} from {errs:?}");
    }

    #[test]
    fn probe_recovers_operator_action() {
        let set = CommutingSet::single(&[1.0, -0.5, 2.0]).unwrap();
        let psi = StateVector::from_real(&[0.6, 0.0, 0.8]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let kernel = CorrelationKernel::exponential(0.5, 0.2).unwrap();
        let model = NoiseModel::new(grid, &kernel, 1).unwrap();
        let noise = model.sample(Lineage::new(2, 9));
        let cps = Checkpoints::all(&grid);
        let solver = PreparedSolver::new(&Solver::ColoredCommuting { kernel, h: None }, &set, &grid, &cps).unwrap();
        let base = solver.evolve(&psi, &noise).unwrap();
        let raw = base.raw_state(30);
        let est = richardson_probe(&solver, &psi, &noise, 30, 12, 0, (1e-3, 1e-4)).unwrap();
        for (a, e) in est.iter().enumerate() {
            let expected = raw.amplitude(a) * set.value(0, a);
            assert!((e - expected).norm() <= 1e-4 * expected.norm().max(1e-300) || expected.norm() == 0.0);
        }
        // a bump after t leaves ψ(t) untouched
        let zero = functional_derivative_probe(&solver, &psi, &noise, 30, 31, 0, 1e-3).unwrap();
        assert!(zero.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn white_endpoint_probe_is_half() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let model = NoiseModel::white(grid, 0.5, 1).unwrap();
        let noise = model.sample(Lineage::new(4, 1));
        let cps = Checkpoints::all(&grid);
        let solver = PreparedSolver::new(&Solver::CslWhite { h: sx(0.7), gamma: 0.5 }, &set, &grid, &cps).unwrap();
        let t = 600;
        let raw = solver.evolve(&psi, &noise).unwrap().raw_state(t);
        let est = richardson_probe(&solver, &psi, &noise, t, t, 0, (1e-3, 1e-4)).unwrap();
        for (a, e) in est.iter().enumerate() {
            let expected = raw.amplitude(a) * (0.5 * set.value(0, a));
            assert!((e - expected).norm() < 2e-3 * raw.amps().norm() * raw.log_scale().exp());
        }
    }

    #[test]
    fn phase_gauge() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let noise = NoiseModel::white(grid, 1.0, 1).unwrap().sample(Lineage::new(8, 8));
        let cps = Checkpoints::all(&grid);
        let a = evolve_csl_white(&sx(0.9), &set, &psi, 1.0, &noise, &cps).unwrap();
        let b = evolve_csl_white(&sx(0.9), &set, &psi.scale_phase(2.1), 1.0, &noise, &cps).unwrap();
        for k in 0..a.len() {
            assert_relative_eq!(a.log_weights[k], b.log_weights[k], epsilon = 1e-12);
            for (p, q) in a.probabilities(k).iter().zip(b.probabilities(k)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strong_noise_stays_finite() {
        let (set, psi) = two_state();
        let grid = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let kernel = CorrelationKernel::gaussian(200.0, 0.1).unwrap();
        let noise = NoiseModel::new(grid, &kernel, 1).unwrap().sample(Lineage::new(0, 0));
        let r = evolve_colored_commuting(&set, &psi, &kernel, &noise, None, &Checkpoints::all(&grid)).unwrap();
        assert!(r.log_weights.iter().all(|v| v.is_finite()));
        assert!(r.log_weights.last().unwrap().abs() > 700.0);
    }

    #[test]
    fn checkpoint_schedule() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let c = Checkpoints::even(&g, DEFAULT_CHECKPOINTS);
        assert_eq!(c.len(), 50);
        assert_eq!(c.as_slice()[0], 0);
        assert_eq!(*c.as_slice().last().unwrap(), 1000);
        assert_eq!(Checkpoints::even(&TimeGrid::new(0.0, 1.0, 10).unwrap(), 50).len(), 11);
    }
}
