//! States, operators and density matrices in the shared eigenbasis of the
//! preferred-basis operators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

/// A state vector stored as `e^{log_scale} · amps`.
///
/// `amps` is kept near unit norm by the solvers so that raw vectors whose
/// squared norm lies far outside the `f64` range stay representable.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    amps: DVector<C64>,
    log_scale: f64,
}

impl StateVector {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        Self::with_log_scale(amps, 0.0)
    }

    pub fn from_real(amps: &[f64]) -> Result<Self> {
        Self::new(amps.iter().map(|&a| C64::new(a, 0.0)).collect())
    }

    pub fn with_log_scale(amps: Vec<C64>, log_scale: f64) -> Result<Self> {
        if amps.is_empty() {
            return Err(invalid("state vector needs at least one amplitude"));
        }
        if amps.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) || !log_scale.is_finite() {
            return Err(invalid("state vector amplitudes must be finite"));
        }
        Ok(Self { amps: DVector::from_vec(amps), log_scale })
    }

    pub(crate) fn from_parts(amps: DVector<C64>, log_scale: f64) -> Self {
        Self { amps, log_scale }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    /// Stored amplitudes, without the `e^{log_scale}` factor.
    pub fn amps(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    /// Amplitude `α` of the represented vector. Underflows for large negative
    /// offsets; use [`StateVector::normalize`] for physical amplitudes.
    pub fn amplitude(&self, alpha: usize) -> C64 {
        self.amps[alpha] * self.log_scale.exp()
    }

    /// `ln ‖v‖²` including the offset.
    pub fn log_norm2(&self) -> Result<f64> {
        let peak = self.amps.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::ZeroNorm);
        }
        let s: f64 = self.amps.iter().map(|c| (c / peak).norm_sqr()).sum();
        Ok(2.0 * (self.log_scale + peak.ln()) + s.ln())
    }

    /// `‖v‖²`, which may overflow or underflow; see [`StateVector::log_norm2`].
    pub fn norm2(&self) -> Result<f64> {
        Ok(self.log_norm2()?.exp())
    }

    /// The unit vector along `v` together with `ln ‖v‖²`.
    pub fn normalize(&self) -> Result<(StateVector, f64)> {
        let peak = self.amps.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::ZeroNorm);
        }
        let scaled = self.amps.map(|c| c / peak);
        let s = scaled.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let log_norm2 = 2.0 * (self.log_scale + peak.ln() + s.ln());
        Ok((Self { amps: scaled.map(|c| c / s), log_scale: 0.0 }, log_norm2))
    }

    /// The same vector with `amps` rescaled to unit norm and the scale moved
    /// into the offset.
    pub fn renormalized(&self) -> Result<StateVector> {
        let (unit, log_norm2) = self.normalize()?;
        Ok(Self { amps: unit.amps, log_scale: 0.5 * log_norm2 })
    }

    /// `|c_α|²` of the normalized vector.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let (unit, _) = self.normalize()?;
        Ok(unit.amps.iter().map(|c| c.norm_sqr()).collect())
    }

    pub fn scale_phase(&self, phase: f64) -> StateVector {
        let p = C64::from_polar(1.0, phase);
        Self { amps: self.amps.map(|c| c * p), log_scale: self.log_scale }
    }

    /// `|v⟩⟨v|` of the stored amplitudes (offset not applied).
    pub fn outer(&self) -> DMatrix<C64> {
        &self.amps * self.amps.adjoint()
    }
}

/// Diagonal commuting operators given by their eigenvalue tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommutingSet {
    /// `table[i][α]` is the eigenvalue of operator `i` on basis state `α`.
    table: Vec<Vec<f64>>,
    labels: Vec<String>,
}

/// Basis states sharing one full eigenvalue vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeGroup {
    pub eigenvalues: Vec<f64>,
    pub members: Vec<usize>,
}

impl CommutingSet {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let d = table.first().map(|r| r.len()).unwrap_or(0);
        let labels = (0..d).map(|a| a.to_string()).collect();
        Self::with_labels(table, labels)
    }

    pub fn with_labels(table: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if table.is_empty() {
            return Err(invalid("need at least one preferred-basis operator"));
        }
        let d = table[0].len();
        if d == 0 || table.iter().any(|r| r.len() != d) {
            return Err(invalid("eigenvalue table rows must share a non-zero length"));
        }
        if table.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("eigenvalue table must be finite"));
        }
        if labels.len() != d {
            return Err(invalid("one label per basis state"));
        }
        Ok(Self { table, labels })
    }

    /// One operator with the given eigenvalues.
    pub fn single(eigenvalues: &[f64]) -> Result<Self> {
        Self::new(vec![eigenvalues.to_vec()])
    }

    pub fn dim(&self) -> usize {
        self.table[0].len()
    }

    pub fn num_ops(&self) -> usize {
        self.table.len()
    }

    pub fn value(&self, op: usize, alpha: usize) -> f64 {
        self.table[op][alpha]
    }

    pub fn row(&self, op: usize) -> &[f64] {
        &self.table[op]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `(a_{1α}, …, a_{mα})`.
    pub fn column(&self, alpha: usize) -> Vec<f64> {
        self.table.iter().map(|r| r[alpha]).collect()
    }

    /// `Σ_i a_{iα}²`.
    pub fn sum_sq(&self, alpha: usize) -> f64 {
        self.table.iter().map(|r| r[alpha] * r[alpha]).sum()
    }

    /// `Σ_i (a_{iα} − a_{iβ})²`.
    pub fn gap_sq(&self, alpha: usize, beta: usize) -> f64 {
        self.table.iter().map(|r| (r[alpha] - r[beta]).powi(2)).sum()
    }

    /// Groups of basis states with identical eigenvalue vectors, in order of
    /// first appearance.
    pub fn outcome_groups(&self) -> Vec<OutcomeGroup> {
        let mut groups: Vec<OutcomeGroup> = Vec::new();
        for a in 0..self.dim() {
            let col = self.column(a);
            match groups.iter_mut().find(|g| g.eigenvalues == col) {
                Some(g) => g.members.push(a),
                None => groups.push(OutcomeGroup { eigenvalues: col, members: vec![a] }),
            }
        }
        groups
    }

    pub fn operator_matrix(&self, op: usize) -> DMatrix<C64> {
        DMatrix::from_diagonal(&DVector::from_iterator(self.dim(), self.table[op].iter().map(|&v| C64::new(v, 0.0))))
    }
}

/// Hermitian free Hamiltonian (`ħ = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    h: DMatrix<C64>,
}

pub const HERMITIAN_TOL: f64 = 1e-12;

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

impl Hamiltonian {
    pub fn new(h: DMatrix<C64>) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(invalid("Hamiltonian must be square and non-empty"));
        }
        if h.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(invalid("Hamiltonian entries must be finite"));
        }
        let skew = max_abs(&(&h - h.adjoint()));
        if skew >= HERMITIAN_TOL {
            return Err(invalid(format!("Hamiltonian is not Hermitian (max |H − H†| = {skew:e})")));
        }
        Ok(Self { h })
    }

    pub fn zero(d: usize) -> Self {
        Self { h: DMatrix::zeros(d, d) }
    }

    pub fn diagonal(energies: &[f64]) -> Self {
        Self {
            h: DMatrix::from_diagonal(&DVector::from_iterator(
                energies.len(),
                energies.iter().map(|&e| C64::new(e, 0.0)),
            )),
        }
    }

    /// Row-major dense matrix of `[re, im]` pairs.
    pub fn from_pairs(d: usize, entries: &[[f64; 2]]) -> Result<Self> {
        if entries.len() != d * d {
            return Err(invalid(format!("Hamiltonian needs {} entries, got {}", d * d, entries.len())));
        }
        Self::new(DMatrix::from_row_iterator(d, d, entries.iter().map(|p| C64::new(p[0], p[1]))))
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.h
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().all(|c| *c == C64::new(0.0, 0.0))
    }

    /// Diagonal entries if all off-diagonal entries vanish exactly.
    pub fn diagonal_energies(&self) -> Option<Vec<f64>> {
        let d = self.dim();
        for r in 0..d {
            for c in 0..d {
                if r != c && self.h[(r, c)] != C64::new(0.0, 0.0) {
                    return None;
                }
            }
        }
        Some((0..d).map(|k| self.h[(k, k)].re).collect())
    }

    /// Spectral radius.
    pub fn spectral_radius(&self) -> f64 {
        SymmetricEigen::new(self.h.clone()).eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// `exp(−i H dt)` by eigendecomposition.
    pub fn propagator(&self, dt: f64) -> DMatrix<C64> {
        if let Some(e) = self.diagonal_energies() {
            return DMatrix::from_diagonal(&DVector::from_iterator(
                e.len(),
                e.iter().map(|&v| C64::from_polar(1.0, -v * dt)),
            ));
        }
        let eig = SymmetricEigen::new(self.h.clone());
        let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::from_polar(1.0, -l * dt)));
        &eig.eigenvectors * phases * eig.eigenvectors.adjoint()
    }
}

/// Density matrix satisfying the physical invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: DMatrix<C64>,
}

pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-9;

impl DensityMatrix {
    pub fn new(rho: DMatrix<C64>) -> Result<Self> {
        if rho.nrows() != rho.ncols() || rho.nrows() == 0 {
            return Err(invalid("density matrix must be square and non-empty"));
        }
        let skew = max_abs(&(&rho - rho.adjoint()));
        if skew >= HERMITIAN_TOL {
            return Err(invalid(format!("density matrix is not Hermitian ({skew:e})")));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(invalid(format!("density matrix trace is {tr}")));
        }
        let min = min_eigenvalue(&rho);
        if min < -POSITIVITY_TOL {
            return Err(invalid(format!("density matrix has eigenvalue {min}")));
        }
        Ok(Self { rho })
    }

    pub fn pure(psi: &StateVector) -> Result<Self> {
        let (unit, _) = psi.normalize()?;
        Ok(Self { rho: unit.outer() })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.rho
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }
}

pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    SymmetricEigen::new(herm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Zeroes every amplitude whose eigenvalue of operator `op` differs from
/// `value` (exact comparison).
pub fn project(v: &StateVector, set: &CommutingSet, op: usize, value: f64) -> Result<StateVector> {
    if op >= set.num_ops() || v.dim() != set.dim() {
        return Err(invalid("projection operator does not match the state"));
    }
    let row = set.row(op);
    if !row.contains(&value) {
        return Err(Error::EmptyEigenmanifold { operator: op, value });
    }
    let amps = DVector::from_iterator(
        v.dim(),
        v.amps.iter().zip(row).map(|(c, &a)| if a == value { *c } else { C64::new(0.0, 0.0) }),
    );
    Ok(StateVector { amps, log_scale: v.log_scale })
}

/// `max_i ‖A_i H − H A_i‖_max`.
pub fn commutation_check(h: &Hamiltonian, set: &CommutingSet) -> Result<f64> {
    let d = set.dim();
    if h.dim() != d {
        return Err(invalid("Hamiltonian and operator set dimensions differ"));
    }
    let mut worst: f64 = 0.0;
    for i in 0..set.num_ops() {
        let row = set.row(i);
        for r in 0..d {
            for c in 0..d {
                worst = worst.max(((row[r] - row[c]) * h.matrix()[(r, c)]).norm());
            }
        }
    }
    Ok(worst)
}

pub const COMMUTATION_TOL: f64 = 1e-10;
