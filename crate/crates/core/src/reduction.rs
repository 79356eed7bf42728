//! Collapse statistics under the cooking rule: importance weights
//! `P_cook/P_sample`, outcome classification, Born frequencies and the cooked
//! distribution of the integrated noise.

use std::io::Write;

use crate::dynamics::TrajectoryRecord;
use crate::error::{invalid, Error, Result};
use crate::hilbert::{project, CommutingSet, StateVector};
use crate::noise::{NoiseModel, ShiftedMixture};
use crate::quad::compensated_sum;
use crate::stats::{
    effective_sample_size, kolmogorov_critical, mean_stderr, normal_cdf, weighted_ks_distance, Estimate,
};

pub const DEFAULT_THRESHOLD: f64 = 0.99;
pub const MIN_DECIDED_FRACTION: f64 = 0.95;
pub const MIN_EFFECTIVE_SAMPLES: f64 = 10.0;

/// Cooked weights at one checkpoint, scaled to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CookedWeights {
    pub weights: Vec<f64>,
    pub n_eff: f64,
    /// Mean of the unnormalized weights with its standard error; should be 1.
    pub raw_mean: Estimate,
}

pub fn cook_weights(records: &[TrajectoryRecord], checkpoint: usize) -> Result<CookedWeights> {
    if records.is_empty() {
        return Err(invalid("no trajectories to weight"));
    }
    let logw: Vec<f64> = records.iter().map(|r| r.log_cooked_weight(checkpoint)).collect();
    let peak = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::DegenerateEnsemble("no finite trajectory weight".into()));
    }
    let scaled: Vec<f64> = logw.iter().map(|l| (l - peak).exp()).collect();
    let mean = compensated_sum(scaled.iter().copied()) / scaled.len() as f64;
    let weights: Vec<f64> = scaled.iter().map(|w| w / mean).collect();
    let n_eff = effective_sample_size(&weights);
    if n_eff < MIN_EFFECTIVE_SAMPLES {
        return Err(Error::DegenerateEnsemble(format!(
            "effective sample size {n_eff:.2} below {MIN_EFFECTIVE_SAMPLES}"
        )));
    }
    let unnormalized: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
    Ok(CookedWeights { weights, n_eff, raw_mean: mean_stderr(&unnormalized) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Index into [`CommutingSet::outcome_groups`].
    Decided(usize),
    Undecided,
}

/// The outcome group holding at least `threshold` of the physical state's
/// probability at `checkpoint`.
pub fn classify_outcome(record: &TrajectoryRecord, set: &CommutingSet, checkpoint: usize, threshold: f64) -> Outcome {
    let probs = record.probabilities(checkpoint);
    for (g, grp) in set.outcome_groups().iter().enumerate() {
        let p: f64 = grp.members.iter().map(|&a| probs[a]).sum();
        if p >= threshold {
            return Outcome::Decided(g);
        }
    }
    Outcome::Undecided
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeStat {
    pub eigenvalues: Vec<f64>,
    pub born_weight: f64,
    pub frequency: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BornReport {
    pub outcomes: Vec<OutcomeStat>,
    pub n_eff: f64,
    /// Weighted fraction of trajectories that reached no outcome.
    pub undecided_fraction: f64,
}

impl BornReport {
    /// Largest `|frequency − Born weight|` in standard errors; exact matches
    /// count as zero.
    pub fn max_sigmas(&self) -> f64 {
        self.outcomes
            .iter()
            .map(|o| {
                let gap = (o.frequency - o.born_weight).abs();
                if gap == 0.0 {
                    0.0
                } else {
                    gap / o.stderr
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `‖P_g ψ‖²` for every outcome group, from the normalized state.
pub fn born_weights(set: &CommutingSet, psi: &StateVector) -> Result<Vec<f64>> {
    let probs = psi.probabilities()?;
    Ok(set.outcome_groups().iter().map(|g| g.members.iter().map(|&a| probs[a]).sum()).collect())
}

/// Cooked outcome frequencies among decided trajectories, with the weighted
/// binomial standard error `√(Σ w²(1_g − p)²) / Σ w`.
pub fn born_frequencies(
    records: &[TrajectoryRecord],
    weights: &CookedWeights,
    set: &CommutingSet,
    psi0: &StateVector,
    checkpoint: usize,
    threshold: f64,
) -> Result<BornReport> {
    if records.len() != weights.weights.len() {
        return Err(invalid("one weight per trajectory"));
    }
    let groups = set.outcome_groups();
    let labels: Vec<Outcome> = records.iter().map(|r| classify_outcome(r, set, checkpoint, threshold)).collect();
    let w = &weights.weights;
    let total = compensated_sum(w.iter().copied());
    let decided_w: Vec<f64> =
        w.iter().zip(&labels).map(|(w, l)| if matches!(l, Outcome::Decided(_)) { *w } else { 0.0 }).collect();
    let decided = compensated_sum(decided_w.iter().copied());
    let decided_fraction = decided / total;
    if decided_fraction < MIN_DECIDED_FRACTION {
        return Err(Error::TooManyUndecided { decided: decided_fraction, required: MIN_DECIDED_FRACTION });
    }
    let born = born_weights(set, psi0)?;
    let outcomes = groups
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            let hit = |l: &Outcome| if *l == Outcome::Decided(g) { 1.0 } else { 0.0 };
            let p = compensated_sum(decided_w.iter().zip(&labels).map(|(w, l)| w * hit(l))) / decided;
            let var = compensated_sum(decided_w.iter().zip(&labels).map(|(w, l)| (w * (hit(l) - p)).powi(2)));
            OutcomeStat {
                eigenvalues: grp.eigenvalues.clone(),
                born_weight: born[g],
                frequency: p,
                stderr: var.sqrt() / decided,
            }
        })
        .collect();
    Ok(BornReport { outcomes, n_eff: weights.n_eff, undecided_fraction: 1.0 - decided_fraction })
}

/// Proposal that samples each outcome branch of a trajectory ensemble
/// directly: one mean-shifted Gaussian per outcome group with non-zero Born
/// weight, chosen uniformly, tilted by `2a_{ig}` at `target_node`. For the
/// commuting solvers the resulting cooked weights stay bounded.
pub fn outcome_proposal(
    model: &NoiseModel,
    set: &CommutingSet,
    psi0: &StateVector,
    target_node: usize,
) -> Result<ShiftedMixture> {
    let born = born_weights(set, psi0)?;
    let components: Vec<(f64, Vec<f64>)> = set
        .outcome_groups()
        .iter()
        .zip(&born)
        .filter(|(_, &b)| b > 0.0)
        .map(|(g, _)| (1.0, g.eigenvalues.iter().map(|a| 2.0 * a).collect()))
        .collect();
    ShiftedMixture::new(model, target_node, &components)
}

/// `√(γf) / (2|α − β| γf)`: component width over branch separation.
pub fn separation_ratio(gamma_f: f64, alpha: f64, beta: f64) -> f64 {
    gamma_f.sqrt() / (2.0 * (alpha - beta).abs() * gamma_f)
}

/// Two-or-more-Gaussian mixture for the cooked integrated noise of a single
/// operator: means `2aγf`, common variance `γf`, weights `‖P_a ψ₀‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variance: f64,
}

impl BranchMixture {
    pub fn new(set: &CommutingSet, psi0: &StateVector, gamma_f: f64) -> Result<Self> {
        if set.num_ops() != 1 {
            return Err(invalid("the branch mixture needs a single operator"));
        }
        let groups = set.outcome_groups();
        Ok(Self {
            weights: born_weights(set, psi0)?,
            means: groups.iter().map(|g| 2.0 * g.eigenvalues[0] * gamma_f).collect(),
            variance: gamma_f,
        })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let sd = self.variance.sqrt();
        self.weights.iter().zip(&self.means).map(|(w, m)| w * normal_cdf((x - m) / sd)).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let v = self.variance;
        let norm = (2.0 * std::f64::consts::PI * v).sqrt();
        self.weights.iter().zip(&self.means).map(|(w, m)| w * (-(x - m).powi(2) / (2.0 * v)).exp() / norm).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Weighted density per bin.
    pub density: Vec<f64>,
    /// Reference density at bin centres.
    pub reference: Vec<f64>,
}

/// Outcome of a weighted Kolmogorov–Smirnov test.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionCheck {
    pub distance: f64,
    pub n_eff: f64,
    /// 1% critical value `K_{0.99}/√n_eff`.
    pub critical: f64,
    pub histogram: Histogram,
}

impl DistributionCheck {
    pub fn passes(&self) -> bool {
        self.distance < self.critical
    }
}

fn histogram(xs: &[f64], weights: &[f64], bins: usize, pdf: impl Fn(f64) -> f64) -> Histogram {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let total: f64 = compensated_sum(weights.iter().copied());
    let mut mass = vec![0.0; bins];
    for (x, w) in xs.iter().zip(weights) {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        mass[b] += w;
    }
    Histogram {
        density: mass.iter().map(|m| m / (total * width)).collect(),
        reference: (0..bins).map(|b| pdf(lo + (b as f64 + 0.5) * width)).collect(),
        edges,
    }
}

fn distribution_check(
    xs: &[f64],
    weights: &[f64],
    bins: usize,
    cdf: impl Fn(f64) -> f64,
    pdf: impl Fn(f64) -> f64,
) -> Result<DistributionCheck> {
    if xs.len() != weights.len() || xs.is_empty() {
        return Err(invalid("one weight per sample"));
    }
    let n_eff = effective_sample_size(weights);
    Ok(DistributionCheck {
        distance: weighted_ks_distance(xs, weights, cdf),
        n_eff,
        critical: kolmogorov_critical(0.01) / n_eff.sqrt(),
        histogram: histogram(xs, weights, bins, pdf),
    })
}

/// Weighted `x(t)` at the last checkpoint against the analytic branch mixture.
pub fn cooked_x_distribution(
    records: &[TrajectoryRecord],
    weights: &CookedWeights,
    mixture: &BranchMixture,
    bins: usize,
) -> Result<DistributionCheck> {
    let xs: Vec<f64> = records.iter().map(|r| r.x_last[0]).collect();
    distribution_check(&xs, &weights.weights, bins, |x| mixture.cdf(x), |x| mixture.pdf(x))
}

/// Unweighted `x(t)` against the raw law `N(0, γf)`. Only meaningful for
/// ensembles drawn with the raw proposal.
pub fn raw_x_distribution(records: &[TrajectoryRecord], gamma_f: f64, bins: usize) -> Result<DistributionCheck> {
    let xs: Vec<f64> = records.iter().map(|r| r.x_last[0]).collect();
    let ones = vec![1.0; xs.len()];
    let sd = gamma_f.sqrt();
    let norm = (2.0 * std::f64::consts::PI).sqrt() * sd;
    distribution_check(&xs, &ones, bins, |x| normal_cdf(x / sd), |x| (-(x / sd).powi(2) / 2.0).exp() / norm)
}

pub const STATS_HEADER: &str = "outcome,born_weight,cooked_frequency,stderr,n_eff,undecided_fraction";

pub fn write_stats_csv<W: Write>(report: &BornReport, out: &mut W) -> Result<()> {
    writeln!(out, "{STATS_HEADER}")?;
    for o in &report.outcomes {
        let label = o.eigenvalues.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
        writeln!(
            out,
            "{label},{},{},{},{},{}",
            o.born_weight, o.frequency, o.stderr, report.n_eff, report.undecided_fraction
        )?;
    }
    Ok(())
}

/// Projection helper: the state restricted to outcome group `g`.
pub fn project_outcome(psi: &StateVector, set: &CommutingSet, g: usize) -> Result<StateVector> {
    let groups = set.outcome_groups();
    let grp = groups.get(g).ok_or_else(|| invalid("outcome index out of range"))?;
    let mut v = psi.clone();
    for (i, a) in grp.eigenvalues.iter().enumerate() {
        v = project(&v, set, i, *a)?;
    }
    Ok(v)
}
