//! Noise correlation kernels `⟨⟨w(t₁) w(t₂)⟩⟩ = γ D(t₁, t₂)` and the time
//! integrals of `D` that control every decay law in the crate:
//!
//! * `G(t; t₀) = ∫_{t₀}^{t} D(t, s) ds`: the instantaneous rate factor,
//! * `f(t; t₀) = ∫∫_{[t₀, t]²} D`: the variance of the integrated noise
//!   divided by `γ`.
//!
//! `D` is kept normalized and `γ` is carried separately on the kernel. White
//! noise has no pointwise value; it only exists through its transforms and the
//! discrete covariance built in [`crate::noise`].

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad::adaptive_simpson_pieces;

/// Kernel families shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    White,
    Gaussian,
    Exponential,
    Tabulated,
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelFamily::White => "white",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Tabulated => "tabulated",
        };
        f.write_str(s)
    }
}

/// Stationary kernel sampled on lags `0 = u₀ < u₁ < … < u_n`, linearly
/// interpolated in between. The last lag is the support: integral transforms
/// treat `D` as zero beyond it, pointwise evaluation refuses it.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTable {
    lags: Vec<f64>,
    values: Vec<f64>,
}

impl LagTable {
    pub fn new(lags: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if lags.len() != values.len() || lags.len() < 2 {
            return Err(invalid("lag table needs at least two (lag, D) rows"));
        }
        if lags[0] != 0.0 {
            return Err(invalid("lag table must start at lag 0"));
        }
        if lags.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("lags must be strictly increasing"));
        }
        if lags.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("lag table contains non-finite entries"));
        }
        Ok(Self { lags, values })
    }

    /// Reads a two-column `lag,D` CSV. A non-numeric first row is taken as a
    /// header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut lags = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(invalid(format!("row {row}: expected 2 columns, got {}", rec.len())));
            }
            let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
            match parsed {
                (Ok(l), Ok(d)) => {
                    lags.push(l);
                    values.push(d);
                }
                _ if row == 0 => continue,
                _ => return Err(invalid(format!("row {row}: unparseable number"))),
            }
        }
        Self::new(lags, values)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(file)
    }

    /// Samples `d` on `n + 1` evenly spaced lags over `[0, support]`.
    pub fn from_fn(support: f64, n: usize, d: impl Fn(f64) -> f64) -> Result<Self> {
        let lags: Vec<f64> = (0..=n).map(|k| support * k as f64 / n as f64).collect();
        let values = lags.iter().map(|&u| d(u)).collect();
        Self::new(lags, values)
    }

    pub fn support(&self) -> f64 {
        *self.lags.last().unwrap()
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, lag: f64) -> Result<f64> {
        let lag = lag.abs();
        if lag > self.support() {
            return Err(Error::OutOfRange { lag, max: self.support() });
        }
        Ok(self.interpolate(lag))
    }

    pub(crate) fn eval_or_zero(&self, lag: f64) -> f64 {
        let lag = lag.abs();
        if lag > self.support() {
            0.0
        } else {
            self.interpolate(lag)
        }
    }

    fn interpolate(&self, lag: f64) -> f64 {
        let i = match self.lags.binary_search_by(|x| x.partial_cmp(&lag).unwrap()) {
            Ok(i) => return self.values[i],
            Err(i) => i,
        };
        let (l0, l1) = (self.lags[i - 1], self.lags[i]);
        let (d0, d1) = (self.values[i - 1], self.values[i]);
        d0 + (d1 - d0) * (lag - l0) / (l1 - l0)
    }

    /// Table lags up to `limit` plus `limit` itself, for piecewise quadrature.
    fn breaks_to(&self, limit: f64) -> Vec<f64> {
        let mut b: Vec<f64> = self.lags.iter().copied().take_while(|&l| l < limit).collect();
        b.push(limit);
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    White,
    Gaussian { tau: f64 },
    Exponential { tau: f64 },
    Tabulated(Arc<LagTable>),
}

/// Two-point function `γ D(t₁, t₂)` of a family of independent, identically
/// distributed noise processes. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationKernel {
    gamma: f64,
    shape: KernelShape,
}

/// Outcome of [`CorrelationKernel::divergence_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub times: Vec<f64>,
    pub f_values: Vec<f64>,
    pub nondecreasing: bool,
    /// Slope of `f` over the last segment of the geometric time sequence.
    pub last_slope: f64,
    pub diverges: bool,
}

const SLOPE_THRESHOLD: f64 = 1e-6;
const QUAD_TOL: f64 = 1e-13;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn interval(t: f64, t0: f64) -> Result<f64> {
    if t.is_nan() || t0.is_nan() || t < t0 || t.is_infinite() {
        return Err(Error::InvalidInterval { t, t0 });
    }
    Ok(t - t0)
}

impl CorrelationKernel {
    pub fn white(gamma: f64) -> Result<Self> {
        check_positive("gamma", gamma)?;
        Ok(Self { gamma, shape: KernelShape::White })
    }

    pub fn gaussian(gamma: f64, tau: f64) -> Result<Self> {
        check_positive("gamma", gamma)?;
        check_positive("tau", tau)?;
        Ok(Self { gamma, shape: KernelShape::Gaussian { tau } })
    }

    pub fn exponential(gamma: f64, tau: f64) -> Result<Self> {
        check_positive("gamma", gamma)?;
        check_positive("tau", tau)?;
        Ok(Self { gamma, shape: KernelShape::Exponential { tau } })
    }

    pub fn tabulated(gamma: f64, table: LagTable) -> Result<Self> {
        check_positive("gamma", gamma)?;
        Ok(Self { gamma, shape: KernelShape::Tabulated(Arc::new(table)) })
    }

    /// Same kernel shape with a different strength.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_positive("gamma", gamma)?;
        Ok(Self { gamma, shape: self.shape.clone() })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn shape(&self) -> &KernelShape {
        &self.shape
    }

    pub fn family(&self) -> KernelFamily {
        match self.shape {
            KernelShape::White => KernelFamily::White,
            KernelShape::Gaussian { .. } => KernelFamily::Gaussian,
            KernelShape::Exponential { .. } => KernelFamily::Exponential,
            KernelShape::Tabulated(_) => KernelFamily::Tabulated,
        }
    }

    pub fn tau(&self) -> Option<f64> {
        match self.shape {
            KernelShape::Gaussian { tau } | KernelShape::Exponential { tau } => Some(tau),
            _ => None,
        }
    }

    pub fn is_white(&self) -> bool {
        matches!(self.shape, KernelShape::White)
    }

    /// `D(t₁, t₂)` without the `γ` prefactor.
    pub fn eval(&self, t1: f64, t2: f64) -> Result<f64> {
        if !t1.is_finite() || !t2.is_finite() {
            return Err(invalid("kernel arguments must be finite"));
        }
        let lag = t1 - t2;
        match &self.shape {
            KernelShape::White => Err(Error::UnsupportedPointwiseEval),
            KernelShape::Gaussian { tau } => Ok(gaussian_d(lag, *tau)),
            KernelShape::Exponential { tau } => Ok(exponential_d(lag, *tau)),
            KernelShape::Tabulated(table) => table.eval(lag),
        }
    }

    /// `D` as a function of lag, zero beyond a tabulated support. Used when
    /// assembling covariances and quadratures.
    pub(crate) fn lag_value(&self, lag: f64) -> Result<f64> {
        match &self.shape {
            KernelShape::White => Err(Error::UnsupportedPointwiseEval),
            KernelShape::Gaussian { tau } => Ok(gaussian_d(lag, *tau)),
            KernelShape::Exponential { tau } => Ok(exponential_d(lag, *tau)),
            KernelShape::Tabulated(table) => Ok(table.eval_or_zero(lag)),
        }
    }

    /// `G(t; t₀) = ∫_{t₀}^{t} D(t, s) ds`. `t0` may be `-∞` for the closed-form
    /// families. White noise contributes half its delta at the interval edge,
    /// so `G = 1/2` for every `t ≥ t₀`.
    pub fn cumulative(&self, t: f64, t0: f64) -> Result<f64> {
        let span = interval(t, t0)?;
        match &self.shape {
            KernelShape::White => Ok(0.5),
            KernelShape::Gaussian { tau } => {
                if span.is_infinite() {
                    Ok(0.5)
                } else {
                    Ok(0.5 * libm::erf(span / (std::f64::consts::SQRT_2 * tau)))
                }
            }
            KernelShape::Exponential { tau } => {
                if span.is_infinite() {
                    Ok(0.5)
                } else {
                    Ok(-0.5 * (-span / tau).exp_m1())
                }
            }
            KernelShape::Tabulated(table) => {
                if span.is_infinite() {
                    return Err(Error::InvalidInterval { t, t0 });
                }
                let limit = span.min(table.support());
                Ok(adaptive_simpson_pieces(|u| table.eval_or_zero(u), &table.breaks_to(limit), QUAD_TOL))
            }
        }
    }

    /// `f(t; t₀) = ∫_{t₀}^{t} ∫_{t₀}^{t} D(t₁, t₂) dt₁ dt₂`, the variance of
    /// the integrated noise divided by `γ`.
    pub fn double_integral(&self, t: f64, t0: f64) -> Result<f64> {
        if !t0.is_finite() {
            return Err(Error::InvalidInterval { t, t0 });
        }
        let span = interval(t, t0)?;
        match &self.shape {
            KernelShape::White => Ok(span),
            KernelShape::Exponential { tau } => Ok(exponential_f(span, *tau)),
            KernelShape::Gaussian { tau } => Ok(gaussian_f(span, *tau)),
            KernelShape::Tabulated(table) => {
                // f(T) = 2 ∫_0^T (T − u) D(u) du for a stationary kernel.
                let limit = span.min(table.support());
                Ok(2.0
                    * adaptive_simpson_pieces(
                        |u| (span - u) * table.eval_or_zero(u),
                        &table.breaks_to(limit),
                        QUAD_TOL * span.max(1.0),
                    ))
            }
        }
    }

    /// Checks the reduction condition `f(t) → ∞`: evaluates `f` on a
    /// geometric sequence of times up to `horizon` and reports whether it is
    /// nondecreasing with a last-segment slope above `1e-6`.
    pub fn divergence_check(&self, horizon: f64, t0: f64) -> Result<DivergenceReport> {
        let span = interval(horizon, t0)?;
        if span <= 0.0 || !t0.is_finite() {
            return Err(Error::InvalidInterval { t: horizon, t0 });
        }
        const POINTS: usize = 40;
        let start = span * 1e-4;
        let ratio = (span / start).powf(1.0 / (POINTS - 1) as f64);
        let times: Vec<f64> =
            (0..POINTS).map(|k| if k + 1 == POINTS { horizon } else { t0 + start * ratio.powi(k as i32) }).collect();
        let f_values = times.iter().map(|&t| self.double_integral(t, t0)).collect::<Result<Vec<_>>>()?;
        let nondecreasing = f_values.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs().max(1e-300));
        let n = times.len();
        let last_slope = (f_values[n - 1] - f_values[n - 2]) / (times[n - 1] - times[n - 2]);
        Ok(DivergenceReport {
            diverges: nondecreasing && last_slope > SLOPE_THRESHOLD,
            times,
            f_values,
            nondecreasing,
            last_slope,
        })
    }
}

fn gaussian_d(lag: f64, tau: f64) -> f64 {
    (-(lag * lag) / (2.0 * tau * tau)).exp() / ((2.0 * PI).sqrt() * tau)
}

fn exponential_d(lag: f64, tau: f64) -> f64 {
    (-lag.abs() / tau).exp() / (2.0 * tau)
}

fn exponential_f(span: f64, tau: f64) -> f64 {
    let z = span / tau;
    if z < 1e-3 {
        // T − τ(1 − e^{−z}) = τ(z²/2 − z³/6 + z⁴/24 − …)
        tau * z * z * (0.5 - z / 6.0 + z * z / 24.0 - z * z * z / 120.0)
    } else {
        span + tau * (-z).exp_m1()
    }
}

fn gaussian_f(span: f64, tau: f64) -> f64 {
    let z = span / tau;
    if z < 1e-3 {
        // D(0) T² (1 − z²/12 + z⁴/240)
        span * span / ((2.0 * PI).sqrt() * tau) * (1.0 - z * z / 12.0 + z.powi(4) / 240.0)
    } else {
        span * libm::erf(z / std::f64::consts::SQRT_2) + tau * (2.0 / PI).sqrt() * (-(z * z) / 2.0).exp_m1()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::quad::gauss_legendre;
    use approx::assert_relative_eq;

    fn shipped() -> Vec<CorrelationKernel> {
        vec![
            CorrelationKernel::gaussian(1.3, 0.7).unwrap(),
            CorrelationKernel::exponential(0.4, 1.9).unwrap(),
            CorrelationKernel::tabulated(1.0, wendland_table(2.0, 400)).unwrap(),
        ]
    }

    /// `D = −φ''` for the Wendland function `φ(r) = (1−r)⁴(4r+1)` scaled to
    /// support `l`: positive definite, integrates to zero, `f(∞) = 2`.
    pub(crate) fn wendland_table(l: f64, n: usize) -> LagTable {
        LagTable::from_fn(l, n, |u| {
            let r = u / l;
            20.0 * (1.0 - r).powi(2) * (1.0 - 4.0 * r) / (l * l)
        })
        .unwrap()
    }

    #[test]
    fn eval_examples() {
        let g = CorrelationKernel::gaussian(1.0, 1.0).unwrap();
        assert_relative_eq!(g.eval(0.3, 0.3).unwrap(), 0.398_942_280_401_432_7, max_relative = 1e-15);
        let e = CorrelationKernel::exponential(1.0, 2.0).unwrap();
        assert_relative_eq!(e.eval(0.0, 2.0).unwrap(), 0.25 * (-1f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(e.eval(0.0, 2.0).unwrap(), 0.091_969_860_292_860_58, max_relative = 1e-12);
    }

    #[test]
    fn eval_errors() {
        let w = CorrelationKernel::white(1.0).unwrap();
        assert_eq!(w.eval(0.0, 0.0), Err(Error::UnsupportedPointwiseEval));
        let t = CorrelationKernel::tabulated(1.0, wendland_table(1.0, 10)).unwrap();
        assert!(matches!(t.eval(0.0, 1.5), Err(Error::OutOfRange { .. })));
        assert!(t.eval(0.0, -0.5).is_ok());
    }

    #[test]
    fn symmetric_on_grid() {
        for k in shipped() {
            for i in 0..50 {
                for j in 0..50 {
                    let (a, b) = (i as f64 * 0.037 - 0.4, j as f64 * 0.029 + 0.1);
                    assert_eq!(k.eval(a, b).unwrap(), k.eval(b, a).unwrap());
                }
            }
        }
    }

    #[test]
    fn cumulative_examples() {
        let g = CorrelationKernel::gaussian(1.0, 0.3).unwrap();
        assert_eq!(g.cumulative(5.0, f64::NEG_INFINITY).unwrap(), 0.5);
        let e = CorrelationKernel::exponential(1.0, 1.7).unwrap();
        let v = e.cumulative(1.7 + 0.25, 0.25).unwrap();
        // adaptive quadrature oracle
        let oracle = crate::quad::adaptive_simpson(|s| exponential_d(1.95 - s, 1.7), 0.25, 1.95, 1e-14);
        assert_relative_eq!(v, oracle, max_relative = 1e-10);
        assert_relative_eq!(v, 0.316_060_279_414_278_8, max_relative = 1e-12);
        for k in shipped() {
            assert_eq!(k.cumulative(2.0, 2.0).unwrap(), 0.0);
        }
        let w = CorrelationKernel::white(2.0).unwrap();
        assert_eq!(w.cumulative(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(w.cumulative(3.0, 1.0).unwrap(), 0.5);
        assert!(matches!(e.cumulative(0.0, 1.0), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn double_integral_examples() {
        let w = CorrelationKernel::white(1.0).unwrap();
        assert_eq!(w.double_integral(3.5, 0.0).unwrap(), 3.5);
        let e = CorrelationKernel::exponential(1.0, 1.0).unwrap();
        let v = e.double_integral(1.0, 0.0).unwrap();
        assert_relative_eq!(v, (-1f64).exp(), max_relative = 1e-14);
        // 2-D trapezoid oracle at step 1e-3
        let n = 1000;
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            for j in 0..=n {
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                s += wi * wj * exponential_d((i as f64 - j as f64) * h, 1.0);
            }
        }
        assert!((s * h * h - v).abs() < 1e-5);
        for k in shipped() {
            assert_eq!(k.double_integral(0.7, 0.7).unwrap(), 0.0);
        }
        assert!(e.double_integral(1.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn derivative_of_f_is_twice_g() {
        for k in shipped() {
            for &t in &[0.05, 0.4, 1.3, 3.0] {
                let h = 1e-4;
                let fd = (k.double_integral(t + h, 0.0).unwrap() - k.double_integral(t - h, 0.0).unwrap()) / (2.0 * h);
                let g2 = 2.0 * k.cumulative(t, 0.0).unwrap();
                assert!(((fd - g2) / g2).abs() < 1e-6, "{:?} t={t}: {fd} vs {g2}", k.family());
            }
        }
    }

    #[test]
    fn exponential_approaches_white() {
        let t = 2.0;
        let e = CorrelationKernel::exponential(1.0, 1e-3 * t).unwrap();
        let f = e.double_integral(t, 0.0).unwrap();
        assert!(((f - t) / t).abs() < 2e-3);
    }

    #[test]
    fn small_span_series_is_continuous() {
        for k in [CorrelationKernel::gaussian(1.0, 1.0).unwrap(), CorrelationKernel::exponential(1.0, 1.0).unwrap()] {
            let below = k.double_integral(0.999_999e-3, 0.0).unwrap();
            let above = k.double_integral(1.000_001e-3, 0.0).unwrap();
            assert!(((above - below) / below).abs() < 1e-5);
        }
    }

    #[test]
    fn normalization_integrates_to_one() {
        let g = CorrelationKernel::gaussian(1.0, 0.8).unwrap();
        let v = gauss_legendre(|s| g.eval(0.0, s).unwrap(), -12.0 * 0.8, 12.0 * 0.8, 200);
        assert!((v - 1.0).abs() < 1e-8);
        // The exponential tail beyond ±12τ carries e^{-12} ≈ 6e-6 of the mass,
        // so the window is widened to ±30τ to resolve 1e-8.
        let e = CorrelationKernel::exponential(1.0, 0.8).unwrap();
        let v = gauss_legendre(|s| e.eval(0.0, s).unwrap(), -30.0 * 0.8, 0.0, 400)
            + gauss_legendre(|s| e.eval(0.0, s).unwrap(), 0.0, 30.0 * 0.8, 400);
        assert!((v - 1.0).abs() < 1e-8);
    }

    #[test]
    fn divergence_examples() {
        let w = CorrelationKernel::white(1.0).unwrap().divergence_check(100.0, 0.0).unwrap();
        assert!(w.diverges);
        assert_relative_eq!(w.last_slope, 1.0, max_relative = 1e-12);
        let e = CorrelationKernel::exponential(1.0, 1.0).unwrap().divergence_check(200.0, 0.0).unwrap();
        assert!(e.diverges);
        assert_relative_eq!(e.last_slope, 1.0, max_relative = 1e-9);
        // Linear interpolation leaves ∫D ≈ h²/12·(D'(L) − D'(0)) ≠ 0, a genuine slow
        // drift of f; 20000 rows push it below the slope threshold.
        let t = CorrelationKernel::tabulated(1.0, wendland_table(1.0, 20_000)).unwrap();
        let r = t.divergence_check(50.0, 0.0).unwrap();
        assert!(r.nondecreasing);
        assert!(!r.diverges);
        // bounded: f(∞) = 2φ(0) = 2 for the continuous kernel
        assert!((r.f_values.last().unwrap() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn wendland_f_matches_2d_quadrature() {
        let t = CorrelationKernel::tabulated(1.0, wendland_table(1.0, 2000)).unwrap();
        let horizon = 1.5;
        // symmetric integrand: twice the triangle b < a, free of the diagonal kink
        let oracle =
            2.0 * gauss_legendre(|a| gauss_legendre(|b| t.lag_value(a - b).unwrap(), 0.0, a, 400), 0.0, horizon, 400);
        assert!((t.double_integral(horizon, 0.0).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn table_parsing() {
        let csv = "lag,D\n0,1.0\n0.5,0.5\n1.0,0.0\n";
        let t = LagTable::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(t.eval(0.25).unwrap(), 0.75);
        assert!(LagTable::from_csv_reader("0.1,1\n0.2,1\n".as_bytes()).is_err());
        assert!(LagTable::from_csv_reader("0,1\n0.2,1\n0.2,1\n".as_bytes()).is_err());
        assert!(LagTable::from_csv_reader("0,1\n0.2,x\n".as_bytes()).is_err());
    }
}
