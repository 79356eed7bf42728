//! Centre-of-mass decoherence of a rigid body under a space–time factorized
//! noise kernel, in CGS units (cm, s).
//!
//! The noise correlation factorizes as `g(x − y) h(t − s)` with
//! `g(r) = γ(α/4π)^{3/2} e^{−αr²/4}` and `h(u) = (β/4π)^{1/2} e^{−βu²/4}`.
//! For a rigid body the coherence `⟨Q′|ρ|Q″⟩` decays at the rate
//! `Γ = γ(t)(α/4π)^{3/2} Σ_{ij}[e^{−α(q_i−q_j)²/4} − e^{−α(ΔQ+q_i−q_j)²/4}]`
//! with `γ(t) = γ erf(√β (t − t₀)/2)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quad::{gauss_legendre, CompensatedSum};

pub type Vec3 = [f64; 3];

pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e10;
pub const DEFAULT_ALPHA: f64 = 1e10;
pub const DEFAULT_LAMBDA: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroParams {
    /// Localization parameter, cm⁻².
    pub alpha: f64,
    /// Localization rate, s⁻¹.
    pub lambda: f64,
    /// Inverse squared correlation time, s⁻².
    pub beta: f64,
    /// Noise switch-on time, s.
    pub t0: f64,
}

impl Default for MacroParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            beta: SPEED_OF_LIGHT * SPEED_OF_LIGHT * DEFAULT_ALPHA,
            t0: 0.0,
        }
    }
}

impl MacroParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive and finite")));
            }
        }
        if !self.t0.is_finite() {
            return Err(invalid("t0 must be finite"));
        }
        Ok(())
    }

    /// `γ = λ(4π/α)^{3/2}`.
    pub fn gamma(&self) -> f64 {
        self.lambda * (4.0 * PI / self.alpha).powf(1.5)
    }

    /// `γ(α/4π)^{3/2}`, which is `λ` identically.
    pub fn coupling(&self) -> f64 {
        self.lambda
    }
}

/// Spatial and temporal factors of the kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorizedKernel {
    params: MacroParams,
}

impl FactorizedKernel {
    pub fn space(&self, r: Vec3) -> f64 {
        let p = &self.params;
        p.gamma() * (p.alpha / (4.0 * PI)).powf(1.5) * (-p.alpha * norm2(r) / 4.0).exp()
    }

    pub fn time(&self, u: f64) -> f64 {
        let b = self.params.beta;
        (b / (4.0 * PI)).sqrt() * (-b * u * u / 4.0).exp()
    }
}

pub fn kernel_factorized(params: &MacroParams) -> Result<FactorizedKernel> {
    params.validate()?;
    Ok(FactorizedKernel { params: *params })
}

/// `γ(t) = 2γ ∫_{t₀}^{t} h(t − s) ds = γ erf(√β (t − t₀)/2)`.
pub fn gamma_of_t(params: &MacroParams, t: f64) -> Result<f64> {
    Ok(params.gamma() * switch_on(params, t)?)
}

/// `erf(√β (t − t₀)/2)`.
fn switch_on(params: &MacroParams, t: f64) -> Result<f64> {
    if t < params.t0 {
        return Err(Error::InvalidInterval { t, t0: params.t0 });
    }
    Ok(libm::erf(params.beta.sqrt() * (t - params.t0) / 2.0))
}

fn norm2(v: Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Equilibrium offsets of the constituents from the centre of mass, cm.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroBody {
    offsets: Vec<Vec3>,
}

impl MacroBody {
    pub fn new(offsets: Vec<Vec3>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(invalid("a body needs at least one constituent"));
        }
        if offsets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("constituent offsets must be finite"));
        }
        Ok(Self { offsets })
    }

    /// The first `n` sites of a simple cubic lattice with the given spacing.
    pub fn cubic_lattice(n: usize, spacing: f64) -> Result<Self> {
        let side = (1..).find(|s: &usize| s * s * s >= n).unwrap_or(1);
        let offsets = (0..n)
            .map(|k| {
                let (i, j, l) = (k % side, (k / side) % side, k / (side * side));
                [i as f64 * spacing, j as f64 * spacing, l as f64 * spacing]
            })
            .collect();
        Self::new(offsets)
    }

    /// Reads `i,qx,qy,qz` rows; a non-numeric first row is a header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut offsets = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 4 {
                return Err(invalid(format!("row {row}: expected 4 columns, got {}", rec.len())));
            }
            let parsed: std::result::Result<Vec<f64>, _> = (1..4).map(|c| rec[c].parse::<f64>()).collect();
            match parsed {
                Ok(q) => offsets.push([q[0], q[1], q[2]]),
                Err(_) if row == 0 => continue,
                Err(_) => return Err(invalid(format!("row {row}: unparseable coordinate"))),
            }
        }
        Self::new(offsets)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path.as_ref())?)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }
}

/// `F(Q − x) = (α/2π)^{3/2} Σ_i exp(−α|Q + q_i − x|²/2)`.
pub fn smeared_density(body: &MacroBody, q: Vec3, x: Vec3, params: &MacroParams) -> f64 {
    let a = params.alpha;
    (a / (2.0 * PI)).powf(1.5) * body.offsets.iter().map(|o| (-a / 2.0 * norm2(sub(add(q, *o), x))).exp()).sum::<f64>()
}

/// `Σ_{ij}[e^{−α(q_i−q_j)²/4} − e^{−α(ΔQ+q_i−q_j)²/4}]`.
fn pair_bracket(body: &MacroBody, dq: Vec3, alpha: f64) -> f64 {
    let mut s = CompensatedSum::new();
    for qi in &body.offsets {
        for qj in &body.offsets {
            let d = sub(*qi, *qj);
            s.add((-alpha / 4.0 * norm2(d)).exp() - (-alpha / 4.0 * norm2(add(dq, d))).exp());
        }
    }
    s.value()
}

/// Closed-form `Γ(Q′, Q″, t)`, s⁻¹.
pub fn macro_damping_rate(body: &MacroBody, q1: Vec3, q2: Vec3, t: f64, params: &MacroParams) -> Result<f64> {
    params.validate()?;
    Ok(params.coupling() * switch_on(params, t)? * pair_bracket(body, sub(q1, q2), params.alpha))
}

/// `γ(t) ∫ ½(F′ − F″)² d³x` by a uniform 3-D trapezoid with spacing
/// `h_scale/√α` over a box reaching `8/√α` beyond every Gaussian centre.
pub fn damping_rate_quadrature(
    body: &MacroBody,
    q1: Vec3,
    q2: Vec3,
    t: f64,
    params: &MacroParams,
    h_scale: f64,
) -> Result<f64> {
    params.validate()?;
    let s = params.alpha.sqrt();
    let h = h_scale / s;
    let centres: Vec<Vec3> = body.offsets.iter().flat_map(|o| [add(q1, *o), add(q2, *o)]).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &centres {
        for d in 0..3 {
            lo[d] = lo[d].min(c[d] - 8.0 / s);
            hi[d] = hi[d].max(c[d] + 8.0 / s);
        }
    }
    let counts: Vec<usize> = (0..3).map(|d| ((hi[d] - lo[d]) / h).ceil() as usize + 1).collect();
    let mut total = CompensatedSum::new();
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let x = [lo[0] + i as f64 * h, lo[1] + j as f64 * h, lo[2] + k as f64 * h];
                let d = smeared_density(body, q1, x, params) - smeared_density(body, q2, x, params);
                total.add(0.5 * d * d);
            }
        }
    }
    Ok(gamma_of_t(params, t)? * total.value() * h * h * h)
}

/// `exp(−∫_{t₀}^{t} Γ(Q′, Q″, u) du)` at each of `times`, integrating the
/// switch-on profile by Gauss–Legendre split at `t₀ + 12/√β`.
pub fn com_offdiag_decay(
    body: &MacroBody,
    q1: Vec3,
    q2: Vec3,
    times: &[f64],
    params: &MacroParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let rate = params.coupling() * pair_bracket(body, sub(q1, q2), params.alpha);
    let knee = params.t0 + 12.0 / params.beta.sqrt();
    times
        .iter()
        .map(|&t| {
            if t < params.t0 {
                return Err(Error::InvalidInterval { t, t0: params.t0 });
            }
            if rate == 0.0 {
                return Ok(1.0);
            }
            let erf_at = |u: f64| libm::erf(params.beta.sqrt() * (u - params.t0) / 2.0);
            let mut integral = gauss_legendre(erf_at, params.t0, t.min(knee), 32);
            if t > knee {
                integral += gauss_legendre(erf_at, knee, t, 4);
            }
            Ok((-rate * integral).exp())
        })
        .collect()
}

/// `λN`: the rate for `N` separated constituents once `γ(t) = γ` and
/// `|ΔQ| ≫ 1/√α`.
pub fn saturated_rate(params: &MacroParams, constituents: f64) -> f64 {
    params.coupling() * constituents
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub separation: f64,
    pub t: f64,
    pub gamma: f64,
    pub decay_factor: f64,
}

pub const RATES_HEADER: &str = "|ΔQ|,t,Gamma,decay_factor";

pub fn write_rates_csv<W: Write>(rows: &[RateRow], out: &mut W) -> Result<()> {
    writeln!(out, "{RATES_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.separation, r.t, r.gamma, r.decay_factor)?;
    }
    Ok(())
}

/// Rate table along the x axis: one row per `(|ΔQ|, t)`.
pub fn rate_table(body: &MacroBody, separations: &[f64], times: &[f64], params: &MacroParams) -> Result<Vec<RateRow>> {
    let mut rows = Vec::with_capacity(separations.len() * times.len());
    for &d in separations {
        let q2 = [d, 0.0, 0.0];
        let decay = com_offdiag_decay(body, [0.0; 3], q2, times, params)?;
        for (&t, f) in times.iter().zip(decay) {
            rows.push(RateRow {
                separation: d,
                t,
                gamma: macro_damping_rate(body, [0.0; 3], q2, t, params)?,
                decay_factor: f,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn unit() -> f64 {
        1.0 / DEFAULT_ALPHA.sqrt()
    }

    #[test]
    fn defaults_and_unit_bridge() {
        let p = MacroParams::default();
        assert_relative_eq!(p.beta, 8.987_551_787_368_176e30, max_relative = 1e-15);
        let bridged = p.gamma() * (p.alpha / (4.0 * PI)).powf(1.5);
        assert!((bridged - p.lambda).abs() <= 4.0 * f64::EPSILON * p.lambda);
        assert_eq!(p.coupling(), p.lambda);
        let mut bad = p;
        bad.alpha = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kernel_factors() {
        let p = MacroParams::default();
        let k = kernel_factorized(&p).unwrap();
        assert_relative_eq!(k.space([0.0; 3]), p.gamma() * (p.alpha / (4.0 * PI)).powf(1.5), max_relative = 1e-15);
        let r = [1e-5, -2e-5, 3e-6];
        assert_eq!(k.space(r), k.space([-r[0], -r[1], -r[2]]));
        let w = 12.0 / p.beta.sqrt();
        let mass = gauss_legendre(|u| k.time(u), -w, w, 64);
        assert!((mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn switch_on_profile() {
        let p = MacroParams::default();
        assert_eq!(gamma_of_t(&p, 0.0).unwrap(), 0.0);
        assert_relative_eq!(gamma_of_t(&p, 1.0).unwrap(), p.gamma(), max_relative = 1e-15);
        assert!((gamma_of_t(&p, 1e-14).unwrap() / p.gamma() - 1.0).abs() < 1e-10);
        assert!(matches!(gamma_of_t(&p, -1.0), Err(Error::InvalidInterval { .. })));
        // 2γ∫h over the switch-on window reproduces γ(t)
        let k = kernel_factorized(&p).unwrap();
        let t = 2.0 / p.beta.sqrt();
        let direct = 2.0 * p.gamma() * gauss_legendre(|s| k.time(t - s), 0.0, t, 32);
        assert_relative_eq!(direct, gamma_of_t(&p, t).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn smeared_density_properties() {
        let p = MacroParams::default();
        let u = unit();
        let body = MacroBody::new(vec![[0.5 * u, 0.0, -u]]).unwrap();
        let q = [u, 2.0 * u, 0.0];
        let peak = smeared_density(&body, q, add(q, body.offsets()[0]), &p);
        assert_relative_eq!(peak, (p.alpha / (2.0 * PI)).powf(1.5), max_relative = 1e-15);
        let a = [3.0 * u, -u, 0.25 * u];
        let x = [0.3 * u, 0.1 * u, -0.7 * u];
        assert_relative_eq!(
            smeared_density(&body, add(q, a), add(x, a), &p),
            smeared_density(&body, q, x, &p),
            max_relative = 1e-12
        );
        // ∫F d³x = N over a ±8/√α box around each centre
        let two = MacroBody::new(vec![[0.0; 3], [20.0 * u, 0.0, 0.0]]).unwrap();
        let h = 0.35 * u;
        let n = (8.0 / 0.35f64).ceil() as i64;
        let mut total = 0.0;
        for c in two.offsets() {
            for i in -n..=n {
                for j in -n..=n {
                    for k in -n..=n {
                        let xv = [c[0] + i as f64 * h, c[1] + j as f64 * h, c[2] + k as f64 * h];
                        total += smeared_density(&MacroBody::new(vec![*c]).unwrap(), [0.0; 3], xv, &p);
                    }
                }
            }
        }
        assert_relative_eq!(total * h * h * h, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn rate_limits() {
        let p = MacroParams::default();
        let u = unit();
        let one = MacroBody::new(vec![[0.0; 3]]).unwrap();
        assert_eq!(macro_damping_rate(&one, [u, 0.0, 0.0], [u, 0.0, 0.0], 1.0, &p).unwrap(), 0.0);
        let far = macro_damping_rate(&one, [0.0; 3], [10.0 * u, 0.0, 0.0], 1.0, &p).unwrap();
        assert_relative_eq!(far, p.gamma() * (p.alpha / (4.0 * PI)).powf(1.5), max_relative = 1e-10);
        let quad = damping_rate_quadrature(&one, [0.0; 3], [10.0 * u, 0.0, 0.0], 1.0, &p, 0.35).unwrap();
        assert_relative_eq!(quad, far, max_relative = 1e-6);
    }

    #[test]
    fn rate_is_linear_in_constituents() {
        let p = MacroParams::default();
        let u = unit();
        let dq = [1000.0 * u, 0.0, 0.0];
        let single = macro_damping_rate(&MacroBody::new(vec![[0.0; 3]]).unwrap(), [0.0; 3], dq, 1.0, &p).unwrap();
        for n in [1, 10, 100] {
            let body = MacroBody::cubic_lattice(n, 10.0 * u).unwrap();
            let rate = macro_damping_rate(&body, [0.0; 3], dq, 1.0, &p).unwrap();
            assert_relative_eq!(rate, n as f64 * single, max_relative = 1e-6);
        }
    }

    #[test]
    fn closed_form_matches_quadrature() {
        let p = MacroParams::default();
        let u = unit();
        let cases: [(Vec<Vec3>, Vec3); 5] = [
            (vec![[0.0; 3]], [0.7 * u, 0.0, 0.0]),
            (vec![[0.0; 3]], [1.5 * u, -0.5 * u, 2.0 * u]),
            (vec![[0.0; 3], [u, 0.0, 0.0]], [0.5 * u, 0.5 * u, 0.0]),
            (vec![[0.0; 3], [0.0, 2.0 * u, 0.0]], [3.0 * u, 0.0, 0.0]),
            (vec![[0.0; 3], [u, 0.0, 0.0], [0.0, 0.0, 1.5 * u]], [0.0, 1.2 * u, 0.4 * u]),
        ];
        for (offsets, dq) in cases {
            let body = MacroBody::new(offsets).unwrap();
            let closed = macro_damping_rate(&body, [0.0; 3], dq, 1.0, &p).unwrap();
            let quad = damping_rate_quadrature(&body, [0.0; 3], dq, 1.0, &p, 0.35).unwrap();
            assert_relative_eq!(quad, closed, max_relative = 1e-6);
        }
    }

    #[test]
    fn symmetry_and_positivity() {
        let p = MacroParams::default();
        let u = unit();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut v =
            || [rng.random_range(-3.0..3.0) * u, rng.random_range(-3.0..3.0) * u, rng.random_range(-3.0..3.0) * u];
        for _ in 0..1000 {
            let body = MacroBody::new((0..3).map(|_| v()).collect()).unwrap();
            let (a, b) = (v(), v());
            let g1 = macro_damping_rate(&body, a, b, 1.0, &p).unwrap();
            let g2 = macro_damping_rate(&body, b, a, 1.0, &p).unwrap();
            assert!((g1 - g2).abs() <= 1e-12 * g1.abs().max(p.lambda));
            assert!(g1 >= -1e-12 * p.lambda * 9.0);
        }
    }

    #[test]
    fn monotone_along_a_ray() {
        let p = MacroParams::default();
        let one = MacroBody::new(vec![[0.0; 3]]).unwrap();
        let dir = [0.6, 0.0, 0.8];
        let mut last = -1.0;
        for k in 0..200 {
            let d = k as f64 * 0.05 * unit();
            let g = macro_damping_rate(&one, [0.0; 3], [d * dir[0], d * dir[1], d * dir[2]], 1.0, &p).unwrap();
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn decay_factor() {
        let p = MacroParams::default();
        let u = unit();
        let body = MacroBody::cubic_lattice(8, 10.0 * u).unwrap();
        let q2 = [1000.0 * u, 0.0, 0.0];
        assert_eq!(com_offdiag_decay(&body, q2, q2, &[0.0, 1.0, 1e6], &p).unwrap(), vec![1.0; 3]);
        // closed form: ∫₀ᵀ erf(√β s/2) ds = T erf(√βT/2) − (2/√(πβ))(1 − e^{−βT²/4})
        let rate = macro_damping_rate(&body, [0.0; 3], q2, 1.0, &p).unwrap();
        for t in [1e-16, 1e-15, 1e-13, 1e3, 1e6] {
            let sb = p.beta.sqrt();
            let integral =
                t * libm::erf(sb * t / 2.0) - 2.0 / (PI.sqrt() * sb) * (-(p.beta * t * t / 4.0)).exp_m1().abs();
            let got = com_offdiag_decay(&body, [0.0; 3], q2, &[t], &p).unwrap()[0];
            assert_relative_eq!(got.ln(), -rate * integral, max_relative = 1e-10);
        }
        // late-time decay rate is the saturated CSL rate λN
        let late = com_offdiag_decay(&body, [0.0; 3], q2, &[1e6, 2e6], &p).unwrap();
        assert_relative_eq!((late[0].ln() - late[1].ln()) / 1e6, saturated_rate(&p, 8.0), max_relative = 1e-9);
    }

    #[test]
    fn body_csv() {
        let b = MacroBody::from_csv_reader("i,qx,qy,qz\n0,0,0,0\n1,1e-5,0,0\n".as_bytes()).unwrap();
        assert_eq!(b.len(), 2);
        assert!(MacroBody::from_csv_reader("i,qx,qy,qz\n".as_bytes()).is_err());
        assert!(MacroBody::from_csv_reader("0,1,2\n".as_bytes()).is_err());
    }
}
