//! The isotropic Gaussian on SO(3), i.e. the heat kernel of rotational
//! Brownian motion under the metric `½ tr(AᵀB)`.
//!
//! As a class function of the rotation angle `ω`, the density with respect to
//! Haar measure is the character series
//!
//! ```text
//! f(ω) = Σ_l (2l+1) exp(-l(l+1)σ²/2) sin((l+½)ω) / sin(ω/2).
//! ```
//!
//! For small `σ²` the series converges slowly. Poisson summation turns it into
//! the exact wrapped form
//!
//! ```text
//! f(ω) = e^{σ²/8} √(2π) / σ³ · Σ_n (-1)ⁿ (ω - 2πn) exp(-(ω - 2πn)²/2σ²) / sin(ω/2),
//! ```
//!
//! which needs only a handful of windings when `σ < 1`. Both are evaluated in
//! closed form together with the first two derivatives of `log f`.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::so3::{log_map, sample_unit_vector, Rotation, TangentVector};

/// Below this variance the wrapped form is used instead of the character series.
pub const WRAPPED_CROSSOVER: f64 = 1.0;
pub const DEFAULT_GRID_SIZE: usize = 2048;
pub const MIN_GRID_SIZE: usize = 64;
pub const MAX_L: usize = 2000;

/// Windings `n ∈ [-WINDINGS, WINDINGS]` kept in the wrapped form.
const WINDINGS: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IgSo3Params {
    pub sigma2: f64,
    pub l_max: usize,
    pub grid_size: usize,
}

impl IgSo3Params {
    /// Parameters with the adaptive truncation and the default sampling grid.
    pub fn new(sigma2: f64) -> Result<Self> {
        Self::with(sigma2, default_l_max(sigma2), DEFAULT_GRID_SIZE)
    }

    pub fn with(sigma2: f64, l_max: usize, grid_size: usize) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain {
                name: "sigma2",
                value: sigma2,
                domain: "(0, ∞)",
            });
        }
        if l_max < 1 {
            return Err(Error::invalid("l_max", "must be at least 1"));
        }
        if grid_size < MIN_GRID_SIZE {
            return Err(Error::invalid("grid_size", format!("must be at least {MIN_GRID_SIZE}")));
        }
        Ok(IgSo3Params {
            sigma2,
            l_max,
            grid_size,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    fn uses_wrapped_form(&self) -> bool {
        self.sigma2 < WRAPPED_CROSSOVER
    }
}

/// `max(5, ⌈10/σ⌉)` capped at [`MAX_L`]; the dropped tail is below `e^{-50}`.
pub fn default_l_max(sigma2: f64) -> usize {
    let l = (10.0 / sigma2.sqrt()).ceil();
    if l.is_finite() {
        (l as usize).clamp(5, MAX_L)
    } else {
        MAX_L
    }
}

/// `log f(ω)` and its first two derivatives in `ω`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Character series, summed as `C_0 + 2 Σ_m C_m cos(mω)` with suffix sums
/// `C_m = Σ_{l≥m} (2l+1) e^{-l(l+1)σ²/2}`.
pub fn series_log_density(omega: f64, p: &IgSo3Params) -> LogDensity {
    let half = 0.5 * p.sigma2;
    let coeffs: Vec<f64> = (0..=p.l_max)
        .map(|l| {
            let l = l as f64;
            (2.0 * l + 1.0) * (-l * (l + 1.0) * half).exp()
        })
        .collect();
    let mut suffix = vec![0.0; coeffs.len() + 1];
    for m in (0..coeffs.len()).rev() {
        suffix[m] = suffix[m + 1] + coeffs[m];
    }
    let mut f = suffix[0];
    let mut f1 = 0.0;
    let mut f2 = 0.0;
    for (m, &c) in suffix.iter().enumerate().take(coeffs.len()).skip(1) {
        let mf = m as f64;
        let (s, co) = (mf * omega).sin_cos();
        f += 2.0 * c * co;
        f1 -= 2.0 * mf * c * s;
        f2 -= 2.0 * mf * mf * c * co;
    }
    let d1 = f1 / f;
    LogDensity {
        value: f.ln(),
        d1,
        d2: f2 / f - d1 * d1,
    }
}

/// Exact wrapped form; accurate for `σ² < WRAPPED_CROSSOVER`.
pub fn wrapped_log_density(omega: f64, sigma2: f64) -> LogDensity {
    let sigma = sigma2.sqrt();
    let log_k = sigma2 / 8.0 + 0.5 * (2.0 * PI).ln() - 3.0 * sigma.ln();

    // Near ω = 0 the 1/ω singularities of g'/g and cot(ω/2) cancel; use the
    // quadratic expansion log f ≈ log f(0) + ½κω² instead.
    if omega <= 1e-4 * sigma {
        let (mut g1, mut g3) = (0.0, 0.0);
        for n in -WINDINGS..=WINDINGS {
            let u = 2.0 * PI * n as f64;
            let u2 = u * u;
            let e = (-u2 / (2.0 * sigma2)).exp();
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            g1 += sign * (1.0 - u2 / sigma2) * e;
            g3 += sign * (-3.0 / sigma2 + 6.0 * u2 / (sigma2 * sigma2) - u2 * u2 / (sigma2 * sigma2 * sigma2)) * e / 6.0;
        }
        let kappa = 2.0 * (g3 / g1 + 1.0 / 24.0);
        return LogDensity {
            value: log_k + (2.0 * g1).ln() + 0.5 * kappa * omega * omega,
            d1: kappa * omega,
            d2: kappa,
        };
    }

    // Terms are scaled by exp(-ω²/2σ²) so the leading winding has weight one.
    let (mut g, mut g1, mut g2) = (0.0, 0.0, 0.0);
    for n in -WINDINGS..=WINDINGS {
        let u = omega - 2.0 * PI * n as f64;
        let r = (-(u * u - omega * omega) / (2.0 * sigma2)).exp();
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        g += sign * u * r;
        g1 += sign * (1.0 - u * u / sigma2) * r;
        g2 += sign * (u * u * u / (sigma2 * sigma2) - 3.0 * u / sigma2) * r;
    }
    let half = 0.5 * omega;
    let (sh, ch) = half.sin_cos();
    let ratio = g1 / g;
    LogDensity {
        value: log_k - omega * omega / (2.0 * sigma2) + g.ln() - sh.ln(),
        d1: ratio - 0.5 * ch / sh,
        d2: g2 / g - ratio * ratio + 0.25 / (sh * sh),
    }
}

/// Log-density and derivatives, choosing the representation by `σ²`.
/// `ω` is taken to lie in `[0, π]`.
pub fn log_density(omega: f64, p: &IgSo3Params) -> LogDensity {
    if p.uses_wrapped_form() {
        wrapped_log_density(omega, p.sigma2)
    } else {
        series_log_density(omega, p)
    }
}

fn check_angle(omega: f64) -> Result<()> {
    if (0.0..=PI).contains(&omega) {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "omega",
            value: omega,
            domain: "[0, π]",
        })
    }
}

/// Density of the rotation angle class function with respect to Haar measure.
pub fn angle_density(omega: f64, p: &IgSo3Params) -> Result<f64> {
    check_angle(omega)?;
    Ok(log_density(omega, p).value.exp())
}

/// Density of the rotation angle itself on `[0, π]`: `f(ω)(1 - cos ω)/π`.
pub fn angle_marginal(omega: f64, p: &IgSo3Params) -> Result<f64> {
    Ok(angle_density(omega, p)? * (1.0 - omega.cos()) / PI)
}

/// Riemannian score of `f(ω(Q))` at `Q = exp(w)`, in body coordinates:
/// `(d/dω log f) · w/ω`, which tends to `κ·w` as `ω → 0`.
pub fn score_from_relative(w: &TangentVector, p: &IgSo3Params) -> TangentVector {
    let omega = w.norm();
    let ld = log_density(omega, p);
    let psi = if omega > 0.0 { ld.d1 / omega } else { ld.d2 };
    *w * psi
}

/// Jacobian of [`score_from_relative`] with respect to `w`.
pub fn score_jacobian_from_relative(w: &TangentVector, p: &IgSo3Params) -> Matrix3<f64> {
    let omega = w.norm();
    let ld = log_density(omega, p);
    if omega == 0.0 {
        return Matrix3::identity() * ld.d2;
    }
    let psi = ld.d1 / omega;
    let radial = (ld.d2 - psi) / (omega * omega);
    Matrix3::identity() * psi + w.0 * w.0.transpose() * radial
}

/// Score of `p_IGSO(3)(R0ᵀ Rt; σ²)` with respect to `Rt`, in the body frame at `Rt`.
pub fn score(r0: &Rotation, rt: &Rotation, p: &IgSo3Params) -> TangentVector {
    let w = log_map(&(r0.transpose() * *rt));
    score_from_relative(&w, p)
}

/// Inverse-CDF sampler over a precomputed angle grid.
#[derive(Clone, Debug)]
pub struct IgSo3Sampler {
    params: IgSo3Params,
    omega_max: f64,
    cdf: Vec<f64>,
}

impl IgSo3Sampler {
    pub fn new(params: IgSo3Params) -> Self {
        // Past 16σ the angle marginal is below e^{-128}; clip the grid there
        // so tightly concentrated kernels keep their resolution.
        let omega_max = (16.0 * params.sigma()).min(PI);
        let n = params.grid_size;
        let step = omega_max / (n - 1) as f64;
        let marginal: Vec<f64> = (0..n)
            .map(|i| {
                let w = i as f64 * step;
                log_density(w, &params).value.exp() * (1.0 - w.cos()) / PI
            })
            .collect();
        let mut cdf = Vec::with_capacity(n);
        cdf.push(0.0);
        for i in 1..n {
            let prev = cdf[i - 1];
            cdf.push(prev + 0.5 * step * (marginal[i - 1] + marginal[i]));
        }
        let total = cdf[n - 1];
        for c in &mut cdf {
            *c /= total;
        }
        IgSo3Sampler {
            params,
            omega_max,
            cdf,
        }
    }

    pub fn params(&self) -> &IgSo3Params {
        &self.params
    }

    pub fn sample_angle<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1);
        let (lo, hi) = (self.cdf[idx - 1], self.cdf[idx]);
        let step = self.omega_max / (self.cdf.len() - 1) as f64;
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.0 };
        ((idx - 1) as f64 + frac) * step
    }

    /// `R0·exp(ω·axis)` with `ω` from the angle marginal and a uniform axis.
    pub fn sample<R: Rng + ?Sized>(&self, r0: &Rotation, rng: &mut R) -> Rotation {
        let omega = self.sample_angle(rng);
        let axis = sample_unit_vector(rng);
        r0.retract(&TangentVector(axis * omega))
    }
}

/// One-off draw; builds the inverse-CDF table for `p`.
pub fn sample<R: Rng + ?Sized>(r0: &Rotation, p: &IgSo3Params, rng: &mut R) -> Rotation {
    IgSo3Sampler::new(*p).sample(r0, rng)
}
