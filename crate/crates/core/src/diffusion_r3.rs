//! Variance-preserving diffusion of coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseScheduleR3 {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_eps: f64,
}

impl Default for NoiseScheduleR3 {
    fn default() -> Self {
        NoiseScheduleR3 {
            beta_min: 0.1,
            beta_max: 20.0,
            t_eps: 1e-3,
        }
    }
}

impl NoiseScheduleR3 {
    pub fn new(beta_min: f64, beta_max: f64, t_eps: f64) -> Result<Self> {
        let s = NoiseScheduleR3 {
            beta_min,
            beta_max,
            t_eps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min && self.beta_max.is_finite()) {
            return Err(Error::invalid("r3 schedule", "need 0 < beta_min < beta_max"));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 0.5) {
            return Err(Error::invalid("r3 schedule", "t_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn beta_bar(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.beta_bar(t)).exp()
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        -(-self.beta_bar(t)).exp_m1()
    }

    /// `(α(t), σ²(t))`.
    pub fn kernel_params(&self, t: f64) -> (f64, f64) {
        (self.alpha(t), self.sigma2(t))
    }

    /// `dσ²/dt = β α²`.
    pub fn d_sigma2_dt(&self, t: f64) -> f64 {
        self.beta(t) * (-self.beta_bar(t)).exp()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            name: "t",
            value: t,
            domain: "[0, 1]",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// `x_t = α x0 + σ z`.
pub fn forward_sample<R: Rng + ?Sized>(
    sched: &NoiseScheduleR3,
    x0: &[f64],
    t: f64,
    rng: &mut R,
) -> Result<CoordState> {
    check_time(t)?;
    let (alpha, sigma2) = sched.kernel_params(t);
    let sigma = sigma2.sqrt();
    let x = if t == 0.0 {
        x0.to_vec()
    } else {
        x0.iter().map(|&v| alpha * v + sigma * normal(rng)).collect()
    };
    Ok(CoordState { x, t })
}

/// Score of the transition kernel, `-(xt - α x0)/σ²`.
pub fn exact_kernel_score(sched: &NoiseScheduleR3, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    let (alpha, sigma2) = sched.kernel_params(t);
    if t == 0.0 || sigma2 <= 0.0 {
        return Err(Error::Domain {
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    if x0.len() != xt.len() {
        return Err(Error::invalid("kernel score", "x0 and xt lengths differ"));
    }
    Ok(xt.iter().zip(x0).map(|(&x, &m)| -(x - alpha * m) / sigma2).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture", "weights, means and covariances must have equal nonzero length"));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("mixture", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture", format!("weights sum to {total}")));
        }
        let d = means[0].len();
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::invalid("mixture", "inconsistent dimensions"));
            }
            if (c - c.transpose()).abs().max() > 1e-12 {
                return Err(Error::invalid("mixture", "covariance not symmetric"));
            }
        }
        Ok(GaussianMixture { weights, means, covs })
    }

    /// Isotropic components `N(μ_k, s² I)`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        let d = means.first().map_or(0, |m| m.len());
        let means: Vec<_> = means.into_iter().map(DVector::from_vec).collect();
        let covs = vec![DMatrix::identity(d, d) * var; means.len()];
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// The mixture pushed through the kernel with coefficients `(α, σ²)`:
    /// each component becomes `N(α μ, α² Σ + σ² I)`.
    pub fn marginal(&self, alpha: f64, sigma2: f64) -> Result<MarginalMixture> {
        let d = self.dim();
        let mut comps = Vec::with_capacity(self.n_components());
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let cov = c * (alpha * alpha) + DMatrix::identity(d, d) * sigma2;
            let chol = Cholesky::new(cov).ok_or_else(|| Error::invalid("mixture", "marginal covariance not positive definite"))?;
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            comps.push(MarginalComponent {
                log_weight: w.ln(),
                mean: m * alpha,
                chol,
                log_norm: -0.5 * (log_det + d as f64 * (2.0 * std::f64::consts::PI).ln()),
            });
        }
        Ok(MarginalMixture { comps })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.n_components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (k, self.sample_component(k, rng))
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z = DVector::from_fn(d, |_, _| normal(rng));
        // Semidefinite covariances (including Σ = 0) are allowed; use the
        // symmetric eigendecomposition as the square root.
        let eig = self.covs[k].clone().symmetric_eigen();
        let scale = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let x = &self.means[k] + &eig.eigenvectors * scale.component_mul(&(eig.eigenvectors.transpose() * z));
        x.iter().copied().collect()
    }
}

#[derive(Clone, Debug)]
struct MarginalComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

/// A Gaussian mixture at a fixed diffusion time, with factorized covariances.
#[derive(Clone, Debug)]
pub struct MarginalMixture {
    comps: Vec<MarginalComponent>,
}

impl MarginalMixture {
    /// Per-component `log N(x; ·)` without weights, and the component scores.
    pub fn components(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let x = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut scores = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let r = &x - &c.mean;
            let sol = c.chol.solve(&r);
            logs.push(c.log_norm - 0.5 * r.dot(&sol));
            scores.push(sol.iter().map(|v| -v).collect());
        }
        (logs, scores)
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.comps.iter().map(|c| c.log_weight).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.components(x);
        let terms: Vec<f64> = logs.iter().zip(&self.comps).map(|(l, c)| l + c.log_weight).collect();
        log_sum_exp(&terms)
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let (logs, _) = self.components(x);
        let terms: Vec<f64> = logs.iter().zip(&self.comps).map(|(l, c)| l + c.log_weight).collect();
        softmax(&terms)
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let (logs, scores) = self.components(x);
        let terms: Vec<f64> = logs.iter().zip(&self.comps).map(|(l, c)| l + c.log_weight).collect();
        let gamma = softmax(&terms);
        let mut out = vec![0.0; x.len()];
        for (g, s) in gamma.iter().zip(&scores) {
            for (o, v) in out.iter_mut().zip(s) {
                *o += g * v;
            }
        }
        out
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Exact `∇ log p_t(xt)` for a mixture prior.
pub fn gmm_marginal_score(mixture: &GaussianMixture, sched: &NoiseScheduleR3, xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    let (alpha, sigma2) = sched.kernel_params(t);
    Ok(mixture.marginal(alpha, sigma2)?.score(xt))
}

/// One reverse-time Euler–Maruyama update from given score values.
pub fn reverse_em_update<R: Rng + ?Sized>(
    sched: &NoiseScheduleR3,
    xt: &[f64],
    t: f64,
    tau: f64,
    score: &[f64],
    rng: &mut R,
    deterministic: bool,
) -> Result<CoordState> {
    if !(tau >= 0.0 && t - tau >= -1e-12) {
        return Err(Error::invalid("reverse step", format!("step {tau} from t = {t} leaves [0, 1]")));
    }
    if score.len() != xt.len() {
        return Err(Error::invalid("reverse step", "score length differs from state"));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coordinate score"));
    }
    let beta = sched.beta(t);
    let x = if deterministic {
        xt.iter()
            .zip(score)
            .map(|(&x, &s)| x + 0.5 * beta * (x + s) * tau)
            .collect()
    } else {
        let noise = (beta * tau).sqrt();
        xt.iter()
            .zip(score)
            .map(|(&x, &s)| x + (0.5 * beta * x + beta * s) * tau + noise * normal(rng))
            .collect()
    };
    Ok(CoordState {
        x,
        t: (t - tau).max(0.0),
    })
}

/// Reverse step with the score supplied by `score_fn(xt, t)`.
pub fn reverse_em_step<R, F>(
    sched: &NoiseScheduleR3,
    xt: &[f64],
    t: f64,
    tau: f64,
    score_fn: F,
    rng: &mut R,
    deterministic: bool,
) -> Result<CoordState>
where
    R: Rng + ?Sized,
    F: FnOnce(&[f64], f64) -> Vec<f64>,
{
    let s = score_fn(xt, t);
    reverse_em_update(sched, xt, t, tau, &s, rng, deterministic)
}
