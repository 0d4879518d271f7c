//! Variance-exploding Brownian motion on SO(3), one frame per residue.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::igso3::{IgSo3Params, IgSo3Sampler};
use crate::rng::normal;
use crate::so3::{Rotation, TangentVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseScheduleSO3 {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_eps: f64,
}

impl Default for NoiseScheduleSO3 {
    fn default() -> Self {
        NoiseScheduleSO3 {
            sigma_min: 0.03,
            sigma_max: PI,
            t_eps: 1e-3,
        }
    }
}

impl NoiseScheduleSO3 {
    pub fn new(sigma_min: f64, sigma_max: f64, t_eps: f64) -> Result<Self> {
        let s = NoiseScheduleSO3 {
            sigma_min,
            sigma_max,
            t_eps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::invalid("so3 schedule", "need 0 < sigma_min < sigma_max"));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 0.5) {
            return Err(Error::invalid("so3 schedule", "t_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// `σ_min^{1-t} σ_max^t`.
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min.powf(1.0 - t) * self.sigma_max.powf(t)
    }

    /// Accumulated variance; exactly zero at `t = 0`.
    pub fn sigma2_of_t(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            self.sigma(t).powi(2)
        }
    }

    /// `β_R = dσ²/dt = 2 ln(σ_max/σ_min) σ²(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        2.0 * (self.sigma_max / self.sigma_min).ln() * self.sigma(t).powi(2)
    }

    pub fn kernel(&self, t: f64) -> Result<IgSo3Params> {
        IgSo3Params::new(self.sigma2_of_t(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub rotations: Vec<Rotation>,
    pub t: f64,
}

/// Perturb each frame independently with the IGSO(3) kernel of variance `σ²(t)`.
pub fn forward_sample<R: Rng + ?Sized>(
    sched: &NoiseScheduleSO3,
    r0: &[Rotation],
    t: f64,
    rng: &mut R,
) -> Result<FrameState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            name: "t",
            value: t,
            domain: "[0, 1]",
        });
    }
    if t == 0.0 {
        return Ok(FrameState {
            rotations: r0.to_vec(),
            t,
        });
    }
    let sampler = IgSo3Sampler::new(sched.kernel(t)?);
    let rotations = r0.iter().map(|r| sampler.sample(r, rng).renormalized()).collect();
    Ok(FrameState { rotations, t })
}

/// Reverse geodesic random-walk step from given per-frame scores.
pub fn reverse_update<R: Rng + ?Sized>(
    sched: &NoiseScheduleSO3,
    rt: &[Rotation],
    t: f64,
    tau: f64,
    scores: &[TangentVector],
    rng: &mut R,
    deterministic: bool,
) -> Result<FrameState> {
    if !(tau >= 0.0 && t - tau >= -1e-12) {
        return Err(Error::invalid("reverse step", format!("step {tau} from t = {t} leaves [0, 1]")));
    }
    if scores.len() != rt.len() {
        return Err(Error::invalid("reverse step", "one score per frame required"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("rotation score"));
    }
    let beta = sched.beta(t);
    let rotations = rt
        .iter()
        .zip(scores)
        .map(|(r, s)| {
            let delta = if deterministic {
                *s * (0.5 * beta * tau)
            } else {
                let z = Vector3::new(normal(rng), normal(rng), normal(rng));
                *s * (beta * tau) + TangentVector(z * (beta * tau).sqrt())
            };
            r.retract(&delta).renormalized()
        })
        .collect();
    Ok(FrameState {
        rotations,
        t: (t - tau).max(0.0),
    })
}

/// Reverse step with scores supplied by `score_fn(frames, t)`.
pub fn reverse_step<R, F>(
    sched: &NoiseScheduleSO3,
    rt: &[Rotation],
    t: f64,
    tau: f64,
    score_fn: F,
    rng: &mut R,
    deterministic: bool,
) -> Result<FrameState>
where
    R: Rng + ?Sized,
    F: FnOnce(&[Rotation], f64) -> Vec<TangentVector>,
{
    let s = score_fn(rt, t);
    reverse_update(sched, rt, t, tau, &s, rng, deterministic)
}
