//! Exact-score residual suite: analytic fields that must satisfy the score
//! dynamics, a scaled field that must not, and the order of the temporal
//! finite difference.

use serde::{Deserialize, Serialize};

use crate::diffusion_r3::{self, GaussianMixture};
use crate::diffusion_so3;
use crate::error::{Error, Result};
use crate::rng::{normal, substream};
use crate::score_fpe::{
    element_seed, relative_residual, residual, temporal_derivative, FpeConfig, KernelField, MixtureField, ScaledField,
    ScoreField,
};
use crate::so3::{sample_haar, Rotation};
use crate::state::{GeoState, Schedules};

pub const COORD_BUDGET: f64 = 5e-2;
pub const FRAME_BUDGET: f64 = 1e-1;
/// A scaled score must exceed this relative residual.
pub const NEGATIVE_FLOOR: f64 = 0.5;
pub const MIN_FD_ORDER: f64 = 1.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub t_grid: Vec<f64>,
    /// Temporal steps for the order sweep, each half the previous.
    pub fd_dts: Vec<f64>,
    /// Times of the residual-vs-t curve.
    pub curve_grid: Vec<f64>,
    pub states_per_case: usize,
    pub dim_x: usize,
    pub n_residues: usize,
    pub fpe: FpeConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            t_grid: vec![0.2, 0.5, 0.8],
            fd_dts: vec![4e-3, 2e-3, 1e-3],
            curve_grid: (2..=18).map(|i| i as f64 / 20.0).collect(),
            states_per_case: 8,
            dim_x: 12,
            n_residues: 3,
            fpe: FpeConfig::verification(),
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        self.fpe.validate()?;
        if self.states_per_case == 0 || self.dim_x == 0 || self.n_residues == 0 {
            return Err(Error::invalid("verify", "states, dimension and residues must be positive"));
        }
        if self.fd_dts.len() < 2 || self.fd_dts.windows(2).any(|w| (w[1] - 0.5 * w[0]).abs() > 1e-15) {
            return Err(Error::invalid("verify", "fd_dts must halve at every step"));
        }
        let lo = self.fpe.t_eps + self.fpe.dt;
        if self.t_grid.iter().chain(&self.curve_grid).any(|&t| !(t >= lo && t <= 1.0 - lo)) {
            return Err(Error::invalid("verify", "times must lie inside [t_eps + dt, 1 - t_eps - dt]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub manifold: &'static str,
    pub t: f64,
    pub relative_residual: f64,
    pub budget: f64,
    /// Whether the field must satisfy the dynamics (`relative_residual < budget`)
    /// or must violate them (`relative_residual > budget`).
    pub expect_consistent: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdOrderRow {
    pub dt: f64,
    pub error: f64,
    /// `log₂(error(2·dt)/error(dt))`; absent for the first row.
    pub order: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub t: f64,
    pub kernel_x: f64,
    pub kernel_r: f64,
    pub mixture_x: f64,
    pub scaled_x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub cases: Vec<CaseResult>,
    pub fd_order: Vec<FdOrderRow>,
    pub curve: Vec<CurveRow>,
    pub all_pass: bool,
}

struct Fixtures {
    kernel: KernelField,
    mixture: MixtureField,
}

fn fixtures(schedules: &Schedules, cfg: &VerifyConfig, seed: u64) -> Result<Fixtures> {
    let mut rng = substream(seed, 0);
    let d = cfg.dim_x;
    let x0: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let r0: Vec<Rotation> = (0..cfg.n_residues).map(|_| sample_haar(&mut rng)).collect();
    let means = (0..2).map(|_| (0..d).map(|_| 1.5 * normal(&mut rng)).collect()).collect();
    let mixture = GaussianMixture::isotropic(vec![0.4, 0.6], means, 0.2)?;
    Ok(Fixtures {
        kernel: KernelField {
            schedules: *schedules,
            x0,
            r0,
        },
        mixture: MixtureField {
            schedule: schedules.r3,
            mixture,
        },
    })
}

/// Noisy states at `t`: kernel draws around the fixed clean state, or
/// forward draws from the mixture.
fn states(schedules: &Schedules, fx: &Fixtures, from_mixture: bool, t: f64, n: usize, seed: u64) -> Result<Vec<GeoState>> {
    let mut rng = substream(seed, 1 + (t * 1e6).round() as u64 * 2 + from_mixture as u64);
    (0..n)
        .map(|_| {
            let x0 = if from_mixture {
                fx.mixture.mixture.sample(&mut rng).1
            } else {
                fx.kernel.x0.clone()
            };
            let x = diffusion_r3::forward_sample(&schedules.r3, &x0, t, &mut rng)?.x;
            let r = diffusion_so3::forward_sample(&schedules.so3, &fx.kernel.r0, t, &mut rng)?.rotations;
            GeoState::new(x, r)
        })
        .collect()
}

fn pooled<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    states: &[GeoState],
    t: f64,
    cfg: &FpeConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let evals = states
        .iter()
        .enumerate()
        .map(|(i, s)| residual(field, schedules, s, t, cfg, element_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(relative_residual(&evals))
}

/// Relative residuals of the four fields at `t`: kernel (x, r), mixture x, scaled kernel (x, r).
fn residuals_at(schedules: &Schedules, fx: &Fixtures, cfg: &VerifyConfig, t: f64, seed: u64) -> Result<[f64; 5]> {
    let n = cfg.states_per_case;
    let ks = states(schedules, fx, false, t, n, seed)?;
    let ms = states(schedules, fx, true, t, n, seed)?;
    let (kx, kr) = pooled(&fx.kernel, schedules, &ks, t, &cfg.fpe, seed)?;
    let (mx, _) = pooled(&fx.mixture, schedules, &ms, t, &cfg.fpe, seed)?;
    let scaled = ScaledField {
        inner: fx.kernel.clone(),
        factor: 2.0,
    };
    let (sx, sr) = pooled(&scaled, schedules, &ks, t, &cfg.fpe, seed)?;
    Ok([kx, kr, mx, sx, sr])
}

/// Error of the central temporal difference on the Gaussian kernel score
/// against its closed-form time derivative.
fn fd_error(schedules: &Schedules, fx: &Fixtures, state: &GeoState, t: f64, dt: f64) -> Result<f64> {
    let r3 = &schedules.r3;
    let cfg = FpeConfig {
        dt,
        t_eps: dt,
        ..FpeConfig::default()
    };
    let d = temporal_derivative(&fx.kernel, state, t, &cfg)?;
    let (alpha, s2) = r3.kernel_params(t);
    let d_alpha = -0.5 * r3.beta(t) * alpha;
    let d_s2 = r3.d_sigma2_dt(t);
    let err2: f64 = d
        .s_x
        .iter()
        .zip(&state.x)
        .zip(&fx.kernel.x0)
        .map(|((v, &x), &m)| {
            let exact = d_alpha * m / s2 + (x - alpha * m) * d_s2 / (s2 * s2);
            (v - exact).powi(2)
        })
        .sum();
    Ok(err2.sqrt())
}

pub fn run_verification(schedules: &Schedules, cfg: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    cfg.validate()?;
    schedules.validate()?;
    let fx = fixtures(schedules, cfg, seed)?;
    let mut cases = Vec::new();
    let mut push = |case: &str, manifold: &'static str, t: f64, rel: f64, budget: f64, consistent: bool| {
        let pass = if consistent { rel < budget } else { rel > budget };
        cases.push(CaseResult {
            case: case.to_string(),
            manifold,
            t,
            relative_residual: rel,
            budget,
            expect_consistent: consistent,
            pass,
        });
    };
    for &t in &cfg.t_grid {
        let [kx, kr, mx, sx, _] = residuals_at(schedules, &fx, cfg, t, seed)?;
        push("gaussian-kernel", "r3", t, kx, COORD_BUDGET, true);
        push("gaussian-mixture", "r3", t, mx, COORD_BUDGET, true);
        push("igso3-kernel", "so3", t, kr, FRAME_BUDGET, true);
        push("scaled-kernel", "r3", t, sx, NEGATIVE_FLOOR, false);
    }

    let t_fd = 0.3;
    let probe = states(schedules, &fx, false, t_fd, 1, seed)?.remove(0);
    let mut fd_order = Vec::new();
    let mut prev: Option<f64> = None;
    for &dt in &cfg.fd_dts {
        let error = fd_error(schedules, &fx, &probe, t_fd, dt)?;
        let order = prev.map(|p| (p / error).log2());
        fd_order.push(FdOrderRow { dt, error, order });
        prev = Some(error);
    }

    let curve = cfg
        .curve_grid
        .iter()
        .map(|&t| {
            let [kx, kr, mx, sx, _] = residuals_at(schedules, &fx, cfg, t, seed)?;
            Ok(CurveRow {
                t,
                kernel_x: kx,
                kernel_r: kr,
                mixture_x: mx,
                scaled_x: sx,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let all_pass =
        cases.iter().all(|c| c.pass) && fd_order.iter().filter_map(|r| r.order).all(|o| o >= MIN_FD_ORDER);
    Ok(VerifyReport {
        cases,
        fd_order,
        curve,
        all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_and_repeats() {
        let cfg = VerifyConfig {
            curve_grid: vec![0.3, 0.6],
            ..VerifyConfig::default()
        };
        let sch = Schedules::default();
        let a = run_verification(&sch, &cfg, 0).unwrap();
        for c in &a.cases {
            assert!(c.pass, "{c:?}");
        }
        for r in &a.fd_order[1..] {
            assert!(r.order.unwrap() >= MIN_FD_ORDER, "{r:?}");
        }
        assert!(a.all_pass);
        assert_eq!(a, run_verification(&sch, &cfg, 0).unwrap());
    }

    #[test]
    fn rejects_bad_grids() {
        let sch = Schedules::default();
        let bad = VerifyConfig {
            fd_dts: vec![1e-3, 7e-4],
            ..VerifyConfig::default()
        };
        assert!(run_verification(&sch, &bad, 0).is_err());
        let bad = VerifyConfig {
            t_grid: vec![1.0],
            ..VerifyConfig::default()
        };
        assert!(run_verification(&sch, &bad, 0).is_err());
    }
}
