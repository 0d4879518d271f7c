//! Score dynamics implied by the forward Fokker–Planck equations, and the
//! residual of a score field against them.
//!
//! Coordinates (VP drift `-½βx`, diffusion `β`):
//!
//! ```text
//! ∂_t s_X = ½β [ s_X + (∇s_X)·x + ∇(div s_X + ‖s_X‖²) ]
//! ```
//!
//! Frames (Brownian motion with `dσ²/dt = β_R`, metric `½ tr(AᵀB)`):
//!
//! ```text
//! ∂_t s_R = ½β_R [ Δ_B s_R - Ric(s_R) + 2(∇s_R)ᵀ s_R ],   Ric = ½ g,
//! ```
//!
//! where in body coordinates the Bochner Laplacian of `v` is
//! `Σ_a ∂_a∂_a v + Σ_a e_a × ∂_a v - ½ v`, with `∂_a` the derivative along
//! `R·exp(ε E_a)`.
//!
//! Every estimator is a fixed arithmetic combination of field queries. The
//! residual loss is therefore differentiated exactly with respect to each
//! query's output ([`residual_loss_with_cotangents`]), and a parameterized
//! field only has to pull those cotangents back through itself.

mod field;

pub use field::{FieldOrigin, KernelField, MixtureField, ScaledField, ScoreEval, ScoreField, ZeroField};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion_r3::NoiseScheduleR3;
use crate::diffusion_so3::NoiseScheduleSO3;
use crate::error::{Error, Result};
use crate::rng::{rademacher, seeded, substream};
use crate::so3::{exp_map, TangentVector};
use crate::state::{GeoState, Schedules};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFn {
    /// 1 on `[lo, hi]`, 0 elsewhere.
    Window { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl Default for WeightFn {
    fn default() -> Self {
        WeightFn::Window { lo: 0.05, hi: 0.95 }
    }
}

impl WeightFn {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            WeightFn::Window { lo, hi } => {
                if (lo..=hi).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
            WeightFn::Constant { value } => value,
        }
    }
}

/// How a probe set is drawn. Every probe is marginally uniform over `{±1}^D`
/// under both designs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDesign {
    /// Independent Rademacher vectors.
    Iid,
    /// Rows of a Sylvester–Hadamard matrix, drawn without replacement and
    /// multiplied by a random sign per coordinate. Probes within a block are
    /// mutually orthogonal, so `n ≥ D` probes recover the trace exactly.
    #[default]
    Orthogonal,
}

pub fn draw_probes<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize, design: ProbeDesign) -> Vec<Vec<f64>> {
    match design {
        ProbeDesign::Iid => (0..n).map(|_| rademacher(rng, dim)).collect(),
        ProbeDesign::Orthogonal => {
            let order = n.max(dim).max(1).next_power_of_two();
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let signs = rademacher(rng, dim);
                let mut rows: Vec<usize> = (0..order).collect();
                rows.shuffle(rng);
                for &r in rows.iter().take(n - out.len()) {
                    out.push(
                        (0..dim)
                            .map(|c| if (r & c).count_ones() % 2 == 0 { signs[c] } else { -signs[c] })
                            .collect(),
                    );
                }
            }
            out
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpeConfig {
    pub dt: f64,
    pub dx: f64,
    pub dr: f64,
    pub n_probes: usize,
    pub probe_design: ProbeDesign,
    pub weight: WeightFn,
    pub t_eps: f64,
}

impl Default for FpeConfig {
    fn default() -> Self {
        FpeConfig {
            dt: 1e-3,
            dx: 1e-4,
            dr: 1e-3,
            n_probes: 1,
            probe_design: ProbeDesign::default(),
            weight: WeightFn::default(),
            t_eps: 1e-3,
        }
    }
}

impl FpeConfig {
    /// Low-variance estimator settings for verification runs.
    pub fn verification() -> Self {
        FpeConfig {
            n_probes: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= self.t_eps) {
            return Err(Error::invalid("fpe config", "need 0 < dt <= t_eps"));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 0.5) {
            return Err(Error::invalid("fpe config", "t_eps must lie in (0, 0.5)"));
        }
        for (name, v) in [("dx", self.dx), ("dr", self.dr)] {
            if !(v > 1e-6 && v < 1e-1) {
                return Err(Error::invalid("fpe config", format!("{name} = {v} outside (1e-6, 1e-1)")));
            }
        }
        if self.n_probes == 0 {
            return Err(Error::invalid("fpe config", "n_probes must be positive"));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let lo = self.t_eps;
        let hi = 1.0 - self.t_eps;
        if t - self.dt < lo - 1e-12 || t + self.dt > hi + 1e-12 {
            return Err(Error::Domain {
                name: "t",
                value: t,
                domain: "[t_eps + dt, 1 - t_eps - dt]",
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMeta {
    pub probe_seed: u64,
    pub dt: f64,
    pub dx: f64,
    pub dr: f64,
    pub n_probes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEval {
    pub eps_x: Vec<f64>,
    pub eps_r: Vec<TangentVector>,
    pub norm2_x: f64,
    pub norm2_r: f64,
    /// Squared norms of the temporal derivatives, for relative residuals.
    pub dsdt_norm2_x: f64,
    pub dsdt_norm2_r: f64,
    pub t: f64,
    pub meta: EstimatorMeta,
}

/// Output cotangent for one field query: `d_x` pairs with `eval_x`, `d_r`
/// with `eval_r`. Empty means zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Cotangent {
    pub state: GeoState,
    pub t: f64,
    pub d_x: Vec<f64>,
    pub d_r: Vec<TangentVector>,
}

fn finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn finite_r(v: &[TangentVector], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

fn norm2_r(a: &[TangentVector]) -> f64 {
    a.iter().map(|v| v.norm_squared()).sum()
}

fn e(a: usize) -> Vector3<f64> {
    let mut v = Vector3::zeros();
    v[a] = 1.0;
    v
}

/// Central difference in time at a fixed state.
pub fn temporal_derivative<F: ScoreField + ?Sized>(
    field: &F,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
) -> Result<ScoreEval> {
    cfg.check_time(t)?;
    let plus = field.eval(state, t + cfg.dt);
    let minus = field.eval(state, t - cfg.dt);
    Ok(time_difference(&plus, &minus, cfg.dt))
}

fn time_difference(plus: &ScoreEval, minus: &ScoreEval, dt: f64) -> ScoreEval {
    let c = 0.5 / dt;
    ScoreEval {
        s_x: plus.s_x.iter().zip(&minus.s_x).map(|(p, m)| (p - m) * c).collect(),
        s_r: plus.s_r.iter().zip(&minus.s_r).map(|(p, m)| (*p - *m) * c).collect(),
    }
}

/// Probe outputs at one point `y`: `s(y)` and `s(y ± h v_p)` for each probe.
struct ProbePoint {
    state: GeoState,
    s: Vec<f64>,
    plus: Vec<(GeoState, Vec<f64>)>,
    minus: Vec<(GeoState, Vec<f64>)>,
}

fn probe_point<F: ScoreField + ?Sized>(field: &F, state: GeoState, t: f64, probes: &[Vec<f64>], h: f64) -> ProbePoint {
    let s = field.eval_x(&state, t);
    let mut plus = Vec::with_capacity(probes.len());
    let mut minus = Vec::with_capacity(probes.len());
    for v in probes {
        let mut xp = state.x.clone();
        let mut xm = state.x.clone();
        axpy(&mut xp, h, v);
        axpy(&mut xm, -h, v);
        let sp = state.with_x(xp);
        let sm = state.with_x(xm);
        plus.push((sp.clone(), field.eval_x(&sp, t)));
        minus.push((sm.clone(), field.eval_x(&sm, t)));
    }
    ProbePoint { state, s, plus, minus }
}

impl ProbePoint {
    fn divergence(&self, probes: &[Vec<f64>], h: f64) -> f64 {
        let mut acc = 0.0;
        for ((v, (_, p)), (_, m)) in probes.iter().zip(&self.plus).zip(&self.minus) {
            acc += v.iter().zip(p.iter().zip(m)).map(|(vi, (a, b))| vi * (a - b)).sum::<f64>() / (2.0 * h);
        }
        acc / probes.len() as f64
    }

    /// `div s(y) + ‖s(y)‖²`.
    fn g(&self, probes: &[Vec<f64>], h: f64) -> f64 {
        self.divergence(probes, h) + norm2(&self.s)
    }

    fn backward(&self, c: f64, probes: &[Vec<f64>], h: f64, out: &mut Vec<Cotangent>, t: f64) {
        out.push(Cotangent {
            state: self.state.clone(),
            t,
            d_x: self.s.iter().map(|v| 2.0 * c * v).collect(),
            d_r: Vec::new(),
        });
        let k = c / (2.0 * h * probes.len() as f64);
        for (v, ((sp, _), (sm, _))) in probes.iter().zip(self.plus.iter().zip(&self.minus)) {
            out.push(Cotangent {
                state: sp.clone(),
                t,
                d_x: v.iter().map(|vi| k * vi).collect(),
                d_r: Vec::new(),
            });
            out.push(Cotangent {
                state: sm.clone(),
                t,
                d_x: v.iter().map(|vi| -k * vi).collect(),
                d_r: Vec::new(),
            });
        }
    }
}

/// Hutchinson estimate of `div s_X` with Rademacher probes and finite-difference
/// Jacobian-vector products of step `cfg.dx`.
pub fn hutchinson_divergence<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
    rng: &mut R,
) -> Result<f64> {
    let probes = draw_probes(rng, cfg.n_probes, state.dim_x(), cfg.probe_design);
    let pt = probe_point(field, state.clone(), t, &probes, cfg.dx);
    let div = pt.divergence(&probes, cfg.dx);
    if div.is_finite() {
        Ok(div)
    } else {
        Err(Error::NonFinite("divergence estimate"))
    }
}

/// Field queries behind the coordinate operator.
struct R3Samples {
    s0: Vec<f64>,
    jvp: [(GeoState, Vec<f64>); 2],
    points: Vec<[ProbePoint; 2]>,
}

fn sample_r3<F: ScoreField + ?Sized>(field: &F, state: &GeoState, t: f64, cfg: &FpeConfig, probes: &[Vec<f64>]) -> R3Samples {
    let h = cfg.dx;
    let s0 = field.eval_x(state, t);
    let shifted = |sign: f64| {
        let x: Vec<f64> = state.x.iter().map(|v| v + sign * h * v).collect();
        let st = state.with_x(x);
        let s = field.eval_x(&st, t);
        (st, s)
    };
    let jvp = [shifted(1.0), shifted(-1.0)];
    let points = (0..state.dim_x())
        .map(|j| {
            let at = |sign: f64| {
                let mut x = state.x.clone();
                x[j] += sign * cfg.dx;
                probe_point(field, state.with_x(x), t, probes, h)
            };
            [at(1.0), at(-1.0)]
        })
        .collect();
    R3Samples { s0, jvp, points }
}

fn combine_r3(s: &R3Samples, probes: &[Vec<f64>], cfg: &FpeConfig, beta: f64) -> Vec<f64> {
    let h = cfg.dx;
    s.s0.iter()
        .enumerate()
        .map(|(j, &s0)| {
            let jvp = (s.jvp[0].1[j] - s.jvp[1].1[j]) / (2.0 * h);
            let [p, m] = &s.points[j];
            let grad = (p.g(probes, h) - m.g(probes, h)) / (2.0 * cfg.dx);
            0.5 * beta * (s0 + jvp + grad)
        })
        .collect()
}

/// Cotangents of the coordinate operator's queries given `gg = ∂L/∂𝒢_X`.
fn backward_r3(
    state: &GeoState,
    s: &R3Samples,
    probes: &[Vec<f64>],
    cfg: &FpeConfig,
    beta: f64,
    t: f64,
    gg: &[f64],
    out: &mut Vec<Cotangent>,
) {
    let h = cfg.dx;
    let q: Vec<f64> = gg.iter().map(|g| 0.5 * beta * g).collect();
    out.push(Cotangent {
        state: state.clone(),
        t,
        d_x: q.clone(),
        d_r: Vec::new(),
    });
    for (k, sign) in [(0, 1.0), (1, -1.0)] {
        out.push(Cotangent {
            state: s.jvp[k].0.clone(),
            t,
            d_x: q.iter().map(|v| sign * v / (2.0 * h)).collect(),
            d_r: Vec::new(),
        });
    }
    for (j, [p, m]) in s.points.iter().enumerate() {
        let c = q[j] / (2.0 * cfg.dx);
        p.backward(c, probes, h, out, t);
        m.backward(-c, probes, h, out, t);
    }
}

/// `𝒢_X`: the coordinate score dynamics evaluated by finite differences.
/// A single probe set is drawn and reused at every differentiated point, so
/// the scalar `div s + ‖s‖²` is a deterministic function of position.
pub fn g_operator_r3<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    sched: &NoiseScheduleR3,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let probes = draw_probes(rng, cfg.n_probes, state.dim_x(), cfg.probe_design);
    let s = sample_r3(field, state, t, cfg, &probes);
    let g = combine_r3(&s, &probes, cfg, sched.beta(t));
    finite(&g, "coordinate score operator")?;
    Ok(g)
}

/// Field queries behind the frame operator: the base evaluation and, per
/// residue, the residue's own score at `R_i·exp(±dr E_a)`.
struct So3Samples {
    base: Vec<TangentVector>,
    shifted: Vec<[[(GeoState, TangentVector); 2]; 3]>,
}

fn sample_so3<F: ScoreField + ?Sized>(field: &F, state: &GeoState, t: f64, cfg: &FpeConfig) -> So3Samples {
    let base = field.eval_r(state, t);
    let shifted = (0..state.n_residues())
        .map(|i| {
            let along = |a: usize, sign: f64| {
                let step = exp_map(&TangentVector(e(a) * (sign * cfg.dr)));
                let st = state.with_rotation(i, state.rotations[i] * step);
                let s = field.eval_r(&st, t)[i];
                (st, s)
            };
            [0, 1, 2].map(|a| [along(a, 1.0), along(a, -1.0)])
        })
        .collect();
    So3Samples { base, shifted }
}

fn combine_so3(s: &So3Samples, cfg: &FpeConfig, beta: f64) -> Vec<TangentVector> {
    let dr = cfg.dr;
    s.base
        .iter()
        .zip(&s.shifted)
        .map(|(v, sh)| {
            let v = v.0;
            let mut lap = Vector3::zeros();
            let mut cross = Vector3::zeros();
            let mut h = Vector3::zeros();
            for a in 0..3 {
                let (up, um) = (sh[a][0].1 .0, sh[a][1].1 .0);
                let d = (up - um) / (2.0 * dr);
                lap += (up - 2.0 * v + um) / (dr * dr);
                cross += e(a).cross(&d);
                h[a] = 2.0 * d.dot(&v);
            }
            // Δ_B v - ½v = lap + cross - ½v - ½v.
            TangentVector((lap + cross - v + h) * (0.5 * beta))
        })
        .collect()
}

fn backward_so3(
    state: &GeoState,
    s: &So3Samples,
    cfg: &FpeConfig,
    beta: f64,
    t: f64,
    gg: &[TangentVector],
    out: &mut Vec<Cotangent>,
) {
    let dr = cfg.dr;
    let n = s.base.len();
    let mut d_base = vec![TangentVector::ZERO; n];
    for (i, (v, sh)) in s.base.iter().zip(&s.shifted).enumerate() {
        let v = v.0;
        let q = gg[i].0 * (0.5 * beta);
        let mut dv = q * (-6.0 / (dr * dr) - 1.0);
        for a in 0..3 {
            let (up, um) = (sh[a][0].1 .0, sh[a][1].1 .0);
            let d = (up - um) / (2.0 * dr);
            dv += d * (2.0 * q[a]);
            let dd = q.cross(&e(a)) + v * (2.0 * q[a]);
            for (k, sign) in [(0, 1.0), (1, -1.0)] {
                let mut d_r = vec![TangentVector::ZERO; n];
                d_r[i] = TangentVector(q / (dr * dr) + dd * (sign / (2.0 * dr)));
                out.push(Cotangent {
                    state: sh[a][k].0.clone(),
                    t,
                    d_x: Vec::new(),
                    d_r,
                });
            }
        }
        d_base[i] = TangentVector(dv);
    }
    out.push(Cotangent {
        state: state.clone(),
        t,
        d_x: Vec::new(),
        d_r: d_base,
    });
}

/// `𝒢_R` per residue, from tangent-space finite differences of step `cfg.dr`.
pub fn g_operator_so3<F: ScoreField + ?Sized>(
    field: &F,
    sched: &NoiseScheduleSO3,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
) -> Result<Vec<TangentVector>> {
    let s = sample_so3(field, state, t, cfg);
    let g = combine_so3(&s, cfg, sched.beta(t));
    finite_r(&g, "frame score operator")?;
    Ok(g)
}

struct ResidualParts {
    r3: R3Samples,
    so3: So3Samples,
    probes: Vec<Vec<f64>>,
    eval: ResidualEval,
}

fn residual_parts<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
    probe_seed: u64,
) -> Result<ResidualParts> {
    cfg.check_time(t)?;
    let mut rng = seeded(probe_seed);
    let probes = draw_probes(&mut rng, cfg.n_probes, state.dim_x(), cfg.probe_design);

    let plus = field.eval(state, t + cfg.dt);
    let minus = field.eval(state, t - cfg.dt);
    let dsdt = time_difference(&plus, &minus, cfg.dt);
    finite(&dsdt.s_x, "temporal derivative")?;
    finite_r(&dsdt.s_r, "temporal derivative")?;

    let r3 = sample_r3(field, state, t, cfg, &probes);
    let gx = combine_r3(&r3, &probes, cfg, schedules.r3.beta(t));
    finite(&gx, "coordinate score operator")?;
    let so3 = sample_so3(field, state, t, cfg);
    let gr = combine_so3(&so3, cfg, schedules.so3.beta(t));
    finite_r(&gr, "frame score operator")?;

    let eps_x: Vec<f64> = dsdt.s_x.iter().zip(&gx).map(|(a, b)| a - b).collect();
    let eps_r: Vec<TangentVector> = dsdt.s_r.iter().zip(&gr).map(|(a, b)| *a - *b).collect();
    let eval = ResidualEval {
        norm2_x: norm2(&eps_x),
        norm2_r: norm2_r(&eps_r),
        dsdt_norm2_x: norm2(&dsdt.s_x),
        dsdt_norm2_r: norm2_r(&dsdt.s_r),
        eps_x,
        eps_r,
        t,
        meta: EstimatorMeta {
            probe_seed,
            dt: cfg.dt,
            dx: cfg.dx,
            dr: cfg.dr,
            n_probes: cfg.n_probes,
        },
    };
    Ok(ResidualParts {
        r3,
        so3,
        probes,
        eval,
    })
}

/// `ε = ∂_t s - 𝒢[s]` on both manifolds. Probes come from `probe_seed`, so
/// equal inputs give bit-identical results.
pub fn residual<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
    probe_seed: u64,
) -> Result<ResidualEval> {
    Ok(residual_parts(field, schedules, state, t, cfg, probe_seed)?.eval)
}

/// `w(t)·(‖ε_X‖²/D_X + ‖ε_R‖²/D_R)`; an empty part contributes nothing.
pub fn element_loss(eval: &ResidualEval, dim_x: usize, dim_r: usize, weight: &WeightFn) -> f64 {
    let w = weight.eval(eval.t);
    let x = if dim_x > 0 { eval.norm2_x / dim_x as f64 } else { 0.0 };
    let r = if dim_r > 0 { eval.norm2_r / dim_r as f64 } else { 0.0 };
    w * (x + r)
}

/// Probe seed used for batch element `index` of a loss evaluation seeded by `seed`.
pub fn element_seed(seed: u64, index: usize) -> u64 {
    substream(seed, index as u64).random()
}

/// Batch mean of [`element_loss`]. Elements with zero weight are skipped.
pub fn fpe_loss<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    batch: &[(GeoState, f64)],
    cfg: &FpeConfig,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("fpe batch", "must be nonempty"));
    }
    let mut total = 0.0;
    for (i, (state, t)) in batch.iter().enumerate() {
        if cfg.weight.eval(*t) == 0.0 {
            continue;
        }
        let ev = residual(field, schedules, state, *t, cfg, element_seed(seed, i))?;
        total += element_loss(&ev, state.dim_x(), state.dim_r(), &cfg.weight);
    }
    Ok(total / batch.len() as f64)
}

/// `scale · element_loss` together with its exact derivative with respect to
/// every field output the estimator consumed.
pub fn residual_loss_with_cotangents<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    state: &GeoState,
    t: f64,
    cfg: &FpeConfig,
    probe_seed: u64,
    scale: f64,
) -> Result<(ResidualEval, f64, Vec<Cotangent>)> {
    let parts = residual_parts(field, schedules, state, t, cfg, probe_seed)?;
    let ev = &parts.eval;
    let (dx, dr) = (state.dim_x(), state.dim_r());
    let w = scale * cfg.weight.eval(t);
    let loss = scale * element_loss(ev, dx, dr, &cfg.weight);
    let mut out = Vec::new();
    if w == 0.0 {
        return Ok((parts.eval, loss, out));
    }

    let cx = if dx > 0 { 2.0 * w / dx as f64 } else { 0.0 };
    let cr = if dr > 0 { 2.0 * w / dr as f64 } else { 0.0 };
    let de_x: Vec<f64> = ev.eps_x.iter().map(|v| cx * v).collect();
    let de_r: Vec<TangentVector> = ev.eps_r.iter().map(|v| *v * cr).collect();

    let c = 0.5 / cfg.dt;
    out.push(Cotangent {
        state: state.clone(),
        t: t + cfg.dt,
        d_x: de_x.iter().map(|v| v * c).collect(),
        d_r: de_r.iter().map(|v| *v * c).collect(),
    });
    out.push(Cotangent {
        state: state.clone(),
        t: t - cfg.dt,
        d_x: de_x.iter().map(|v| -v * c).collect(),
        d_r: de_r.iter().map(|v| *v * -c).collect(),
    });
    let gx: Vec<f64> = de_x.iter().map(|v| -v).collect();
    backward_r3(state, &parts.r3, &parts.probes, cfg, schedules.r3.beta(t), t, &gx, &mut out);
    let gr: Vec<TangentVector> = de_r.iter().map(|v| -*v).collect();
    backward_so3(state, &parts.so3, cfg, schedules.so3.beta(t), t, &gr, &mut out);
    Ok((parts.eval, loss, out))
}

/// Pooled relative residuals `(√(Σ‖ε_X‖²/Σ‖∂_t s_X‖²), same for frames)`.
pub fn relative_residual(evals: &[ResidualEval]) -> (f64, f64) {
    let (mut nx, mut dx, mut nr, mut dr) = (0.0, 0.0, 0.0, 0.0);
    for e in evals {
        nx += e.norm2_x;
        dx += e.dsdt_norm2_x;
        nr += e.norm2_r;
        dr += e.dsdt_norm2_r;
    }
    let ratio = |n: f64, d: f64| if d > 0.0 { (n / d).sqrt() } else { n.sqrt() };
    (ratio(nx, dx), ratio(nr, dr))
}
