//! Loss assembly, time sampling and the training loop.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::diffusion_r3;
use crate::diffusion_so3;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::score_fpe::{self, relative_residual, residual, residual_loss_with_cotangents, FpeConfig, ResidualEval, ScoreField};
use crate::seq_ctmc::{self, posterior_from_logits};
use crate::so3::geodesic_distance;
use crate::state::{GeoState, Schedules};
use crate::toy_model::{fidelity_grad, Context, DenoiserParams, FidelityItem, FidelityOptions, ModelField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fpe_weight: f64,
    pub ce_weight: f64,
    /// Prior losses apply to items with `t` below this.
    pub prior_threshold_tau: f64,
    pub seed: u64,
    pub fpe_enabled: bool,
    pub grad_clip: f64,
    /// Items per step that get the residual gradient.
    pub fpe_sub_batch: usize,
    /// See [`FidelityOptions::scale_rot_scores`].
    pub scale_rot_scores: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            learning_rate: 0.05,
            fpe_weight: 0.05,
            ce_weight: 0.4,
            prior_threshold_tau: 0.25,
            seed: 0,
            fpe_enabled: true,
            grad_clip: 10.0,
            fpe_sub_batch: 4,
            scale_rot_scores: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.fpe_sub_batch == 0 {
            return Err(Error::invalid("train config", "batch sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train config", "learning_rate must be positive"));
        }
        if !(self.fpe_weight >= 0.0 && self.ce_weight >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::invalid("train config", "weights must be nonnegative and grad_clip positive"));
        }
        if !(0.0..=1.0).contains(&self.prior_threshold_tau) {
            return Err(Error::invalid("train config", "prior_threshold_tau must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Whether the residual term contributes; a zero weight skips it entirely.
    pub fn regularized(&self) -> bool {
        self.fpe_enabled && self.fpe_weight > 0.0
    }

    /// Logical forward passes per step: one prediction per item, plus the two
    /// temporal-difference queries when regularized.
    pub fn forward_passes_per_step(&self) -> u64 {
        let per = if self.regularized() { 3 } else { 1 };
        per * self.batch_size as u64
    }
}

/// Extra structural losses applied below the noise threshold.
pub trait Priors {
    /// Loss and parameter gradient over the gated items.
    fn eval(&self, params: &DenoiserParams, items: &[&FidelityItem]) -> Result<(f64, Vec<f64>)>;
}

/// The registered default: no priors.
pub struct NoPriors;

impl Priors for NoPriors {
    fn eval(&self, params: &DenoiserParams, _items: &[&FidelityItem]) -> Result<(f64, Vec<f64>)> {
        Ok((0.0, vec![0.0; params.len()]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub dsm_x: f64,
    pub dsm_r: f64,
    pub ce: f64,
    pub fpe: f64,
    pub priors: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub forward_passes: u64,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl StepReport {
    /// Recompute `total` from the components.
    pub fn assembled_total(&self, cfg: &TrainConfig) -> f64 {
        let fpe = if cfg.regularized() { cfg.fpe_weight * self.fpe } else { 0.0 };
        self.dsm_x + self.dsm_r + cfg.ce_weight * self.ce + self.priors + fpe
    }
}

/// Corrupt a clean sample to time `t` through all three forward processes.
pub fn corrupt<R: Rng + ?Sized>(sample: &Sample, schedules: &Schedules, t: f64, rng: &mut R) -> Result<FidelityItem> {
    let x = diffusion_r3::forward_sample(&schedules.r3, &sample.x, t, rng)?.x;
    let r = diffusion_so3::forward_sample(&schedules.so3, &sample.rotations, t, rng)?.rotations;
    let a_t = seq_ctmc::forward_corrupt(&schedules.seq, &sample.types, t, rng)?.types;
    Ok(FidelityItem {
        x0: sample.x.clone(),
        r0: sample.rotations.clone(),
        a0: sample.types.clone(),
        state: GeoState::new(x, r)?,
        a_t,
        t,
    })
}

fn t_range(schedules: &Schedules) -> (f64, f64) {
    let eps = schedules.r3.t_eps.max(schedules.so3.t_eps);
    (eps, 1.0 - eps)
}

fn clip(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// One optimizer step; returns the report without timing.
#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut DenoiserParams,
    data: &[Sample],
    schedules: &Schedules,
    ctx: &Context,
    cfg: &TrainConfig,
    fpe_cfg: &FpeConfig,
    priors: &dyn Priors,
    step: usize,
) -> Result<StepReport> {
    let mut brng = substream(cfg.seed, 2 * step as u64);
    let (lo, hi) = t_range(schedules);
    let batch = (0..cfg.batch_size)
        .map(|_| {
            let s = &data[brng.random_range(0..data.len())];
            let t = lo + (hi - lo) * brng.random::<f64>();
            corrupt(s, schedules, t, &mut brng)
        })
        .collect::<Result<Vec<_>>>()?;

    let opts = FidelityOptions {
        ce_weight: cfg.ce_weight,
        scale_rot_scores: cfg.scale_rot_scores,
    };
    let fid = fidelity_grad(params, &batch, schedules, ctx, &opts)?;
    let mut grad = fid.grad;

    let gated: Vec<&FidelityItem> = batch.iter().filter(|it| it.t < cfg.prior_threshold_tau).collect();
    let (prior_loss, prior_grad) = priors.eval(params, &gated)?;
    for (g, p) in grad.iter_mut().zip(&prior_grad) {
        *g += p;
    }

    let mut fpe = 0.0;
    if cfg.regularized() {
        let mut frng = substream(cfg.seed, 2 * step as u64 + 1);
        let m = cfg.fpe_sub_batch.min(batch.len());
        let picks = index::sample(&mut frng, batch.len(), m);
        let field = ModelField {
            params,
            schedules: *schedules,
            ctx,
        };
        let t_lo = fpe_cfg.t_eps + fpe_cfg.dt;
        let t_hi = 1.0 - fpe_cfg.t_eps - fpe_cfg.dt;
        let mut fgrad = vec![0.0; params.len()];
        for i in picks.iter() {
            let it = &batch[i];
            let t = it.t.clamp(t_lo, t_hi);
            let seed: u64 = frng.random();
            let (_, loss, cots) =
                residual_loss_with_cotangents(&field, schedules, &it.state, t, fpe_cfg, seed, cfg.fpe_weight / m as f64)?;
            fpe += loss / cfg.fpe_weight;
            field.pullback(&cots, &mut fgrad)?;
        }
        for (g, f) in grad.iter_mut().zip(&fgrad) {
            *g += f;
        }
    }

    let mut report = StepReport {
        step,
        dsm_x: fid.dsm_x,
        dsm_r: fid.dsm_r,
        ce: fid.ce,
        fpe,
        priors: prior_loss,
        total: 0.0,
        grad_norm: 0.0,
        forward_passes: cfg.forward_passes_per_step(),
        wall_time_s: 0.0,
    };
    report.total = report.assembled_total(cfg);
    if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            report: format!("{report:?}"),
        });
    }
    report.grad_norm = clip(&mut grad, cfg.grad_clip);
    params.apply_step(&grad, cfg.learning_rate)?;
    Ok(report)
}

/// Gradient descent on the fidelity loss plus the optional residual term.
pub fn train(
    data: &[Sample],
    params: DenoiserParams,
    schedules: &Schedules,
    ctx: &Context,
    cfg: &TrainConfig,
    fpe_cfg: &FpeConfig,
) -> Result<(DenoiserParams, Vec<StepReport>)> {
    train_with_priors(data, params, schedules, ctx, cfg, fpe_cfg, &NoPriors)
}

pub fn train_with_priors(
    data: &[Sample],
    mut params: DenoiserParams,
    schedules: &Schedules,
    ctx: &Context,
    cfg: &TrainConfig,
    fpe_cfg: &FpeConfig,
    priors: &dyn Priors,
) -> Result<(DenoiserParams, Vec<StepReport>)> {
    cfg.validate()?;
    fpe_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data", "must be nonempty"));
    }
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = Instant::now();
        let mut r = train_step(&mut params, data, schedules, ctx, cfg, fpe_cfg, priors, step)?;
        r.wall_time_s = start.elapsed().as_secs_f64();
        reports.push(r);
    }
    Ok((params, reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub t_grid: Vec<f64>,
    pub fpe: FpeConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            t_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            fpe: FpeConfig::verification(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub t: f64,
    pub denoise_mse: f64,
    pub geodesic_error: f64,
    pub seq_recovery: f64,
    /// Mean per-element residual loss.
    pub fpe_loss: f64,
    pub rel_x: f64,
    pub rel_r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub denoise_mse: f64,
    pub geodesic_error: f64,
    pub seq_recovery: f64,
    pub fpe_loss: f64,
    pub rel_x: f64,
    pub rel_r: f64,
    pub points: Vec<EvalPoint>,
}

/// Residuals of `field` at each state, with probes seeded per element.
pub fn residual_statistics<F: ScoreField + ?Sized>(
    field: &F,
    schedules: &Schedules,
    states: &[(GeoState, f64)],
    cfg: &FpeConfig,
    seed: u64,
) -> Result<(f64, Vec<ResidualEval>)> {
    let mut evals = Vec::with_capacity(states.len());
    let mut total = 0.0;
    for (i, (s, t)) in states.iter().enumerate() {
        let ev = residual(field, schedules, s, *t, cfg, score_fpe::element_seed(seed, i))?;
        total += score_fpe::element_loss(&ev, s.dim_x(), s.dim_r(), &cfg.weight);
        evals.push(ev);
    }
    Ok((total / states.len().max(1) as f64, evals))
}

/// Denoising errors and residual statistics on held-out samples over `cfg.t_grid`.
/// Each (sample, time) pair is corrupted from its own substream.
pub fn evaluate(
    params: &DenoiserParams,
    heldout: &[Sample],
    schedules: &Schedules,
    ctx: &Context,
    cfg: &EvalConfig,
) -> Result<EvalMetrics> {
    if heldout.is_empty() || cfg.t_grid.is_empty() {
        return Err(Error::invalid("evaluation", "need held-out samples and a time grid"));
    }
    cfg.fpe.validate()?;
    let field = ModelField {
        params,
        schedules: *schedules,
        ctx,
    };
    let mut points = Vec::with_capacity(cfg.t_grid.len());
    let mut all = Vec::new();
    for (k, &t) in cfg.t_grid.iter().enumerate() {
        let (mut mse, mut geo, mut rec) = (0.0, 0.0, 0.0);
        let mut states = Vec::with_capacity(heldout.len());
        for (j, s) in heldout.iter().enumerate() {
            let mut rng = substream(cfg.seed, (j * cfg.t_grid.len() + k) as u64);
            let it = corrupt(s, schedules, t, &mut rng)?;
            let pred = params.predict_clean(schedules, &it.state, t, ctx)?;
            mse += pred.x0.iter().zip(&it.x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / it.x0.len() as f64;
            geo += pred.r0.iter().zip(&it.r0).map(|(a, b)| geodesic_distance(a, b)).sum::<f64>() / it.r0.len() as f64;
            let hits = pred
                .logits
                .iter()
                .zip(&it.a_t)
                .zip(&it.a0)
                .filter(|((l, &at), &a0)| {
                    let p = posterior_from_logits(&schedules.seq, l, at, t);
                    argmax(&p) == a0
                })
                .count();
            rec += hits as f64 / it.a0.len() as f64;
            states.push((it.state, t));
        }
        let n = heldout.len() as f64;
        let (fpe_loss, evals) = residual_statistics(&field, schedules, &states, &cfg.fpe, substream(cfg.seed, u64::MAX - k as u64).random())?;
        let (rel_x, rel_r) = relative_residual(&evals);
        points.push(EvalPoint {
            t,
            denoise_mse: mse / n,
            geodesic_error: geo / n,
            seq_recovery: rec / n,
            fpe_loss,
            rel_x,
            rel_r,
        });
        all.extend(evals);
    }
    let m = points.len() as f64;
    let (rel_x, rel_r) = relative_residual(&all);
    Ok(EvalMetrics {
        denoise_mse: points.iter().map(|p| p.denoise_mse).sum::<f64>() / m,
        geodesic_error: points.iter().map(|p| p.geodesic_error).sum::<f64>() / m,
        seq_recovery: points.iter().map(|p| p.seq_recovery).sum::<f64>() / m,
        fpe_loss: points.iter().map(|p| p.fpe_loss).sum::<f64>() / m,
        rel_x,
        rel_r,
        points,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
