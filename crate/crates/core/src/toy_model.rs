//! Toy denoiser: a shared per-residue two-layer perceptron that predicts the
//! clean state, and the score field implied by its predictions.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::igso3::{score_from_relative, score_jacobian_from_relative, IgSo3Params};
use crate::rng::{normal, seeded};
use crate::score_fpe::{Cotangent, FieldOrigin, ScoreEval, ScoreField};
use crate::seq_ctmc::posterior_from_logits;
use crate::so3::{exp_map, hat, right_jacobian, Rotation, TangentVector};
use crate::state::{GeoState, Schedules};

pub const DEFAULT_HIDDEN: usize = 32;
pub const MAX_PARAMS: usize = 2048;
const TIME_FREQS: [f64; 3] = [1.0, 2.0, 4.0];
const CHECKPOINT_MAGIC: &str = "fpdiff-checkpoint 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_residues: usize,
    pub atoms_per_residue: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    pub n_types: usize,
}

impl Architecture {
    pub fn new(n_residues: usize, atoms_per_residue: usize, ctx_dim: usize, n_types: usize) -> Self {
        Architecture {
            n_residues,
            atoms_per_residue,
            ctx_dim,
            hidden: DEFAULT_HIDDEN,
            n_types,
        }
    }

    fn coord_width(&self) -> usize {
        3 * self.atoms_per_residue
    }

    pub fn dim_x(&self) -> usize {
        self.coord_width() * self.n_residues
    }

    /// Per residue: local coordinates, the nine frame entries, time
    /// embedding, context, mean coordinates over residues, position one-hot.
    /// The frame enters as a matrix because every 3-vector chart of SO(3) has
    /// a cut the FPE stencils would straddle.
    pub fn input_dim(&self) -> usize {
        2 * self.coord_width() + 9 + 2 * TIME_FREQS.len() + self.ctx_dim + self.n_residues
    }

    /// Per residue: coordinate offset, frame correction, type logits.
    pub fn output_dim(&self) -> usize {
        self.coord_width() + 3 + self.n_types
    }

    pub fn n_params(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        h * i + h + o * h + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_residues == 0 || self.atoms_per_residue == 0 || self.hidden == 0 || self.n_types < 2 {
            return Err(Error::invalid("architecture", "sizes must be positive and n_types >= 2"));
        }
        if self.n_params() > MAX_PARAMS {
            return Err(Error::invalid(
                "architecture",
                format!("{} parameters exceeds the cap of {MAX_PARAMS}", self.n_params()),
            ));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "residues={} atoms={} ctx={} hidden={} types={}",
            self.n_residues, self.atoms_per_residue, self.ctx_dim, self.hidden, self.n_types
        )
    }

    fn parse_descriptor(s: &str) -> Result<Self> {
        let mut vals = [None; 5];
        let keys = ["residues", "atoms", "ctx", "hidden", "types"];
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::invalid("checkpoint", format!("bad architecture field {tok:?}")))?;
            let idx = keys
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| Error::invalid("checkpoint", format!("unknown architecture field {k:?}")))?;
            let n: usize = v
                .parse()
                .map_err(|_| Error::invalid("checkpoint", format!("bad value for {k}: {v:?}")))?;
            vals[idx] = Some(n);
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::invalid("checkpoint", format!("missing {}", keys[i])));
        Ok(Architecture {
            n_residues: get(0)?,
            atoms_per_residue: get(1)?,
            ctx_dim: get(2)?,
            hidden: get(3)?,
            n_types: get(4)?,
        })
    }
}

/// Fixed-length conditioning vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Context(pub Vec<f64>);

/// Flat parameters laid out as `W1 (hidden × in, row-major) | b1 | W2 (out × hidden) | b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    arch: Architecture,
    theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x0: Vec<f64>,
    pub r0: Vec<Rotation>,
    pub v: Vec<TangentVector>,
    pub logits: Vec<Vec<f64>>,
}

struct Trace {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    /// Head outputs after the noise-level scaling.
    outputs: Vec<Vec<f64>>,
    scales: (f64, f64),
}

/// Multipliers of the coordinate and rotation correction heads:
/// `σ_X²(t)` and `σ_R²/(1 + σ_R²)`. Corrections vanish with the noise, so the
/// implied scores stay bounded as `t → 0`.
fn head_scales(schedules: &Schedules, t: f64) -> (f64, f64) {
    let r = schedules.so3.sigma2_of_t(t);
    (schedules.r3.sigma2(t), r / (1.0 + r))
}

impl DenoiserParams {
    /// Variance-scaled normal first layer, zero output heads.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = seeded(seed);
        let n_in = arch.input_dim();
        let scale = (1.0 / n_in as f64).sqrt();
        for w in &mut p.theta[..arch.hidden * n_in] {
            *w = scale * normal(&mut rng);
        }
        Ok(p)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(DenoiserParams {
            arch,
            theta: vec![0.0; arch.n_params()],
        })
    }

    pub fn from_vec(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.n_params() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} values, got {}", arch.n_params(), theta.len()),
            ));
        }
        ensure_finite(&theta, "parameters")?;
        Ok(DenoiserParams { arch, theta })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `θ ← θ - lr·g`; rejects a step that would leave non-finite parameters.
    pub fn apply_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.theta.len() {
            return Err(Error::invalid("gradient", "length does not match parameters"));
        }
        ensure_finite(grad, "gradient")?;
        for (p, g) in self.theta.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let a = &self.arch;
        let w1 = a.hidden * a.input_dim();
        let b1 = w1 + a.hidden;
        let w2 = b1 + a.output_dim() * a.hidden;
        (w1, b1, w2)
    }

    fn check_inputs(&self, state: &GeoState, ctx: &Context) -> Result<()> {
        let a = &self.arch;
        if state.n_residues() != a.n_residues || state.dim_x() != a.dim_x() {
            return Err(Error::invalid(
                "state",
                format!(
                    "expected {} residues and {} coordinates, got {} and {}",
                    a.n_residues,
                    a.dim_x(),
                    state.n_residues(),
                    state.dim_x()
                ),
            ));
        }
        if ctx.0.len() != a.ctx_dim {
            return Err(Error::invalid("context", format!("expected length {}", a.ctx_dim)));
        }
        Ok(())
    }

    fn features(&self, state: &GeoState, t: f64, ctx: &Context) -> Vec<Vec<f64>> {
        let a = &self.arch;
        let cw = a.coord_width();
        let n = a.n_residues;
        let mut mean = vec![0.0; cw];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(&state.x[i * cw..(i + 1) * cw]) {
                *m += x / n as f64;
            }
        }
        let mut time = Vec::with_capacity(2 * TIME_FREQS.len());
        for k in TIME_FREQS {
            time.push((k * PI * t).sin());
            time.push((k * PI * t).cos());
        }
        (0..n)
            .map(|i| {
                let mut f = Vec::with_capacity(a.input_dim());
                f.extend_from_slice(&state.x[i * cw..(i + 1) * cw]);
                f.extend(state.rotations[i].matrix().transpose().iter().copied());
                f.extend_from_slice(&time);
                f.extend_from_slice(&ctx.0);
                f.extend_from_slice(&mean);
                f.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                f
            })
            .collect()
    }

    fn forward(&self, schedules: &Schedules, state: &GeoState, t: f64, ctx: &Context) -> Result<Trace> {
        self.check_inputs(state, ctx)?;
        let a = &self.arch;
        let cw = a.coord_width();
        let scales = head_scales(schedules, t);
        let (n_in, h, n_out) = (a.input_dim(), a.hidden, a.output_dim());
        let (o_b1, o_w2, o_b2) = self.offsets();
        let th = &self.theta;
        let inputs = self.features(state, t, ctx);
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for f in &inputs {
            let hv: Vec<f64> = (0..h)
                .map(|j| {
                    let row = &th[j * n_in..(j + 1) * n_in];
                    let z: f64 = row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + th[o_b1 + j];
                    z.tanh()
                })
                .collect();
            let ov: Vec<f64> = (0..n_out)
                .map(|k| {
                    let row = &th[o_w2 + k * h..o_w2 + (k + 1) * h];
                    let z = row.iter().zip(&hv).map(|(w, x)| w * x).sum::<f64>() + th[o_b2 + k];
                    z * head_scale(scales, cw, k)
                })
                .collect();
            hidden.push(hv);
            outputs.push(ov);
        }
        Ok(Trace {
            inputs,
            hidden,
            outputs,
            scales,
        })
    }

    /// Accumulate `Σ_i (∂out_i/∂θ)ᵀ d_out[i]` into `grad`.
    fn backward(&self, trace: &Trace, d_out: &[Vec<f64>], grad: &mut [f64]) {
        let a = &self.arch;
        let (n_in, h, n_out) = (a.input_dim(), a.hidden, a.output_dim());
        let (o_b1, o_w2, o_b2) = self.offsets();
        let th = &self.theta;
        let cw = a.coord_width();
        for ((f, hv), d) in trace.inputs.iter().zip(&trace.hidden).zip(d_out) {
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut dh = vec![0.0; h];
            for k in 0..n_out {
                let dk = d[k] * head_scale(trace.scales, cw, k);
                if dk == 0.0 {
                    continue;
                }
                grad[o_b2 + k] += dk;
                let row = o_w2 + k * h;
                for j in 0..h {
                    grad[row + j] += dk * hv[j];
                    dh[j] += dk * th[row + j];
                }
            }
            for j in 0..h {
                let dz = dh[j] * (1.0 - hv[j] * hv[j]);
                if dz == 0.0 {
                    continue;
                }
                grad[o_b1 + j] += dz;
                let row = j * n_in;
                for (g, x) in grad[row..row + n_in].iter_mut().zip(f) {
                    *g += dz * x;
                }
            }
        }
    }

    fn prediction(&self, state: &GeoState, trace: &Trace) -> Prediction {
        let cw = self.arch.coord_width();
        let mut x0 = state.x.clone();
        let mut r0 = Vec::with_capacity(trace.outputs.len());
        let mut v = Vec::with_capacity(trace.outputs.len());
        let mut logits = Vec::with_capacity(trace.outputs.len());
        for (i, out) in trace.outputs.iter().enumerate() {
            for c in 0..cw {
                x0[i * cw + c] += out[c];
            }
            let vi = TangentVector::new(out[cw], out[cw + 1], out[cw + 2]);
            r0.push((state.rotations[i] * exp_map(&vi)).renormalized());
            v.push(vi);
            logits.push(out[cw + 3..].to_vec());
        }
        Prediction { x0, r0, v, logits }
    }

    /// `X₀ = X_t + Δx`, `R₀,i = R_t,i·exp(v_i)` and per-residue type logits,
    /// with `Δx` and `v` scaled by the noise level at `t`.
    pub fn predict_clean(&self, schedules: &Schedules, state: &GeoState, t: f64, ctx: &Context) -> Result<Prediction> {
        let trace = self.forward(schedules, state, t, ctx)?;
        Ok(self.prediction(state, &trace))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "architecture {}", self.arch.descriptor());
        let _ = writeln!(s, "parameters {}", self.theta.len());
        for v in &self.theta {
            let _ = writeln!(s, "{v:e}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::invalid("checkpoint", "missing header line"));
        }
        let arch = lines
            .next()
            .and_then(|l| l.strip_prefix("architecture "))
            .ok_or_else(|| Error::invalid("checkpoint", "missing architecture line"))
            .and_then(Architecture::parse_descriptor)?;
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("parameters "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::invalid("checkpoint", "missing parameter count"))?;
        let theta = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("checkpoint", format!("bad parameter {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if theta.len() != count {
            return Err(Error::invalid(
                "checkpoint",
                format!("header says {count} parameters, found {}", theta.len()),
            ));
        }
        Self::from_vec(arch, theta)
    }
}

fn head_scale(scales: (f64, f64), cw: usize, k: usize) -> f64 {
    if k < cw {
        scales.0
    } else if k < cw + 3 {
        scales.1
    } else {
        1.0
    }
}

/// Representative of `v` with norm at most π and the Jacobian of that map.
fn principal(v: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let w = v.norm();
    let k = (w / (2.0 * PI)).round();
    if k == 0.0 {
        return (*v, Matrix3::identity());
    }
    let c = 1.0 - 2.0 * PI * k / w;
    let jac = Matrix3::identity() * c + v * v.transpose() * ((1.0 - c) / (w * w));
    (v * c, jac)
}

/// Per-residue implied frame score and its Jacobian with respect to `v`.
/// The relative rotation is `R₀ᵀR_t = exp(-v)`.
fn frame_score(v: &TangentVector, p: &IgSo3Params) -> (TangentVector, Matrix3<f64>) {
    let (w, jp) = principal(&-v.0);
    let w = TangentVector(w);
    let s = score_from_relative(&w, p);
    let js = score_jacobian_from_relative(&w, p);
    (s, -(js * jp))
}

fn check_time(schedules: &Schedules, t: f64) -> Result<()> {
    let t_eps = schedules.r3.t_eps.max(schedules.so3.t_eps);
    if !(t >= t_eps && t <= 1.0) {
        return Err(Error::Domain {
            name: "t",
            value: t,
            domain: "[t_eps, 1]",
        });
    }
    Ok(())
}

fn implied_from_prediction(
    schedules: &Schedules,
    state: &GeoState,
    pred: &Prediction,
    t: f64,
) -> Result<ScoreEval> {
    let (alpha, sigma2) = schedules.r3.kernel_params(t);
    let s_x = state
        .x
        .iter()
        .zip(&pred.x0)
        .map(|(&x, &m)| -(x - alpha * m) / sigma2)
        .collect();
    let p = schedules.so3.kernel(t)?;
    let s_r = pred.v.iter().map(|v| frame_score(v, &p).0).collect();
    Ok(ScoreEval { s_x, s_r })
}

/// Scores of the forward kernels evaluated at the predicted clean state.
pub fn implied_score(
    params: &DenoiserParams,
    schedules: &Schedules,
    state: &GeoState,
    t: f64,
    ctx: &Context,
) -> Result<ScoreEval> {
    check_time(schedules, t)?;
    let pred = params.predict_clean(schedules, state, t, ctx)?;
    implied_from_prediction(schedules, state, &pred, t)
}

/// Implied scores and the per-position type posterior from one forward pass.
pub fn joint_query(
    params: &DenoiserParams,
    schedules: &Schedules,
    state: &GeoState,
    a_t: &[usize],
    t: f64,
    ctx: &Context,
) -> Result<(ScoreEval, Vec<Vec<f64>>)> {
    check_time(schedules, t)?;
    if a_t.len() != params.arch.n_residues || a_t.iter().any(|&a| a >= params.arch.n_types) {
        return Err(Error::invalid("sequence", "length or type index does not match the model"));
    }
    let pred = params.predict_clean(schedules, state, t, ctx)?;
    let scores = implied_from_prediction(schedules, state, &pred, t)?;
    let post = pred
        .logits
        .iter()
        .zip(a_t)
        .map(|(l, &a)| posterior_from_logits(&schedules.seq, l, a, t))
        .collect();
    Ok((scores, post))
}

/// The model's implied score as a [`ScoreField`]. Invalid queries evaluate
/// to NaN so downstream finiteness checks reject them.
pub struct ModelField<'a> {
    pub params: &'a DenoiserParams,
    pub schedules: Schedules,
    pub ctx: &'a Context,
}

impl ModelField<'_> {
    fn eval_checked(&self, state: &GeoState, t: f64) -> ScoreEval {
        implied_score(self.params, &self.schedules, state, t, self.ctx).unwrap_or_else(|_| ScoreEval {
            s_x: vec![f64::NAN; state.dim_x()],
            s_r: vec![TangentVector(Vector3::repeat(f64::NAN)); state.n_residues()],
        })
    }

    /// Accumulate the parameter gradient of `Σ ⟨cotangent, field output⟩`.
    pub fn pullback(&self, cotangents: &[Cotangent], grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient", "length does not match parameters"));
        }
        let cw = self.params.arch.coord_width();
        let n_out = self.params.arch.output_dim();
        for c in cotangents {
            check_time(&self.schedules, c.t)?;
            let trace = self.params.forward(&self.schedules, &c.state, c.t, self.ctx)?;
            let (alpha, sigma2) = self.schedules.r3.kernel_params(c.t);
            let p = self.schedules.so3.kernel(c.t)?;
            let mut d_out = vec![vec![0.0; n_out]; trace.outputs.len()];
            for (i, d) in d_out.iter_mut().enumerate() {
                if !c.d_x.is_empty() {
                    for k in 0..cw {
                        d[k] = c.d_x[i * cw + k] * alpha / sigma2;
                    }
                }
                if !c.d_r.is_empty() {
                    let out = &trace.outputs[i];
                    let v = TangentVector::new(out[cw], out[cw + 1], out[cw + 2]);
                    let (_, jac) = frame_score(&v, &p);
                    let dv = jac.transpose() * c.d_r[i].0;
                    d[cw..cw + 3].copy_from_slice(dv.as_slice());
                }
            }
            self.params.backward(&trace, &d_out, grad);
        }
        Ok(())
    }
}

impl ScoreField for ModelField<'_> {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        self.eval_checked(state, t).s_x
    }
    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector> {
        self.eval_checked(state, t).s_r
    }
    fn eval(&self, state: &GeoState, t: f64) -> ScoreEval {
        self.eval_checked(state, t)
    }
    fn origin(&self) -> FieldOrigin {
        FieldOrigin::ModelImplied
    }
}

/// One corrupted training example with its clean source.
#[derive(Clone, Debug, PartialEq)]
pub struct FidelityItem {
    pub x0: Vec<f64>,
    pub r0: Vec<Rotation>,
    pub a0: Vec<usize>,
    pub state: GeoState,
    pub a_t: Vec<usize>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityEval {
    pub dsm_x: f64,
    pub dsm_r: f64,
    pub ce: f64,
    /// `dsm_x + dsm_r + ce_weight·ce`.
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityOptions {
    pub ce_weight: f64,
    /// Compare `Exp(σ_R²(t)·s)` instead of `Exp(s)`. Unscaled scores grow
    /// like `1/σ²` at low noise, where `Exp` wraps many times.
    pub scale_rot_scores: bool,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        FidelityOptions {
            ce_weight: 0.4,
            scale_rot_scores: true,
        }
    }
}

/// Batch-mean fidelity loss and its exact gradient.
///
/// Per item: `dsm_x` is the mean squared coordinate error of `X₀`, `dsm_r`
/// the residue mean of `‖Exp(c·s_true) - Exp(c·s_θ)‖²_F` with `s_true` the
/// kernel score at the true clean frame and `c` either 1 or `σ_R²(t)`,
/// `ce` the residue mean of `-ln p(a₀ | a_t)` under the logit posterior.
pub fn fidelity_grad(
    params: &DenoiserParams,
    batch: &[FidelityItem],
    schedules: &Schedules,
    ctx: &Context,
    opts: &FidelityOptions,
) -> Result<FidelityEval> {
    let ce_weight = opts.ce_weight;
    if batch.is_empty() {
        return Err(Error::invalid("fidelity batch", "must be nonempty"));
    }
    let arch = params.arch;
    if schedules.seq.n_types != arch.n_types {
        return Err(Error::invalid("fidelity batch", "sequence schedule and model disagree on n_types"));
    }
    let cw = arch.coord_width();
    let n = arch.n_residues;
    let dim_x = arch.dim_x() as f64;
    let nb = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let (mut dsm_x, mut dsm_r, mut ce) = (0.0, 0.0, 0.0);

    for item in batch {
        check_time(schedules, item.t)?;
        if item.x0.len() != arch.dim_x() || item.r0.len() != n || item.a0.len() != n || item.a_t.len() != n {
            return Err(Error::invalid("fidelity item", "inconsistent sizes"));
        }
        if item.a0.iter().chain(&item.a_t).any(|&a| a >= arch.n_types) {
            return Err(Error::invalid("fidelity item", "type index out of range"));
        }
        let trace = params.forward(schedules, &item.state, item.t, ctx)?;
        let pred = params.prediction(&item.state, &trace);
        let p = schedules.so3.kernel(item.t)?;
        let c = if opts.scale_rot_scores { p.sigma2 } else { 1.0 };
        let mut d_out = vec![vec![0.0; arch.output_dim()]; n];

        for (k, (&truth, &guess)) in item.x0.iter().zip(&pred.x0).enumerate() {
            let err = guess - truth;
            dsm_x += err * err / (dim_x * nb);
            d_out[k / cw][k % cw] = 2.0 * err / (dim_x * nb);
        }

        for i in 0..n {
            let s_true = crate::igso3::score(&item.r0[i], &item.state.rotations[i], &p);
            let (b, jac) = frame_score(&pred.v[i], &p);
            let (s_true, b, jac) = (s_true * c, b * c, jac * c);
            let am = exp_map(&s_true);
            let bm = exp_map(&b);
            let m = am.transpose() * bm;
            dsm_r += (6.0 - 2.0 * m.trace()) / (n as f64 * nb);
            let jr = right_jacobian(&b);
            let mut db = Vector3::zeros();
            for j in 0..3 {
                let u = jr.column(j).into_owned();
                db[j] = -2.0 * (m.matrix() * hat(&u)).trace() / (n as f64 * nb);
            }
            let dv = jac.transpose() * db;
            d_out[i][cw..cw + 3].copy_from_slice(dv.as_slice());

            let post = posterior_from_logits(&schedules.seq, &pred.logits[i], item.a_t[i], item.t);
            let a0 = item.a0[i];
            ce += -post[a0].ln() / (n as f64 * nb);
            if ce_weight != 0.0 {
                for (k, &pk) in post.iter().enumerate() {
                    let onehot = if k == a0 { 1.0 } else { 0.0 };
                    d_out[i][cw + 3 + k] = ce_weight * (pk - onehot) / (n as f64 * nb);
                }
            }
        }
        params.backward(&trace, &d_out, &mut grad);
    }
    let loss = dsm_x + dsm_r + ce_weight * ce;
    if !loss.is_finite() {
        return Err(Error::NonFinite("fidelity loss"));
    }
    Ok(FidelityEval {
        dsm_x,
        dsm_r,
        ce,
        loss,
        grad,
    })
}

#[cfg(test)]
mod tests;
