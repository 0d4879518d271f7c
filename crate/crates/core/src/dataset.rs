//! Toy product-mixture datasets over coordinates, frames and sequences, with
//! exact marginal scores and clean-token posteriors.
//!
//! Each component `k` draws coordinates from `N(μ_k, v I)`, each frame from
//! `IGSO(3)(M_{k,i}, σ₀²)` (or Haar when the component has no modes) and each
//! residue type independently from a per-position categorical. Given the
//! component the three parts are independent, so under the forward processes
//! every factor stays closed form.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion_r3::{log_sum_exp, softmax, GaussianMixture};
use crate::error::{Error, Result};
use crate::igso3::{self, IgSo3Params, IgSo3Sampler};
use crate::rng::{normal, seeded, substream};
use crate::score_fpe::{FieldOrigin, ScoreEval, ScoreField};
use crate::seq_ctmc::{bayes_posterior, N_AMINO_ACIDS};
use crate::so3::{exp_map, geodesic_distance, log_map, sample_haar, Rotation, TangentVector};
use crate::state::{GeoState, Schedules};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussMixR3,
    Igso3Modes,
    FrameChain,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::GaussMixR3 => "gauss-mix-r3",
            DatasetKind::Igso3Modes => "igso3-modes",
            DatasetKind::FrameChain => "frame-chain",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss-mix-r3" => Ok(DatasetKind::GaussMixR3),
            "igso3-modes" => Ok(DatasetKind::Igso3Modes),
            "frame-chain" => Ok(DatasetKind::FrameChain),
            other => Err(Error::invalid(
                "dataset kind",
                format!("unknown dataset {other:?}; expected gauss-mix-r3, igso3-modes or frame-chain"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_residues: usize,
    /// Ignored by `frame-chain`, which always has two.
    pub n_components: usize,
    /// Per-axis coordinate variance within a component.
    pub coord_var: f64,
    /// Scale of the component means.
    pub separation: f64,
    /// IGSO(3) variance of frames around their mode.
    pub frame_var: f64,
    /// Probability of the preferred type at each position (`frame-chain`).
    pub motif_prob: f64,
    pub n_types: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::FrameChain,
            n_residues: 4,
            n_components: 2,
            coord_var: 0.05,
            separation: 1.0,
            frame_var: 0.05,
            motif_prob: 0.85,
            n_types: N_AMINO_ACIDS,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_residues == 0 || self.n_components == 0 {
            return Err(Error::invalid("dataset", "need at least one residue and one component"));
        }
        if !(self.coord_var >= 0.0 && self.coord_var.is_finite()) || !(self.frame_var >= 0.0 && self.frame_var.is_finite()) {
            return Err(Error::invalid("dataset", "variances must be finite and nonnegative"));
        }
        if !self.separation.is_finite() {
            return Err(Error::invalid("dataset", "separation must be finite"));
        }
        if self.n_types < 2 {
            return Err(Error::invalid("dataset", "need at least two residue types"));
        }
        if !(self.motif_prob > 0.0 && self.motif_prob < 1.0) {
            return Err(Error::invalid("dataset", "motif_prob must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// `None` means Haar-distributed frames.
    pub modes: Option<Vec<Rotation>>,
    /// Per-position type probabilities.
    pub types: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Generating component; `None` for model or sampler output.
    pub component: Option<usize>,
    pub x: Vec<f64>,
    pub rotations: Vec<Rotation>,
    pub types: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ProductMixture {
    pub components: Vec<Component>,
    pub coord_var: f64,
    pub frame_var: f64,
    pub n_residues: usize,
    pub n_types: usize,
    sampler: Option<IgSo3Sampler>,
}

fn uniform_rows(n: usize, k: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / k as f64; k]; n]
}

fn motif_rows(motif: &[usize], k: usize, p: f64) -> Vec<Vec<f64>> {
    motif
        .iter()
        .map(|&m| (0..k).map(|a| if a == m { p } else { (1.0 - p) / (k - 1) as f64 }).collect())
        .collect()
}

impl ProductMixture {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_residues;
        let k = spec.n_types;
        let mut rng = seeded(spec.seed);
        let components = match spec.kind {
            DatasetKind::GaussMixR3 => {
                let w = 1.0 / spec.n_components as f64;
                (0..spec.n_components)
                    .map(|_| Component {
                        weight: w,
                        mean: (0..3 * n).map(|_| spec.separation * normal(&mut rng)).collect(),
                        modes: None,
                        types: uniform_rows(n, k),
                    })
                    .collect()
            }
            DatasetKind::Igso3Modes => {
                let w = 1.0 / spec.n_components as f64;
                (0..spec.n_components)
                    .map(|_| Component {
                        weight: w,
                        mean: vec![0.0; 3 * n],
                        modes: Some((0..n).map(|_| sample_haar(&mut rng)).collect()),
                        types: uniform_rows(n, k),
                    })
                    .collect()
            }
            DatasetKind::FrameChain => {
                // A straight chain along x with frames twisting about it, and
                // a helix whose frames follow the tangent.
                let c = 0.5 * (n as f64 - 1.0);
                let straight = (0..n)
                    .flat_map(|i| [spec.separation * (i as f64 - c), 0.0, 0.0])
                    .collect();
                let helix = (0..n)
                    .flat_map(|i| {
                        let a = 1.2 * i as f64;
                        [
                            spec.separation * a.cos(),
                            spec.separation * a.sin(),
                            spec.separation * 0.5 * (i as f64 - c),
                        ]
                    })
                    .collect();
                let twist = (0..n)
                    .map(|i| exp_map(&TangentVector::new(0.5 * i as f64, 0.0, 0.0)))
                    .collect();
                let turn = exp_map(&TangentVector::new(0.0, 0.5 * std::f64::consts::PI, 0.0));
                let tangent = (0..n)
                    .map(|i| turn * exp_map(&TangentVector::new(0.0, 0.0, -1.2 * i as f64)))
                    .collect();
                let m0: Vec<usize> = (0..n).map(|i| (3 * i) % k).collect();
                let m1: Vec<usize> = (0..n).map(|i| (3 * i + k / 2) % k).collect();
                vec![
                    Component {
                        weight: 0.5,
                        mean: straight,
                        modes: Some(twist),
                        types: motif_rows(&m0, k, spec.motif_prob),
                    },
                    Component {
                        weight: 0.5,
                        mean: helix,
                        modes: Some(tangent),
                        types: motif_rows(&m1, k, spec.motif_prob),
                    },
                ]
            }
        };
        let sampler = if spec.frame_var > 0.0 {
            Some(IgSo3Sampler::new(IgSo3Params::new(spec.frame_var)?))
        } else {
            None
        };
        Ok(ProductMixture {
            components,
            coord_var: spec.coord_var,
            frame_var: spec.frame_var,
            n_residues: n,
            n_types: k,
            sampler,
        })
    }

    pub fn dim_x(&self) -> usize {
        3 * self.n_residues
    }

    /// The coordinate marginal as a general Gaussian mixture.
    pub fn coord_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::isotropic(
            self.components.iter().map(|c| c.weight).collect(),
            self.components.iter().map(|c| c.mean.clone()).collect(),
            self.coord_var,
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &self.components[k];
        let sd = self.coord_var.sqrt();
        let x = c.mean.iter().map(|m| m + sd * normal(rng)).collect();
        let rotations = match (&c.modes, &self.sampler) {
            (None, _) => (0..self.n_residues).map(|_| sample_haar(rng)).collect(),
            (Some(modes), Some(s)) => modes.iter().map(|m| s.sample(m, rng).renormalized()).collect(),
            (Some(modes), None) => modes.clone(),
        };
        let types = c
            .types
            .iter()
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (a, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return a;
                    }
                }
                row.len() - 1
            })
            .collect();
        Sample {
            component: Some(k),
            x,
            rotations,
            types,
        }
    }

    /// `n` samples from the substream `stream` of `seed`.
    pub fn generate(&self, n: usize, seed: u64, stream: u64) -> Vec<Sample> {
        let mut rng = substream(seed, stream);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    fn frame_params(&self, schedules: &Schedules, t: f64) -> Result<IgSo3Params> {
        IgSo3Params::new(self.frame_var + schedules.so3.sigma2_of_t(t))
    }

    fn check_state(&self, state: &GeoState, a_t: Option<&[usize]>) -> Result<()> {
        if state.dim_x() != self.dim_x() || state.n_residues() != self.n_residues {
            return Err(Error::invalid("state", "does not match the dataset shape"));
        }
        if let Some(a) = a_t {
            if a.len() != self.n_residues || a.iter().any(|&v| v >= self.n_types) {
                return Err(Error::invalid("sequence", "does not match the dataset shape"));
            }
        }
        Ok(())
    }

    /// Per-component log joint density of the noisy state at time `t`,
    /// including `log w_k`; sequences enter only when `a_t` is given.
    fn log_joint(&self, schedules: &Schedules, state: &GeoState, a_t: Option<&[usize]>, t: f64) -> Result<Vec<f64>> {
        self.check_state(state, a_t)?;
        let (alpha, sigma2) = schedules.r3.kernel_params(t);
        let s = alpha * alpha * self.coord_var + sigma2;
        if !(s > 0.0) {
            return Err(Error::invalid("oracle", "coordinate marginal is degenerate at this time"));
        }
        let d = self.dim_x() as f64;
        let fp = if self.components.iter().any(|c| c.modes.is_some()) {
            Some(self.frame_params(schedules, t)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let r2: f64 = state.x.iter().zip(&c.mean).map(|(x, m)| (x - alpha * m).powi(2)).sum();
            let mut l = c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * r2 / s;
            if let (Some(modes), Some(p)) = (&c.modes, &fp) {
                for (m, r) in modes.iter().zip(&state.rotations) {
                    l += igso3::log_density(geodesic_distance(m, r), p).value;
                }
            }
            if let Some(a) = a_t {
                for (row, &at) in c.types.iter().zip(a) {
                    let q: f64 = row
                        .iter()
                        .enumerate()
                        .map(|(a0, p)| p * schedules.seq.transition(t, a0, at))
                        .sum();
                    l += q.ln();
                }
            }
            out.push(l);
        }
        Ok(out)
    }

    pub fn responsibilities(
        &self,
        schedules: &Schedules,
        state: &GeoState,
        a_t: Option<&[usize]>,
        t: f64,
    ) -> Result<Vec<f64>> {
        Ok(softmax(&self.log_joint(schedules, state, a_t, t)?))
    }

    pub fn log_density(&self, schedules: &Schedules, state: &GeoState, a_t: Option<&[usize]>, t: f64) -> Result<f64> {
        Ok(log_sum_exp(&self.log_joint(schedules, state, a_t, t)?))
    }

    /// Exact score of the noisy structure density, conditioned on `a_t` when given.
    pub fn score(&self, schedules: &Schedules, state: &GeoState, a_t: Option<&[usize]>, t: f64) -> Result<ScoreEval> {
        let gamma = self.responsibilities(schedules, state, a_t, t)?;
        let (alpha, sigma2) = schedules.r3.kernel_params(t);
        let s = alpha * alpha * self.coord_var + sigma2;
        let mut s_x = vec![0.0; self.dim_x()];
        let mut s_r = vec![TangentVector::ZERO; self.n_residues];
        let fp = self.frame_params(schedules, t).ok();
        for (g, c) in gamma.iter().zip(&self.components) {
            for ((o, x), m) in s_x.iter_mut().zip(&state.x).zip(&c.mean) {
                *o -= g * (x - alpha * m) / s;
            }
            if let (Some(modes), Some(p)) = (&c.modes, &fp) {
                for ((o, m), r) in s_r.iter_mut().zip(modes).zip(&state.rotations) {
                    *o += igso3::score(m, r, p) * *g;
                }
            }
        }
        Ok(ScoreEval { s_x, s_r })
    }

    /// Exact `p(a₀,i | T_t, A_t)` for every position.
    pub fn clean_posterior(
        &self,
        schedules: &Schedules,
        state: &GeoState,
        a_t: &[usize],
        t: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let gamma = self.responsibilities(schedules, state, Some(a_t), t)?;
        let mut out = vec![vec![0.0; self.n_types]; self.n_residues];
        for (g, c) in gamma.iter().zip(&self.components) {
            for ((row, prior), &at) in out.iter_mut().zip(&c.types).zip(a_t) {
                for (o, p) in row.iter_mut().zip(bayes_posterior(&schedules.seq, prior, at, t)) {
                    *o += g * p;
                }
            }
        }
        Ok(out)
    }

    /// Most probable component of a clean sample, judged at `t_eps`.
    pub fn assign(&self, schedules: &Schedules, sample: &Sample) -> Result<usize> {
        let state = GeoState::new(sample.x.clone(), sample.rotations.clone())?;
        let g = self.responsibilities(schedules, &state, Some(&sample.types), schedules.r3.t_eps)?;
        Ok(argmax(&g))
    }

    /// Distribution-recovery statistics of `samples` against this mixture.
    pub fn recovery(&self, schedules: &Schedules, samples: &[Sample]) -> Result<RecoveryMetrics> {
        if samples.is_empty() {
            return Err(Error::invalid("recovery", "no samples"));
        }
        let n = samples.len() as f64;
        let d = self.dim_x();
        let mut mean = vec![0.0; d];
        let mut second = 0.0;
        for s in samples {
            for (m, x) in mean.iter_mut().zip(&s.x) {
                *m += x / n;
            }
            second += s.x.iter().map(|v| v * v).sum::<f64>() / n;
        }
        let mut true_mean = vec![0.0; d];
        let mut true_second = d as f64 * self.coord_var;
        for c in &self.components {
            for (m, v) in true_mean.iter_mut().zip(&c.mean) {
                *m += c.weight * v;
            }
            true_second += c.weight * c.mean.iter().map(|v| v * v).sum::<f64>();
        }
        let scale = true_second.sqrt().max(1e-12);
        let mean_error = mean.iter().zip(&true_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / scale;
        let second_moment_error = (second - true_second).abs() / true_second.max(1e-12);

        let mut counts = vec![0usize; self.components.len()];
        let mut frame_errs = Vec::new();
        let mut motif_hits = 0usize;
        for s in samples {
            let k = self.assign(schedules, s)?;
            counts[k] += 1;
            let c = &self.components[k];
            if let Some(modes) = &c.modes {
                frame_errs.extend(modes.iter().zip(&s.rotations).map(|(m, r)| geodesic_distance(m, r)));
            }
            motif_hits += c.types.iter().zip(&s.types).filter(|(row, &a)| argmax(row) == a).count();
        }
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let fraction_error = fractions
            .iter()
            .zip(&self.components)
            .map(|(f, c)| (f - c.weight).abs())
            .fold(0.0, f64::max);
        frame_errs.sort_by(|a, b| a.total_cmp(b));
        let frame_error_median = if frame_errs.is_empty() {
            f64::NAN
        } else {
            frame_errs[frame_errs.len() / 2]
        };
        Ok(RecoveryMetrics {
            n: samples.len(),
            mean_error,
            second_moment_error,
            fractions,
            fraction_error,
            frame_error_median,
            motif_recovery: motif_hits as f64 / (n * self.n_residues as f64),
        })
    }
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

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    pub n: usize,
    /// `‖mean - E[x]‖ / √E‖x‖²`.
    pub mean_error: f64,
    pub second_moment_error: f64,
    pub fractions: Vec<f64>,
    /// Largest absolute gap between assignment fractions and weights.
    pub fraction_error: f64,
    /// Median geodesic distance of frames to their assigned mode.
    pub frame_error_median: f64,
    /// Fraction of positions carrying the assigned component's preferred type.
    pub motif_recovery: f64,
}

/// Exact structure score of a [`ProductMixture`], optionally conditioned on
/// a fixed noisy sequence.
pub struct OracleField<'a> {
    pub mixture: &'a ProductMixture,
    pub schedules: Schedules,
    pub a_t: Option<Vec<usize>>,
}

impl OracleField<'_> {
    fn eval_or_nan(&self, state: &GeoState, t: f64) -> ScoreEval {
        self.mixture
            .score(&self.schedules, state, self.a_t.as_deref(), t)
            .unwrap_or_else(|_| ScoreEval {
                s_x: vec![f64::NAN; state.dim_x()],
                s_r: vec![TangentVector(Vector3::repeat(f64::NAN)); state.n_residues()],
            })
    }
}

impl ScoreField for OracleField<'_> {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        self.eval_or_nan(state, t).s_x
    }
    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector> {
        self.eval_or_nan(state, t).s_r
    }
    fn eval(&self, state: &GeoState, t: f64) -> ScoreEval {
        self.eval_or_nan(state, t)
    }
    fn origin(&self) -> FieldOrigin {
        FieldOrigin::MixtureOracle
    }
}

/// Frames as tangent coordinates, for compact logging.
pub fn frames_to_log(rotations: &[Rotation]) -> Vec<f64> {
    rotations.iter().flat_map(|r| log_map(r).0.iter().copied().collect::<Vec<_>>()).collect()
}
