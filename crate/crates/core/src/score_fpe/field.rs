use crate::diffusion_r3::{GaussianMixture, NoiseScheduleR3};
use crate::so3::{Rotation, TangentVector};
use crate::state::{GeoState, Schedules};
use crate::igso3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldOrigin {
    ExactKernel,
    MixtureOracle,
    ModelImplied,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEval {
    pub s_x: Vec<f64>,
    pub s_r: Vec<TangentVector>,
}

/// A time-dependent score field on coordinates and frames. Rotational
/// scores are body-frame coefficients in the tangent space at each frame.
pub trait ScoreField {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64>;
    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector>;

    fn eval(&self, state: &GeoState, t: f64) -> ScoreEval {
        ScoreEval {
            s_x: self.eval_x(state, t),
            s_r: self.eval_r(state, t),
        }
    }

    fn origin(&self) -> FieldOrigin;
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        (**self).eval_x(state, t)
    }
    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector> {
        (**self).eval_r(state, t)
    }
    fn eval(&self, state: &GeoState, t: f64) -> ScoreEval {
        (**self).eval(state, t)
    }
    fn origin(&self) -> FieldOrigin {
        (**self).origin()
    }
}

pub struct ZeroField;

impl ScoreField for ZeroField {
    fn eval_x(&self, state: &GeoState, _t: f64) -> Vec<f64> {
        vec![0.0; state.dim_x()]
    }
    fn eval_r(&self, state: &GeoState, _t: f64) -> Vec<TangentVector> {
        vec![TangentVector::ZERO; state.n_residues()]
    }
    fn origin(&self) -> FieldOrigin {
        FieldOrigin::Synthetic
    }
}

/// Scores of the forward transition kernels from a known clean state.
#[derive(Clone, Debug)]
pub struct KernelField {
    pub schedules: Schedules,
    pub x0: Vec<f64>,
    pub r0: Vec<Rotation>,
}

impl ScoreField for KernelField {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        let (alpha, sigma2) = self.schedules.r3.kernel_params(t);
        state
            .x
            .iter()
            .zip(&self.x0)
            .map(|(&x, &m)| -(x - alpha * m) / sigma2)
            .collect()
    }

    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector> {
        match self.schedules.so3.kernel(t) {
            Ok(p) => state
                .rotations
                .iter()
                .zip(&self.r0)
                .map(|(rt, r0)| igso3::score(r0, rt, &p))
                .collect(),
            Err(_) => vec![TangentVector(nalgebra::Vector3::repeat(f64::NAN)); state.n_residues()],
        }
    }

    fn origin(&self) -> FieldOrigin {
        FieldOrigin::ExactKernel
    }
}

/// Exact marginal score of a Gaussian-mixture coordinate prior. Frames are
/// treated as Haar-distributed, so their score is zero.
#[derive(Clone, Debug)]
pub struct MixtureField {
    pub schedule: NoiseScheduleR3,
    pub mixture: GaussianMixture,
}

impl ScoreField for MixtureField {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        let (alpha, sigma2) = self.schedule.kernel_params(t);
        match self.mixture.marginal(alpha, sigma2) {
            Ok(m) => m.score(&state.x),
            Err(_) => vec![f64::NAN; state.dim_x()],
        }
    }

    fn eval_r(&self, state: &GeoState, _t: f64) -> Vec<TangentVector> {
        vec![TangentVector::ZERO; state.n_residues()]
    }

    fn origin(&self) -> FieldOrigin {
        FieldOrigin::MixtureOracle
    }
}

/// `factor · inner`; scaling an exact score breaks the quadratic term of the
/// score dynamics, which makes it a negative control.
pub struct ScaledField<F> {
    pub inner: F,
    pub factor: f64,
}

impl<F: ScoreField> ScoreField for ScaledField<F> {
    fn eval_x(&self, state: &GeoState, t: f64) -> Vec<f64> {
        self.inner.eval_x(state, t).into_iter().map(|v| v * self.factor).collect()
    }
    fn eval_r(&self, state: &GeoState, t: f64) -> Vec<TangentVector> {
        self.inner.eval_r(state, t).into_iter().map(|v| v * self.factor).collect()
    }
    fn origin(&self) -> FieldOrigin {
        FieldOrigin::Synthetic
    }
}
