//! Fokker–Planck-consistent score diffusion on ℝ^D × SO(3)^N, with a
//! uniform-noising CTMC over residue types.

// Negated comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod dataset;
pub mod diffusion_r3;
pub mod diffusion_so3;
pub mod error;
pub mod igso3;
pub mod rng;
pub mod sampler;
pub mod score_fpe;
pub mod seq_ctmc;
pub mod so3;
pub mod state;
pub mod toy_model;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
pub use state::{GeoState, Schedules};
