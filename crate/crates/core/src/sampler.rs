//! Joint reverse-time generation: Euler–Maruyama on coordinates, geodesic
//! random walk on frames and tau-leaping on residue types, all on one clock.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{ProductMixture, Sample};
use crate::diffusion_r3::reverse_em_update;
use crate::diffusion_so3::reverse_update;
use crate::error::{Error, Result};
use crate::rng::{normal_vec, substream};
use crate::score_fpe::ScoreEval;
use crate::seq_ctmc::{reverse_rates, tau_leap_step, SeqState};
use crate::so3::{log_map, sample_haar, Rotation};
use crate::state::{GeoState, Schedules};
use crate::toy_model::{joint_query, Context, DenoiserParams};
use rand::Rng;

/// States kept for the dump written when a trajectory blows up.
const DUMP_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub num_steps: usize,
    pub num_samples: usize,
    /// Drop the diffusion noise on both structure manifolds. Types are still
    /// drawn from the seeded stream.
    pub deterministic: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            num_steps: 500,
            num_samples: 1000,
            deterministic: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("sampling", "num_samples must be positive"));
        }
        Ok(())
    }
}

/// Supplies structure scores and the clean-type posterior for the reverse loop.
pub trait JointDriver {
    fn query(&self, state: &GeoState, a_t: &[usize], t: f64) -> Result<(ScoreEval, Vec<Vec<f64>>)>;
}

pub struct ModelDriver<'a> {
    pub params: &'a DenoiserParams,
    pub schedules: Schedules,
    pub ctx: &'a Context,
}

impl JointDriver for ModelDriver<'_> {
    fn query(&self, state: &GeoState, a_t: &[usize], t: f64) -> Result<(ScoreEval, Vec<Vec<f64>>)> {
        joint_query(self.params, &self.schedules, state, a_t, t, self.ctx)
    }
}

/// Exact joint scores of the generating mixture, conditioned on the current types.
pub struct OracleDriver<'a> {
    pub mixture: &'a ProductMixture,
    pub schedules: Schedules,
}

impl JointDriver for OracleDriver<'_> {
    fn query(&self, state: &GeoState, a_t: &[usize], t: f64) -> Result<(ScoreEval, Vec<Vec<f64>>)> {
        let scores = self.mixture.score(&self.schedules, state, Some(a_t), t)?;
        let post = self.mixture.clean_posterior(&self.schedules, state, a_t, t)?;
        Ok((scores, post))
    }
}

/// Draw from the terminal distribution: standard normal coordinates, Haar
/// frames, uniform types.
pub fn prior_draw<R: Rng + ?Sized>(
    dim_x: usize,
    n_residues: usize,
    n_types: usize,
    rng: &mut R,
) -> (GeoState, Vec<usize>) {
    let x = normal_vec(rng, dim_x);
    let rotations = (0..n_residues).map(|_| sample_haar(rng)).collect();
    let types = (0..n_residues).map(|_| rng.random_range(0..n_types)).collect();
    (GeoState { x, rotations }, types)
}

fn dump(history: &VecDeque<(usize, f64, GeoState, Vec<usize>)>) -> String {
    let mut s = String::from("step,t,x,rotation_log,types\n");
    for (k, t, st, types) in history {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let x = join(&mut st.x.iter().map(|v| format!("{v:e}")));
        let r = join(&mut st.rotations.iter().flat_map(|r| log_map(r).0.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>()));
        let a = join(&mut types.iter().map(|v| v.to_string()));
        let _ = writeln!(s, "{k},{t:e},{x},{r},{a}");
    }
    s
}

fn finite_state(state: &GeoState) -> bool {
    state.x.iter().all(|v| v.is_finite()) && state.rotations.iter().all(Rotation::is_finite)
}

/// Run the reverse chain for one sample from its prior draw. Time steps are
/// uniform from 1 down to `t_eps`; `num_steps = 0` returns the prior draw.
pub fn sample_one<D: JointDriver + ?Sized>(
    driver: &D,
    schedules: &Schedules,
    dims: (usize, usize),
    cfg: &SamplingConfig,
    seed: u64,
    index: usize,
) -> Result<Sample> {
    let mut rng = substream(seed, index as u64);
    let (mut state, mut types) = prior_draw(dims.0, dims.1, schedules.seq.n_types, &mut rng);
    let t_end = schedules.r3.t_eps.max(schedules.so3.t_eps);
    let tau = if cfg.num_steps > 0 {
        (1.0 - t_end) / cfg.num_steps as f64
    } else {
        0.0
    };
    let mut history = VecDeque::with_capacity(DUMP_LEN);
    for k in 0..cfg.num_steps {
        let t = 1.0 - k as f64 * tau;
        if history.len() == DUMP_LEN {
            history.pop_front();
        }
        history.push_back((k, t, state.clone(), types.clone()));
        let fail = |history: &VecDeque<_>| Error::SampleDiverged {
            sample: index,
            step: k,
            dump: dump(history),
        };
        let step = (|| -> Result<(GeoState, Vec<usize>)> {
            let (scores, post) = driver.query(&state, &types, t)?;
            let x = reverse_em_update(&schedules.r3, &state.x, t, tau, &scores.s_x, &mut rng, cfg.deterministic)?.x;
            let rotations = reverse_update(&schedules.so3, &state.rotations, t, tau, &scores.s_r, &mut rng, cfg.deterministic)?
                .rotations;
            let rates = reverse_rates(&schedules.seq, &post, &types, t)?;
            let seq = tau_leap_step(&SeqState { types: types.clone(), t }, &rates, tau, &mut rng)?;
            Ok((GeoState { x, rotations }, seq.types))
        })();
        match step {
            Ok((next, next_types)) if finite_state(&next) => {
                state = next;
                types = next_types;
            }
            Ok(_) | Err(Error::NonFinite(_)) => return Err(fail(&history)),
            Err(e) => return Err(e),
        }
    }
    Ok(Sample {
        component: None,
        x: state.x,
        rotations: state.rotations,
        types,
    })
}

/// `cfg.num_samples` independent reverse chains; sample `j` uses substream `j` of `seed`.
pub fn sample_many<D: JointDriver + ?Sized>(
    driver: &D,
    schedules: &Schedules,
    dims: (usize, usize),
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    schedules.validate()?;
    (0..cfg.num_samples)
        .map(|j| sample_one(driver, schedules, dims, cfg, seed, j))
        .collect()
}
