use crate::diffusion_r3::NoiseScheduleR3;
use crate::diffusion_so3::NoiseScheduleSO3;
use crate::error::{Error, Result};
use crate::seq_ctmc::SeqSchedule;
use crate::so3::Rotation;
use serde::{Deserialize, Serialize};

/// Joint geometric state: flattened coordinates and one frame per residue.
/// Time is passed alongside rather than stored, so a state can be queried
/// at several times.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoState {
    pub x: Vec<f64>,
    pub rotations: Vec<Rotation>,
}

impl GeoState {
    pub fn new(x: Vec<f64>, rotations: Vec<Rotation>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coordinates"));
        }
        Ok(GeoState { x, rotations })
    }

    pub fn dim_x(&self) -> usize {
        self.x.len()
    }

    pub fn n_residues(&self) -> usize {
        self.rotations.len()
    }

    /// Tangent dimension of the rotational part, `3N`.
    pub fn dim_r(&self) -> usize {
        3 * self.rotations.len()
    }

    pub fn with_x(&self, x: Vec<f64>) -> GeoState {
        GeoState {
            x,
            rotations: self.rotations.clone(),
        }
    }

    pub fn with_rotation(&self, i: usize, r: Rotation) -> GeoState {
        let mut rotations = self.rotations.clone();
        rotations[i] = r;
        GeoState {
            x: self.x.clone(),
            rotations,
        }
    }
}

/// The three forward processes run on a common clock.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub r3: NoiseScheduleR3,
    pub so3: NoiseScheduleSO3,
    pub seq: SeqSchedule,
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.r3.validate()?;
        self.so3.validate()?;
        self.seq.validate()
    }
}
