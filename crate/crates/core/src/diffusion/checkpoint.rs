use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{Denoiser, DenoiserArch};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const DENOISER_CHECKPOINT_VERSION: &str = "ddt-denoiser/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl From<&NoiseSchedule> for ScheduleSpec {
    fn from(s: &NoiseSchedule) -> Self {
        ScheduleSpec { t_max: s.t_max, beta_start: s.beta_start, beta_end: s.beta_end }
    }
}

/// Everything needed to reproduce feature extraction from one file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DenoiserCheckpoint<T: Scalar> {
    pub version: String,
    pub scalar: String,
    pub arch: DenoiserArch,
    pub schedule: ScheduleSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> DenoiserCheckpoint<T> {
    pub fn new(denoiser: &Denoiser<T>, schedule: &NoiseSchedule) -> Self {
        DenoiserCheckpoint {
            version: DENOISER_CHECKPOINT_VERSION.into(),
            scalar: T::NAME.into(),
            arch: denoiser.arch().clone(),
            schedule: schedule.into(),
            params: denoiser.params.clone(),
        }
    }

    pub fn restore(self) -> Result<(Denoiser<T>, NoiseSchedule)> {
        if self.version != DENOISER_CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported denoiser checkpoint version {:?}", self.version)));
        }
        let schedule = NoiseSchedule::linear(self.schedule.t_max, self.schedule.beta_start, self.schedule.beta_end)?;
        if schedule.t_max != self.arch.t_max {
            return Err(Error::Checkpoint("schedule length disagrees with the architecture".into()));
        }
        Ok((Denoiser::from_params(self.arch, self.params)?, schedule))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
