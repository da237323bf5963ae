//! Toy denoising diffusion model: noise schedule, forward noising, a small
//! U-Net noise predictor with activation taps, and its pretraining loop.

mod checkpoint;
mod pretrain;
mod schedule;
mod unet;

pub use checkpoint::{DenoiserCheckpoint, ScheduleSpec, DENOISER_CHECKPOINT_VERSION};
pub use pretrain::{denoising_loss, pretrain_denoiser, PretrainConfig, PretrainOutcome};
pub use schedule::{forward_diffuse, DiffusionSample, NoiseSchedule};
pub use unet::{timestep_embedding, DenoiseOutput, Denoiser, DenoiserArch};
