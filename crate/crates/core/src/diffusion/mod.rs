//! Desk-scale latent diffusion.

pub mod autograd;
pub mod checkpoint;
pub mod ddim;
pub mod latent;
pub mod loss;
pub mod model;
pub mod schedule;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use ddim::{ddim_invert, ddim_sample, ddim_timesteps, InversionForm};
pub use latent::{Encoder, EncoderMode, Latent};
pub use loss::{
    denoising_loss, forward_noise, ldm_loss, sgd_step, Gradients, LossOutput, NoiseDraw, Objective,
};
pub use model::{DenoiserModel, ModelConfig, NoisePredictor, ParamGroup, Prompt};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tensor::Mat;
