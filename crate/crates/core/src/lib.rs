//! Desk-scale machinery for simulating and curating video moment retrieval
//! training data.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`frame_select`] scores frames by neighbour dissimilarity and sharpness
//!   and picks the subset used to learn an instance token.
//! * [`diffusion`] is a small latent diffusion stack (schedule, denoiser with
//!   spatial/temporal/token parameter groups, hand-rolled reverse-mode
//!   gradients, DDIM sampling and inversion, checkpoints).
//! * [`editor`] runs the two training stages and prompt-driven moment editing.
//! * [`curation`] scores generated moments and performs the top-k / bottom-l
//!   hybrid selection and video variant assembly.
//! * [`vmr_eval`] holds temporal IoU, recall and mIoU metrics, the novel word
//!   split and the retrieval scorer interface.

pub mod curation;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod frame;
pub mod frame_select;
pub mod io;
pub mod text;
pub mod vmr_eval;

pub use error::{Error, Result};
pub use frame::{Frame, FrameSequence};
