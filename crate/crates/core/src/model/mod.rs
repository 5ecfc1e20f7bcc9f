//! The denoising network, its conditioning blocks, and parameter handling.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod params;
pub mod vocab;

pub use attention::PvaBlock;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::DenoiserConfig;
pub use denoiser::{denoise_predict, forward, init_base, init_from_text, init_pva, time_embedding, DenoiseItem, Denoiser};
pub use params::{Binder, ParamGroup, ParamStore};
pub use vocab::PromptTokens;
