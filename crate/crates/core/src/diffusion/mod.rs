//! Forward process, inpainting conditions, DDIM sampling and guidance.

pub mod guidance;
pub mod inpaint;
pub mod sampler;
pub mod schedule;

pub use guidance::{build_guidance_conditions, guidance_combine, ConditionPair, GuidanceSpec, GuidanceTask};
pub use inpaint::{assemble_inpaint_input, InpaintCondition, MaskedImage};
pub use sampler::{base_guidance, ddim_step, guided_noise, sample_inpaint, timestep_subset, NoisePredictor, SamplerConfig};
pub use schedule::{diffuse_step, diffuse_to, dsm_loss, make_linear_schedule, NoiseSchedule};
