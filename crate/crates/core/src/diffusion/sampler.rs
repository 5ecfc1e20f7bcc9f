use serde::{Deserialize, Serialize};

use super::guidance::{guidance_combine, ConditionPair, GuidanceSpec, GuidanceTask};
use super::inpaint::{assemble_inpaint_input, MaskedImage};
use super::schedule::{diffuse_to, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Denoiser, PromptTokens};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Anything that maps an assembled input to a noise estimate.
pub trait NoisePredictor {
    fn predict_noise(&self, z_tilde: &Tensor, prompt: &PromptTokens, visual: Option<&Tensor>, t: usize) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z_tilde: &Tensor, prompt: &PromptTokens, visual: Option<&Tensor>, t: usize) -> Result<Tensor> {
        self.predict(z_tilde, prompt, visual, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub task: GuidanceTask,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 100, eta: 0.7, guidance_scale: 1.0, task: GuidanceTask::InpaintOnly, seed: 0 }
    }
}

/// One DDIM update from `t` to `t_prev`. Returns x̂₀ when `t_prev = 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    eta: f64,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t || t > sched.t_max() {
        return Err(Error::Invalid(format!("ddim step needs 0 ≤ t_prev < t ≤ T, got {t_prev}, {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Invalid(format!("eta {eta} outside [0,1]")));
    }
    if x_t.shape() != eps_hat.shape() || x_t.shape() != noise.shape() {
        return Err(Error::shape("ddim_step", "x_t, eps_hat and noise must share a shape"));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = x_t.zip_map(eps_hat, |x, e| (x - s1a * e) / sa)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let sp = ab_prev.sqrt();
    let mut out = Vec::with_capacity(x_t.numel());
    for ((x0, e), z) in x0.data().iter().zip(eps_hat.data()).zip(noise.data()) {
        out.push(if sigma == 0.0 { sp * x0 + dir * e } else { sp * x0 + dir * e + sigma * z });
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

/// Evenly spaced steps `T … 1` of length `steps`, followed by 0.
pub fn timestep_subset(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Invalid(format!("steps must lie in 1..={t_max}, got {steps}")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k * t_max) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.push(0);
    Ok(ts)
}

fn predict_pair(
    model: &impl NoisePredictor,
    z: &Tensor,
    pair: &ConditionPair,
    t: usize,
) -> Result<Tensor> {
    model.predict_noise(z, &pair.prompt, pair.visual.as_ref().map(|v| v.tensor()), t)
}

/// Guided noise estimate; the negative pass is skipped at scale 1.
pub fn guided_noise(model: &impl NoisePredictor, z: &Tensor, g: &GuidanceSpec, t: usize) -> Result<Tensor> {
    let pos = predict_pair(model, z, &g.positive, t)?;
    if g.scale == 1.0 {
        return Ok(pos);
    }
    let neg = predict_pair(model, z, &g.negative, t)?;
    guidance_combine(&pos, &neg, g.scale)
}

/// Full DDIM inpainting loop from seeded noise.
///
/// Known pixels are replaced by the diffused clean image before every model
/// call, x̂₀ is clipped to `[0,1]` at every step, and the result keeps the
/// known region verbatim.
pub fn sample_inpaint(
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
    masked: &MaskedImage,
    guidance: &GuidanceSpec,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let x_known = masked.masked_image();
    let shape = x_known.shape().to_vec();
    if masked.mask().data().iter().all(|&m| m == 1.0) {
        return Ok(x_known.clone());
    }
    let ts = timestep_subset(sched.t_max(), cfg.steps)?;
    let mut rng = stream(cfg.seed, "sample");
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_known = Tensor::randn(&shape, 1.0, &mut rng);
        let known_t = diffuse_to(x_known, t, &eps_known, sched)?;
        x = masked.blend(&known_t, &x)?;
        let z = assemble_inpaint_input(&x, masked)?;
        let eps = guided_noise(model, &z, guidance, t)?;

        let ab = sched.alpha_bar(t)?;
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = x.zip_map(&eps, |x, e| ((x - s1a * e) / sa).clamp(0.0, 1.0))?;
        let eps = x.zip_map(&x0, |x, x0| (x - sa * x0) / s1a)?;

        let noise = Tensor::randn(&shape, 1.0, &mut rng);
        x = ddim_step(&x, t, t_prev, &eps, cfg.eta, &noise, sched)?;
    }
    let x = x.map(|v| v.clamp(0.0, 1.0))?;
    masked.blend(x_known, &x)
}

/// Convenience used by callers that have not built a spec: the unconditional
/// base inpainter (neutral prompt, no visual tokens, no guidance).
pub fn base_guidance() -> GuidanceSpec {
    GuidanceSpec {
        task: GuidanceTask::Default,
        positive: ConditionPair { prompt: PromptTokens::neutral(), visual: None },
        negative: ConditionPair { prompt: PromptTokens::empty(), visual: None },
        scale: 1.0,
    }
}
