use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::VisualFeatures;
use crate::model::PromptTokens;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTask {
    #[default]
    InpaintOnly,
    Controlled,
    /// Conventional text guidance against the empty prompt; no visual tokens.
    Default,
}

/// One side of the guidance pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPair {
    pub prompt: PromptTokens,
    pub visual: Option<VisualFeatures>,
}

impl ConditionPair {
    /// Visual tokens are always accompanied by `S*` in the prompt.
    fn new(prompt: &PromptTokens, visual: Option<&VisualFeatures>) -> Self {
        let prompt = match visual {
            Some(_) => prompt.with_identity_token(),
            None => prompt.clone(),
        };
        ConditionPair { prompt, visual: visual.cloned() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub task: GuidanceTask,
    pub positive: ConditionPair,
    pub negative: ConditionPair,
    pub scale: f64,
}

/// Positive and negative conditions for `task`:
///
/// | task         | positive        | negative        |
/// |--------------|-----------------|-----------------|
/// | inpaint_only | neutral + G_V   | neutral         |
/// | controlled   | edit + G_V      | neutral + G_V   |
/// | default      | edit or neutral | ∅               |
pub fn build_guidance_conditions(
    task: GuidanceTask,
    neutral: &PromptTokens,
    edit: Option<&PromptTokens>,
    visual: Option<&VisualFeatures>,
    scale: f64,
) -> Result<GuidanceSpec> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Invalid(format!("guidance scale must be ≥ 0, got {scale}")));
    }
    let need_visual = || visual.ok_or_else(|| Error::Invalid(format!("{task:?} guidance needs visual features")));
    let (positive, negative) = match task {
        GuidanceTask::InpaintOnly => {
            let v = need_visual()?;
            (ConditionPair::new(neutral, Some(v)), ConditionPair::new(neutral, None))
        }
        GuidanceTask::Controlled => {
            let v = need_visual()?;
            let edit = edit.ok_or_else(|| Error::Invalid("controlled guidance needs an edit prompt".into()))?;
            (ConditionPair::new(edit, Some(v)), ConditionPair::new(neutral, Some(v)))
        }
        GuidanceTask::Default => (
            ConditionPair::new(edit.unwrap_or(neutral), None),
            ConditionPair::new(&PromptTokens::empty(), None),
        ),
    };
    Ok(GuidanceSpec { task, positive, negative, scale })
}

/// `eps_neg + s·(eps_pos − eps_neg)`; returns `eps_pos` itself at `s = 1`.
pub fn guidance_combine(eps_pos: &Tensor, eps_neg: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_pos.shape() != eps_neg.shape() {
        return Err(Error::shape("guidance_combine", format!("{:?} vs {:?}", eps_pos.shape(), eps_neg.shape())));
    }
    if !(scale >= 0.0) {
        return Err(Error::Invalid(format!("guidance scale must be ≥ 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(eps_pos.clone());
    }
    eps_pos.zip_map(eps_neg, |p, n| n + scale * (p - n))
}
