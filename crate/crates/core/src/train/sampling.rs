//! Per-step randomness of the training phases.

use rand::seq::index::sample;
use rand::Rng;

use crate::dataset::RenderRecord;
use crate::error::{Error, Result};
use crate::model::PromptTokens;
use crate::tensor::Tensor;

pub const MAX_REFERENCES: usize = 5;

/// Uniforms `u` for `m` strata of `batch` draws each; stratum `i` (0-based)
/// draws from `[i/m, (i+1)/m)`.
pub fn stratified_uniforms(m: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if m < 1 {
        return Err(Error::Invalid("stratified sampling needs m ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let lo = i as f64 / m as f64;
        let hi = (i + 1) as f64 / m as f64;
        let mut g = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = lo + rng.random::<f64>() / m as f64;
            let u = if u >= hi { lo } else { u };
            if !(u >= lo && u < hi) {
                return Err(Error::Invalid(format!("stratum {i} draw {u} outside [{lo},{hi})")));
            }
            g.push(u);
        }
        out.push(g);
    }
    Ok(out)
}

/// Maps `u ∈ [0,1)` onto the steps `1..=T`.
pub fn uniform_to_step(u: f64, t_max: usize) -> usize {
    ((u * t_max as f64).floor() as usize + 1).min(t_max)
}

/// `m × batch` diffusion steps, stratum `i` covering `(⌊i·T/m⌋, ⌈(i+1)·T/m⌉]`; neighbours share one step when `m` does not divide `T`.
pub fn stratified_times(m: usize, batch: usize, t_max: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    Ok(stratified_uniforms(m, batch, rng)?
        .into_iter()
        .map(|g| g.into_iter().map(|u| uniform_to_step(u, t_max)).collect())
        .collect())
}

/// A drawn reference subset: original indices, and the slot replaced by a
/// reflection of another member, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDraw {
    pub indices: Vec<usize>,
    /// `(slot, source_slot)`: `images[slot]` is the flip of `images[source_slot]`.
    pub flipped: Option<(usize, usize)>,
    pub images: Vec<Tensor>,
}

/// `n ~ U{1..5}` distinct references; with probability ½ one entry is replaced
/// by the horizontal flip of another (of itself when `n = 1`).
pub fn sample_reference_subset(refs: &[&Tensor], rng: &mut impl Rng) -> Result<ReferenceDraw> {
    if refs.len() < MAX_REFERENCES {
        return Err(Error::Invalid(format!(
            "reference subset sampling needs {MAX_REFERENCES} references, got {}",
            refs.len()
        )));
    }
    let n = rng.random_range(1..=MAX_REFERENCES);
    let indices: Vec<usize> = sample(rng, refs.len(), n).into_vec();
    let mut images: Vec<Tensor> = indices.iter().map(|&i| refs[i].clone()).collect();
    let mut flipped = None;
    if rng.random_bool(0.5) {
        let slot = rng.random_range(0..n);
        // With a single draw the only member is its own source.
        let src = if n == 1 {
            slot
        } else {
            let s = rng.random_range(0..n - 1);
            if s >= slot { s + 1 } else { s }
        };
        images[slot] = images[src].flip_horizontal()?;
        flipped = Some((slot, src));
    }
    Ok(ReferenceDraw { indices, flipped, images })
}

/// Generic template or the render's attribute caption, each with probability ½.
pub fn sample_caption(record: &RenderRecord, rng: &mut impl Rng) -> Result<PromptTokens> {
    if rng.random_bool(0.5) {
        Ok(PromptTokens::neutral())
    } else {
        PromptTokens::with_attributes(record.attribute_words())
    }
}
