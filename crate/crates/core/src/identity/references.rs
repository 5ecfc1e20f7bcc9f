use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reference images of one identity, with a flag per image marking padded
/// reflections.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub id: String,
    images: Vec<Tensor>,
    padded: Vec<bool>,
}

impl ReferenceSet {
    pub fn new(id: impl Into<String>, images: Vec<Tensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("reference set must not be empty".into()));
        }
        let first = images[0].image_dims("reference_set")?;
        for img in &images {
            if img.image_dims("reference_set")? != first {
                return Err(Error::shape("reference_set", "references do not share extents"));
            }
        }
        let padded = vec![false; images.len()];
        Ok(ReferenceSet { id: id.into(), images, padded })
    }

    /// The empty set that single-reference finetuning starts from after its
    /// only reference is held out.
    pub fn empty(id: impl Into<String>) -> Self {
        ReferenceSet { id: id.into(), images: Vec::new(), padded: Vec::new() }
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image_refs(&self) -> Vec<&Tensor> {
        self.images.iter().collect()
    }

    pub fn padded(&self) -> &[bool] {
        &self.padded
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The set without entry `i`.
    pub fn without(&self, i: usize) -> ReferenceSet {
        let mut out = self.clone();
        out.images.remove(i);
        out.padded.remove(i);
        out
    }

    fn push(&mut self, img: Tensor, padded: bool) {
        self.images.push(img);
        self.padded.push(padded);
    }
}

/// Pads `refs` to `target` with horizontal reflections of uniformly chosen
/// members. An empty set is first seeded with the reflected `inference` image.
pub fn pad_references(
    refs: &ReferenceSet,
    target: usize,
    inference: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<ReferenceSet> {
    if target < refs.len() {
        return Err(Error::Invalid(format!("pad target {target} below current count {}", refs.len())));
    }
    let mut out = refs.clone();
    if out.is_empty() {
        let x = inference.ok_or_else(|| Error::Invalid("empty reference set needs an inference image".into()))?;
        out.push(x.flip_horizontal()?, true);
    }
    while out.len() < target {
        let pick = rng.random_range(0..out.len());
        let img = out.images[pick].flip_horizontal()?;
        out.push(img, true);
    }
    Ok(out)
}
