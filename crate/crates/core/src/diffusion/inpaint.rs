use crate::error::{Error, Result};
use crate::identity::VisualFeatures;
use crate::model::PromptTokens;
use crate::tensor::Tensor;

/// A binary `H×W` mask (1 = known, 0 = occluded) and the image with occluded
/// pixels zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    mask: Tensor,
    masked_image: Tensor,
}

impl MaskedImage {
    pub fn new(image: &Tensor, mask: &Tensor) -> Result<Self> {
        let [h, w, c] = image.image_dims("masked_image")?;
        if mask.shape() != [h, w] {
            return Err(Error::shape("masked_image", format!("mask {:?} for image {h}×{w}", mask.shape())));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Invalid("mask must be strictly binary".into()));
        }
        let mut data = image.data().to_vec();
        for (i, px) in data.chunks_mut(c).enumerate() {
            if mask.data()[i] == 0.0 {
                px.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(MaskedImage { mask: mask.clone(), masked_image: Tensor::new(vec![h, w, c], data)? })
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn masked_image(&self) -> &Tensor {
        &self.masked_image
    }

    pub fn occluded_fraction(&self) -> f64 {
        1.0 - self.mask.mean()
    }

    /// `m⊙a + (1−m)⊙b`, per channel.
    pub fn blend(&self, known: &Tensor, unknown: &Tensor) -> Result<Tensor> {
        if known.shape() != self.masked_image.shape() || unknown.shape() != known.shape() {
            return Err(Error::shape("blend", format!("{:?} vs {:?}", known.shape(), unknown.shape())));
        }
        let c = known.cols();
        let mut out = unknown.data().to_vec();
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m == 1.0 {
                out[i * c..(i + 1) * c].copy_from_slice(&known.data()[i * c..(i + 1) * c]);
            }
        }
        Tensor::new(known.shape().to_vec(), out)
    }
}

/// Everything the denoiser is conditioned on for one inpainting job.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintCondition {
    pub masked: MaskedImage,
    pub prompt: PromptTokens,
    pub visual: Option<VisualFeatures>,
}

/// `z_t ∥ m ∥ m⊙x₀` along channels.
pub fn assemble_inpaint_input(z_t: &Tensor, masked: &MaskedImage) -> Result<Tensor> {
    let [h, w, c] = z_t.image_dims("assemble_inpaint_input")?;
    if masked.masked_image.shape() != [h, w, c] {
        return Err(Error::shape(
            "assemble_inpaint_input",
            format!("z_t {:?} vs condition {:?}", z_t.shape(), masked.masked_image.shape()),
        ));
    }
    let oc = 2 * c + 1;
    let mut out = Vec::with_capacity(h * w * oc);
    let (z, m, x) = (z_t.data(), masked.mask.data(), masked.masked_image.data());
    for i in 0..h * w {
        out.extend_from_slice(&z[i * c..(i + 1) * c]);
        out.push(m[i]);
        out.extend_from_slice(&x[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![h, w, oc], out)
}
