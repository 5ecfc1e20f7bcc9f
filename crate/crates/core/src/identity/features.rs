use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Visual identity tokens `G_V`, one row per query token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures(Tensor);

impl VisualFeatures {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("visual_features", format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok(VisualFeatures(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn n_query(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}
