//! Identity encoder: recognizer features and the query-token transformer.

pub mod encoder;
mod features;
pub mod recognizer;
pub mod references;

pub use encoder::{encode_identity, encode_identity_var, init_encoder, visual_tokens, visual_tokens_var};
pub use features::VisualFeatures;
pub use recognizer::{
    extract_face_features, facenet_forward, train_recognizer, LabeledImage, Recognizer, RecognizerConfig,
    RecognizerRole,
};
pub use references::{pad_references, ReferenceSet};
