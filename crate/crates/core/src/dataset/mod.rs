//! Synthetic identity corpus and the reference/inference dataset pipeline.

pub mod dedup;
pub mod faces;
pub mod manifest;
pub mod masks;
pub mod organize;
pub mod pngio;

pub use dedup::{canonical_bytes, dedup_keep, dedup_scan};
pub use faces::{render_identity_image, IdentitySpec, PixelBox, RegionBoxes, RenderParams};
pub use manifest::{build_dataset, BuilderConfig, Corpus, DatasetManifest, IdentityData, InferenceItem, Render, RenderRecord};
pub use masks::{
    build_semantic_mask, dilate_box, is_binary, merged_random_mask, sample_random_mask, union_occlusion, MaskPool,
    RegionKind, StrokeParams,
};
pub use organize::{reorganize_by_reference_count, split_identities, Split, StatsRow};
