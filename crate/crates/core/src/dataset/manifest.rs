//! Corpus construction and the on-disk manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dedup::dedup_keep;
use super::faces::{render_identity_image, IdentitySpec, RegionBoxes, RenderParams};
use super::masks::{build_semantic_mask, merged_random_mask, MaskPool, RegionKind, StrokeParams, DEFAULT_DILATION};
use super::organize::{reference_count_stats, reorganize_by_reference_count, split_identities, stats_csv, Split};
use super::pngio::{read_mask_png, read_rgb_png, write_mask_png, write_rgb_png};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuilderConfig {
    pub seed: u64,
    pub identities: usize,
    pub renders: usize,
    pub extent: usize,
    pub k: usize,
    pub mask_pool: usize,
    pub dilation: f64,
    pub strokes: StrokeParams,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            seed: 0,
            identities: 200,
            renders: 8,
            extent: 16,
            k: 5,
            mask_pool: 2000,
            dilation: DEFAULT_DILATION,
            strokes: StrokeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPaths {
    pub eye_brow: String,
    pub lower_face: String,
    pub whole_face: String,
    pub random: String,
}

impl MaskPaths {
    pub fn get(&self, kind: RegionKind) -> &str {
        match kind {
            RegionKind::EyeBrow => &self.eye_brow,
            RegionKind::LowerFace => &self.lower_face,
            RegionKind::WholeFace => &self.whole_face,
            RegionKind::Random => &self.random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceEntry {
    pub image: String,
    pub masks: MaskPaths,
}

/// Generation parameters of one render, kept for captions and alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRecord {
    pub smiling: bool,
    pub glasses: bool,
    pub params: RenderParams,
    pub boxes: RegionBoxes,
}

impl RenderRecord {
    /// Attribute words present in this render, in vocabulary order.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut w = Vec::new();
        if self.smiling {
            w.push("smiling");
        }
        if self.glasses {
            w.push("glasses");
        }
        w
    }

    pub fn has_attribute(&self, word: &str) -> Result<bool> {
        match word {
            "smiling" => Ok(self.smiling),
            "glasses" => Ok(self.glasses),
            other => Err(Error::Invalid(format!("unknown attribute {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityAttributes {
    pub spec: IdentitySpec,
    /// Keyed by image path.
    pub renders: BTreeMap<String, RenderRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityEntry {
    pub id: String,
    pub split: Split,
    pub reference: Vec<String>,
    pub inference: Vec<InferenceEntry>,
    pub attributes: IdentityAttributes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub k: usize,
    pub identities: Vec<IdentityEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &IdentityEntry> {
        self.identities.iter().filter(move |e| e.split == s)
    }
}

fn image_path(id: &str, j: usize) -> String {
    format!("images/{id}/{j}.png")
}

fn mask_path(id: &str, j: usize, kind: RegionKind) -> String {
    format!("masks/{id}/{j}_{}.png", kind.name())
}

/// Generates the corpus, writes images, masks, statistics and manifest under `out`.
pub fn build_dataset(cfg: &BuilderConfig, out: &Path) -> Result<DatasetManifest> {
    if cfg.identities == 0 || cfg.renders == 0 {
        return Err(Error::Config("builder needs identities and renders".into()));
    }
    let mut id_rng = stream(cfg.seed, "dataset.identities");
    let mut render_rng = stream(cfg.seed, "dataset.renders");
    let specs: Vec<IdentitySpec> = (0..cfg.identities)
        .map(|i| IdentitySpec::sample(format!("id{i:04}"), &mut id_rng))
        .collect();

    let mut images = Vec::with_capacity(cfg.identities * cfg.renders);
    let mut records = Vec::with_capacity(images.capacity());
    let mut owner = Vec::with_capacity(images.capacity());
    for (i, spec) in specs.iter().enumerate() {
        for _ in 0..cfg.renders {
            let params = RenderParams::sample(&mut render_rng);
            let (img, boxes) = render_identity_image(spec, &params, cfg.extent)?;
            images.push(img);
            records.push(RenderRecord { smiling: params.smiling(), glasses: params.glasses, params, boxes });
            owner.push(i);
        }
    }

    let kept = dedup_keep(&images)?;
    let mut per_identity = vec![Vec::new(); cfg.identities];
    for &idx in &kept {
        per_identity[owner[idx]].push(idx);
    }
    let parts = reorganize_by_reference_count(&per_identity, cfg.k, &mut stream(cfg.seed, "dataset.reorganize"))?;
    let splits = split_identities(parts.len(), &mut stream(cfg.seed, "dataset.split"))?;
    let mut mask_rng = stream(cfg.seed, "dataset.masks");
    let pool = MaskPool::generate(cfg.mask_pool, cfg.extent, &cfg.strokes, &mut mask_rng)?;

    let local = |idx: usize| idx % cfg.renders;
    let mut entries = Vec::with_capacity(parts.len());
    for (part, split) in parts.iter().zip(splits) {
        let spec = &specs[part.identity];
        let id = &spec.id;
        let mut renders = BTreeMap::new();
        let mut reference = Vec::new();
        for &idx in &part.reference {
            let p = image_path(id, local(idx));
            write_rgb_png(&images[idx], &out.join(&p))?;
            renders.insert(p.clone(), records[idx].clone());
            reference.push(p);
        }
        let mut inference = Vec::new();
        for &idx in &part.inference {
            let j = local(idx);
            let p = image_path(id, j);
            write_rgb_png(&images[idx], &out.join(&p))?;
            renders.insert(p.clone(), records[idx].clone());
            let boxes = &records[idx].boxes;
            for kind in RegionKind::ALL {
                let m = match kind.semantic_box(boxes) {
                    Some(b) => build_semantic_mask(&b, cfg.extent, cfg.dilation)?,
                    None => merged_random_mask(&pool, boxes, cfg.extent, cfg.dilation, &mut mask_rng)?,
                };
                write_mask_png(&m, &out.join(mask_path(id, j, kind)))?;
            }
            let masks = MaskPaths {
                eye_brow: mask_path(id, j, RegionKind::EyeBrow),
                lower_face: mask_path(id, j, RegionKind::LowerFace),
                whole_face: mask_path(id, j, RegionKind::WholeFace),
                random: mask_path(id, j, RegionKind::Random),
            };
            inference.push(InferenceEntry { image: p, masks });
        }
        entries.push(IdentityEntry {
            id: id.clone(),
            split,
            reference,
            inference,
            attributes: IdentityAttributes { spec: spec.clone(), renders },
        });
    }

    let manifest = DatasetManifest { seed: cfg.seed, k: cfg.k, identities: entries };
    let stats = stats_csv(&reference_count_stats(&per_identity, cfg.k));
    let sp = out.join(STATS_FILE);
    std::fs::write(&sp, stats).map_err(|e| Error::io(&sp, e))?;
    let mp = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// An image with its generation record.
#[derive(Clone, Debug)]
pub struct Render {
    pub path: String,
    pub image: Tensor,
    pub record: RenderRecord,
}

#[derive(Clone, Debug)]
pub struct InferenceItem {
    pub render: Render,
    pub masks: BTreeMap<RegionKind, Tensor>,
}

#[derive(Clone, Debug)]
pub struct IdentityData {
    pub id: String,
    pub split: Split,
    pub spec: IdentitySpec,
    pub references: Vec<Render>,
    pub inference: Vec<InferenceItem>,
}

impl IdentityData {
    pub fn reference_images(&self) -> Vec<&Tensor> {
        self.references.iter().map(|r| &r.image).collect()
    }
}

/// A manifest with every image and mask decoded.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub identities: Vec<IdentityData>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut identities = Vec::with_capacity(manifest.identities.len());
        for e in &manifest.identities {
            let render = |p: &str| -> Result<Render> {
                let record = e.attributes.renders.get(p).cloned().ok_or_else(|| Error::Format {
                    path: dir.join(MANIFEST_FILE),
                    reason: format!("no attributes for {p}"),
                })?;
                Ok(Render { path: p.to_string(), image: read_rgb_png(&dir.join(p))?, record })
            };
            let references = e.reference.iter().map(|p| render(p)).collect::<Result<Vec<_>>>()?;
            let mut inference = Vec::with_capacity(e.inference.len());
            for inf in &e.inference {
                let mut masks = BTreeMap::new();
                for kind in RegionKind::ALL {
                    masks.insert(kind, read_mask_png(&dir.join(inf.masks.get(kind)))?);
                }
                inference.push(InferenceItem { render: render(&inf.image)?, masks });
            }
            identities.push(IdentityData {
                id: e.id.clone(),
                split: e.split,
                spec: e.attributes.spec.clone(),
                references,
                inference,
            });
        }
        Ok(Corpus { root: dir.to_path_buf(), manifest, identities })
    }

    pub fn split(&self, s: Split) -> Vec<&IdentityData> {
        self.identities.iter().filter(|i| i.split == s).collect()
    }

    pub fn extent(&self) -> usize {
        self.identities
            .first()
            .and_then(|i| i.references.first())
            .map_or(0, |r| r.image.shape()[0])
    }
}
