//! Binary inpainting masks: 1 = known, 0 = occluded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::faces::{PixelBox, RegionBoxes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DILATION: f64 = 0.20;

/// Region kinds, in manifest order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    EyeBrow,
    LowerFace,
    WholeFace,
    Random,
}

impl RegionKind {
    pub const ALL: [RegionKind; 4] = [RegionKind::EyeBrow, RegionKind::LowerFace, RegionKind::WholeFace, RegionKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::EyeBrow => "eye_brow",
            RegionKind::LowerFace => "lower_face",
            RegionKind::WholeFace => "whole_face",
            RegionKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        RegionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown region {s:?}")))
    }

    pub fn semantic_box(self, boxes: &RegionBoxes) -> Option<PixelBox> {
        match self {
            RegionKind::EyeBrow => Some(boxes.eye_brow),
            RegionKind::LowerFace => Some(boxes.lower_face),
            RegionKind::WholeFace => Some(boxes.whole_face),
            RegionKind::Random => None,
        }
    }
}

/// Signed box after dilation, before clamping to the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DilatedBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

fn dilate_span(lo: usize, hi: usize, dilation: f64) -> (i64, i64) {
    let w = hi - lo;
    // Guard against 1.2·w landing a hair above an integer.
    let target = ((w as f64) * (1.0 + dilation) - 1e-9).ceil().max(w as f64) as usize;
    let extra = target - w;
    let left = extra / 2;
    (lo as i64 - left as i64, (hi + extra - left) as i64)
}

/// Expands width and height by `dilation` about the center, rounding outward.
pub fn dilate_box(b: &PixelBox, dilation: f64) -> Result<DilatedBox> {
    if b.x1 <= b.x0 || b.y1 <= b.y0 {
        return Err(Error::Invalid(format!("degenerate box {b:?}")));
    }
    if !(dilation >= 0.0) {
        return Err(Error::Invalid(format!("dilation {dilation} must be ≥ 0")));
    }
    let (x0, x1) = dilate_span(b.x0, b.x1, dilation);
    let (y0, y1) = dilate_span(b.y0, b.y1, dilation);
    Ok(DilatedBox { x0, y0, x1, y1 })
}

/// Occludes the dilated box, clamped to the `extent×extent` image.
pub fn build_semantic_mask(b: &PixelBox, extent: usize, dilation: f64) -> Result<Tensor> {
    if b.x1 > extent || b.y1 > extent {
        return Err(Error::Invalid(format!("box {b:?} outside {extent}-px image")));
    }
    let d = dilate_box(b, dilation)?;
    let clamp = |v: i64| v.clamp(0, extent as i64) as usize;
    let clamped = PixelBox { x0: clamp(d.x0), y0: clamp(d.y0), x1: clamp(d.x1), y1: clamp(d.y1) };
    Ok(Tensor::from_fn(&[extent, extent], |i| {
        if clamped.contains(i % extent, i / extent) { 0.0 } else { 1.0 }
    }))
}

/// Thick-brush polyline parameters, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrokeParams {
    pub max_strokes: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub max_segment: f64,
    pub min_occluded: f64,
    pub max_occluded: f64,
    pub retries: usize,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            max_strokes: 4,
            min_vertices: 2,
            max_vertices: 5,
            min_width: 1.5,
            max_width: 4.0,
            max_segment: 8.0,
            min_occluded: 0.05,
            max_occluded: 0.5,
            retries: 200,
        }
    }
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

fn draw_strokes(extent: usize, p: &StrokeParams, rng: &mut impl Rng) -> Tensor {
    let n = extent as f64;
    let mut mask = vec![1.0; extent * extent];
    let strokes = rng.random_range(1..=p.max_strokes);
    for _ in 0..strokes {
        let verts = rng.random_range(p.min_vertices..=p.max_vertices);
        let width = rng.random_range(p.min_width..=p.max_width);
        let mut pt = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        for _ in 1..verts {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(1.0..=p.max_segment);
            let next = ((pt.0 + len * angle.cos()).clamp(0.0, n), (pt.1 + len * angle.sin()).clamp(0.0, n));
            let r2 = (width / 2.0).powi(2);
            for y in 0..extent {
                for x in 0..extent {
                    if seg_dist2(x as f64 + 0.5, y as f64 + 0.5, pt, next) <= r2 {
                        mask[y * extent + x] = 0.0;
                    }
                }
            }
            pt = next;
        }
    }
    Tensor::new(vec![extent, extent], mask).expect("mask values are finite")
}

/// Random brush-stroke mask whose occluded fraction lies in the configured range.
pub fn sample_random_mask(extent: usize, rng: &mut impl Rng, p: &StrokeParams) -> Result<Tensor> {
    for _ in 0..p.retries.max(1) {
        let m = draw_strokes(extent, p, rng);
        let occ = 1.0 - m.mean();
        if occ >= p.min_occluded && occ <= p.max_occluded {
            return Ok(m);
        }
    }
    Err(Error::Invalid(format!("no mask within occlusion range after {} retries", p.retries)))
}

/// Pre-generated random masks sampled uniformly.
#[derive(Clone, Debug)]
pub struct MaskPool {
    masks: Vec<Tensor>,
}

impl MaskPool {
    pub fn generate(n: usize, extent: usize, p: &StrokeParams, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("mask pool needs at least one mask".into()));
        }
        let masks = (0..n).map(|_| sample_random_mask(extent, rng, p)).collect::<Result<_>>()?;
        Ok(MaskPool { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &Tensor {
        &self.masks[rng.random_range(0..self.masks.len())]
    }
}

/// Union of the occluded regions of two masks.
pub fn union_occlusion(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, f64::min)
}

/// A pool mask merged with one of the image's semantic boxes chosen uniformly.
pub fn merged_random_mask(
    pool: &MaskPool,
    boxes: &RegionBoxes,
    extent: usize,
    dilation: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let kind = [RegionKind::EyeBrow, RegionKind::LowerFace, RegionKind::WholeFace][rng.random_range(0..3)];
    let rect = build_semantic_mask(&kind.semantic_box(boxes).expect("semantic kind"), extent, dilation)?;
    union_occlusion(pool.sample(rng), &rect)
}

pub fn is_binary(mask: &Tensor) -> bool {
    mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
}
