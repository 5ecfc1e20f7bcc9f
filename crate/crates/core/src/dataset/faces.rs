//! Procedural face glyphs with analytic region boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_EXTENT: usize = 8;
const SUPERSAMPLE: usize = 4;

/// Stable per-identity parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: String,
    /// `[0, 1)`
    pub face_hue: f64,
    /// Half distance between eye centers, in image fractions; `[0.13, 0.21]`.
    pub eye_spacing: f64,
    /// Eye radius; `[0.055, 0.095]`.
    pub eye_size: f64,
    /// Mouth curvature before expression; `[-0.6, 0.3]`.
    pub mouth_curvature: f64,
    /// Nose glyph; `0..3`.
    pub nose_index: u8,
    /// `[0, 1)`
    pub hair_hue: f64,
}

/// Per-render variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Added to the identity's mouth curvature; `[-0.15, 0.9]`.
    pub expression: f64,
    /// Horizontal shear about the head center; `[-0.06, 0.06]`.
    pub shear: f64,
    pub glasses: bool,
    /// Background gray level; `[0.15, 0.85]`.
    pub background: f64,
}

/// Smiling renders have an expression offset at or above this.
pub const SMILE_THRESHOLD: f64 = 0.5;

impl RenderParams {
    pub fn smiling(&self) -> bool {
        self.expression >= SMILE_THRESHOLD
    }
}

/// Integer pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains_box(&self, o: &PixelBox) -> bool {
        self.x0 <= o.x0 && self.y0 <= o.y0 && self.x1 >= o.x1 && self.y1 >= o.y1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Mirror image under a horizontal flip of an image `extent` pixels wide.
    pub fn flip_horizontal(&self, extent: usize) -> PixelBox {
        PixelBox { x0: extent - self.x1, y0: self.y0, x1: extent - self.x0, y1: self.y1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBoxes {
    pub eye_brow: PixelBox,
    pub lower_face: PixelBox,
    pub whole_face: PixelBox,
}

impl RegionBoxes {
    pub fn flip_horizontal(&self, extent: usize) -> RegionBoxes {
        RegionBoxes {
            eye_brow: self.eye_brow.flip_horizontal(extent),
            lower_face: self.lower_face.flip_horizontal(extent),
            whole_face: self.whole_face.flip_horizontal(extent),
        }
    }

    /// Boxes of an average unsheared face, for images without a generation record.
    pub fn canonical(extent: usize) -> Result<RegionBoxes> {
        let spec = IdentitySpec {
            id: String::new(),
            face_hue: 0.5,
            eye_spacing: 0.17,
            eye_size: 0.075,
            mouth_curvature: -0.15,
            nose_index: 1,
            hair_hue: 0.5,
        };
        let params = RenderParams { expression: 0.0, shear: 0.0, glasses: false, background: 0.5 };
        Ok(render_identity_image(&spec, &params, extent)?.1)
    }
}

impl IdentitySpec {
    pub fn sample(id: impl Into<String>, rng: &mut impl Rng) -> Self {
        IdentitySpec {
            id: id.into(),
            face_hue: rng.random_range(0.0..1.0),
            eye_spacing: rng.random_range(0.13..=0.21),
            eye_size: rng.random_range(0.055..=0.095),
            mouth_curvature: rng.random_range(-0.6..=0.3),
            nose_index: rng.random_range(0..3),
            hair_hue: rng.random_range(0.0..1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.face_hue)
            && (0.13..=0.21).contains(&self.eye_spacing)
            && (0.055..=0.095).contains(&self.eye_size)
            && (-0.6..=0.3).contains(&self.mouth_curvature)
            && self.nose_index < 3
            && (0.0..1.0).contains(&self.hair_hue);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("identity parameters out of range: {self:?}")))
        }
    }
}

impl RenderParams {
    /// Smiling with probability ½, glasses with probability ⅓.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let expression = if rng.random_bool(0.5) {
            rng.random_range(0.6..=0.9)
        } else {
            rng.random_range(-0.15..=0.15)
        };
        RenderParams {
            expression,
            shear: rng.random_range(-0.06..=0.06),
            glasses: rng.random_bool(1.0 / 3.0),
            background: rng.random_range(0.15..=0.85),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = (-0.15..=0.9).contains(&self.expression)
            && (-0.06..=0.06).contains(&self.shear)
            && (0.15..=0.85).contains(&self.background);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("render parameters out of range: {self:?}")))
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

// Layout in unit coordinates; y grows downward.
const HEAD_CX: f64 = 0.5;
const HEAD_CY: f64 = 0.56;
const HEAD_RX: f64 = 0.33;
const HEAD_RY: f64 = 0.39;
const HAIR_BOTTOM: f64 = 0.31;
const BROW_Y: f64 = 0.38;
const EYE_Y: f64 = 0.46;
const NOSE_Y: f64 = 0.60;
const MOUTH_Y: f64 = 0.76;
const MOUTH_HALF: f64 = 0.13;
const RIM: f64 = 0.045;

struct Glyph<'a> {
    spec: &'a IdentitySpec,
    params: &'a RenderParams,
    skin: [f64; 3],
    hair: [f64; 3],
}

impl Glyph<'_> {
    /// Horizontal offset applied to features at height `v`.
    fn shift(&self, v: f64) -> f64 {
        self.params.shear * (v - HEAD_CY)
    }

    fn color(&self, u: f64, v: f64, with_glasses: bool) -> [f64; 3] {
        let bg = [self.params.background; 3];
        let x = u - self.shift(v);
        let dx = (x - HEAD_CX) / HEAD_RX;
        let dy = (v - HEAD_CY) / HEAD_RY;
        let in_head = dx * dx + dy * dy <= 1.0;
        let hair_dx = (x - HEAD_CX) / (HEAD_RX + 0.03);
        let hair_dy = (v - HEAD_CY) / (HEAD_RY + 0.04);
        if hair_dx * hair_dx + hair_dy * hair_dy <= 1.0 && v < HAIR_BOTTOM {
            return self.hair;
        }
        if !in_head {
            return bg;
        }
        let s = self.spec;
        if with_glasses {
            for side in [-1.0, 1.0] {
                let ex = HEAD_CX + side * s.eye_spacing;
                let r = ((x - ex).powi(2) + (v - EYE_Y).powi(2)).sqrt();
                if (r - (s.eye_size + RIM)).abs() <= 0.022 {
                    return [0.05, 0.05, 0.08];
                }
            }
            let inner = s.eye_spacing - s.eye_size - RIM;
            if x > HEAD_CX - inner && x < HEAD_CX + inner && (v - EYE_Y + 0.02).abs() <= 0.018 {
                return [0.05, 0.05, 0.08];
            }
        }
        for side in [-1.0, 1.0] {
            let ex = HEAD_CX + side * s.eye_spacing;
            if (x - ex).powi(2) + (v - EYE_Y).powi(2) <= s.eye_size * s.eye_size {
                return [0.08, 0.06, 0.05];
            }
            if (x - ex).abs() <= s.eye_size + 0.02 && (v - BROW_Y).abs() <= 0.022 {
                return self.hair;
            }
        }
        let nose = [self.skin[0] * 0.6, self.skin[1] * 0.55, self.skin[2] * 0.55];
        let nx = x - HEAD_CX;
        let ny = v - NOSE_Y;
        let on_nose = match s.nose_index {
            0 => nx * nx + ny * ny <= 0.035 * 0.035,
            1 => nx.abs() <= 0.022 && ny.abs() <= 0.07,
            _ => (-0.06..=0.03).contains(&ny) && nx.abs() <= (ny + 0.06) * 0.9,
        };
        if on_nose {
            return nose;
        }
        let curv = s.mouth_curvature + self.params.expression;
        let mx = x - HEAD_CX;
        if mx.abs() <= MOUTH_HALF {
            let my = MOUTH_Y - curv * 0.07 * (mx / MOUTH_HALF).powi(2) + curv * 0.02;
            if (v - my).abs() <= 0.025 {
                return [0.62, 0.14, 0.2];
            }
        }
        self.skin
    }

    /// Unit-coordinate extents `(u0, v0, u1, v1)` of a dimension-aligned region with shear.
    fn sheared(&self, u0: f64, v0: f64, u1: f64, v1: f64) -> (f64, f64, f64, f64) {
        let shifts = [self.shift(v0), self.shift(v1)];
        let lo = shifts[0].min(shifts[1]);
        let hi = shifts[0].max(shifts[1]);
        (u0 + lo, v0, u1 + hi, v1)
    }
}

fn to_box(ext: (f64, f64, f64, f64), size: usize) -> PixelBox {
    let s = size as f64;
    let clamp = |v: f64| v.clamp(0.0, s) as usize;
    PixelBox {
        x0: clamp((ext.0 * s).floor()),
        y0: clamp((ext.1 * s).floor()),
        x1: clamp((ext.2 * s).ceil()),
        y1: clamp((ext.3 * s).ceil()),
    }
}

/// Renders an `extent×extent×3` image in `[0,1]` and its region boxes.
pub fn render_identity_image(spec: &IdentitySpec, params: &RenderParams, extent: usize) -> Result<(Tensor, RegionBoxes)> {
    if extent < MIN_EXTENT {
        return Err(Error::Invalid(format!("extent {extent} below minimum {MIN_EXTENT}")));
    }
    spec.validate()?;
    params.validate()?;
    let g = Glyph {
        spec,
        params,
        skin: hsv(spec.face_hue, 0.5, 0.88),
        hair: hsv(spec.hair_hue, 0.75, 0.45),
    };
    let mut data = Vec::with_capacity(extent * extent * 3);
    let n = SUPERSAMPLE as f64;
    for py in 0..extent {
        for px in 0..extent {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (px as f64 + (sx as f64 + 0.5) / n) / extent as f64;
                    let v = (py as f64 + (sy as f64 + 0.5) / n) / extent as f64;
                    let c = g.color(u, v, params.glasses);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            data.extend(acc.iter().map(|a| a / (n * n)));
        }
    }
    let image = Tensor::new(vec![extent, extent, 3], data)?;

    let reach = spec.eye_spacing + spec.eye_size + RIM + 0.03;
    let ring = spec.eye_size + RIM + 0.03;
    let eye_brow = g.sheared(HEAD_CX - reach, (BROW_Y - 0.03).min(EYE_Y - ring), HEAD_CX + reach, EYE_Y + ring);
    let lower_face = g.sheared(HEAD_CX - MOUTH_HALF - 0.03, NOSE_Y - 0.08, HEAD_CX + MOUTH_HALF + 0.03, MOUTH_Y + 0.1);
    let whole = g.sheared(HEAD_CX - HEAD_RX, HAIR_BOTTOM, HEAD_CX + HEAD_RX, HEAD_CY + HEAD_RY);
    let mut boxes = RegionBoxes {
        eye_brow: to_box(eye_brow, extent),
        lower_face: to_box(lower_face, extent),
        whole_face: to_box(whole, extent),
    };
    let w = &mut boxes.whole_face;
    for o in [boxes.eye_brow, boxes.lower_face] {
        w.x0 = w.x0.min(o.x0);
        w.y0 = w.y0.min(o.y0);
        w.x1 = w.x1.max(o.x1);
        w.y1 = w.y1.max(o.y1);
    }
    Ok((image, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn deterministic_and_in_range() {
        let mut rng = stream(1, "test");
        let spec = IdentitySpec::sample("a", &mut rng);
        let p = RenderParams::sample(&mut rng);
        let (a, boxes) = render_identity_image(&spec, &p, 16).unwrap();
        let (b, _) = render_identity_image(&spec, &p, 16).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(boxes.whole_face.contains_box(&boxes.eye_brow));
        assert!(boxes.whole_face.contains_box(&boxes.lower_face));
        assert!(render_identity_image(&spec, &p, 7).is_err());
    }
}
