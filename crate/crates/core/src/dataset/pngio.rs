use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::dedup::to_bytes;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_rgb_png(img: &Tensor, path: &Path) -> Result<()> {
    let [h, w, c] = img.image_dims("write_rgb_png")?;
    if c != 3 {
        return Err(Error::shape("write_rgb_png", format!("{c} channels")));
    }
    let bytes = to_bytes(img);
    let out = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    ensure_parent(path)?;
    out.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|Rgb(p)| p.map(|b| b as f64 / 255.0)).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Stores a {0,1} mask as {0,255} grayscale.
pub fn write_mask_png(mask: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match mask.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("write_mask_png", format!("{s:?}"))),
    };
    let bytes = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let out = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    ensure_parent(path)?;
    out.save(path)?;
    Ok(())
}

/// Reads a mask PNG; any byte other than 0 or 255 is rejected.
pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for Luma([b]) in img.pixels() {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Format { path: path.to_path_buf(), reason: format!("non-binary mask byte {other}") })
            }
        }
    }
    Tensor::new(vec![h as usize, w as usize], data)
}

/// Raw mask bytes as stored on disk.
pub fn read_mask_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(image::open(path)?.to_luma8().into_raw())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}
