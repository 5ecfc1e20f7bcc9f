use std::collections::HashMap;

use crate::error::Result;
use crate::tensor::Tensor;

/// 8-bit quantization used for stored images.
pub fn to_bytes(img: &Tensor) -> Vec<u8> {
    img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// The smaller of an image's bytes and its mirror's bytes.
pub fn canonical_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let a = to_bytes(img);
    let b = to_bytes(&img.flip_horizontal()?);
    Ok(if b < a { b } else { a })
}

/// Groups of indices (size ≥ 2) whose images are equal up to a horizontal flip,
/// ordered by first member.
pub fn dedup_scan(images: &[Tensor]) -> Result<Vec<Vec<usize>>> {
    let mut groups: HashMap<Vec<u8>, Vec<usize>> = HashMap::new();
    for (i, img) in images.iter().enumerate() {
        let mut key = canonical_bytes(img)?;
        key.extend(img.shape().iter().flat_map(|e| (*e as u64).to_le_bytes()));
        groups.entry(key).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() >= 2).collect();
    out.sort();
    Ok(out)
}

/// Indices kept after dropping all but the first member of every group.
pub fn dedup_keep(images: &[Tensor]) -> Result<Vec<usize>> {
    let groups = dedup_scan(images)?;
    let mut drop = vec![false; images.len()];
    for g in &groups {
        for &i in &g[1..] {
            drop[i] = true;
        }
    }
    Ok((0..images.len()).filter(|&i| !drop[i]).collect())
}
