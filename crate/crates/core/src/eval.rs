//! Normal-map visualization encoding and the angular error metric.

use crate::error::{Error, Result};
use crate::types::{Mask, NormalMap, Vec3};

/// Encodes normals as 8-bit RGB with `rgb = round(255 * (n + 1) / 2)`.
/// Masked-out pixels are black. Returns a row-major `h x w x 3` buffer.
pub fn encode_normals(nm: &NormalMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(nm.normals().len() * 3);
    for (p, n) in nm.normals().iter().enumerate() {
        if nm.mask().get(p) {
            out.extend(n.iter().map(|v| (255.0 * (v + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8));
        } else {
            out.extend([0, 0, 0]);
        }
    }
    out
}

/// Inverse of [`encode_normals`] up to quantization; vectors are renormalized.
pub fn decode_normals(rgb: &[u8], mask: Mask) -> Result<NormalMap> {
    if rgb.len() != mask.len() * 3 {
        return Err(Error::ShapeMismatch(format!(
            "rgb buffer has {} bytes, expected {}",
            rgb.len(),
            mask.len() * 3
        )));
    }
    let normals = rgb
        .chunks_exact(3)
        .map(|px| Vec3::new(decode_channel(px[0]), decode_channel(px[1]), decode_channel(px[2])))
        .collect();
    NormalMap::from_unnormalized(mask, normals)
}

fn decode_channel(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Angle between two unit vectors in degrees.
///
/// Evaluated as `atan2(|a x b|, a . b)`, which equals the clamped arccos of
/// the cosine but keeps full precision for nearly parallel vectors.
#[inline]
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Mean angular error in degrees over the pixels of `mask`.
pub fn mean_angular_error(est: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<f64> {
    if !est.mask().same_shape(gt.mask()) || !est.mask().same_shape(mask) {
        return Err(Error::ShapeMismatch("normal maps and mask differ in size".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in mask.indices() {
        sum += angle_deg(&est.get(p), &gt.get(p));
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(sum / count as f64)
}

/// Per-pixel angular error map (degrees; zero outside the mask).
pub fn angular_error_map(est: &NormalMap, gt: &NormalMap, mask: &Mask) -> Result<Vec<f64>> {
    if !est.mask().same_shape(gt.mask()) || !est.mask().same_shape(mask) {
        return Err(Error::ShapeMismatch("normal maps and mask differ in size".into()));
    }
    Ok((0..mask.len())
        .map(|p| if mask.get(p) { angle_deg(&est.get(p), &gt.get(p)) } else { 0.0 })
        .collect())
}
