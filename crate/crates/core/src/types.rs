//! Shared domain types: image stacks, lights, and per-pixel geometry maps.
//!
//! Camera frame: x right, y up, z toward the camera; the view vector is
//! `(0, 0, 1)`. Rasters are stored row-major with row 0 at the top, so a
//! pixel at `(row, col)` sits at `x = col - (w-1)/2`, `y = (h-1)/2 - row`
//! in units of the pixel pitch.

use nalgebra::{DMatrix, Matrix3xX, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// The view direction of the orthographic camera.
pub const VIEW: Vec3 = Vector3::new(0.0, 0.0, 1.0);

/// Position of a pixel center in the camera frame, in pixel-pitch units.
pub fn pixel_xy(height: usize, width: usize, row: usize, col: usize) -> (f64, f64) {
    let x = col as f64 - (width as f64 - 1.0) / 2.0;
    let y = (height as f64 - 1.0) / 2.0 - row as f64;
    (x, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask buffer has {} entries, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        self.data[index]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Number of pixels inside the mask.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Flat indices of the pixels inside the mask, in raster order.
    pub fn indices(&self) -> Vec<usize> {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixelwise intersection.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("mask shapes differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Mask { height: self.height, width: self.width, data })
    }
}

/// `n` images of one scene under distinct point lights, plus the object mask.
///
/// Radiance is linear and nonnegative. Layout is `[image][row][col][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    mask: Mask,
}

impl ImageStack {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        mask: Mask,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!("channel count must be 1 or 3, got {channels}")));
        }
        if count == 0 {
            return Err(Error::InvalidInput("image stack is empty".into()));
        }
        if data.len() != count * height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {count}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        if mask.height() != height || mask.width() != width {
            return Err(Error::ShapeMismatch(format!(
                "mask is {}x{}, images are {height}x{width}",
                mask.height(),
                mask.width()
            )));
        }
        if mask.count() == 0 {
            return Err(Error::InvalidInput("mask has no true pixel".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("radiance must be finite and >= 0, found {v}")));
        }
        Ok(ImageStack { count, height, width, channels, data, mask })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// All values of image `i`, `[row][col][channel]`.
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixels() * self.channels;
        &self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn value(&self, i: usize, pixel: usize, channel: usize) -> f64 {
        self.data[(i * self.pixels() + pixel) * self.channels + channel]
    }

    /// Channel mean at a pixel.
    #[inline]
    pub fn gray(&self, i: usize, pixel: usize) -> f64 {
        let base = (i * self.pixels() + pixel) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    /// Largest masked gray value of image `i`.
    pub fn image_max(&self, i: usize) -> f64 {
        self.mask.indices().into_iter().map(|p| self.gray(i, p)).fold(0.0, f64::max)
    }

    /// `m x n` matrix of channel-mean intensities over masked pixels
    /// (row = pixel in raster order, column = image).
    pub fn masked_matrix(&self) -> DMatrix<f64> {
        let idx = self.mask.indices();
        DMatrix::from_fn(idx.len(), self.count, |r, i| self.gray(i, idx[r]))
    }

    /// Same stack with a different mask.
    pub fn with_mask(&self, mask: Mask) -> Result<Self> {
        ImageStack::new(self.count, self.height, self.width, self.channels, self.data.clone(), mask)
    }

    /// Returns a copy whose values are transformed by `f(image, value)`;
    /// negative results are clamped at zero.
    pub fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> ImageStack {
        let per = self.pixels() * self.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / per, v).max(0.0))
            .collect();
        ImageStack { data, ..self.clone() }
    }
}

/// Per-image unit light directions (camera frame) and positive intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct LightSet {
    directions: Vec<Vec3>,
    intensities: Vec<f64>,
}

impl LightSet {
    pub fn new(directions: Vec<Vec3>, intensities: Vec<f64>) -> Result<Self> {
        if directions.len() != intensities.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} light directions but {} intensities",
                directions.len(),
                intensities.len()
            )));
        }
        for (i, d) in directions.iter().enumerate() {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("light {i} is not unit length (|l| = {})", d.norm())));
            }
        }
        if let Some(e) = intensities.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidInput(format!("light intensity must be positive, got {e}")));
        }
        Ok(LightSet { directions, intensities })
    }

    /// Normalizes each direction before validating.
    pub fn from_unnormalized(directions: Vec<Vec3>, intensities: Vec<f64>) -> Result<Self> {
        let mut dirs = Vec::with_capacity(directions.len());
        for (i, d) in directions.into_iter().enumerate() {
            let n = d.norm();
            if !(n > 0.0) {
                return Err(Error::InvalidInput(format!("light {i} has zero length")));
            }
            dirs.push(d / n);
        }
        LightSet::new(dirs, intensities)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn direction(&self, i: usize) -> Vec3 {
        self.directions[i]
    }

    pub fn intensity(&self, i: usize) -> f64 {
        self.intensities[i]
    }

    /// `3 x n` matrix with columns `e_i * l_i`.
    pub fn scaled_matrix(&self) -> Matrix3xX<f64> {
        let cols: Vec<Vec3> = self.directions.iter().zip(&self.intensities).map(|(d, e)| d * *e).collect();
        Matrix3xX::from_columns(&cols)
    }

    /// `3 x n` matrix of unit directions.
    pub fn direction_matrix(&self) -> Matrix3xX<f64> {
        Matrix3xX::from_columns(&self.directions)
    }

    pub fn with_intensities(&self, intensities: Vec<f64>) -> Result<Self> {
        LightSet::new(self.directions.clone(), intensities)
    }
}

/// Per-pixel unit normals; zero outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    height: usize,
    width: usize,
    normals: Vec<Vec3>,
    mask: Mask,
}

impl NormalMap {
    /// Validates unit length and `n_z >= 0` inside the mask and zeroes the outside.
    pub fn new(mask: Mask, mut normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "normal buffer has {} entries, mask has {}",
                normals.len(),
                mask.len()
            )));
        }
        for (p, n) in normals.iter_mut().enumerate() {
            if mask.get(p) {
                if (n.norm() - 1.0).abs() > 1e-6 || !n.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!("normal at pixel {p} is not unit length: {n:?}")));
                }
                if n.z < -1e-12 {
                    return Err(Error::InvalidInput(format!("normal at pixel {p} faces away from the camera")));
                }
            } else {
                *n = Vec3::zeros();
            }
        }
        Ok(NormalMap { height: mask.height(), width: mask.width(), normals, mask })
    }

    /// Normalizes each masked vector and flips it toward the camera when
    /// `n_z < 0`. Zero vectors become `(0, 0, 1)`.
    pub fn from_unnormalized(mask: Mask, normals: Vec<Vec3>) -> Result<Self> {
        let normals = normals
            .into_iter()
            .enumerate()
            .map(|(p, n)| {
                if p < mask.len() && mask.get(p) {
                    orient_unit(n)
                } else {
                    Vec3::zeros()
                }
            })
            .collect();
        NormalMap::new(mask, normals)
    }

    pub fn from_fn(mask: Mask, mut f: impl FnMut(usize, usize) -> Vec3) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        let mut normals = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                normals.push(if mask.at(r, c) { f(r, c) } else { Vec3::zeros() });
            }
        }
        NormalMap::new(mask, normals)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> Vec3 {
        self.normals[pixel]
    }

    pub fn at(&self, row: usize, col: usize) -> Vec3 {
        self.normals[row * self.width + col]
    }

    /// Row-major `h x w x 3` buffer.
    pub fn to_field(&self) -> Vec<f64> {
        self.normals.iter().flat_map(|n| [n.x, n.y, n.z]).collect()
    }
}

/// Unit vector facing the camera; degenerate input maps to the view vector.
pub fn orient_unit(n: Vec3) -> Vec3 {
    let len = n.norm();
    if !(len > 1e-300) || !len.is_finite() {
        return VIEW;
    }
    let mut u = n / len;
    if u.z < 0.0 {
        // Reflect across the image plane rather than negate, so the in-plane
        // tilt direction is kept.
        u.z = -u.z;
    }
    u
}

/// Scalar depth field (larger = closer to the camera), defined up to an
/// additive constant.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    mask: Mask,
}

impl DepthMap {
    pub fn new(mask: Mask, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != mask.len() {
            return Err(Error::ShapeMismatch("depth buffer does not match mask".into()));
        }
        if let Some(p) = (0..depth.len()).find(|&p| mask.get(p) && !depth[p].is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite depth at pixel {p}")));
        }
        Ok(DepthMap { height: mask.height(), width: mask.width(), depth, mask })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> f64 {
        self.depth[pixel]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }
}

/// Per-pixel, per-channel diffuse albedo in `[0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoMap {
    height: usize,
    width: usize,
    channels: usize,
    albedo: Vec<f64>,
}

/// Largest albedo any map stores; interreflection needs `rho < 1`.
pub const MAX_ALBEDO: f64 = 1.0 - 1e-6;

impl AlbedoMap {
    pub fn new(height: usize, width: usize, channels: usize, albedo: Vec<f64>) -> Result<Self> {
        if albedo.len() != height * width * channels {
            return Err(Error::ShapeMismatch("albedo buffer has the wrong length".into()));
        }
        if let Some(v) = albedo.iter().find(|v| !(**v >= 0.0 && **v < 1.0)) {
            return Err(Error::InvalidInput(format!("albedo {v} outside [0, 1)")));
        }
        Ok(AlbedoMap { height, width, channels, albedo })
    }

    /// Clamps every value into `[0, 1 - 1e-6]`.
    pub fn clamped(height: usize, width: usize, channels: usize, albedo: Vec<f64>) -> Result<Self> {
        let albedo = albedo.into_iter().map(|v| if v.is_finite() { v.clamp(0.0, MAX_ALBEDO) } else { 0.0 }).collect();
        AlbedoMap::new(height, width, channels, albedo)
    }

    pub fn uniform(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        AlbedoMap::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.albedo
    }

    #[inline]
    pub fn get(&self, pixel: usize, channel: usize) -> f64 {
        self.albedo[pixel * self.channels + channel]
    }

    /// Channel mean at a pixel.
    pub fn gray(&self, pixel: usize) -> f64 {
        let b = pixel * self.channels;
        self.albedo[b..b + self.channels].iter().sum::<f64>() / self.channels as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_xy_is_centered_with_y_up() {
        assert_eq!(pixel_xy(3, 5, 1, 2), (0.0, 0.0));
        assert_eq!(pixel_xy(3, 5, 0, 0), (-2.0, 1.0));
        assert_eq!(pixel_xy(4, 4, 3, 3), (1.5, -1.5));
    }

    #[test]
    fn image_stack_rejects_bad_input() {
        let mask = Mask::full(2, 2);
        assert!(ImageStack::new(1, 2, 2, 2, vec![0.0; 8], mask.clone()).is_err());
        assert!(ImageStack::new(1, 2, 2, 1, vec![0.0; 3], mask.clone()).is_err());
        assert!(ImageStack::new(1, 2, 2, 1, vec![-1.0, 0.0, 0.0, 0.0], mask.clone()).is_err());
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert!(ImageStack::new(1, 2, 2, 1, vec![0.0; 4], empty).is_err());
        assert!(ImageStack::new(1, 2, 2, 1, vec![0.5; 4], mask).is_ok());
    }

    #[test]
    fn light_set_checks_unit_length() {
        assert!(LightSet::new(vec![Vec3::new(0.0, 0.0, 2.0)], vec![1.0]).is_err());
        assert!(LightSet::new(vec![Vec3::z()], vec![0.0]).is_err());
        let l = LightSet::from_unnormalized(vec![Vec3::new(0.0, 3.0, 4.0)], vec![2.0]).unwrap();
        assert!((l.direction(0) - Vec3::new(0.0, 0.6, 0.8)).norm() < 1e-15);
        let m = l.scaled_matrix();
        assert!((m[(1, 0)] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn normal_map_zeroes_outside_mask() {
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let nm = NormalMap::new(mask, vec![Vec3::z(), Vec3::x()]).unwrap();
        assert_eq!(nm.get(1), Vec3::zeros());
        let bad = Mask::full(1, 1);
        assert!(NormalMap::new(bad.clone(), vec![Vec3::new(0.0, 0.0, 2.0)]).is_err());
        assert!(NormalMap::new(bad, vec![-Vec3::z()]).is_err());
    }

    #[test]
    fn albedo_must_stay_below_one() {
        assert!(AlbedoMap::new(1, 1, 1, vec![1.0]).is_err());
        let a = AlbedoMap::clamped(1, 1, 1, vec![3.0]).unwrap();
        assert!(a.get(0, 0) < 1.0);
    }
}
