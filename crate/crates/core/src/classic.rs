//! Classical Lambertian photometric stereo, light-space discretization, and
//! light calibration from a diffuse sphere with a specular highlight.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector3};

use crate::error::{Error, Result};
use crate::linalg::rank3;
use crate::types::{orient_unit, AlbedoMap, ImageStack, LightSet, NormalMap, Vec3, MAX_ALBEDO, VIEW};

/// Pixels darker than this fraction of their image's maximum are treated
/// as attached shadow.
pub const SHADOW_FRACTION: f64 = 0.01;

pub const AZIMUTH_BINS: usize = 36;
pub const ELEVATION_BINS: usize = 36;
pub const INTENSITY_BINS: usize = 20;
pub const INTENSITY_MIN: f64 = 0.2;
pub const INTENSITY_MAX: f64 = 2.0;

/// Per-pixel least squares of `X = rho * n^T L`, with light intensities
/// folded into the columns of `L`.
///
/// Attached-shadow observations (below 1% of the image maximum) are dropped
/// from a pixel's system when at least three well-conditioned lights remain.
/// Normals are normalized; albedo is the solution norm clamped below one.
pub fn woodham_solve(stack: &ImageStack, lights: &LightSet) -> Result<(NormalMap, AlbedoMap)> {
    let b = woodham_vectors(stack, lights)?;
    let c = stack.channels();
    let mask = stack.mask().clone();
    let mut normals = vec![Vec3::zeros(); stack.pixels()];
    let mut albedo = vec![0.0; stack.pixels() * c];
    for p in mask.indices() {
        let mut sum = Vec3::zeros();
        for ch in 0..c {
            albedo[p * c + ch] = b[p * c + ch].norm().min(MAX_ALBEDO);
            sum += b[p * c + ch];
        }
        normals[p] = if sum.norm() > 0.0 { orient_unit(sum) } else { VIEW };
    }
    let nm = NormalMap::new(mask, normals)?;
    let am = AlbedoMap::new(stack.height(), stack.width(), c, albedo)?;
    Ok((nm, am))
}

/// Unnormalized per-pixel, per-channel solutions `rho_c * n` of the
/// least-squares system behind [`woodham_solve`], indexed `pixel * c + ch`.
/// Zero outside the mask.
pub fn woodham_vectors(stack: &ImageStack, lights: &LightSet) -> Result<Vec<Vec3>> {
    if stack.count() != lights.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} lights", stack.count(), lights.len())));
    }
    let l = lights.scaled_matrix();
    if rank3(&l) < 3 {
        return Err(Error::DegenerateLights);
    }
    let n_img = stack.count();
    let c = stack.channels();
    let thresholds: Vec<f64> = (0..n_img).map(|i| SHADOW_FRACTION * stack.image_max(i)).collect();
    let full_gram_inv = (&l * l.transpose()).try_inverse().ok_or(Error::DegenerateLights)?;
    let all: Vec<usize> = (0..n_img).collect();

    let mut out = vec![Vec3::zeros(); stack.pixels() * c];
    let mut valid = Vec::with_capacity(n_img);
    for p in stack.mask().indices() {
        valid.clear();
        valid.extend((0..n_img).filter(|&i| stack.gray(i, p) >= thresholds[i]));
        let reduced = if valid.len() >= 3 && valid.len() < n_img {
            let mut g = Matrix3::zeros();
            for &i in &valid {
                let col = l.column(i);
                g += col * col.transpose();
            }
            well_conditioned_inverse(&g)
        } else {
            None
        };
        let (gram_inv, rows) = match reduced {
            Some(g) => (g, &valid),
            None => (full_gram_inv, &all),
        };
        for ch in 0..c {
            let mut rhs = Vec3::zeros();
            for &i in rows {
                rhs += l.column(i) * stack.value(i, p, ch);
            }
            out[p * c + ch] = gram_inv * rhs;
        }
    }
    Ok(out)
}

fn well_conditioned_inverse(g: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let eig = g.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 || min <= max * 1e-8 {
        return None;
    }
    g.try_inverse()
}

/// Unconstrained least-squares normals for a pixel-by-image matrix `x`
/// (`m x n`) and a `3 x n` light matrix. Returns unit normals and the
/// pre-normalization norms.
pub fn least_squares_normals(x: &DMatrix<f64>, l: &Matrix3xX<f64>) -> Result<(Vec<Vec3>, Vec<f64>)> {
    if x.ncols() != l.ncols() {
        return Err(Error::ShapeMismatch(format!("{} columns vs {} lights", x.ncols(), l.ncols())));
    }
    if rank3(l) < 3 {
        return Err(Error::DegenerateLights);
    }
    let gram_inv = (l * l.transpose()).try_inverse().ok_or(Error::DegenerateLights)?;
    // B = (L L^T)^-1 L X^T, one column per pixel.
    let b = gram_inv * (l * x.transpose());
    let mut normals = Vec::with_capacity(x.nrows());
    let mut norms = Vec::with_capacity(x.nrows());
    for col in b.column_iter() {
        let v = Vector3::new(col[0], col[1], col[2]);
        let n = v.norm();
        norms.push(n);
        normals.push(if n > 0.0 { v / n } else { Vec3::zeros() });
    }
    Ok((normals, norms))
}

/// Azimuth `phi` in `[0, pi]` and elevation `theta` in `[-pi/2, pi/2]` of a
/// direction in the front hemisphere, with
/// `l = (cos(theta) cos(phi), sin(theta), cos(theta) sin(phi))`.
pub fn direction_angles(l: &Vec3) -> Result<(f64, f64)> {
    if l.z < 0.0 {
        return Err(Error::SourceBehindPlane(l.z));
    }
    let phi = l.z.atan2(l.x).clamp(0.0, PI);
    let theta = l.y.clamp(-1.0, 1.0).asin();
    Ok((phi, theta))
}

pub fn direction_from_angles(phi: f64, theta: f64) -> Vec3 {
    Vec3::new(theta.cos() * phi.cos(), theta.sin(), theta.cos() * phi.sin())
}

fn uniform_bin(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let width = (hi - lo) / bins as f64;
    (((value - lo) / width).floor().max(0.0) as usize).min(bins - 1)
}

/// Azimuth and elevation classes of width `pi/36`; intervals are right-open
/// except the last, which includes the upper bound.
pub fn bin_direction(l: &Vec3) -> Result<(usize, usize)> {
    let (phi, theta) = direction_angles(l)?;
    Ok((
        uniform_bin(phi, 0.0, PI, AZIMUTH_BINS),
        uniform_bin(theta, -PI / 2.0, PI / 2.0, ELEVATION_BINS),
    ))
}

/// Direction at the center of an azimuth/elevation class pair.
pub fn direction_from_bins(azimuth_bin: usize, elevation_bin: usize) -> Vec3 {
    let w = PI / AZIMUTH_BINS as f64;
    let phi = (azimuth_bin as f64 + 0.5) * w;
    let theta = -PI / 2.0 + (elevation_bin as f64 + 0.5) * (PI / ELEVATION_BINS as f64);
    direction_from_angles(phi, theta)
}

/// Intensity class over `[0.2, 2.0]` in 20 bins of width 0.09.
pub fn bin_intensity(e: f64) -> Result<usize> {
    if !(INTENSITY_MIN..=INTENSITY_MAX).contains(&e) {
        return Err(Error::IntensityOutOfRange(e));
    }
    Ok(uniform_bin(e, INTENSITY_MIN, INTENSITY_MAX, INTENSITY_BINS))
}

pub fn intensity_from_bin(bin: usize) -> f64 {
    INTENSITY_MIN + (bin as f64 + 0.5) * (INTENSITY_MAX - INTENSITY_MIN) / INTENSITY_BINS as f64
}

/// A calibration sphere in image coordinates (pixel column/row of the
/// center, radius in pixels) with its diffuse albedo. With `albedo = 1` the
/// estimated intensities absorb the sphere's unknown reflectance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationSphere {
    pub center_col: f64,
    pub center_row: f64,
    pub radius: f64,
    pub albedo: f64,
}

impl CalibrationSphere {
    /// Outward unit normal at an image position, if it lies on the sphere.
    pub fn normal_at(&self, col: f64, row: f64) -> Option<Vec3> {
        let x = (col - self.center_col) / self.radius;
        let y = (self.center_row - row) / self.radius;
        let r2 = x * x + y * y;
        (r2 < 1.0).then(|| Vec3::new(x, y, (1.0 - r2).sqrt()))
    }
}

/// Fraction of the brightest sphere pixels whose centroid marks the highlight.
pub const HIGHLIGHT_FRACTION: f64 = 0.001;
/// Fraction of the brightest sphere pixels excluded from the diffuse fit.
pub const SPECULAR_CUT_FRACTION: f64 = 0.05;
/// Absolute radiance below which a sphere counts as unlit.
pub const BACKGROUND_THRESHOLD: f64 = 1e-3;
/// A highlight must outshine the specular-cut boundary by this factor.
pub const HIGHLIGHT_CONTRAST: f64 = 1.1;

/// Mirror reflection of the view vector about `n`: `2 (n.v) n - v`.
pub fn mirror_direction(n: &Vec3) -> Vec3 {
    (2.0 * n.dot(&VIEW) * n - VIEW).normalize()
}

/// Estimates one light per image from a sphere's specular highlight.
///
/// The direction mirrors the view vector about the sphere normal at the
/// centroid of the brightest 0.1% of sphere pixels. The intensity is the
/// least-squares scale of `albedo * max(n.l, 0)` over the remaining lit
/// pixels after the brightest 5% are cut.
pub fn calibrate_from_sphere(stack: &ImageStack, sphere: &CalibrationSphere) -> Result<LightSet> {
    if !(sphere.radius > 1.0) || !(sphere.albedo > 0.0) {
        return Err(Error::InvalidInput("sphere radius must exceed one pixel and albedo must be positive".into()));
    }
    let (h, w) = (stack.height(), stack.width());
    let mut pixels = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            if !stack.mask().get(p) {
                continue;
            }
            if let Some(n) = sphere.normal_at(col as f64, row as f64) {
                pixels.push((p, col as f64, row as f64, n));
            }
        }
    }
    if pixels.len() < 20 {
        return Err(Error::InvalidInput(format!("only {} pixels fall on the sphere", pixels.len())));
    }

    let mut dirs = Vec::with_capacity(stack.count());
    let mut intensities = Vec::with_capacity(stack.count());
    for i in 0..stack.count() {
        let mut vals: Vec<(f64, usize)> = pixels.iter().enumerate().map(|(k, px)| (stack.gray(i, px.0), k)).collect();
        vals.sort_by(|a, b| b.0.total_cmp(&a.0));
        let max = vals[0].0;
        let n_top = ((HIGHLIGHT_FRACTION * pixels.len() as f64).ceil() as usize).max(1);
        let n_cut = ((SPECULAR_CUT_FRACTION * pixels.len() as f64).ceil() as usize).max(n_top);
        let top_mean = vals[..n_top].iter().map(|v| v.0).sum::<f64>() / n_top as f64;
        let cut_level = vals[n_cut.min(vals.len() - 1)].0;
        if max <= BACKGROUND_THRESHOLD || top_mean <= HIGHLIGHT_CONTRAST * cut_level {
            return Err(Error::NoHighlight { image: i });
        }

        // Pixels tied with the last selected one join the centroid, so
        // symmetric plateaus stay centered.
        let floor = vals[n_top - 1].0;
        let (mut sc, mut sr, mut count) = (0.0, 0.0, 0.0);
        for &(_, k) in vals.iter().take_while(|v| v.0 >= floor) {
            sc += pixels[k].1;
            sr += pixels[k].2;
            count += 1.0;
        }
        let n_h = sphere
            .normal_at(sc / count, sr / count)
            .ok_or(Error::NoHighlight { image: i })?;
        let l = mirror_direction(&n_h);

        let lit = BACKGROUND_THRESHOLD.max(SHADOW_FRACTION * max);
        let samples: Vec<(f64, f64)> = vals[n_cut..]
            .iter()
            .map(|&(v, k)| (v, sphere.albedo * pixels[k].3.dot(&l).max(0.0)))
            .filter(|&(v, s)| v > lit && s > 0.0)
            .collect();
        let e = robust_scale_fit(&samples).ok_or(Error::NoHighlight { image: i })?;
        dirs.push(l);
        intensities.push(e);
    }
    LightSet::new(dirs, intensities)
}

/// Least-squares `e` in `v = e * s`, refit after dropping samples whose
/// residual exceeds three robust standard deviations (specular tails).
fn robust_scale_fit(samples: &[(f64, f64)]) -> Option<f64> {
    let fit = |keep: &dyn Fn(f64, f64) -> bool| {
        let (num, den) = samples
            .iter()
            .filter(|&&(v, s)| keep(v, s))
            .fold((0.0, 0.0), |(n, d), &(v, s)| (n + v * s, d + s * s));
        (den > 0.0).then(|| num / den)
    };
    let mut e = fit(&|_, _| true)?;
    for _ in 0..3 {
        let mut res: Vec<f64> = samples.iter().map(|&(v, s)| (v - e * s).abs()).collect();
        res.sort_by(f64::total_cmp);
        let mad = res[res.len() / 2] * 1.4826;
        if mad == 0.0 {
            break;
        }
        e = fit(&|v, s| (v - e * s).abs() <= 3.0 * mad)?;
    }
    Some(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Mask;
    use proptest::prelude::*;

    fn single_pixel_stack(values: &[f64]) -> ImageStack {
        ImageStack::new(values.len(), 1, 1, 1, values.to_vec(), Mask::full(1, 1)).unwrap()
    }

    #[test]
    fn woodham_axis_lights() {
        let lights = LightSet::new(vec![Vec3::x(), Vec3::y(), Vec3::z()], vec![1.0; 3]).unwrap();
        let (n, a) = woodham_solve(&single_pixel_stack(&[0.0, 0.0, 1.0]), &lights).unwrap();
        assert!((n.get(0) - Vec3::z()).norm() < 1e-15);
        assert!((a.get(0, 0) - 1.0).abs() <= 1.1e-6);

        let s = 1.0 / 3f64.sqrt();
        let (n, a) = woodham_solve(&single_pixel_stack(&[s, s, s]), &lights).unwrap();
        assert!((n.get(0) - Vec3::new(s, s, s)).norm() < 1e-15);
        assert!((a.get(0, 0) - MAX_ALBEDO).abs() < 1e-12);
    }

    #[test]
    fn woodham_rejects_coplanar_lights() {
        let lights = LightSet::new(vec![Vec3::x(), Vec3::y(), -Vec3::x()], vec![1.0; 3]).unwrap();
        assert!(matches!(
            woodham_solve(&single_pixel_stack(&[0.1, 0.2, 0.3]), &lights),
            Err(Error::DegenerateLights)
        ));
    }

    #[test]
    fn azimuth_and_elevation_bins() {
        let l = direction_from_angles(0.01, 0.0);
        assert_eq!(bin_direction(&l).unwrap().0, 0);
        assert_eq!(bin_direction(&Vec3::y()).unwrap().1, 35);
        assert_eq!(bin_direction(&Vec3::z()).unwrap().1, 18);
        assert!(matches!(bin_direction(&Vec3::new(0.0, 0.6, -0.8)), Err(Error::SourceBehindPlane(_))));
    }

    #[test]
    fn intensity_bins() {
        assert_eq!(bin_intensity(0.2).unwrap(), 0);
        assert_eq!(bin_intensity(2.0).unwrap(), 19);
        assert_eq!(bin_intensity(1.1).unwrap(), 10);
        let err = bin_intensity(2.5).unwrap_err();
        assert!(err.to_string().contains("[0.2, 2.0]"));
        assert!(bin_intensity(0.1).is_err());
    }

    #[test]
    fn mirror_direction_doubles_the_angle() {
        assert!((mirror_direction(&Vec3::z()) - Vec3::z()).norm() < 1e-15);
        let a = PI / 8.0;
        let n = Vec3::new(0.0, a.sin(), a.cos());
        let expect = Vec3::new(0.0, (PI / 4.0).sin(), (PI / 4.0).cos());
        assert!((mirror_direction(&n) - expect).norm() < 1e-15);
    }

    /// A sphere whose only bright spot is a small disk at a chosen position.
    fn sphere_with_spot(spot_col: f64, spot_row: f64) -> (ImageStack, CalibrationSphere) {
        let (h, w) = (41, 41);
        let sphere = CalibrationSphere { center_col: 20.0, center_row: 20.0, radius: 18.0, albedo: 1.0 };
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                if let Some(n) = sphere.normal_at(c as f64, r as f64) {
                    let d2 = (c as f64 - spot_col).powi(2) + (r as f64 - spot_row).powi(2);
                    data[r * w + c] = 0.5 * n.z + if d2 < 1.5 { 1.0 } else { 0.0 };
                }
            }
        }
        (ImageStack::new(1, h, w, 1, data, Mask::full(h, w)).unwrap(), sphere)
    }

    #[test]
    fn highlight_at_center_means_frontal_light() {
        let (stack, sphere) = sphere_with_spot(20.0, 20.0);
        let lights = calibrate_from_sphere(&stack, &sphere).unwrap();
        assert!((lights.direction(0) - Vec3::z()).norm() < 1e-12);
        // The diffuse part was rendered with e * albedo = 0.5 for this light.
        assert!((lights.intensity(0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn flat_sphere_has_no_highlight() {
        let (h, w) = (41, 41);
        let sphere = CalibrationSphere { center_col: 20.0, center_row: 20.0, radius: 18.0, albedo: 1.0 };
        let data = vec![0.0; h * w];
        let stack = ImageStack::new(1, h, w, 1, data, Mask::full(h, w)).unwrap();
        assert!(matches!(calibrate_from_sphere(&stack, &sphere), Err(Error::NoHighlight { image: 0 })));
    }

    proptest! {
        #[test]
        fn bin_center_quantization_error(phi in 0.0..PI, theta in -PI / 2.0..PI / 2.0) {
            let l = direction_from_angles(phi, theta);
            prop_assume!(l.z >= 0.0);
            let (a, e) = bin_direction(&l).unwrap();
            let half = PI / 72.0 + 1e-12;
            let (phi2, theta2) = (( a as f64 + 0.5) * PI / 36.0, -PI / 2.0 + (e as f64 + 0.5) * PI / 36.0);
            prop_assert!((theta2 - theta).abs() <= half);
            // Azimuth is undefined at the poles.
            if theta.cos() > 1e-9 {
                prop_assert!((phi2 - phi).abs() <= half);
            }
        }

        #[test]
        fn woodham_exact_on_noiseless_lambertian(
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let unit_upper = |rng: &mut rand_chacha::ChaCha8Rng, max_polar: f64| {
                let t: f64 = rng.gen_range(0.0..max_polar);
                let p: f64 = rng.gen_range(-PI..PI);
                Vec3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
            };
            let n = unit_upper(&mut rng, 0.3);
            let rho: f64 = rng.gen_range(0.1..0.9);
            let dirs: Vec<Vec3> = (0..10).map(|_| unit_upper(&mut rng, 1.0)).collect();
            let ints: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..1.5)).collect();
            let lights = LightSet::new(dirs.clone(), ints.clone()).unwrap();
            // Lights within 57 degrees of the pole and normals within 17 degrees keep n.l > 0.
            let vals: Vec<f64> = (0..10).map(|i| ints[i] * rho * n.dot(&dirs[i])).collect();
            prop_assume!(vals.iter().all(|v| *v > 0.0));
            let (est, alb) = woodham_solve(&single_pixel_stack(&vals), &lights).unwrap();
            let err = crate::eval::angle_deg(&est.get(0), &n);
            prop_assert!(err < 1e-9, "angular error {err}");
            prop_assert!((alb.get(0, 0) - rho).abs() < 1e-12);
        }
    }
}
