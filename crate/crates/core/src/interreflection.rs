//! Facet radiosity solves `(I - PK) X = X_s` and the iterative refinement of
//! pseudo normals that removes interreflected light.

use std::f64::consts::PI;

use nalgebra::{DMatrix, LU, Dyn};

use crate::classic::woodham_vectors;
use crate::error::{Error, Result};
use crate::eval::mean_angular_error;
use crate::geometry::{build_facets, depth_from_normals, interreflection_kernel, FacetSet, InterreflectionKernel, DEFAULT_FACTOR};
use crate::types::{orient_unit, AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap, Vec3, MAX_ALBEDO, VIEW};

/// Largest facet count solved by dense LU; larger systems use Neumann sums.
pub const DIRECT_SOLVE_LIMIT: usize = 4096;
const NEUMANN_TOL: f64 = 1e-10;
const NEUMANN_MAX_ITER: usize = 10_000;

/// Diagonal of `P`: albedo over pi.
pub fn albedo_diagonal(albedo: &[f64]) -> Vec<f64> {
    albedo.iter().map(|a| a / PI).collect()
}

/// `P K` with `P` given by its diagonal.
pub fn scaled_kernel(p: &[f64], k: &InterreflectionKernel) -> Result<DMatrix<f64>> {
    let m = k.len();
    if p.len() != m {
        return Err(Error::ShapeMismatch(format!("{} albedo entries for a {m}-facet kernel", p.len())));
    }
    let mut pk = k.k.clone();
    for (i, mut row) in pk.row_iter_mut().enumerate() {
        row *= p[i];
    }
    Ok(pk)
}

/// Spectral radius of `P K` for nonnegative `P` and symmetric nonnegative
/// `K`. Uses the row-sum bound when it already certifies the value is
/// below one, power iteration on `P^1/2 K P^1/2` otherwise.
pub fn spectral_radius(p: &[f64], k: &InterreflectionKernel) -> Result<f64> {
    let pk = scaled_kernel(p, k)?;
    let m = pk.nrows();
    if m == 0 {
        return Ok(0.0);
    }
    let row_bound = pk.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if row_bound < 1.0 {
        return Ok(row_bound);
    }
    let sq: Vec<f64> = p.iter().map(|v| v.max(0.0).sqrt()).collect();
    let s = DMatrix::from_fn(m, m, |i, j| sq[i] * k.k[(i, j)] * sq[j]);
    let mut v = nalgebra::DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = &s * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    Ok(lambda)
}

/// A factored `I - PK` ready for repeated solves in either orientation.
#[derive(Clone, Debug)]
pub struct InterreflectionSystem {
    pk: DMatrix<f64>,
    lu: Option<LU<f64, Dyn, Dyn>>,
    lu_t: Option<LU<f64, Dyn, Dyn>>,
}

impl InterreflectionSystem {
    /// Checks the spectral radius and factors the system.
    pub fn new(p: &[f64], k: &InterreflectionKernel) -> Result<Self> {
        let radius = spectral_radius(p, k)?;
        if !(radius < 1.0) {
            return Err(Error::NonPhysical(radius));
        }
        let pk = scaled_kernel(p, k)?;
        let m = pk.nrows();
        let (lu, lu_t) = if m <= DIRECT_SOLVE_LIMIT {
            let a = DMatrix::identity(m, m) - &pk;
            (Some(a.clone().lu()), Some(a.transpose().lu()))
        } else {
            (None, None)
        };
        Ok(InterreflectionSystem { pk, lu, lu_t })
    }

    pub fn len(&self) -> usize {
        self.pk.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pk.nrows() == 0
    }

    pub fn pk(&self) -> &DMatrix<f64> {
        &self.pk
    }

    /// `(I - PK)^-1 B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(b)?;
        match &self.lu {
            Some(lu) => lu.solve(b).ok_or(Error::NonPhysical(f64::NAN)),
            None => neumann(&self.pk, b),
        }
    }

    /// `(I - PK)^-T B`.
    pub fn solve_transpose(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(b)?;
        match &self.lu_t {
            Some(lu) => lu.solve(b).ok_or(Error::NonPhysical(f64::NAN)),
            None => neumann(&self.pk.transpose(), b),
        }
    }

    /// `(I - PK) X`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(x - &self.pk * x)
    }

    fn check(&self, b: &DMatrix<f64>) -> Result<()> {
        if b.nrows() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} rows for a {}-facet system", b.nrows(), self.len())));
        }
        Ok(())
    }
}

fn neumann(pk: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut x = b.clone();
    for _ in 0..NEUMANN_MAX_ITER {
        let next = b + pk * &x;
        let change = (&next - &x).norm();
        let scale = next.norm();
        x = next;
        if change <= NEUMANN_TOL * scale || scale == 0.0 {
            return Ok(x);
        }
    }
    Err(Error::NonPhysical(f64::NAN))
}

/// Total facet radiance `X = (I - PK)^-1 X_s` from source-only radiance.
pub fn forward_interreflect(xs: &DMatrix<f64>, p: &[f64], k: &InterreflectionKernel) -> Result<DMatrix<f64>> {
    InterreflectionSystem::new(p, k)?.solve(xs)
}

/// `(I - PK)^-1 F` applied to a facet matrix with one row per facet.
pub fn nayar_update(f: &DMatrix<f64>, p: &[f64], k: &InterreflectionKernel) -> Result<DMatrix<f64>> {
    forward_interreflect(f, p, k)
}

/// Source-only radiance from total radiance: `X_s = (I - PK) X`.
pub fn remove_interreflection(x: &DMatrix<f64>, p: &[f64], k: &InterreflectionKernel) -> Result<DMatrix<f64>> {
    let pk = scaled_kernel(p, k)?;
    if x.nrows() != pk.nrows() {
        return Err(Error::ShapeMismatch(format!("{} rows for a {}-facet kernel", x.nrows(), pk.nrows())));
    }
    Ok(x - pk * x)
}

pub fn vectors_to_matrix(v: &[Vec3]) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), 3, |r, c| v[r][c])
}

pub fn matrix_to_vectors(m: &DMatrix<f64>) -> Vec<Vec3> {
    (0..m.nrows()).map(|r| Vec3::new(m[(r, 0)], m[(r, 1)], m[(r, 2)])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NayarConfig {
    pub iterations: usize,
    pub factor: usize,
    /// Stop once successive normal maps differ by less than this (degrees).
    pub min_change_deg: f64,
}

impl Default for NayarConfig {
    fn default() -> Self {
        NayarConfig { iterations: 15, factor: DEFAULT_FACTOR, min_change_deg: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct NayarResult {
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
    pub depth: DepthMap,
    pub pseudo_normals: NormalMap,
    pub iterations: usize,
}

fn split_scaled(mask: &crate::types::Mask, g: &[Vec3]) -> Result<(NormalMap, AlbedoMap)> {
    let mut normals = vec![Vec3::zeros(); g.len()];
    let mut albedo = vec![0.0; g.len()];
    for p in mask.indices() {
        let len = g[p].norm();
        normals[p] = if len > 0.0 { orient_unit(g[p]) } else { VIEW };
        albedo[p] = len.min(MAX_ALBEDO);
    }
    Ok((NormalMap::new(mask.clone(), normals)?, AlbedoMap::new(mask.height(), mask.width(), 1, albedo)?))
}

/// Iterative interreflection removal starting from the pseudo normals of a
/// plain Lambertian solve.
///
/// Each round facetizes the current estimate, builds `K` and `P`, removes
/// the interreflected share `P K F` from the facet-averaged pseudo vectors
/// `F = rho * n`, and applies the correction at full resolution through
/// bilinear upsampling, so pixel-level detail of the pseudo normals stays.
pub fn nayar_iterate(stack: &ImageStack, lights: &LightSet, cfg: &NayarConfig) -> Result<NayarResult> {
    let c = stack.channels();
    let raw = woodham_vectors(stack, lights)?;
    let mask = stack.mask().clone();
    let pseudo: Vec<Vec3> = (0..stack.pixels())
        .map(|p| (0..c).map(|ch| raw[p * c + ch]).sum::<Vec3>() / c as f64)
        .collect();
    let (pseudo_normals, _) = split_scaled(&mask, &pseudo)?;

    let mut g = pseudo.clone();
    let (mut normals, mut albedo) = split_scaled(&mask, &g)?;
    let mut done = 0;
    for _ in 0..cfg.iterations {
        let facets = build_facets(&normals, &albedo, cfg.factor)?;
        let correction = interreflection_correction(&facets, &pseudo)?;
        g = pseudo.iter().zip(&correction).map(|(a, b)| a - b).collect();
        let (next_n, next_a) = split_scaled(&mask, &g)?;
        let change = mean_angular_error(&next_n, &normals, &mask)?;
        normals = next_n;
        albedo = next_a;
        done += 1;
        log::debug!("interreflection round {done}: mean normal change {change:.4} deg");
        if change < cfg.min_change_deg {
            break;
        }
    }
    let depth = depth_from_normals(&normals)?;
    Ok(NayarResult { normals, albedo, depth, pseudo_normals, iterations: done })
}

/// Full-resolution share of `pseudo` explained by interreflection under the
/// facets' own kernel and albedo: `up(P K down(pseudo))`.
pub fn interreflection_correction(facets: &FacetSet, pseudo: &[Vec3]) -> Result<Vec<Vec3>> {
    if facets.len() < 2 {
        return Ok(vec![Vec3::zeros(); pseudo.len()]);
    }
    let k = interreflection_kernel(facets)?;
    let p = albedo_diagonal(&facets.albedo);
    let f = vectors_to_matrix(&facets.downsample(pseudo));
    let share = scaled_kernel(&p, &k)? * f;
    Ok(facets.upsample(&matrix_to_vectors(&share)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_facet(a: f64, b: f64) -> (Vec<f64>, InterreflectionKernel) {
        // With K symmetric, P = diag(a, b) / k12 gives (PK)_12 = a, (PK)_21 = b.
        let k12 = 0.8;
        let k = InterreflectionKernel { k: DMatrix::from_row_slice(2, 2, &[0.0, k12, k12, 0.0]) };
        (vec![a / k12, b / k12], k)
    }

    #[test]
    fn zero_kernel_or_albedo_is_identity() {
        let xs = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.5, 0.0, 4.0]);
        let (p, k) = two_facet(0.3, 0.4);
        assert_eq!(forward_interreflect(&xs, &p, &InterreflectionKernel::zeros(2)).unwrap(), xs);
        assert_eq!(forward_interreflect(&xs, &[0.0, 0.0], &k).unwrap(), xs);
        assert_eq!(nayar_update(&xs, &[0.0, 0.0], &k).unwrap(), xs);
    }

    #[test]
    fn two_facet_closed_form() {
        let (a, b) = (0.3, 0.45);
        let (p, k) = two_facet(a, b);
        let xs = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.7, 2.0]);
        let x = forward_interreflect(&xs, &p, &k).unwrap();
        for c in 0..2 {
            let x1 = (xs[(0, c)] + a * xs[(1, c)]) / (1.0 - a * b);
            let x2 = (xs[(1, c)] + b * xs[(0, c)]) / (1.0 - a * b);
            assert!((x[(0, c)] - x1).abs() < 1e-12);
            assert!((x[(1, c)] - x2).abs() < 1e-12);
        }
    }

    #[test]
    fn non_physical_albedo_is_rejected() {
        let (p, k) = two_facet(1.0, 1.2);
        let xs = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(forward_interreflect(&xs, &p, &k), Err(Error::NonPhysical(_))));
    }

    #[test]
    fn neumann_matches_direct() {
        let (p, k) = two_facet(0.3, 0.45);
        let xs = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let sys = InterreflectionSystem::new(&p, &k).unwrap();
        let direct = sys.solve(&xs).unwrap();
        let series = neumann(sys.pk(), &xs).unwrap();
        assert!((direct - series).norm() < 1e-9);
        let t = sys.solve_transpose(&xs).unwrap();
        let expect = (DMatrix::identity(2, 2) - sys.pk()).transpose().lu().solve(&xs).unwrap();
        assert!((t - expect).norm() < 1e-14);
    }
}
