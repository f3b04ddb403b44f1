//! Outlier-robust normal initialization: a low-rank plus sparse split of the
//! image matrix where the top `K` singular values are left unpenalized
//! (partial sum of singular values), solved by inexact augmented Lagrangian
//! iterations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{map_singular_values, rank3, spectral_norm};
use crate::types::{orient_unit, AlbedoMap, ImageStack, LightSet, Mask, NormalMap, Vec3, MAX_ALBEDO, VIEW};

/// `sign(x) * max(|x| - tau, 0)`.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    m.map(|x| soft_threshold(x, tau))
}

/// Keeps the `k` largest singular values and soft-thresholds the rest by `tau`.
pub fn partial_svt(m: &DMatrix<f64>, k: usize, tau: f64) -> Result<DMatrix<f64>> {
    if tau < 0.0 {
        return Err(Error::InvalidInput(format!("threshold must be nonnegative, got {tau}")));
    }
    if k >= m.nrows().min(m.ncols()) {
        return Ok(m.clone());
    }
    map_singular_values(m, |i, s| if i < k { s } else { soft_threshold(s, tau) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcaConfig {
    pub rank: usize,
    /// Sparsity weight; `None` selects `1/sqrt(max(m, n))`.
    pub lambda: Option<f64>,
    /// Initial penalty; `None` selects `1.25 / sigma_1(X)`.
    pub mu0: Option<f64>,
    pub rho_mu: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RpcaConfig {
    fn default() -> Self {
        RpcaConfig { rank: 3, lambda: None, mu0: None, rho_mu: 1.5, tol: 1e-7, max_iter: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct RpcaResult {
    pub z: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub iterations: usize,
    /// `||X - Z - E||_F / ||X||_F` at exit.
    pub residual: f64,
    pub converged: bool,
}

/// Penalty growth stops at this multiple of the initial value.
const MU_GROWTH_CAP: f64 = 1e7;

/// Splits `x` into a low-rank part whose top `rank` singular values are
/// unpenalized and an entrywise-sparse outlier part.
pub fn rpca_partial_sum(x: &DMatrix<f64>, cfg: &RpcaConfig) -> Result<RpcaResult> {
    let (m, n) = x.shape();
    if m < cfg.rank || n < cfg.rank {
        return Err(Error::ShapeMismatch(format!("{m}x{n} matrix is smaller than rank {}", cfg.rank)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix contains non-finite entries".into()));
    }
    let x_norm = x.norm();
    if x_norm == 0.0 {
        let zero = DMatrix::zeros(m, n);
        return Ok(RpcaResult { z: zero.clone(), e: zero, iterations: 0, residual: 0.0, converged: true });
    }
    let lambda = cfg.lambda.unwrap_or(1.0 / (m.max(n) as f64).sqrt());
    let sigma1 = spectral_norm(x)?;
    let mu0 = cfg.mu0.unwrap_or(1.25 / sigma1);
    let mu_max = mu0 * MU_GROWTH_CAP;
    let inf_norm = x.amax();
    let mut y = x / sigma1.max(inf_norm / lambda);
    let mut e = DMatrix::zeros(m, n);
    let mut z = DMatrix::zeros(m, n);
    let mut mu = mu0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let inv = 1.0 / mu;
        z = partial_svt(&(x - &e + &y * inv), cfg.rank, inv)?;
        e = soft_threshold_matrix(&(x - &z + &y * inv), lambda * inv);
        let gap = x - &z - &e;
        residual = gap.norm() / x_norm;
        y += gap * mu;
        mu = (mu * cfg.rho_mu).min(mu_max);
        if residual < cfg.tol {
            break;
        }
    }
    let converged = residual < cfg.tol;
    if !converged {
        log::warn!("rpca stopped after {iterations} iterations with residual {residual:.3e}");
    }
    Ok(RpcaResult { z, e, iterations, residual, converged })
}

/// Least-squares normals from a low-rank matrix `Z = rho N^T L` with unit
/// light directions. Rows of `z` follow the mask's pixel order.
pub fn normals_from_lowrank(z: &DMatrix<f64>, lights: &LightSet, mask: &Mask) -> Result<(NormalMap, AlbedoMap)> {
    if z.ncols() != lights.len() || z.nrows() != mask.count() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} matrix for {} masked pixels and {} lights",
            z.nrows(),
            z.ncols(),
            mask.count(),
            lights.len()
        )));
    }
    let l = lights.direction_matrix();
    if rank3(&l) < 3 {
        return Err(Error::DegenerateLights);
    }
    let gram_inv = (&l * l.transpose()).try_inverse().ok_or(Error::DegenerateLights)?;
    let b = gram_inv * (&l * z.transpose());
    let mut normals = vec![Vec3::zeros(); mask.len()];
    let mut albedo = vec![0.0; mask.len()];
    let mut any = false;
    for (k, p) in mask.indices().into_iter().enumerate() {
        let v = Vec3::new(b[(0, k)], b[(1, k)], b[(2, k)]);
        let norm = v.norm();
        if norm > 0.0 {
            any = true;
            normals[p] = orient_unit(v);
            albedo[p] = norm.min(MAX_ALBEDO);
        } else {
            normals[p] = VIEW;
        }
    }
    if !any {
        return Err(Error::ZeroNormNormal);
    }
    let nm = NormalMap::new(mask.clone(), normals)?;
    let am = AlbedoMap::new(mask.height(), mask.width(), 1, albedo)?;
    Ok((nm, am))
}

/// Pixel-by-image matrix with each column divided by its light intensity.
pub fn intensity_normalized_matrix(stack: &ImageStack, lights: &LightSet) -> Result<DMatrix<f64>> {
    if stack.count() != lights.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} lights", stack.count(), lights.len())));
    }
    let mut x = stack.masked_matrix();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col /= lights.intensity(j);
    }
    Ok(x)
}

/// Robust normals for a calibrated stack: intensity normalization, low-rank
/// recovery, then the least-squares normal fit.
pub fn robust_normals(stack: &ImageStack, lights: &LightSet, cfg: &RpcaConfig) -> Result<(NormalMap, AlbedoMap, RpcaResult)> {
    let x = intensity_normalized_matrix(stack, lights)?;
    let rpca = rpca_partial_sum(&x, cfg)?;
    let (n, a) = normals_from_lowrank(&rpca.z, lights, stack.mask())?;
    Ok((n, a, rpca))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_table() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-1.5, 0.5), -1.0);
        for x in [-2.0, -0.1, 0.0, 0.4, 3.0] {
            assert_eq!(soft_threshold(x, 0.0), x);
        }
    }

    #[test]
    fn partial_svt_on_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1.0]));
        let out = partial_svt(&m, 1, 2.0).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 0.0]));
        assert!((out - expect).norm() < 1e-12);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn partial_svt_infinite_threshold_is_best_rank_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 12, 6);
        let out = partial_svt(&m, 2, 1e300).unwrap();
        let svd = m.clone().svd(true, true);
        let mut s = svd.singular_values.clone();
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        for &i in &order[2..] {
            s[i] = 0.0;
        }
        let best = svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap();
        assert!((out - best).norm() < 1e-10);
    }

    #[test]
    fn clean_rank_three_matrix_is_all_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 200, 3) * random_matrix(&mut rng, 3, 12);
        let r = rpca_partial_sum(&x, &RpcaConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.residual < 1e-7);
        assert!((&r.z - &x).norm() / x.norm() < 1e-6);
        assert!(r.e.amax() < 1e-6);
    }

    #[test]
    fn zero_lowrank_has_no_normals() {
        let mask = Mask::full(2, 2);
        let lights = LightSet::new(vec![Vec3::x(), Vec3::y(), Vec3::z()], vec![1.0; 3]).unwrap();
        let z = DMatrix::zeros(4, 3);
        assert!(matches!(normals_from_lowrank(&z, &lights, &mask), Err(Error::ZeroNormNormal)));
    }

    proptest! {
        #[test]
        fn partial_svt_preserves_low_rank(seed in 0u64..500, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 9, k) * random_matrix(&mut rng, k, 7);
            let out = partial_svt(&m, k, rng.gen_range(0.0..10.0)).unwrap();
            prop_assert!((out - &m).norm() < 1e-10);
        }

        #[test]
        fn partial_svt_with_zero_rank_is_classical_svt(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 8, 5);
            let tau = rng.gen_range(0.0..1.5);
            let out = partial_svt(&m, 0, tau).unwrap();
            let svd = m.clone().svd(true, true);
            let s = svd.singular_values.map(|v| soft_threshold(v, tau));
            let expect = svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap();
            prop_assert!((out - expect).norm() < 1e-9);
            prop_assert!((partial_svt(&m, 5, tau).unwrap() - &m).norm() == 0.0);
        }
    }
}
