//! Depth from normals, facet discretization, heightfield visibility, and the
//! pairwise interreflection kernel.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::{orient_unit, pixel_xy, AlbedoMap, DepthMap, Mask, NormalMap, Vec3};

/// Smallest `n_z` used when converting normals to slopes.
pub const NZ_EPS: f64 = 1e-4;
pub const DEFAULT_FACTOR: usize = 4;
/// Facet areas are capped at this multiple of the flat block area.
pub const MAX_AREA_RATIO: f64 = 5.0;
/// Heights closer than this (in pixel units) do not count as occluding.
pub const OCCLUSION_TOL: f64 = 1e-3;

const CG_TOL: f64 = 1e-8;

/// Depth slopes `p = dD/dx`, `q = dD/dy` per pixel (x right, y up).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Slopes `(-n_x/n_z, -n_y/n_z)`, with `n_z` clamped to at least
/// [`NZ_EPS`]. Returns the number of clamped pixels.
pub fn normals_to_gradients(nm: &NormalMap) -> (GradientField, usize) {
    let len = nm.mask().len();
    let mut p = vec![0.0; len];
    let mut q = vec![0.0; len];
    let mut clamped = 0;
    for i in nm.mask().indices() {
        let n = nm.get(i);
        let nz = if n.z < NZ_EPS {
            clamped += 1;
            NZ_EPS
        } else {
            n.z
        };
        p[i] = -n.x / nz;
        q[i] = -n.y / nz;
    }
    if clamped > 0 {
        log::warn!("{clamped} normals had n_z below {NZ_EPS} and were clamped");
    }
    (GradientField { height: nm.height(), width: nm.width(), p, q }, clamped)
}

pub fn slope_normal(p: f64, q: f64) -> Vec3 {
    Vec3::new(-p, -q, 1.0).normalize()
}

/// One difference constraint `D[b] - D[a] = g` between neighbouring pixels.
struct Edge {
    a: usize,
    b: usize,
    g: f64,
}

/// Least-squares depth whose forward differences match the slopes, each
/// constraint taking the mean slope of its two endpoints. The depth of
/// every 4-connected component has zero mean.
pub fn integrate_depth(g: &GradientField, mask: &Mask) -> Result<DepthMap> {
    let (h, w) = (mask.height(), mask.width());
    if g.height != h || g.width != w {
        return Err(Error::ShapeMismatch("gradient field and mask differ in size".into()));
    }
    let pixels = mask.indices();
    let mut unknown = vec![usize::MAX; h * w];
    for (k, &p) in pixels.iter().enumerate() {
        unknown[p] = k;
    }
    let mut edges = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if !mask.get(p) {
                continue;
            }
            if c + 1 < w && mask.get(p + 1) {
                edges.push(Edge { a: unknown[p], b: unknown[p + 1], g: 0.5 * (g.p[p] + g.p[p + 1]) });
            }
            // The row below sits one unit lower in y.
            if r + 1 < h && mask.get(p + w) {
                edges.push(Edge { a: unknown[p + w], b: unknown[p], g: 0.5 * (g.q[p] + g.q[p + w]) });
            }
        }
    }
    let n = pixels.len();
    let components = components(n, &edges);
    let mut rhs = vec![0.0; n];
    for e in &edges {
        rhs[e.b] += e.g;
        rhs[e.a] -= e.g;
    }
    let x = solve_laplacian(n, &edges, &components, &rhs)?;
    let mut depth = vec![0.0; h * w];
    for (k, &p) in pixels.iter().enumerate() {
        depth[p] = x[k];
    }
    DepthMap::new(mask.clone(), depth)
}

/// Component label per unknown and the component count.
fn components(n: usize, edges: &[Edge]) -> (Vec<usize>, usize) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for e in edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut roots = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        let r = find(&mut parent, i);
        if roots[r] == usize::MAX {
            roots[r] = count;
            count += 1;
        }
        label[i] = roots[r];
    }
    (label, count)
}

fn project_zero_mean(x: &mut [f64], comps: &(Vec<usize>, usize)) {
    let (label, count) = comps;
    let mut sum = vec![0.0; *count];
    let mut size = vec![0usize; *count];
    for (v, &l) in x.iter().zip(label) {
        sum[l] += v;
        size[l] += 1;
    }
    for (v, &l) in x.iter_mut().zip(label) {
        *v -= sum[l] / size[l] as f64;
    }
}

fn apply_laplacian(edges: &[Edge], x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for e in edges {
        let d = x[e.b] - x[e.a];
        y[e.b] += d;
        y[e.a] -= d;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients on the graph Laplacian, restricted to zero-mean
/// vectors per component.
fn solve_laplacian(n: usize, edges: &[Edge], comps: &(Vec<usize>, usize), rhs: &[f64]) -> Result<Vec<f64>> {
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    project_zero_mean(&mut r, comps);
    let b_norm = dot(&r, &r).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut d = r.clone();
    let mut ad = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let max_iter = (4 * n).max(1000);
    for _ in 0..max_iter {
        apply_laplacian(edges, &d, &mut ad);
        let dad = dot(&d, &ad);
        if dad <= 0.0 {
            break;
        }
        let alpha = rr / dad;
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * ad[i];
        }
        project_zero_mean(&mut r, comps);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() < CG_TOL * b_norm {
            project_zero_mean(&mut x, comps);
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            d[i] = r[i] + beta * d[i];
        }
        rr = rr_new;
    }
    // Recompute the true residual before giving up.
    project_zero_mean(&mut x, comps);
    apply_laplacian(edges, &x, &mut ad);
    let mut res: Vec<f64> = rhs.iter().zip(&ad).map(|(b, a)| b - a).collect();
    project_zero_mean(&mut res, comps);
    let rel = dot(&res, &res).sqrt() / b_norm;
    if rel < CG_TOL {
        return Ok(x);
    }
    Err(Error::CgStagnation { iterations: max_iter, residual: rel })
}

/// Depth from a normal map.
pub fn depth_from_normals(nm: &NormalMap) -> Result<DepthMap> {
    let (g, _) = normals_to_gradients(nm);
    integrate_depth(&g, nm.mask())
}

/// Normals from finite differences of a depth map: central differences
/// where both neighbours are masked, one-sided otherwise.
pub fn normals_from_depth(depth: &DepthMap) -> Result<NormalMap> {
    let mask = depth.mask().clone();
    let (h, w) = (mask.height(), mask.width());
    let d = depth.values();
    let slope = |fwd: Option<usize>, back: Option<usize>, here: usize, sign: f64| -> f64 {
        match (fwd, back) {
            (Some(f), Some(b)) => sign * 0.5 * (d[f] - d[b]),
            (Some(f), None) => sign * (d[f] - d[here]),
            (None, Some(b)) => sign * (d[here] - d[b]),
            (None, None) => 0.0,
        }
    };
    NormalMap::from_fn(mask.clone(), |r, c| {
        let p = r * w + c;
        let right = (c + 1 < w && mask.get(p + 1)).then(|| p + 1);
        let left = (c > 0 && mask.get(p - 1)).then(|| p - 1);
        let up = (r > 0 && mask.get(p - w)).then(|| p - w);
        let down = (r + 1 < h && mask.get(p + w)).then_some(p + w);
        slope_normal(slope(right, left, p, 1.0), slope(up, down, p, 1.0))
    })
}

/// A regular grid of heights with bilinear interpolation. Cells without a
/// surface hold NaN and never occlude.
#[derive(Clone, Debug)]
pub struct Heightfield {
    rows: usize,
    cols: usize,
    x0: f64,
    y0: f64,
    spacing: f64,
    z: Vec<f64>,
    z_max: f64,
}

impl Heightfield {
    /// `z` is row-major; node `(row, col)` sits at `(x0 + col*s, y0 - row*s)`.
    pub fn new(rows: usize, cols: usize, x0: f64, y0: f64, spacing: f64, z: Vec<f64>) -> Result<Self> {
        if z.len() != rows * cols || !(spacing > 0.0) {
            return Err(Error::ShapeMismatch("heightfield buffer does not match its grid".into()));
        }
        let z_max = z.iter().filter(|v| v.is_finite()).cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Heightfield { rows, cols, x0, y0, spacing, z, z_max })
    }

    /// Full-resolution heightfield of a depth map in pixel coordinates.
    pub fn from_depth(depth: &DepthMap) -> Self {
        let (h, w) = (depth.height(), depth.width());
        let (x0, y0) = pixel_xy(h, w, 0, 0);
        let z = (0..h * w).map(|p| if depth.mask().get(p) { depth.get(p) } else { f64::NAN }).collect();
        Heightfield::new(h, w, x0, y0, 1.0, z).expect("depth map dimensions are consistent")
    }

    /// Bilinear height at `(x, y)`, renormalized over the corners that carry
    /// a surface; `None` off the grid or with no surface corner.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let cf = (x - self.x0) / self.spacing;
        let rf = (self.y0 - y) / self.spacing;
        if !(cf >= 0.0 && rf >= 0.0 && cf <= (self.cols - 1) as f64 && rf <= (self.rows - 1) as f64) {
            return None;
        }
        let c0 = (cf.floor() as usize).min(self.cols.saturating_sub(2));
        let r0 = (rf.floor() as usize).min(self.rows.saturating_sub(2));
        let (fc, fr) = (cf - c0 as f64, rf - r0 as f64);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                let (r, c) = (r0 + dr, c0 + dc);
                if r >= self.rows || c >= self.cols {
                    continue;
                }
                let wgt = wr * wc;
                let v = self.z[r * self.cols + c];
                if wgt > 0.0 && v.is_finite() {
                    acc += wgt * v;
                    wsum += wgt;
                }
            }
        }
        (wsum > 1e-12).then(|| acc / wsum)
    }

    /// Whether the surface rises above the open segment from `a` to `b`,
    /// sampled every `step` units in the image plane.
    pub fn segment_occluded(&self, a: &Vec3, b: &Vec3, step: f64) -> bool {
        let d = b - a;
        let planar = (d.x * d.x + d.y * d.y).sqrt();
        let n = (planar / step).ceil() as usize;
        (1..n).any(|k| {
            let p = a + d * (k as f64 / n as f64);
            matches!(self.sample(p.x, p.y), Some(s) if s > p.z + OCCLUSION_TOL)
        })
    }

    /// Whether the ray `origin + t*dir`, `t > 0`, hits the surface before
    /// leaving the grid or rising above its highest point.
    pub fn ray_occluded(&self, origin: &Vec3, dir: &Vec3, step: f64) -> bool {
        let planar = (dir.x * dir.x + dir.y * dir.y).sqrt();
        if planar < 1e-12 {
            return false;
        }
        let dt = step / planar;
        let mut t = dt;
        loop {
            let p = origin + dir * t;
            if p.z > self.z_max + OCCLUSION_TOL {
                return false;
            }
            let cf = (p.x - self.x0) / self.spacing;
            let rf = (self.y0 - p.y) / self.spacing;
            if cf < -1.0 || rf < -1.0 || cf > self.cols as f64 || rf > self.rows as f64 {
                return false;
            }
            if let Some(s) = self.sample(p.x, p.y) {
                if s > p.z + OCCLUSION_TOL {
                    return true;
                }
            }
            t += dt;
        }
    }
}

/// Surface discretized into square blocks of `factor x factor` pixels.
#[derive(Clone, Debug)]
pub struct FacetSet {
    pub factor: usize,
    pub height: usize,
    pub width: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    /// `(x, y, depth)` in pixel units.
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub albedo: Vec<f64>,
    pub areas: Vec<f64>,
    /// Block index `(row * block_cols + col)` of each facet.
    pub blocks: Vec<usize>,
    /// Full-resolution pixels averaged into each facet.
    pub members: Vec<Vec<usize>>,
    /// Bilinear interpolation weights from facets to each full-resolution
    /// pixel; empty outside the mask or far from every facet.
    pub stencil: Vec<Vec<(usize, f64)>>,
    /// Block-resolution heights used for visibility.
    pub heightfield: Heightfield,
}

impl FacetSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Facet averages of a per-pixel vector field.
    pub fn downsample(&self, field: &[Vec3]) -> Vec<Vec3> {
        self.members
            .iter()
            .map(|m| m.iter().map(|&p| field[p]).sum::<Vec3>() / m.len() as f64)
            .collect()
    }

    /// Bilinear interpolation of per-facet vectors to full resolution.
    pub fn upsample(&self, values: &[Vec3]) -> Vec<Vec3> {
        self.stencil.iter().map(|s| s.iter().map(|&(f, w)| values[f] * w).sum()).collect()
    }

    pub fn downsample_scalar(&self, field: &[f64]) -> Vec<f64> {
        self.members.iter().map(|m| m.iter().map(|&p| field[p]).sum::<f64>() / m.len() as f64).collect()
    }

    pub fn upsample_scalar(&self, values: &[f64]) -> Vec<f64> {
        self.stencil.iter().map(|s| s.iter().map(|&(f, w)| values[f] * w).sum()).collect()
    }
}

/// Facets from a normal map, integrating it for depth.
pub fn build_facets(nm: &NormalMap, albedo: &AlbedoMap, factor: usize) -> Result<FacetSet> {
    let depth = depth_from_normals(nm)?;
    build_facets_with_depth(nm, albedo, &depth, factor)
}

/// Facets from a normal map and a matching depth map. A block becomes a
/// facet when at least half of its pixels are masked.
pub fn build_facets_with_depth(nm: &NormalMap, albedo: &AlbedoMap, depth: &DepthMap, factor: usize) -> Result<FacetSet> {
    let (h, w) = (nm.height(), nm.width());
    if factor == 0 {
        return Err(Error::InvalidInput("facet factor must be positive".into()));
    }
    if albedo.height() != h || albedo.width() != w || depth.height() != h || depth.width() != w {
        return Err(Error::ShapeMismatch("normal, albedo and depth maps differ in size".into()));
    }
    let mask = nm.mask();
    let (br, bc) = (h.div_ceil(factor), w.div_ceil(factor));
    let flat_area = (factor * factor) as f64;
    let mut fs_pos = Vec::new();
    let mut fs_n = Vec::new();
    let mut fs_a = Vec::new();
    let mut fs_area = Vec::new();
    let mut blocks = Vec::new();
    let mut members = Vec::new();
    let mut block_facet = vec![usize::MAX; br * bc];
    let mut grid = vec![f64::NAN; br * bc];
    for bi in 0..br {
        for bj in 0..bc {
            let rows = bi * factor..((bi + 1) * factor).min(h);
            let cols = bj * factor..((bj + 1) * factor).min(w);
            let px: Vec<usize> = rows
                .flat_map(|r| cols.clone().map(move |c| r * w + c))
                .filter(|&p| mask.get(p))
                .collect();
            if px.is_empty() || 2 * px.len() < factor * factor {
                continue;
            }
            let k = px.len() as f64;
            let mut pos = Vec3::zeros();
            let mut nsum = Vec3::zeros();
            let mut asum = 0.0;
            for &p in &px {
                let (x, y) = pixel_xy(h, w, p / w, p % w);
                pos += Vec3::new(x, y, depth.get(p));
                nsum += nm.get(p);
                asum += albedo.gray(p);
            }
            let n = orient_unit(nsum);
            let area = (flat_area / n.z.max(1e-12)).min(MAX_AREA_RATIO * flat_area);
            block_facet[bi * bc + bj] = fs_pos.len();
            grid[bi * bc + bj] = pos.z / k;
            fs_pos.push(pos / k);
            fs_n.push(n);
            fs_a.push(asum / k);
            fs_area.push(area);
            blocks.push(bi * bc + bj);
            members.push(px);
        }
    }
    if fs_pos.is_empty() {
        return Err(Error::EmptyFacets);
    }

    let half = (factor as f64 - 1.0) / 2.0;
    let f = factor as f64;
    let mut stencil = vec![Vec::new(); h * w];
    for p in mask.indices() {
        let (r, c) = (p / w, p % w);
        let u = ((r as f64 - half) / f).clamp(0.0, (br - 1) as f64);
        let v = ((c as f64 - half) / f).clamp(0.0, (bc - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let mut s = Vec::with_capacity(4);
        let mut wsum = 0.0;
        for (du, wu) in [(0, 1.0 - fu), (1, fu)] {
            for (dv, wv) in [(0, 1.0 - fv), (1, fv)] {
                let (bu, bv) = (u0 + du, v0 + dv);
                if bu >= br || bv >= bc {
                    continue;
                }
                let facet = block_facet[bu * bc + bv];
                let wt = wu * wv;
                if facet != usize::MAX && wt > 0.0 {
                    s.push((facet, wt));
                    wsum += wt;
                }
            }
        }
        if s.is_empty() {
            // Pixels whose surrounding blocks are all rejected fall back to
            // their own block when it is a facet.
            let own = block_facet[(r / factor) * bc + c / factor];
            if own != usize::MAX {
                s.push((own, 1.0));
            }
        } else {
            s.iter_mut().for_each(|e| e.1 /= wsum);
        }
        stencil[p] = s;
    }

    let (x0, y0) = pixel_xy(h, w, 0, 0);
    let heightfield = Heightfield::new(br, bc, x0 + half, y0 - half, f, grid)?;
    Ok(FacetSet {
        factor,
        height: h,
        width: w,
        block_rows: br,
        block_cols: bc,
        positions: fs_pos,
        normals: fs_n,
        albedo: fs_a,
        areas: fs_area,
        blocks,
        members,
        stencil,
        heightfield,
    })
}

/// Point-to-point coupling between two oriented points, before visibility
/// and area weighting: `(n_i . -r)(n_j . r) / (r.r)^2` with `r = x_i - x_j`,
/// or zero unless both cosines are strictly positive.
pub fn pair_kernel(xi: &Vec3, ni: &Vec3, xj: &Vec3, nj: &Vec3) -> f64 {
    let r = xi - xj;
    let ci = -ni.dot(&r);
    let cj = nj.dot(&r);
    if ci > 0.0 && cj > 0.0 {
        let rr = r.dot(&r);
        ci * cj / (rr * rr)
    } else {
        0.0
    }
}

/// Symmetric, nonnegative facet coupling matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct InterreflectionKernel {
    pub k: DMatrix<f64>,
}

impl InterreflectionKernel {
    pub fn zeros(m: usize) -> Self {
        InterreflectionKernel { k: DMatrix::zeros(m, m) }
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }
}

/// Kernel over a facet set. Each entry is [`pair_kernel`] times
/// `sqrt(A_i A_j)`, zeroed when the block heightfield rises above the
/// segment between the facets.
pub fn interreflection_kernel(fs: &FacetSet) -> Result<InterreflectionKernel> {
    kernel_from_points(&fs.positions, &fs.normals, &fs.areas, Some(&fs.heightfield), fs.factor as f64)
}

/// Kernel for explicit points; `heightfield = None` skips the occlusion test.
pub fn kernel_from_points(
    positions: &[Vec3],
    normals: &[Vec3],
    areas: &[f64],
    heightfield: Option<&Heightfield>,
    step: f64,
) -> Result<InterreflectionKernel> {
    let m = positions.len();
    if m < 2 || normals.len() != m || areas.len() != m {
        return Err(Error::InvalidInput(format!("kernel needs at least two consistent facets, got {m}")));
    }
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let r = positions[i] - positions[j];
            if r.dot(&r) < 1e-18 {
                return Err(Error::CoincidentFacets(i, j));
            }
            let g = pair_kernel(&positions[i], &normals[i], &positions[j], &normals[j]);
            if g == 0.0 {
                continue;
            }
            if let Some(hf) = heightfield {
                if hf.segment_occluded(&positions[j], &positions[i], step) {
                    continue;
                }
            }
            let v = g * (areas[i] * areas[j]).sqrt();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(InterreflectionKernel { k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_map(h: usize, w: usize, n: Vec3) -> NormalMap {
        NormalMap::from_fn(Mask::full(h, w), |_, _| n).unwrap()
    }

    #[test]
    fn gradients_of_simple_normals() {
        let (g, c) = normals_to_gradients(&constant_map(2, 2, Vec3::z()));
        assert!(g.p.iter().chain(&g.q).all(|v| *v == 0.0));
        assert_eq!(c, 0);
        let s = 0.5f64.sqrt();
        let (g, _) = normals_to_gradients(&constant_map(2, 2, Vec3::new(-s, 0.0, s)));
        assert!((g.p[0] - 1.0).abs() < 1e-12 && g.q[0] == 0.0);
        let n = Vec3::new(1.0, 0.0, 1e-9).normalize();
        let (g, c) = normals_to_gradients(&constant_map(1, 1, n));
        assert_eq!(c, 1);
        assert!((g.p[0] + n.x / NZ_EPS).abs() < 1e-9);
    }

    #[test]
    fn integrates_a_plane_exactly() {
        let (h, w) = (9, 13);
        let mask = Mask::full(h, w);
        let g = GradientField { height: h, width: w, p: vec![1.0; h * w], q: vec![-0.5; h * w] };
        let d = integrate_depth(&g, &mask).unwrap();
        let mut err: f64 = 0.0;
        for r in 0..h {
            for c in 0..w {
                let (x, y) = pixel_xy(h, w, r, c);
                err = err.max((d.at(r, c) - (x - 0.5 * y)).abs());
            }
        }
        assert!(err < 1e-7, "plane error {err}");
        let zero = GradientField { height: h, width: w, p: vec![0.0; h * w], q: vec![0.0; h * w] };
        assert!(integrate_depth(&zero, &mask).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn separate_components_each_have_zero_mean() {
        let mask = Mask::from_fn(4, 7, |_, c| c != 3);
        let g = GradientField { height: 4, width: 7, p: vec![1.0; 28], q: vec![0.0; 28] };
        let d = integrate_depth(&g, &mask).unwrap();
        let left: f64 = (0..4).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| d.at(r, c)).sum();
        assert!(left.abs() < 1e-9);
        assert!((d.at(0, 5) - d.at(0, 4) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn facet_counting_and_constant_normals() {
        let n = Vec3::new(0.0, 0.6, 0.8);
        let nm = constant_map(8, 8, n);
        let albedo = AlbedoMap::uniform(8, 8, 1, 0.5).unwrap();
        let fs = build_facets(&nm, &albedo, 4).unwrap();
        assert_eq!(fs.len(), 4);
        assert!(fs.normals.iter().all(|m| (m - n).norm() < 1e-12));
        assert!(fs.albedo.iter().all(|a| (a - 0.5).abs() < 1e-15));
        assert!((fs.areas[0] - 16.0 / 0.8).abs() < 1e-12);
    }

    #[test]
    fn full_tablet_sized_mask_facet_count() {
        let nm = constant_map(180, 225, Vec3::z());
        let albedo = AlbedoMap::uniform(180, 225, 1, 0.5).unwrap();
        let fs = build_facets(&nm, &albedo, 4).unwrap();
        // 45 block rows and 57 block columns; the last column is only one
        // pixel wide and falls below half coverage.
        assert_eq!(fs.len(), 45 * 56);
    }

    #[test]
    fn facing_pair_and_degenerate_pairs() {
        let (xi, ni) = (Vec3::zeros(), Vec3::z());
        let (xj, nj) = (Vec3::z(), -Vec3::z());
        let k = kernel_from_points(&[xi, xj], &[ni, nj], &[1.0, 1.0], None, 1.0).unwrap();
        assert_eq!(k.k[(0, 1)], 1.0);
        assert_eq!(k.k[(1, 0)], 1.0);
        assert_eq!(k.k[(0, 0)], 0.0);
        let k = kernel_from_points(&[xi, xj], &[-ni, nj], &[1.0, 1.0], None, 1.0).unwrap();
        assert_eq!(k.k[(0, 1)], 0.0);
        let k = kernel_from_points(&[xi, Vec3::x()], &[ni, ni], &[1.0, 1.0], None, 1.0).unwrap();
        assert_eq!(k.k[(0, 1)], 0.0);
        assert!(matches!(
            kernel_from_points(&[xi, xi], &[ni, nj], &[1.0, 1.0], None, 1.0),
            Err(Error::CoincidentFacets(0, 1))
        ));
    }

    #[test]
    fn facing_pair_falloff() {
        let value = |d: f64| pair_kernel(&Vec3::zeros(), &Vec3::z(), &Vec3::new(0.0, 0.0, d), &-Vec3::z());
        // Both unnormalized cosine factors equal d; what remains is (r.r)^-2.
        let net: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&d| value(d) / (d * d)).collect();
        assert_eq!(net, vec![1.0, 1.0 / 16.0, 1.0 / 256.0]);
    }

    #[test]
    fn heightfield_blocks_rays_behind_a_wall() {
        let (h, w) = (5, 9);
        let mask = Mask::full(h, w);
        let depth: Vec<f64> = (0..h * w).map(|p| if p % w == 4 { 10.0 } else { 0.0 }).collect();
        let hf = Heightfield::from_depth(&DepthMap::new(mask, depth).unwrap());
        let a = Vec3::new(-3.0, 0.0, 0.0);
        let b = Vec3::new(3.0, 0.0, 0.0);
        assert!(hf.segment_occluded(&a, &b, 0.5));
        assert!(!hf.segment_occluded(&a, &Vec3::new(-1.0, 0.0, 0.0), 0.5));
        assert!(hf.ray_occluded(&a, &Vec3::new(1.0, 0.0, 1.0).normalize(), 0.5));
        assert!(!hf.ray_occluded(&a, &Vec3::new(-1.0, 0.0, 1.0).normalize(), 0.5));
        assert!(!hf.ray_occluded(&a, &Vec3::z(), 0.5));
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric_nonnegative_zero_diagonal(
            depth in 2.0f64..12.0, tilt in -0.3f64..0.3, seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (20, 20);
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-1.0..1.0)))
                .collect();
            // Paraboloid bowl plus small bumps, with analytic slopes.
            let slope = |x: f64, y: f64| {
                let mut p = 2.0 * depth * x / 100.0 + tilt;
                let mut q = 2.0 * depth * y / 100.0;
                for &(bx, by, a) in &bumps {
                    let e = (-((x - bx).powi(2) + (y - by).powi(2)) / 8.0).exp();
                    p += a * e * -(x - bx) / 4.0;
                    q += a * e * -(y - by) / 4.0;
                }
                (p, q)
            };
            let mask = Mask::full(h, w);
            let nm = NormalMap::from_fn(mask, |r, c| {
                let (x, y) = pixel_xy(h, w, r, c);
                let (p, q) = slope(x, y);
                slope_normal(p, q)
            }).unwrap();
            let albedo = AlbedoMap::uniform(h, w, 1, 0.7).unwrap();
            let fs = build_facets(&nm, &albedo, 4).unwrap();
            let k = interreflection_kernel(&fs).unwrap().k;
            for i in 0..k.nrows() {
                prop_assert_eq!(k[(i, i)], 0.0);
                for j in 0..k.ncols() {
                    prop_assert!(k[(i, j)] >= 0.0);
                    prop_assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn integration_is_exact_on_paraboloids(a in -0.05f64..0.05, b in -0.05f64..0.05, c in -1.0f64..1.0) {
            let (h, w) = (12, 10);
            let mask = Mask::full(h, w);
            let mut p = vec![0.0; h * w];
            let mut q = vec![0.0; h * w];
            let mut truth = vec![0.0; h * w];
            for r in 0..h {
                for col in 0..w {
                    let (x, y) = pixel_xy(h, w, r, col);
                    let i = r * w + col;
                    p[i] = 2.0 * a * x + c;
                    q[i] = 2.0 * b * y;
                    truth[i] = a * x * x + b * y * y + c * x;
                }
            }
            let d = integrate_depth(&GradientField { height: h, width: w, p, q }, &mask).unwrap();
            let mean = truth.iter().sum::<f64>() / truth.len() as f64;
            for i in 0..h * w {
                prop_assert!((d.values()[i] - (truth[i] - mean)).abs() < 1e-6);
            }
        }
    }
}
