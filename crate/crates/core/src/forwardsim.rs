//! Synthetic heightfield scenes with ground truth: analytic geometry, cast
//! and attached shadows, Phong highlights, diffuse interreflection, and
//! Gaussian noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{build_facets_with_depth, interreflection_kernel, Heightfield, DEFAULT_FACTOR};
use crate::interreflection::{albedo_diagonal, InterreflectionSystem};
use crate::kv::KeyValues;
use crate::types::{pixel_xy, AlbedoMap, DepthMap, ImageStack, LightSet, Mask, NormalMap, Vec3, VIEW};

/// Step of the shadow ray march, in pixels.
pub const SHADOW_STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Sphere,
    Bowl,
    Vase,
    Relief,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Primitive::Sphere),
            "bowl" | "concave-bowl" => Ok(Primitive::Bowl),
            "vase" | "vase-of-revolution" => Ok(Primitive::Vase),
            "relief" | "plane-with-relief" => Ok(Primitive::Relief),
            other => Err(Error::Config(format!(
                "unknown primitive `{other}` (expected sphere, bowl, vase or relief)"
            ))),
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::Sphere => "sphere",
            Primitive::Bowl => "bowl",
            Primitive::Vase => "vase",
            Primitive::Relief => "relief",
        })
    }
}

/// Everything needed to synthesize a dataset.
///
/// Lengths are in pixels. `radius` is a fraction of half the resolution;
/// `depth` is the bowl depth as a fraction of its rim radius, or the relief
/// amplitude as a fraction of the resolution. `profile` lists vase radii
/// (fractions of half the resolution) from top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitive: Primitive,
    pub resolution: usize,
    pub radius: f64,
    pub depth: f64,
    pub profile: Vec<f64>,
    pub albedo: Vec<f64>,
    pub specular: f64,
    pub shininess: f64,
    pub light_count: usize,
    pub light_polar_min_deg: f64,
    pub light_polar_max_deg: f64,
    pub light_intensity_min: f64,
    pub light_intensity_max: f64,
    pub light_directions: Option<Vec<Vec3>>,
    pub light_intensities: Option<Vec<f64>>,
    pub noise: f64,
    pub interreflection: bool,
    pub facet_factor: usize,
    pub seed: u64,
}

const SPEC_KEYS: &[&str] = &[
    "primitive",
    "resolution",
    "radius",
    "depth",
    "profile",
    "albedo",
    "specular",
    "shininess",
    "light_count",
    "light_polar_min_deg",
    "light_polar_max_deg",
    "light_intensity_min",
    "light_intensity_max",
    "light_directions",
    "light_intensities",
    "noise",
    "interreflection",
    "facet_factor",
    "seed",
];

impl SceneSpec {
    pub fn new(primitive: Primitive, resolution: usize) -> Self {
        let (radius, depth) = match primitive {
            Primitive::Sphere => (0.9, 0.0),
            Primitive::Bowl => (0.9, 0.7),
            Primitive::Vase => (0.9, 0.0),
            Primitive::Relief => (1.0, 0.08),
        };
        SceneSpec {
            primitive,
            resolution,
            radius,
            depth,
            profile: vec![0.45, 0.75, 0.85, 0.55, 0.35, 0.5],
            albedo: vec![0.7],
            specular: 0.0,
            shininess: 32.0,
            light_count: 16,
            light_polar_min_deg: 10.0,
            light_polar_max_deg: 50.0,
            light_intensity_min: 1.0,
            light_intensity_max: 1.0,
            light_directions: None,
            light_intensities: None,
            noise: 0.0,
            interreflection: true,
            facet_factor: DEFAULT_FACTOR,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.albedo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution must be at least 16, got {}", self.resolution)));
        }
        if !(self.albedo.len() == 1 || self.albedo.len() == 3) {
            return Err(Error::Config("albedo needs one or three values".into()));
        }
        if self.albedo.iter().any(|a| !(*a >= 0.0 && *a < 1.0)) {
            return Err(Error::Config("albedo must lie in [0, 1)".into()));
        }
        if !(self.specular >= 0.0) || !(self.shininess >= 1.0) {
            return Err(Error::Config("specular weight must be >= 0 and shininess >= 1".into()));
        }
        if !(self.radius > 0.0 && self.radius <= 1.0) {
            return Err(Error::Config(format!("radius fraction {} outside (0, 1]", self.radius)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        if self.facet_factor == 0 {
            return Err(Error::Config("facet_factor must be positive".into()));
        }
        if self.light_directions.is_none() && self.light_count < 3 {
            return Err(Error::Config("at least three lights are required".into()));
        }
        if !(0.0..=90.0).contains(&self.light_polar_min_deg) || !(self.light_polar_min_deg..=90.0).contains(&self.light_polar_max_deg) {
            return Err(Error::Config("light polar range must satisfy 0 <= min <= max <= 90".into()));
        }
        if !(self.light_intensity_min > 0.0 && self.light_intensity_max >= self.light_intensity_min) {
            return Err(Error::Config("light intensity range must be positive and ordered".into()));
        }
        Ok(())
    }

    /// Parses a `key = value` scene description; omitted keys keep the
    /// defaults of the named primitive.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(SPEC_KEYS)?;
        let primitive: Primitive = kv
            .get_str("primitive")
            .ok_or_else(|| Error::Config("missing `primitive`".into()))?
            .parse()?;
        let mut s = SceneSpec::new(primitive, kv.get_or("resolution", 64usize)?);
        s.radius = kv.get_or("radius", s.radius)?;
        s.depth = kv.get_or("depth", s.depth)?;
        if let Some(p) = kv.get_list("profile")? {
            s.profile = p;
        }
        if let Some(a) = kv.get_list("albedo")? {
            s.albedo = a;
        }
        s.specular = kv.get_or("specular", s.specular)?;
        s.shininess = kv.get_or("shininess", s.shininess)?;
        s.light_count = kv.get_or("light_count", s.light_count)?;
        s.light_polar_min_deg = kv.get_or("light_polar_min_deg", s.light_polar_min_deg)?;
        s.light_polar_max_deg = kv.get_or("light_polar_max_deg", s.light_polar_max_deg)?;
        s.light_intensity_min = kv.get_or("light_intensity_min", s.light_intensity_min)?;
        s.light_intensity_max = kv.get_or("light_intensity_max", s.light_intensity_max)?;
        if let Some(d) = kv.get_list::<f64>("light_directions")? {
            if d.len() % 3 != 0 || d.is_empty() {
                return Err(Error::Config("light_directions needs x y z triples".into()));
            }
            s.light_directions = Some(d.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect());
        }
        s.light_intensities = kv.get_list("light_intensities")?;
        s.noise = kv.get_or("noise", s.noise)?;
        s.interreflection = kv.get_or("interreflection", s.interreflection)?;
        s.facet_factor = kv.get_or("facet_factor", s.facet_factor)?;
        s.seed = kv.get_or("seed", s.seed)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut kv = KeyValues::default();
        kv.insert("primitive", self.primitive);
        kv.insert("resolution", self.resolution);
        kv.insert("radius", self.radius);
        kv.insert("depth", self.depth);
        kv.insert("profile", join(&self.profile));
        kv.insert("albedo", join(&self.albedo));
        kv.insert("specular", self.specular);
        kv.insert("shininess", self.shininess);
        kv.insert("light_count", self.light_count);
        kv.insert("light_polar_min_deg", self.light_polar_min_deg);
        kv.insert("light_polar_max_deg", self.light_polar_max_deg);
        kv.insert("light_intensity_min", self.light_intensity_min);
        kv.insert("light_intensity_max", self.light_intensity_max);
        if let Some(d) = &self.light_directions {
            kv.insert("light_directions", join(&d.iter().flat_map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>()));
        }
        if let Some(i) = &self.light_intensities {
            kv.insert("light_intensities", join(i));
        }
        kv.insert("noise", self.noise);
        kv.insert("interreflection", self.interreflection);
        kv.insert("facet_factor", self.facet_factor);
        kv.insert("seed", self.seed);
        kv.to_text()
    }

    /// Explicit lights when given, otherwise `light_count` seeded directions
    /// uniform in solid angle within the polar range.
    pub fn lights(&self) -> Result<LightSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c69_6768_7473);
        let dirs = match &self.light_directions {
            Some(d) => d.clone(),
            None => {
                let (c_lo, c_hi) = (self.light_polar_max_deg.to_radians().cos(), self.light_polar_min_deg.to_radians().cos());
                (0..self.light_count)
                    .map(|_| {
                        let cz: f64 = if c_hi > c_lo { rng.gen_range(c_lo..=c_hi) } else { c_hi };
                        let az: f64 = rng.gen_range(-PI..PI);
                        let s = (1.0 - cz * cz).max(0.0).sqrt();
                        Vec3::new(s * az.cos(), s * az.sin(), cz)
                    })
                    .collect()
            }
        };
        let ints = match &self.light_intensities {
            Some(i) if i.len() == dirs.len() => i.clone(),
            Some(i) if i.len() == 1 => vec![i[0]; dirs.len()],
            Some(i) => {
                return Err(Error::Config(format!("{} light intensities for {} directions", i.len(), dirs.len())));
            }
            None if self.light_intensity_max > self.light_intensity_min => {
                (0..dirs.len()).map(|_| rng.gen_range(self.light_intensity_min..self.light_intensity_max)).collect()
            }
            None => vec![self.light_intensity_min; dirs.len()],
        };
        LightSet::from_unnormalized(dirs, ints)
    }
}

/// Ground-truth geometry of a synthesized scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub mask: Mask,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
}

/// Radius profile of the vase: Catmull-Rom through the control radii at
/// evenly spaced heights, with its derivative.
struct Profile {
    points: Vec<f64>,
    top: f64,
    bottom: f64,
}

impl Profile {
    fn new(points: &[f64], top: f64, bottom: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateProfile("at least two control radii are required".into()));
        }
        if points.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::DegenerateProfile("control radii must be positive".into()));
        }
        let p = Profile { points: points.to_vec(), top, bottom };
        let samples = 64 * points.len();
        for k in 0..=samples {
            let y = top + (bottom - top) * k as f64 / samples as f64;
            if p.eval(y).0 <= 0.0 {
                return Err(Error::DegenerateProfile(format!("radius vanishes near y = {y:.2}")));
            }
        }
        Ok(p)
    }

    /// Radius and `d radius / d y` at height `y`.
    fn eval(&self, y: f64) -> (f64, f64) {
        let n = self.points.len();
        let span = (self.bottom - self.top) / (n - 1) as f64;
        let u = ((y - self.top) / span).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let t = u - i as f64;
        let at = |k: isize| self.points[k.clamp(0, n as isize - 1) as usize];
        let (p0, p1, p2, p3) = (at(i as isize - 1), at(i as isize), at(i as isize + 1), at(i as isize + 2));
        let a = 2.0 * p1;
        let b = p2 - p0;
        let c = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3;
        let d = -p0 + 3.0 * p1 - 3.0 * p2 + p3;
        let value = 0.5 * (a + b * t + c * t * t + d * t * t * t);
        let slope = 0.5 * (b + 2.0 * c * t + 3.0 * d * t * t) / span;
        (value, slope)
    }
}

/// Deterministic Gaussian bumps and dents for the relief primitive.
fn relief_bumps(spec: &SceneSpec) -> Vec<(f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7265_6c69_6566);
    let half = spec.resolution as f64 / 2.0;
    let amp = spec.depth * spec.resolution as f64;
    (0..6)
        .map(|k| {
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            (
                rng.gen_range(-0.6 * half..0.6 * half),
                rng.gen_range(-0.6 * half..0.6 * half),
                rng.gen_range(0.12 * half..0.3 * half),
                sign * amp * rng.gen_range(0.5..1.0),
            )
        })
        .collect()
}

/// Samples the analytic heightfield at pixel centers. Normals come from
/// analytic slopes.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let res = spec.resolution;
    let half = res as f64 / 2.0;
    let radius = spec.radius * half;
    let n = res * res;
    let mut inside = vec![false; n];
    let mut depth = vec![0.0; n];
    let mut normals = vec![Vec3::zeros(); n];

    let profile = if spec.primitive == Primitive::Vase {
        let pts: Vec<f64> = spec.profile.iter().map(|r| r * half).collect();
        Some(Profile::new(&pts, radius, -radius)?)
    } else {
        None
    };
    let bowl_sphere = if spec.primitive == Primitive::Bowl {
        let d = spec.depth * radius;
        if !(d > 0.0 && d <= radius) {
            return Err(Error::DegenerateProfile("bowl depth must be in (0, radius]".into()));
        }
        Some((radius * radius + d * d) / (2.0 * d))
    } else {
        None
    };
    let bumps = if spec.primitive == Primitive::Relief { relief_bumps(spec) } else { Vec::new() };

    for r in 0..res {
        for c in 0..res {
            let p = r * res + c;
            let (x, y) = pixel_xy(res, res, r, c);
            let rr = x * x + y * y;
            let sample = match spec.primitive {
                Primitive::Sphere => (rr < radius * radius).then(|| {
                    let z = (radius * radius - rr).sqrt();
                    (z, Vec3::new(x, y, z) / radius)
                }),
                Primitive::Bowl => {
                    let rs = bowl_sphere.unwrap_or(radius);
                    (rr < radius * radius).then(|| {
                        let s = (rs * rs - rr).sqrt();
                        let d = (rs * rs - radius * radius).sqrt() - s;
                        (d, Vec3::new(-x, -y, s) / rs)
                    })
                }
                Primitive::Vase => {
                    let prof = profile.as_ref().expect("vase profile");
                    if y.abs() >= radius {
                        None
                    } else {
                        let (rho, drho) = prof.eval(y);
                        (x.abs() < rho).then(|| {
                            let z = (rho * rho - x * x).sqrt();
                            // Slopes of z = sqrt(rho(y)^2 - x^2).
                            let p = -x / z;
                            let q = rho * drho / z;
                            (z, Vec3::new(-p, -q, 1.0).normalize())
                        })
                    }
                }
                Primitive::Relief => {
                    let (mut z, mut px, mut py) = (0.0, 0.0, 0.0);
                    for &(bx, by, s, a) in &bumps {
                        let e = a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp();
                        z += e;
                        px += -e * (x - bx) / (s * s);
                        py += -e * (y - by) / (s * s);
                    }
                    Some((z, Vec3::new(-px, -py, 1.0).normalize()))
                }
            };
            if let Some((z, nrm)) = sample {
                inside[p] = true;
                depth[p] = z;
                normals[p] = nrm;
            }
        }
    }
    let mask = Mask::new(res, res, inside)?;
    if mask.count() == 0 {
        return Err(Error::DegenerateProfile("scene covers no pixels".into()));
    }
    let c = spec.channels();
    let mut albedo = vec![0.0; n * c];
    for p in mask.indices() {
        albedo[p * c..p * c + c].copy_from_slice(&spec.albedo);
    }
    Ok(Scene {
        spec: spec.clone(),
        depth: DepthMap::new(mask.clone(), depth)?,
        normals: NormalMap::new(mask.clone(), normals)?,
        albedo: AlbedoMap::new(res, res, c, albedo)?,
        mask,
    })
}

/// Per-light visibility of every masked pixel (cast shadows).
pub fn cast_shadow_mask(scene: &Scene, lights: &LightSet) -> Vec<Vec<bool>> {
    let hf = Heightfield::from_depth(&scene.depth);
    let (h, w) = (scene.mask.height(), scene.mask.width());
    let pixels = scene.mask.indices();
    lights
        .directions()
        .iter()
        .map(|l| {
            let mut lit = vec![false; h * w];
            for &p in &pixels {
                let (x, y) = pixel_xy(h, w, p / w, p % w);
                lit[p] = !hf.ray_occluded(&Vec3::new(x, y, scene.depth.get(p)), l, SHADOW_STEP);
            }
            lit
        })
        .collect()
}

/// Renders one image per light: shadowed Lambertian radiance, its
/// interreflected share from the facet solve, and an additive Phong lobe.
pub fn render_scene(scene: &Scene, lights: &LightSet) -> Result<ImageStack> {
    let spec = &scene.spec;
    let (h, w) = (scene.mask.height(), scene.mask.width());
    let c = spec.channels();
    let n_img = lights.len();
    let pixels = scene.mask.indices();
    let lit = cast_shadow_mask(scene, lights);

    // Direct diffuse term per [image][pixel][channel].
    let plane = h * w * c;
    let mut diffuse = vec![0.0; n_img * plane];
    for i in 0..n_img {
        let l = lights.direction(i);
        let e = lights.intensity(i);
        for &p in &pixels {
            let shade = scene.normals.get(p).dot(&l).max(0.0);
            if shade > 0.0 && lit[i][p] {
                for ch in 0..c {
                    diffuse[i * plane + p * c + ch] = e * scene.albedo.get(p, ch) * shade;
                }
            }
        }
    }

    if spec.interreflection {
        add_interreflection(scene, n_img, &mut diffuse)?;
    }

    let mut data = diffuse;
    if spec.specular > 0.0 {
        for i in 0..n_img {
            let l = lights.direction(i);
            let e = lights.intensity(i);
            for &p in &pixels {
                let n = scene.normals.get(p);
                let ndl = n.dot(&l);
                if ndl <= 0.0 || !lit[i][p] {
                    continue;
                }
                let r = 2.0 * ndl * n - l;
                let s = e * spec.specular * r.dot(&VIEW).max(0.0).powf(spec.shininess);
                for ch in 0..c {
                    data[i * plane + p * c + ch] += s;
                }
            }
        }
    }
    ImageStack::new(n_img, h, w, c, data, scene.mask.clone())
}

fn add_interreflection(scene: &Scene, n_img: usize, diffuse: &mut [f64]) -> Result<()> {
    let spec = &scene.spec;
    let (h, w) = (scene.mask.height(), scene.mask.width());
    let c = spec.channels();
    let plane = h * w * c;
    let gray = AlbedoMap::new(h, w, 1, (0..h * w).map(|p| scene.albedo.gray(p)).collect())?;
    let facets = build_facets_with_depth(&scene.normals, &gray, &scene.depth, spec.facet_factor)?;
    if facets.len() < 2 {
        return Ok(());
    }
    let kernel = interreflection_kernel(&facets)?;
    for ch in 0..c {
        let rho: Vec<f64> = facets
            .members
            .iter()
            .map(|m| m.iter().map(|&p| scene.albedo.get(p, ch)).sum::<f64>() / m.len() as f64)
            .collect();
        let system = InterreflectionSystem::new(&albedo_diagonal(&rho), &kernel)?;
        let xs = DMatrix::from_fn(facets.len(), n_img, |f, i| {
            let m = &facets.members[f];
            m.iter().map(|&p| diffuse[i * plane + p * c + ch]).sum::<f64>() / m.len() as f64
        });
        let x = system.solve(&xs)?;
        for i in 0..n_img {
            let extra: Vec<f64> = (0..facets.len()).map(|f| (x[(f, i)] - xs[(f, i)]).max(0.0)).collect();
            let up = facets.upsample_scalar(&extra);
            for p in scene.mask.indices() {
                diffuse[i * plane + p * c + ch] += up[p];
            }
        }
    }
    Ok(())
}

/// Adds i.i.d. zero-mean Gaussian noise to masked pixels and clamps at zero.
pub fn add_noise(stack: &ImageStack, sigma: f64, seed: u64) -> Result<ImageStack> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(stack.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = stack.channels();
    let per = stack.pixels() * c;
    let mask = stack.mask().clone();
    let data: Vec<f64> = stack
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if mask.get((k % per) / c) { (v + normal.sample(&mut rng)).max(0.0) } else { v })
        .collect();
    ImageStack::new(stack.count(), stack.height(), stack.width(), c, data, mask)
}

/// A rendered dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub scene: Scene,
    pub lights: LightSet,
    pub stack: ImageStack,
}

/// Builds, renders, and (when `spec.noise > 0`) perturbs a scene.
pub fn simulate(spec: &SceneSpec) -> Result<Simulation> {
    let scene = make_scene(spec)?;
    let lights = spec.lights()?;
    let clean = render_scene(&scene, &lights)?;
    let stack = add_noise(&clean, spec.noise, spec.seed)?;
    Ok(Simulation { scene, lights, stack })
}
