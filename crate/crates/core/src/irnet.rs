//! Test-time inverse-rendering network.
//!
//! A feature extractor sees every image at once and predicts a normal map
//! `N_o`. The interreflection operator turns `N_o` into the normals `N_ny`
//! that a Lambertian renderer would observe once interreflected light is
//! included. Per-image branches predict a reflectance map `Psi_i`, and
//! `X~_i = Psi_i * e_i * max(N_ny . l_i, 0)` is compared against the input.
//! The parameters are fitted per scene by Adam.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Adam, LinearOperator, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::mean_angular_error;
use crate::geometry::{build_facets, depth_from_normals, interreflection_kernel, FacetSet, DEFAULT_FACTOR};
use crate::interreflection::{albedo_diagonal, matrix_to_vectors, vectors_to_matrix, InterreflectionSystem};
use crate::kv::KeyValues;
use crate::types::{AlbedoMap, DepthMap, ImageStack, LightSet, Mask, NormalMap, Vec3, VIEW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LRelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "lrelu" => Ok(Activation::LRelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::LRelu => "lrelu",
        })
    }
}

/// How `init_scale` is read when drawing initial weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Std,
    Variance,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(InitMode::Std),
            "variance" => Ok(InitMode::Variance),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Std => "std",
            InitMode::Variance => "variance",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Learning rate of the feature and normal branches when set.
    pub estimation_lr: Option<f64>,
    /// The learning rate is multiplied by `lr_drop_factor` after this many
    /// iterations.
    pub lr_drop_after: usize,
    pub lr_drop_factor: f64,
    /// Weak supervision is active for iterations `1..=weak_cutoff`.
    pub weak_cutoff: usize,
    pub sample_fraction: f64,
    pub kernel_refresh: usize,
    /// Variance of the Gaussian noise added to the specular-branch input.
    pub noise_variance: f64,
    pub seed: u64,
    pub feature_width: usize,
    pub specular_width: usize,
    pub blend_width: usize,
    pub reflectance_width: usize,
    pub activation: Activation,
    pub lrelu_slope: f64,
    pub init_scale: f64,
    pub init_mode: InitMode,
    pub facet_factor: usize,
    pub norm_eps: f64,
    /// Run the interreflection operator; off renders with `N_o` directly.
    pub interreflection: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 1000,
            lr: 8e-4,
            estimation_lr: None,
            lr_drop_after: 900,
            lr_drop_factor: 0.1,
            weak_cutoff: 50,
            sample_fraction: 0.1,
            kernel_refresh: 100,
            noise_variance: 0.1,
            seed: 0,
            feature_width: 32,
            specular_width: 16,
            blend_width: 32,
            reflectance_width: 16,
            activation: Activation::Relu,
            lrelu_slope: 0.1,
            init_scale: 0.02,
            init_mode: InitMode::Std,
            facet_factor: DEFAULT_FACTOR,
            norm_eps: 1e-5,
            interreflection: true,
        }
    }
}

const FIT_KEYS: &[&str] = &[
    "iterations",
    "lr",
    "estimation_lr",
    "lr_drop_after",
    "lr_drop_factor",
    "weak_cutoff",
    "sample_fraction",
    "kernel_refresh",
    "noise_variance",
    "seed",
    "feature_width",
    "specular_width",
    "blend_width",
    "reflectance_width",
    "activation",
    "lrelu_slope",
    "init_scale",
    "init_mode",
    "facet_factor",
    "norm_eps",
    "interreflection",
];

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_drop_factor", self.lr_drop_factor),
            ("init_scale", self.init_scale),
            ("norm_eps", self.norm_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if let Some(v) = self.estimation_lr {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`estimation_lr` must be positive, got {v}")));
            }
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!("`sample_fraction` must be in (0, 1], got {}", self.sample_fraction)));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("`noise_variance` must be nonnegative".into()));
        }
        if !(self.lrelu_slope >= 0.0 && self.lrelu_slope < 1.0) {
            return Err(Error::Config("`lrelu_slope` must be in [0, 1)".into()));
        }
        let widths = [self.feature_width, self.specular_width, self.blend_width, self.reflectance_width];
        if widths.contains(&0) || self.kernel_refresh == 0 || self.facet_factor == 0 {
            return Err(Error::Config("widths, kernel_refresh and facet_factor must be positive".into()));
        }
        if self.iterations > 0 && self.weak_cutoff >= self.iterations {
            return Err(Error::Config(format!(
                "weak_cutoff ({}) must be below iterations ({})",
                self.weak_cutoff, self.iterations
            )));
        }
        Ok(())
    }

    /// Parses `key = value` text; omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(FIT_KEYS)?;
        let d = FitConfig::default();
        let estimation_lr = match kv.get_str("estimation_lr") {
            None | Some("none") => None,
            Some(_) => kv.get("estimation_lr")?,
        };
        let cfg = FitConfig {
            iterations: kv.get_or("iterations", d.iterations)?,
            lr: kv.get_or("lr", d.lr)?,
            estimation_lr,
            lr_drop_after: kv.get_or("lr_drop_after", d.lr_drop_after)?,
            lr_drop_factor: kv.get_or("lr_drop_factor", d.lr_drop_factor)?,
            weak_cutoff: kv.get_or("weak_cutoff", d.weak_cutoff)?,
            sample_fraction: kv.get_or("sample_fraction", d.sample_fraction)?,
            kernel_refresh: kv.get_or("kernel_refresh", d.kernel_refresh)?,
            noise_variance: kv.get_or("noise_variance", d.noise_variance)?,
            seed: kv.get_or("seed", d.seed)?,
            feature_width: kv.get_or("feature_width", d.feature_width)?,
            specular_width: kv.get_or("specular_width", d.specular_width)?,
            blend_width: kv.get_or("blend_width", d.blend_width)?,
            reflectance_width: kv.get_or("reflectance_width", d.reflectance_width)?,
            activation: kv.get_or("activation", d.activation)?,
            lrelu_slope: kv.get_or("lrelu_slope", d.lrelu_slope)?,
            init_scale: kv.get_or("init_scale", d.init_scale)?,
            init_mode: kv.get_or("init_mode", d.init_mode)?,
            facet_factor: kv.get_or("facet_factor", d.facet_factor)?,
            norm_eps: kv.get_or("norm_eps", d.norm_eps)?,
            interreflection: kv.get_or("interreflection", d.interreflection)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("iterations", self.iterations);
        kv.insert("lr", self.lr);
        match self.estimation_lr {
            Some(v) => kv.insert("estimation_lr", v),
            None => kv.insert("estimation_lr", "none"),
        }
        kv.insert("lr_drop_after", self.lr_drop_after);
        kv.insert("lr_drop_factor", self.lr_drop_factor);
        kv.insert("weak_cutoff", self.weak_cutoff);
        kv.insert("sample_fraction", self.sample_fraction);
        kv.insert("kernel_refresh", self.kernel_refresh);
        kv.insert("noise_variance", self.noise_variance);
        kv.insert("seed", self.seed);
        kv.insert("feature_width", self.feature_width);
        kv.insert("specular_width", self.specular_width);
        kv.insert("blend_width", self.blend_width);
        kv.insert("reflectance_width", self.reflectance_width);
        kv.insert("activation", self.activation);
        kv.insert("lrelu_slope", self.lrelu_slope);
        kv.insert("init_scale", self.init_scale);
        kv.insert("init_mode", self.init_mode);
        kv.insert("facet_factor", self.facet_factor);
        kv.insert("norm_eps", self.norm_eps);
        kv.insert("interreflection", self.interreflection);
        kv.to_text()
    }

    /// Standard deviation of the initial weights.
    pub fn init_std(&self) -> f64 {
        match self.init_mode {
            InitMode::Std => self.init_scale,
            InitMode::Variance => self.init_scale.sqrt(),
        }
    }

    /// Base learning rate at a 1-based iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration > self.lr_drop_after {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    fn estimation_lr_at(&self, iteration: usize) -> f64 {
        let base = self.estimation_lr.unwrap_or(self.lr);
        if iteration > self.lr_drop_after {
            base * self.lr_drop_factor
        } else {
            base
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kernel {
    K3,
    K1,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    name: String,
    kernel: Kernel,
    w: usize,
    b: usize,
    /// Indices of the normalization scale and shift.
    norm: Option<(usize, usize)>,
}

/// All learnable tensors of the network and the layer layout over them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub tensors: Vec<Tensor>,
    /// Whether each tensor belongs to the feature or normal branch.
    pub estimation: Vec<bool>,
    feature: Vec<Layer>,
    normal: Layer,
    specular: Vec<Layer>,
    blend: Layer,
    reflect: Vec<Layer>,
}

struct ParamBuilder<'a> {
    tensors: Vec<Tensor>,
    estimation: Vec<bool>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl ParamBuilder<'_> {
    fn layer(&mut self, name: &str, kernel: Kernel, cin: usize, cout: usize, norm: bool, estimation: bool) -> Layer {
        let taps = if kernel == Kernel::K3 { 9 } else { 1 };
        let push = |t: Tensor, tensors: &mut Vec<Tensor>, flags: &mut Vec<bool>| {
            tensors.push(t);
            flags.push(estimation);
            tensors.len() - 1
        };
        let w = Tensor::randn(cout, cin, taps, self.std, &mut *self.rng);
        let w = push(w, &mut self.tensors, &mut self.estimation);
        let b = push(Tensor::zeros(cout, 1, 1), &mut self.tensors, &mut self.estimation);
        let norm = norm.then(|| {
            let g = push(Tensor::filled(cout, 1, 1, 1.0), &mut self.tensors, &mut self.estimation);
            let s = push(Tensor::zeros(cout, 1, 1), &mut self.tensors, &mut self.estimation);
            (g, s)
        });
        Layer { name: name.to_string(), kernel, w, b, norm }
    }
}

impl NetParams {
    /// Convolution weights are zero-mean Gaussian; biases and normalization
    /// shifts start at zero and normalization scales at one.
    pub fn init(images: usize, channels: usize, cfg: &FitConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder { tensors: Vec::new(), estimation: Vec::new(), rng: &mut rng, std: cfg.init_std() };
        let fw = cfg.feature_width;
        let feature = vec![
            pb.layer("feature.0", Kernel::K3, images * channels, fw, true, true),
            pb.layer("feature.1", Kernel::K3, fw, fw, true, true),
            pb.layer("feature.2", Kernel::K3, fw, fw, true, true),
        ];
        let normal = pb.layer("normal", Kernel::K3, fw, 3, false, true);
        let sw = cfg.specular_width;
        let specular = vec![
            pb.layer("specular.0", Kernel::K3, channels + 1, sw, true, false),
            pb.layer("specular.1", Kernel::K3, sw, sw, true, false),
            pb.layer("specular.2", Kernel::K3, sw, sw, true, false),
        ];
        let blend = pb.layer("blend", Kernel::K1, sw + fw, cfg.blend_width, true, false);
        let reflect = vec![
            pb.layer("reflect.0", Kernel::K3, cfg.blend_width, cfg.reflectance_width, true, false),
            pb.layer("reflect.1", Kernel::K3, cfg.reflectance_width, channels, false, false),
        ];
        let ParamBuilder { tensors, estimation, .. } = pb;
        NetParams { tensors, estimation, feature, normal, specular, blend, reflect }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// `R = v . (2 (n . l) n - l)` with `v` the viewing direction; zero outside
/// the mask.
pub fn specular_map(nm: &NormalMap, l: &Vec3) -> Vec<f64> {
    nm.normals()
        .iter()
        .enumerate()
        .map(|(p, n)| if nm.mask().get(p) { VIEW.dot(&(2.0 * n.dot(l) * n - l)) } else { 0.0 })
        .collect()
}

/// Linear map `G -> G + U((I - PK)^-1 - I) D G` on a `3 x h x w` field,
/// where `D` averages pixels into facets and `U` interpolates back.
///
/// At facet resolution this is exactly `F -> (I - PK)^-1 F`; the residual
/// form keeps the full-resolution detail of `G`.
pub struct InterreflectionOperator {
    facets: Option<FacetSet>,
    system: Option<InterreflectionSystem>,
    height: usize,
    width: usize,
}

impl InterreflectionOperator {
    pub fn identity(height: usize, width: usize) -> Self {
        InterreflectionOperator { facets: None, system: None, height, width }
    }

    /// Facets and kernel from a normal map and per-pixel albedo.
    pub fn from_normals(nm: &NormalMap, albedo: &AlbedoMap, factor: usize) -> Result<Self> {
        let facets = build_facets(nm, albedo, factor)?;
        let (h, w) = (nm.height(), nm.width());
        if facets.len() < 2 {
            return Ok(InterreflectionOperator::identity(h, w));
        }
        let k = interreflection_kernel(&facets)?;
        let system = InterreflectionSystem::new(&albedo_diagonal(&facets.albedo), &k)?;
        Ok(InterreflectionOperator { facets: Some(facets), system: Some(system), height: h, width: w })
    }

    fn to_vectors(&self, t: &Tensor) -> Result<Vec<Vec3>> {
        if t.shape() != (3, self.height, self.width) {
            return Err(Error::primitive("interreflection", format!("expected 3x{}x{}, got {:?}", self.height, self.width, t.shape())));
        }
        let p = t.plane();
        let d = t.data();
        Ok((0..p).map(|k| Vec3::new(d[k], d[p + k], d[2 * p + k])).collect())
    }

    fn add_vectors(t: &mut Tensor, v: &[Vec3]) {
        let p = t.plane();
        let d = t.data_mut();
        for (k, x) in v.iter().enumerate() {
            d[k] += x.x;
            d[p + k] += x.y;
            d[2 * p + k] += x.z;
        }
    }
}

impl LinearOperator for InterreflectionOperator {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let field = self.to_vectors(x)?;
        let mut out = x.clone();
        if let (Some(facets), Some(system)) = (&self.facets, &self.system) {
            let f = vectors_to_matrix(&facets.downsample(&field));
            let delta = system.solve(&f)? - &f;
            Self::add_vectors(&mut out, &facets.upsample(&matrix_to_vectors(&delta)));
        }
        Ok(out)
    }

    fn apply_transpose(&self, g: &Tensor) -> Result<Tensor> {
        let field = self.to_vectors(g)?;
        let mut out = g.clone();
        if let (Some(facets), Some(system)) = (&self.facets, &self.system) {
            let mut up_t = vec![Vec3::zeros(); facets.len()];
            for (p, stencil) in facets.stencil.iter().enumerate() {
                for &(f, w) in stencil {
                    up_t[f] += field[p] * w;
                }
            }
            let u = vectors_to_matrix(&up_t);
            let delta = matrix_to_vectors(&(system.solve_transpose(&u)? - &u));
            let mut back = vec![Vec3::zeros(); field.len()];
            for (f, members) in facets.members.iter().enumerate() {
                let share = delta[f] / members.len() as f64;
                for &p in members {
                    back[p] += share;
                }
            }
            Self::add_vectors(&mut out, &back);
        }
        Ok(out)
    }
}

/// Constant inputs of one fitting problem.
pub struct Problem {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mask: Mask,
    mask_rc: Rc<Vec<bool>>,
    lights: LightSet,
    /// Normalized images, one `c x h x w` tensor each.
    images: Vec<Tensor>,
    /// All normalized images stacked along channels and masked.
    stacked: Tensor,
    neg_stacked: Tensor,
    rho: Tensor,
    neg_init: Tensor,
    /// `sigma_q`, the quadratic mean of the masked intensities.
    pub quadratic_mean: f64,
}

impl Problem {
    pub fn new(stack: &ImageStack, lights: &LightSet, n_init: &NormalMap, albedo_init: &AlbedoMap) -> Result<Self> {
        if stack.count() != lights.len() {
            return Err(Error::ShapeMismatch(format!("{} images but {} lights", stack.count(), lights.len())));
        }
        let (h, w, c) = (stack.height(), stack.width(), stack.channels());
        let mask = stack.mask().clone();
        if !n_init.mask().same_shape(&mask) || albedo_init.height() != h || albedo_init.width() != w {
            return Err(Error::ShapeMismatch("initial normals or albedo differ in size from the images".into()));
        }
        if mask.count() == 0 {
            return Err(Error::NoEvaluablePixels);
        }
        let idx = mask.indices();
        let mut sq = 0.0;
        for i in 0..stack.count() {
            for &p in &idx {
                for ch in 0..c {
                    sq += stack.value(i, p, ch).powi(2);
                }
            }
        }
        let quadratic_mean = (sq / (idx.len() * c * stack.count()) as f64).sqrt();
        if !(quadratic_mean > 0.0) {
            return Err(Error::InvalidInput("images are black inside the mask".into()));
        }
        let scale = 1.0 / (2.0 * quadratic_mean);
        let plane = h * w;
        let images: Vec<Tensor> = (0..stack.count())
            .map(|i| {
                let mut t = Tensor::zeros(c, h, w);
                for &p in &idx {
                    for ch in 0..c {
                        t.data_mut()[ch * plane + p] = stack.value(i, p, ch) * scale;
                    }
                }
                t
            })
            .collect();
        let stacked_data: Vec<f64> = images.iter().flat_map(|t| t.data().iter().copied()).collect();
        let stacked = Tensor::from_vec(c * images.len(), h, w, stacked_data)?;
        let mut neg_stacked = stacked.clone();
        neg_stacked.data_mut().iter_mut().for_each(|v| *v = -*v);

        let mut rho = Tensor::zeros(1, h, w);
        let mut neg_init = Tensor::zeros(3, h, w);
        let ac = albedo_init.channels();
        let mut degenerate = true;
        for &p in &idx {
            let a = (0..ac).map(|ch| albedo_init.get(p, ch)).sum::<f64>() / ac as f64;
            rho.data_mut()[p] = a.max(RHO_FLOOR);
            let n = n_init.get(p);
            if n != VIEW {
                degenerate = false;
            }
            for k in 0..3 {
                neg_init.data_mut()[k * plane + p] = -n[k];
            }
        }
        if degenerate && idx.len() > 1 {
            return Err(Error::InvalidInput("initial normals are all the view vector".into()));
        }
        let mask_rc = Rc::new(mask.as_slice().to_vec());
        Ok(Problem {
            height: h,
            width: w,
            channels: c,
            mask,
            mask_rc,
            lights: lights.clone(),
            images,
            stacked,
            neg_stacked,
            rho,
            neg_init,
            quadratic_mean,
        })
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// `L_rec(0, X)` over the whole mask.
    pub fn zero_render_loss(&self) -> f64 {
        full_rec_loss(&Tensor::zeros(self.stacked.channels(), self.height, self.width), &self.stacked, &self.mask)
    }

    /// Normalized images with seeded Gaussian noise inside the mask.
    fn noisy_images(&self, variance: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        if variance == 0.0 {
            return self.images.clone();
        }
        let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
        let plane = self.height * self.width;
        self.images
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for ch in 0..self.channels {
                    for p in 0..plane {
                        if self.mask.get(p) {
                            t.data_mut()[ch * plane + p] += normal.sample(rng);
                        }
                    }
                }
                t
            })
            .collect()
    }
}

/// Smallest albedo used to scale `N_o` before the interreflection operator.
const RHO_FLOOR: f64 = 1e-3;

/// Variables produced by one forward pass.
pub struct Forward {
    pub params: Vec<Var>,
    pub n_o: Var,
    pub n_ny: Var,
    pub psi: Vec<Var>,
    pub rendered: Vec<Var>,
    /// All rendered images stacked along channels.
    pub stacked: Var,
}

fn checked(tape: &Tape, v: Var, layer: &str) -> Result<Var> {
    if tape.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

fn conv_block(tape: &mut Tape, x: Var, layer: &Layer, vars: &[Var], cfg: &FitConfig, activate: bool) -> Result<Var> {
    let y = match layer.kernel {
        Kernel::K3 => tape.conv3x3(x, vars[layer.w], vars[layer.b])?,
        Kernel::K1 => tape.conv1x1(x, vars[layer.w], vars[layer.b])?,
    };
    let y = match layer.norm {
        Some((g, s)) => tape.channel_norm(y, vars[g], vars[s], cfg.norm_eps)?,
        None => y,
    };
    let y = if activate {
        match cfg.activation {
            Activation::Relu => tape.relu(y),
            Activation::LRelu => tape.lrelu(y, cfg.lrelu_slope),
        }
    } else {
        y
    };
    checked(tape, y, &layer.name)
}

/// Records the network on `tape`. `sp_inputs` are the (possibly noisy)
/// images fed to the specular branch.
pub fn forward_pass(
    tape: &mut Tape,
    problem: &Problem,
    params: &NetParams,
    op: Rc<dyn LinearOperator>,
    sp_inputs: &[Tensor],
    cfg: &FitConfig,
) -> Result<Forward> {
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut phi = tape.constant(problem.stacked.clone());
    for layer in &params.feature {
        phi = conv_block(tape, phi, layer, &vars, cfg, true)?;
    }
    let raw = conv_block(tape, phi, &params.normal, &vars, cfg, false)?;
    let n_o = tape.l2_normalize_channels(raw);
    let rho = tape.constant(problem.rho.clone());
    let g = tape.hadamard(n_o, rho)?;
    let f = tape.linear(g, op)?;
    let n_ny = tape.l2_normalize_channels(f);
    let n_ny = checked(tape, n_ny, "interreflection")?;

    let mut psi = Vec::with_capacity(problem.image_count());
    let mut rendered = Vec::with_capacity(problem.image_count());
    let n_z = tape.channel_slice(n_o, 2, 1)?;
    for (i, input) in sp_inputs.iter().enumerate() {
        let l = problem.lights.direction(i);
        let e = problem.lights.intensity(i);
        let ldot = tape.channel_dot(n_o, l.as_slice())?;
        let prod = tape.hadamard(ldot, n_z)?;
        let twice = tape.scalar_mul(prod, 2.0);
        let r = tape.add_const(twice, &Tensor::filled(1, problem.height, problem.width, -l.z))?;
        let x = tape.constant(input.clone());
        let mut s = tape.concat_channels(&[x, r])?;
        for layer in &params.specular {
            s = conv_block(tape, s, layer, &vars, cfg, true)?;
        }
        let joined = tape.concat_channels(&[s, phi])?;
        let z = conv_block(tape, joined, &params.blend, &vars, cfg, true)?;
        let z = conv_block(tape, z, &params.reflect[0], &vars, cfg, true)?;
        let p = conv_block(tape, z, &params.reflect[1], &vars, cfg, true)?;
        let shade = tape.channel_dot(n_ny, l.as_slice())?;
        let shade = tape.relu(shade);
        let shade = tape.scalar_mul(shade, e);
        rendered.push(tape.hadamard(p, shade)?);
        psi.push(p);
    }
    let stacked = tape.concat_channels(&rendered)?;
    Ok(Forward { params: vars, n_o, n_ny, psi, rendered, stacked })
}

/// Pixels drawn for the reconstruction loss: `round(fraction * m)` distinct
/// masked pixels (at least one).
pub fn sample_pixels(mask: &Mask, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let idx = mask.indices();
    let mut out = vec![false; mask.len()];
    if fraction >= 1.0 {
        for p in idx {
            out[p] = true;
        }
        return out;
    }
    let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
    for j in sample(rng, idx.len(), k) {
        out[idx[j]] = true;
    }
    out
}

fn full_rec_loss(rendered: &Tensor, target: &Tensor, mask: &Mask) -> f64 {
    let p = rendered.plane();
    let mut sum = 0.0;
    for ch in 0..rendered.channels() {
        for q in 0..p {
            if mask.get(q) {
                sum += (rendered.data()[ch * p + q] - target.data()[ch * p + q]).abs();
            }
        }
    }
    sum / (mask.count() * rendered.channels()) as f64
}

/// Mean absolute difference over a seeded subset of masked pixels and all
/// images and channels. Images are `c x h x w` tensors.
pub fn rec_loss(x: &[Tensor], x_tilde: &[Tensor], mask: &Mask, sample_fraction: f64, seed: u64) -> Result<f64> {
    if x.len() != x_tilde.len() || x.is_empty() {
        return Err(Error::ShapeMismatch("image lists differ in length or are empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_pixels(mask, sample_fraction, &mut rng);
    let count = chosen.iter().filter(|c| **c).count();
    if count == 0 {
        return Err(Error::NoEvaluablePixels);
    }
    let mut sum = 0.0;
    let mut channels = 0;
    for (a, b) in x.iter().zip(x_tilde) {
        if a.shape() != b.shape() || a.plane() != mask.len() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let p = a.plane();
        for ch in 0..a.channels() {
            for q in 0..p {
                if chosen[q] {
                    sum += (a.data()[ch * p + q] - b.data()[ch * p + q]).abs();
                }
            }
        }
        channels += a.channels();
    }
    Ok(sum / (count * channels) as f64)
}

/// Mean squared distance between two normal maps over the mask.
pub fn weak_loss(n_ny: &NormalMap, n_init: &NormalMap, mask: &Mask) -> Result<f64> {
    if !n_ny.mask().same_shape(mask) || !n_init.mask().same_shape(mask) {
        return Err(Error::ShapeMismatch("normal maps and mask differ in size".into()));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::NoEvaluablePixels);
    }
    Ok(idx.iter().map(|&p| (n_ny.get(p) - n_init.get(p)).norm_squared()).sum::<f64>() / idx.len() as f64)
}

/// Unit normals inside the mask from a `3 x h x w` tensor.
pub fn tensor_to_normals(t: &Tensor, mask: &Mask) -> Result<NormalMap> {
    let p = t.plane();
    let d = t.data();
    let normals = (0..p).map(|k| Vec3::new(d[k], d[p + k], d[2 * p + k])).collect();
    NormalMap::from_unnormalized(mask.clone(), normals)
}

/// One row of the loss trace. `iteration` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Reconstruction loss over the whole mask before this iteration's update.
    pub l_rec: f64,
    pub l_weak: f64,
    pub lambda_w: f64,
    pub lr: f64,
    /// Mean angular error of `N_ny` when ground truth was supplied.
    pub mae: Option<f64>,
    pub events: Vec<String>,
}

pub struct FitResult {
    pub n_o: NormalMap,
    pub n_ny: NormalMap,
    /// Integrated from `N_o`.
    pub depth: DepthMap,
    /// `Psi_i`, one `c x h x w` tensor per image.
    pub reflectance: Vec<Tensor>,
    /// Rendered images in normalized units.
    pub rendered: Vec<Tensor>,
    pub trace: Vec<TraceRow>,
    /// Full-mask reconstruction loss of the returned outputs.
    pub final_rec_loss: f64,
    pub lambda_w: f64,
    pub params: NetParams,
    pub quadratic_mean: f64,
}

impl FitResult {
    /// `iteration,l_rec,l_weak,lambda_w,lr,mae,event`; events are
    /// `;`-separated and `mae` is empty without ground truth.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,l_rec,l_weak,lambda_w,lr,mae,event\n");
        for r in &self.trace {
            let mae = r.mae.map(|m| format!("{m:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.3e},{},{}\n",
                r.iteration,
                r.l_rec,
                r.l_weak,
                r.lambda_w,
                r.lr,
                mae,
                r.events.join(";")
            ));
        }
        out
    }
}

fn build_operator(cfg: &FitConfig, n: &NormalMap, albedo: &AlbedoMap) -> Result<Rc<dyn LinearOperator>> {
    if !cfg.interreflection {
        return Ok(Rc::new(InterreflectionOperator::identity(n.height(), n.width())));
    }
    Ok(Rc::new(InterreflectionOperator::from_normals(n, albedo, cfg.facet_factor)?))
}

/// Total objective `L_rec + lambda_w L_weak` on a tape.
pub fn total_loss(
    tape: &mut Tape,
    problem: &Problem,
    fw: &Forward,
    sampled: Rc<Vec<bool>>,
    lambda_w: f64,
) -> Result<(Var, Var, Var)> {
    let diff = tape.add_const(fw.stacked, &problem.neg_stacked)?;
    let rec = tape.masked_mean_abs(diff, sampled)?;
    let gap = tape.add_const(fw.n_ny, &problem.neg_init)?;
    let weak = tape.masked_mean_sq(gap, problem.mask_rc.clone())?;
    let total = if lambda_w > 0.0 {
        let scaled = tape.scalar_mul(weak, lambda_w);
        tape.add(rec, scaled)?
    } else {
        rec
    };
    Ok((total, rec, weak))
}

/// Fits the network to one scene.
///
/// `gt` only feeds the per-iteration error column of the trace.
pub fn fit(
    stack: &ImageStack,
    lights: &LightSet,
    n_init: &NormalMap,
    albedo_init: &AlbedoMap,
    cfg: &FitConfig,
    gt: Option<&NormalMap>,
) -> Result<FitResult> {
    cfg.validate()?;
    let problem = Problem::new(stack, lights, n_init, albedo_init)?;
    let mask = problem.mask.clone();
    let mut params = NetParams::init(problem.image_count(), problem.channels, cfg);
    let mut adam = Adam::new(&params.tensors);
    let lambda0 = problem.zero_render_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6669_7474);
    let mut op = build_operator(cfg, n_init, albedo_init)?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut current_n_o: Option<NormalMap> = None;

    for it in 1..=cfg.iterations {
        let mut events = Vec::new();
        if it > 1 && (it - 1) % cfg.kernel_refresh == 0 {
            if let Some(n) = &current_n_o {
                op = build_operator(cfg, n, albedo_init)?;
                events.push("kernel_refresh".to_string());
            }
        }
        if it == cfg.weak_cutoff + 1 {
            events.push("weak_off".to_string());
        }
        let lr = cfg.lr_at(it);
        if it == cfg.lr_drop_after + 1 {
            events.push(format!("lr_drop:{lr:e}"));
        }
        let lambda_w = if it <= cfg.weak_cutoff { lambda0 } else { 0.0 };

        let inputs = problem.noisy_images(cfg.noise_variance, &mut rng);
        let sampled = Rc::new(sample_pixels(&mask, cfg.sample_fraction, &mut rng));
        let mut tape = Tape::new();
        let fw = forward_pass(&mut tape, &problem, &params, op.clone(), &inputs, cfg)?;
        let (total, _, weak) = total_loss(&mut tape, &problem, &fw, sampled, lambda_w)?;
        let loss_value = tape.value(total).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        let l_rec = full_rec_loss(tape.value(fw.stacked), &problem.stacked, &mask);
        let n_o = tensor_to_normals(tape.value(fw.n_o), &mask)?;
        let mae = match gt {
            Some(g) => Some(mean_angular_error(&tensor_to_normals(tape.value(fw.n_ny), &mask)?, g, &mask)?),
            None => None,
        };
        trace.push(TraceRow { iteration: it, l_rec, l_weak: tape.value(weak).item(), lambda_w, lr, mae, events });
        current_n_o = Some(n_o);

        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = fw.params.iter().zip(&params.tensors).map(|(v, t)| grads.get_or_zeros(*v, t)).collect();
        let lrs: Vec<f64> = params
            .estimation
            .iter()
            .map(|&est| if est { cfg.estimation_lr_at(it) } else { lr })
            .collect();
        adam.update(&mut params.tensors, &g, &lrs)?;
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        log::debug!("iteration {it}: total {loss_value:.6e}, rec {l_rec:.6e}");
    }

    if let Some(n) = &current_n_o {
        if cfg.iterations % cfg.kernel_refresh == 0 {
            op = build_operator(cfg, n, albedo_init)?;
        }
    }
    let inputs = problem.noisy_images(cfg.noise_variance, &mut rng);
    let mut tape = Tape::new();
    let fw = forward_pass(&mut tape, &problem, &params, op, &inputs, cfg)?;
    let rendered: Vec<Tensor> = fw.rendered.iter().map(|v| tape.value(*v).clone()).collect();
    let final_rec_loss = full_rec_loss(tape.value(fw.stacked), &problem.stacked, &mask);
    let n_o = tensor_to_normals(tape.value(fw.n_o), &mask)?;
    let n_ny = tensor_to_normals(tape.value(fw.n_ny), &mask)?;
    let depth = depth_from_normals(&n_o)?;
    let reflectance = fw.psi.iter().map(|v| tape.value(*v).clone()).collect();
    Ok(FitResult {
        n_o,
        n_ny,
        depth,
        reflectance,
        rendered,
        trace,
        final_rec_loss,
        lambda_w: lambda0,
        params,
        quadratic_mean: problem.quadratic_mean,
    })
}
