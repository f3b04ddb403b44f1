use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pstereo::classic::{calibrate_from_sphere, woodham_solve, CalibrationSphere};
use pstereo::forwardsim::{add_noise, simulate, SceneSpec};
use pstereo::interreflection::{nayar_iterate, NayarConfig};
use pstereo::io::{
    read_dataset, read_float_map, read_mask, write_dataset, write_float_map, write_lights, write_rgb8, DatasetDescriptor,
    FloatMap,
};
use pstereo::irnet::{fit, FitConfig};
use pstereo::kv::KeyValues;
use pstereo::robustinit::{robust_normals, RpcaConfig};
use pstereo::{encode_normals, mean_angular_error, DepthMap, Error, NormalMap};

const EXIT_CONFIG: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "pstereo", version, about = "Photometric stereo with interreflection modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with ground truth.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Standard deviation of additive Gaussian noise.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate lights from images of a sphere with a specular highlight.
    Calibrate {
        #[arg(long)]
        images: PathBuf,
        /// Sphere center column, center row and radius in pixels.
        #[arg(long, value_parser = parse_sphere)]
        sphere: (f64, f64, f64),
        /// Diffuse albedo of the sphere, used to recover intensities.
        #[arg(long, default_value_t = 1.0)]
        albedo: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover normals (and depth where the method provides it).
    Solve {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` settings for the chosen method.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean angular error between two normal maps.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Woodham,
    Robust,
    Nayar,
    Irnet,
}

fn parse_sphere(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [cx, cy, r] if r > 0.0 => Ok((cx, cy, r)),
        _ => Err("expected cx,cy,r with r > 0".into()),
    }
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_CONFIG, message: e.to_string() }
    }

    fn solver(stage: &str, e: impl std::fmt::Display) -> Self {
        Failure { code: EXIT_SOLVER, message: format!("{stage}: {e}") }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = check_threads().and_then(|()| match cli.command {
        Command::Render { scene, out, noise, seed } => render(&scene, &out, noise, seed),
        Command::Calibrate { images, sphere, albedo, out } => calibrate(&images, sphere, albedo, &out),
        Command::Solve { images, method, out, config } => solve(&images, method, &out, config.as_deref()),
        Command::Eval { est, gt, mask } => eval(&est, &gt, &mask),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// The library is single-threaded; the variable is validated so scripts
/// that set it get an error for malformed values.
fn check_threads() -> Result<(), Failure> {
    match std::env::var("PSTEREO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                log::info!("PSTEREO_THREADS={n}; computation runs on one thread");
                Ok(())
            }
            _ => Err(Failure::config(format!("PSTEREO_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn io_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::DegenerateProfile(_) => Failure::config(e),
        other => Failure { code: EXIT_CONFIG, message: other.to_string() },
    }
}

fn render(scene: &Path, out: &Path, noise: Option<f64>, seed: Option<u64>) -> Result<(), Failure> {
    let text = fs::read_to_string(scene).map_err(|e| Failure::config(format!("cannot read {}: {e}", scene.display())))?;
    let mut spec = SceneSpec::parse(&text).map_err(Failure::config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = noise {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Failure::config(format!("noise must be nonnegative, got {n}")));
        }
        spec.noise = 0.0;
        let sim = simulate(&spec).map_err(Failure::config)?;
        let stack = add_noise(&sim.stack, n, spec.seed).map_err(Failure::config)?;
        return write_render(out, &spec, &stack, &sim.lights, &sim.scene.normals);
    }
    let sim = simulate(&spec).map_err(Failure::config)?;
    write_render(out, &spec, &sim.stack, &sim.lights, &sim.scene.normals)
}

fn write_render(
    out: &Path,
    spec: &SceneSpec,
    stack: &pstereo::ImageStack,
    lights: &pstereo::LightSet,
    gt: &NormalMap,
) -> Result<(), Failure> {
    let clipped = stack.data().iter().filter(|v| **v > 1.0).count();
    if clipped > 0 {
        log::warn!("{clipped} radiance values above 1 are clipped in the 16-bit images");
    }
    write_dataset(out, stack, Some(lights), Some(gt)).map_err(io_failure)?;
    fs::write(out.join("scene.txt"), spec.to_text()).map_err(|e| io_failure(e.into()))?;
    println!("wrote {} images to {}", stack.count(), out.display());
    Ok(())
}

fn calibrate(images: &Path, sphere: (f64, f64, f64), albedo: f64, out: &Path) -> Result<(), Failure> {
    let desc = DatasetDescriptor::discover(images).map_err(io_failure)?;
    let data = read_dataset(&desc).map_err(io_failure)?;
    let (cx, cy, r) = sphere;
    let sphere = CalibrationSphere { center_col: cx, center_row: cy, radius: r, albedo };
    let lights = calibrate_from_sphere(&data.stack, &sphere).map_err(|e| match e {
        Error::NoHighlight { .. } => Failure { code: EXIT_CALIBRATION, message: e.to_string() },
        Error::InvalidInput(_) | Error::ShapeMismatch(_) => Failure::config(e),
        other => Failure { code: EXIT_CALIBRATION, message: other.to_string() },
    })?;
    fs::create_dir_all(out).map_err(|e| io_failure(e.into()))?;
    write_lights(out, &lights).map_err(io_failure)?;
    println!("wrote {} lights to {}", lights.len(), out.display());
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<String, Failure> {
    match path {
        None => Ok(String::new()),
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::config(format!("cannot read {}: {e}", p.display()))),
    }
}

fn nayar_config(text: &str) -> pstereo::Result<NayarConfig> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(&["iterations", "factor", "min_change_deg"])?;
    let d = NayarConfig::default();
    Ok(NayarConfig {
        iterations: kv.get_or("iterations", d.iterations)?,
        factor: kv.get_or("factor", d.factor)?,
        min_change_deg: kv.get_or("min_change_deg", d.min_change_deg)?,
    })
}

fn rpca_config(text: &str) -> pstereo::Result<RpcaConfig> {
    let kv = KeyValues::parse(text)?;
    kv.reject_unknown(&["rank", "lambda", "rho_mu", "tol", "max_iter"])?;
    let d = RpcaConfig::default();
    Ok(RpcaConfig {
        rank: kv.get_or("rank", d.rank)?,
        lambda: kv.get("lambda")?,
        mu0: None,
        rho_mu: kv.get_or("rho_mu", d.rho_mu)?,
        tol: kv.get_or("tol", d.tol)?,
        max_iter: kv.get_or("max_iter", d.max_iter)?,
    })
}

fn write_normals(out: &Path, n: &NormalMap, name: &str) -> Result<(), Failure> {
    write_float_map(out.join(format!("{name}.fmap")), &FloatMap::from_normals(n)).map_err(io_failure)?;
    write_rgb8(out.join(format!("{name}.png")), n.height(), n.width(), encode_normals(n)).map_err(io_failure)
}

fn write_depth(out: &Path, d: &DepthMap) -> Result<(), Failure> {
    let map = FloatMap::from_f64(d.height(), d.width(), 1, d.values()).map_err(io_failure)?;
    write_float_map(out.join("depth.fmap"), &map).map_err(io_failure)
}

fn solve(images: &Path, method: Method, out: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let desc = DatasetDescriptor::discover(images).map_err(io_failure)?;
    let data = read_dataset(&desc).map_err(io_failure)?;
    let lights = data.lights.clone().ok_or_else(|| Failure {
        code: EXIT_SOLVER,
        message: format!(
            "load: no light_directions.txt in {}; run `pstereo calibrate` first and copy its output into the dataset",
            images.display()
        ),
    })?;
    let text = read_config(config)?;
    fs::create_dir_all(out).map_err(|e| io_failure(e.into()))?;
    let stack = &data.stack;
    let normals = match method {
        Method::Woodham => {
            if !text.trim().is_empty() {
                return Err(Failure::config("woodham takes no configuration"));
            }
            woodham_solve(stack, &lights).map_err(|e| Failure::solver("woodham", e))?.0
        }
        Method::Robust => {
            let cfg = rpca_config(&text).map_err(Failure::config)?;
            robust_normals(stack, &lights, &cfg).map_err(|e| Failure::solver("robustinit", e))?.0
        }
        Method::Nayar => {
            let cfg = nayar_config(&text).map_err(Failure::config)?;
            let r = nayar_iterate(stack, &lights, &cfg).map_err(|e| Failure::solver("interreflection", e))?;
            write_depth(out, &r.depth)?;
            r.normals
        }
        Method::Irnet => {
            let cfg = FitConfig::parse(&text).map_err(Failure::config)?;
            let (n0, a0, _) =
                robust_normals(stack, &lights, &RpcaConfig::default()).map_err(|e| Failure::solver("robustinit", e))?;
            let r = fit(stack, &lights, &n0, &a0, &cfg, data.normal_gt.as_ref()).map_err(|e| Failure::solver("irnet", e))?;
            write_depth(out, &r.depth)?;
            write_normals(out, &r.n_ny, "normal_ny")?;
            for (i, psi) in r.reflectance.iter().enumerate() {
                let (c, h, w) = psi.shape();
                let plane = h * w;
                let interleaved: Vec<f64> =
                    (0..plane).flat_map(|p| (0..c).map(move |ch| (p, ch))).map(|(p, ch)| psi.data()[ch * plane + p]).collect();
                let map = FloatMap::from_f64(h, w, c, &interleaved).map_err(io_failure)?;
                write_float_map(out.join(format!("reflectance_{:03}.fmap", i + 1)), &map).map_err(io_failure)?;
            }
            fs::write(out.join("loss_trace.csv"), r.trace_csv()).map_err(|e| io_failure(e.into()))?;
            fs::write(out.join("fit_config.txt"), cfg.to_text()).map_err(|e| io_failure(e.into()))?;
            r.n_o
        }
    };
    write_normals(out, &normals, "normal_est")?;
    if let Some(gt) = &data.normal_gt {
        if let Ok(mae) = mean_angular_error(&normals, gt, stack.mask()) {
            println!("mae {mae:.2}");
        }
    }
    Ok(())
}

fn eval(est: &Path, gt: &Path, mask: &Path) -> Result<(), Failure> {
    let mask = read_mask(mask).map_err(io_failure)?;
    let est = read_float_map(est).map_err(io_failure)?;
    let gt = read_float_map(gt).map_err(io_failure)?;
    for m in [&est, &gt] {
        if m.height != mask.height() || m.width != mask.width() || m.channels != 3 {
            return Err(Failure::config(format!(
                "normal map is {}x{}x{}, mask is {}x{}",
                m.height,
                m.width,
                m.channels,
                mask.height(),
                mask.width()
            )));
        }
    }
    let est = est.to_normals(mask.clone()).map_err(Failure::config)?;
    let gt = gt.to_normals(mask.clone()).map_err(Failure::config)?;
    let mae = mean_angular_error(&est, &gt, &mask).map_err(Failure::config)?;
    println!("{mae:.2}");
    Ok(())
}
