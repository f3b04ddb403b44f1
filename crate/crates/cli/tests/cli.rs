use std::path::Path;
use std::process::{Command, Output};

fn pstereo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstereo")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn render(dir: &Path, scene: &str) -> std::path::PathBuf {
    let spec = dir.join("scene.txt");
    std::fs::write(&spec, scene).unwrap();
    let out = dir.join("data");
    let o = pstereo(&["render", "--scene", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn mae_line(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("mae ")).unwrap_or_else(|| panic!("no mae in {text}"));
    line[4..].trim().parse().unwrap()
}

#[test]
fn render_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = render(dir.path(), "primitive = sphere\nresolution = 32\nlight_count = 6\n");
    for f in ["001.png", "006.png", "mask.png", "light_directions.txt", "light_intensities.txt", "normal_gt.fmap", "scene.txt"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    assert!(!data.join("007.png").exists());
}

#[test]
fn render_rejects_unknown_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.txt");
    std::fs::write(&spec, "primitive = torus\nresolution = 32\n").unwrap();
    let o = pstereo(&["render", "--scene", p(&spec), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn woodham_recovers_a_lambertian_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let data = render(dir.path(), "primitive = sphere\nresolution = 48\nlight_count = 10\ninterreflection = false\n");
    let out = dir.path().join("out");
    let o = pstereo(&["solve", "--images", p(&data), "--method", "woodham", "--out", p(&out)]);
    assert!(o.status.success());
    // 16-bit quantization is the only error source.
    assert!(mae_line(&o) < 0.5);
    assert!(out.join("normal_est.fmap").is_file() && out.join("normal_est.png").is_file());

    let same = pstereo(&[
        "eval",
        "--est",
        p(&out.join("normal_est.fmap")),
        "--gt",
        p(&out.join("normal_est.fmap")),
        "--mask",
        p(&data.join("mask.png")),
    ]);
    assert_eq!(stdout(&same).trim(), "0.00");
}

#[test]
fn eval_reports_orthogonal_maps_and_shape_mismatch() {
    use pstereo::io::{write_float_map, write_mask, FloatMap};
    use pstereo::{Mask, NormalMap, Vec3};
    let dir = tempfile::tempdir().unwrap();
    let mask = Mask::full(4, 5);
    let a = NormalMap::new(mask.clone(), vec![Vec3::new(0.0, 0.0, 1.0); 20]).unwrap();
    let b = NormalMap::new(mask.clone(), vec![Vec3::new(1.0, 0.0, 0.0); 20]).unwrap();
    write_float_map(dir.path().join("a.fmap"), &FloatMap::from_normals(&a)).unwrap();
    write_float_map(dir.path().join("b.fmap"), &FloatMap::from_normals(&b)).unwrap();
    write_mask(dir.path().join("m.png"), &mask).unwrap();
    write_mask(dir.path().join("small.png"), &Mask::full(4, 4)).unwrap();
    let arg = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let o = pstereo(&["eval", "--est", &arg("a.fmap"), "--gt", &arg("b.fmap"), "--mask", &arg("m.png")]);
    assert_eq!(stdout(&o).trim(), "90.00");
    let o = pstereo(&["eval", "--est", &arg("a.fmap"), "--gt", &arg("b.fmap"), "--mask", &arg("small.png")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_without_lights_points_at_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let data = render(dir.path(), "primitive = sphere\nresolution = 24\nlight_count = 4\n");
    std::fs::remove_file(data.join("light_directions.txt")).unwrap();
    std::fs::remove_file(data.join("light_intensities.txt")).unwrap();
    let o = pstereo(&["solve", "--images", p(&data), "--method", "woodham", "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calibrate"));
}

#[test]
fn calibrate_recovers_lights_and_rejects_matte_spheres() {
    let dir = tempfile::tempdir().unwrap();
    let shiny = render(
        dir.path(),
        "primitive = sphere\nresolution = 64\nlight_count = 8\nspecular = 0.4\ninterreflection = false\nalbedo = 0.5\n",
    );
    let out = dir.path().join("lights");
    let o = pstereo(&["calibrate", "--images", p(&shiny), "--sphere", "31.5,31.5,28.8", "--albedo", "0.5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = pstereo::io::read_light_directions(out.join("light_directions.txt")).unwrap();
    let truth = pstereo::io::read_light_directions(shiny.join("light_directions.txt")).unwrap();
    assert_eq!(est.len(), 8);
    for (a, b) in est.iter().zip(&truth) {
        assert!(pstereo::eval::angle_deg(a, b) < 3.0);
    }

    let matte_dir = tempfile::tempdir().unwrap();
    let matte = render(matte_dir.path(), "primitive = sphere\nresolution = 64\nlight_count = 4\ninterreflection = false\n");
    let o = pstereo(&["calibrate", "--images", p(&matte), "--sphere", "31.5,31.5,28.8", "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn nayar_beats_woodham_on_a_bowl() {
    let dir = tempfile::tempdir().unwrap();
    let data = render(dir.path(), "primitive = bowl\nresolution = 48\nlight_count = 12\n");
    let w = pstereo(&["solve", "--images", p(&data), "--method", "woodham", "--out", p(&dir.path().join("w"))]);
    let n = pstereo(&["solve", "--images", p(&data), "--method", "nayar", "--out", p(&dir.path().join("n"))]);
    assert!(n.status.success());
    assert!(mae_line(&n) < mae_line(&w));
    assert!(dir.path().join("n/depth.fmap").is_file());
}

#[test]
fn irnet_writes_full_trace_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = render(dir.path(), "primitive = bowl\nresolution = 32\nlight_count = 6\nspecular = 0.3\n");
    let out = dir.path().join("out");
    let o = pstereo(&["solve", "--images", p(&data), "--method", "irnet", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "iteration,l_rec,l_weak,lambda_w,lr,mae,event");
    assert_eq!(lines.len(), 1001);
    assert!(lines[1000].starts_with("1000,"));
    for f in ["normal_est.fmap", "normal_ny.fmap", "depth.fmap", "fit_config.txt", "reflectance_001.fmap", "reflectance_006.fmap"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_pstereo"))
        .args(["eval", "--est", "a", "--gt", "b", "--mask", "c"])
        .env("PSTEREO_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
