use pstereo::classic::woodham_solve;
use pstereo::forwardsim::{simulate, Primitive, SceneSpec};
use pstereo::geometry::{build_facets, interreflection_kernel};
use pstereo::interreflection::{albedo_diagonal, forward_interreflect, nayar_iterate, spectral_radius, NayarConfig};
use pstereo::io::{read_dataset, write_dataset, DatasetDescriptor};
use pstereo::irnet::{fit, FitConfig};
use pstereo::robustinit::{robust_normals, RpcaConfig};
use pstereo::mean_angular_error;
use proptest::prelude::*;

#[test]
fn dataset_round_trip_preserves_solver_output() {
    let mut spec = SceneSpec::new(Primitive::Sphere, 32);
    spec.light_count = 8;
    spec.interreflection = false;
    let sim = simulate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &sim.stack, Some(&sim.lights), Some(&sim.scene.normals)).unwrap();
    let data = read_dataset(&DatasetDescriptor::discover(dir.path()).unwrap()).unwrap();
    let lights = data.lights.unwrap();
    let (a, _) = woodham_solve(&sim.stack, &sim.lights).unwrap();
    let (b, _) = woodham_solve(&data.stack, &lights).unwrap();
    assert!(mean_angular_error(&a, &b, &sim.scene.mask).unwrap() < 0.1);
    assert!(mean_angular_error(&b, &data.normal_gt.unwrap(), &sim.scene.mask).unwrap() < 0.5);
}

#[test]
fn robust_init_is_close_on_clean_data() {
    let mut spec = SceneSpec::new(Primitive::Sphere, 32);
    spec.interreflection = false;
    let sim = simulate(&spec).unwrap();
    let (n, _, _) = robust_normals(&sim.stack, &sim.lights, &RpcaConfig::default()).unwrap();
    let e = mean_angular_error(&n, &sim.scene.normals, &sim.scene.mask).unwrap();
    assert!(e < 2.0, "{e}");
}

#[test]
fn bowl_interreflection_brightens_and_nayar_corrects() {
    let mut spec = SceneSpec::new(Primitive::Bowl, 48);
    spec.light_count = 12;
    let lit = simulate(&spec).unwrap();
    spec.interreflection = false;
    let direct = simulate(&spec).unwrap();
    assert!(lit.stack.data().iter().zip(direct.stack.data()).all(|(a, b)| a >= b));
    let (pseudo, _) = woodham_solve(&lit.stack, &lit.lights).unwrap();
    let r = nayar_iterate(&lit.stack, &lit.lights, &NayarConfig::default()).unwrap();
    let m = &lit.scene.mask;
    assert!(
        mean_angular_error(&r.normals, &lit.scene.normals, m).unwrap()
            < mean_angular_error(&pseudo, &lit.scene.normals, m).unwrap()
    );
}

#[test]
fn scene_kernels_are_contractive() {
    let sim = simulate(&SceneSpec::new(Primitive::Bowl, 32)).unwrap();
    let facets = build_facets(&sim.scene.normals, &sim.scene.albedo, 4).unwrap();
    let k = interreflection_kernel(&facets).unwrap();
    assert!(spectral_radius(&albedo_diagonal(&facets.albedo), &k).unwrap() < 1.0);
}

#[test]
fn short_irnet_fit_reduces_reconstruction_loss() {
    let mut spec = SceneSpec::new(Primitive::Bowl, 16);
    spec.light_count = 4;
    spec.specular = 0.3;
    let sim = simulate(&spec).unwrap();
    let (n0, a0, _) = robust_normals(&sim.stack, &sim.lights, &RpcaConfig::default()).unwrap();
    let cfg = FitConfig { iterations: 30, weak_cutoff: 10, ..FitConfig::default() };
    let r = fit(&sim.stack, &sim.lights, &n0, &a0, &cfg, Some(&sim.scene.normals)).unwrap();
    assert_eq!(r.trace.len(), 30);
    assert!(r.final_rec_loss < r.trace[0].l_rec);
    assert!(r.trace.iter().all(|row| row.mae.is_some()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn interreflection_only_adds_radiance(seed in 0u64..1000, factor in 2usize..5) {
        let mut spec = SceneSpec::new(Primitive::Bowl, 24);
        spec.seed = seed;
        let sim = simulate(&spec).unwrap();
        let facets = build_facets(&sim.scene.normals, &sim.scene.albedo, factor).unwrap();
        let k = interreflection_kernel(&facets).unwrap();
        let xs = nalgebra::DMatrix::from_fn(facets.len(), 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        let x = forward_interreflect(&xs, &albedo_diagonal(&facets.albedo), &k).unwrap();
        prop_assert!(x.iter().zip(xs.iter()).all(|(a, b)| *a >= *b - 1e-12));
    }
}
