use aosense::optics::{Microscope, OpticsConfig};
use aosense::synth::*;
use aosense::volume::Volume;
use aosense::zernike::DETECTABLE_MODES;
use aosense::ZernikeCoeffs;
use ndarray::Array3;
use proptest::prelude::*;
use std::sync::LazyLock;

fn small() -> SynthConfig {
    SynthConfig {
        optics: OpticsConfig {
            shape: [32, 32, 32],
            ..OpticsConfig::default()
        },
        camera: None,
        ..SynthConfig::training()
    }
}

static SCOPE: LazyLock<Microscope> = LazyLock::new(|| {
    let cfg = small();
    Microscope::new(&cfg.optics, cfg.light_sheet).unwrap()
});

fn arb_detectable(scale: f64) -> impl Strategy<Value = ZernikeCoeffs> {
    proptest::collection::vec(-scale..scale, DETECTABLE_MODES.len()).prop_map(|v| {
        let mut c = ZernikeCoeffs::zeros();
        for (&j, x) in DETECTABLE_MODES.iter().zip(v) {
            c[j] = x;
        }
        c
    })
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "samples"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            let name = p.strip_prefix(dir).unwrap().display().to_string();
            out.push((name, std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn dataset_bytes_do_not_depend_on_thread_count() {
    let cfg = SynthConfig {
        camera: Some(CameraModel::default()),
        ..small()
    };
    let run = |threads| {
        let dir = tempfile::tempdir().unwrap();
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_dataset(&cfg, 4, dir.path(), 10).unwrap());
        files(dir.path())
    };
    let one = run(1);
    assert_eq!(one.len(), 5);
    assert_eq!(one, run(3));
}

#[test]
fn padded_grid_keeps_every_photon() {
    let photons = 1e4;
    let c = ZernikeCoeffs::single(11, 0.15);
    let [nz, ny, nx] = SCOPE.cfg.shape;
    let padded = [3 * nz, 3 * ny, 3 * nx];
    let v = SCOPE.cfg.voxel_um;
    let p = PunctaField {
        positions_um: vec![[1.5 * nz as f64 * v[0], 1.5 * ny as f64 * v[1], 1.5 * nx as f64 * v[2]]],
        fwhms_um: vec![0.2],
        photons,
    };
    let vol = render_field_into(&p, &SCOPE, &c, padded).unwrap();
    assert!((vol.sum() / photons - 1.0).abs() < 0.005, "{}", vol.sum());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn in_volume_signal_never_exceeds_the_emitted_photons(seed in 0u64..1_000_000) {
        let cfg = small();
        let s = generate_sample_with(seed, &cfg, &SCOPE).unwrap();
        let emitted = s.puncta.len() as f64 * s.photons();
        prop_assert!(s.volume.sum() <= emitted * (1.0 + 1e-12), "{} > {}", s.volume.sum(), emitted);
        prop_assert!((1..=cfg.j_max).contains(&s.puncta.len()));
        prop_assert_eq!(s.volume.shape(), cfg.optics.shape);
    }

    #[test]
    fn rendering_is_linear_in_photons(c in arb_detectable(0.1), k in 0.5f64..4.0) {
        let mut p = PunctaField::centered(&SCOPE.cfg, 0.1, 1e3);
        let a = render_field(&p, &SCOPE, &c).unwrap();
        p.photons *= k;
        let b = render_field(&p, &SCOPE, &c).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((k * x - y).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn volumes_round_trip_through_the_container(
        shape in (1usize..6, 1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = aosense::rng::stream(seed, 0);
        let data = Array3::from_shape_simple_fn(shape, || r.random_range(-1e3f32..1e3) as f64);
        let vol = Volume::new(data, [0.2, 0.125, 0.125]);
        let mut meta = serde_json::Map::new();
        meta.insert("seed".into(), serde_json::json!(seed));
        let c = vol.to_container(meta.clone());
        let bytes = c.to_bytes().unwrap();
        let back = aosense::volume::Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(Volume::from_container(&back).unwrap(), vol);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
