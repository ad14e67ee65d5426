//! Synthetic sample generation: puncta placement, bead rendering through
//! the aberrated overall PSF, camera noise and on-disk datasets.
//!
//! Positions are in µm with voxel `i` centered at `i * d` on each axis, so
//! the field of view spans `[-d/2, (n - 1/2) d]`.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::optics::{LightSheetKind, Microscope, OpticsConfig};
use crate::rng::{self, purpose};
use crate::volume::Volume;
use crate::zernike::{sample_aberration_with, AberrationKind, ZernikeCoeffs, WAVELENGTH_UM};

/// Conversion factor between a Gaussian FWHM and its standard deviation.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Gaussian bead kernels are truncated at this many standard deviations.
pub const BEAD_TRUNCATION_SIGMAS: f64 = 4.0;

pub const MANIFEST_VERSION: u32 = 1;

/// Detector response: quantum efficiency, Poisson shot noise and Gaussian
/// read noise around a constant baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub qe: f64,
    /// Read noise, counts RMS.
    pub read_noise: f64,
    /// Offset, counts.
    pub baseline: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            qe: 0.82,
            read_noise: 1.5,
            baseline: 100.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.qe > 0.0 && self.qe <= 1.0) {
            return Err(Error::invalid(format!("qe must be in (0, 1], got {}", self.qe)));
        }
        if !(self.read_noise >= 0.0 && self.read_noise.is_finite()) {
            return Err(Error::invalid(format!("read noise must be >= 0, got {}", self.read_noise)));
        }
        if !self.baseline.is_finite() {
            return Err(Error::invalid("camera baseline must be finite"));
        }
        Ok(())
    }
}

/// Sample-generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub optics: OpticsConfig,
    pub light_sheet: LightSheetKind,
    /// Distributions drawn from uniformly per sample.
    pub kinds: Vec<AberrationKind>,
    /// Upper bound of the total aberration amplitude in waves RMS.
    pub max_amplitude_waves: f64,
    pub j_max: usize,
    /// Integrated photons per punctum, drawn uniformly in `[lo, hi]`.
    pub photon_range: [f64; 2],
    /// Bead sizes (FWHM, µm) drawn uniformly per punctum.
    pub fwhms_um: Vec<f64>,
    /// Puncta are placed uniformly in the central `fov_fraction` of the
    /// field of view on each axis; 0 puts every punctum at the center.
    pub fov_fraction: f64,
    /// `None` yields noise-free photon volumes.
    pub camera: Option<CameraModel>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl SynthConfig {
    /// Training distribution: up to 0.5 λ RMS, 1-5 puncta, up to 2e5 photons.
    pub fn training() -> Self {
        Self {
            optics: OpticsConfig::default(),
            light_sheet: LightSheetKind::MBSq35,
            kinds: AberrationKind::ALL.to_vec(),
            max_amplitude_waves: 0.5,
            j_max: 5,
            photon_range: [1.0, 2.0e5],
            fwhms_um: vec![0.1, 0.2, 0.3, 0.4],
            fov_fraction: 1.0,
            camera: Some(CameraModel::default()),
        }
    }

    /// Extended test distribution: up to 1 λ RMS, 150 puncta, 5e5 photons.
    pub fn test() -> Self {
        Self {
            max_amplitude_waves: 1.0,
            j_max: 150,
            photon_range: [1.0, 5.0e5],
            ..Self::training()
        }
    }

    /// Overfit-probe distribution: one centered 100 nm bead, one mode per
    /// sample, no camera noise.
    pub fn probe() -> Self {
        Self {
            kinds: vec![AberrationKind::Single],
            j_max: 1,
            photon_range: [1.0e4, 1.0e4],
            fwhms_um: vec![0.1],
            fov_fraction: 0.0,
            camera: None,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optics.validate()?;
        if self.kinds.is_empty() {
            return Err(Error::invalid("at least one aberration kind is required"));
        }
        if !(self.max_amplitude_waves >= 0.0 && self.max_amplitude_waves.is_finite()) {
            return Err(Error::invalid("max_amplitude_waves must be >= 0"));
        }
        if self.j_max == 0 {
            return Err(Error::invalid("j_max must be >= 1"));
        }
        let [lo, hi] = self.photon_range;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("invalid photon range {:?}", self.photon_range)));
        }
        if self.fwhms_um.is_empty() || self.fwhms_um.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("bead FWHMs must be a non-empty list of values >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fov_fraction) {
            return Err(Error::invalid("fov_fraction must be in [0, 1]"));
        }
        if let Some(c) = &self.camera {
            c.validate()?;
        }
        Ok(())
    }

    pub fn max_amplitude_um(&self) -> f64 {
        self.max_amplitude_waves * WAVELENGTH_UM
    }
}

/// The emitters of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PunctaField {
    /// `[z, y, x]` in µm.
    pub positions_um: Vec<[f64; 3]>,
    pub fwhms_um: Vec<f64>,
    /// Integrated photons per punctum.
    pub photons: f64,
}

impl PunctaField {
    pub fn len(&self) -> usize {
        self.positions_um.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions_um.is_empty()
    }

    /// One punctum at the center voxel.
    pub fn centered(optics: &OpticsConfig, fwhm_um: f64, photons: f64) -> Self {
        let c = |a: usize| (optics.shape[a] / 2) as f64 * optics.voxel_um[a];
        Self {
            positions_um: vec![[c(0), c(1), c(2)]],
            fwhms_um: vec![fwhm_um],
            photons,
        }
    }
}

/// Draws `J ~ U{1..j_max}` puncta with positions, bead sizes and a shared
/// photon count from the puncta stream of `seed`.
pub fn place_puncta(seed: u64, cfg: &SynthConfig) -> Result<PunctaField> {
    cfg.validate()?;
    let mut r = rng::stream(seed, purpose::PUNCTA);
    place_puncta_with(&mut r, cfg)
}

fn place_puncta_with<R: Rng + ?Sized>(r: &mut R, cfg: &SynthConfig) -> Result<PunctaField> {
    let o = &cfg.optics;
    let j = r.random_range(1..=cfg.j_max);
    let [lo, hi] = cfg.photon_range;
    let photons = if hi > lo { r.random_range(lo..=hi) } else { lo };
    let mut positions_um = Vec::with_capacity(j);
    let mut fwhms_um = Vec::with_capacity(j);
    for _ in 0..j {
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            let n = o.shape[a] as f64;
            let center = (o.shape[a] / 2) as f64;
            let half = cfg.fov_fraction * n / 2.0;
            let idx = center - half + r.random::<f64>() * 2.0 * half;
            *v = idx.clamp(-0.5, n - 0.5 - 1e-9) * o.voxel_um[a];
        }
        positions_um.push(p);
        fwhms_um.push(cfg.fwhms_um[r.random_range(0..cfg.fwhms_um.len())]);
    }
    Ok(PunctaField {
        positions_um,
        fwhms_um,
        photons,
    })
}

/// Normalized 1D Gaussian kernel (σ in voxels) truncated at 4σ.
fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (BEAD_TRUNCATION_SIGMAS * sigma_vox).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution along `axis` with zero padding.
fn convolve_axis(a: &Array3<f64>, axis: usize, kernel: &[f64]) -> Array3<f64> {
    if kernel.len() == 1 {
        return a.clone();
    }
    let r = (kernel.len() / 2) as i64;
    let mut out = Array3::zeros(a.raw_dim());
    for (src, mut dst) in a.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        let n = src.len() as i64;
        for i in 0..n {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let j = i + t as i64 - r;
                if (0..n).contains(&j) {
                    acc += kv * src[j as usize];
                }
            }
            dst[i as usize] = acc;
        }
    }
    out
}

/// Blurs an intensity box with a Gaussian bead of the given FWHM.
pub fn bead_blur(a: &Array3<f64>, fwhm_um: f64, voxel_um: [f64; 3]) -> Array3<f64> {
    let sigma_um = fwhm_um / FWHM_PER_SIGMA;
    let mut out = a.clone();
    for axis in 0..3 {
        out = convolve_axis(&out, axis, &gaussian_kernel(sigma_um / voxel_um[axis]));
    }
    out
}

/// Image of one punctum on the PSF box, centered at the grid center plus
/// the sub-voxel part of its position, scaled to sum to `photons`.
/// Returns the box and the integer voxel it is anchored to.
fn punctum_box(
    scope: &Microscope,
    coeffs: &ZernikeCoeffs,
    position_um: [f64; 3],
    fwhm_um: f64,
    photons: f64,
) -> Result<(Array3<f64>, [i64; 3])> {
    let o = &scope.cfg;
    let mut anchor = [0i64; 3];
    let mut frac_um = [0.0; 3];
    for a in 0..3 {
        let c = position_um[a] / o.voxel_um[a];
        let n = c.round();
        anchor[a] = n as i64;
        frac_um[a] = (c - n) * o.voxel_um[a];
    }
    let psf = scope.overall_at(coeffs, frac_um)?;
    let mut b = bead_blur(&psf.data, fwhm_um, o.voxel_um);
    let total: f64 = b.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric {
            location: "synth::render_field".into(),
            detail: format!("bead image sum {total}"),
        });
    }
    let scale = photons / total;
    b.mapv_inplace(|v| v * scale);
    Ok((b, anchor))
}

/// Adds `b` (anchored so its center voxel lands on `anchor`) into `vol`,
/// discarding whatever falls outside.
fn add_cropped(vol: &mut Array3<f64>, b: &Array3<f64>, anchor: [i64; 3]) {
    let vs = vol.shape().to_vec();
    let bs = b.shape().to_vec();
    let mut src = [(0i64, 0i64); 3];
    let mut dst = [(0i64, 0i64); 3];
    for a in 0..3 {
        let off = anchor[a] - (bs[a] / 2) as i64;
        let lo = off.max(0);
        let hi = (off + bs[a] as i64).min(vs[a] as i64);
        if hi <= lo {
            return;
        }
        dst[a] = (lo, hi);
        src[a] = (lo - off, hi - off);
    }
    let mut d = vol.slice_mut(s![
        dst[0].0 as usize..dst[0].1 as usize,
        dst[1].0 as usize..dst[1].1 as usize,
        dst[2].0 as usize..dst[2].1 as usize
    ]);
    let sv = b.slice(s![
        src[0].0 as usize..src[0].1 as usize,
        src[1].0 as usize..src[1].1 as usize,
        src[2].0 as usize..src[2].1 as usize
    ]);
    d += &sv;
}

/// Renders every punctum as the aberrated overall PSF convolved with its
/// Gaussian bead, each scaled to integrate to `photons` over the PSF box,
/// superposed on a volume of the optics shape.
pub fn render_field(puncta: &PunctaField, scope: &Microscope, coeffs: &ZernikeCoeffs) -> Result<Volume> {
    render_field_into(puncta, scope, coeffs, scope.cfg.shape)
}

/// As [`render_field`] on a volume of arbitrary shape (same voxel size).
pub fn render_field_into(
    puncta: &PunctaField,
    scope: &Microscope,
    coeffs: &ZernikeCoeffs,
    shape: [usize; 3],
) -> Result<Volume> {
    let o = &scope.cfg;
    if puncta.fwhms_um.len() != puncta.positions_um.len() {
        return Err(Error::invalid("puncta positions and sizes differ in length"));
    }
    for p in &puncta.positions_um {
        for a in 0..3 {
            let lo = -0.5 * o.voxel_um[a];
            let hi = (shape[a] as f64 - 0.5) * o.voxel_um[a];
            if !(p[a] >= lo && p[a] < hi) {
                return Err(Error::invalid(format!("punctum at {p:?} lies outside the field of view")));
            }
        }
    }
    let boxes: Vec<(Array3<f64>, [i64; 3])> = puncta
        .positions_um
        .par_iter()
        .zip(puncta.fwhms_um.par_iter())
        .map(|(p, w)| punctum_box(scope, coeffs, *p, *w, puncta.photons))
        .collect::<Result<_>>()?;
    let mut vol = Array3::zeros(shape);
    for (b, anchor) in &boxes {
        add_cropped(&mut vol, b, *anchor);
    }
    Ok(Volume::new(vol, o.voxel_um))
}

/// Photon volume to camera counts: `Poisson(qe x) + Normal(baseline, ε)`,
/// clamped at 0, drawn from the camera stream of `seed` in voxel order.
pub fn apply_camera(vol: &Volume, cam: &CameraModel, seed: u64) -> Result<Volume> {
    cam.validate()?;
    if vol.data.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::invalid("camera input must be non-negative"));
    }
    let mut r = rng::stream(seed, purpose::CAMERA);
    let read = Normal::new(cam.baseline, cam.read_noise)
        .map_err(|e| Error::invalid(format!("read noise: {e}")))?;
    let mut out = vol.clone();
    for v in out.data.iter_mut() {
        let mean = cam.qe * *v;
        let shot = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::invalid(format!("poisson mean {mean}: {e}")))?
                .sample(&mut r)
        } else {
            0.0
        };
        let noise = if cam.read_noise > 0.0 {
            read.sample(&mut r)
        } else {
            cam.baseline
        };
        *v = (shot + noise).max(0.0);
    }
    Ok(out)
}

/// One synthetic volume with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub kind: AberrationKind,
    pub volume: Volume,
    pub truth: ZernikeCoeffs,
    pub puncta: PunctaField,
}

impl SampleRecord {
    pub fn photons(&self) -> f64 {
        self.puncta.photons
    }

    pub fn meta(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("seed".into(), json!(self.seed));
        m.insert("kind".into(), json!(self.kind));
        m.insert("zernike_um".into(), json!(self.truth));
        m.insert("n_puncta".into(), json!(self.puncta.len()));
        m.insert("photons".into(), json!(self.puncta.photons));
        m
    }
}

/// Draws the aberration of sample `seed`: a distribution kind uniformly
/// from `cfg.kinds`, then coefficients from that distribution.
pub fn sample_truth(seed: u64, cfg: &SynthConfig) -> Result<(AberrationKind, ZernikeCoeffs)> {
    let mut r = rng::stream(seed, purpose::ABERRATION);
    let kind = cfg.kinds[r.random_range(0..cfg.kinds.len())];
    let c = sample_aberration_with(kind, cfg.max_amplitude_um(), &mut r)?;
    Ok((kind, c))
}

/// Generates sample `seed` with a prebuilt microscope.
pub fn generate_sample_with(seed: u64, cfg: &SynthConfig, scope: &Microscope) -> Result<SampleRecord> {
    let (kind, truth) = sample_truth(seed, cfg)?;
    let puncta = place_puncta(seed, cfg)?;
    let photons = render_field(&puncta, scope, &truth)?;
    let volume = match &cfg.camera {
        Some(cam) => apply_camera(&photons, cam, seed)?,
        None => photons,
    };
    Ok(SampleRecord {
        seed,
        kind,
        volume,
        truth,
        puncta,
    })
}

/// Fully deterministic sample for `seed`.
pub fn generate_sample(seed: u64, cfg: &SynthConfig) -> Result<SampleRecord> {
    cfg.validate()?;
    let scope = Microscope::new(&cfg.optics, cfg.light_sheet)?;
    generate_sample_with(seed, cfg, &scope)
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub seed: u64,
    /// Path relative to the dataset root.
    pub file: String,
    pub kind: AberrationKind,
    pub zernike_um: ZernikeCoeffs,
    pub n_puncta: usize,
    pub photons: f64,
}

/// `<out>/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SynthConfig,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let m: Self = crate::io::read_json(&dir.join("manifest.json"))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn sample_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(&self.records[i].file)
    }
}

/// Writes `n` samples with seeds `seed0..seed0+n` to `<out>/samples/` and a
/// manifest listing them. Samples are generated in parallel; output bytes do
/// not depend on scheduling.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, out_dir: &Path, seed0: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    cfg.validate()?;
    let scope = Microscope::new(&cfg.optics, cfg.light_sheet)?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let records: Vec<ManifestRecord> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = seed0 + i;
            let rec = generate_sample_with(seed, cfg, &scope)?;
            let file = format!("samples/{seed}.vol");
            rec.volume.write(&out_dir.join(&file), rec.meta())?;
            Ok(ManifestRecord {
                seed,
                file,
                kind: rec.kind,
                zernike_um: rec.truth,
                n_puncta: rec.puncta.len(),
                photons: rec.puncta.photons,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        records,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
