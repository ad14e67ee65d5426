//! Scalar pupil model, 3D detection and overall PSFs, light-sheet
//! excitation profiles and OTF-masked Wiener deconvolution.
//!
//! Lateral frequencies follow the volume grid: sample `i` of an axis of
//! length `n` with spacing `d` sits at `(i - n/2) / (n d)` cycles/µm. The
//! pupil disk is the set of lateral frequencies below `NA / λ`.

mod deconv;
mod lightsheet;

pub use deconv::{otf, wiener_deconvolve, OtfMask, DEFAULT_OTF_THRESHOLD};
pub use lightsheet::{light_sheet, LightSheetKind, LightSheetProfile};

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fftn, fftshift2, ifftshift2};
use crate::volume::Volume;
use crate::zernike::ZernikeCoeffs;
use crate::Real;

/// A PSF is an intensity volume on the optics grid.
pub type Psf3D<T = f64> = Volume<T>;

/// Microscope and sampling parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    pub na_det: f64,
    pub refr_index: f64,
    pub lambda_exc_um: f64,
    pub lambda_det_um: f64,
    /// `[dz, dy, dx]` in µm.
    pub voxel_um: [f64; 3],
    /// `[nz, ny, nx]`.
    pub shape: [usize; 3],
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            na_det: 1.0,
            refr_index: 1.33,
            lambda_exc_um: 0.488,
            lambda_det_um: 0.510,
            voxel_um: [0.200, 0.125, 0.125],
            shape: [64, 64, 64],
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.na_det,
            self.refr_index,
            self.lambda_exc_um,
            self.lambda_det_um,
            self.voxel_um[0],
            self.voxel_um[1],
            self.voxel_um[2],
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!(
                "optics parameters must be positive and finite: {self:?}"
            )));
        }
        if self.na_det > self.refr_index {
            return Err(Error::invalid(format!(
                "NA {} exceeds refractive index {}",
                self.na_det, self.refr_index
            )));
        }
        if self.shape.iter().any(|&n| n == 0 || n % 2 != 0) {
            return Err(Error::invalid(format!(
                "volume shape must be even and non-empty, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Same optics on a different grid shape.
    pub fn with_shape(&self, shape: [usize; 3]) -> Self {
        Self {
            shape,
            ..self.clone()
        }
    }

    /// Lateral pupil cutoff `NA / λ` in cycles/µm.
    pub fn cutoff(&self) -> f64 {
        self.na_det / self.lambda_det_um
    }

    /// Lateral frequency step `[dfy, dfx]` in cycles/µm.
    pub fn freq_step(&self) -> [f64; 2] {
        [
            1.0 / (self.shape[1] as f64 * self.voxel_um[1]),
            1.0 / (self.shape[2] as f64 * self.voxel_um[2]),
        ]
    }
}

/// Complex pupil `A exp(i phi)` on the lateral frequency grid.
#[derive(Clone, Debug)]
pub struct PupilField<T = f64> {
    pub amp: Array2<T>,
    /// Radians.
    pub phase: Array2<T>,
    pub mask: Array2<bool>,
    /// `NA / λ` in cycles/µm.
    pub cutoff: f64,
    /// `[dfy, dfx]` in cycles/µm.
    pub freq_step: [f64; 2],
}

impl<T: Real> PupilField<T> {
    pub fn shape(&self) -> [usize; 2] {
        let (a, b) = self.amp.dim();
        [a, b]
    }

    /// Lateral frequency `(fy, fx)` in cycles/µm of pupil sample `(i, j)`.
    pub fn freq(&self, i: usize, j: usize) -> (f64, f64) {
        let [ny, nx] = self.shape();
        (
            (i as f64 - (ny / 2) as f64) * self.freq_step[0],
            (j as f64 - (nx / 2) as f64) * self.freq_step[1],
        )
    }

    /// Number of samples inside the support.
    pub fn support_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Sum of `A^2` over the grid.
    pub fn energy(&self) -> f64 {
        self.amp.iter().map(|a| a.to_f64_lossy().powi(2)).sum()
    }

    /// `A exp(i phi)` as a complex grid.
    pub fn field(&self) -> Array2<Complex<T>> {
        let mut out = Array2::from_elem(self.amp.raw_dim(), Complex::new(T::zero(), T::zero()));
        for ((o, &a), &p) in out.iter_mut().zip(self.amp.iter()).zip(self.phase.iter()) {
            *o = Complex::from_polar(a, p);
        }
        out
    }
}

/// Top-hat pupil: amplitude 1 inside the NA disk, phase 0.
pub fn make_pupil<T: Real>(cfg: &OpticsConfig) -> Result<PupilField<T>> {
    let ones = Array2::from_elem((cfg.shape[1], cfg.shape[2]), 1.0);
    make_pupil_with_amplitude(cfg, &ones)
}

/// Pupil with a user-supplied amplitude, cut to the NA disk.
pub fn make_pupil_with_amplitude<T: Real>(
    cfg: &OpticsConfig,
    amplitude: &Array2<f64>,
) -> Result<PupilField<T>> {
    cfg.validate()?;
    let (ny, nx) = (cfg.shape[1], cfg.shape[2]);
    if amplitude.dim() != (ny, nx) {
        return Err(Error::shape(format!(
            "pupil amplitude {:?} does not match lateral grid ({ny}, {nx})",
            amplitude.dim()
        )));
    }
    if amplitude.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid("pupil amplitude must be finite and non-negative"));
    }
    let cutoff = cfg.cutoff();
    let freq_step = cfg.freq_step();
    let mask = Array2::from_shape_fn((ny, nx), |(i, j)| {
        let fy = (i as f64 - (ny / 2) as f64) * freq_step[0];
        let fx = (j as f64 - (nx / 2) as f64) * freq_step[1];
        fy.hypot(fx) <= cutoff
    });
    let amp = Array2::from_shape_fn((ny, nx), |ij| {
        if mask[ij] {
            T::of(amplitude[ij])
        } else {
            T::zero()
        }
    });
    let pupil = PupilField {
        amp,
        phase: Array2::zeros((ny, nx)),
        mask,
        cutoff,
        freq_step,
    };
    if pupil.support_len() == 0 || pupil.energy() == 0.0 {
        return Err(Error::invalid("pupil support is empty"));
    }
    Ok(pupil)
}

/// Sets the pupil phase to `2 pi / λ` times the Zernike wavefront evaluated
/// on the NA-normalized disk.
pub fn apply_aberration<T: Real>(
    pupil: &PupilField<T>,
    coeffs: &ZernikeCoeffs,
    lambda_um: f64,
) -> PupilField<T> {
    let k = 2.0 * PI / lambda_um;
    let mut out = pupil.clone();
    for ((i, j), p) in out.phase.indexed_iter_mut() {
        *p = if pupil.mask[[i, j]] {
            let (fy, fx) = pupil.freq(i, j);
            let rho = (fy.hypot(fx) / pupil.cutoff).min(1.0);
            T::of(k * coeffs.eval(rho, fy.atan2(fx)))
        } else {
            T::zero()
        };
    }
    out
}

/// Axial spatial frequency `sqrt((η/λ)^2 - f^2)` in cycles/µm for each
/// pupil sample; 0 where the radicand is negative.
fn kz_grid<T: Real>(pupil: &PupilField<T>, cfg: &OpticsConfig) -> Array2<f64> {
    let k0 = cfg.refr_index / cfg.lambda_det_um;
    let [ny, nx] = pupil.shape();
    Array2::from_shape_fn((ny, nx), |(i, j)| {
        let (fy, fx) = pupil.freq(i, j);
        let r2 = k0 * k0 - fy * fy - fx * fx;
        if r2 > 0.0 {
            r2.sqrt()
        } else {
            0.0
        }
    })
}

/// 3D detection PSF `|IFFT2(E exp(i kz z))|^2`, normalized so the
/// unaberrated PSF with the same amplitude sums to 1.
pub fn detection_psf<T: Real>(pupil: &PupilField<T>, cfg: &OpticsConfig) -> Result<Psf3D<T>> {
    detection_psf_at(pupil, cfg, [0.0; 3])
}

/// Detection PSF of an emitter displaced by `offset_um = [z, y, x]` from the
/// grid center. Lateral offsets enter as a pupil phase ramp (a Fourier
/// shift) and the axial offset as a shift of the defocus planes.
pub fn detection_psf_at<T: Real>(
    pupil: &PupilField<T>,
    cfg: &OpticsConfig,
    offset_um: [f64; 3],
) -> Result<Psf3D<T>> {
    cfg.validate()?;
    let [ny, nx] = pupil.shape();
    if [ny, nx] != [cfg.shape[1], cfg.shape[2]] {
        return Err(Error::shape(format!(
            "pupil grid {:?} does not match optics shape {:?}",
            [ny, nx],
            cfg.shape
        )));
    }
    let nz = cfg.shape[0];
    let kz = kz_grid(pupil, cfg);
    let base = pupil.field();
    let ramp = Array2::from_shape_fn((ny, nx), |(i, j)| {
        let (fy, fx) = pupil.freq(i, j);
        -2.0 * PI * (fy * offset_um[1] + fx * offset_um[2])
    });
    let norm = T::of((ny * nx) as f64 / (nz as f64 * pupil.energy()));

    let planes: Vec<Array2<T>> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let z = (iz as f64 - (nz / 2) as f64) * cfg.voxel_um[0] - offset_um[0];
            let mut f = base.clone();
            for ((idx, v), (&kzv, &r)) in f.indexed_iter_mut().zip(kz.iter().zip(ramp.iter())) {
                if pupil.mask[idx] {
                    let ph = T::of(2.0 * PI * kzv * z + r);
                    *v *= Complex::from_polar(T::one(), ph);
                }
            }
            let mut f = ifftshift2(&f);
            fftn(&mut f, true);
            fftshift2(&f).mapv(|c| c.norm_sqr() * norm)
        })
        .collect();

    let mut data = Array3::<T>::zeros((nz, ny, nx));
    for (mut dst, src) in data.axis_iter_mut(Axis(0)).zip(planes) {
        dst.assign(&src);
    }
    Ok(Volume::new(data, cfg.voxel_um))
}

/// Multiplies each z-plane of the detection PSF by the excitation profile.
pub fn overall_psf<T: Real>(det: &Psf3D<T>, sheet: &LightSheetProfile) -> Result<Psf3D<T>> {
    let nz = det.shape()[0];
    if sheet.intensity_z.len() != nz {
        return Err(Error::shape(format!(
            "light sheet has {} planes, PSF has {nz}",
            sheet.intensity_z.len()
        )));
    }
    let mut out = det.clone();
    for (mut plane, &w) in out.data.axis_iter_mut(Axis(0)).zip(&sheet.intensity_z) {
        plane.mapv_inplace(|v| v * T::of(w));
    }
    Ok(out)
}

/// Cached pupil and excitation model for repeated PSF synthesis.
#[derive(Clone, Debug)]
pub struct Microscope {
    pub cfg: OpticsConfig,
    pub pupil: PupilField<f64>,
    pub sheet: LightSheetProfile,
}

impl Microscope {
    pub fn new(cfg: &OpticsConfig, sheet: LightSheetKind) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            pupil: make_pupil(cfg)?,
            sheet: light_sheet(sheet, cfg)?,
        })
    }

    pub fn detection(&self, coeffs: &ZernikeCoeffs) -> Result<Psf3D> {
        let p = apply_aberration(&self.pupil, coeffs, self.cfg.lambda_det_um);
        detection_psf(&p, &self.cfg)
    }

    /// Overall PSF of an emitter at `offset_um` from the grid center. The
    /// excitation sheet is sampled relative to the emitter, as in a scanned
    /// light-sheet acquisition.
    pub fn overall_at(&self, coeffs: &ZernikeCoeffs, offset_um: [f64; 3]) -> Result<Psf3D> {
        let p = apply_aberration(&self.pupil, coeffs, self.cfg.lambda_det_um);
        let mut psf = detection_psf_at(&p, &self.cfg, offset_um)?;
        let nz = self.cfg.shape[0];
        for (iz, mut plane) in psf.data.axis_iter_mut(Axis(0)).enumerate() {
            let z = (iz as f64 - (nz / 2) as f64) * self.cfg.voxel_um[0] - offset_um[0];
            let w = self.sheet.at(z);
            plane.mapv_inplace(|v| v * w);
        }
        Ok(psf)
    }

    pub fn overall(&self, coeffs: &ZernikeCoeffs) -> Result<Psf3D> {
        self.overall_at(coeffs, [0.0; 3])
    }

    pub fn ideal(&self) -> Result<Psf3D> {
        self.overall(&ZernikeCoeffs::zeros())
    }
}
