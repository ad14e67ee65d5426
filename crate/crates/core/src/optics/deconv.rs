//! OTF-masked Wiener deconvolution.

use ndarray::{Array3, Zip};
use rustfft::num_complex::Complex64;

use super::Psf3D;
use crate::error::{Error, Result};
use crate::fft::{fftn, ifftshift3};
use crate::volume::Volume;

/// Default support threshold relative to the OTF peak.
pub const DEFAULT_OTF_THRESHOLD: f64 = 1e-3;

/// OTF of a centered PSF in unshifted FFT layout, normalized to 1 at DC.
pub fn otf(psf: &Psf3D) -> Result<Array3<Complex64>> {
    let total = psf.sum();
    if !total.is_finite() || total == 0.0 {
        return Err(Error::invalid(format!("PSF sum must be finite and non-zero, got {total}")));
    }
    let mut c = ifftshift3(&psf.data.mapv(|v| Complex64::new(v / total, 0.0)));
    fftn(&mut c, false);
    Ok(c)
}

/// Binary frequency support in unshifted FFT layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OtfMask {
    pub support: Array3<bool>,
}

impl OtfMask {
    /// Support of the ideal OTF: `|OTF| > rel_threshold * max |OTF|`.
    pub fn from_psf(ideal: &Psf3D, rel_threshold: f64) -> Result<Self> {
        let o = otf(ideal)?;
        let peak = o.iter().map(|c| c.norm()).fold(0.0, f64::max);
        Ok(Self {
            support: o.mapv(|c| c.norm() > rel_threshold * peak),
        })
    }

    /// Mask that passes every frequency.
    pub fn all(shape: [usize; 3]) -> Self {
        Self {
            support: Array3::from_elem(shape, true),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.support.dim();
        [a, b, c]
    }
}

/// Masked Wiener filter without the final clamp; linear in `vol`.
pub fn wiener_filter(vol: &Volume, psf: &Psf3D, snr: f64, mask: &OtfMask) -> Result<Array3<f64>> {
    if vol.shape() != psf.shape() || vol.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "volume {:?}, PSF {:?} and mask {:?} must match",
            vol.shape(),
            psf.shape(),
            mask.shape()
        )));
    }
    if !(snr.is_finite() && snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let h = otf(psf)?;
    let mut spec = vol.data.mapv(|v| Complex64::new(v, 0.0));
    fftn(&mut spec, false);
    let reg = 1.0 / snr;
    Zip::from(&mut spec)
        .and(&h)
        .and(&mask.support)
        .for_each(|s, &h, &keep| {
            *s = if keep {
                *s * h.conj() / (h.norm_sqr() + reg)
            } else {
                Complex64::new(0.0, 0.0)
            };
        });
    fftn(&mut spec, true);
    Ok(spec.mapv(|c| c.re))
}

/// `conj(OTF) / (|OTF|^2 + 1/snr)` restricted to `mask`, clamped at 0.
pub fn wiener_deconvolve(vol: &Volume, psf: &Psf3D, snr: f64, mask: &OtfMask) -> Result<Volume> {
    let raw = wiener_filter(vol, psf, snr, mask)?;
    Ok(Volume::new(raw.mapv(|v| v.max(0.0)), vol.voxel_um))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{detection_psf, make_pupil, OpticsConfig};

    fn cfg() -> OpticsConfig {
        OpticsConfig {
            shape: [32, 32, 32],
            ..OpticsConfig::default()
        }
    }

    fn ideal() -> Psf3D {
        detection_psf(&make_pupil::<f64>(&cfg()).unwrap(), &cfg()).unwrap()
    }

    fn delta() -> Psf3D {
        let mut d = Volume::zeros([32, 32, 32], cfg().voxel_um);
        d.data[[16, 16, 16]] = 1.0;
        d
    }

    #[test]
    fn otf_is_hermitian() {
        let o = otf(&ideal()).unwrap();
        let (a, b, c) = o.dim();
        let mut worst = 0.0f64;
        for ((i, j, k), v) in o.indexed_iter() {
            let w = o[[(a - i) % a, (b - j) % b, (c - k) % c]];
            worst = worst.max((v - w.conj()).norm());
        }
        assert!(worst < 1e-10);
    }

    #[test]
    fn deconvolution_concentrates_energy() {
        let psf = ideal();
        let mask = OtfMask::from_psf(&psf, DEFAULT_OTF_THRESHOLD).unwrap();
        let out = wiener_deconvolve(&psf, &psf, 1e4, &mask).unwrap();
        let frac = |v: &Volume| v.data[[16, 16, 16]] / v.sum();
        assert!(frac(&out) > frac(&psf));
    }

    #[test]
    fn delta_psf_is_identity_up_to_mask() {
        let psf = ideal();
        let mask = OtfMask::from_psf(&psf, DEFAULT_OTF_THRESHOLD).unwrap();
        let snr = 1e12;
        let out = wiener_filter(&psf, &delta(), snr, &mask).unwrap();
        // Oracle: apply the mask alone.
        let mut spec = psf.data.mapv(|v| Complex64::new(v, 0.0));
        fftn(&mut spec, false);
        Zip::from(&mut spec).and(&mask.support).for_each(|s, &m| {
            if !m {
                *s = Complex64::new(0.0, 0.0);
            }
        });
        fftn(&mut spec, true);
        let worst = out
            .iter()
            .zip(spec.iter())
            .map(|(a, b)| (a - b.re).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9);

        let all = OtfMask::all([32, 32, 32]);
        let same = wiener_filter(&psf, &delta(), snr, &all).unwrap();
        let worst = same.iter().zip(psf.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn filter_is_linear() {
        let psf = ideal();
        let mask = OtfMask::from_psf(&psf, DEFAULT_OTF_THRESHOLD).unwrap();
        let vol = Volume::new(psf.data.mapv(|v| v * 3.0 + 0.01), psf.voxel_um);
        let a = wiener_filter(&vol, &psf, 100.0, &mask).unwrap();
        let scaled = Volume::new(vol.data.mapv(|v| v * 2.5), vol.voxel_um);
        let b = wiener_filter(&scaled, &psf, 100.0, &mask).unwrap();
        let worst = a.iter().zip(b.iter()).map(|(x, y)| (2.5 * x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let psf = ideal();
        let mask = OtfMask::all([32, 32, 32]);
        let zero = Volume::zeros([32, 32, 32], psf.voxel_um);
        assert!(wiener_deconvolve(&psf, &zero, 10.0, &mask).is_err());
        assert!(wiener_deconvolve(&psf, &psf, 0.0, &mask).is_err());
        let small = Volume::zeros([16, 32, 32], psf.voxel_um);
        assert!(wiener_deconvolve(&small, &psf, 10.0, &mask).is_err());
    }
}
