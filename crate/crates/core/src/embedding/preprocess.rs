//! Filter chain applied before the Fourier transform: Gaussian high-pass,
//! lateral low-pass at the OTF cutoff and a lateral Tukey window.

use std::f64::consts::PI;

use ndarray::{Array3, Axis};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::fft_axis;
use crate::optics::OpticsConfig;
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Standard deviation (voxels) of the blur subtracted by the high-pass.
    pub highpass_sigma: f64,
    /// Lateral low-pass radius as a fraction of the OTF cutoff `2 NA / λ`.
    pub lowpass_otf_fraction: f64,
    /// Cosine fraction of the lateral Tukey window.
    pub tukey_alpha: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            highpass_sigma: 3.0,
            lowpass_otf_fraction: 1.0,
            tukey_alpha: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tukey_alpha) {
            return Err(Error::invalid(format!("tukey_alpha must be in [0, 1], got {}", self.tukey_alpha)));
        }
        if !(self.highpass_sigma >= 0.0 && self.highpass_sigma.is_finite()) {
            return Err(Error::invalid("highpass_sigma must be >= 0"));
        }
        if !(self.lowpass_otf_fraction > 0.0) {
            return Err(Error::invalid("lowpass_otf_fraction must be > 0"));
        }
        Ok(())
    }
}

/// Index into `[0, n)` reflected about the edges (`d c b a | a b c d`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur (σ in voxels, truncated at 4σ) with reflected
/// boundaries.
pub fn gaussian_blur_reflect(a: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let r = (4.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / ks).collect();
    let mut cur = a.clone();
    for axis in 0..3 {
        let mut out = Array3::zeros(cur.raw_dim());
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
            let n = src.len() as i64;
            for i in 0..n {
                dst[i as usize] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * src[reflect(i + t as i64 - r, n)])
                    .sum();
            }
        }
        cur = out;
    }
    cur
}

/// Periodic Tukey window of length `n`, symmetric about `n/2`.
pub fn tukey(n: usize, alpha: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            if alpha <= 0.0 {
                1.0
            } else if x < alpha / 2.0 {
                0.5 * (1.0 - (2.0 * PI * x / alpha).cos())
            } else if x > 1.0 - alpha / 2.0 {
                0.5 * (1.0 - (2.0 * PI * (1.0 - x) / alpha).cos())
            } else {
                1.0
            }
        })
        .collect()
}

/// Zeroes lateral frequencies above `cutoff` (cycles/µm) in every z-plane.
pub fn lateral_lowpass(a: &Array3<f64>, voxel_um: [f64; 3], cutoff: f64) -> Array3<f64> {
    let (_, ny, nx) = a.dim();
    let mut c = a.mapv(|v| Complex64::new(v, 0.0));
    fft_axis(&mut c, 1, false);
    fft_axis(&mut c, 2, false);
    let signed = |i: usize, n: usize| if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
    let (dfy, dfx) = (1.0 / (ny as f64 * voxel_um[1]), 1.0 / (nx as f64 * voxel_um[2]));
    for ((_, y, x), v) in c.indexed_iter_mut() {
        let f = (signed(y, ny) * dfy).hypot(signed(x, nx) * dfx);
        if f > cutoff {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft_axis(&mut c, 1, true);
    fft_axis(&mut c, 2, true);
    c.mapv(|v| v.re)
}

/// High-pass, lateral low-pass, lateral window. No axial window.
pub fn preprocess(vol: &Volume, optics: &OpticsConfig, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    if !vol.is_finite() {
        return Err(Error::Numeric {
            location: "embedding::preprocess".into(),
            detail: "input volume contains non-finite values".into(),
        });
    }
    let blurred = gaussian_blur_reflect(&vol.data, cfg.highpass_sigma);
    let hp = &vol.data - &blurred;
    let cutoff = cfg.lowpass_otf_fraction * 2.0 * optics.na_det / optics.lambda_det_um;
    let mut out = lateral_lowpass(&hp, vol.voxel_um, cutoff);
    let (_, ny, nx) = out.dim();
    let wy = tukey(ny, cfg.tukey_alpha);
    let wx = tukey(nx, cfg.tukey_alpha);
    for ((_, y, x), v) in out.indexed_iter_mut() {
        *v *= wy[y] * wx[x];
    }
    Ok(Volume::new(out, vol.voxel_um))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> OpticsConfig {
        OpticsConfig {
            shape: [32, 64, 64],
            ..OpticsConfig::default()
        }
    }

    #[test]
    fn constant_volume_vanishes() {
        let v = Volume::new(Array3::from_elem((32, 64, 64), 123.0), cfg().voxel_um);
        let out = preprocess(&v, &cfg(), &PreprocessConfig::default()).unwrap();
        let worst = out.data.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6 * 123.0);
    }

    #[test]
    fn super_cutoff_sinusoid_is_suppressed() {
        // Lateral Nyquist (4 cycles/µm) lies above the 2 NA / λ = 3.92 cutoff.
        let v = Volume::new(
            Array3::from_shape_fn((32, 64, 64), |(_, _, x)| if x % 2 == 0 { 1.0 } else { -1.0 }),
            cfg().voxel_um,
        );
        let out = preprocess(&v, &cfg(), &PreprocessConfig::default()).unwrap();
        let p_in: f64 = v.data.iter().map(|x| x * x).sum();
        let p_out: f64 = out.data.iter().map(|x| x * x).sum();
        let db = 10.0 * (p_in / p_out.max(1e-300)).log10();
        assert!(db > 40.0, "attenuation {db} dB");
    }

    #[test]
    fn window_is_lateral_only() {
        let w = tukey(64, 0.5);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[32], 1.0);
        for k in 1..32 {
            assert!((w[32 + k] - w[32 - k]).abs() < 1e-12);
        }
        assert!(w[16..=48].iter().all(|&v| v == 1.0));
        // An axially structured, laterally centered pattern keeps its
        // axial border planes.
        let mut v = Volume::zeros([32, 64, 64], cfg().voxel_um);
        for z in 0..32 {
            v.data[[z, 32, 32]] = if z % 2 == 0 { 1.0 } else { 0.5 };
        }
        let out = preprocess(&v, &cfg(), &PreprocessConfig::default()).unwrap();
        assert!(out.data[[0, 32, 32]].abs() > 0.1);
        assert!(out.data.index_axis(Axis(2), 0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn rejects_bad_alpha() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]);
        let bad = PreprocessConfig {
            tukey_alpha: 1.5,
            ..PreprocessConfig::default()
        };
        assert!(preprocess(&v, &cfg(), &bad).is_err());
    }
}
