//! Axial excitation profiles of swept light sheets.
//!
//! The excitation pupil `P(u, v)` is described in NA units, with `u` the
//! pupil coordinate conjugate to the detection axis `z`. Sweeping the sheet
//! along `x` averages out lateral structure, leaving the axial
//! cross-section `I(z) = sum_v |sum_u P(u, v) exp(2 pi i u z / λ_exc)|^2`.
//! This is evaluated through the `u`-autocorrelation of the pupil so the
//! profile can be sampled at any `z`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::OpticsConfig;
use crate::error::{Error, Result};

/// Pupil sampling step in NA units.
const DU: f64 = 0.0025;
/// Pupil half-extent in NA units; covers every supported annulus.
const U_MAX: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[derive(Default)]
pub enum LightSheetKind {
    #[serde(rename = "MBSq35", alias = "mbsq35", alias = "MBSq-35")]
    #[default]
    MBSq35,
    #[serde(rename = "MBSq30", alias = "mbsq30", alias = "MBSq-30")]
    MBSq30,
    #[serde(rename = "MBSq50", alias = "mbsq50", alias = "MBSq-50")]
    MBSq50,
    #[serde(rename = "Sinc", alias = "sinc")]
    Sinc,
    #[serde(rename = "Gaussian", alias = "gaussian")]
    Gaussian,
}


impl LightSheetKind {
    pub const ALL: [LightSheetKind; 5] = [
        LightSheetKind::MBSq35,
        LightSheetKind::MBSq30,
        LightSheetKind::MBSq50,
        LightSheetKind::Sinc,
        LightSheetKind::Gaussian,
    ];

    fn name(&self) -> &'static str {
        match self {
            Self::MBSq35 => "MBSq35",
            Self::MBSq30 => "MBSq30",
            Self::MBSq50 => "MBSq50",
            Self::Sinc => "Sinc",
            Self::Gaussian => "Gaussian",
        }
    }

    /// Excitation pupil amplitude at `(u, v)` in NA units.
    fn pupil(&self, u: f64, v: f64) -> f64 {
        let gauss = |x: f64, s: f64| (-x * x / (2.0 * s * s)).exp();
        let lattice = |na_lattice: f64, outer: f64, inner: f64, sigma: f64| {
            let r = u.hypot(v);
            if r > outer || r < inner {
                return 0.0;
            }
            let c = na_lattice / SQRT_2;
            gauss(u, sigma) + gauss(u - c, sigma) + gauss(u + c, sigma)
        };
        match self {
            Self::MBSq35 => lattice(0.35, 0.40, 0.30, 0.10),
            Self::MBSq30 => lattice(0.30, 0.375, 0.225, 0.10),
            Self::MBSq50 => lattice(0.50, 0.40, 0.30, 0.10),
            // The swept standing-wave sheets are modelled by a single line
            // of the pupil (v = 0) with a hard or Gaussian aperture in u.
            Self::Sinc => {
                if v == 0.0 && u.abs() <= 0.24 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gaussian => {
                if v == 0.0 && u.abs() <= 0.40 {
                    gauss(u, 0.21)
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for LightSheetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LightSheetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-').collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown light sheet {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Source {
    /// `(Δu, c(Δu))` pairs of the pupil autocorrelation and `λ_exc`.
    Pupil { autocorr: Vec<(f64, f64)>, lambda_um: f64, peak: f64 },
    /// Explicit samples; evaluated by linear interpolation.
    Samples,
}

/// Axial excitation profile sampled on the volume's z grid, with the plane
/// at index `nz/2` at `z = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightSheetProfile {
    pub kind: Option<LightSheetKind>,
    pub dz_um: f64,
    pub intensity_z: Vec<f64>,
    source: Source,
}

impl LightSheetProfile {
    /// A profile given directly by its samples.
    pub fn from_samples(intensity_z: Vec<f64>, dz_um: f64) -> Self {
        Self {
            kind: None,
            dz_um,
            intensity_z,
            source: Source::Samples,
        }
    }

    /// Excitation intensity at axial position `z_um` relative to the sheet
    /// center.
    pub fn at(&self, z_um: f64) -> f64 {
        match &self.source {
            Source::Pupil {
                autocorr,
                lambda_um,
                peak,
            } => {
                let s: f64 = autocorr
                    .iter()
                    .map(|(d, c)| c * (2.0 * PI * d * z_um / lambda_um).cos())
                    .sum();
                (s / peak).max(0.0)
            }
            Source::Samples => {
                let n = self.intensity_z.len();
                if n == 0 {
                    return 0.0;
                }
                let pos = z_um / self.dz_um + (n / 2) as f64;
                if pos < 0.0 || pos > (n - 1) as f64 {
                    return 0.0;
                }
                let i = pos.floor() as usize;
                let t = pos - i as f64;
                let a = self.intensity_z[i];
                let b = self.intensity_z[(i + 1).min(n - 1)];
                a + (b - a) * t
            }
        }
    }
}

/// Axial excitation profile of `kind` sampled at the optics z grid, with
/// peak value 1 at `z = 0`.
pub fn light_sheet(kind: LightSheetKind, cfg: &OpticsConfig) -> Result<LightSheetProfile> {
    cfg.validate()?;
    let n = (2.0 * U_MAX / DU).round() as usize + 1;
    let coord = |i: usize| -U_MAX + i as f64 * DU;
    // Non-zero pupil samples grouped by row v.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for iv in 0..n {
        let v = coord(iv);
        let row: Vec<(usize, f64)> = (0..n)
            .filter_map(|iu| {
                let p = kind.pupil(coord(iu), v);
                (p != 0.0).then_some((iu, p))
            })
            .collect();
        if !row.is_empty() {
            rows.push(row);
        }
    }
    let mut corr = vec![0.0; 2 * n - 1];
    for row in &rows {
        for &(a, pa) in row {
            for &(b, pb) in row {
                corr[b + n - 1 - a] += pa * pb;
            }
        }
    }
    let autocorr: Vec<(f64, f64)> = corr
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(k, &c)| ((k as f64 - (n - 1) as f64) * DU, c))
        .collect();
    let peak: f64 = autocorr.iter().map(|(_, c)| c).sum();
    if peak <= 0.0 {
        return Err(Error::invalid(format!("light sheet {kind} has an empty pupil")));
    }
    let mut profile = LightSheetProfile {
        kind: Some(kind),
        dz_um: cfg.voxel_um[0],
        intensity_z: Vec::new(),
        source: Source::Pupil {
            autocorr,
            lambda_um: cfg.lambda_exc_um,
            peak,
        },
    };
    let nz = cfg.shape[0];
    profile.intensity_z = (0..nz)
        .map(|iz| profile.at((iz as f64 - (nz / 2) as f64) * cfg.voxel_um[0]))
        .collect();
    Ok(profile)
}
