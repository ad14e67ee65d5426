//! Orthonormal Zernike modes in ANSI single-index order, wavefront
//! composition and metrics, coefficient rotation, and the aberration
//! sampling distributions used to build datasets.
//!
//! Modes are normalized so that the mean square of each mode over the unit
//! disk is 1: a coefficient equals its RMS contribution to the wavefront.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Neg, Sub};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, Real};

/// Number of modes carried (j = 0..14, radial order n <= 4).
pub const N_MODES: usize = 15;

/// Piston, tip, tilt and defocus: never sampled, never a target.
pub const EXCLUDED_MODES: [usize; 4] = [0, 1, 2, 4];

/// The eleven modes that receive aberration mass.
pub const DETECTABLE_MODES: [usize; 11] = [3, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];

/// Detection wavelength used to express coefficients in waves.
pub const WAVELENGTH_UM: f64 = 0.510;

/// Lomax shape parameter for the power-law partitioning.
pub const LOMAX_GAMMA: f64 = 0.75;

/// `(n, m)` for ANSI index `j`.
pub fn ansi_to_nm(j: usize) -> (u32, i32) {
    // n is the largest integer with n(n+1)/2 <= j.
    let mut n = ((((8 * j + 1) as f64).sqrt() - 1.0) / 2.0).floor() as usize;
    while (n + 1) * (n + 2) / 2 <= j {
        n += 1;
    }
    while n * (n + 1) / 2 > j {
        n -= 1;
    }
    let m = 2 * j as i64 - (n * (n + 2)) as i64;
    (n as u32, m as i32)
}

/// ANSI index for `(n, m)`.
pub fn nm_to_ansi(n: u32, m: i32) -> Result<usize> {
    validate_nm(n, m)?;
    Ok(((n as i64 * (n as i64 + 2) + m as i64) / 2) as usize)
}

fn validate_nm(n: u32, m: i32) -> Result<()> {
    let ma = m.unsigned_abs();
    if ma > n || !(n - ma).is_multiple_of(2) {
        return Err(Error::invalid(format!("invalid Zernike pair (n={n}, m={m})")));
    }
    Ok(())
}

/// A validated `(j, n, m)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZernikeIndex {
    pub j: usize,
    pub n: u32,
    pub m: i32,
}

impl ZernikeIndex {
    pub fn from_ansi(j: usize) -> Self {
        let (n, m) = ansi_to_nm(j);
        Self { j, n, m }
    }

    pub fn from_nm(n: u32, m: i32) -> Result<Self> {
        Ok(Self {
            j: nm_to_ansi(n, m)?,
            n,
            m,
        })
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).fold(1.0, |acc, v| acc * v as f64)
}

/// Unnormalized radial polynomial `R_n^{|m|}(rho)`.
pub fn radial<T: Real>(n: u32, m_abs: u32, rho: T) -> T {
    let mut acc = T::zero();
    for k in 0..=((n - m_abs) / 2) {
        let c = factorial(n - k)
            / (factorial(k) * factorial((n + m_abs) / 2 - k) * factorial((n - m_abs) / 2 - k));
        let c = if k % 2 == 1 { -c } else { c };
        acc += T::of(c) * rho.powi((n - 2 * k) as i32);
    }
    acc
}

/// Orthonormalization factor `sqrt(2(n+1)/(1+delta_m0))`.
pub fn norm_factor(n: u32, m: i32) -> f64 {
    if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    }
}

/// Orthonormal Zernike mode `(n, m)` at polar pupil coordinates.
pub fn eval_mode<T: Real>(n: u32, m: i32, rho: T, theta: T) -> Result<T> {
    validate_nm(n, m)?;
    Ok(eval_mode_unchecked(n, m, rho, theta))
}

#[inline]
fn eval_mode_unchecked<T: Real>(n: u32, m: i32, rho: T, theta: T) -> T {
    let ma = m.unsigned_abs();
    let r = T::of(norm_factor(n, m)) * radial(n, ma, rho);
    let mt = T::of(ma as f64) * theta;
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => r,
        std::cmp::Ordering::Greater => r * mt.cos(),
        std::cmp::Ordering::Less => r * mt.sin(),
    }
}

/// Mode amplitudes in µm RMS, indexed by ANSI `j`.
///
/// Serializes as a bare array of 15 numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZernikeCoeffs {
    pub amps: [f64; N_MODES],
}

impl ZernikeCoeffs {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_amps(amps: [f64; N_MODES]) -> Self {
        Self { amps }
    }

    pub fn single(j: usize, amp: f64) -> Self {
        let mut c = Self::zeros();
        c.amps[j] = amp;
        c
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let amps: [f64; N_MODES] = v.try_into().map_err(|_| {
            Error::Format(format!("expected {N_MODES} coefficients, got {}", v.len()))
        })?;
        Ok(Self { amps })
    }

    pub fn is_finite(&self) -> bool {
        self.amps.iter().all(|a| a.is_finite())
    }

    /// Euclidean norm, equal to the wavefront RMS in µm.
    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Norm in waves at the detection wavelength.
    pub fn rms_waves(&self) -> f64 {
        self.norm() / WAVELENGTH_UM
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            amps: self.amps.map(|a| a * s),
        }
    }

    pub fn excluded_are_zero(&self) -> bool {
        EXCLUDED_MODES.iter().all(|&j| self.amps[j] == 0.0)
    }

    /// Copy with the excluded modes forced to zero.
    pub fn without_excluded(&self) -> Self {
        let mut c = *self;
        for j in EXCLUDED_MODES {
            c.amps[j] = 0.0;
        }
        c
    }

    /// Wavefront value (µm) at a polar pupil coordinate.
    pub fn eval<T: Real>(&self, rho: T, theta: T) -> T {
        let mut acc = T::zero();
        for (j, &a) in self.amps.iter().enumerate() {
            if a != 0.0 {
                let (n, m) = ansi_to_nm(j);
                acc += T::of(a) * eval_mode_unchecked(n, m, rho, theta);
            }
        }
        acc
    }
}

impl Index<usize> for ZernikeCoeffs {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.amps[j]
    }
}

impl IndexMut<usize> for ZernikeCoeffs {
    fn index_mut(&mut self, j: usize) -> &mut f64 {
        &mut self.amps[j]
    }
}

impl Add for ZernikeCoeffs {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = self;
        out.amps.iter_mut().zip(rhs.amps).for_each(|(a, b)| *a += b);
        out
    }
}

impl Sub for ZernikeCoeffs {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut out = self;
        out.amps.iter_mut().zip(rhs.amps).for_each(|(a, b)| *a -= b);
        out
    }
}

impl Neg for ZernikeCoeffs {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

/// File wrapper: `{"zernike_um": [15 numbers]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffsFile {
    pub zernike_um: ZernikeCoeffs,
}

/// Wavefront (µm) sampled on a square grid over the unit pupil disk.
#[derive(Clone, Debug)]
pub struct Wavefront<T> {
    pub phase: Array2<T>,
    pub mask: Array2<bool>,
}

/// Minimum grid side accepted by [`compose_wavefront`].
pub const MIN_GRID: usize = 32;

/// Polar coordinates of pixel centers on a `size x size` grid spanning the
/// unit disk. Row index is `y`, column index is `x`.
pub fn pupil_grid(size: usize) -> (Array2<f64>, Array2<f64>) {
    let half = size as f64 / 2.0;
    let rho = Array2::from_shape_fn((size, size), |(i, j)| {
        let y = (i as f64 + 0.5 - half) / half;
        let x = (j as f64 + 0.5 - half) / half;
        x.hypot(y)
    });
    let theta = Array2::from_shape_fn((size, size), |(i, j)| {
        let y = (i as f64 + 0.5 - half) / half;
        let x = (j as f64 + 0.5 - half) / half;
        y.atan2(x)
    });
    (rho, theta)
}

/// Amplitude-weighted sum of modes over the in-pupil mask.
pub fn compose_wavefront<T: Real>(coeffs: &ZernikeCoeffs, grid_size: usize) -> Result<Wavefront<T>> {
    if grid_size < MIN_GRID {
        return Err(Error::invalid(format!(
            "wavefront grid must be at least {MIN_GRID}, got {grid_size}"
        )));
    }
    let (rho, theta) = pupil_grid(grid_size);
    let mask = rho.mapv(|r| r <= 1.0);
    let mut phase = Array2::<T>::zeros((grid_size, grid_size));
    for ((idx, p), &inside) in phase.indexed_iter_mut().zip(mask.iter()) {
        if inside {
            *p = coeffs.eval(T::of(rho[idx]), T::of(theta[idx]));
        }
    }
    Ok(Wavefront { phase, mask })
}

fn masked_values<T: Real>(w: &Wavefront<T>) -> Result<Vec<f64>> {
    let v: Vec<f64> = w
        .phase
        .iter()
        .zip(w.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.to_f64_lossy())
        .collect();
    if v.is_empty() {
        return Err(Error::invalid("wavefront mask is empty"));
    }
    Ok(v)
}

/// RMS about the in-mask mean (µm).
pub fn wavefront_rms<T: Real>(w: &Wavefront<T>) -> Result<f64> {
    let v = masked_values(w)?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    Ok((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Peak-to-valley over the mask (µm).
pub fn wavefront_pv<T: Real>(w: &Wavefront<T>) -> Result<f64> {
    let v = masked_values(w)?;
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(hi - lo)
}

/// The four aberration-sampling distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AberrationKind {
    Single,
    Bimodal,
    Powerlaw,
    Dirichlet,
}

impl AberrationKind {
    pub const ALL: [AberrationKind; 4] = [
        AberrationKind::Single,
        AberrationKind::Bimodal,
        AberrationKind::Powerlaw,
        AberrationKind::Dirichlet,
    ];
}

impl FromStr for AberrationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Self::Single),
            "bimodal" => Ok(Self::Bimodal),
            "powerlaw" => Ok(Self::Powerlaw),
            "dirichlet" => Ok(Self::Dirichlet),
            other => Err(Error::invalid(format!("unknown aberration kind {other:?}"))),
        }
    }
}

impl fmt::Display for AberrationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Single => "single",
            Self::Bimodal => "bimodal",
            Self::Powerlaw => "powerlaw",
            Self::Dirichlet => "dirichlet",
        };
        f.write_str(s)
    }
}

/// Draws an aberration from `kind` with total amplitude up to `alpha_max` µm,
/// using the aberration stream of `seed`.
pub fn sample_aberration(kind: AberrationKind, alpha_max: f64, seed: u64) -> Result<ZernikeCoeffs> {
    sample_aberration_with(kind, alpha_max, &mut rng::stream(seed, rng::purpose::ABERRATION))
}

/// Draws an aberration from `kind` with total amplitude up to `alpha_max` µm.
///
/// Mass only lands on [`DETECTABLE_MODES`]; all amplitudes are non-negative.
pub fn sample_aberration_with<R: Rng + ?Sized>(
    kind: AberrationKind,
    alpha_max: f64,
    rng: &mut R,
) -> Result<ZernikeCoeffs> {
    if !(alpha_max.is_finite() && alpha_max >= 0.0) {
        return Err(Error::invalid(format!("alpha_max must be >= 0, got {alpha_max}")));
    }
    let mut c = ZernikeCoeffs::zeros();
    let n_modes = DETECTABLE_MODES.len();
    match kind {
        AberrationKind::Single => {
            let j = DETECTABLE_MODES[rng.random_range(0..n_modes)];
            c.amps[j] = alpha_max * rng.random::<f64>();
        }
        AberrationKind::Bimodal => {
            let total = alpha_max * rng.random::<f64>();
            let eps = rng.random::<f64>();
            let picks = sample_indices(rng, n_modes, 2);
            c.amps[DETECTABLE_MODES[picks.index(0)]] = eps * total;
            c.amps[DETECTABLE_MODES[picks.index(1)]] = total - eps * total;
        }
        AberrationKind::Powerlaw | AberrationKind::Dirichlet => {
            let total = alpha_max * rng.random::<f64>();
            let weights: Vec<f64> = (0..n_modes)
                .map(|_| {
                    let x = rng.random::<f64>();
                    if kind == AberrationKind::Powerlaw {
                        LOMAX_GAMMA / (x + 1.0).powf(LOMAX_GAMMA + 1.0)
                    } else {
                        x
                    }
                })
                .collect();
            let sum: f64 = weights.iter().sum();
            if sum > 0.0 {
                for (&j, w) in DETECTABLE_MODES.iter().zip(&weights) {
                    c.amps[j] = w / sum * total;
                }
            }
        }
    }
    Ok(c)
}

/// Rotates the wavefront by `theta` (counter-clockwise in pupil `x, y`).
///
/// Each twin pair `(n, +|m|), (n, -|m|)` transforms by a 2x2 rotation of
/// angle `|m| theta`; `m = 0` modes are unchanged.
pub fn rotate_coeffs(coeffs: &ZernikeCoeffs, theta: f64) -> ZernikeCoeffs {
    let mut out = *coeffs;
    for j in 0..N_MODES {
        let (n, m) = ansi_to_nm(j);
        if m <= 0 {
            continue;
        }
        let js = nm_to_ansi(n, -m).expect("twin of a valid mode");
        let (s, c) = (m as f64 * theta).sin_cos();
        let (ac, as_) = (coeffs.amps[j], coeffs.amps[js]);
        out.amps[j] = ac * c - as_ * s;
        out.amps[js] = ac * s + as_ * c;
    }
    out
}

/// A group of modes that mix under rotation: a `(cos, sin)` twin pair for
/// `|m| > 0`, or a single rotationally invariant mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwinGroup {
    pub n: u32,
    pub m_abs: u32,
    /// ANSI index of the `+|m|` (cosine) mode, or the `m = 0` mode.
    pub cos_j: usize,
    /// ANSI index of the `-|m|` (sine) mode.
    pub sin_j: Option<usize>,
}

impl TwinGroup {
    pub fn modes(&self) -> Vec<usize> {
        match self.sin_j {
            Some(s) => vec![s, self.cos_j],
            None => vec![self.cos_j],
        }
    }
}

/// Rotation groups covering [`DETECTABLE_MODES`], ordered by `(n, |m|)`.
pub fn detectable_groups() -> Vec<TwinGroup> {
    let mut groups = Vec::new();
    for n in 0..=4u32 {
        for m_abs in (n % 2..=n).step_by(2) {
            let cos_j = nm_to_ansi(n, m_abs as i32).expect("valid");
            if !DETECTABLE_MODES.contains(&cos_j) {
                continue;
            }
            let sin_j = (m_abs > 0).then(|| nm_to_ansi(n, -(m_abs as i32)).expect("valid"));
            groups.push(TwinGroup {
                n,
                m_abs,
                cos_j,
                sin_j,
            });
        }
    }
    groups
}
