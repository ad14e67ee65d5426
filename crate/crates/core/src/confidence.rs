//! Confidence by digital rotation.
//!
//! The embedding is rotated through a full turn and predicted at every
//! angle. A faithful prediction of a twin pair `(n, ±m)` rotates with the
//! embedding, so its twin angle `atan2(a₋, a₊) / m` tracks the applied
//! angle with unit slope. Groups whose twin angle does not follow, while
//! carrying a sizeable magnitude, are flagged as not confident.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::FourierEmbedding;
use crate::error::{Error, Result};
use crate::predictor::{Predictor, Query};
use crate::zernike::{detectable_groups, rotate_coeffs, TwinGroup, ZernikeCoeffs, DETECTABLE_MODES};

/// Default number of rotations (1° steps over a closed full turn).
pub const DEFAULT_ROTATIONS: usize = 361;

/// Predictions on rotated copies of one embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSweep {
    /// Applied rotation angles in degrees, strictly increasing.
    pub angles_deg: Vec<f64>,
    pub preds: Vec<ZernikeCoeffs>,
}

impl RotationSweep {
    /// Sorts by angle and checks the invariants.
    pub fn new(angles_deg: Vec<f64>, preds: Vec<ZernikeCoeffs>) -> Result<Self> {
        if angles_deg.len() != preds.len() || angles_deg.is_empty() {
            return Err(Error::invalid(format!(
                "sweep needs matching non-empty angles and predictions, got {} and {}",
                angles_deg.len(),
                preds.len()
            )));
        }
        let mut pairs: Vec<(f64, ZernikeCoeffs)> = angles_deg.into_iter().zip(preds).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| !(w[1].0 > w[0].0)) || pairs.iter().any(|p| !p.0.is_finite()) {
            return Err(Error::invalid("sweep angles must be finite and distinct"));
        }
        let (angles_deg, preds) = pairs.into_iter().unzip();
        Ok(Self { angles_deg, preds })
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }
}

/// `n` angles spanning `[0°, 360°]`; a single angle is 0°.
pub fn sweep_angles(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| 360.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Predicts `e` at `n` rotations. `truth` is forwarded to analytic
/// predictors and rotated with the embedding.
pub fn sweep(
    e: &FourierEmbedding,
    truth: Option<&ZernikeCoeffs>,
    predictor: &dyn Predictor,
    n: usize,
) -> Result<RotationSweep> {
    sweep_at(e, truth, predictor, &sweep_angles(n))
}

/// [`sweep`] at explicit angles (degrees).
pub fn sweep_at(
    e: &FourierEmbedding,
    truth: Option<&ZernikeCoeffs>,
    predictor: &dyn Predictor,
    angles_deg: &[f64],
) -> Result<RotationSweep> {
    let preds = angles_deg
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let q = Query {
                embedding: Some(e),
                truth,
                index: i as u64,
            };
            predictor
                .predict_rotated(&q, a.to_radians())
                .map_err(|err| Error::Predictor(format!("rotation {i} ({a}°): {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    RotationSweep::new(angles_deg.to_vec(), preds)
}

/// Agreement of one rotation group with the applied rotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinFit {
    /// Mean squared deviation (deg²) of the unwrapped twin angle from the
    /// best unit-slope line through the applied angles. `None` when the
    /// group is identically zero, or for `m = 0`.
    pub fit_mse: Option<f64>,
    /// Least-squares slope of twin angle against applied angle.
    pub slope: Option<f64>,
    /// Median twin magnitude `√(a₋² + a₊²)` (µm); `|a|` for `m = 0`.
    pub magnitude: f64,
    /// Standard deviation of the amplitude across the sweep (µm), `m = 0` only.
    pub amplitude_std: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Twin-angle regression for `group`.
pub fn twin_fit(s: &RotationSweep, group: &TwinGroup) -> TwinFit {
    let Some(sin_j) = group.sin_j else {
        let a: Vec<f64> = s.preds.iter().map(|p| p[group.cos_j]).collect();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        return TwinFit {
            fit_mse: None,
            slope: None,
            magnitude: median(a.iter().map(|v| v.abs()).collect()),
            amplitude_std: Some(std),
        };
    };
    let m = group.m_abs as f64;
    let mags: Vec<f64> = s.preds.iter().map(|p| p[sin_j].hypot(p[group.cos_j])).collect();
    let magnitude = median(mags.clone());
    if mags.iter().all(|&v| v == 0.0) {
        return TwinFit {
            fit_mse: None,
            slope: None,
            magnitude: 0.0,
            amplitude_std: None,
        };
    }
    let period = 360.0 / m;
    let mut psi: Vec<f64> = Vec::with_capacity(s.len());
    for p in &s.preds {
        let raw = p[sin_j].atan2(p[group.cos_j]).to_degrees() / m;
        let v = match psi.last() {
            Some(&prev) => raw + period * ((prev - raw) / period).round(),
            None => raw,
        };
        psi.push(v);
    }
    let x = &s.angles_deg;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = psi.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&psi).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = (sxx > 0.0).then(|| sxy / sxx);
    let offset = my - mx;
    let fit_mse = x.iter().zip(&psi).map(|(a, b)| (b - a - offset).powi(2)).sum::<f64>() / n;
    TwinFit {
        fit_mse: Some(fit_mse),
        slope,
        magnitude,
        amplitude_std: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Confident,
    ConfidentZero,
    NotConfident,
}

/// How the sweep is reduced to final coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Per-mode median of the back-rotated predictions.
    Median,
    /// The 0° prediction alone.
    ZeroDegree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceConfig {
    /// Twin-angle deviation threshold (deg²).
    pub mse_threshold: f64,
    /// Magnitude threshold (µm RMS).
    pub magnitude_threshold_um: f64,
    /// Largest amplitude standard deviation across the sweep for a
    /// rotation-invariant mode (µm).
    pub m0_tolerance_um: f64,
    pub rotations: usize,
    pub aggregate: Aggregate,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            mse_threshold: 700.0,
            magnitude_threshold_um: 0.05,
            m0_tolerance_um: 0.01,
            rotations: DEFAULT_ROTATIONS,
            aggregate: Aggregate::Median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConfidence {
    /// ANSI indices of the group.
    pub modes: Vec<usize>,
    pub n: u32,
    pub m: u32,
    pub status: Status,
    pub fit_mse: Option<f64>,
    pub slope: Option<f64>,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub groups: Vec<ModeConfidence>,
    /// Aggregated coefficients with not-confident groups zeroed.
    pub coeffs: ZernikeCoeffs,
    /// The raw 0° prediction.
    pub zero_degree: ZernikeCoeffs,
}

impl ConfidenceReport {
    /// True when no group carries a confident non-zero prediction.
    pub fn is_uninformative(&self) -> bool {
        self.groups.iter().all(|g| g.status != Status::Confident)
    }
}

fn status_of(fit: &TwinFit, cfg: &ConfidenceConfig) -> Status {
    let consistent = match (fit.fit_mse, fit.amplitude_std) {
        (Some(mse), _) => mse <= cfg.mse_threshold,
        (None, Some(std)) => std <= cfg.m0_tolerance_um,
        // Identically zero twins.
        (None, None) => false,
    };
    let small = fit.magnitude <= cfg.magnitude_threshold_um;
    if consistent {
        // A steady but small rotation-invariant amplitude carries no
        // rotation evidence either way.
        if fit.amplitude_std.is_some() && small {
            Status::ConfidentZero
        } else {
            Status::Confident
        }
    } else if !small {
        Status::NotConfident
    } else {
        Status::ConfidentZero
    }
}

/// Classifies every detectable group and aggregates the sweep.
pub fn classify(s: &RotationSweep, cfg: &ConfidenceConfig) -> Result<ConfidenceReport> {
    let s = RotationSweep::new(s.angles_deg.clone(), s.preds.clone())?;
    let back: Vec<ZernikeCoeffs> = s
        .angles_deg
        .iter()
        .zip(&s.preds)
        .map(|(a, p)| rotate_coeffs(p, -a.to_radians()))
        .collect();
    let zero_idx = s
        .angles_deg
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut coeffs = ZernikeCoeffs::zeros();
    for &j in &DETECTABLE_MODES {
        coeffs[j] = match cfg.aggregate {
            Aggregate::Median => median(back.iter().map(|p| p[j]).collect()),
            Aggregate::ZeroDegree => back[zero_idx][j],
        };
    }
    let mut groups = Vec::new();
    for g in detectable_groups() {
        let fit = twin_fit(&s, &g);
        let status = status_of(&fit, cfg);
        if status == Status::NotConfident {
            for j in g.modes() {
                coeffs[j] = 0.0;
            }
        }
        groups.push(ModeConfidence {
            modes: g.modes(),
            n: g.n,
            m: g.m_abs,
            status,
            fit_mse: fit.fit_mse,
            slope: fit.slope,
            magnitude: fit.magnitude,
        });
    }
    Ok(ConfidenceReport {
        groups,
        coeffs,
        zero_degree: s.preds[zero_idx],
    })
}

/// [`sweep`] followed by [`classify`].
pub fn assess(
    e: &FourierEmbedding,
    truth: Option<&ZernikeCoeffs>,
    predictor: &dyn Predictor,
    cfg: &ConfidenceConfig,
) -> Result<ConfidenceReport> {
    classify(&sweep(e, truth, predictor, cfg.rotations)?, cfg)
}
