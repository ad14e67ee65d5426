//! Predictors map a Fourier embedding to Zernike coefficients.
//!
//! Besides the trained model, the analytic predictors used to exercise the
//! confidence test and the correction loop live here. They read the hidden
//! ground truth carried by a [`Query`] instead of the embedding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{rotate_embedding, FourierEmbedding};
use crate::error::{Error, Result};
use crate::model::{predict_one, ParamStore};
use crate::rng::{self, purpose};
use crate::zernike::{rotate_coeffs, ZernikeCoeffs, DETECTABLE_MODES};

/// One prediction request.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    /// `None` when the predictor declared it does not read embeddings.
    pub embedding: Option<&'a FourierEmbedding>,
    /// Hidden ground truth, for analytic predictors only.
    pub truth: Option<&'a ZernikeCoeffs>,
    /// Position of the request in its sweep or loop; seeds noisy predictors.
    pub index: u64,
}

pub trait Predictor: Sync {
    fn predict(&self, q: &Query) -> Result<ZernikeCoeffs>;

    /// Whether [`Query::embedding`] is read. Callers may skip simulation
    /// and embedding when it is not.
    fn needs_embedding(&self) -> bool {
        true
    }

    /// Prediction for the embedding rotated by `theta` (radians). The
    /// embedding and the hidden truth are rotated together.
    fn predict_rotated(&self, q: &Query, theta: f64) -> Result<ZernikeCoeffs> {
        let rotated = match (self.needs_embedding(), q.embedding) {
            (true, Some(e)) => Some(rotate_embedding(e, theta)),
            _ => None,
        };
        let truth = q.truth.map(|t| rotate_coeffs(t, theta));
        self.predict(&Query {
            embedding: rotated.as_ref(),
            truth: truth.as_ref(),
            index: q.index,
        })
    }
}

fn truth_of(q: &Query) -> Result<ZernikeCoeffs> {
    q.truth
        .copied()
        .ok_or_else(|| Error::Predictor("analytic predictor needs the ground truth".into()))
}

/// Returns the ground truth exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, q: &Query) -> Result<ZernikeCoeffs> {
        truth_of(q)
    }

    fn needs_embedding(&self) -> bool {
        false
    }
}

/// Ground truth plus an error of norm exactly `q · ‖truth‖` in a random
/// direction over the detectable modes.
#[derive(Clone, Copy, Debug)]
pub struct NoisyOracle {
    pub q: f64,
    pub seed: u64,
}

impl Predictor for NoisyOracle {
    fn predict(&self, q: &Query) -> Result<ZernikeCoeffs> {
        let truth = truth_of(q)?;
        let dir = random_direction(rng::mix(&[self.seed, q.index]));
        Ok(truth + dir.scale(self.q * truth.norm()))
    }

    fn needs_embedding(&self) -> bool {
        false
    }
}

/// Ignores its input and returns a fresh random vector of norm `magnitude`
/// over the detectable modes for every request.
#[derive(Clone, Copy, Debug)]
pub struct NoisePredictor {
    pub magnitude: f64,
    pub seed: u64,
}

impl Predictor for NoisePredictor {
    fn predict(&self, q: &Query) -> Result<ZernikeCoeffs> {
        Ok(random_direction(rng::mix(&[self.seed, q.index])).scale(self.magnitude))
    }

    fn needs_embedding(&self) -> bool {
        false
    }
}

/// Always predicts the zero wavefront.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict(&self, _: &Query) -> Result<ZernikeCoeffs> {
        Ok(ZernikeCoeffs::zeros())
    }

    fn needs_embedding(&self) -> bool {
        false
    }
}

/// Unit vector, isotropic over the detectable modes.
fn random_direction(seed: u64) -> ZernikeCoeffs {
    let mut r = rng::stream(seed, purpose::NOISE);
    let mut c = ZernikeCoeffs::zeros();
    for &j in &DETECTABLE_MODES {
        c[j] = r.sample(StandardNormal);
    }
    let n = c.norm();
    if n > 0.0 {
        c.scale(1.0 / n)
    } else {
        c
    }
}

/// The trained transformer.
pub struct ModelPredictor<'a> {
    pub params: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, q: &Query) -> Result<ZernikeCoeffs> {
        let e = q
            .embedding
            .ok_or_else(|| Error::Predictor("model predictor needs an embedding".into()))?;
        predict_one(self.params, e)
    }
}
