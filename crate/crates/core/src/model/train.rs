//! Training loop: MSE loss, AdamW or LAMB, linear warmup then cosine decay.

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Optimizer, TrainConfig};
use super::params::ParamStore;
use super::transformer::{backward, forward_train, loss_mse, loss_mse_grad, stack_embeddings};
use crate::embedding::FourierEmbedding;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::scalar::Real;
use crate::zernike::ZernikeCoeffs;

/// Loss summary of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Sample-weighted mean training loss (µm²).
    pub loss: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

/// Embeddings stacked as `(n, ℓ, d, d)` with their `(n, 15)` targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Array4<T>,
    pub targets: Array2<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(embeddings: &[FourierEmbedding], truths: &[ZernikeCoeffs]) -> Result<Self> {
        if embeddings.len() != truths.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} targets",
                embeddings.len(),
                truths.len()
            )));
        }
        let refs: Vec<&FourierEmbedding> = embeddings.iter().collect();
        let inputs = stack_embeddings(&refs)?;
        let targets = Array2::from_shape_fn((truths.len(), truths.first().map_or(0, |t| t.amps.len())), |(i, j)| {
            T::of(truths[i].amps[j])
        });
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Array4<T>, Array2<T>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

/// Optimizer steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    let b = batch.min(n).max(1);
    n.div_ceil(b)
}

/// Learning rate used by optimizer step `step` (0-based): linear warmup
/// reaching the peak exactly on the last warmup step, then cosine decay to
/// `min_lr` at the end of the last epoch.
pub fn learning_rate(cfg: &TrainConfig, step: u64, steps_per_epoch: usize) -> f64 {
    let spe = steps_per_epoch.max(1) as f64;
    let warm = cfg.warmup_epochs as f64 * spe;
    let total = cfg.epochs as f64 * spe;
    let s = step as f64;
    if s < warm {
        return cfg.lr * (s + 1.0) / warm;
    }
    let span = (total - warm).max(1.0);
    let t = ((s - warm) / span).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Why [`train`] returned.
#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    /// Every configured epoch ran.
    Completed,
    MaxSteps,
    TargetLoss,
    /// A non-finite loss or gradient; parameters hold the last good state.
    Diverged { step: u64, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stop: StopReason,
    /// Steps taken by this call.
    pub steps: u64,
}

/// Narrows a moment to `T`, flushing values that would be subnormal.
fn store<T: Real>(x: f64) -> T {
    let y = T::of(x);
    if y.abs() < T::min_positive_value() {
        T::zero()
    } else {
        y
    }
}

/// One AdamW or LAMB update of every tensor.
fn apply_update<T: Real>(p: &mut ParamStore<T>, grads: &[Vec<T>], cfg: &TrainConfig, lr: f64) {
    p.opt.step += 1;
    let t = p.opt.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let decay = if p.tensors[i].is_matrix() { cfg.weight_decay } else { 0.0 };
        let m = &mut p.opt.m[i];
        let v = &mut p.opt.v[i];
        let w = &mut p.tensors[i].data;
        let mut u = vec![0.0f64; w.len()];
        for k in 0..w.len() {
            let gk = g[k].to_f64_lossy();
            let mk = b1 * m[k].to_f64_lossy() + (1.0 - b1) * gk;
            let vk = b2 * v[k].to_f64_lossy() + (1.0 - b2) * gk * gk;
            m[k] = store(mk);
            v[k] = store(vk);
            u[k] = (mk / c1) / ((vk / c2).sqrt() + cfg.eps) + decay * w[k].to_f64_lossy();
        }
        let ratio = match cfg.optimizer {
            Optimizer::AdamW => 1.0,
            Optimizer::Lamb => {
                let wn = w.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if wn > 0.0 && un > 0.0 {
                    wn / un
                } else {
                    1.0
                }
            }
        };
        let step = lr * ratio;
        for (wk, uk) in w.iter_mut().zip(&u) {
            *wk = T::of(wk.to_f64_lossy() - step * uk);
        }
    }
}

/// Trains `params` in place, continuing from its recorded position, so a
/// reloaded checkpoint resumes the exact run. The shuffle of epoch `e`
/// comes from `(seed, e)` and the dropout draws of step `s` from
/// `(seed, s)`. `on_epoch` runs after each completed epoch.
pub fn train<T: Real>(
    params: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&ParamStore<T>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = data.len();
    let batch = cfg.batch.min(n);
    let spe = steps_per_epoch(n, batch);
    params.train = Some(cfg.clone());
    let start = params.opt.step;
    let mut lr = 0.0;
    while (params.opt.epoch as usize) < cfg.epochs {
        let epoch = params.opt.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(rng::mix(&[cfg.seed, epoch]), purpose::SHUFFLE));
        let done_in_epoch = params.opt.step.saturating_sub(epoch * spe as u64) as usize;
        for chunk in order.chunks(batch).skip(done_in_epoch) {
            if cfg.max_steps > 0 && params.opt.step >= cfg.max_steps as u64 {
                return Ok(TrainReport {
                    stop: StopReason::MaxSteps,
                    steps: params.opt.step - start,
                });
            }
            let step = params.opt.step;
            let (x, y) = data.batch(chunk);
            let mut drop_rng = rng::stream(rng::mix(&[cfg.seed, step]), purpose::DROPOUT);
            let diverged = |detail: String| TrainReport {
                stop: StopReason::Diverged { step, detail },
                steps: step - start,
            };
            let (pred, cache) = match forward_train(params, &x, Some(&mut drop_rng)) {
                Ok(v) => v,
                Err(Error::Numeric { location, detail }) => return Ok(diverged(format!("{location}: {detail}"))),
                Err(e) => return Err(e),
            };
            let loss = loss_mse(&pred, &y);
            if !loss.is_finite() {
                return Ok(diverged(format!("loss is {loss}")));
            }
            let grads = backward(params, &cache, &loss_mse_grad(&pred, &y));
            if let Some(i) = grads.iter().position(|g| !g.iter().all(|v| v.is_finite())) {
                return Ok(diverged(format!("non-finite gradient in {}", params.tensors[i].name)));
            }
            lr = learning_rate(cfg, step, spe);
            apply_update(params, &grads, cfg, lr);
            params.opt.epoch_loss += loss * chunk.len() as f64;
            params.opt.epoch_seen += chunk.len() as u64;
        }
        let mean = params.opt.epoch_loss / params.opt.epoch_seen.max(1) as f64;
        params.history.push(EpochRecord {
            epoch,
            loss: mean,
            lr,
            steps: params.opt.step,
        });
        params.opt.epoch += 1;
        params.opt.epoch_loss = 0.0;
        params.opt.epoch_seen = 0;
        on_epoch(params)?;
        if cfg.target_loss > 0.0 && mean < cfg.target_loss {
            return Ok(TrainReport {
                stop: StopReason::TargetLoss,
                steps: params.opt.step - start,
            });
        }
    }
    Ok(TrainReport {
        stop: StopReason::Completed,
        steps: params.opt.step - start,
    })
}

/// Fresh parameters from `train_cfg.seed`, trained on `data`.
pub fn fit<T: Real>(
    data: &Dataset<T>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ParamStore<T>, TrainReport)> {
    let mut p = ParamStore::init(model_cfg, train_cfg.seed)?;
    let report = train(&mut p, data, train_cfg, |_| Ok(()))?;
    Ok((p, report))
}
