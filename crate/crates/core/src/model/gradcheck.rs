//! Analytic gradients against central finite differences, in `f64`.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::params::ParamStore;
use super::transformer::{backward, forward, forward_train, loss_mse, loss_mse_grad};
use crate::error::Result;
use crate::rng::{self, purpose};

/// Finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Which parameters are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckScope {
    /// Every tensor of the model.
    Full,
    /// The dense head only; the loss is quadratic in these parameters.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst parameter.
    pub worst: String,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps parameters with a
/// vanishing gradient from dominating through rounding noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Compares backpropagated gradients of the MSE loss on a random batch
/// with central differences for at least `samples` parameters (at least
/// one from every tensor in scope). Dropout and stochastic depth are off.
/// The zero-initialized head is replaced by random weights first so that
/// every tensor receives gradient.
pub fn grad_check(cfg: &ModelConfig, seed: u64, samples: usize, scope: GradCheckScope) -> Result<GradCheckReport> {
    let mut p = ParamStore::<f64>::init(cfg, seed)?;
    let mut r = rng::stream(seed, purpose::GRAD_CHECK);
    for i in [p.idx.head_w, p.idx.head_b] {
        for v in p.tensors[i].data.iter_mut() {
            *v = 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    // Non-trivial norm parameters exercise the gain and bias gradients.
    for t in p.tensors.iter_mut().filter(|t| t.name.contains(".norm")) {
        for v in t.data.iter_mut() {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let batch = 2;
    let x = Array4::from_shape_simple_fn((batch, cfg.planes, cfg.d, cfg.d), || r.sample::<f64, _>(StandardNormal));
    let y = Array2::from_shape_simple_fn((batch, cfg.z_out), || 0.1 * r.sample::<f64, _>(StandardNormal));

    let (pred, cache) = forward_train(&p, &x, None)?;
    let grads = backward(&p, &cache, &loss_mse_grad(&pred, &y));

    let in_scope: Vec<usize> = match scope {
        GradCheckScope::Full => (0..p.tensors.len()).collect(),
        GradCheckScope::HeadOnly => vec![p.idx.head_w, p.idx.head_b],
    };
    let mut picks: Vec<(usize, usize)> = in_scope
        .iter()
        .map(|&t| (t, r.random_range(0..p.tensors[t].len())))
        .collect();
    let total: usize = in_scope.iter().map(|&t| p.tensors[t].len()).sum();
    while picks.len() < samples {
        let mut k = r.random_range(0..total);
        for &t in &in_scope {
            let n = p.tensors[t].len();
            if k < n {
                picks.push((t, k));
                break;
            }
            k -= n;
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: picks.len(),
    };
    for (t, k) in picks {
        let orig = p.tensors[t].data[k];
        p.tensors[t].data[k] = orig + GRAD_CHECK_STEP;
        let up = loss_mse(&forward(&p, &x)?, &y);
        p.tensors[t].data[k] = orig - GRAD_CHECK_STEP;
        let down = loss_mse(&forward(&p, &x)?, &y);
        p.tensors[t].data[k] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let e = rel_err(grads[t][k], numeric);
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = format!("{}[{k}]", p.tensors[t].name);
        }
    }
    Ok(report)
}
