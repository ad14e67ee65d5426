//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zernike::N_MODES;

/// Length of the radial positional encoding for `m` harmonics.
pub const fn rpe_len(m: usize) -> usize {
    1 + 2 * m
}

/// One transformer stage. The token width equals the flattened patch,
/// `ε = p²`, so merged tokens tile the input planes exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width; `4 ε` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<usize>,
    /// Width of one attention head; `ε / heads` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Maximum stochastic-depth rate; rates grow linearly with depth.
    #[serde(default = "default_dropout")]
    pub stochastic_depth: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl StageConfig {
    pub fn new(patch: usize, layers: usize, heads: usize) -> Self {
        Self {
            patch,
            layers,
            heads,
            mlp: None,
            head_dim: None,
            dropout: 0.1,
            stochastic_depth: 0.1,
        }
    }

    pub fn embed(&self) -> usize {
        self.patch * self.patch
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp.unwrap_or(4 * self.embed())
    }

    pub fn head_width(&self) -> usize {
        self.head_dim.unwrap_or(self.embed() / self.heads.max(1))
    }

    /// Total width of the concatenated heads.
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    /// Embedding side length.
    pub d: usize,
    /// Number of embedding planes.
    pub planes: usize,
    pub z_out: usize,
    /// Harmonics in the radial positional encoding.
    pub rpe_m: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    fn two_stage(n: usize, h: usize) -> Self {
        let stage = |p| StageConfig {
            head_dim: Some(64),
            ..StageConfig::new(p, n, h)
        };
        Self {
            stages: vec![stage(32), stage(16)],
            d: 64,
            planes: 6,
            z_out: N_MODES,
            rpe_m: 16,
        }
    }

    /// Tiny variant: 3 + 3 layers, 6 heads of width 64.
    pub fn tiny() -> Self {
        Self::two_stage(3, 6)
    }

    /// Small variant: 4 + 4 layers, 8 heads of width 64.
    pub fn small() -> Self {
        Self::two_stage(4, 8)
    }

    /// Desk-scale configuration used by the overfit probe: one layer and
    /// two heads per stage, no dropout.
    pub fn probe() -> Self {
        let stage = |p| StageConfig {
            dropout: 0.0,
            stochastic_depth: 0.0,
            ..StageConfig::new(p, 1, 2)
        };
        Self {
            stages: vec![stage(32), stage(16)],
            d: 64,
            planes: 6,
            z_out: N_MODES,
            rpe_m: 16,
        }
    }

    /// Miniature configuration on 16 x 16 planes for gradient checks.
    pub fn grad_check() -> Self {
        let stage = |p| StageConfig {
            dropout: 0.0,
            stochastic_depth: 0.0,
            ..StageConfig::new(p, 1, 2)
        };
        Self {
            stages: vec![stage(8), stage(4)],
            d: 16,
            planes: 6,
            z_out: N_MODES,
            rpe_m: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("model needs at least one stage"));
        }
        if self.z_out != N_MODES {
            return Err(Error::invalid(format!("z_out must be {N_MODES}, got {}", self.z_out)));
        }
        if self.planes == 0 || self.d == 0 {
            return Err(Error::invalid("planes and d must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.patch == 0 || !self.d.is_multiple_of(s.patch) {
                return Err(Error::invalid(format!(
                    "stage {i}: d = {} is not divisible by patch {}",
                    self.d, s.patch
                )));
            }
            if s.heads == 0 {
                return Err(Error::invalid(format!("stage {i}: heads must be positive")));
            }
            if s.head_dim.is_none() && s.embed() % s.heads != 0 {
                return Err(Error::invalid(format!(
                    "stage {i}: embedding {} is not divisible by {} heads",
                    s.embed(),
                    s.heads
                )));
            }
            if s.head_width() == 0 || s.mlp_width() == 0 {
                return Err(Error::invalid(format!("stage {i}: zero-width layer")));
            }
            for (name, p) in [("dropout", s.dropout), ("stochastic_depth", s.stochastic_depth)] {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::invalid(format!("stage {i}: {name} must be in [0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Patches per plane for stage `s`.
    pub fn tiles(&self, s: usize) -> usize {
        let k = self.d / self.stages[s].patch;
        k * k
    }

    /// Tokens per sample for stage `s` (all planes attend jointly).
    pub fn tokens(&self, s: usize) -> usize {
        self.planes * self.tiles(s)
    }

    pub fn total_layers(&self) -> usize {
        self.stages.iter().map(|s| s.layers).sum()
    }

    /// Trainable parameter count, in closed form.
    pub fn param_count(&self) -> usize {
        let r = rpe_len(self.rpe_m);
        let mut total = 0;
        for s in &self.stages {
            let (e, a, x) = (s.embed(), s.attn_width(), s.mlp_width());
            let proj = (e + r) * e + e;
            let attn = 3 * (e * a + a) + a * e + e;
            let mlp = e * x + x + x * e + e;
            let norms = 4 * e;
            total += proj + s.layers * (attn + mlp + norms);
        }
        let last = self.stages.last().map_or(0, |s| s.embed());
        total + last * self.z_out + self.z_out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Adam with decoupled weight decay.
    AdamW,
    /// AdamW update rescaled per tensor by the trust ratio `|w| / |u|`.
    Lamb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Floor of the cosine decay.
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: Optimizer,
    /// Stop after this many optimizer steps (0 = run every epoch).
    pub max_steps: usize,
    /// Stop once the epoch mean loss is below this value (0 = never).
    pub target_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4096,
            epochs: 500,
            warmup_epochs: 25,
            lr: 1e-4,
            min_lr: 0.0,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-7,
            optimizer: Optimizer::Lamb,
            max_steps: 0,
            target_loss: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch and epochs must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warmup_epochs must not exceed epochs"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::invalid("min_lr must be in [0, lr]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}
