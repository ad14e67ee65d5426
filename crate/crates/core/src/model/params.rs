//! Named parameter tensors, optimizer state and checkpoints.
//!
//! A checkpoint is one JSON header line followed by a blob of little-endian
//! `f32` values. The header carries the format version, both configs
//! verbatim, the training position, and an index of every tensor
//! (`name`, `dtype`, `shape`, byte `offset`). Optimizer moments are stored
//! as tensors named `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{rpe_len, ModelConfig, TrainConfig};
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};
use crate::scalar::Real;

pub const CHECKPOINT_FORMAT: &str = "aosense-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrices are decayed by the optimizer; vectors (biases, norms) are not.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Tensor indices of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageIdx {
    pub proj_w: usize,
    pub proj_b: usize,
    pub layers: Vec<LayerIdx>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIdx {
    pub stages: Vec<StageIdx>,
    pub head_w: usize,
    pub head_b: usize,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn dense(&mut self, prefix: &str, n_in: usize, n_out: usize) -> (usize, usize) {
        let w = self.push(
            format!("{prefix}.w"),
            vec![n_in, n_out],
            Init::Glorot {
                fan_in: n_in,
                fan_out: n_out,
            },
        );
        let b = self.push(format!("{prefix}.b"), vec![n_out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, n: usize) -> (usize, usize) {
        let g = self.push(format!("{prefix}.gamma"), vec![n], Init::Ones);
        let b = self.push(format!("{prefix}.beta"), vec![n], Init::Zeros);
        (g, b)
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, ModelIdx) {
    let mut b = Builder { specs: Vec::new() };
    let r = rpe_len(cfg.rpe_m);
    let mut stages = Vec::new();
    for (si, s) in cfg.stages.iter().enumerate() {
        let (e, a, x) = (s.embed(), s.attn_width(), s.mlp_width());
        let (proj_w, proj_b) = b.dense(&format!("stage{si}.patch"), e + r, e);
        let mut layers = Vec::new();
        for li in 0..s.layers {
            let p = format!("stage{si}.layer{li}");
            let (wq, bq) = b.dense(&format!("{p}.attn.q"), e, a);
            let (wk, bk) = b.dense(&format!("{p}.attn.k"), e, a);
            let (wv, bv) = b.dense(&format!("{p}.attn.v"), e, a);
            let (wo, bo) = b.dense(&format!("{p}.attn.out"), a, e);
            let (ln1_g, ln1_b) = b.norm(&format!("{p}.norm1"), e);
            let (w1, b1) = b.dense(&format!("{p}.mlp.fc1"), e, x);
            let (w2, b2) = b.dense(&format!("{p}.mlp.fc2"), x, e);
            let (ln2_g, ln2_b) = b.norm(&format!("{p}.norm2"), e);
            layers.push(LayerIdx {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        stages.push(StageIdx {
            proj_w,
            proj_b,
            layers,
        });
    }
    let last = cfg.stages.last().map_or(0, |s| s.embed());
    let head_w = b.push("head.w".into(), vec![last, cfg.z_out], Init::Zeros);
    let head_b = b.push("head.b".into(), vec![cfg.z_out], Init::Zeros);
    (
        b.specs,
        ModelIdx {
            stages,
            head_w,
            head_b,
        },
    )
}

/// Adam moments and the position in the training run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Sample-weighted loss sum and sample count of the unfinished epoch.
    pub epoch_loss: f64,
    pub epoch_seen: u64,
}

/// Model parameters plus everything needed to resume training. Random
/// streams are derived from `(train.seed, epoch)` and `(train.seed, step)`,
/// so the optimizer position doubles as the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub cfg: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
    pub idx: ModelIdx,
    pub opt: OptimizerState<T>,
    pub train: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

impl<T: Real> ParamStore<T> {
    /// Glorot-uniform weights from the `(seed, INIT)` stream, zero biases,
    /// unit norm gains and a zero head (the initial prediction is the zero
    /// wavefront).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, idx) = layout(cfg);
        let mut r = rng::stream(seed, purpose::INIT);
        let tensors: Vec<Tensor<T>> = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Glorot { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| T::of(r.random_range(-limit..limit))).collect()
                    }
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self::assemble(cfg.clone(), tensors, idx))
    }

    fn assemble(cfg: ModelConfig, tensors: Vec<Tensor<T>>, idx: ModelIdx) -> Self {
        let zeros: Vec<Vec<T>> = tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            cfg,
            idx,
            opt: OptimizerState {
                step: 0,
                epoch: 0,
                m: zeros.clone(),
                v: zeros,
                epoch_loss: 0.0,
                epoch_seen: 0,
            },
            tensors,
            train: None,
            history: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Zero-filled buffers shaped like the parameters.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    /// Same parameters in another precision (optimizer state reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Tensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            })
            .collect();
        ParamStore::assemble(self.cfg.clone(), tensors, self.idx.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    model_cfg: ModelConfig,
    train_cfg: Option<TrainConfig>,
    step: u64,
    epoch: u64,
    epoch_loss: f64,
    epoch_seen: u64,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl ParamStore<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::with_capacity(self.len() * 12);
        let groups: [(&str, Vec<&Vec<f32>>); 3] = [
            ("", self.tensors.iter().map(|t| &t.data).collect()),
            (M_PREFIX, self.opt.m.iter().collect()),
            (V_PREFIX, self.opt.v.iter().collect()),
        ];
        for (prefix, datas) in groups {
            for (t, data) in self.tensors.iter().zip(datas) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", t.name),
                    dtype: "f32le".into(),
                    shape: t.shape.clone(),
                    offset: blob.len(),
                });
                for v in data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_cfg: self.cfg.clone(),
            train_cfg: self.train.clone(),
            step: self.opt.step,
            epoch: self.opt.epoch,
            epoch_loss: self.opt.epoch_loss,
            epoch_seen: self.opt.epoch_seen,
            history: self.history.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let blob = &bytes[nl + 1..];
        let mut store = ParamStore::<f32>::init_shapes(&header.model_cfg)?;
        let read = |entry: &TensorEntry, shape: &[usize]| -> Result<Vec<f32>> {
            if entry.dtype != "f32le" {
                return Err(Error::Format(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.shape != shape {
                return Err(Error::shape(format!(
                    "{}: checkpoint shape {:?}, model expects {:?}",
                    entry.name, entry.shape, shape
                )));
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > blob.len() {
                return Err(Error::Format(format!("{}: payload truncated", entry.name)));
            }
            Ok(blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let n = store.tensors.len();
        if header.tensors.len() != 3 * n {
            return Err(Error::shape(format!(
                "checkpoint holds {} tensors, model expects {}",
                header.tensors.len(),
                3 * n
            )));
        }
        for i in 0..n {
            let shape = store.tensors[i].shape.clone();
            let name = store.tensors[i].name.clone();
            for (k, prefix) in ["", M_PREFIX, V_PREFIX].iter().enumerate() {
                let entry = &header.tensors[k * n + i];
                if entry.name != format!("{prefix}{name}") {
                    return Err(Error::shape(format!(
                        "checkpoint tensor {:?} where the model expects {prefix}{name:?}",
                        entry.name
                    )));
                }
                let data = read(entry, &shape)?;
                match k {
                    0 => store.tensors[i].data = data,
                    1 => store.opt.m[i] = data,
                    _ => store.opt.v[i] = data,
                }
            }
        }
        store.opt.step = header.step;
        store.opt.epoch = header.epoch;
        store.opt.epoch_loss = header.epoch_loss;
        store.opt.epoch_seen = header.epoch_seen;
        store.train = header.train_cfg;
        store.history = header.history;
        Ok(store)
    }

    fn init_shapes(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (specs, idx) = layout(cfg);
        let tensors = specs
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                Tensor {
                    name,
                    shape,
                    data: vec![0.0; n],
                }
            })
            .collect();
        Ok(Self::assemble(cfg.clone(), tensors, idx))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks that it was built for `cfg`.
    pub fn load_for(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let p = Self::load(path)?;
        if &p.cfg != cfg {
            return Err(Error::shape(format!(
                "checkpoint model config {:?} does not match {:?}",
                p.cfg, cfg
            )));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_the_closed_form_count() {
        for cfg in [ModelConfig::probe(), ModelConfig::grad_check(), ModelConfig::tiny()] {
            let (specs, _) = layout(&cfg);
            let n: usize = specs.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
            assert_eq!(n, cfg.param_count());
            let mut names: Vec<_> = specs.iter().map(|(n, _, _)| n.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), specs.len());
        }
    }

    #[test]
    fn init_is_seeded_and_head_is_zero() {
        let cfg = ModelConfig::grad_check();
        let a = ParamStore::<f32>::init(&cfg, 1).unwrap();
        let b = ParamStore::<f32>::init(&cfg, 1).unwrap();
        let c = ParamStore::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
        assert!(a.get("head.w").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(a.get("stage0.layer0.norm1.gamma").unwrap().data.iter().all(|&v| v == 1.0));
        let w = a.get("stage0.layer0.mlp.fc1.w").unwrap();
        let limit = (6.0f64 / (w.shape[0] + w.shape[1]) as f64).sqrt() as f32;
        assert!(w.data.iter().all(|v| v.abs() <= limit));
        assert!(a.is_finite());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = ParamStore::<f32>::init(&ModelConfig::grad_check(), 3).unwrap();
        let bytes = p.to_bytes().unwrap();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(ParamStore::from_bytes(b"{}").is_err());
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
            .replace("\"version\":1", "\"version\":99");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap()..]);
        assert!(matches!(ParamStore::from_bytes(&bumped), Err(Error::Format(_))));
    }
}
