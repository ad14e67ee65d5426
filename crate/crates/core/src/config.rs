//! Experiment configuration: one JSON document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceConfig;
use crate::corrloop::{DeconvConfig, EvalConfig};
use crate::embedding::{Embedder, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::optics::{LightSheetKind, Microscope, OpticsConfig};
use crate::synth::SynthConfig;

/// Every section is optional in the file and falls back to its defaults.
/// The top-level `optics` and `light_sheet` apply to every stage; the
/// copies inside `synth` and `eval.synth` must be left unset or agree.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub optics: OpticsConfig,
    pub light_sheet: LightSheetKind,
    pub synth: SynthConfig,
    pub embedding: EmbeddingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub confidence: ConfidenceConfig,
    pub deconv: DeconvConfig,
}

impl ExperimentConfig {
    /// Parses JSON text and propagates the shared optics.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.resolved()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copies the shared optics into the nested synth sections and
    /// validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        let base = SynthConfig::default();
        for (name, s) in [("synth", &mut self.synth), ("eval.synth", &mut self.eval.synth)] {
            for (what, differs) in [
                ("optics", s.optics != base.optics && s.optics != self.optics),
                ("light_sheet", s.light_sheet != base.light_sheet && s.light_sheet != self.light_sheet),
            ] {
                if differs {
                    return Err(Error::invalid(format!(
                        "{name}.{what} disagrees with the top-level {what}; set it at the top level only"
                    )));
                }
            }
            s.optics = self.optics.clone();
            s.light_sheet = self.light_sheet;
        }
        self.optics.validate()?;
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.d != self.optics.shape[1] || self.optics.shape[1] != self.optics.shape[2] {
            return Err(Error::invalid(format!(
                "model.d = {} must equal the lateral optics grid {:?}",
                self.model.d, self.optics.shape
            )));
        }
        Ok(self)
    }

    pub fn microscope(&self) -> Result<Microscope> {
        Microscope::new(&self.optics, self.light_sheet)
    }

    pub fn embedder(&self) -> Result<Embedder> {
        Embedder::new(&self.optics, self.light_sheet, &self.embedding)
    }
}
