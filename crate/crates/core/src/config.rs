//! Experiment configuration: every hyperparameter plus the ablation toggles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{GsError, Result};
use crate::geometry::{Category, DefectRanges};
use crate::losses::LossConfig;
use crate::projection::ProjectionConfig;
use crate::prompts::PromptConfig;
use crate::scoring::ScoringConfig;

/// Which visual stream feeds scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Render,
    Depth,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub stream: Stream,
    /// Fuse the two streams with the refinement module; with `stream = both`
    /// and no SRM the two streams are averaged.
    pub use_srm: bool,
    pub use_shape_prompt: bool,
    pub use_defect_prompt: bool,
    pub use_con_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { stream: Stream::Both, use_srm: true, use_shape_prompt: true, use_defect_prompt: true, use_con_loss: true }
    }
}

impl Ablation {
    pub fn uses_depth(&self) -> bool {
        self.stream != Stream::Render
    }

    pub fn uses_srm(&self) -> bool {
        self.stream == Stream::Both && self.use_srm
    }

    /// Short label such as `srm+sp+dp+con` or `render`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match (self.stream, self.use_srm) {
            (Stream::Render, _) => parts.push("render"),
            (Stream::Depth, _) => parts.push("depth"),
            (Stream::Both, true) => parts.push("srm"),
            (Stream::Both, false) => parts.push("mean"),
        }
        if self.use_shape_prompt {
            parts.push("sp");
        }
        if self.use_defect_prompt {
            parts.push("dp");
        }
        if self.use_con_loss {
            parts.push("con");
        }
        parts.join("+")
    }

    /// The seven rows of the module ablation, in table order.
    pub fn grid() -> Vec<Ablation> {
        let row = |stream, srm, sp, dp, con| Ablation {
            stream,
            use_srm: srm,
            use_shape_prompt: sp,
            use_defect_prompt: dp,
            use_con_loss: con,
        };
        vec![
            row(Stream::Render, false, false, false, false),
            row(Stream::Depth, false, false, false, false),
            row(Stream::Both, true, false, false, false),
            row(Stream::Both, true, true, false, false),
            row(Stream::Both, true, false, true, false),
            row(Stream::Both, true, true, true, false),
            row(Stream::Both, true, true, true, true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_categories: Vec<Category>,
    pub test_categories: Vec<Category>,
    /// Objects per training category.
    pub per_category: usize,
    /// Objects per held-out category.
    pub test_per_category: usize,
    pub anomaly_ratio: f64,
    pub points: usize,
    /// Fraction of each training category held in for validation logging.
    pub val_fraction: f64,
    pub defects: DefectRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_categories: vec![Category::Sphere, Category::Cylinder, Category::Torus],
            test_categories: vec![Category::RoundedPrism],
            per_category: 12,
            test_per_category: 24,
            anomaly_ratio: 0.5,
            points: 1024,
            val_fraction: 0.1,
            defects: DefectRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub prompts: PromptConfig,
    pub lora: LoraConfig,
    pub projection: ProjectionConfig,
    pub scoring: ScoringConfig,
    pub loss: LossConfig,
    pub stage1: StageHyper,
    pub stage2: StageHyper,
    pub ablation: Ablation,
    pub fpr_limit: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            prompts: PromptConfig::default(),
            lora: LoraConfig::default(),
            projection: ProjectionConfig::default(),
            scoring: ScoringConfig::default(),
            loss: LossConfig::default(),
            stage1: StageHyper { epochs: 15, learning_rate: 0.002, batch_size: 4 },
            stage2: StageHyper { epochs: 10, learning_rate: 0.0005, batch_size: 4 },
            ablation: Ablation::default(),
            fpr_limit: 0.3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed; larger seeds could not be saved as TOML.
        if self.seed > i64::MAX as u64 {
            return Err(GsError::config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.encoder.validate()?;
        self.projection.validate()?;
        if self.projection.height != self.encoder.image || self.projection.width != self.encoder.image {
            return Err(GsError::config("projection resolution must equal the vision encoder's image size"));
        }
        if self.data.train_categories.is_empty() {
            return Err(GsError::config("no training categories"));
        }
        if !(0.0..=1.0).contains(&self.data.anomaly_ratio) || !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(GsError::config("anomaly ratio must lie in [0, 1] and validation fraction in [0, 1)"));
        }
        self.data.defects.validate()?;
        if self.prompts.top_k == 0 || self.prompts.learnable_tokens == 0 {
            return Err(GsError::config("prompt token counts must be positive"));
        }
        let len = self.ablation.use_shape_prompt as usize + self.prompts.learnable_tokens + self.prompts.top_k;
        if len > self.encoder.context {
            return Err(GsError::config(format!("prompt length {len} exceeds the text context {}", self.encoder.context)));
        }
        for s in [&self.stage1, &self.stage2] {
            if s.batch_size == 0 || !(s.learning_rate > 0.0) {
                return Err(GsError::config("batch size and learning rate must be positive"));
            }
        }
        if !(self.scoring.temperature > 0.0) || !(self.scoring.sigma >= 0.0) {
            return Err(GsError::config("temperature must be positive and sigma non-negative"));
        }
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(GsError::config("FPR limit must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GsError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GsError::config(format!("bad TOML config: {e}")))
    }

    /// Loads JSON or TOML by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text)?,
            _ => Self::from_json(&text).map_err(|e| GsError::config(format!("bad JSON config: {e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => self.to_toml()?,
            _ => self.to_json()?,
        };
        std::fs::write(path, text)?;
        Ok(())
    }
}
