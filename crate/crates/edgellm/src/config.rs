//! JSON model configuration files and the shipped presets.

use std::path::Path;

use anyhow::{Context, Result};
use edgellm_core::config::ModelConfig;
use edgellm_core::perf::HwConfig;
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 3] = [
    ("glm6b", include_str!("../../../presets/glm6b.json")),
    ("qwen7b", include_str!("../../../presets/qwen7b.json")),
    ("toy", include_str!("../../../presets/toy.json")),
];

/// A model description with optional hardware overrides. Omitted `hw`
/// fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hw: HwConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ConfigFile = serde_json::from_str(text)?;
        c.model.validate()?;
        c.hw.validate()?;
        Ok(c)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .with_context(|| format!("unknown preset {name:?}"))?;
        Self::parse(text)
    }

    /// Reads `arg` as a file path, falling back to a preset name when no
    /// such file exists and the argument has no extension.
    pub fn load(arg: &str) -> Result<Self> {
        let p = Path::new(arg);
        if !p.exists() && p.extension().is_none() && PRESETS.iter().any(|(n, _)| *n == arg) {
            return Self::preset(arg);
        }
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {arg}"))?;
        Self::parse(&text).with_context(|| format!("parsing config {arg}"))
    }
}
