//! Pipeline configuration: a TOML file with one section per module, plus
//! dotted `key=value` command-line overrides that win over the file.

use serde::{Deserialize, Serialize};

use crate::alignment::RlConfig;
use crate::error::{Error, Result};
use crate::generator::ModelConfig;
use crate::sim::WorldConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InferenceConfig {
    pub beam_width: usize,
    pub top_k: usize,
    /// Cap on evaluation queries drawn from the test day.
    pub eval_queries: usize,
    pub bench_queries: usize,
    pub bench_widths: Vec<usize>,
    /// k values for the reward-by-top-k table.
    pub reward_ks: Vec<usize>,
    /// k values for HR@k / MRR@k.
    pub hr_ks: Vec<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            beam_width: 256,
            top_k: 128,
            eval_queries: 1000,
            bench_queries: 200,
            bench_widths: vec![16],
            reward_ks: vec![16, 64, 128],
            hr_ks: vec![64, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineConfig {
    /// Mandatory; feeds every stochastic component.
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub generator: ModelConfig,
    #[serde(default)]
    pub alignment: RlConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig {
            seed,
            world: WorldConfig::default(),
            tokenizer: TokenizerConfig::default(),
            generator: ModelConfig::default(),
            alignment: RlConfig::default(),
            inference: InferenceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.tokenizer.validate()?;
        self.generator.validate()?;
        self.alignment.reward.validate()?;
        if self.generator.ia_dim != self.tokenizer.dim {
            return Err(Error::Config(format!(
                "generator.ia_dim ({}) must equal tokenizer.dim ({})",
                self.generator.ia_dim, self.tokenizer.dim
            )));
        }
        for (l, &n) in self.tokenizer.level_sizes.iter().enumerate() {
            if self.generator.vocab[l] != n {
                return Err(Error::Config(format!(
                    "generator.vocab[{l}] ({}) must equal tokenizer.level_sizes[{l}] ({n})",
                    self.generator.vocab[l]
                )));
            }
        }
        if self.alignment.group_size > self.alignment.beam_width {
            return Err(Error::Config(
                "alignment.group_size cannot exceed alignment.beam_width".into(),
            ));
        }
        if self.inference.top_k > self.inference.beam_width {
            return Err(Error::Config(
                "inference.top_k cannot exceed inference.beam_width".into(),
            ));
        }
        Ok(())
    }

    /// Stable hash of the full configuration.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::formats::sha256_hex(json.as_bytes())
    }

    /// Parse TOML text and apply dotted-key overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::parse("config", e))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e| Error::parse("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply `section.key=value`; the value parses with TOML typing rules
/// (falling back to a plain string).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = parse_toml_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}' crosses a non-table")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed value"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
