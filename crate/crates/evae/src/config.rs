//! The hierarchical run configuration: one file covers every module, with
//! dotted-path overrides and a content digest embedded in all artifacts.

use crate::adversary::DiscriminatorConfig;
use crate::data_io::DatasetSpec;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::flowmath::{ScheduleConfig, ScheduleKind, TimeSamplerConfig, TimeSamplerKind};
use crate::objectives::LossWeights;
use crate::sampler::{GridKind, SamplerConfig};
use crate::trainer::{AblationStage, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Perceptual extractor selection by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// `random_pyramid` or `identity`.
    pub name: String,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            name: "random_pyramid".to_string(),
            seed: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation corpus size (synthetic source).
    pub count: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Seed of the metric feature extractor; independent of the perceptual
    /// extractor so the metric stays decoupled from the objective.
    pub metric_extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 128,
            seed: 7_001,
            batch_size: 16,
            metric_extractor_seed: 202,
        }
    }
}

/// Full configuration tree; every module section has defaults, so a config
/// file only states deviations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub time_sampler: TimeSamplerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub objectives: LossWeights,
    pub extractor: ExtractorConfig,
    pub sampler: SamplerConfig,
    pub trainer: TrainConfig,
    pub data: DatasetSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a TOML string, applies dotted-path overrides, resolves the
    /// ablation stage, and validates. Unknown keys anywhere are rejected.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Value = text
            .parse()
            .map_err(|e| Error::invalid_argument(format!("config parse error: {e}")))?;
        for (path, raw) in overrides {
            apply_override(&mut tree, path, raw)?;
        }
        let mut cfg: RunConfig = tree
            .try_into()
            .map_err(|e| Error::invalid_argument(format!("config error: {e}")))?;
        cfg.apply_stage();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    /// Rewrites schedule/time/weights/grid fields to the ablation stage's
    /// semantics. Values configured for terms a stage has not reached yet
    /// are forced off; later stages keep the configured values.
    pub fn apply_stage(&mut self) {
        let stage = self.trainer.ablation_stage;
        self.schedule.kind = if stage >= AblationStage::A {
            ScheduleKind::RectifiedFlow
        } else {
            ScheduleKind::DdpmLinear
        };
        self.time_sampler.kind = if stage >= AblationStage::B {
            TimeSamplerKind::LogitNormal
        } else {
            TimeSamplerKind::Uniform
        };
        if stage < AblationStage::D {
            self.objectives.lambda_lpips = 0.0;
        }
        if stage < AblationStage::E {
            self.objectives.lambda_adv = 0.0;
        }
        if stage < AblationStage::F {
            self.schedule.gamma = 1.0;
        }
        self.sampler.grid = if stage >= AblationStage::G {
            GridKind::RhoLog
        } else {
            GridKind::Uniform
        };
        self.sampler.gamma = self.schedule.gamma;
    }

    /// Whether the decoder uses the scale-shift (ADM) time conditioning.
    pub fn adm_unet(&self) -> bool {
        self.trainer.ablation_stage >= AblationStage::C
    }

    /// Whether the adversarial terms participate at all.
    pub fn adversarial_active(&self) -> bool {
        self.trainer.ablation_stage >= AblationStage::E && self.objectives.lambda_adv > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.time_sampler.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.discriminator.validate()?;
        self.objectives.validate()?;
        self.sampler.validate()?;
        self.trainer.validate()?;
        self.data.validate()?;
        self.sampler.check_against(&self.schedule)?;
        let (h, w) = self.data.resolution;
        let f = self.encoder.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid_argument(format!(
                "data resolution {h}x{w} not divisible by encoder factor {f}"
            )));
        }
        if !["random_pyramid", "identity"].contains(&self.extractor.name.as_str()) {
            return Err(Error::invalid_argument(format!(
                "unknown extractor {:?}",
                self.extractor.name
            )));
        }
        Ok(())
    }

    /// Content digest: SHA-256 of the canonical JSON form. Stable under TOML
    /// key reordering because it hashes the parsed tree.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(&h.finalize()[..16])
    }

    /// Flattens to sorted `(dotted.key, value)` pairs; drives `--help` and
    /// the golden-file test for it.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        flatten_value("", &json, &mut out);
        out.sort();
        out
    }
}

fn flatten_value(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_value(&key, val, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn apply_override(tree: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    // parse the raw value through TOML for typed booleans/numbers/arrays;
    // fall back to a bare string
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = tree;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid_argument(format!(
            "bad override path {path:?}"
        )));
    }
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::invalid_argument(format!("{path}: not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::invalid_argument(format!("{path}: not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
