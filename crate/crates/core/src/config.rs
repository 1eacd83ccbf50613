//! JSON config files and the presets shipped with the crate.

use crate::al_loop::ExperimentConfig;
use crate::datagen::DatasetKind;
use crate::error::{config_err, Error, Result};
use crate::model::TrainConfig;
use crate::pretrain::Provenance;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub p_match_levels: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStage {
    /// The backbone as built, before any finetuning.
    Initial,
    /// The trunk after round-0 finetuning on the seed set.
    Finetuned,
}

impl ProbeStage {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeStage::Initial => "initial",
            ProbeStage::Finetuned => "finetuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub provenances: Vec<Provenance>,
    /// Each set of attributes defines one probe whose classes are its subgroups.
    pub attribute_sets: Vec<Vec<String>>,
    #[serde(default = "default_stages")]
    pub stages: Vec<ProbeStage>,
    #[serde(default = "default_probe_train")]
    pub train: TrainConfig,
}

fn default_stages() -> Vec<ProbeStage> {
    vec![ProbeStage::Initial]
}

pub fn default_probe_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        batch_size: 32,
        max_steps: 1000,
        ..TrainConfig::default()
    }
}

pub const PRESETS: [(&str, &str); 5] = [
    ("shapes_color_default", include_str!("../presets/shapes_color_default.json")),
    ("waterbirds_like", include_str!("../presets/waterbirds_like.json")),
    ("treeperson_like", include_str!("../presets/treeperson_like.json")),
    ("subgroups_like", include_str!("../presets/subgroups_like.json")),
    ("dose_response", include_str!("../presets/dose_response.json")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parses without validating; structural problems are config errors.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    serde_json::from_str(text).map_err(|e| config_err(format!("malformed config: {e}")))
}

pub fn preset(name: &str) -> Result<ConfigFile> {
    let text = preset_text(name).ok_or_else(|| config_err(format!("unknown preset '{name}'")))?;
    parse_config(text)
}

/// Reads `source` as a file path, falling back to a preset name when no
/// such file exists.
pub fn read_config(source: &str) -> Result<ConfigFile> {
    let path = Path::new(source);
    if !path.exists() {
        if let Some(text) = preset_text(source) {
            return parse_config(text);
        }
    }
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

impl ConfigFile {
    /// Every violation, each prefixed with the offending key.
    pub fn violations(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .experiment
            .violations()
            .into_iter()
            .map(|v| format!("experiment.{v}"))
            .collect();
        let domains = self.experiment.dataset.domains();
        if let Some(s) = &self.sweep {
            if s.p_match_levels.is_empty() {
                out.push("sweep.p_match_levels: must not be empty".into());
            }
            for l in &s.p_match_levels {
                if !(0.5..=1.0).contains(l) {
                    out.push(format!("sweep.p_match_levels: {l} is outside [0.5, 1.0]"));
                }
            }
            if s.seeds.is_empty() {
                out.push("sweep.seeds: must not be empty".into());
            }
            if self.experiment.dataset.kind != DatasetKind::Correlated {
                out.push(format!(
                    "sweep: p_match sweeps need dataset kind correlated, got {:?}",
                    self.experiment.dataset.kind
                ));
            }
        }
        if let Some(p) = &self.probe {
            if p.provenances.is_empty() {
                out.push("probe.provenances: must not be empty".into());
            }
            if p.stages.is_empty() {
                out.push("probe.stages: must not be empty".into());
            }
            if p.attribute_sets.is_empty() {
                out.push("probe.attribute_sets: must not be empty".into());
            }
            for set in &p.attribute_sets {
                if set.is_empty() {
                    out.push("probe.attribute_sets: sets must not be empty".into());
                }
                for a in set {
                    if !domains.contains_key(a) {
                        out.push(format!("probe.attribute_sets: unknown attribute '{a}'"));
                    }
                }
            }
            out.extend(p.train.violations("probe.train."));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
