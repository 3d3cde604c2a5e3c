//! Layered run configuration: built-in presets, then a TOML file, then flags.

use std::path::Path;

use mks2::model::ModelConfig;
use mks2::training::{AblationConfig, StagePlan};
use mks2::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub world_seed: u64,
    pub n_entities: usize,
    pub n_pairs: usize,
    pub n_text: usize,
    pub n_mm: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            world_seed: 0,
            n_entities: 128,
            n_pairs: 4096,
            n_text: 2048,
            n_mm: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub vmn: StagePlan,
    pub ablation: AblationConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage1: StagePlan::stage1(),
            stage2: StagePlan::stage2(),
            vmn: StagePlan::vmn_finetune(),
            ablation: AblationConfig::full(),
        }
    }
}

const SECTIONS: [&str; 6] = ["data", "model", "stage1", "stage2", "vmn", "ablation"];

/// `base` with the keys present in `patch` replaced.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializes")).expect("round-trips"));
    };
    let patch = patch
        .as_table()
        .ok_or_else(|| Error::Config(format!("[{section}] must be a table")))?;
    let mut merged = toml::Value::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let table = merged.as_table_mut().expect("structs serialize to tables");
    for (k, v) in patch {
        table.insert(k.clone(), v.clone());
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[{section}]: {}", e.message())))
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(k) = doc.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown section [{k}]")));
        }
        let d = Self::default();
        let cfg = Self {
            data: overlay(&d.data, doc.get("data"), "data")?,
            model: overlay(&d.model, doc.get("model"), "model")?,
            stage1: overlay(&d.stage1, doc.get("stage1"), "stage1")?,
            stage2: overlay(&d.stage2, doc.get("stage2"), "stage2")?,
            vmn: overlay(&d.vmn, doc.get("vmn"), "vmn")?,
            ablation: overlay(&d.ablation, doc.get("ablation"), "ablation")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        use mks2::model::Stage;
        for (name, plan, stage) in [
            ("stage1", &self.stage1, Stage::Stage1),
            ("stage2", &self.stage2, Stage::Stage2),
            ("vmn", &self.vmn, Stage::VmnFinetune),
        ] {
            if plan.stage != stage {
                return Err(Error::Config(format!("[{name}] has stage {:?}", plan.stage)));
            }
        }
        self.model.validate()
    }

    /// One seed for the world, the initialization and every data order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.world_seed = seed;
        self.model.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.vmn.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
