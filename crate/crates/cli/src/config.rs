//! The run config: one TOML file with a master seed, the four training
//! sections, artifact paths and analysis settings.
//!
//! Section seeds are never read from the file; every one is derived from
//! the master `seed`.

use std::path::{Path, PathBuf};

use condense::contrastive::ContrastiveConfig;
use condense::data::DataConfig;
use condense::model::ModelConfig;
use condense::pipeline::ExperimentConfig;
use condense::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "out/dataset.jsonl".into(),
            checkpoints: "out/checkpoints".into(),
            logs: "out/logs".into(),
            reports: "out/reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Compression-token counts swept by `analyze --kind ablate-k`.
    pub k_values: Vec<usize>,
    /// Payloads averaged by the similarity and PCA analyses.
    pub samples: usize,
    /// Dataset record used by the loss-distribution analysis.
    pub record: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k_values: vec![8, 16, 32, 64],
            samples: 100,
            record: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub contrastive: ContrastiveConfig,
    pub paths: Paths,
    pub analysis: AnalysisConfig,
}

/// Keys that would shadow the master seed.
const SECTION_SEEDS: [(&str, &str); 4] = [
    ("model", "init_seed"),
    ("data", "seed"),
    ("pretrain", "seed"),
    ("contrastive", "seed"),
];

impl RunConfig {
    /// Parses TOML. Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        for (section, key) in SECTION_SEEDS {
            if table.get(section).and_then(|s| s.get(key)).is_some() {
                return Err(CliError::Config(format!(
                    "{section}.{key}: section seeds are derived from the top-level `seed`; remove this key"
                )));
            }
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            CliError::Config(if path == "." { msg } else { format!("{path}: {msg}") })
        })?;
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoints, &mut cfg.paths.logs, &mut cfg.paths.reports] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Training sections with every seed derived from the master seed.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            model: self.model.clone(),
            data: self.data.clone(),
            pretrain: self.pretrain.clone(),
            contrastive: self.contrastive.clone(),
        }
        .with_seed(self.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate()?;
        if self.analysis.k_values.is_empty() || self.analysis.k_values.contains(&0) {
            return Err(CliError::Config("analysis.k_values: need at least one positive K".into()));
        }
        if self.analysis.samples < 3 {
            return Err(CliError::Config("analysis.samples: need at least 3 payloads".into()));
        }
        for (name, p) in [
            ("paths.dataset", &self.paths.dataset),
            ("paths.checkpoints", &self.paths.checkpoints),
            ("paths.logs", &self.paths.logs),
            ("paths.reports", &self.paths.reports),
        ] {
            check_path(name, p, name != "paths.dataset")?;
        }
        Ok(())
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.paths.checkpoints.join("pretrain.ckpt")
    }

    pub fn contrast_checkpoint(&self) -> PathBuf {
        self.paths.checkpoints.join("contrast.ckpt")
    }
}

/// A path is resolvable when it is either an existing entry of the right
/// kind, or its nearest existing ancestor is a directory.
fn check_path(name: &str, p: &Path, want_dir: bool) -> Result<(), CliError> {
    if p.as_os_str().is_empty() {
        return Err(CliError::Config(format!("{name}: empty path")));
    }
    if p.exists() {
        if p.is_dir() != want_dir {
            let kind = if want_dir { "a directory" } else { "a file" };
            return Err(CliError::Config(format!("{name}: {} exists but is not {kind}", p.display())));
        }
        return Ok(());
    }
    let mut anc = p.parent();
    while let Some(a) = anc {
        if a.as_os_str().is_empty() || a.is_dir() {
            return Ok(());
        }
        if a.exists() {
            return Err(CliError::Config(format!("{name}: ancestor {} is not a directory", a.display())));
        }
        anc = a.parent();
    }
    Ok(())
}
