//! Run manifests: everything needed to reproduce a CLI invocation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastkv::accounting::FilterLayerCount;
use fastkv::calibration::{seeded_prompt, CalibrationSet, DistanceTarget};
use fastkv::model::{read_header, ModelConfig, ModelWeights};
use fastkv::PolicyConfig;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Seeded { config: ModelConfig, seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSource {
    Synthetic { seed: u64, len: usize },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Overlap,
    Recall,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Task {
    Run {
        policy: PolicyConfig,
    },
    Calibrate {
        policy: PolicyConfig,
        calibration: PromptSetSource,
        l_max: usize,
        epsilon: f64,
    },
    Analyze {
        analysis: AnalysisKind,
        policy: PolicyConfig,
        top_k: usize,
        max_distance: usize,
        k_values: Vec<usize>,
        layers: Vec<usize>,
        prompt_set: PromptSetSource,
        metric: DistanceTarget,
    },
    Account {
        num_layers: usize,
        tsp_layer: usize,
        tsp_rate: f64,
        filter_layer: Option<usize>,
        selection_rate: Option<f64>,
        filter_convention: FilterLayerCount,
    },
}

/// Several prompts, either from a token file or generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSetSource {
    Synthetic { seed: u64, count: usize, len: usize },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub cache_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub report_version: u32,
    pub model: ModelSource,
    pub prompt: PromptSource,
    pub task: Task,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Reports embed their manifest; accept either.
        let manifest = value.get("manifest").cloned().unwrap_or(value);
        Ok(serde_json::from_value(manifest)?)
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(e, path))
}

pub fn io_error(e: std::io::Error, path: &Path) -> anyhow::Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        anyhow::Error::new(crate::UserError(format!(
            "file not found: {}",
            path.display()
        )))
    } else {
        anyhow::Error::new(e).context(format!("reading {}", path.display()))
    }
}

impl ModelSource {
    pub fn load(&self) -> Result<ModelWeights> {
        match self {
            ModelSource::Seeded { config, seed } => Ok(ModelWeights::init(*config, *seed)?),
            ModelSource::File { path } => {
                if !path.exists() {
                    return Err(io_error(std::io::ErrorKind::NotFound.into(), path));
                }
                let config = read_header(path)?;
                Ok(ModelWeights::load(path, &config)?)
            }
        }
    }
}

fn parse_tokens(line: &str) -> Result<Vec<u32>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .with_context(|| format!("bad token id {s:?}"))
        })
        .collect()
}

impl PromptSource {
    pub fn load(&self, vocab_size: usize) -> Result<Vec<u32>> {
        match self {
            PromptSource::Synthetic { seed, len } => Ok(seeded_prompt(*seed, *len, vocab_size)),
            PromptSource::File { path } => {
                let text = read_text(path)?;
                let tokens = parse_tokens(&text)?;
                if tokens.is_empty() {
                    bail!(crate::UserError(format!(
                        "{} holds no tokens",
                        path.display()
                    )));
                }
                Ok(tokens)
            }
        }
    }
}

impl PromptSetSource {
    pub fn load(&self, vocab_size: usize) -> Result<CalibrationSet> {
        match self {
            PromptSetSource::Synthetic { seed, count, len } => {
                Ok(CalibrationSet::synthetic(*seed, *count, *len, vocab_size))
            }
            PromptSetSource::File { path } => {
                let text = read_text(path)?;
                Ok(CalibrationSet::parse(&text, path.display().to_string())?)
            }
        }
    }
}
