//! TSP-layer calibration.
//!
//! For each candidate layer, TSP is applied at that layer (KV retention 1 so
//! only propagation matters) and the last token's final-layer hidden state is
//! compared with the full-context one. The earliest layer whose mean
//! normalized distance is within `(1 + epsilon)` of the best candidate wins.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::full_prefill_with_window;
use crate::model::ModelWeights;
use crate::prefill::{fastkv_prefill, PolicyConfig, PolicyKind};

pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub prompts: Vec<Vec<u32>>,
    pub description: String,
}

impl CalibrationSet {
    /// `count` uniformly random prompts of `len` tokens.
    pub fn synthetic(seed: u64, count: usize, len: usize, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..count)
            .map(|_| synthetic_prompt(&mut rng, len, vocab_size))
            .collect();
        Self {
            prompts,
            description: format!("synthetic seed={seed} count={count} len={len}"),
        }
    }

    /// One prompt per non-empty line; token ids separated by whitespace or commas.
    pub fn parse(text: &str, description: impl Into<String>) -> Result<Self> {
        let mut prompts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let prompt = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| Error::Parse(format!("line {}: bad token id {s:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            prompts.push(prompt);
        }
        Ok(Self {
            prompts,
            description: description.into(),
        })
    }

    pub fn from_token_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn validate(&self, window_size: usize) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::EmptyCalibrationSet);
        }
        if let Some(short) = self.prompts.iter().find(|p| p.len() < window_size) {
            return Err(Error::ContextShorterThanWindow {
                context: short.len(),
                window: window_size,
            });
        }
        Ok(())
    }
}

/// A single uniformly random prompt from a seed.
pub fn seeded_prompt(seed: u64, len: usize, vocab_size: usize) -> Vec<u32> {
    synthetic_prompt(&mut ChaCha8Rng::seed_from_u64(seed), len, vocab_size)
}

pub fn synthetic_prompt(rng: &mut impl Rng, len: usize, vocab_size: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab_size as u32))
        .collect()
}

/// Squared L2 distance and the same divided by the baseline's squared norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub squared_l2: f64,
    pub normalized: f64,
}

impl Distance {
    pub fn between(baseline: &[f32], other: &[f32]) -> Self {
        let mut sq = 0.0f64;
        let mut norm = 0.0f64;
        for (&a, &b) in baseline.iter().zip(other) {
            let diff = a as f64 - b as f64;
            sq += diff * diff;
            norm += a as f64 * a as f64;
        }
        Self {
            squared_l2: sq,
            normalized: if norm > 0.0 { sq / norm } else { sq },
        }
    }
}

/// Which output of the last token is compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceTarget {
    #[default]
    FinalHidden,
    Logits,
}

fn tsp_policy(base: &PolicyConfig, layer: usize) -> PolicyConfig {
    PolicyConfig {
        policy_kind: PolicyKind::FastKv,
        tsp_layer: layer,
        kv_retention_rate: 1.0,
        ..*base
    }
}

/// Distance between full-context and TSP-at-`candidate_layer` final hidden
/// states of the last token. `policy` supplies rate, window and kernel.
pub fn final_hidden_distance(
    weights: &ModelWeights,
    prompt: &[u32],
    candidate_layer: usize,
    policy: &PolicyConfig,
) -> Result<Distance> {
    let full = full_prefill_with_window(weights, prompt, policy.window_size)?;
    let tsp = fastkv_prefill(weights, prompt, &tsp_policy(policy, candidate_layer))?;
    Ok(Distance::between(full.final_hidden(), &tsp.final_hidden))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub epsilon: f64,
    pub min_mean_distance: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Mean normalized distance per candidate layer `0..=l_max`.
    pub mean_distances: Vec<f64>,
    /// Mean unnormalized squared distance per candidate layer.
    pub mean_squared_distances: Vec<f64>,
    pub chosen_layer: usize,
    /// Plain argmin (earliest on ties).
    pub argmin_layer: usize,
    pub l_max: usize,
    pub threshold_rule: ThresholdRule,
}

/// `floor(0.75 × num_layers)`, capped at the last layer.
pub fn default_l_max(num_layers: usize) -> usize {
    (num_layers * 3 / 4).min(num_layers - 1)
}

pub fn select_tsp_layer(
    weights: &ModelWeights,
    calib: &CalibrationSet,
    l_max: usize,
    tsp_rate: f64,
) -> Result<CalibrationResult> {
    let policy = PolicyConfig {
        tsp_rate,
        ..PolicyConfig::default()
    };
    select_tsp_layer_with(weights, calib, l_max, &policy, DEFAULT_EPSILON)
}

pub fn select_tsp_layer_with(
    weights: &ModelWeights,
    calib: &CalibrationSet,
    l_max: usize,
    policy: &PolicyConfig,
    epsilon: f64,
) -> Result<CalibrationResult> {
    let num_layers = weights.config.num_layers;
    if l_max >= num_layers {
        return Err(Error::IndexOutOfRange {
            what: "l_max",
            index: l_max,
            bound: num_layers,
        });
    }
    calib.validate(policy.window_size)?;
    tsp_policy(policy, 0).validate(&weights.config)?;

    // prompt -> candidate -> distance
    let per_prompt: Vec<Vec<Distance>> = calib
        .prompts
        .par_iter()
        .map(|prompt| {
            let full = full_prefill_with_window(weights, prompt, policy.window_size)?;
            (0..=l_max)
                .map(|layer| {
                    let tsp = fastkv_prefill(weights, prompt, &tsp_policy(policy, layer))?;
                    Ok(Distance::between(full.final_hidden(), &tsp.final_hidden))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let n = per_prompt.len() as f64;
    let mean = |f: fn(&Distance) -> f64| -> Vec<f64> {
        (0..=l_max)
            .map(|layer| per_prompt.iter().map(|d| f(&d[layer])).sum::<f64>() / n)
            .collect()
    };
    let mean_distances = mean(|d| d.normalized);
    let mean_squared_distances = mean(|d| d.squared_l2);
    Ok(choose_layer(
        mean_distances,
        mean_squared_distances,
        l_max,
        epsilon,
    ))
}

/// Applies the tolerance rule to precomputed mean distances.
pub fn choose_layer(
    mean_distances: Vec<f64>,
    mean_squared_distances: Vec<f64>,
    l_max: usize,
    epsilon: f64,
) -> CalibrationResult {
    let min = mean_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = min * (1.0 + epsilon);
    let argmin_layer = mean_distances.iter().position(|&d| d == min).unwrap_or(0);
    let chosen_layer = mean_distances
        .iter()
        .position(|&d| d <= threshold)
        .unwrap_or(argmin_layer);
    CalibrationResult {
        mean_distances,
        mean_squared_distances,
        chosen_layer,
        argmin_layer,
        l_max,
        threshold_rule: ThresholdRule {
            epsilon,
            min_mean_distance: min,
            threshold,
        },
    }
}
