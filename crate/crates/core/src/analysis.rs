//! Diagnostic measurements: cross-layer critical-token overlap, top-K
//! attention recall, and the TSP-vs-restart distance sweep.
//!
//! Overlap and recall use raw head-averaged window attention mass (no
//! pooling).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{Distance, DistanceTarget};
use crate::error::{Error, Result};
use crate::forward::{full_prefill_with_window, AttentionScores, DEFAULT_WINDOW};
use crate::model::ModelWeights;
use crate::prefill::{run_policy, PolicyConfig, PolicyKind, PrefillReport};
use crate::saliency::{layer_saliency, select_top};

pub const OVERLAP_SCHEMA: &str = "fastkv.overlap.v1";
pub const RECALL_SCHEMA: &str = "fastkv.recall.v1";
pub const SWEEP_SCHEMA: &str = "fastkv.sweep.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCurve {
    pub base_layer: usize,
    pub distances: Vec<usize>,
    pub overlap_ratio: Vec<f64>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub layer: usize,
    pub k_values: Vec<usize>,
    pub recall: Vec<f64>,
}

/// Head-averaged attention mass each token receives from the window queries.
pub fn attention_mass(att: &AttentionScores) -> Vec<f32> {
    layer_saliency(att, 1).expect("kernel 1 is valid").scores
}

fn per_layer_mass(weights: &ModelWeights, prompt: &[u32], window: usize) -> Result<Vec<Vec<f32>>> {
    let full = full_prefill_with_window(weights, prompt, window)?;
    Ok(full
        .layers
        .iter()
        .map(|l| attention_mass(&l.attention))
        .collect())
}

/// Top-`k` token indices of every layer, sorted.
pub fn critical_sets(
    weights: &ModelWeights,
    prompt: &[u32],
    top_k: usize,
) -> Result<Vec<Vec<usize>>> {
    if top_k > prompt.len() {
        return Err(Error::IndexOutOfRange {
            what: "top_k",
            index: top_k,
            bound: prompt.len() + 1,
        });
    }
    Ok(per_layer_mass(weights, prompt, DEFAULT_WINDOW)?
        .iter()
        .map(|m| select_top(m, top_k, 0).selected_indices)
        .collect())
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Overlap of layer `b` with layers `b + d`, `d = 0..=max_distance`, for each
/// base layer `b`.
pub fn overlap_from_sets(
    sets: &[Vec<usize>],
    top_k: usize,
    max_distance: usize,
) -> Vec<OverlapCurve> {
    let layers = sets.len();
    (0..layers)
        .map(|base| {
            let distances: Vec<usize> = (0..=max_distance)
                .take_while(|d| base + d < layers)
                .collect();
            let overlap_ratio = distances
                .iter()
                .map(|&d| {
                    if top_k == 0 {
                        1.0
                    } else {
                        sorted_intersection(&sets[base], &sets[base + d]) as f64 / top_k as f64
                    }
                })
                .collect();
            OverlapCurve {
                base_layer: base,
                distances,
                overlap_ratio,
                top_k,
            }
        })
        .collect()
}

pub fn critical_token_overlap(
    weights: &ModelWeights,
    prompt: &[u32],
    top_k: usize,
    max_distance: usize,
) -> Result<Vec<OverlapCurve>> {
    let sets = critical_sets(weights, prompt, top_k)?;
    Ok(overlap_from_sets(&sets, top_k, max_distance))
}

/// Overlap averaged over base layers, per distance.
pub fn mean_overlap_by_distance(curves: &[OverlapCurve]) -> Vec<(usize, f64)> {
    let max_d = curves
        .iter()
        .flat_map(|c| c.distances.iter())
        .copied()
        .max()
        .unwrap_or(0);
    (0..=max_d)
        .filter_map(|d| {
            let vals: Vec<f64> = curves
                .iter()
                .filter_map(|c| {
                    c.distances
                        .iter()
                        .position(|&x| x == d)
                        .map(|i| c.overlap_ratio[i])
                })
                .collect();
            (!vals.is_empty()).then(|| (d, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// Fraction of total mass held by the `k` largest entries, for each `k`.
pub fn recall_curve(mass: &[f32], k_values: &[usize]) -> Vec<f64> {
    let mut sorted: Vec<f64> = mass.iter().map(|&m| m as f64).collect();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        prefix.push(acc);
    }
    let total = acc;
    k_values
        .iter()
        .map(|&k| {
            if total > 0.0 {
                prefix[k.min(sorted.len())] / total
            } else {
                1.0
            }
        })
        .collect()
}

pub fn topk_attention_recall(
    weights: &ModelWeights,
    prompt: &[u32],
    k_values: &[usize],
) -> Result<Vec<RecallCurve>> {
    if let Some(&k) = k_values.iter().find(|&&k| k > prompt.len()) {
        return Err(Error::IndexOutOfRange {
            what: "k",
            index: k,
            bound: prompt.len() + 1,
        });
    }
    Ok(per_layer_mass(weights, prompt, DEFAULT_WINDOW)?
        .iter()
        .enumerate()
        .map(|(layer, m)| RecallCurve {
            layer,
            k_values: k_values.to_vec(),
            recall: recall_curve(m, k_values),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub layers: Vec<usize>,
    pub fastkv_distance: Vec<f64>,
    pub gemfilter_distance: Vec<f64>,
    pub tsp_rate: f64,
    pub target: DistanceTarget,
}

fn pick(report: &PrefillReport, target: DistanceTarget) -> &[f32] {
    match target {
        DistanceTarget::FinalHidden => &report.final_hidden,
        DistanceTarget::Logits => &report.final_logits,
    }
}

/// Mean normalized distance to full context for TSP and for
/// filter-and-restart at each selection layer, with matched budgets.
pub fn tsp_layer_sweep(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    layers: &[usize],
    tsp_rate: f64,
    target: DistanceTarget,
) -> Result<SweepResult> {
    let base = PolicyConfig {
        tsp_rate,
        ..PolicyConfig::default()
    };
    tsp_layer_sweep_with(weights, prompts, layers, &base, target)
}

pub fn tsp_layer_sweep_with(
    weights: &ModelWeights,
    prompts: &[Vec<u32>],
    layers: &[usize],
    base: &PolicyConfig,
    target: DistanceTarget,
) -> Result<SweepResult> {
    if prompts.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= weights.config.num_layers) {
        return Err(Error::IndexOutOfRange {
            what: "sweep layer",
            index: bad,
            bound: weights.config.num_layers,
        });
    }
    // prompt -> layer -> (fastkv, gemfilter)
    let per_prompt: Vec<Vec<(f64, f64)>> = prompts
        .par_iter()
        .map(|prompt| {
            let full = run_policy(
                weights,
                prompt,
                &PolicyConfig::lossless(PolicyKind::Full, 0),
            )?;
            let reference = pick(&full, target);
            layers
                .iter()
                .map(|&layer| {
                    let fast = run_policy(
                        weights,
                        prompt,
                        &PolicyConfig {
                            policy_kind: PolicyKind::FastKv,
                            tsp_layer: layer,
                            kv_retention_rate: 1.0,
                            ..*base
                        },
                    )?;
                    let gem = run_policy(
                        weights,
                        prompt,
                        &PolicyConfig {
                            policy_kind: PolicyKind::GemFilter,
                            tsp_layer: layer,
                            kv_retention_rate: 1.0,
                            ..*base
                        },
                    )?;
                    Ok((
                        Distance::between(reference, pick(&fast, target)).normalized,
                        Distance::between(reference, pick(&gem, target)).normalized,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let n = per_prompt.len() as f64;
    let mean = |f: fn(&(f64, f64)) -> f64| -> Vec<f64> {
        (0..layers.len())
            .map(|i| per_prompt.iter().map(|p| f(&p[i])).sum::<f64>() / n)
            .collect()
    };
    Ok(SweepResult {
        layers: layers.to_vec(),
        fastkv_distance: mean(|p| p.0),
        gemfilter_distance: mean(|p| p.1),
        tsp_rate: base.tsp_rate,
        target,
    })
}

fn schema_line(out: &mut impl Write, schema: &str) -> Result<()> {
    writeln!(out, "# schema: {schema}")?;
    Ok(())
}

/// `layer,distance,overlap_ratio` rows, one per base layer and distance.
pub fn write_overlap_csv(mut out: impl Write, curves: &[OverlapCurve]) -> Result<()> {
    schema_line(&mut out, OVERLAP_SCHEMA)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "distance", "overlap_ratio"])?;
    for c in curves {
        for (d, r) in c.distances.iter().zip(&c.overlap_ratio) {
            w.write_record([c.base_layer.to_string(), d.to_string(), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,k,recall` rows.
pub fn write_recall_csv(mut out: impl Write, curves: &[RecallCurve]) -> Result<()> {
    schema_line(&mut out, RECALL_SCHEMA)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "k", "recall"])?;
    for c in curves {
        for (k, r) in c.k_values.iter().zip(&c.recall) {
            w.write_record([c.layer.to_string(), k.to_string(), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,fastkv_distance,gemfilter_distance` rows.
pub fn write_sweep_csv(mut out: impl Write, sweep: &SweepResult) -> Result<()> {
    schema_line(&mut out, SWEEP_SCHEMA)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "fastkv_distance", "gemfilter_distance"])?;
    for ((l, f), g) in sweep
        .layers
        .iter()
        .zip(&sweep.fastkv_distance)
        .zip(&sweep.gemfilter_distance)
    {
        w.write_record([l.to_string(), f.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
