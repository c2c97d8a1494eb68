//! Token saliency from observation-window attention, and top-k selection
//! with forced window inclusion.
//!
//! A head's saliency for key position `i` is the attention mass `i` receives
//! from all window queries of that head, followed by a 1-D pooling pass.
//! Group and layer saliency average the pooled head vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::AttentionScores;
use crate::model::ModelConfig;

/// Default pooling kernel.
pub const DEFAULT_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Max,
    /// Mean over the in-range part of the kernel; ablation only.
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Head,
    KvGroup,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyVector {
    pub scores: Vec<f32>,
    pub granularity: Granularity,
    pub layer_index: usize,
    pub head_or_group_index: Option<usize>,
}

impl SaliencyVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidKernel(kernel));
    }
    Ok(())
}

/// Same-length 1-D pooling; edge positions pool over the in-range part only.
pub fn pool1d(x: &[f32], kernel: usize, mode: PoolingMode) -> Vec<f32> {
    let half = kernel / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let span = &x[lo..=hi];
            match mode {
                PoolingMode::Max => span.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                PoolingMode::Avg => span.iter().sum::<f32>() / span.len() as f32,
            }
        })
        .collect()
}

/// Attention mass each key position receives from the window queries of `head`.
pub fn window_mass(att: &AttentionScores, head: usize) -> Vec<f32> {
    let mut mass = vec![0.0f32; att.context_len];
    for q in 0..att.window_queries {
        for (m, &s) in mass.iter_mut().zip(att.row(head, q)) {
            *m += s;
        }
    }
    mass
}

pub fn head_saliency(att: &AttentionScores, head: usize, kernel: usize) -> Result<SaliencyVector> {
    head_saliency_with(att, head, kernel, PoolingMode::Max)
}

pub fn head_saliency_with(
    att: &AttentionScores,
    head: usize,
    kernel: usize,
    mode: PoolingMode,
) -> Result<SaliencyVector> {
    check_kernel(kernel)?;
    if head >= att.num_heads {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            bound: att.num_heads,
        });
    }
    Ok(SaliencyVector {
        scores: pool1d(&window_mass(att, head), kernel, mode),
        granularity: Granularity::Head,
        layer_index: att.layer,
        head_or_group_index: Some(head),
    })
}

fn mean_of_heads(
    att: &AttentionScores,
    heads: std::ops::Range<usize>,
    kernel: usize,
    mode: PoolingMode,
) -> Result<Vec<f32>> {
    let count = heads.len() as f32;
    let mut acc = vec![0.0f32; att.context_len];
    for h in heads {
        let s = head_saliency_with(att, h, kernel, mode)?;
        for (a, v) in acc.iter_mut().zip(&s.scores) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= count;
    }
    Ok(acc)
}

pub fn group_saliency(
    att: &AttentionScores,
    group: usize,
    kernel: usize,
    config: &ModelConfig,
) -> Result<SaliencyVector> {
    group_saliency_with(att, group, kernel, config, PoolingMode::Max)
}

/// Mean pooled head saliency over the query heads sharing KV group `group`.
pub fn group_saliency_with(
    att: &AttentionScores,
    group: usize,
    kernel: usize,
    config: &ModelConfig,
    mode: PoolingMode,
) -> Result<SaliencyVector> {
    if group >= config.num_kv_heads {
        return Err(Error::IndexOutOfRange {
            what: "kv group",
            index: group,
            bound: config.num_kv_heads,
        });
    }
    let gs = config.group_size();
    Ok(SaliencyVector {
        scores: mean_of_heads(att, group * gs..(group + 1) * gs, kernel, mode)?,
        granularity: Granularity::KvGroup,
        layer_index: att.layer,
        head_or_group_index: Some(group),
    })
}

pub fn layer_saliency(att: &AttentionScores, kernel: usize) -> Result<SaliencyVector> {
    layer_saliency_with(att, kernel, PoolingMode::Max)
}

/// Mean pooled head saliency over every head of the layer.
pub fn layer_saliency_with(
    att: &AttentionScores,
    kernel: usize,
    mode: PoolingMode,
) -> Result<SaliencyVector> {
    Ok(SaliencyVector {
        scores: mean_of_heads(att, 0..att.num_heads, kernel, mode)?,
        granularity: Granularity::Layer,
        layer_index: att.layer,
        head_or_group_index: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Strictly increasing.
    pub selected_indices: Vec<usize>,
    pub window_indices: Vec<usize>,
    /// Requested number of non-window picks.
    pub budget: usize,
    /// A score tie straddled the cut and was settled by index.
    pub tie_break_applied: bool,
    /// The budget exceeded the number of non-window candidates.
    pub clamped: bool,
}

/// Picks the `budget` highest-scoring positions outside the trailing window
/// (lower index wins ties) and merges the window positions in.
pub fn select_top(scores: &[f32], budget: usize, window_size: usize) -> SelectionResult {
    let n = scores.len();
    let window = window_size.min(n);
    let first_window = n - window;
    let window_indices: Vec<usize> = (first_window..n).collect();
    let clamped = budget > first_window;
    let take = budget.min(first_window);

    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut candidates: Vec<usize> = (0..first_window).collect();
    let mut tie_break_applied = false;
    if take < first_window {
        if take > 0 {
            candidates.select_nth_unstable_by(take - 1, by_rank);
            let cut = scores[candidates[take - 1]];
            tie_break_applied = candidates[take..].iter().any(|&i| scores[i] == cut);
        }
        candidates.truncate(take);
    }
    candidates.sort_unstable();
    candidates.extend_from_slice(&window_indices);

    SelectionResult {
        selected_indices: candidates,
        window_indices,
        budget,
        tie_break_applied,
        clamped,
    }
}

/// Total keep count for a rate: round-half-up of `context × rate`, floored at
/// the window and capped at the context.
pub fn retention_count(context_len: usize, rate: f64, window_size: usize) -> usize {
    let raw = (context_len as f64 * rate + 0.5).floor() as usize;
    raw.max(window_size.min(context_len)).min(context_len)
}
