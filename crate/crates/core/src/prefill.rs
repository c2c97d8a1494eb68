//! Prefill policies.
//!
//! `fastkv_prefill` runs the first `tsp_layer + 1` layers on the full prompt,
//! propagates only the salient tokens (plus the observation window) from the
//! TSP layer onwards, and compresses every layer's KV cache at its own
//! retention rate. The other policies are simplified baselines sharing the
//! same forward pass and saliency scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    embed, full_prefill_with_window, layer_forward, logits_from_hidden, LayerOutput, DEFAULT_WINDOW,
};
use crate::kv_cache::{check_rate, kv_compress_with, KvCache, LayerCache};
use crate::model::{Matrix, ModelConfig, ModelWeights};
use crate::saliency::{
    layer_saliency_with, retention_count, select_top, PoolingMode, DEFAULT_KERNEL,
};

/// Attention-sink tokens kept by the StreamingLLM baseline.
pub const SINK_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    FastKv,
    Full,
    SnapKv,
    StreamingLlm,
    GemFilter,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::FastKv,
        PolicyKind::Full,
        PolicyKind::SnapKv,
        PolicyKind::StreamingLlm,
        PolicyKind::GemFilter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FastKv => "fastkv",
            PolicyKind::Full => "full",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::StreamingLlm => "streamingllm",
            PolicyKind::GemFilter => "gemfilter",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown policy kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub policy_kind: PolicyKind,
    /// TSP layer for fastkv, filter layer for gemfilter.
    pub tsp_layer: usize,
    /// Fraction of prompt tokens propagated past the TSP layer (or kept by
    /// the gemfilter restart).
    pub tsp_rate: f64,
    pub kv_retention_rate: f64,
    pub window_size: usize,
    pub pooling_kernel: usize,
    #[serde(default)]
    pub pooling: PoolingMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy_kind: PolicyKind::FastKv,
            tsp_layer: 0,
            tsp_rate: 0.2,
            kv_retention_rate: 0.1,
            window_size: DEFAULT_WINDOW,
            pooling_kernel: DEFAULT_KERNEL,
            pooling: PoolingMode::Max,
        }
    }
}

impl PolicyConfig {
    /// Keeps nothing out: both rates at 1.
    pub fn lossless(policy_kind: PolicyKind, tsp_layer: usize) -> Self {
        Self {
            policy_kind,
            tsp_layer,
            tsp_rate: 1.0,
            kv_retention_rate: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_rate("tsp_rate", self.tsp_rate)?;
        check_rate("kv_retention_rate", self.kv_retention_rate)?;
        if self.tsp_layer >= config.num_layers {
            return Err(Error::IndexOutOfRange {
                what: "tsp layer",
                index: self.tsp_layer,
                bound: config.num_layers,
            });
        }
        if self.window_size == 0 {
            return Err(Error::InvalidConfig("window_size must be >= 1".into()));
        }
        if self.pooling_kernel == 0 || self.pooling_kernel % 2 == 0 {
            return Err(Error::InvalidKernel(self.pooling_kernel));
        }
        Ok(())
    }

    /// Sets one field from a flat `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad value {v:?} for {key}")))
        }
        match key {
            "policy" | "policy_kind" => self.policy_kind = value.parse()?,
            "tsp_layer" => self.tsp_layer = num(key, value)?,
            "tsp_rate" => self.tsp_rate = num(key, value)?,
            "kv_retention_rate" => self.kv_retention_rate = num(key, value)?,
            "window_size" => self.window_size = num(key, value)?,
            "pooling_kernel" => self.pooling_kernel = num(key, value)?,
            "pooling" => {
                self.pooling = match value {
                    "max" => PoolingMode::Max,
                    "avg" => PoolingMode::Avg,
                    _ => return Err(Error::Parse(format!("unknown pooling {value:?}"))),
                }
            }
            _ => return Err(Error::Parse(format!("unknown policy key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the flat config format: `key = value` lines, `#` comments.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "policy = {}\ntsp_layer = {}\ntsp_rate = {}\nkv_retention_rate = {}\nwindow_size = {}\npooling_kernel = {}\npooling = {}\n",
            self.policy_kind,
            self.tsp_layer,
            self.tsp_rate,
            self.kv_retention_rate,
            self.window_size,
            self.pooling_kernel,
            match self.pooling {
                PoolingMode::Max => "max",
                PoolingMode::Avg => "avg",
            }
        )
    }
}

/// Splits flat `key = value` text into pairs, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PrefillReport {
    pub policy: PolicyConfig,
    pub kv_cache: KvCache,
    pub final_logits: Vec<f32>,
    /// Last-token row of the final layer's output (pre final norm).
    pub final_hidden: Vec<f32>,
    /// Original positions that reached the last layer.
    pub propagated_positions: Vec<usize>,
    /// Tokens each layer processed in the pass that produced the cache.
    pub per_layer_context_len: Vec<usize>,
    /// Layers run on the full prompt in a discarded selection pass
    /// (gemfilter only).
    pub selection_pass_layers: usize,
    pub prompt_len: usize,
    /// Position id for the first decoded token.
    pub next_position: usize,
}

/// Hidden states surviving token-selective propagation.
#[derive(Debug, Clone)]
pub struct HiddenCompressed {
    pub hidden: Matrix,
    /// Original positions of the kept rows, increasing.
    pub positions: Vec<usize>,
    /// Context indices of the kept rows within the layer output.
    pub indices: Vec<usize>,
}

pub fn hidden_compress(
    out: &LayerOutput,
    tsp_rate: f64,
    kernel: usize,
    window_size: usize,
) -> Result<HiddenCompressed> {
    hidden_compress_with(out, tsp_rate, kernel, window_size, PoolingMode::Max)
}

/// Keeps the rows of the top `round(context × tsp_rate)` tokens by layer
/// saliency, window rows always included, original order and positions kept.
pub fn hidden_compress_with(
    out: &LayerOutput,
    tsp_rate: f64,
    kernel: usize,
    window_size: usize,
    mode: PoolingMode,
) -> Result<HiddenCompressed> {
    check_rate("tsp_rate", tsp_rate)?;
    let ctx = out.context_len();
    if ctx < window_size {
        return Err(Error::ContextShorterThanWindow {
            context: ctx,
            window: window_size,
        });
    }
    let keep = retention_count(ctx, tsp_rate, window_size);
    let saliency = layer_saliency_with(&out.attention, kernel, mode)?;
    let indices = select_top(&saliency.scores, keep - window_size, window_size).selected_indices;
    Ok(HiddenCompressed {
        hidden: out.hidden.gather_rows(&indices),
        positions: indices.iter().map(|&i| out.position_ids[i]).collect(),
        indices,
    })
}

fn last_row(m: &Matrix) -> Vec<f32> {
    m.row(m.rows - 1).to_vec()
}

pub fn fastkv_prefill(
    weights: &ModelWeights,
    token_ids: &[u32],
    policy: &PolicyConfig,
) -> Result<PrefillReport> {
    if policy.policy_kind != PolicyKind::FastKv {
        return Err(Error::InvalidConfig(format!(
            "fastkv_prefill called with policy {}",
            policy.policy_kind
        )));
    }
    policy.validate(&weights.config)?;
    let cfg = &weights.config;
    let mut x = embed(weights, token_ids)?;
    let mut positions: Vec<usize> = (0..token_ids.len()).collect();
    let mut cache = KvCache::new(token_ids.len(), cfg.head_dim);
    let mut per_layer_context_len = Vec::with_capacity(cfg.num_layers);

    for l in 0..cfg.num_layers {
        let out = layer_forward(weights, l, &x, &positions, policy.window_size)?;
        per_layer_context_len.push(out.context_len());
        cache.push_layer(compress_layer(&out, policy, cfg)?);
        if l == policy.tsp_layer {
            let reduced = hidden_compress_with(
                &out,
                policy.tsp_rate,
                policy.pooling_kernel,
                policy.window_size,
                policy.pooling,
            )?;
            x = reduced.hidden;
            positions = reduced.positions;
        } else {
            x = out.hidden;
        }
    }

    let final_hidden = last_row(&x);
    Ok(PrefillReport {
        policy: *policy,
        kv_cache: cache,
        final_logits: logits_from_hidden(weights, &final_hidden),
        final_hidden,
        propagated_positions: positions,
        per_layer_context_len,
        selection_pass_layers: 0,
        prompt_len: token_ids.len(),
        next_position: token_ids.len(),
    })
}

fn compress_layer(
    out: &LayerOutput,
    policy: &PolicyConfig,
    cfg: &ModelConfig,
) -> Result<LayerCache> {
    if policy.kv_retention_rate >= 1.0 {
        return Ok(LayerCache::full(out));
    }
    kv_compress_with(
        out,
        policy.kv_retention_rate,
        policy.pooling_kernel,
        policy.window_size,
        cfg,
        policy.pooling,
    )
}

/// Sink-plus-recent indices for the StreamingLLM baseline.
pub fn streaming_indices(context_len: usize, keep: usize) -> Vec<usize> {
    let keep = keep.min(context_len);
    let sinks = SINK_TOKENS.min(keep);
    let recent = keep - sinks;
    let mut idx: Vec<usize> = (0..sinks).collect();
    idx.extend(context_len - recent..context_len);
    idx.dedup();
    idx
}

/// Dispatches on `policy.policy_kind`.
pub fn run_policy(
    weights: &ModelWeights,
    token_ids: &[u32],
    policy: &PolicyConfig,
) -> Result<PrefillReport> {
    policy.validate(&weights.config)?;
    let cfg = &weights.config;
    let n = token_ids.len();
    match policy.policy_kind {
        PolicyKind::FastKv => fastkv_prefill(weights, token_ids, policy),
        PolicyKind::Full | PolicyKind::SnapKv | PolicyKind::StreamingLlm => {
            let full = full_prefill_with_window(weights, token_ids, policy.window_size)?;
            let mut cache = KvCache::new(n, cfg.head_dim);
            for out in &full.layers {
                let layer = match policy.policy_kind {
                    PolicyKind::Full => LayerCache::full(out),
                    PolicyKind::SnapKv => compress_layer(out, policy, cfg)?,
                    _ => {
                        let keep = retention_count(n, policy.kv_retention_rate, policy.window_size);
                        let idx = streaming_indices(n, keep.max(policy.window_size.min(n)));
                        LayerCache::from_indices(out, &vec![idx; cfg.num_kv_heads])
                    }
                };
                cache.push_layer(layer);
            }
            Ok(PrefillReport {
                policy: *policy,
                kv_cache: cache,
                final_hidden: full.final_hidden().to_vec(),
                final_logits: full.logits,
                propagated_positions: (0..n).collect(),
                per_layer_context_len: vec![n; cfg.num_layers],
                selection_pass_layers: 0,
                prompt_len: n,
                next_position: n,
            })
        }
        PolicyKind::GemFilter => gemfilter_prefill(weights, token_ids, policy),
    }
}

/// Token indices chosen at the filter layer by a full-context pass.
pub fn gemfilter_select(
    weights: &ModelWeights,
    token_ids: &[u32],
    policy: &PolicyConfig,
) -> Result<Vec<usize>> {
    let n = token_ids.len();
    if n < policy.window_size {
        return Err(Error::ContextShorterThanWindow {
            context: n,
            window: policy.window_size,
        });
    }
    let mut x = embed(weights, token_ids)?;
    let positions: Vec<usize> = (0..n).collect();
    for l in 0..=policy.tsp_layer {
        let out = layer_forward(weights, l, &x, &positions, policy.window_size)?;
        if l == policy.tsp_layer {
            let s = layer_saliency_with(&out.attention, policy.pooling_kernel, policy.pooling)?;
            let keep = retention_count(n, policy.tsp_rate, policy.window_size);
            return Ok(
                select_top(&s.scores, keep - policy.window_size, policy.window_size)
                    .selected_indices,
            );
        }
        x = out.hidden;
    }
    unreachable!("tsp_layer validated against num_layers")
}

/// Filter-and-restart: select at the filter layer, then re-run the whole
/// prefill on the selected tokens with contiguous positions, keeping all KV.
fn gemfilter_prefill(
    weights: &ModelWeights,
    token_ids: &[u32],
    policy: &PolicyConfig,
) -> Result<PrefillReport> {
    let cfg = &weights.config;
    let selected = gemfilter_select(weights, token_ids, policy)?;
    let kept: Vec<u32> = selected.iter().map(|&i| token_ids[i]).collect();
    let second = full_prefill_with_window(weights, &kept, policy.window_size)?;
    let mut cache = KvCache::new(token_ids.len(), cfg.head_dim);
    for out in &second.layers {
        cache.push_layer(LayerCache::full(out));
    }
    Ok(PrefillReport {
        policy: *policy,
        kv_cache: cache,
        final_hidden: second.final_hidden().to_vec(),
        final_logits: second.logits,
        propagated_positions: selected,
        per_layer_context_len: vec![kept.len(); cfg.num_layers],
        selection_pass_layers: policy.tsp_layer + 1,
        prompt_len: token_ids.len(),
        next_position: kept.len(),
    })
}
