//! Per-layer, per-KV-group key/value store.
//!
//! Compression happens once, at prefill, independently for every KV group.
//! Decoding appends uncompressed entries to every group.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{apply_rope, attend, logits_from_hidden, mlp_residual, rms_norm, LayerOutput};
use crate::model::ModelWeights;
use crate::saliency::{group_saliency_with, retention_count, select_top, PoolingMode};

/// Retained entries of one KV group. Rows of `keys`/`values` are
/// `head_dim` wide and aligned with `positions`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupCache {
    pub positions: Vec<usize>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl GroupCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, position: usize, key: &[f32], value: &[f32]) {
        self.positions.push(position);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCache {
    pub groups: Vec<GroupCache>,
    /// Tokens the layer processed at prefill.
    pub context_len: usize,
}

impl LayerCache {
    /// Keeps every entry of a layer output.
    pub fn full(out: &LayerOutput) -> Self {
        let all: Vec<usize> = (0..out.context_len()).collect();
        let groups = (0..out.num_kv_heads)
            .map(|g| gather_group(out, g, &all))
            .collect();
        Self {
            groups,
            context_len: out.context_len(),
        }
    }

    /// Keeps the given context indices (not positions) for every group.
    pub fn from_indices(out: &LayerOutput, per_group: &[Vec<usize>]) -> Self {
        let groups = per_group
            .iter()
            .enumerate()
            .map(|(g, idx)| gather_group(out, g, idx))
            .collect();
        Self {
            groups,
            context_len: out.context_len(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.keys.len() + g.values.len())
            .sum()
    }
}

fn gather_group(out: &LayerOutput, group: usize, indices: &[usize]) -> GroupCache {
    let mut gc = GroupCache::default();
    for &i in indices {
        gc.push(out.position_ids[i], out.key(group, i), out.value(group, i));
    }
    gc
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    pub original_context_len: usize,
    pub head_dim: usize,
}

impl KvCache {
    pub fn new(original_context_len: usize, head_dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            original_context_len,
            head_dim,
        }
    }

    pub fn push_layer(&mut self, layer: LayerCache) {
        self.layers.push(layer);
    }

    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.groups.iter().all(|g| g.is_empty()))
    }

    /// Highest position held anywhere in the cache.
    pub fn max_position(&self) -> Option<usize> {
        self.layers
            .iter()
            .flat_map(|l| l.groups.iter())
            .filter_map(|g| g.positions.last().copied())
            .max()
    }

    /// Writes a JSON index map (`layer -> group -> positions`) and a raw
    /// little-endian f32 sidecar: for each layer, each group, keys then values.
    pub fn dump(&self, index_path: impl AsRef<Path>, tensor_path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Index<'a> {
            original_context_len: usize,
            head_dim: usize,
            layers: Vec<Vec<&'a [usize]>>,
        }
        let index = Index {
            original_context_len: self.original_context_len,
            head_dim: self.head_dim,
            layers: self
                .layers
                .iter()
                .map(|l| l.groups.iter().map(|g| g.positions.as_slice()).collect())
                .collect(),
        };
        fs::write(index_path, serde_json::to_vec_pretty(&index)?)?;
        let mut f = fs::File::create(tensor_path)?;
        let mut buf = Vec::new();
        for l in &self.layers {
            for g in &l.groups {
                for v in g.keys.iter().chain(&g.values) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        f.write_all(&buf)?;
        Ok(())
    }
}

pub fn cache_memory_bytes(cache: &KvCache, bytes_per_element: usize) -> usize {
    cache
        .layers
        .iter()
        .map(|l| l.element_count() * bytes_per_element)
        .sum()
}

pub(crate) fn check_rate(name: &'static str, rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate { name, value: rate });
    }
    Ok(())
}

/// Per-group selected context indices for a retention rate.
pub fn kv_select(
    out: &LayerOutput,
    retention_rate: f64,
    kernel: usize,
    window_size: usize,
    config: &crate::model::ModelConfig,
    mode: PoolingMode,
) -> Result<Vec<Vec<usize>>> {
    check_rate("kv_retention_rate", retention_rate)?;
    let ctx = out.context_len();
    if ctx == 0 {
        return Err(Error::EmptyInput);
    }
    let window = window_size.min(ctx);
    let keep = retention_count(ctx, retention_rate, window);
    (0..config.num_kv_heads)
        .map(|g| {
            let s = group_saliency_with(&out.attention, g, kernel, config, mode)?;
            Ok(select_top(&s.scores, keep - window, window).selected_indices)
        })
        .collect()
}

/// Group-wise compression of one layer's keys and values.
pub fn kv_compress(
    out: &LayerOutput,
    retention_rate: f64,
    kernel: usize,
    window_size: usize,
    config: &crate::model::ModelConfig,
) -> Result<LayerCache> {
    kv_compress_with(
        out,
        retention_rate,
        kernel,
        window_size,
        config,
        PoolingMode::Max,
    )
}

pub fn kv_compress_with(
    out: &LayerOutput,
    retention_rate: f64,
    kernel: usize,
    window_size: usize,
    config: &crate::model::ModelConfig,
    mode: PoolingMode,
) -> Result<LayerCache> {
    let per_group = kv_select(out, retention_rate, kernel, window_size, config, mode)?;
    Ok(LayerCache::from_indices(out, &per_group))
}

/// One autoregressive step: appends the new token's K/V to every group of
/// every layer and returns next-token logits.
pub fn decode_step(
    weights: &ModelWeights,
    cache: &mut KvCache,
    token: u32,
    position: usize,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    if cache.layers.len() != cfg.num_layers {
        return Err(Error::CacheMismatch(format!(
            "cache has {} layers, model has {}",
            cache.layers.len(),
            cfg.num_layers
        )));
    }
    if let Some(bad) = cache
        .layers
        .iter()
        .position(|l| l.groups.len() != cfg.num_kv_heads)
    {
        return Err(Error::CacheMismatch(format!(
            "layer {bad} has {} groups, model has {} kv heads",
            cache.layers[bad].groups.len(),
            cfg.num_kv_heads
        )));
    }
    if cache.head_dim != cfg.head_dim {
        return Err(Error::CacheMismatch(format!(
            "cache head_dim {} != model head_dim {}",
            cache.head_dim, cfg.head_dim
        )));
    }
    if let Some(max) = cache.max_position() {
        if position <= max {
            return Err(Error::CacheMismatch(format!(
                "decode position {position} does not exceed cached position {max}"
            )));
        }
    }
    if token as usize >= cfg.vocab_size {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: cfg.vocab_size,
        });
    }

    let d = cfg.hidden_dim;
    let hd = cfg.head_dim;
    let gs = cfg.group_size();
    let mut x = weights.embedding.row(token as usize).to_vec();
    let mut xn = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut k = vec![0.0; cfg.kv_dim()];
    let mut v = vec![0.0; cfg.kv_dim()];
    let mut attn = vec![0.0; d];
    let mut proj = vec![0.0; d];
    let mut probs = Vec::new();
    for (l, lc) in cache.layers.iter_mut().enumerate() {
        let lw = &weights.layers[l];
        rms_norm(&x, &lw.attn_norm, &mut xn);
        lw.wq.matvec(&xn, &mut q);
        lw.wk.matvec(&xn, &mut k);
        lw.wv.matvec(&xn, &mut v);
        for h in q.chunks_exact_mut(hd) {
            apply_rope(h, position, cfg.rope_base);
        }
        for (g, gc) in lc.groups.iter_mut().enumerate() {
            let kg = &mut k[g * hd..(g + 1) * hd];
            apply_rope(kg, position, cfg.rope_base);
            gc.push(position, kg, &v[g * hd..(g + 1) * hd]);
        }
        for h in 0..cfg.num_heads {
            let gc = &lc.groups[h / gs];
            attend(
                &q[h * hd..(h + 1) * hd],
                &gc.keys,
                &gc.values,
                &mut probs,
                &mut attn[h * hd..(h + 1) * hd],
            );
        }
        lw.wo.matvec(&attn, &mut proj);
        for (o, p) in x.iter_mut().zip(&proj) {
            *o += p;
        }
        mlp_residual(weights, l, &mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
    }
    Ok(logits_from_hidden(weights, &x))
}
