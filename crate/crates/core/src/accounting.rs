//! Analytic FLOP and KV-memory accounting.
//!
//! Two compute rates are reported. The linear rate counts processed tokens
//! per layer, which is how published prefill compute rates are quoted. The
//! FLOP rate uses dense-transformer formulas with the quadratic attention
//! term, which is what a dense kernel would actually execute.

use serde::{Deserialize, Serialize};

use crate::kv_cache::cache_memory_bytes;
use crate::model::ModelConfig;
use crate::prefill::PrefillReport;

/// Half precision.
pub const DEFAULT_BYTES_PER_ELEMENT: usize = 2;

/// Token-linear prefill compute rate of a TSP configuration: layers up to
/// and including the TSP layer see the full prompt, later ones `tsp_rate`.
pub fn prefill_compute_rate(num_layers: usize, tsp_layer: usize, tsp_rate: f64) -> f64 {
    let total = num_layers as f64;
    let full_layers = (tsp_layer + 1).min(num_layers) as f64;
    let reduced_layers = num_layers.saturating_sub(tsp_layer + 1) as f64;
    full_layers / total + reduced_layers / total * tsp_rate
}

/// How many layers a filter-and-restart selection pass is charged for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterLayerCount {
    /// Layers `0..=filter`, i.e. `filter + 1` layers.
    ThroughFilter,
    /// `filter` layers.
    BeforeFilter,
}

/// Token-linear compute rate of filter-and-restart: the selection pass plus a
/// full-depth pass over `selection_rate` of the prompt.
pub fn gemfilter_compute_rate(
    num_layers: usize,
    filter_layer: usize,
    selection_rate: f64,
    convention: FilterLayerCount,
) -> f64 {
    let pre = match convention {
        FilterLayerCount::ThroughFilter => filter_layer + 1,
        FilterLayerCount::BeforeFilter => filter_layer,
    };
    pre as f64 / num_layers as f64 + selection_rate
}

/// FLOPs of one decoder layer over `n` tokens, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub projection: u64,
    pub attention: u64,
    pub mlp: u64,
}

impl LayerFlops {
    pub fn for_context(config: &ModelConfig, n: usize) -> Self {
        let n = n as u64;
        let d = config.hidden_dim as u64;
        let kv = config.kv_dim() as u64;
        let ff = config.intermediate_dim() as u64;
        let qk_width = (config.num_heads * config.head_dim) as u64;
        Self {
            // Q, O: d×d; K, V: kv×d.
            projection: 2 * n * d * (2 * d + 2 * kv),
            // QK^T and attention-weighted V, dense (not causally halved).
            attention: 4 * n * n * qk_width,
            mlp: 2 * n * d * ff * 3,
        }
    }

    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.mlp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeAccount {
    pub per_layer_projection_flops: Vec<u64>,
    pub per_layer_attention_flops: Vec<u64>,
    pub per_layer_mlp_flops: Vec<u64>,
    /// Discarded filter pass of filter-and-restart.
    pub selection_pass_flops: u64,
    pub total_flops: u64,
    pub full_context_flops: u64,
    /// `total_flops / full_context_flops`.
    pub prefill_compute_rate: f64,
    /// Processed tokens summed over layers, relative to full context.
    pub linear_compute_rate: f64,
    pub bytes_per_element: usize,
    pub kv_bytes: u64,
    pub full_kv_bytes: u64,
    pub kv_retention_fraction: f64,
}

/// Dense FLOPs of a full-context prefill over `n` tokens.
pub fn full_context_flops(config: &ModelConfig, n: usize) -> u64 {
    LayerFlops::for_context(config, n).total() * config.num_layers as u64
}

pub fn flop_account(report: &PrefillReport, config: &ModelConfig) -> ComputeAccount {
    flop_account_with(report, config, DEFAULT_BYTES_PER_ELEMENT)
}

pub fn flop_account_with(
    report: &PrefillReport,
    config: &ModelConfig,
    bytes_per_element: usize,
) -> ComputeAccount {
    let n = report.prompt_len;
    let per_layer: Vec<LayerFlops> = report
        .per_layer_context_len
        .iter()
        .map(|&c| LayerFlops::for_context(config, c))
        .collect();
    let selection_pass_flops =
        LayerFlops::for_context(config, n).total() * report.selection_pass_layers as u64;
    let total_flops = per_layer.iter().map(LayerFlops::total).sum::<u64>() + selection_pass_flops;
    let full = full_context_flops(config, n);

    let processed: usize =
        report.per_layer_context_len.iter().sum::<usize>() + report.selection_pass_layers * n;
    let kv_bytes = cache_memory_bytes(&report.kv_cache, bytes_per_element) as u64;
    let full_kv_bytes =
        (2 * config.num_layers * config.num_kv_heads * n * config.head_dim * bytes_per_element)
            as u64;

    ComputeAccount {
        per_layer_projection_flops: per_layer.iter().map(|f| f.projection).collect(),
        per_layer_attention_flops: per_layer.iter().map(|f| f.attention).collect(),
        per_layer_mlp_flops: per_layer.iter().map(|f| f.mlp).collect(),
        selection_pass_flops,
        total_flops,
        full_context_flops: full,
        prefill_compute_rate: total_flops as f64 / full as f64,
        linear_compute_rate: processed as f64 / (config.num_layers * n) as f64,
        bytes_per_element,
        kv_bytes,
        full_kv_bytes,
        kv_retention_fraction: kv_bytes as f64 / full_kv_bytes as f64,
    }
}

impl PrefillReport {
    pub fn flop_account(&self, config: &ModelConfig) -> ComputeAccount {
        flop_account(self, config)
    }
}
