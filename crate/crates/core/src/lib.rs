//! Desk-scale grouped-query-attention decoder with a pluggable prefill
//! compression layer.
//!
//! The central policy is token-selective propagation: the full prompt runs
//! through the layers up to a chosen TSP layer, only salient tokens (plus the
//! trailing observation window) continue past it, and every layer's KV cache
//! is compressed at an independent retention rate. StreamingLLM, SnapKV and
//! filter-and-restart (GemFilter-style) baselines share the same engine.
//!
//! ```
//! use fastkv::{init_model, run_policy, ModelConfig, PolicyConfig, PolicyKind};
//!
//! let weights = init_model(ModelConfig::tiny(), 7).unwrap();
//! let prompt: Vec<u32> = (0..64).map(|i| i % 64).collect();
//! let policy = PolicyConfig { policy_kind: PolicyKind::FastKv, tsp_layer: 1, ..Default::default() };
//! let report = run_policy(&weights, &prompt, &policy).unwrap();
//! assert_eq!(report.per_layer_context_len, vec![64, 64, 13, 13]);
//! ```

pub mod accounting;
pub mod analysis;
pub mod calibration;
pub mod error;
pub mod forward;
pub mod kv_cache;
pub mod model;
pub mod prefill;
pub mod saliency;
pub mod testkit;

pub use accounting::{flop_account, prefill_compute_rate, ComputeAccount};
pub use calibration::{select_tsp_layer, CalibrationResult, CalibrationSet};
pub use error::{Error, Result};
pub use forward::{full_prefill, layer_forward, AttentionScores, FullPrefill, LayerOutput};
pub use kv_cache::{cache_memory_bytes, decode_step, kv_compress, KvCache};
pub use model::{init_model, load_weights, ModelConfig, ModelWeights};
pub use prefill::{
    fastkv_prefill, hidden_compress, run_policy, PolicyConfig, PolicyKind, PrefillReport,
};
pub use saliency::{
    group_saliency, head_saliency, layer_saliency, select_top, SaliencyVector, SelectionResult,
};
