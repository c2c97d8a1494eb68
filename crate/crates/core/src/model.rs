//! Model description, dense parameters and the `FKV1` binary weight format.
//!
//! The toy architecture is a pre-norm decoder: RMSNorm, rotary-embedded
//! causal grouped-query attention, RMSNorm, SwiGLU MLP. All parameters are
//! `f32`. See `docs/weight-format.md` for the on-disk layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FKV1";

/// Number of `u32` words in the weight-file header after the magic.
pub const HEADER_WORDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f32,
}

impl ModelConfig {
    /// The 4-layer, 4-head, 2-group configuration used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            hidden_dim: 32,
            vocab_size: 64,
            max_seq_len: 1024,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.num_kv_heads == 0 || self.num_heads == 0 {
            return Err(Error::InvalidConfig(
                "num_heads and num_kv_heads must be positive".into(),
            ));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim must be positive and even for rotary embedding, got {}",
                self.head_dim
            )));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::HiddenDimMismatch {
                hidden_dim: self.hidden_dim,
                num_heads: self.num_heads,
                head_dim: self.head_dim,
            });
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size and max_seq_len must be positive".into(),
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rope_base must be positive, got {}",
                self.rope_base
            )));
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// SwiGLU intermediate width, fixed at four times the hidden width.
    pub fn intermediate_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    fn header_words(&self) -> [u32; HEADER_WORDS] {
        [
            self.num_layers as u32,
            self.num_heads as u32,
            self.num_kv_heads as u32,
            self.head_dim as u32,
            self.hidden_dim as u32,
            self.vocab_size as u32,
            self.max_seq_len as u32,
            self.rope_base.to_bits(),
        ]
    }

    fn from_header_words(w: &[u32; HEADER_WORDS]) -> Self {
        Self {
            num_layers: w[0] as usize,
            num_heads: w[1] as usize,
            num_kv_heads: w[2] as usize,
            head_dim: w[3] as usize,
            hidden_dim: w[4] as usize,
            vocab_size: w[5] as usize,
            max_seq_len: w[6] as usize,
            rope_base: f32::from_bits(w[7]),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies out the given rows, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// `out = self · x` for a single input vector.
    pub fn matvec(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, w) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(w, x);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters of one decoder block. Projection matrices are stored
/// `[out_features × in_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    pub embedding: Matrix,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// Seeded Gaussian initialization with standard deviation
    /// `1/sqrt(hidden_dim)`; norm gains start at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0f32, 1.0 / (config.hidden_dim as f32).sqrt()).expect("positive std");
        let mut gaussian = |rows: usize, cols: usize| Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
        };

        let d = config.hidden_dim;
        let kv = config.kv_dim();
        let ff = config.intermediate_dim();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                attn_norm: vec![1.0; d],
                wq: gaussian(d, d),
                wk: gaussian(kv, d),
                wv: gaussian(kv, d),
                wo: gaussian(d, d),
                mlp_norm: vec![1.0; d],
                w_gate: gaussian(ff, d),
                w_up: gaussian(ff, d),
                w_down: gaussian(d, ff),
            });
        }
        let embedding = gaussian(config.vocab_size, d);
        let lm_head = gaussian(config.vocab_size, d);
        Ok(Self {
            config,
            layers,
            embedding,
            final_norm: vec![1.0; d],
            lm_head,
        })
    }

    /// Every tensor in file order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for l in &self.layers {
            out.push(&l.attn_norm);
            out.push(&l.wq.data);
            out.push(&l.wk.data);
            out.push(&l.wv.data);
            out.push(&l.wo.data);
            out.push(&l.mlp_norm);
            out.push(&l.w_gate.data);
            out.push(&l.w_up.data);
            out.push(&l.w_down.data);
        }
        out.push(&self.embedding.data);
        out.push(&self.final_norm);
        out.push(&self.lm_head.data);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 4 * HEADER_WORDS + 4 * self.parameter_count());
        buf.extend_from_slice(MAGIC);
        for w in self.config.header_words() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let header_end = 4 + 4 * HEADER_WORDS;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                expected: header_end,
                actual: bytes.len(),
            });
        }
        let mut words = [0u32; HEADER_WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            let at = 4 + 4 * i;
            *w = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        let stored = ModelConfig::from_header_words(&words);
        if stored != *config {
            return Err(Error::ShapeMismatch(format!(
                "file header {stored:?} does not match expected {config:?}"
            )));
        }
        config.validate()?;

        let expected = header_end + 4 * expected_parameter_count(config);
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - expected
            )));
        }

        let mut floats = bytes[header_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let mat = |rows: usize, cols: usize, data: Vec<f32>| Matrix { rows, cols, data };

        let d = config.hidden_dim;
        let kv = config.kv_dim();
        let ff = config.intermediate_dim();
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let attn_norm = take(d);
            let wq = mat(d, d, take(d * d));
            let wk = mat(kv, d, take(kv * d));
            let wv = mat(kv, d, take(kv * d));
            let wo = mat(d, d, take(d * d));
            let mlp_norm = take(d);
            let w_gate = mat(ff, d, take(ff * d));
            let w_up = mat(ff, d, take(ff * d));
            let w_down = mat(d, ff, take(d * ff));
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_gate,
                w_up,
                w_down,
            });
        }
        let embedding = mat(config.vocab_size, d, take(config.vocab_size * d));
        let final_norm = take(d);
        let lm_head = mat(config.vocab_size, d, take(config.vocab_size * d));
        let weights = Self {
            config: *config,
            layers,
            embedding,
            final_norm,
            lm_head,
        };
        if !weights.is_finite() {
            return Err(Error::InvalidConfig(
                "weight file contains NaN or Inf".into(),
            ));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, config)
    }
}

/// Parameter count implied by a config, independent of any allocated weights.
pub fn expected_parameter_count(c: &ModelConfig) -> usize {
    let d = c.hidden_dim;
    let kv = c.kv_dim();
    let ff = c.intermediate_dim();
    let per_layer = 2 * d + 2 * d * d + 2 * kv * d + 3 * ff * d;
    c.num_layers * per_layer + 2 * c.vocab_size * d + d
}

/// Reads only the config header of a weight file.
pub fn read_header(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let header_end = 4 + 4 * HEADER_WORDS;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let mut words = [0u32; HEADER_WORDS];
    for (i, w) in words.iter_mut().enumerate() {
        let at = 4 + 4 * i;
        *w = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    }
    Ok(ModelConfig::from_header_words(&words))
}

pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    ModelWeights::init(config, seed)
}

pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::load(path, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_shapes_follow_config() {
        let w = init_model(ModelConfig::tiny(), 7).unwrap();
        assert_eq!(w.layers.len(), 4);
        assert_eq!(w.layers[0].wq.shape(), (32, 32));
        assert_eq!(w.layers[0].wk.shape(), (16, 32));
        assert_eq!(w.layers[0].w_down.shape(), (32, 128));
        assert_eq!(w.embedding.shape(), (64, 32));
        assert_eq!(w.parameter_count(), expected_parameter_count(&w.config));
        assert!(w.is_finite());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(ModelConfig::tiny(), 7).unwrap();
        let b = init_model(ModelConfig::tiny(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = init_model(ModelConfig::tiny(), 8).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn hidden_dim_mismatch_is_reported() {
        let cfg = ModelConfig {
            hidden_dim: 33,
            ..ModelConfig::tiny()
        };
        let err = init_model(cfg, 7).unwrap_err();
        assert!(err.to_string().contains("hidden_dim mismatch"), "{err}");
    }

    #[test]
    fn other_invariants() {
        let one_layer = ModelConfig {
            num_layers: 1,
            ..ModelConfig::tiny()
        };
        assert!(one_layer.validate().is_err());
        let bad_groups = ModelConfig {
            num_kv_heads: 3,
            ..ModelConfig::tiny()
        };
        assert!(bad_groups.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fkv");
        let w = init_model(ModelConfig::tiny(), 3).unwrap();
        w.save(&path).unwrap();
        let back = load_weights(&path, &w.config).unwrap();
        assert_eq!(w, back);
        assert_eq!(read_header(&path).unwrap(), w.config);
    }

    #[test]
    fn load_rejects_wrong_layer_count() {
        let w = init_model(ModelConfig::tiny(), 3).unwrap();
        let other = ModelConfig {
            num_layers: 5,
            ..ModelConfig::tiny()
        };
        let err = ModelWeights::from_bytes(&w.to_bytes(), &other).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn load_rejects_empty_and_truncated() {
        let cfg = ModelConfig::tiny();
        assert!(matches!(
            ModelWeights::from_bytes(&[], &cfg),
            Err(Error::BadMagic)
        ));
        let bytes = init_model(cfg, 3).unwrap().to_bytes();
        let err = ModelWeights::from_bytes(&bytes[..bytes.len() - 5], &cfg).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = init_model(ModelConfig::tiny(), 3).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"FKV1");
        assert_eq!(&bytes[4..8], &[4, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[32, 0, 0, 0]);
        // First tensor is layer 0's attn_norm, all ones.
        assert_eq!(&bytes[36..40], &1.0f32.to_le_bytes());
    }
}
