//! Forward pass of the decoder with observation-window attention capture.
//!
//! Every layer computes full causal softmax rows but keeps only the rows of
//! the last `window_size` queries, which is all the compression layer needs.

use crate::error::{Error, Result};
use crate::model::{dot, Matrix, ModelWeights};

pub const RMS_EPS: f32 = 1e-5;

/// Default observation window (last 8 prompt tokens act as queries).
pub const DEFAULT_WINDOW: usize = 8;

/// Post-softmax attention restricted to the observation-window queries.
///
/// `scores` is laid out `[heads × window_queries × context_len]`. Entries for
/// keys after the query position are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub layer: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub window_queries: usize,
    pub context_len: usize,
    pub scores: Vec<f32>,
}

impl AttentionScores {
    /// Wraps raw window rows, checking shape and row normalization.
    pub fn new(
        layer: usize,
        num_heads: usize,
        window_size: usize,
        context_len: usize,
        scores: Vec<f32>,
    ) -> Result<Self> {
        let window_queries = window_size.min(context_len);
        if scores.len() != num_heads * window_queries * context_len {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {num_heads} heads x {window_queries} queries x {context_len} keys",
                scores.len()
            )));
        }
        let att = Self {
            layer,
            num_heads,
            window_size,
            window_queries,
            context_len,
            scores,
        };
        for h in 0..num_heads {
            for q in 0..window_queries {
                let row = att.row(h, q);
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::ShapeMismatch(format!(
                        "score outside [0, 1] in head {h} row {q}"
                    )));
                }
                let sum: f32 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::ShapeMismatch(format!(
                        "head {h} row {q} sums to {sum}"
                    )));
                }
            }
        }
        Ok(att)
    }

    /// Row for window query `q` (0 is the earliest window query).
    pub fn row(&self, head: usize, q: usize) -> &[f32] {
        let start = (head * self.window_queries + q) * self.context_len;
        &self.scores[start..start + self.context_len]
    }

    /// Context position of window query `q`.
    pub fn query_position(&self, q: usize) -> usize {
        self.context_len - self.window_queries + q
    }
}

/// Result of one decoder block.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub layer: usize,
    /// `[tokens × hidden_dim]`, the block's output residual stream.
    pub hidden: Matrix,
    pub attention: AttentionScores,
    /// Rotary-embedded keys, `[kv_heads × tokens × head_dim]`.
    pub keys: Vec<f32>,
    /// `[kv_heads × tokens × head_dim]`.
    pub values: Vec<f32>,
    /// Original sequence positions of the processed tokens.
    pub position_ids: Vec<usize>,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl LayerOutput {
    pub fn context_len(&self) -> usize {
        self.hidden.rows
    }

    pub fn key(&self, group: usize, token: usize) -> &[f32] {
        let at = (group * self.context_len() + token) * self.head_dim;
        &self.keys[at..at + self.head_dim]
    }

    pub fn value(&self, group: usize, token: usize) -> &[f32] {
        let at = (group * self.context_len() + token) * self.head_dim;
        &self.values[at..at + self.head_dim]
    }
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` of one head by
/// `position * base^(-2i/head_dim)`.
pub(crate) fn apply_rope(x: &mut [f32], position: usize, base: f32) {
    let hd = x.len();
    for i in 0..hd / 2 {
        let freq = base.powf(-((2 * i) as f32) / hd as f32);
        let angle = position as f32 * freq;
        let (sin, cos) = angle.sin_cos();
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Single-query attention over contiguous `[n × head_dim]` keys/values.
/// Leaves the softmax probabilities in `probs[..n]`.
pub(crate) fn attend(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    probs: &mut Vec<f32>,
    out: &mut [f32],
) {
    let hd = q.len();
    let n = keys.len() / hd;
    let scale = 1.0 / (hd as f32).sqrt();
    probs.clear();
    probs.extend(keys.chunks_exact(hd).map(|k| dot(q, k) * scale));
    let max = probs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    out.fill(0.0);
    for (p, v) in probs.iter().zip(values.chunks_exact(hd)).take(n) {
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

/// Adds the SwiGLU MLP output of `x` to `x` in place.
pub(crate) fn mlp_residual(weights: &ModelWeights, layer: usize, x: &mut [f32]) {
    let lw = &weights.layers[layer];
    let ff = weights.config.intermediate_dim();
    let mut xn = vec![0.0; x.len()];
    rms_norm(x, &lw.mlp_norm, &mut xn);
    let mut gate = vec![0.0; ff];
    let mut up = vec![0.0; ff];
    lw.w_gate.matvec(&xn, &mut gate);
    lw.w_up.matvec(&xn, &mut up);
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = silu(*g) * u;
    }
    let mut down = vec![0.0; x.len()];
    lw.w_down.matvec(&gate, &mut down);
    for (o, d) in x.iter_mut().zip(&down) {
        *o += d;
    }
}

/// Token embedding lookup with range and length checks.
pub fn embed(weights: &ModelWeights, token_ids: &[u32]) -> Result<Matrix> {
    let cfg = &weights.config;
    if token_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if token_ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut data = Vec::with_capacity(token_ids.len() * cfg.hidden_dim);
    for &t in token_ids {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: cfg.vocab_size,
            });
        }
        data.extend_from_slice(weights.embedding.row(t as usize));
    }
    Matrix::from_vec(token_ids.len(), cfg.hidden_dim, data)
}

/// Final norm and LM head applied to one hidden row.
pub fn logits_from_hidden(weights: &ModelWeights, hidden: &[f32]) -> Vec<f32> {
    let mut xn = vec![0.0; hidden.len()];
    rms_norm(hidden, &weights.final_norm, &mut xn);
    let mut logits = vec![0.0; weights.config.vocab_size];
    weights.lm_head.matvec(&xn, &mut logits);
    logits
}

/// One pre-norm decoder block over `hidden` at the given positions.
pub fn layer_forward(
    weights: &ModelWeights,
    layer_index: usize,
    hidden: &Matrix,
    position_ids: &[usize],
    window_size: usize,
) -> Result<LayerOutput> {
    let cfg = &weights.config;
    if layer_index >= cfg.num_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer_index,
            bound: cfg.num_layers,
        });
    }
    let t_len = hidden.rows;
    if t_len == 0 {
        return Err(Error::EmptyInput);
    }
    if hidden.cols != cfg.hidden_dim {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {} != hidden_dim {}",
            hidden.cols, cfg.hidden_dim
        )));
    }
    if position_ids.len() != t_len {
        return Err(Error::LengthMismatch(format!(
            "{} position ids for {t_len} hidden rows",
            position_ids.len()
        )));
    }
    if position_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::LengthMismatch(
            "position ids must be strictly increasing".into(),
        ));
    }

    let lw = &weights.layers[layer_index];
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim;
    let kvh = cfg.num_kv_heads;
    let group_size = cfg.group_size();

    let mut q = Matrix::zeros(t_len, d);
    let mut keys = vec![0.0f32; kvh * t_len * hd];
    let mut values = vec![0.0f32; kvh * t_len * hd];
    let mut xn = vec![0.0; d];
    let mut k_row = vec![0.0; cfg.kv_dim()];
    let mut v_row = vec![0.0; cfg.kv_dim()];
    for t in 0..t_len {
        rms_norm(hidden.row(t), &lw.attn_norm, &mut xn);
        lw.wq.matvec(&xn, q.row_mut(t));
        lw.wk.matvec(&xn, &mut k_row);
        lw.wv.matvec(&xn, &mut v_row);
        for h in q.row_mut(t).chunks_exact_mut(hd) {
            apply_rope(h, position_ids[t], cfg.rope_base);
        }
        for g in 0..kvh {
            let src = &mut k_row[g * hd..(g + 1) * hd];
            apply_rope(src, position_ids[t], cfg.rope_base);
            let at = (g * t_len + t) * hd;
            keys[at..at + hd].copy_from_slice(src);
            values[at..at + hd].copy_from_slice(&v_row[g * hd..(g + 1) * hd]);
        }
    }

    let window_queries = window_size.min(t_len);
    let first_window = t_len - window_queries;
    let mut window_scores = vec![0.0f32; cfg.num_heads * window_queries * t_len];
    let mut attn = Matrix::zeros(t_len, d);
    let mut probs = Vec::with_capacity(t_len);
    for h in 0..cfg.num_heads {
        let g = h / group_size;
        let gk = &keys[g * t_len * hd..(g + 1) * t_len * hd];
        let gv = &values[g * t_len * hd..(g + 1) * t_len * hd];
        for t in 0..t_len {
            let qh = &q.row(t)[h * hd..(h + 1) * hd];
            let out = &mut attn.row_mut(t)[h * hd..(h + 1) * hd];
            attend(
                qh,
                &gk[..(t + 1) * hd],
                &gv[..(t + 1) * hd],
                &mut probs,
                out,
            );
            if t >= first_window {
                let at = (h * window_queries + (t - first_window)) * t_len;
                window_scores[at..=at + t].copy_from_slice(&probs);
            }
        }
    }

    let mut out = hidden.clone();
    let mut proj = vec![0.0; d];
    for t in 0..t_len {
        lw.wo.matvec(attn.row(t), &mut proj);
        let row = out.row_mut(t);
        for (o, p) in row.iter_mut().zip(&proj) {
            *o += p;
        }
        mlp_residual(weights, layer_index, row);
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: layer_index });
    }

    Ok(LayerOutput {
        layer: layer_index,
        hidden: out,
        attention: AttentionScores {
            layer: layer_index,
            num_heads: cfg.num_heads,
            window_size,
            window_queries,
            context_len: t_len,
            scores: window_scores,
        },
        keys,
        values,
        position_ids: position_ids.to_vec(),
        num_kv_heads: kvh,
        head_dim: hd,
    })
}

/// Reference full-context prefill.
#[derive(Debug, Clone)]
pub struct FullPrefill {
    pub layers: Vec<LayerOutput>,
    pub logits: Vec<f32>,
}

impl FullPrefill {
    /// Last-token row of the final layer's output.
    pub fn final_hidden(&self) -> &[f32] {
        let h = &self.layers.last().expect("at least two layers").hidden;
        h.row(h.rows - 1)
    }
}

pub fn full_prefill(weights: &ModelWeights, token_ids: &[u32]) -> Result<FullPrefill> {
    full_prefill_with_window(weights, token_ids, DEFAULT_WINDOW)
}

pub fn full_prefill_with_window(
    weights: &ModelWeights,
    token_ids: &[u32],
    window_size: usize,
) -> Result<FullPrefill> {
    let mut x = embed(weights, token_ids)?;
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let mut layers = Vec::with_capacity(weights.config.num_layers);
    for l in 0..weights.config.num_layers {
        let out = layer_forward(weights, l, &x, &positions, window_size)?;
        x = out.hidden.clone();
        layers.push(out);
    }
    let logits = logits_from_hidden(weights, x.row(x.rows - 1));
    Ok(FullPrefill { layers, logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tiny() -> ModelWeights {
        init_model(ModelConfig::tiny(), 7).unwrap()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = tiny();
        let x = embed(&w, &[5]).unwrap();
        let out = layer_forward(&w, 0, &x, &[0], 8).unwrap();
        assert_eq!(out.attention.window_queries, 1);
        assert_eq!(out.attention.scores, vec![1.0; 4]);
    }

    #[test]
    fn window_rows_are_normalized_and_causal() {
        let w = tiny();
        let tokens: Vec<u32> = (0..16).map(|i| (i * 7 % 64) as u32).collect();
        let full = full_prefill(&w, &tokens).unwrap();
        for out in &full.layers {
            let att = &out.attention;
            assert_eq!(att.window_queries, 8);
            for h in 0..att.num_heads {
                for q in 0..att.window_queries {
                    let row = att.row(h, q);
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-5, "row sum {s}");
                    let qp = att.query_position(q);
                    assert!(row[qp + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn short_context_uses_all_positions_as_window() {
        let w = tiny();
        let full = full_prefill_with_window(&w, &[1, 2, 3], 8).unwrap();
        assert_eq!(full.layers[0].attention.window_queries, 3);
    }

    #[test]
    fn prefill_is_deterministic() {
        let w = tiny();
        let tokens = [3u32, 9, 27, 17, 51, 25];
        let a = full_prefill(&w, &tokens).unwrap();
        let b = full_prefill(&w, &tokens).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.len(), 64);
        let one = full_prefill(&w, &[4]).unwrap();
        assert_eq!(one.logits.len(), 64);
    }

    #[test]
    fn input_errors() {
        let w = tiny();
        assert!(matches!(
            full_prefill(&w, &[64]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(full_prefill(&w, &[]), Err(Error::EmptyInput)));
        let long = vec![0u32; 1025];
        assert!(matches!(
            full_prefill(&w, &long),
            Err(Error::SequenceTooLong { .. })
        ));
        let x = embed(&w, &[1, 2]).unwrap();
        assert!(matches!(
            layer_forward(&w, 0, &x, &[0], 8),
            Err(Error::LengthMismatch(_))
        ));
        assert!(layer_forward(&w, 0, &x, &[1, 1], 8).is_err());
        assert!(layer_forward(&w, 4, &x, &[0, 1], 8).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let mut w = tiny();
        w.layers[1]
            .w_down
            .data
            .iter_mut()
            .for_each(|v| *v = f32::MAX);
        let err = full_prefill(&w, &[1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1 }), "{err}");
    }

    #[test]
    fn rope_preserves_norm_and_is_identity_at_zero() {
        let mut x = vec![0.3, -1.2, 0.7, 2.0];
        let orig = x.clone();
        apply_rope(&mut x, 0, 10_000.0);
        assert_eq!(x, orig);
        apply_rope(&mut x, 37, 10_000.0);
        let n0: f32 = orig.iter().map(|v| v * v).sum();
        let n1: f32 = x.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-5);
    }

    /// Replicating each KV head per query head (MHA) must reproduce GQA.
    #[test]
    fn gqa_matches_replicated_mha() {
        let cfg = ModelConfig {
            num_kv_heads: 1,
            ..ModelConfig::tiny()
        };
        let gqa = init_model(cfg, 11).unwrap();
        let mha_cfg = ModelConfig {
            num_kv_heads: cfg.num_heads,
            ..cfg
        };
        let mut mha = gqa.clone();
        mha.config = mha_cfg;
        for l in &mut mha.layers {
            let rep = |m: &Matrix| {
                let mut data = Vec::new();
                for _ in 0..cfg.num_heads {
                    data.extend_from_slice(&m.data);
                }
                Matrix::from_vec(m.rows * cfg.num_heads, m.cols, data).unwrap()
            };
            l.wk = rep(&l.wk);
            l.wv = rep(&l.wv);
        }
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 + 1) as u32 % 64).collect();
        let a = full_prefill(&gqa, &tokens).unwrap();
        let b = full_prefill(&mha, &tokens).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.attention.scores.iter().zip(&lb.attention.scores) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}
