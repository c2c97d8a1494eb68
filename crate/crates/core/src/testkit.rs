//! Slow reference implementations and seeded generators for tests.
//!
//! The oracle forward pass is a scalar, `f64`, loop-per-element rewrite of
//! the model math. It shares only the weight and config types with the
//! engine.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{AttentionScores, LayerOutput};
use crate::model::{Matrix, ModelConfig, ModelWeights};

pub const ORACLE_MAX_LAYERS: usize = 8;
pub const ORACLE_MAX_TOKENS: usize = 512;
/// Per-logit absolute tolerance between engine and oracle.
pub const LOGIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OracleOutputs {
    pub logits: Vec<f64>,
    /// Sum of every hidden value after each layer.
    pub hidden_checksums: Vec<f64>,
    /// Last-token output of the final layer.
    pub final_hidden: Vec<f64>,
    /// `[layer][head][window query][key]`.
    pub window_attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// Tokens surviving each layer, as original positions.
    pub positions_after_layer: Vec<Vec<usize>>,
}

/// Token-selective propagation settings for the oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleTsp {
    pub layer: usize,
    pub rate: f64,
    pub kernel: usize,
}

fn guard(weights: &ModelWeights, len: usize) -> Result<()> {
    if weights.config.num_layers > ORACLE_MAX_LAYERS || len > ORACLE_MAX_TOKENS {
        return Err(Error::OracleGuard(format!(
            "oracle limited to {ORACLE_MAX_LAYERS} layers and {ORACLE_MAX_TOKENS} tokens, got {} and {len}",
            weights.config.num_layers
        )));
    }
    if len == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn w(m: &Matrix, r: usize, c: usize) -> f64 {
    m.data[r * m.cols + c] as f64
}

fn rmsnorm(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f64 + 1e-5).sqrt();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        out[i] = x[i] * inv * gain[i] as f64;
    }
    out
}

fn linear(m: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows];
    for r in 0..m.rows {
        let mut acc = 0.0;
        for c in 0..m.cols {
            acc += w(m, r, c) * x[c];
        }
        out[r] = acc;
    }
    out
}

fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let d = v.len();
    let mut i = 0;
    while i < d {
        let theta = pos as f64 / base.powf(i as f64 / d as f64);
        let (a, b) = (v[i], v[i + 1]);
        v[i] = a * theta.cos() - b * theta.sin();
        v[i + 1] = a * theta.sin() + b * theta.cos();
        i += 2;
    }
}

/// Full-context reference forward pass.
pub fn oracle_forward(weights: &ModelWeights, token_ids: &[u32]) -> Result<OracleOutputs> {
    oracle_run(weights, token_ids, 8, None)
}

/// Reference forward pass with optional token-selective propagation.
pub fn oracle_run(
    weights: &ModelWeights,
    token_ids: &[u32],
    window: usize,
    tsp: Option<OracleTsp>,
) -> Result<OracleOutputs> {
    guard(weights, token_ids.len())?;
    let cfg = &weights.config;
    let (nh, nkv, hd, dim) = (
        cfg.num_heads,
        cfg.num_kv_heads,
        cfg.head_dim,
        cfg.hidden_dim,
    );
    let per_group = nh / nkv;

    let mut xs: Vec<Vec<f64>> = Vec::new();
    for &t in token_ids {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: cfg.vocab_size,
            });
        }
        xs.push(
            (0..dim)
                .map(|c| w(&weights.embedding, t as usize, c))
                .collect(),
        );
    }
    let mut pos: Vec<usize> = (0..token_ids.len()).collect();

    let mut out = OracleOutputs {
        logits: vec![],
        hidden_checksums: vec![],
        final_hidden: vec![],
        window_attention: vec![],
        positions_after_layer: vec![],
    };

    for (li, lw) in weights.layers.iter().enumerate() {
        let n = xs.len();
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for t in 0..n {
            let xn = rmsnorm(&xs[t], &lw.attn_norm);
            let mut q = linear(&lw.wq, &xn);
            let mut k = linear(&lw.wk, &xn);
            for h in 0..nh {
                rotate(&mut q[h * hd..(h + 1) * hd], pos[t], cfg.rope_base as f64);
            }
            for g in 0..nkv {
                rotate(&mut k[g * hd..(g + 1) * hd], pos[t], cfg.rope_base as f64);
            }
            qs.push(q);
            ks.push(k);
            vs.push(linear(&lw.wv, &xn));
        }

        let wq = window.min(n);
        let mut att_rows = vec![vec![vec![0.0f64; n]; wq]; nh];
        let mut mixed = vec![vec![0.0f64; dim]; n];
        for h in 0..nh {
            let g = h / per_group;
            for t in 0..n {
                let mut logits = vec![0.0f64; t + 1];
                for s in 0..=t {
                    let mut d = 0.0;
                    for i in 0..hd {
                        d += qs[t][h * hd + i] * ks[s][g * hd + i];
                    }
                    logits[s] = d / (hd as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for s in 0..=t {
                    let p = (logits[s] - m).exp() / z;
                    for i in 0..hd {
                        mixed[t][h * hd + i] += p * vs[s][g * hd + i];
                    }
                    if t + wq >= n {
                        att_rows[h][t + wq - n][s] = p;
                    }
                }
            }
        }

        for t in 0..n {
            let o = linear(&lw.wo, &mixed[t]);
            for c in 0..dim {
                xs[t][c] += o[c];
            }
            let xn = rmsnorm(&xs[t], &lw.mlp_norm);
            let gate = linear(&lw.w_gate, &xn);
            let up = linear(&lw.w_up, &xn);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = linear(&lw.w_down, &act);
            for c in 0..dim {
                xs[t][c] += down[c];
            }
        }
        out.hidden_checksums.push(xs.iter().flatten().sum());

        if let Some(tsp) = tsp.filter(|t| t.layer == li) {
            let sal = oracle_layer_saliency(&att_rows, tsp.kernel);
            let win = window.min(n);
            let mut keep = (n as f64 * tsp.rate).round() as usize;
            keep = keep.max(win).min(n);
            let chosen = oracle_topk_f64(&sal, keep - win, win);
            xs = chosen.iter().map(|&i| xs[i].clone()).collect();
            pos = chosen.iter().map(|&i| pos[i]).collect();
        }
        out.window_attention.push(att_rows);
        out.positions_after_layer.push(pos.clone());
    }

    let last = xs.last().unwrap().clone();
    let xn = rmsnorm(&last, &weights.final_norm);
    out.logits = linear(&weights.lm_head, &xn);
    out.final_hidden = last;
    Ok(out)
}

/// Window-summed, max-pooled, head-averaged saliency from `[head][q][key]` rows.
pub fn oracle_layer_saliency(rows: &[Vec<Vec<f64>>], kernel: usize) -> Vec<f64> {
    let n = rows[0][0].len();
    let half = kernel as isize / 2;
    let mut total = vec![0.0; n];
    for head in rows {
        let mut mass = vec![0.0; n];
        for q in head {
            for i in 0..n {
                mass[i] += q[i];
            }
        }
        for i in 0..n {
            let mut best = f64::MIN;
            for j in i as isize - half..=i as isize + half {
                if j >= 0 && (j as usize) < n {
                    best = best.max(mass[j as usize]);
                }
            }
            total[i] += best;
        }
    }
    total.iter().map(|t| t / rows.len() as f64).collect()
}

/// Full sort of non-window positions by score (descending, lower index on
/// ties), first `budget` taken, window positions added.
pub fn oracle_topk_f64(scores: &[f64], budget: usize, window: usize) -> BTreeSet<usize> {
    let n = scores.len();
    let window = window.min(n);
    let mut order: Vec<usize> = (0..n - window).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
        .into_iter()
        .take(budget)
        .chain(n - window..n)
        .collect()
}

pub fn oracle_topk(scores: &[f32], budget: usize, window: usize) -> BTreeSet<usize> {
    let wide: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    oracle_topk_f64(&wide, budget, window)
}

/// Location and size of the largest engine/oracle disagreement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub engine: f64,
    pub oracle: f64,
    pub abs_diff: f64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max abs diff {:.3e} at index {} (engine {}, oracle {})",
            self.abs_diff, self.index, self.engine, self.oracle
        )
    }
}

pub fn max_abs_diff(engine: &[f32], oracle: &[f64]) -> Mismatch {
    engine
        .iter()
        .zip(oracle)
        .enumerate()
        .map(|(index, (&e, &o))| Mismatch {
            index,
            engine: e as f64,
            oracle: o,
            abs_diff: (e as f64 - o).abs(),
        })
        .fold(
            Mismatch {
                index: 0,
                engine: 0.0,
                oracle: 0.0,
                abs_diff: 0.0,
            },
            |best, m| if m.abs_diff > best.abs_diff { m } else { best },
        )
}

pub fn check_close(engine: &[f32], oracle: &[f64], tol: f64) -> std::result::Result<(), Mismatch> {
    let m = max_abs_diff(engine, oracle);
    if engine.len() != oracle.len() || m.abs_diff > tol || m.abs_diff.is_nan() {
        Err(m)
    } else {
        Ok(())
    }
}

pub fn random_prompt(rng: &mut impl Rng, len: usize, vocab_size: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab_size as u32))
        .collect()
}

/// Scores drawn from a handful of levels so ties are common.
pub fn random_scores(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    let levels = rng.random_range(1..=16u32);
    (0..len)
        .map(|_| rng.random_range(0..levels) as f32 / levels as f32)
        .collect()
}

/// Causal, row-normalized window attention with random logits.
pub fn random_attention(
    rng: &mut impl Rng,
    layer: usize,
    heads: usize,
    window: usize,
    ctx: usize,
) -> AttentionScores {
    let wq = window.min(ctx);
    let mut scores = vec![0.0f32; heads * wq * ctx];
    for h in 0..heads {
        for q in 0..wq {
            let qpos = ctx - wq + q;
            let row = &mut scores[(h * wq + q) * ctx..(h * wq + q + 1) * ctx];
            let mut z = 0.0f64;
            let raw: Vec<f64> = (0..=qpos)
                .map(|_| {
                    let e = (rng.random::<f64>() * 6.0).exp();
                    z += e;
                    e
                })
                .collect();
            for (r, e) in row.iter_mut().zip(raw) {
                *r = (e / z) as f32;
            }
        }
    }
    AttentionScores::new(layer, heads, window, ctx, scores).expect("valid rows")
}

/// A layer output with random attention, keys, values and hidden states.
pub fn random_layer_output(
    rng: &mut impl Rng,
    config: &ModelConfig,
    ctx: usize,
    window: usize,
) -> LayerOutput {
    let n = config.num_kv_heads * ctx * config.head_dim;
    let mut uniform = |len: usize| {
        (0..len)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect::<Vec<_>>()
    };
    let hidden =
        Matrix::from_vec(ctx, config.hidden_dim, uniform(ctx * config.hidden_dim)).unwrap();
    let keys = uniform(n);
    let values = uniform(n);
    LayerOutput {
        layer: 0,
        hidden,
        attention: random_attention(rng, 0, config.num_heads, window, ctx),
        keys,
        values,
        position_ids: (0..ctx).collect(),
        num_kv_heads: config.num_kv_heads,
        head_dim: config.head_dim,
    }
}
