use fastkv::forward::AttentionScores;
use fastkv::kv_cache::kv_select;
use fastkv::prefill::hidden_compress;
use fastkv::saliency::{group_saliency, head_saliency, layer_saliency, PoolingMode};
use fastkv::testkit::{oracle_layer_saliency, random_attention, random_layer_output};
use fastkv::ModelConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig::tiny()
}

fn rows(att: &AttentionScores) -> Vec<Vec<Vec<f64>>> {
    (0..att.num_heads)
        .map(|h| {
            (0..att.window_queries)
                .map(|q| att.row(h, q).iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect()
}

fn permute_heads(att: &AttentionScores, perm: &[usize]) -> AttentionScores {
    let block = att.window_queries * att.context_len;
    let mut scores = Vec::with_capacity(att.scores.len());
    for &h in perm {
        scores.extend_from_slice(&att.scores[h * block..(h + 1) * block]);
    }
    AttentionScores::new(
        att.layer,
        att.num_heads,
        att.window_size,
        att.context_len,
        scores,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_one_is_raw_window_mass(seed: u64, ctx in 1usize..200, window in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = random_attention(&mut rng, 0, 4, window, ctx);
        for h in 0..4 {
            let s = head_saliency(&att, h, 1).unwrap().scores;
            for (t, v) in s.iter().enumerate() {
                let raw: f64 = (0..att.window_queries).map(|q| att.row(h, q)[t] as f64).sum();
                prop_assert!((*v as f64 - raw).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn layer_saliency_matches_oracle(seed: u64, ctx in 1usize..200, kernel in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = random_attention(&mut rng, 0, 4, 8, ctx);
        let engine = layer_saliency(&att, kernel).unwrap().scores;
        let oracle = oracle_layer_saliency(&rows(&att), kernel);
        for (e, o) in engine.iter().zip(&oracle) {
            prop_assert!((*e as f64 - o).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_saliency_ignores_head_order(seed: u64, ctx in 1usize..200, perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = random_attention(&mut rng, 0, 4, 8, ctx);
        let a = layer_saliency(&att, 7).unwrap().scores;
        let b = layer_saliency(&permute_heads(&att, &perm), 7).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn groups_are_independent(seed: u64, ctx in 8usize..200, rate in 0.0f64..=1.0) {
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_layer_output(&mut rng, &cfg, ctx, 8);
        let other = random_attention(&mut rng, 0, 4, 8, ctx);
        // Swap in different heads for group 1 only (heads 2 and 3).
        let block = out.attention.window_queries * ctx;
        let mut scores = out.attention.scores.clone();
        scores[2 * block..].copy_from_slice(&other.scores[2 * block..]);
        let mut changed = out.clone();
        changed.attention = AttentionScores::new(0, 4, 8, ctx, scores).unwrap();

        prop_assert_eq!(
            group_saliency(&out.attention, 0, 7, &cfg).unwrap().scores,
            group_saliency(&changed.attention, 0, 7, &cfg).unwrap().scores
        );
        let a = kv_select(&out, rate, 7, 8, &cfg, PoolingMode::Max).unwrap();
        let b = kv_select(&changed, rate, 7, 8, &cfg, PoolingMode::Max).unwrap();
        prop_assert_eq!(&a[0], &b[0]);
    }

    #[test]
    fn compressions_keep_window_and_nest(seed: u64, ctx in 8usize..256, window in 1usize..=8, r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0) {
        let cfg = config();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_layer_output(&mut rng, &cfg, ctx, window);
        let small = kv_select(&out, lo, 7, window, &cfg, PoolingMode::Max).unwrap();
        let large = kv_select(&out, hi, 7, window, &cfg, PoolingMode::Max).unwrap();
        for (s, l) in small.iter().zip(&large) {
            prop_assert!((ctx - window..ctx).all(|p| s.binary_search(&p).is_ok()));
            prop_assert!(s.iter().all(|p| l.binary_search(p).is_ok()));
        }
        let hs = hidden_compress(&out, lo, 7, window).unwrap();
        let hl = hidden_compress(&out, hi, 7, window).unwrap();
        prop_assert!((ctx - window..ctx).all(|p| hs.indices.binary_search(&p).is_ok()));
        prop_assert!(hs.indices.iter().all(|p| hl.indices.binary_search(p).is_ok()));
        prop_assert_eq!(hs.hidden.rows, hs.indices.len());
    }
}
