//! Acceptance gate. Prints one line per criterion and exits nonzero if any
//! hard criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use fastkv::accounting::prefill_compute_rate;
use fastkv::analysis::{critical_token_overlap, topk_attention_recall, tsp_layer_sweep_with};
use fastkv::calibration::{final_hidden_distance, seeded_prompt, DistanceTarget};
use fastkv::forward::{full_prefill, full_prefill_with_window};
use fastkv::kv_cache::{decode_step, kv_select};
use fastkv::prefill::hidden_compress;
use fastkv::saliency::{select_top, PoolingMode};
use fastkv::testkit::{
    check_close, oracle_forward, oracle_run, oracle_topk, random_layer_output, random_scores,
    OracleTsp, LOGIT_TOLERANCE,
};
use fastkv::{init_model, run_policy, ModelConfig, ModelWeights, PolicyConfig, PolicyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODEL_SEED: u64 = 20_240_917;

enum Outcome {
    Pass(String),
    Fail(String),
    SoftFail(String),
}

fn model() -> ModelWeights {
    let config = ModelConfig {
        num_layers: 8,
        num_heads: 4,
        num_kv_heads: 2,
        head_dim: 16,
        hidden_dim: 64,
        vocab_size: 256,
        max_seq_len: 2048,
        rope_base: 10_000.0,
    };
    init_model(config, MODEL_SEED).expect("model init")
}

fn ac1() -> Outcome {
    let a = prefill_compute_rate(32, 15, 0.2);
    let b = prefill_compute_rate(36, 17, 0.2);
    let msg = format!("rate(32,15,0.2)={a:?} rate(36,17,0.2)={b:?}");
    if a == 0.60 && b == 0.60 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn ac2(w: &ModelWeights) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..50 {
        let len = rng.random_range(8..=512);
        let prompt = seeded_prompt(1000 + i, len, w.config.vocab_size);
        let tsp_layer = rng.random_range(0..w.config.num_layers);
        let full = full_prefill(w, &prompt).unwrap();
        let policy = PolicyConfig::lossless(PolicyKind::FastKv, tsp_layer);
        let fast = run_policy(w, &prompt, &policy).unwrap();
        let same = full
            .logits
            .iter()
            .zip(&fast.final_logits)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Outcome::Fail(format!(
                "prompt {i} (len {len}, tsp layer {tsp_layer}) differs"
            ));
        }
    }
    Outcome::Pass("50 prompts bit-identical".into())
}

fn ac3(w: &ModelWeights) -> Outcome {
    let last = w.config.num_layers - 1;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let prompt = seeded_prompt(3000 + i, 64 + 16 * i as usize, w.config.vocab_size);
        for rate in [0.1, 0.2, 0.5] {
            let policy = PolicyConfig {
                tsp_rate: rate,
                ..PolicyConfig::default()
            };
            let d = final_hidden_distance(w, &prompt, last, &policy).unwrap();
            worst = worst.max(d.normalized);
        }
    }
    let msg = format!("max normalized distance {worst:e}");
    if worst <= 1e-10 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn ac4(w: &ModelWeights) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..6 {
        let len = [1, 9, 64, 200, 333, 512][i];
        let prompt = seeded_prompt(4000 + i as u64, len, w.config.vocab_size);
        let oracle = oracle_forward(w, &prompt).unwrap();
        let engine = full_prefill(w, &prompt).unwrap();
        match check_close(&engine.logits, &oracle.logits, LOGIT_TOLERANCE) {
            Ok(()) => {}
            Err(m) => return Outcome::Fail(format!("full forward, len {len}: {m}")),
        }
        worst = worst.max(fastkv::testkit::max_abs_diff(&engine.logits, &oracle.logits).abs_diff);
    }
    for (i, &(layer, rate)) in [(2usize, 0.25), (4, 0.5), (6, 0.2)].iter().enumerate() {
        let prompt = seeded_prompt(4100 + i as u64, 160, w.config.vocab_size);
        let policy = PolicyConfig {
            tsp_layer: layer,
            tsp_rate: rate,
            kv_retention_rate: 1.0,
            ..PolicyConfig::default()
        };
        let engine = run_policy(w, &prompt, &policy).unwrap();
        let tsp = OracleTsp {
            layer,
            rate,
            kernel: policy.pooling_kernel,
        };
        let oracle = oracle_run(w, &prompt, policy.window_size, Some(tsp)).unwrap();
        let kept = oracle.positions_after_layer.last().unwrap();
        if kept != &engine.propagated_positions {
            return Outcome::Fail(format!("tsp layer {layer}: propagated sets differ"));
        }
        if let Err(m) = check_close(&engine.final_logits, &oracle.logits, LOGIT_TOLERANCE) {
            return Outcome::Fail(format!("tsp layer {layer}: {m}"));
        }
    }
    for trial in 0..1000 {
        let len = rng.random_range(1..=512);
        let scores = random_scores(&mut rng, len);
        let window = rng.random_range(0..=len.min(32));
        let budget = rng.random_range(0..=len + 4);
        let got: BTreeSet<usize> = select_top(&scores, budget, window)
            .selected_indices
            .into_iter()
            .collect();
        if got != oracle_topk(&scores, budget, window) {
            return Outcome::Fail(format!("select_top trial {trial} (len {len}) disagrees"));
        }
    }
    Outcome::Pass(format!(
        "max logit diff {worst:e}, 1000 select_top sets equal"
    ))
}

fn ac5(w: &ModelWeights) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let ctx = rng.random_range(8..=256);
        let window = rng.random_range(1..=8.min(ctx));
        let kernel = [1, 3, 5, 7][rng.random_range(0..4)];
        let rate = rng.random_range(0.0..=1.0);
        let out = random_layer_output(&mut rng, &w.config, ctx, window);
        let win: Vec<usize> = (ctx - window..ctx).collect();
        let groups = kv_select(&out, rate, kernel, window, &w.config, PoolingMode::Max).unwrap();
        for g in &groups {
            if !win.iter().all(|p| g.binary_search(p).is_ok()) {
                violations += 1;
            }
        }
        let hc = hidden_compress(&out, rate, kernel, window).unwrap();
        if !win.iter().all(|p| hc.indices.binary_search(p).is_ok()) {
            violations += 1;
        }
    }
    let msg = format!("{violations} violations over 1000 compressions");
    if violations == 0 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn ac6(w: &ModelWeights) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..200 {
        let ctx = rng.random_range(8..=256);
        let window = rng.random_range(1..=8);
        let out = random_layer_output(&mut rng, &w.config, ctx, window);
        let mut r = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        r.sort_by(f64::total_cmp);
        let (r1, r2) = (r[0], r[1]);
        let a = kv_select(&out, r1, 7, window, &w.config, PoolingMode::Max).unwrap();
        let b = kv_select(&out, r2, 7, window, &w.config, PoolingMode::Max).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            if !ga.iter().all(|p| gb.binary_search(p).is_ok()) {
                violations += 1;
            }
        }
        let ha = hidden_compress(&out, r1, 7, window).unwrap();
        let hb = hidden_compress(&out, r2, 7, window).unwrap();
        if !ha
            .indices
            .iter()
            .all(|p| hb.indices.binary_search(p).is_ok())
        {
            violations += 1;
        }
    }
    let msg = format!("{violations} violations over 200 rate pairs");
    if violations == 0 {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn ac7(w: &ModelWeights) -> Outcome {
    let prompt = seeded_prompt(7, 1000, w.config.vocab_size);
    let mut worst = 0.0f64;
    for kind in [PolicyKind::SnapKv, PolicyKind::FastKv] {
        let policy = PolicyConfig {
            policy_kind: kind,
            tsp_layer: 3,
            kv_retention_rate: 0.1,
            ..PolicyConfig::default()
        };
        let report = run_policy(w, &prompt, &policy).unwrap();
        let per_token = 2 * w.config.num_kv_heads * w.config.head_dim * 2;
        for (layer, cache) in report.kv_cache.layers.iter().enumerate() {
            let ctx = report.per_layer_context_len[layer];
            let full_bytes = (ctx * per_token) as f64;
            // Window tokens are counted inside the retained budget.
            let expected = (0.1 * full_bytes).max((policy.window_size * per_token) as f64);
            let actual = (cache.element_count() * 2) as f64;
            let dev = (actual / expected - 1.0).abs();
            worst = worst.max(dev);
            if dev > 0.02 {
                return Outcome::Fail(format!(
                    "{kind} layer {layer}: {actual} bytes vs expected {expected}"
                ));
            }
        }
    }
    Outcome::Pass(format!("max relative deviation {:.4}%", worst * 100.0))
}

fn ac8(w: &ModelWeights) -> Outcome {
    let prompts: Vec<Vec<u32>> = (0..20)
        .map(|i| seeded_prompt(8000 + i, 256, w.config.vocab_size))
        .collect();
    let layers: Vec<usize> = (w.config.num_layers / 2..w.config.num_layers).collect();
    let base = PolicyConfig::default();
    let sweep = tsp_layer_sweep_with(w, &prompts, &layers, &base, DistanceTarget::Logits).unwrap();
    let rows: Vec<String> = sweep
        .layers
        .iter()
        .zip(sweep.fastkv_distance.iter().zip(&sweep.gemfilter_distance))
        .map(|(l, (f, g))| format!("L{l} {f:.4}/{g:.4}"))
        .collect();
    let ok = sweep
        .fastkv_distance
        .iter()
        .zip(&sweep.gemfilter_distance)
        .all(|(f, g)| *f <= g * 1.05);
    let msg = format!("fastkv/gemfilter {}", rows.join(", "));
    if ok {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn ac9(w: &ModelWeights) -> Outcome {
    let n = 1024;
    let prompt = seeded_prompt(9, n, w.config.vocab_size);
    let k_values = [1, 4, 16, 64, 256, n];
    let recall = topk_attention_recall(w, &prompt, &k_values).unwrap();
    for c in &recall {
        if c.recall.windows(2).any(|p| p[1] < p[0]) {
            return Outcome::Fail(format!("recall not monotone at layer {}", c.layer));
        }
        if *c.recall.last().unwrap() != 1.0 {
            return Outcome::Fail(format!(
                "recall at K=N is {} at layer {}",
                c.recall.last().unwrap(),
                c.layer
            ));
        }
    }
    let curves = critical_token_overlap(w, &prompt, 64, 1).unwrap();
    if curves.iter().any(|c| c.overlap_ratio[0] != 1.0) {
        return Outcome::Fail("overlap at distance 0 is not 1".into());
    }
    let at_d1: Vec<(usize, f64)> = curves
        .iter()
        .filter(|c| c.distances.len() > 1)
        .map(|c| (c.base_layer, c.overlap_ratio[1]))
        .collect();
    let quart = (w.config.num_layers / 4).max(1);
    let mean = |sel: &dyn Fn(usize) -> bool| {
        let v: Vec<f64> = at_d1
            .iter()
            .filter(|(l, _)| sel(*l))
            .map(|(_, r)| *r)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let last_base = w.config.num_layers - 2;
    let shallow = mean(&|l| l < quart);
    let deep = mean(&|l| l + quart > last_base);
    let msg = format!("recall monotone, ends at 1; overlap@1 shallow {shallow:.4} deep {deep:.4}");
    if deep > shallow {
        Outcome::Pass(msg)
    } else {
        Outcome::SoftFail(msg)
    }
}

fn ac10(w: &ModelWeights) -> Outcome {
    let mut tokens = seeded_prompt(10, 48, w.config.vocab_size);
    let policy = PolicyConfig::lossless(PolicyKind::FastKv, 2);
    let mut report = run_policy(w, &tokens, &policy).unwrap();
    let mut logits = report.final_logits.clone();
    let mut position = report.next_position;
    let mut worst = 0.0f64;
    for step in 0..8 {
        let next = argmax(&logits) as u32;
        tokens.push(next);
        logits = decode_step(w, &mut report.kv_cache, next, position).unwrap();
        position += 1;
        let reference = full_prefill_with_window(w, &tokens, policy.window_size).unwrap();
        let diff = logits
            .iter()
            .zip(&reference.logits)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        if diff > 1e-4 {
            return Outcome::Fail(format!("step {step}: max diff {diff:e}"));
        }
    }
    Outcome::Pass(format!("8 steps, max diff {worst:e}"))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn strip_timestamp(path: &Path) -> String {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    serde_json::to_string(&v).unwrap()
}

fn ac11() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_fastkv");
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &[
            "run",
            "--prompt-len",
            "96",
            "--tsp-layer",
            "1",
            "--kv-rate",
            "0.3",
        ],
        &["calibrate", "--prompt-len", "32", "--calib-count", "3"],
        &[
            "analyze",
            "--kind",
            "sweep",
            "--prompt-len",
            "48",
            "--sweep-prompts",
            "3",
        ],
    ];
    for args in runs {
        let report = dir.path().join("report.json");
        let status = Command::new(bin)
            .args(args)
            .arg("--out")
            .arg(&report)
            .status()
            .unwrap();
        if !status.success() {
            return Outcome::Fail(format!("{} exited with {status}", args[0]));
        }
        let a = strip_timestamp(&report);
        // The embedded manifest names the same output path.
        let status = Command::new(bin)
            .args([args[0], "--manifest"])
            .arg(&report)
            .status()
            .unwrap();
        if !status.success() {
            return Outcome::Fail(format!("{} replay exited with {status}", args[0]));
        }
        let b = strip_timestamp(&report);
        if a != b {
            return Outcome::Fail(format!("{} replay differs", args[0]));
        }
    }
    Outcome::Pass("run, calibrate and analyze replays byte-identical".into())
}

fn main() -> ExitCode {
    let w = model();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("compute-rate arithmetic", Box::new(ac1)),
        ("lossless equivalence", Box::new(|| ac2(&w))),
        ("last-layer TSP invariance", Box::new(|| ac3(&w))),
        ("oracle equivalence", Box::new(|| ac4(&w))),
        ("window inclusion", Box::new(|| ac5(&w))),
        ("retention monotonicity", Box::new(|| ac6(&w))),
        ("KV memory ratio", Box::new(|| ac7(&w))),
        ("TSP vs restart ordering", Box::new(|| ac8(&w))),
        ("overlap and recall shape", Box::new(|| ac9(&w))),
        ("decode correctness", Box::new(|| ac10(&w))),
        ("manifest determinism", Box::new(ac11)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, msg) = match outcome {
            Outcome::Pass(m) => ("PASS", m),
            Outcome::SoftFail(m) => ("SOFT-FAIL", m),
            Outcome::Fail(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("AC{:<2} {tag:<9} {name}: {msg} ({secs:.1}s)", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
