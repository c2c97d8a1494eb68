//! Executes a manifest and writes its outputs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use fastkv::accounting::{gemfilter_compute_rate, prefill_compute_rate, FilterLayerCount};
use fastkv::analysis::{
    critical_token_overlap, mean_overlap_by_distance, topk_attention_recall, tsp_layer_sweep_with,
    write_overlap_csv, write_recall_csv, write_sweep_csv,
};
use fastkv::calibration::select_tsp_layer_with;
use fastkv::kv_cache::cache_memory_bytes;
use fastkv::model::ModelWeights;
use fastkv::{run_policy, PolicyConfig};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::manifest::{AnalysisKind, RunManifest, Task};
use crate::UserError;

pub fn execute(manifest: &RunManifest) -> Result<()> {
    let body = match &manifest.task {
        Task::Run { policy } => run(manifest, policy)?,
        Task::Calibrate {
            policy,
            calibration,
            l_max,
            epsilon,
        } => {
            let weights = manifest.model.load()?;
            check_policy(policy, &weights)?;
            let set = calibration.load(weights.config.vocab_size)?;
            let result = select_tsp_layer_with(&weights, &set, *l_max, policy, *epsilon)?;
            if let Some(path) = &manifest.outputs.csv {
                write_atomic(path, |out| {
                    writeln!(out, "# schema: fastkv.calibration.v1")?;
                    let mut w = csv::Writer::from_writer(out);
                    w.write_record(["layer", "mean_normalized_distance", "mean_squared_distance"])?;
                    for (layer, (d, sq)) in result
                        .mean_distances
                        .iter()
                        .zip(&result.mean_squared_distances)
                        .enumerate()
                    {
                        w.write_record([layer.to_string(), d.to_string(), sq.to_string()])?;
                    }
                    w.flush()?;
                    Ok(())
                })?;
            }
            json!({
                "model": weights.config,
                "calibration": set.description,
                "num_prompts": set.prompts.len(),
                "result": result,
            })
        }
        Task::Analyze {
            analysis,
            policy,
            top_k,
            max_distance,
            k_values,
            layers,
            prompt_set,
            metric,
        } => {
            let weights = manifest.model.load()?;
            let csv_path = manifest.outputs.csv.as_deref();
            match analysis {
                AnalysisKind::Overlap => {
                    let prompt = manifest.prompt.load(weights.config.vocab_size)?;
                    let curves = critical_token_overlap(&weights, &prompt, *top_k, *max_distance)?;
                    if let Some(path) = csv_path {
                        write_atomic(path, |out| Ok(write_overlap_csv(out, &curves)?))?;
                    }
                    json!({
                        "analysis": "overlap",
                        "prompt_len": prompt.len(),
                        "top_k": top_k,
                        "mean_overlap_by_distance": mean_overlap_by_distance(&curves),
                    })
                }
                AnalysisKind::Recall => {
                    let prompt = manifest.prompt.load(weights.config.vocab_size)?;
                    let curves = topk_attention_recall(&weights, &prompt, k_values)?;
                    if let Some(path) = csv_path {
                        write_atomic(path, |out| Ok(write_recall_csv(out, &curves)?))?;
                    }
                    json!({
                        "analysis": "recall",
                        "prompt_len": prompt.len(),
                        "curves": curves,
                    })
                }
                AnalysisKind::Sweep => {
                    check_policy(policy, &weights)?;
                    let set = prompt_set.load(weights.config.vocab_size)?;
                    let sweep =
                        tsp_layer_sweep_with(&weights, &set.prompts, layers, policy, *metric)?;
                    if let Some(path) = csv_path {
                        write_atomic(path, |out| Ok(write_sweep_csv(out, &sweep)?))?;
                    }
                    json!({
                        "analysis": "sweep",
                        "num_prompts": set.prompts.len(),
                        "sweep": sweep,
                    })
                }
            }
        }
        Task::Account {
            num_layers,
            tsp_layer,
            tsp_rate,
            filter_layer,
            selection_rate,
            filter_convention,
        } => {
            if *num_layers == 0 || tsp_layer >= num_layers {
                return Err(UserError(format!(
                    "tsp_layer {tsp_layer} must be below num_layers {num_layers}"
                ))
                .into());
            }
            let filter = filter_layer.unwrap_or(*tsp_layer);
            let sel = selection_rate.unwrap_or(*tsp_rate);
            if filter >= *num_layers
                || !(0.0..=1.0).contains(&sel)
                || !(0.0..=1.0).contains(tsp_rate)
            {
                return Err(UserError("filter layer or rate out of range".into()).into());
            }
            json!({
                "num_layers": num_layers,
                "tsp_layer": tsp_layer,
                "tsp_rate": tsp_rate,
                "fastkv_compute_rate": prefill_compute_rate(*num_layers, *tsp_layer, *tsp_rate),
                "gemfilter": {
                    "filter_layer": filter,
                    "selection_rate": sel,
                    "convention": filter_convention,
                    "compute_rate": gemfilter_compute_rate(*num_layers, filter, sel, *filter_convention),
                    "through_filter": gemfilter_compute_rate(*num_layers, filter, sel, FilterLayerCount::ThroughFilter),
                    "before_filter": gemfilter_compute_rate(*num_layers, filter, sel, FilterLayerCount::BeforeFilter),
                },
            })
        }
    };
    emit_report(manifest, body)
}

fn check_policy(policy: &PolicyConfig, weights: &ModelWeights) -> Result<()> {
    policy
        .validate(&weights.config)
        .map_err(|e| UserError(format!("invalid policy: {e}")).into())
}

fn run(manifest: &RunManifest, policy: &PolicyConfig) -> Result<Value> {
    let weights = manifest.model.load()?;
    check_policy(policy, &weights)?;
    let prompt = manifest.prompt.load(weights.config.vocab_size)?;
    let report = run_policy(&weights, &prompt, policy)?;

    if let Some(prefix) = &manifest.outputs.cache_dump {
        let index = with_extension(prefix, "json");
        let tensors = with_extension(prefix, "bin");
        report
            .kv_cache
            .dump(&index, &tensors)
            .with_context(|| format!("dumping cache to {}", prefix.display()))?;
    }

    let argmax = report
        .final_logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    let per_group: Vec<Vec<usize>> = report
        .kv_cache
        .layers
        .iter()
        .map(|l| l.groups.iter().map(|g| g.len()).collect())
        .collect();
    let account = report.flop_account(&weights.config);
    Ok(json!({
        "model": weights.config,
        "prompt_len": prompt.len(),
        "logits_digest": logits_digest(&report.final_logits),
        "argmax": argmax,
        "per_layer_context_len": report.per_layer_context_len,
        "propagated_positions": report.propagated_positions,
        "selection_pass_layers": report.selection_pass_layers,
        "cache": {
            "per_layer_group_len": per_group,
            "bytes": cache_memory_bytes(&report.kv_cache, account.bytes_per_element),
        },
        "account": account,
    }))
}

/// SHA-256 over the little-endian f32 bytes.
pub fn logits_digest(logits: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in logits {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn emit_report(manifest: &RunManifest, body: Value) -> Result<()> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut report = json!({
        "report_version": manifest.report_version,
        "timestamp": timestamp,
        "manifest": manifest,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut report, body) {
        dst.extend(src);
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &manifest.outputs.report {
        Some(path) => write_atomic(path, |out| Ok(out.write_all(text.as_bytes())?)),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Writes through a temp file in the target directory, then renames.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !dir.is_dir() {
        return Err(UserError(format!("output directory not found: {}", dir.display())).into());
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
