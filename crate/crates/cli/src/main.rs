//! `fastkv` command-line entry point.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or configuration error.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastkv::accounting::FilterLayerCount;
use fastkv::calibration::{default_l_max, DistanceTarget, DEFAULT_EPSILON};
use fastkv::model::ModelConfig;
use fastkv::prefill::PolicyKind;
use fastkv::saliency::PoolingMode;
use fastkv::PolicyConfig;

use manifest::{
    AnalysisKind, ModelSource, Outputs, PromptSetSource, PromptSource, RunManifest, Task,
    REPORT_VERSION,
};

/// Error caused by the caller (bad flags, missing files, invalid config).
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser)]
#[command(
    name = "fastkv",
    version,
    about = "Token-selective propagation and KV-cache compression on a toy GQA model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prefill one prompt under a policy and write a JSON report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also dump the KV cache: <PREFIX>.json index and <PREFIX>.bin tensors.
        #[arg(long, value_name = "PREFIX")]
        cache_dump: Option<PathBuf>,
    },
    /// Choose a TSP layer on a calibration set.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Newline-delimited token-id file, one prompt per line.
        #[arg(long)]
        calib_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        calib_seed: u64,
        #[arg(long, default_value_t = 8)]
        calib_count: usize,
        /// Highest candidate layer (default: floor(0.75 * num_layers)).
        #[arg(long)]
        l_max: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Per-layer distance CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Overlap, recall or TSP-layer sweep analyses, written as CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, required_unless_present = "manifest")]
        kind: Option<AnalysisKind>,
        #[arg(long, default_value_t = 16)]
        top_k: usize,
        #[arg(long, default_value_t = 8)]
        max_distance: usize,
        /// Comma-separated K values for recall.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        k_values: Vec<usize>,
        /// Comma-separated sweep layers (default: all).
        #[arg(long, value_delimiter = ',')]
        sweep_layers: Vec<usize>,
        /// Number of synthetic sweep prompts.
        #[arg(long, default_value_t = 20)]
        sweep_prompts: usize,
        #[arg(long, value_enum, default_value_t = Metric::Logits)]
        metric: Metric,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Closed-form prefill compute rates.
    Account {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        num_layers: usize,
        #[arg(long, default_value_t = 15)]
        tsp_layer: usize,
        #[arg(long, default_value_t = 0.2)]
        tsp_rate: f64,
        #[arg(long)]
        filter_layer: Option<usize>,
        #[arg(long)]
        selection_rate: Option<f64>,
        #[arg(long, value_enum, default_value_t = Convention::Through)]
        filter_convention: Convention,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Logits,
    Hidden,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    /// Charge filter_layer + 1 layers.
    Through,
    /// Charge filter_layer layers.
    Before,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fastkv,
    Full,
    Snapkv,
    Streamingllm,
    Gemfilter,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Max,
    Avg,
}

#[derive(Args)]
struct Common {
    /// Replay a manifest (or a report containing one); other flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// FKV1 weight file; the model config is read from its header.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long, default_value_t = 4)]
    num_layers: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 2)]
    num_kv_heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1024)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_base: f32,

    /// Token-id file (whitespace or comma separated).
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    prompt_seed: u64,
    #[arg(long, default_value_t = 256)]
    prompt_len: usize,

    /// Flat `key = value` policy file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Window 8, kernel 7, TSP rate 0.2, KV retention 0.1.
    #[arg(long)]
    reference_defaults: bool,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    tsp_layer: Option<usize>,
    #[arg(long)]
    tsp_rate: Option<f64>,
    #[arg(long)]
    kv_rate: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,

    /// JSON report path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn model_source(&self) -> ModelSource {
        match &self.weights {
            Some(path) => ModelSource::File { path: path.clone() },
            None => ModelSource::Seeded {
                config: ModelConfig {
                    num_layers: self.num_layers,
                    num_heads: self.num_heads,
                    num_kv_heads: self.num_kv_heads,
                    head_dim: self.head_dim,
                    hidden_dim: self.num_heads * self.head_dim,
                    vocab_size: self.vocab_size,
                    max_seq_len: self.max_seq_len,
                    rope_base: self.rope_base,
                },
                seed: self.model_seed,
            },
        }
    }

    fn prompt_source(&self) -> PromptSource {
        match &self.prompt_file {
            Some(path) => PromptSource::File { path: path.clone() },
            None => PromptSource::Synthetic {
                seed: self.prompt_seed,
                len: self.prompt_len,
            },
        }
    }

    /// Defaults, then config file, then `--reference-defaults`, then flags.
    fn policy(&self) -> Result<PolicyConfig> {
        let mut p = match &self.config {
            Some(path) => PolicyConfig::from_kv_str(&manifest::read_text(path)?)
                .map_err(|e| UserError(format!("{}: {e}", path.display())))?,
            None => PolicyConfig::default(),
        };
        if self.reference_defaults {
            p.window_size = 8;
            p.pooling_kernel = 7;
            p.tsp_rate = 0.2;
            p.kv_retention_rate = 0.1;
        }
        if let Some(k) = self.policy {
            p.policy_kind = match k {
                PolicyArg::Fastkv => PolicyKind::FastKv,
                PolicyArg::Full => PolicyKind::Full,
                PolicyArg::Snapkv => PolicyKind::SnapKv,
                PolicyArg::Streamingllm => PolicyKind::StreamingLlm,
                PolicyArg::Gemfilter => PolicyKind::GemFilter,
            };
        }
        if let Some(v) = self.tsp_layer {
            p.tsp_layer = v;
        }
        if let Some(v) = self.tsp_rate {
            p.tsp_rate = v;
        }
        if let Some(v) = self.kv_rate {
            p.kv_retention_rate = v;
        }
        if let Some(v) = self.window {
            p.window_size = v;
        }
        if let Some(v) = self.kernel {
            p.pooling_kernel = v;
        }
        if let Some(v) = self.pooling {
            p.pooling = match v {
                PoolingArg::Max => PoolingMode::Max,
                PoolingArg::Avg => PoolingMode::Avg,
            };
        }
        Ok(p)
    }

    fn manifest(
        &self,
        task: Task,
        csv: Option<PathBuf>,
        cache_dump: Option<PathBuf>,
    ) -> RunManifest {
        RunManifest {
            report_version: REPORT_VERSION,
            model: self.model_source(),
            prompt: self.prompt_source(),
            task,
            outputs: Outputs {
                report: self.out.clone(),
                csv,
                cache_dump,
            },
        }
    }

    fn num_layers_hint(&self) -> Result<usize> {
        match &self.weights {
            Some(path) if path.exists() => Ok(fastkv::model::read_header(path)?.num_layers),
            _ => Ok(self.num_layers),
        }
    }
}

fn build_manifest(command: Command) -> Result<RunManifest> {
    match command {
        Command::Run { common, cache_dump } => {
            if let Some(m) = &common.manifest {
                return RunManifest::load(m);
            }
            let task = Task::Run {
                policy: common.policy()?,
            };
            Ok(common.manifest(task, None, cache_dump))
        }
        Command::Calibrate {
            common,
            calib_file,
            calib_seed,
            calib_count,
            l_max,
            epsilon,
            csv,
        } => {
            if let Some(m) = &common.manifest {
                return RunManifest::load(m);
            }
            let calibration = match calib_file {
                Some(path) => PromptSetSource::File { path },
                None => PromptSetSource::Synthetic {
                    seed: calib_seed,
                    count: calib_count,
                    len: common.prompt_len,
                },
            };
            let l_max = match l_max {
                Some(v) => v,
                None => default_l_max(common.num_layers_hint()?),
            };
            let task = Task::Calibrate {
                policy: common.policy()?,
                calibration,
                l_max,
                epsilon,
            };
            Ok(common.manifest(task, csv, None))
        }
        Command::Analyze {
            common,
            kind,
            top_k,
            max_distance,
            k_values,
            sweep_layers,
            sweep_prompts,
            metric,
            csv,
        } => {
            if let Some(m) = &common.manifest {
                return RunManifest::load(m);
            }
            let layers = if sweep_layers.is_empty() {
                (0..common.num_layers_hint()?).collect()
            } else {
                sweep_layers
            };
            let task = Task::Analyze {
                analysis: kind.expect("required by clap"),
                policy: common.policy()?,
                top_k,
                max_distance,
                k_values,
                layers,
                prompt_set: PromptSetSource::Synthetic {
                    seed: common.prompt_seed,
                    count: sweep_prompts,
                    len: common.prompt_len,
                },
                metric: match metric {
                    Metric::Logits => DistanceTarget::Logits,
                    Metric::Hidden => DistanceTarget::FinalHidden,
                },
            };
            Ok(common.manifest(task, csv, None))
        }
        Command::Account {
            manifest,
            num_layers,
            tsp_layer,
            tsp_rate,
            filter_layer,
            selection_rate,
            filter_convention,
            out,
        } => {
            if let Some(m) = &manifest {
                return RunManifest::load(m);
            }
            Ok(RunManifest {
                report_version: REPORT_VERSION,
                model: ModelSource::Seeded {
                    config: ModelConfig::tiny(),
                    seed: 0,
                },
                prompt: PromptSource::Synthetic { seed: 0, len: 0 },
                task: Task::Account {
                    num_layers,
                    tsp_layer,
                    tsp_rate,
                    filter_layer,
                    selection_rate,
                    filter_convention: match filter_convention {
                        Convention::Through => FilterLayerCount::ThroughFilter,
                        Convention::Before => FilterLayerCount::BeforeFilter,
                    },
                },
                outputs: Outputs {
                    report: out,
                    ..Outputs::default()
                },
            })
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fastkv::Error>() {
            return match e {
                fastkv::Error::NonFinite { .. } => 1,
                _ => 2,
            };
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result =
        build_manifest(cli.command).and_then(|m| commands::execute(&m).context("command failed"));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
