//! Command-line harness for the visual-token-pruning pipeline.
//!
//! Subcommands:
//!
//! * `run`     — one pipeline run, report as JSON;
//! * `ablate`  — every policy at several budgets, reports as a JSON array;
//! * `sweep`   — one policy across budgets, CSV;
//! * `analyze` — attention shift/dispersion statistics, CSV (or raw
//!   per-position scores with `--scores`);
//! * `flops`   — the analytic cost table at reference scale, CSV or JSON.
//!
//! Reports go to stdout (or `--out FILE`) and are byte-identical across
//! reruns of the same config; timing goes to stderr. Failures print a
//! single JSON object `{"error", "module", "config_hash"}` to stderr and
//! exit nonzero.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fastervlm::analysis::stats_csv;
use fastervlm::config::{PipelineConfig, Policy};
use fastervlm::cost::{flops_csv, flops_table, CostModelConfig};
use fastervlm::pipeline::{run_ablation, run_pipeline, run_pipeline_detailed, sweep, sweep_csv};
use fastervlm::probe::{scores_csv, ScoreGroup};

#[derive(Parser)]
#[command(
    name = "fastervlm",
    about = "Attention-guided visual token pruning on a deterministic toy VLM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every pipeline-running subcommand. CLI flags win
/// over the config file, which wins over the defaults.
#[derive(Args)]
struct PipelineArgs {
    /// Config file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the pipeline seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the pruning policy (faster_vlm, fastv, random,
    /// patch_attention, cls_at_layer2, cls_merge).
    #[arg(long)]
    policy: Option<Policy>,
    /// Override the reduction ratio R in [0, 1).
    #[arg(long)]
    reduction: Option<f64>,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PipelineArgs {
    fn build_config(&self) -> Result<PipelineConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
                PipelineConfig::parse(&text).map_err(|e| e.to_string())?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(policy) = self.policy {
            cfg.policy = policy;
        }
        if let Some(r) = self.reduction {
            cfg.reduction = r;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy under one config and print the report JSON.
    Run(PipelineArgs),
    /// Run every policy at each budget; print a JSON array of reports.
    Ablate {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Comma-separated reduction ratios.
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,0.9")]
        budgets: String,
    },
    /// Sweep the configured policy across budgets; print CSV.
    Sweep {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Comma-separated reduction ratios.
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,0.9")]
        budgets: String,
    },
    /// Print attention shift/dispersion statistics for one run as CSV.
    Analyze {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Emit raw per-position scores instead of summary statistics.
        #[arg(long)]
        scores: bool,
    },
    /// Print the analytic FLOPs/KV cost table (reference scale by
    /// default).
    Flops {
        /// Prefill sequence length.
        #[arg(long, default_value_t = 2880)]
        tokens: usize,
        /// Model width d.
        #[arg(long, default_value_t = 4096)]
        d_model: usize,
        /// FFN width m.
        #[arg(long, default_value_t = 11008)]
        d_ffn: usize,
        /// Decoder depth L.
        #[arg(long, default_value_t = 32)]
        layers: usize,
        /// Comma-separated reduction ratios.
        #[arg(long, default_value = "0.0,0.5,0.95")]
        budgets: String,
        /// Emit CSV instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Write output here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let result = dispatch(cli.command);
    match result {
        Ok(()) => {
            eprintln!(
                "completed in {:.1} ms",
                started.elapsed().as_secs_f64() * 1e3
            );
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("{}", failure.to_json());
            ExitCode::FAILURE
        }
    }
}

/// A failed invocation, rendered as one JSON object on stderr.
struct Failure {
    error: String,
    module: &'static str,
    config_hash: Option<String>,
}

impl Failure {
    fn new(module: &'static str, error: impl ToString) -> Self {
        Failure {
            error: error.to_string(),
            module,
            config_hash: None,
        }
    }

    fn with_hash(mut self, hash: String) -> Self {
        self.config_hash = Some(hash);
        self
    }

    fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.error,
            "module": self.module,
            "config_hash": self.config_hash,
        })
        .to_string()
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let cfg = args.build_config().map_err(|e| Failure::new("config", e))?;
            let report = run_pipeline(&cfg)
                .map_err(|e| Failure::new(e.module_name(), e).with_hash(cfg.hash()))?;
            emit(&args.out, &report.to_json())
        }
        Command::Ablate { pipeline, budgets } => {
            let cfg = pipeline
                .build_config()
                .map_err(|e| Failure::new("config", e))?;
            let budgets = parse_budgets(&budgets)?;
            let reports = run_ablation(&cfg, &budgets)
                .map_err(|e| Failure::new(e.module_name(), e).with_hash(cfg.hash()))?;
            let value = serde_json::to_value(&reports).expect("reports serialize");
            let mut text = serde_json::to_string_pretty(&value).expect("value renders");
            text.push('\n');
            emit(&pipeline.out, &text)
        }
        Command::Sweep { pipeline, budgets } => {
            let cfg = pipeline
                .build_config()
                .map_err(|e| Failure::new("config", e))?;
            let budgets = parse_budgets(&budgets)?;
            let rows = sweep(&cfg, &budgets)
                .map_err(|e| Failure::new(e.module_name(), e).with_hash(cfg.hash()))?;
            emit(&pipeline.out, &sweep_csv(&rows))
        }
        Command::Analyze { pipeline, scores } => {
            let cfg = pipeline
                .build_config()
                .map_err(|e| Failure::new("config", e))?;
            let run = run_pipeline_detailed(&cfg)
                .map_err(|e| Failure::new(e.module_name(), e).with_hash(cfg.hash()))?;
            let text = if scores {
                let fallback = vec![0.0; cfg.enc_n_patches];
                let group = ScoreGroup {
                    source: &run.report.decision.policy,
                    layer: cfg.effective_extract_layer(),
                    scores: run.visual_scores.as_deref().unwrap_or(&fallback),
                };
                scores_csv(&[group])
            } else {
                stats_csv(&run.report.attention)
            };
            emit(&pipeline.out, &text)
        }
        Command::Flops {
            tokens,
            d_model,
            d_ffn,
            layers,
            budgets,
            csv,
            out,
        } => {
            let cfg = CostModelConfig {
                n_tokens: tokens,
                d_model,
                d_ffn,
                n_layers: layers,
            };
            let budgets = parse_budgets(&budgets)?;
            let rows = flops_table(&cfg, &budgets).map_err(|e| Failure::new("cost", e))?;
            let text = if csv {
                flops_csv(&rows)
            } else {
                let value = serde_json::to_value(&rows).expect("rows serialize");
                let mut text = serde_json::to_string_pretty(&value).expect("value renders");
                text.push('\n');
                text
            };
            emit(&out, &text)
        }
    }
}

fn parse_budgets(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::new("config", format!("bad budget {s:?}")))
        })
        .collect()
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, content)
            .map_err(|e| Failure::new("io", format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = io::stdout().lock();
            match stdout
                .write_all(content.as_bytes())
                .and_then(|()| stdout.flush())
            {
                Ok(()) => Ok(()),
                // A reader like `head` closing the pipe early is normal
                // termination, not a failure.
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
                Err(e) => Err(Failure::new("io", format!("cannot write to stdout: {e}"))),
            }
        }
    }
}
