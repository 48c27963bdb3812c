//! End-to-end harness: synthetic workload → encoder → projector →
//! decoder, with one pruning policy applied, against an unpruned
//! reference run of the same inputs.
//!
//! Every run produces a [`RunReport`] that is byte-identical across
//! repeats of the same config: model weights, workload, and the random
//! policy all derive from the config seed.

mod report;
mod workload;

pub use report::{FlopsSummary, KvSummary, RunReport};
pub use workload::{salient_recall, PlantedWorkload, SalienceCheck, WorkloadError};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{dispersion_stat, shift_stat, AnalysisError, LabeledStats};
use crate::config::{ConfigError, PipelineConfig, Policy, PositionMode, ALL_POLICIES};
use crate::cost::{
    kv_storage_bytes, mib, pipeline_prefill_flops, CostError, CostModelConfig, PruneSchedule,
};
use crate::model::{
    Decoder, Encoder, EncoderOutput, ModelError, PrefillOpts, SequenceLayout, WEIGHT_INIT_SCALE,
};
use crate::probe::{extract_cls_attention, extract_visual_profile, AttentionSource, ProbeError};
use crate::prune::{
    apply_before_llm, apply_merge, keep_count, merge_assignments, select_top_k, ApplySite,
    MergeSpec, PruneDecision, PruneError,
};
use crate::tensor::{matmul, randn_matrix, DenseMatrix, SeededRng, TensorError};
use workload::POLICY_STREAM;

/// Fraction of positions the dispersion statistic reports the mass share
/// for.
const TOP_SHARE_Q: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    /// Which module the failure originated in, for structured error
    /// output.
    pub fn module_name(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Model(_) => "model",
            PipelineError::Probe(_) => "probe",
            PipelineError::Prune(_) => "prune",
            PipelineError::Analysis(_) => "analysis",
            PipelineError::Cost(_) => "cost",
            PipelineError::Workload(_) => "workload",
            PipelineError::Tensor(_) => "tensor",
        }
    }
}

/// A finished run plus the intermediate artifacts tests and diagnostics
/// want to inspect.
#[derive(Debug)]
pub struct PipelineRun {
    pub report: RunReport,
    pub workload: PlantedWorkload,
    pub encoder_output: EncoderOutput,
    /// Scores the policy ranked tokens by (`None` for the random policy).
    pub visual_scores: Option<Vec<f64>>,
    pub merge: Option<MergeSpec>,
    pub baseline_last_logits: Vec<f64>,
    pub pruned_last_logits: Vec<f64>,
}

/// Runs one policy under one config and returns the report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    Ok(run_pipeline_detailed(cfg)?.report)
}

/// [`run_pipeline`] with all intermediate artifacts kept.
pub fn run_pipeline_detailed(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let encoder = Encoder::new(cfg.encoder_config())?;
    let decoder = Decoder::new(cfg.decoder_config())?;
    let workload = PlantedWorkload::build(&encoder, cfg)?;

    // Vision tower → projector → decoder embedding space.
    let encoder_output = encoder.forward(&workload.patches)?;
    let visual_features = encoder_output.penultimate_patch_features();
    let mut proj_rng = SeededRng::new(cfg.seed.wrapping_add(3));
    let projector = randn_matrix(
        &mut proj_rng,
        cfg.enc_d_model,
        cfg.dec_d_model,
        WEIGHT_INIT_SCALE,
    );
    let visual_embed = matmul(&visual_features, &projector)?;

    let layout_full = cfg.layout(cfg.enc_n_patches);
    let emb_full = assemble_embeddings(&decoder, &workload, &visual_embed)?;

    // Unpruned reference run. Its trace also feeds the policies that rank
    // by decoder attention.
    let baseline = decoder.prefill(&emb_full, layout_full)?;

    let decided = decide(
        cfg,
        &encoder,
        &encoder_output,
        &baseline.trace,
        &layout_full,
    )?;
    let Decided {
        decision,
        merge,
        visual_scores,
    } = decided;

    let stats_layer = (cfg.dec_n_layers - 1).min(2);
    let attention = attention_stats(
        cfg,
        &encoder_output,
        &baseline.trace,
        &layout_full,
        stats_layer,
    )?;

    // Pruned run.
    let pruned = match decision.applied_at {
        ApplySite::BeforeLlm => {
            let kept_visual = match &merge {
                Some(m) => apply_merge(&visual_embed, &decision, m)?,
                None => apply_before_llm(&visual_embed, &decision)?,
            };
            let emb = assemble_embeddings(&decoder, &workload, &kept_visual)?;
            let layout = cfg.layout(decision.kept.len());
            let original_positions;
            let opts = match cfg.position_ids {
                PositionMode::Packed => PrefillOpts::default(),
                PositionMode::Original => {
                    original_positions = positions_with_gaps(cfg, &decision.kept);
                    PrefillOpts {
                        positions: Some(&original_positions),
                        prune_at: None,
                    }
                }
            };
            decoder.prefill_opts(&emb, layout, opts)?
        }
        ApplySite::LlmLayer(k) => decoder.prefill_opts(
            &emb_full,
            layout_full,
            PrefillOpts {
                positions: None,
                prune_at: Some((k, &decision.kept)),
            },
        )?,
    };

    let baseline_last_logits = baseline.last_logits.clone();
    let pruned_last_logits = pruned.last_logits.clone();
    let last_logit_divergence = baseline_last_logits
        .iter()
        .zip(&pruned_last_logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let baseline_generated = decoder.continue_greedy(baseline, cfg.max_new_tokens)?;
    let generated = decoder.continue_greedy(pruned, cfg.max_new_tokens)?;
    let agree = generated
        .iter()
        .zip(&baseline_generated)
        .filter(|(a, b)| a == b)
        .count();
    let token_agreement = agree as f64 / cfg.max_new_tokens as f64;

    // Analytic cost of this run's decoder, baseline vs pruned schedule.
    let cost_cfg = CostModelConfig {
        n_tokens: layout_full.total(),
        d_model: cfg.dec_d_model,
        d_ffn: cfg.dec_d_ffn,
        n_layers: cfg.dec_n_layers,
    };
    let kept_total = layout_full.total() - (cfg.enc_n_patches - decision.kept.len());
    let schedule = match decision.applied_at {
        ApplySite::BeforeLlm => PruneSchedule::BeforeLlm { keep: kept_total },
        ApplySite::LlmLayer(k) => PruneSchedule::AtLayer {
            layer: k,
            keep: kept_total,
        },
    };
    let flops_baseline = pipeline_prefill_flops(&cost_cfg, PruneSchedule::None)?;
    let flops_pruned = pipeline_prefill_flops(&cost_cfg, schedule)?;
    let kv_baseline = kv_storage_bytes(&cost_cfg, PruneSchedule::None)?;
    let kv_pruned = kv_storage_bytes(&cost_cfg, schedule)?;

    let report = RunReport {
        config_hash: cfg.hash(),
        policy: decision.policy.clone(),
        seed: cfg.seed,
        reduction: cfg.reduction,
        n_patches: cfg.enc_n_patches,
        keep_count: decision.kept.len(),
        salient_recall: salient_recall(&decision.kept, &workload.salient),
        salient: workload.salient.clone(),
        decision,
        generated,
        baseline_generated,
        token_agreement,
        last_logit_divergence,
        stats_layer,
        attention,
        flops: FlopsSummary {
            baseline: flops_baseline,
            pruned: flops_pruned,
            reduction: 1.0 - flops_pruned / flops_baseline,
        },
        kv: KvSummary {
            baseline_bytes: kv_baseline,
            pruned_bytes: kv_pruned,
            baseline_mib: mib(kv_baseline),
            pruned_mib: mib(kv_pruned),
        },
    };

    Ok(PipelineRun {
        report,
        workload,
        encoder_output,
        visual_scores,
        merge,
        baseline_last_logits,
        pruned_last_logits,
    })
}

struct Decided {
    decision: PruneDecision,
    merge: Option<MergeSpec>,
    visual_scores: Option<Vec<f64>>,
}

/// Scores tokens and picks the kept set for the configured policy,
/// honoring the `keep_count` and `extract_layer` overrides.
fn decide(
    cfg: &PipelineConfig,
    encoder: &Encoder,
    encoder_output: &EncoderOutput,
    decoder_trace: &crate::model::AttentionTrace,
    layout_full: &SequenceLayout,
) -> Result<Decided, PipelineError> {
    let keep = cfg.effective_keep();
    let extract_layer = cfg.effective_extract_layer();
    let cls_scores = || -> Result<Vec<f64>, PipelineError> {
        Ok(extract_cls_attention(&encoder_output.trace, extract_layer)?.scores)
    };

    let (scores, site): (Option<Vec<f64>>, ApplySite) = match cfg.policy {
        Policy::FasterVlm | Policy::ClsMerge => (Some(cls_scores()?), ApplySite::BeforeLlm),
        Policy::ClsAtLayer2 => (Some(cls_scores()?), ApplySite::LlmLayer(2)),
        Policy::PatchAttention => (
            Some(crate::prune::patch_attention_scores(
                &encoder_output.trace,
                extract_layer,
            )?),
            ApplySite::BeforeLlm,
        ),
        Policy::Fastv => (
            Some(
                extract_visual_profile(decoder_trace, layout_full, 2, AttentionSource::Last)?
                    .scores,
            ),
            ApplySite::LlmLayer(2),
        ),
        Policy::Random => (None, ApplySite::BeforeLlm),
    };

    let (kept, tau) = match &scores {
        Some(s) => {
            let (kept, tau) = select_top_k(s, keep)?;
            (kept, Some(tau))
        }
        None => {
            let mut rng = SeededRng::new(cfg.seed ^ POLICY_STREAM);
            (rng.sample_indices(cfg.enc_n_patches, keep), None)
        }
    };

    let decision = PruneDecision {
        policy: cfg.policy.as_str().into(),
        r: cfg.reduction,
        tau,
        kept,
        applied_at: site,
    };

    let merge = if cfg.policy == Policy::ClsMerge {
        let keys = encoder.layer_keys(encoder_output, extract_layer)?;
        let patch_rows: Vec<usize> = (1..keys.rows()).collect();
        let patch_keys = keys.select_rows(&patch_rows)?;
        Some(merge_assignments(&patch_keys, &decision.kept, cfg.k_merge)?)
    } else {
        None
    };

    Ok(Decided {
        decision,
        merge,
        visual_scores: scores,
    })
}

/// Builds the decoder input: system tokens, visual rows, text tokens,
/// and the final prompt token.
fn assemble_embeddings(
    decoder: &Decoder,
    workload: &PlantedWorkload,
    visual: &DenseMatrix,
) -> Result<DenseMatrix, PipelineError> {
    let d = decoder.cfg.d_model;
    let total = workload.sys_tokens.len() + visual.rows() + workload.txt_tokens.len() + 1;
    let mut emb = DenseMatrix::zeros(total, d);
    let mut row = 0;
    let mut push = |emb: &mut DenseMatrix, src: &[f64]| {
        emb.row_mut(row).copy_from_slice(src);
        row += 1;
    };
    for &t in &workload.sys_tokens {
        push(&mut emb, decoder.token_embed.row(t as usize));
    }
    for r in 0..visual.rows() {
        push(&mut emb, visual.row(r));
    }
    for &t in &workload.txt_tokens {
        push(&mut emb, decoder.token_embed.row(t as usize));
    }
    push(
        &mut emb,
        decoder.token_embed.row(workload.out_token as usize),
    );
    Ok(emb)
}

/// Position ids preserving each kept token's pre-prune position (leaving
/// gaps where tokens were dropped).
fn positions_with_gaps(cfg: &PipelineConfig, kept: &[usize]) -> Vec<usize> {
    let mut pos = Vec::with_capacity(cfg.sys_len + kept.len() + cfg.txt_len + 1);
    pos.extend(0..cfg.sys_len);
    pos.extend(kept.iter().map(|&i| cfg.sys_len + i));
    let tail_start = cfg.sys_len + cfg.enc_n_patches;
    pos.extend(tail_start..tail_start + cfg.txt_len + 1);
    pos
}

/// Shift/dispersion statistics for the encoder's [CLS] profile and the
/// unpruned decoder's image/text/last attention profiles at `stats_layer`.
fn attention_stats(
    cfg: &PipelineConfig,
    encoder_output: &EncoderOutput,
    decoder_trace: &crate::model::AttentionTrace,
    layout: &SequenceLayout,
    stats_layer: usize,
) -> Result<Vec<LabeledStats>, PipelineError> {
    let mut rows = Vec::with_capacity(4);
    let labeled = |label: &str, scores: &[f64]| -> Result<LabeledStats, PipelineError> {
        Ok(LabeledStats {
            label: label.into(),
            shift: shift_stat(scores)?,
            dispersion: dispersion_stat(scores, TOP_SHARE_Q)?,
        })
    };
    let cls = extract_cls_attention(&encoder_output.trace, cfg.effective_extract_layer())?;
    rows.push(labeled("cls", &cls.scores)?);
    for source in [
        AttentionSource::Image,
        AttentionSource::Text,
        AttentionSource::Last,
    ] {
        let profile = extract_visual_profile(decoder_trace, layout, stats_layer, source)?;
        rows.push(labeled(source.name(), &profile.scores)?);
    }
    Ok(rows)
}

// ---- Suites ----

/// Runs every policy at every budget in `r_list` under the same seed and
/// models. The `keep_count` override is cleared so budgets actually vary;
/// merge rows are skipped at budgets too tight to merge into
/// (`keep_count <= k_merge`).
pub fn run_ablation(cfg: &PipelineConfig, r_list: &[f64]) -> Result<Vec<RunReport>, PipelineError> {
    let mut reports = Vec::new();
    for &r in r_list {
        for policy in ALL_POLICIES {
            let mut c = cfg.clone();
            c.policy = policy;
            c.reduction = r;
            c.keep_count = None;
            if policy == Policy::ClsMerge && keep_count(c.enc_n_patches, r) <= c.k_merge {
                continue;
            }
            reports.push(run_pipeline(&c)?);
        }
    }
    Ok(reports)
}

/// One row of a budget sweep for a fixed policy.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub r: f64,
    pub keep: usize,
    pub salient_recall: f64,
    pub token_agreement: f64,
    pub last_logit_divergence: f64,
    pub flops_reduction: f64,
}

/// Sweeps the configured policy across budgets.
pub fn sweep(cfg: &PipelineConfig, r_list: &[f64]) -> Result<Vec<SweepRow>, PipelineError> {
    let mut rows = Vec::with_capacity(r_list.len());
    for &r in r_list {
        let mut c = cfg.clone();
        c.reduction = r;
        c.keep_count = None;
        let report = run_pipeline(&c)?;
        rows.push(SweepRow {
            policy: report.policy,
            r,
            keep: report.keep_count,
            salient_recall: report.salient_recall,
            token_agreement: report.token_agreement,
            last_logit_divergence: report.last_logit_divergence,
            flops_reduction: report.flops.reduction,
        });
    }
    Ok(rows)
}

/// Renders sweep rows as CSV with header
/// `policy,R,keep,salient_recall,token_agreement,last_logit_divergence,flops_reduction`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "policy,R,keep,salient_recall,token_agreement,last_logit_divergence,flops_reduction\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.policy,
            r.r,
            r.keep,
            r.salient_recall,
            r.token_agreement,
            r.last_logit_divergence,
            r.flops_reduction
        ));
    }
    out
}
