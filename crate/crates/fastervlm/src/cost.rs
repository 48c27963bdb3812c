//! Analytic FLOPs and KV-cache cost model for a decoder-only transformer
//! at LLaVA-ish scale.
//!
//! Per-layer prefill cost over a length-`n` sequence with model width `d`
//! and FFN width `m`:
//!
//! ```text
//! f(n) = 8·n·d² + 4·n²·d + 6·n·d·m
//! ```
//!
//! (QKVO projections, attention score + value matmuls, two FFN matmuls;
//! multiply-accumulates counted as 2 FLOPs.) Pruning the sequence to
//! `keep` tokens before layer `k` costs `k·f(n) + (L−k)·f(keep)`.
//!
//! KV-cache storage assumes 2-byte elements: each cached token holds a
//! d-vector K and a d-vector V per layer, i.e. `4·d` bytes per token per
//! layer.

use serde::Serialize;
use thiserror::Error;

use crate::prune::keep_count;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cost model field {field} must be at least 1, got {got}")]
    BadConfig { field: &'static str, got: usize },
    #[error("keep {keep} outside 1..={n} tokens")]
    KeepOutOfRange { keep: usize, n: usize },
    #[error("prune layer {layer} outside 0..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("reduction ratio {r} outside [0, 1]")]
    BadReduction { r: f64 },
}

/// Shape of the transformer the costs are computed for. The default is a
/// 7B-class decoder fed five images' worth of visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostModelConfig {
    /// Prefill sequence length before any pruning.
    pub n_tokens: usize,
    /// Model (embedding) width d.
    pub d_model: usize,
    /// FFN hidden width m.
    pub d_ffn: usize,
    /// Decoder depth L.
    pub n_layers: usize,
}

impl Default for CostModelConfig {
    fn default() -> Self {
        CostModelConfig {
            n_tokens: 2880,
            d_model: 4096,
            d_ffn: 11008,
            n_layers: 32,
        }
    }
}

impl CostModelConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        for (field, got) in [
            ("n_tokens", self.n_tokens),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_layers", self.n_layers),
        ] {
            if got == 0 {
                return Err(CostError::BadConfig { field, got });
            }
        }
        Ok(())
    }
}

/// When and how hard the sequence is pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PruneSchedule {
    /// No pruning: every layer sees all `n_tokens`.
    None,
    /// The decoder only ever sees `keep` tokens.
    BeforeLlm { keep: usize },
    /// Layers `0..layer` see all tokens, layers `layer..` see `keep`.
    AtLayer { layer: usize, keep: usize },
}

impl PruneSchedule {
    fn validate(&self, cfg: &CostModelConfig) -> Result<(), CostError> {
        let check_keep = |keep: usize| {
            if keep == 0 || keep > cfg.n_tokens {
                Err(CostError::KeepOutOfRange {
                    keep,
                    n: cfg.n_tokens,
                })
            } else {
                Ok(())
            }
        };
        match *self {
            PruneSchedule::None => Ok(()),
            PruneSchedule::BeforeLlm { keep } => check_keep(keep),
            PruneSchedule::AtLayer { layer, keep } => {
                check_keep(keep)?;
                if layer > cfg.n_layers {
                    return Err(CostError::LayerOutOfRange {
                        layer,
                        n_layers: cfg.n_layers,
                    });
                }
                Ok(())
            }
        }
    }
}

// ---- FLOPs ----

/// Prefill FLOPs of one transformer layer over `n` tokens:
/// `8nd² + 4n²d + 6ndm`.
pub fn prefill_layer_flops(n: usize, d: usize, m: usize) -> f64 {
    let (n, d, m) = (n as f64, d as f64, m as f64);
    8.0 * n * d * d + 4.0 * n * n * d + 6.0 * n * d * m
}

/// Single-token decode FLOPs of one layer against an `n`-token cache, in
/// the conventional form `8d² + 4nd + 6ndm`. Note the FFN term carries an
/// `n` factor; see [`decode_layer_flops_corrected`] for the variant where
/// the FFN cost is independent of cache length.
pub fn decode_layer_flops(n: usize, d: usize, m: usize) -> f64 {
    let (n, d, m) = (n as f64, d as f64, m as f64);
    8.0 * d * d + 4.0 * n * d + 6.0 * n * d * m
}

/// Single-token decode FLOPs with the FFN term `6dm` not scaled by cache
/// length — the FFN runs once per generated token regardless of how long
/// the cache is.
pub fn decode_layer_flops_corrected(n: usize, d: usize, m: usize) -> f64 {
    let (n, d, m) = (n as f64, d as f64, m as f64);
    8.0 * d * d + 4.0 * n * d + 6.0 * d * m
}

/// Total prefill FLOPs across all layers under a prune schedule.
pub fn pipeline_prefill_flops(
    cfg: &CostModelConfig,
    schedule: PruneSchedule,
) -> Result<f64, CostError> {
    cfg.validate()?;
    schedule.validate(cfg)?;
    let full = prefill_layer_flops(cfg.n_tokens, cfg.d_model, cfg.d_ffn);
    let total = match schedule {
        PruneSchedule::None => cfg.n_layers as f64 * full,
        PruneSchedule::BeforeLlm { keep } => {
            cfg.n_layers as f64 * prefill_layer_flops(keep, cfg.d_model, cfg.d_ffn)
        }
        PruneSchedule::AtLayer { layer, keep } => {
            layer as f64 * full
                + (cfg.n_layers - layer) as f64 * prefill_layer_flops(keep, cfg.d_model, cfg.d_ffn)
        }
    };
    Ok(total)
}

/// Closed-form prefill FLOPs reduction when a fraction `r` of the tokens
/// is pruned before the decoder (treating the kept count `n(1-r)` as
/// continuous):
///
/// ```text
/// F(r) = r + (2n / (4d + 2n + 3m)) · (r - r²)
/// ```
///
/// The second term is the superlinear saving from the quadratic attention
/// term. Exactly matches `1 - pipeline(keep)/pipeline(all)` whenever
/// `n·(1-r)` is an integer.
pub fn flops_reduction_closed_form(cfg: &CostModelConfig, r: f64) -> Result<f64, CostError> {
    cfg.validate()?;
    if !r.is_finite() || !(0.0..=1.0).contains(&r) {
        return Err(CostError::BadReduction { r });
    }
    let n = cfg.n_tokens as f64;
    let d = cfg.d_model as f64;
    let m = cfg.d_ffn as f64;
    let coeff = 2.0 * n / (4.0 * d + 2.0 * n + 3.0 * m);
    Ok(r + coeff * (r - r * r))
}

// ---- KV cache ----

/// Bytes of KV cache after prefill under a prune schedule: `4·d` bytes
/// per cached token per layer (K and V, 2-byte elements).
pub fn kv_storage_bytes(cfg: &CostModelConfig, schedule: PruneSchedule) -> Result<u64, CostError> {
    cfg.validate()?;
    schedule.validate(cfg)?;
    let per_token_layer = 4 * cfg.d_model as u64;
    let bytes = match schedule {
        PruneSchedule::None => cfg.n_layers as u64 * cfg.n_tokens as u64 * per_token_layer,
        PruneSchedule::BeforeLlm { keep } => cfg.n_layers as u64 * keep as u64 * per_token_layer,
        PruneSchedule::AtLayer { layer, keep } => {
            let full = layer as u64 * cfg.n_tokens as u64;
            let pruned = (cfg.n_layers - layer) as u64 * keep as u64;
            (full + pruned) * per_token_layer
        }
    };
    Ok(bytes)
}

/// Bytes → MiB.
pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

// ---- Tables ----

/// One line of the cost comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsRow {
    pub policy: String,
    pub r: f64,
    pub keep: usize,
    pub prefill_flops: f64,
    /// Fractional FLOPs saving vs the unpruned baseline.
    pub reduction: f64,
    pub kv_bytes: u64,
    pub kv_mib: f64,
}

/// Cost table: an unpruned baseline row, then — for each nonzero `r` —
/// one row pruning before the decoder and one row pruning at decoder
/// layer 2 with the same kept count `max(1, floor(n(1-r)))`.
pub fn flops_table(cfg: &CostModelConfig, r_list: &[f64]) -> Result<Vec<FlopsRow>, CostError> {
    cfg.validate()?;
    let baseline = pipeline_prefill_flops(cfg, PruneSchedule::None)?;
    let row = |policy: &str, r: f64, schedule: PruneSchedule, keep: usize| {
        let flops = pipeline_prefill_flops(cfg, schedule)?;
        let bytes = kv_storage_bytes(cfg, schedule)?;
        Ok(FlopsRow {
            policy: policy.into(),
            r,
            keep,
            prefill_flops: flops,
            reduction: 1.0 - flops / baseline,
            kv_bytes: bytes,
            kv_mib: mib(bytes),
        })
    };
    let mut rows = vec![row("none", 0.0, PruneSchedule::None, cfg.n_tokens)?];
    for &r in r_list {
        if !r.is_finite() || !(0.0..1.0).contains(&r) {
            return Err(CostError::BadReduction { r });
        }
        if r == 0.0 {
            continue;
        }
        let keep = keep_count(cfg.n_tokens, r);
        rows.push(row(
            "faster_vlm",
            r,
            PruneSchedule::BeforeLlm { keep },
            keep,
        )?);
        rows.push(row(
            "fastv",
            r,
            PruneSchedule::AtLayer { layer: 2, keep },
            keep,
        )?);
    }
    Ok(rows)
}

/// Renders a cost table as CSV with header
/// `policy,R,keep,prefill_flops,reduction,kv_mib`.
pub fn flops_csv(rows: &[FlopsRow]) -> String {
    let mut out = String::from("policy,R,keep,prefill_flops,reduction,kv_mib\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.policy, r.r, r.keep, r.prefill_flops, r.reduction, r.kv_mib
        ));
    }
    out
}
