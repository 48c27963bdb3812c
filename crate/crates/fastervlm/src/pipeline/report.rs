//! Run reports: everything one pipeline run produced, serializable to
//! byte-stable JSON.
//!
//! Reports deliberately carry no wall-clock timings — two runs of the
//! same config must serialize to identical bytes so diffs mean something.

use serde::Serialize;

use crate::analysis::LabeledStats;
use crate::prune::PruneDecision;

/// Prefill cost of this run's decoder under the analytic model, baseline
/// vs pruned schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsSummary {
    pub baseline: f64,
    pub pruned: f64,
    /// `1 - pruned/baseline`.
    pub reduction: f64,
}

/// KV-cache footprint after prefill, baseline vs pruned schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvSummary {
    pub baseline_bytes: u64,
    pub pruned_bytes: u64,
    pub baseline_mib: f64,
    pub pruned_mib: f64,
}

/// The complete result of one pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// Hash of the canonical config, for provenance.
    pub config_hash: String,
    pub policy: String,
    pub seed: u64,
    pub reduction: f64,
    pub n_patches: usize,
    pub keep_count: usize,
    /// Which tokens were pruned, and where.
    pub decision: PruneDecision,
    /// The planted high-salience patch indices.
    pub salient: Vec<usize>,
    /// Fraction of planted patches that survived pruning.
    pub salient_recall: f64,
    /// Greedy tokens from the pruned run.
    pub generated: Vec<u32>,
    /// Greedy tokens from the unpruned reference run.
    pub baseline_generated: Vec<u32>,
    /// Fraction of generated positions agreeing with the baseline.
    pub token_agreement: f64,
    /// Max |Δ| between baseline and pruned logits at the last prompt
    /// position.
    pub last_logit_divergence: f64,
    /// Decoder layer the attention statistics below are read from.
    pub stats_layer: usize,
    /// Shift/dispersion statistics of the unpruned decoder's visual
    /// attention (plus the encoder's [CLS] profile).
    pub attention: Vec<LabeledStats>,
    pub flops: FlopsSummary,
    pub kv: KvSummary,
}

impl RunReport {
    /// Pretty JSON with object keys sorted — byte-identical across runs
    /// of the same config.
    pub fn to_json(&self) -> String {
        // serde_json's default Map is a BTreeMap, so serializing through
        // Value sorts every object's keys.
        let value = serde_json::to_value(self).expect("report is always serializable");
        let mut out = serde_json::to_string_pretty(&value).expect("value renders");
        out.push('\n');
        out
    }
}
