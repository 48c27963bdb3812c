//! Visual-token pruning policies.
//!
//! Everything funnels through one selection rule: keep the
//! `max(1, floor(n * (1 - R)))` highest-scoring tokens, breaking score ties
//! toward the lower index, and report the keep-count-th largest score as
//! the threshold tau. Policies differ only in where their scores come from
//! and where the pruning is applied:
//!
//! * `faster_vlm` — encoder [CLS] attention (penultimate layer), applied
//!   before the decoder ever sees the image tokens;
//! * `fastv` — the decoder's own last-row attention at layer 2, applied at
//!   layer 2 (layers 0–1 still compute over everything);
//! * `cls_at_layer2` — [CLS] scores, but applied at decoder layer 2;
//! * `patch_attention` — mean patch→patch attention instead of [CLS];
//! * `cls_merge` — [CLS] selection plus key-similarity merging of pruned
//!   tokens into their nearest kept token;
//! * `random` — seeded uniform choice, the control.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::model::{AttentionTrace, ModelError, SequenceLayout};
use crate::probe::{extract_cls_attention, extract_visual_profile, AttentionSource, ProbeError};
use crate::tensor::{DenseMatrix, SeededRng, TensorError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("reduction ratio must lie in [0, 1), got {r}")]
    InvalidReduction { r: f64 },
    #[error("scores must be non-empty")]
    EmptyScores,
    #[error("score {value} at index {index} is not a finite non-negative number")]
    InvalidScore { index: usize, value: f64 },
    #[error("trace has {n_layers} layers; this policy needs at least {needed}")]
    TooShallow { n_layers: usize, needed: usize },
    #[error("k_merge is {k_merge} but must be in 1..keep_count ({keep_count})")]
    InvalidKMerge { k_merge: usize, keep_count: usize },
    #[error("keys matrix has {got} rows, expected one per scored token ({expected})")]
    KeysRows { expected: usize, got: usize },
    #[error("kept index {index} out of range for {len} embedding rows")]
    KeptOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---- Decision types ----

/// Where a pruning decision takes effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplySite {
    /// Tokens are dropped from the embedding sequence before the decoder
    /// runs at all.
    BeforeLlm,
    /// Tokens survive through decoder layers `0..k` and are dropped
    /// entering layer k.
    LlmLayer(usize),
}

impl std::fmt::Display for ApplySite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApplySite::BeforeLlm => write!(f, "before_llm"),
            ApplySite::LlmLayer(k) => write!(f, "llm_layer_{k}"),
        }
    }
}

impl Serialize for ApplySite {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// The outcome of running a policy: which tokens survive and under what
/// budget. Serializes to JSON as
/// `{"policy": ..., "R": ..., "tau": ..., "kept": [...], "applied_at": ...}`;
/// `tau` is null for policies with no score threshold (random).
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    pub policy: String,
    pub r: f64,
    pub tau: Option<f64>,
    /// Surviving token indices, strictly ascending.
    pub kept: Vec<usize>,
    pub applied_at: ApplySite,
}

impl Serialize for PruneDecision {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("PruneDecision", 5)?;
        st.serialize_field("policy", &self.policy)?;
        st.serialize_field("R", &self.r)?;
        st.serialize_field("tau", &self.tau)?;
        st.serialize_field("kept", &self.kept)?;
        st.serialize_field("applied_at", &self.applied_at)?;
        st.end()
    }
}

impl PruneDecision {
    pub fn keep_count(&self) -> usize {
        self.kept.len()
    }
}

/// One pruned token folded into a kept token. `weight` is the (clamped)
/// cosine similarity used in the weighted mean; a weight of 0 means the
/// token is assigned but contributes nothing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeAssignment {
    pub pruned: usize,
    pub kept: usize,
    pub weight: f64,
}

/// Assignment of every pruned token to exactly one kept token, sorted by
/// pruned index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeSpec {
    pub assignments: Vec<MergeAssignment>,
}

// ---- Budget and selection ----

/// Tokens surviving reduction ratio `r` out of `n`: `max(1, floor(n(1-r)))`
/// evaluated as on the real line. `1 - r` is already rounded once, so the
/// f64 product can land a few ulps below the integer the rule names (e.g.
/// `50 * (1 - 0.9)` gives 4.999…); values that close to an integer snap to
/// it before flooring.
/// At least one token always survives.
pub fn keep_count(n: usize, r: f64) -> usize {
    let exact = (n as f64) * (1.0 - r);
    let snapped = if (exact - exact.round()).abs() < 1e-9 {
        exact.round()
    } else {
        exact.floor()
    };
    snapped.max(1.0) as usize
}

fn validate_reduction(r: f64) -> Result<(), PruneError> {
    if !r.is_finite() || !(0.0..1.0).contains(&r) {
        return Err(PruneError::InvalidReduction { r });
    }
    Ok(())
}

fn validate_scores(scores: &[f64]) -> Result<(), PruneError> {
    if scores.is_empty() {
        return Err(PruneError::EmptyScores);
    }
    for (index, &value) in scores.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(PruneError::InvalidScore { index, value });
        }
    }
    Ok(())
}

/// Indices ranked by descending score, ties toward the lower index.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    idx
}

/// The score threshold implied by budget `r`: returns
/// `(tau, keep_count)` where tau is the keep-count-th largest score, so
/// every kept token scores at least tau.
pub fn threshold_for_budget(scores: &[f64], r: f64) -> Result<(f64, usize), PruneError> {
    validate_reduction(r)?;
    validate_scores(scores)?;
    let k = keep_count(scores.len(), r);
    let ranked = ranked_indices(scores);
    Ok((scores[ranked[k - 1]], k))
}

/// Keeps exactly the `k` top-scoring indices (ties toward the lower
/// index), returned ascending together with the threshold tau.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<(Vec<usize>, f64), PruneError> {
    validate_scores(scores)?;
    if k == 0 || k > scores.len() {
        return Err(PruneError::KeptOutOfRange {
            index: k,
            len: scores.len(),
        });
    }
    let ranked = ranked_indices(scores);
    let tau = scores[ranked[k - 1]];
    let mut kept = ranked[..k].to_vec();
    kept.sort_unstable();
    Ok((kept, tau))
}

/// Budget-driven top-score selection: the shared core of every
/// score-based policy.
pub fn select_tokens(scores: &[f64], r: f64) -> Result<PruneDecision, PruneError> {
    validate_reduction(r)?;
    validate_scores(scores)?;
    let k = keep_count(scores.len(), r);
    let (kept, tau) = select_top_k(scores, k)?;
    Ok(PruneDecision {
        policy: "topk".into(),
        r,
        tau: Some(tau),
        kept,
        applied_at: ApplySite::BeforeLlm,
    })
}

fn decision_from_scores(
    scores: &[f64],
    r: f64,
    policy: &str,
    applied_at: ApplySite,
) -> Result<PruneDecision, PruneError> {
    let mut d = select_tokens(scores, r)?;
    d.policy = policy.into();
    d.applied_at = applied_at;
    Ok(d)
}

// ---- Policies ----

/// 0-based penultimate layer of a trace (the default extraction point).
fn penultimate(trace: &AttentionTrace) -> Result<usize, PruneError> {
    let n_layers = trace.layer_count();
    if n_layers < 2 {
        return Err(PruneError::TooShallow {
            n_layers,
            needed: 2,
        });
    }
    Ok(n_layers - 2)
}

/// Rank image tokens by encoder [CLS] attention (penultimate layer) and
/// prune before the decoder: the headline policy.
pub fn faster_vlm_policy(
    encoder_trace: &AttentionTrace,
    r: f64,
) -> Result<PruneDecision, PruneError> {
    let layer = penultimate(encoder_trace)?;
    let cls = extract_cls_attention(encoder_trace, layer)?;
    decision_from_scores(&cls.scores, r, "faster_vlm", ApplySite::BeforeLlm)
}

/// Rank image tokens by the decoder's last-row attention at layer 2 and
/// prune at layer 2. Needs an unpruned decoder trace at least 3 layers
/// deep.
pub fn fastv_policy(
    decoder_trace: &AttentionTrace,
    layout: &SequenceLayout,
    r: f64,
) -> Result<PruneDecision, PruneError> {
    if decoder_trace.layer_count() < 3 {
        return Err(PruneError::TooShallow {
            n_layers: decoder_trace.layer_count(),
            needed: 3,
        });
    }
    let profile = extract_visual_profile(decoder_trace, layout, 2, AttentionSource::Last)?;
    decision_from_scores(&profile.scores, r, "fastv", ApplySite::LlmLayer(2))
}

/// Uniformly random kept set (ties to nothing — there are no scores), the
/// ablation control. Deterministic for a given rng state.
pub fn random_policy(rng: &mut SeededRng, n: usize, r: f64) -> Result<PruneDecision, PruneError> {
    validate_reduction(r)?;
    if n == 0 {
        return Err(PruneError::EmptyScores);
    }
    let k = keep_count(n, r);
    Ok(PruneDecision {
        policy: "random".into(),
        r,
        tau: None,
        kept: rng.sample_indices(n, k),
        applied_at: ApplySite::BeforeLlm,
    })
}

/// Mean attention each patch receives from the other patch rows (encoder,
/// penultimate layer, [CLS] row and column excluded).
pub fn patch_attention_scores(
    encoder_trace: &AttentionTrace,
    layer: usize,
) -> Result<Vec<f64>, PruneError> {
    let mean = encoder_trace.head_mean(layer)?;
    let n_tokens = mean.rows();
    if n_tokens < 2 {
        return Err(PruneError::EmptyScores);
    }
    let n_patches = n_tokens - 1;
    let inv = 1.0 / n_patches as f64;
    let scores = (1..n_tokens)
        .map(|col| (1..n_tokens).map(|row| mean.get(row, col)).sum::<f64>() * inv)
        .collect();
    Ok(scores)
}

/// Rank image tokens by patch→patch attention instead of [CLS] attention;
/// otherwise identical to [`faster_vlm_policy`].
pub fn patch_attention_policy(
    encoder_trace: &AttentionTrace,
    r: f64,
) -> Result<PruneDecision, PruneError> {
    let layer = penultimate(encoder_trace)?;
    let scores = patch_attention_scores(encoder_trace, layer)?;
    decision_from_scores(&scores, r, "patch_attention", ApplySite::BeforeLlm)
}

/// [CLS]-attention ranking, but applied at decoder layer 2 rather than
/// before the decoder — isolates *where* pruning happens from *how* tokens
/// are ranked.
pub fn cls_at_layer2_policy(
    encoder_trace: &AttentionTrace,
    r: f64,
) -> Result<PruneDecision, PruneError> {
    let layer = penultimate(encoder_trace)?;
    let cls = extract_cls_attention(encoder_trace, layer)?;
    decision_from_scores(&cls.scores, r, "cls_at_layer2", ApplySite::LlmLayer(2))
}

/// [CLS]-attention selection plus merging: every pruned token is assigned
/// to its most key-similar kept token (cosine over `keys`, ties toward the
/// lower kept index) with weight `max(0, cosine)`. Each kept token absorbs
/// at most `k_merge` pruned tokens — beyond that, the lowest-weight
/// assignments keep weight 0 (pure pruning for them).
///
/// `keys` must hold one row per scored token (e.g. encoder keys at the
/// extraction layer, [CLS] row excluded).
pub fn cls_merge_policy(
    encoder_trace: &AttentionTrace,
    keys: &DenseMatrix,
    r: f64,
    k_merge: usize,
) -> Result<(PruneDecision, MergeSpec), PruneError> {
    let layer = penultimate(encoder_trace)?;
    let cls = extract_cls_attention(encoder_trace, layer)?;
    let n = cls.scores.len();
    if keys.rows() != n {
        return Err(PruneError::KeysRows {
            expected: n,
            got: keys.rows(),
        });
    }
    let decision = decision_from_scores(&cls.scores, r, "cls_merge", ApplySite::BeforeLlm)?;
    let merge = merge_assignments(keys, &decision.kept, k_merge)?;
    Ok((decision, merge))
}

/// Assigns every token outside `kept` to its most key-similar kept token
/// (cosine over `keys` rows, ties toward the lower kept index) with
/// weight `max(0, cosine)`. Each kept token absorbs at most `k_merge`
/// partners — beyond that, the lowest-weight assignments keep weight 0.
pub fn merge_assignments(
    keys: &DenseMatrix,
    kept: &[usize],
    k_merge: usize,
) -> Result<MergeSpec, PruneError> {
    if k_merge == 0 || k_merge >= kept.len() {
        return Err(PruneError::InvalidKMerge {
            k_merge,
            keep_count: kept.len(),
        });
    }
    let n = keys.rows();
    for &i in kept {
        if i >= n {
            return Err(PruneError::KeptOutOfRange { index: i, len: n });
        }
    }
    let mut assignments: Vec<MergeAssignment> = Vec::new();
    for pruned in (0..n).filter(|i| !kept.contains(i)) {
        let mut best_kept = kept[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &k in kept {
            let sim = cosine(keys.row(pruned), keys.row(k));
            if sim > best_sim {
                best_sim = sim;
                best_kept = k;
            }
        }
        assignments.push(MergeAssignment {
            pruned,
            kept: best_kept,
            weight: best_sim.max(0.0),
        });
    }

    // Cap each kept token at its k_merge highest-weight partners; the
    // overflow stays assigned but contributes weight 0.
    for &k in kept {
        let mut members: Vec<usize> = (0..assignments.len())
            .filter(|&i| assignments[i].kept == k)
            .collect();
        members.sort_by(|&a, &b| {
            assignments[b]
                .weight
                .partial_cmp(&assignments[a].weight)
                .unwrap()
                .then(assignments[a].pruned.cmp(&assignments[b].pruned))
        });
        for &i in members.iter().skip(k_merge) {
            assignments[i].weight = 0.0;
        }
    }

    assignments.sort_by_key(|a| a.pruned);
    Ok(MergeSpec { assignments })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = crate::tensor::dot(a, b);
    let na = crate::tensor::dot(a, a).sqrt();
    let nb = crate::tensor::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

// ---- Application ----

/// Drops pruned rows from a visual embedding matrix: row order follows
/// `decision.kept`.
pub fn apply_before_llm(
    embeddings: &DenseMatrix,
    decision: &PruneDecision,
) -> Result<DenseMatrix, PruneError> {
    for &i in &decision.kept {
        if i >= embeddings.rows() {
            return Err(PruneError::KeptOutOfRange {
                index: i,
                len: embeddings.rows(),
            });
        }
    }
    Ok(embeddings.select_rows(&decision.kept)?)
}

/// Like [`apply_before_llm`], but each kept row becomes the
/// similarity-weighted mean of itself (weight 1) and its assigned pruned
/// rows.
pub fn apply_merge(
    embeddings: &DenseMatrix,
    decision: &PruneDecision,
    merge: &MergeSpec,
) -> Result<DenseMatrix, PruneError> {
    let mut out = apply_before_llm(embeddings, decision)?;
    for a in &merge.assignments {
        if a.pruned >= embeddings.rows() {
            return Err(PruneError::KeptOutOfRange {
                index: a.pruned,
                len: embeddings.rows(),
            });
        }
    }
    for (row_idx, &kept) in decision.kept.iter().enumerate() {
        let mut acc: Vec<f64> = embeddings.row(kept).to_vec();
        let mut total_w = 1.0;
        for a in merge.assignments.iter().filter(|a| a.kept == kept) {
            if a.weight > 0.0 {
                for (acc_v, &src) in acc.iter_mut().zip(embeddings.row(a.pruned)) {
                    *acc_v += a.weight * src;
                }
                total_w += a.weight;
            }
        }
        let inv = 1.0 / total_w;
        for (dst, v) in out.row_mut(row_idx).iter_mut().zip(acc) {
            *dst = v * inv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionTrace;

    fn trace_with_cls_row(cls_row: &[f64], layers: usize) -> AttentionTrace {
        // Builds a trace whose penultimate layer carries `cls_row` as the
        // [CLS] attention row; remaining rows are uniform.
        let n = cls_row.len();
        let mut t = AttentionTrace::new();
        for layer in 0..layers {
            let mut m = DenseMatrix::new(n, n, vec![1.0 / n as f64; n * n]).unwrap();
            if layer == layers - 2 {
                m.row_mut(0).copy_from_slice(cls_row);
            }
            t.push_layer(vec![m]);
        }
        t
    }

    // ---- threshold_for_budget ----

    #[test]
    fn threshold_examples() {
        let (tau, k) = threshold_for_budget(&[0.1, 0.4, 0.2, 0.3], 0.5).unwrap();
        assert_eq!((tau, k), (0.3, 2));
        let (tau, k) = threshold_for_budget(&[0.1, 0.4, 0.2, 0.3], 0.0).unwrap();
        assert_eq!(k, 4);
        assert_eq!(tau, 0.1, "R=0 keeps everything; tau is the minimum");
    }

    #[test]
    fn keep_count_floors_and_saturates() {
        assert_eq!(keep_count(576, 0.9), 57);
        assert_eq!(keep_count(576, 0.95), 28);
        assert_eq!(keep_count(4, 0.99), 1, "at least one token survives");
        assert_eq!(keep_count(4, 0.0), 4);
        // n(1-r) integral on the real line but a few ulps low in f64:
        // the budget follows the rule, not the rounding.
        assert_eq!(keep_count(50, 0.9), 5);
        assert_eq!(keep_count(20, 0.9), 2);
    }

    #[test]
    fn invalid_reductions_are_rejected() {
        for r in [1.0, 1.5, -0.1, f64::NAN] {
            assert!(
                threshold_for_budget(&[0.5, 0.5], r).is_err(),
                "R={r} should be rejected"
            );
        }
    }

    #[test]
    fn invalid_scores_are_rejected() {
        assert!(matches!(
            threshold_for_budget(&[], 0.5),
            Err(PruneError::EmptyScores)
        ));
        assert!(matches!(
            threshold_for_budget(&[0.1, -0.2], 0.5),
            Err(PruneError::InvalidScore { index: 1, .. })
        ));
        assert!(threshold_for_budget(&[0.1, f64::INFINITY], 0.5).is_err());
    }

    // ---- select_tokens ----

    #[test]
    fn select_keeps_top_half_ascending() {
        let d = select_tokens(&[0.1, 0.4, 0.2, 0.3], 0.5).unwrap();
        assert_eq!(d.kept, vec![1, 3]);
        assert_eq!(d.tau, Some(0.3));
    }

    #[test]
    fn select_breaks_ties_toward_lower_index() {
        let d = select_tokens(&[0.25, 0.25, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(d.kept, vec![0, 1]);
    }

    #[test]
    fn select_r_zero_keeps_all() {
        let d = select_tokens(&[0.3, 0.1, 0.6], 0.0).unwrap();
        assert_eq!(d.kept, vec![0, 1, 2]);
    }

    #[test]
    fn kept_scores_meet_tau() {
        let scores = [0.05, 0.3, 0.3, 0.1, 0.25];
        let d = select_tokens(&scores, 0.6).unwrap();
        let tau = d.tau.unwrap();
        for &i in &d.kept {
            assert!(scores[i] >= tau);
        }
    }

    #[test]
    fn decision_serializes_with_upper_case_r_and_null_tau_for_random() {
        let mut rng = SeededRng::new(1);
        let d = random_policy(&mut rng, 4, 0.5).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"R\":0.5"), "{json}");
        assert!(json.contains("\"tau\":null"), "{json}");
        assert!(json.contains("\"applied_at\":\"before_llm\""), "{json}");
    }

    // ---- random_policy ----

    #[test]
    fn random_policy_is_deterministic_per_seed() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        assert_eq!(
            random_policy(&mut a, 20, 0.7).unwrap().kept,
            random_policy(&mut b, 20, 0.7).unwrap().kept
        );
    }

    #[test]
    fn random_policy_keeps_each_index_with_the_right_frequency() {
        // n=10, R=0.5 → keep 5, so each index survives with p=0.5. Over
        // 10^4 trials the frequency lands within 3σ = 3·sqrt(.25/1e4).
        let trials = 10_000;
        let mut counts = [0usize; 10];
        let mut rng = SeededRng::new(7);
        for _ in 0..trials {
            for i in random_policy(&mut rng, 10, 0.5).unwrap().kept {
                counts[i] += 1;
            }
        }
        let sigma = (0.25f64 / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - 0.5).abs() <= 3.0 * sigma,
                "index {i}: frequency {freq} outside 0.5 ± {}",
                3.0 * sigma
            );
        }
    }

    // ---- score-based policies ----

    #[test]
    fn faster_vlm_keeps_dominant_patches() {
        // Patches 3 and 7 dominate the [CLS] row; R=0.75 over 8 patches
        // keeps exactly 2.
        let mut cls_row = vec![0.02; 9];
        cls_row[0] = 0.0;
        cls_row[3 + 1] = 0.4;
        cls_row[7 + 1] = 0.46;
        let trace = trace_with_cls_row(&cls_row, 2);
        let d = faster_vlm_policy(&trace, 0.75).unwrap();
        assert_eq!(d.kept, vec![3, 7]);
        assert_eq!(d.applied_at, ApplySite::BeforeLlm);
        assert_eq!(d.policy, "faster_vlm");
    }

    #[test]
    fn faster_vlm_uses_the_penultimate_layer() {
        // Same dominant patches on the penultimate layer of a 3-layer
        // trace; the final layer is uniform and must be ignored.
        let mut cls_row = vec![0.01; 6];
        cls_row[2] = 0.5;
        cls_row[4] = 0.45;
        let trace = trace_with_cls_row(&cls_row, 3);
        let d = faster_vlm_policy(&trace, 0.6).unwrap();
        assert_eq!(d.kept, vec![1, 3]);
    }

    #[test]
    fn cls_at_layer2_same_ranking_different_site() {
        let mut cls_row = vec![0.02; 9];
        cls_row[4] = 0.5;
        cls_row[8] = 0.4;
        let trace = trace_with_cls_row(&cls_row, 2);
        let a = faster_vlm_policy(&trace, 0.75).unwrap();
        let b = cls_at_layer2_policy(&trace, 0.75).unwrap();
        assert_eq!(a.kept, b.kept);
        assert_eq!(b.applied_at, ApplySite::LlmLayer(2));
    }

    #[test]
    fn fastv_requires_three_layers() {
        let trace = trace_with_cls_row(&[0.2; 5], 2);
        let layout = SequenceLayout {
            sys_len: 0,
            img_len: 4,
            txt_len: 0,
            out_len: 1,
        };
        assert!(matches!(
            fastv_policy(&trace, &layout, 0.5),
            Err(PruneError::TooShallow {
                n_layers: 2,
                needed: 3
            })
        ));
    }

    #[test]
    fn fastv_ranks_by_last_row_at_layer_2() {
        // 3-layer trace over [img=4; out=1]; layer 2's last row favors
        // visual positions 2 and 0.
        let n = 5;
        let mut t = AttentionTrace::new();
        for layer in 0..3 {
            let mut m = DenseMatrix::new(n, n, vec![1.0 / n as f64; n * n]).unwrap();
            if layer == 2 {
                m.row_mut(n - 1)
                    .copy_from_slice(&[0.3, 0.05, 0.45, 0.1, 0.1]);
            }
            t.push_layer(vec![m]);
        }
        let layout = SequenceLayout {
            sys_len: 0,
            img_len: 4,
            txt_len: 0,
            out_len: 1,
        };
        let d = fastv_policy(&t, &layout, 0.5).unwrap();
        assert_eq!(d.kept, vec![0, 2]);
        assert_eq!(d.applied_at, ApplySite::LlmLayer(2));
    }

    #[test]
    fn patch_attention_scores_hand_computed() {
        // 1 [CLS] + 2 patches, single head, hand-set matrix.
        let m = DenseMatrix::from_rows(&[
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.6, 0.3],
            vec![0.4, 0.2, 0.4],
        ])
        .unwrap();
        let mut t = AttentionTrace::new();
        t.push_layer(vec![m]);
        let scores = patch_attention_scores(&t, 0).unwrap();
        assert!((scores[0] - (0.6 + 0.2) / 2.0).abs() < 1e-12);
        assert!((scores[1] - (0.3 + 0.4) / 2.0).abs() < 1e-12);
    }

    // ---- merge ----

    fn keys_3(rows: [[f64; 2]; 3]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.map(|r| r.to_vec())).unwrap()
    }

    #[test]
    fn merge_hand_computed_weighted_mean() {
        // 3 patches, keep 2 (R=0.3): kept {0,1}, pruned {2}. Keys make
        // patch 2 closest to kept 0 with cosine 0.8.
        let cls_row = vec![0.0, 0.5, 0.4, 0.1];
        let trace = trace_with_cls_row(&cls_row, 2);
        let keys = keys_3([[1.0, 0.0], [0.0, 1.0], [0.8, 0.6]]);
        let (d, m) = cls_merge_policy(&trace, &keys, 0.3, 1).unwrap();
        assert_eq!(d.kept, vec![0, 1]);
        assert_eq!(m.assignments.len(), 1);
        assert_eq!(m.assignments[0].pruned, 2);
        assert_eq!(m.assignments[0].kept, 0);
        assert!((m.assignments[0].weight - 0.8).abs() < 1e-12);

        let emb =
            DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let merged = apply_merge(&emb, &d, &m).unwrap();
        // Row 0: (e0 + 0.8 e2) / 1.8; row 1 untouched.
        assert!((merged.get(0, 0) - (1.0 + 0.8 * 5.0) / 1.8).abs() < 1e-12);
        assert!((merged.get(0, 1) - (2.0 + 0.8 * 6.0) / 1.8).abs() < 1e-12);
        assert_eq!(merged.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn merge_with_r_zero_changes_nothing() {
        let cls_row = vec![0.0, 0.5, 0.3, 0.2];
        let trace = trace_with_cls_row(&cls_row, 2);
        let keys = keys_3([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        let (d, m) = cls_merge_policy(&trace, &keys, 0.0, 1).unwrap();
        assert_eq!(d.kept, vec![0, 1, 2]);
        assert!(m.assignments.is_empty());
        let emb =
            DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let merged = apply_merge(&emb, &d, &m).unwrap();
        assert_eq!(merged.max_abs_diff(&emb).unwrap(), 0.0);
    }

    #[test]
    fn merge_clamps_negative_similarity_to_zero_weight() {
        let cls_row = vec![0.0, 0.5, 0.4, 0.1];
        let trace = trace_with_cls_row(&cls_row, 2);
        // Pruned key points away from both kept keys; best cosine is
        // negative and must clamp to weight 0.
        let keys = keys_3([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let (d, m) = cls_merge_policy(&trace, &keys, 0.3, 1).unwrap();
        assert_eq!(m.assignments[0].weight, 0.0);
        let emb =
            DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let merged = apply_merge(&emb, &d, &m).unwrap();
        assert_eq!(merged.row(0), &[1.0, 2.0], "zero-weight merge is a no-op");
    }

    #[test]
    fn merge_assigns_every_pruned_token_exactly_once() {
        let cls_row = vec![0.0, 0.30, 0.05, 0.25, 0.1, 0.05, 0.25];
        let trace = trace_with_cls_row(&cls_row, 2);
        let mut rng = SeededRng::new(3);
        let keys = crate::tensor::randn_matrix(&mut rng, 6, 4, 1.0);
        let (d, m) = cls_merge_policy(&trace, &keys, 0.5, 2).unwrap();
        let pruned: Vec<usize> = (0..6).filter(|i| !d.kept.contains(i)).collect();
        let assigned: Vec<usize> = m.assignments.iter().map(|a| a.pruned).collect();
        assert_eq!(assigned, pruned, "each pruned token appears exactly once");
        for a in &m.assignments {
            assert!(d.kept.contains(&a.kept));
            assert!(a.weight >= 0.0);
        }
    }

    #[test]
    fn merge_rejects_bad_k_merge() {
        let cls_row = vec![0.0, 0.5, 0.3, 0.2];
        let trace = trace_with_cls_row(&cls_row, 2);
        let keys = keys_3([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]);
        // keep_count at R=0.3 over 3 patches is 2; k_merge must be < 2.
        assert!(matches!(
            cls_merge_policy(&trace, &keys, 0.3, 2),
            Err(PruneError::InvalidKMerge {
                k_merge: 2,
                keep_count: 2
            })
        ));
        assert!(cls_merge_policy(&trace, &keys, 0.3, 0).is_err());
    }

    #[test]
    fn merge_rejects_wrong_key_rows() {
        let cls_row = vec![0.0, 0.5, 0.3, 0.2];
        let trace = trace_with_cls_row(&cls_row, 2);
        let keys = DenseMatrix::zeros(2, 2);
        assert!(matches!(
            cls_merge_policy(&trace, &keys, 0.3, 1),
            Err(PruneError::KeysRows {
                expected: 3,
                got: 2
            })
        ));
    }

    // ---- apply ----

    #[test]
    fn apply_selects_kept_rows_in_order() {
        let emb = DenseMatrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
        ])
        .unwrap();
        let d = PruneDecision {
            policy: "topk".into(),
            r: 0.5,
            tau: Some(0.0),
            kept: vec![1, 3],
            applied_at: ApplySite::BeforeLlm,
        };
        let out = apply_before_llm(&emb, &d).unwrap();
        assert_eq!(out.rows(), 2);
        assert_eq!(out.row(0), &[1.0, 1.0]);
        assert_eq!(out.row(1), &[3.0, 3.0]);
    }

    #[test]
    fn apply_rejects_out_of_range_kept_index() {
        let emb = DenseMatrix::zeros(2, 2);
        let d = PruneDecision {
            policy: "topk".into(),
            r: 0.5,
            tau: None,
            kept: vec![0, 5],
            applied_at: ApplySite::BeforeLlm,
        };
        assert!(matches!(
            apply_before_llm(&emb, &d),
            Err(PruneError::KeptOutOfRange { index: 5, len: 2 })
        ));
    }

    // ---- properties ----

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn score_vec() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0..1.0f64, 1..64)
        }

        /// Reference implementation: exhaustively sort (score desc, index
        /// asc) pairs and take the prefix.
        fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
            let mut pairs: Vec<(usize, f64)> = scores.iter().cloned().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut kept: Vec<usize> = pairs[..k].iter().map(|p| p.0).collect();
            kept.sort_unstable();
            kept
        }

        proptest! {
            #[test]
            fn select_matches_brute_force_oracle(scores in score_vec(), r in 0.0..0.999f64) {
                let d = select_tokens(&scores, r).unwrap();
                let k = keep_count(scores.len(), r);
                prop_assert_eq!(d.kept.clone(), oracle_top_k(&scores, k));
                prop_assert!(d.kept.windows(2).all(|w| w[0] < w[1]));
                let tau = d.tau.unwrap();
                for &i in &d.kept {
                    prop_assert!(scores[i] >= tau);
                }
            }

            #[test]
            fn increasing_r_nests_kept_sets(scores in score_vec(), r1 in 0.0..0.5f64, dr in 0.0..0.49f64) {
                let r2 = r1 + dr;
                let a = select_tokens(&scores, r1).unwrap();
                let b = select_tokens(&scores, r2).unwrap();
                prop_assert!(b.kept.len() <= a.kept.len());
                for i in &b.kept {
                    prop_assert!(a.kept.contains(i), "kept({r2}) ⊄ kept({r1})");
                }
            }

            #[test]
            fn positive_scaling_preserves_selection_and_scales_tau(
                scores in score_vec(),
                r in 0.0..0.999f64,
                c in 0.001..1000.0f64,
            ) {
                let base = select_tokens(&scores, r).unwrap();
                let scaled_scores: Vec<f64> = scores.iter().map(|s| s * c).collect();
                let scaled = select_tokens(&scaled_scores, r).unwrap();
                prop_assert_eq!(base.kept, scaled.kept);
                let (t0, t1) = (base.tau.unwrap(), scaled.tau.unwrap());
                prop_assert!((t1 - t0 * c).abs() <= 1e-9 * t1.abs().max(1.0));
            }
        }
    }
}
