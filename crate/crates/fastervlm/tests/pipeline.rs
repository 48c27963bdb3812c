//! End-to-end behavior of the full pruning pipeline, across seeds and
//! policies.

use fastervlm::config::{PipelineConfig, Policy, ALL_POLICIES};
use fastervlm::pipeline::{run_pipeline, run_pipeline_detailed};

fn base_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        ..PipelineConfig::default()
    }
}

#[test]
fn planted_patches_survive_attention_guided_pruning_for_every_seed() {
    // Budget exactly the planted count: the kept set must be the planted
    // set, by construction of the workload, for any seed.
    for seed in 0..20 {
        let mut cfg = base_config(seed);
        cfg.keep_count = Some(cfg.n_salient);
        let run = run_pipeline_detailed(&cfg).unwrap();
        assert_eq!(
            run.report.decision.kept, run.workload.salient,
            "seed {seed}: kept set must equal the planted set"
        );
        assert_eq!(run.report.salient_recall, 1.0, "seed {seed}");
    }
}

#[test]
fn random_pruning_loses_planted_patches_attention_guided_never_does() {
    const N_SEEDS: u64 = 20;
    let mut guided_sum = 0.0;
    let mut random_sum = 0.0;
    for seed in 0..N_SEEDS {
        let mut cfg = base_config(seed);
        cfg.keep_count = Some(cfg.n_salient);
        guided_sum += run_pipeline(&cfg).unwrap().salient_recall;
        cfg.policy = Policy::Random;
        random_sum += run_pipeline(&cfg).unwrap().salient_recall;
    }
    let guided_mean = guided_sum / N_SEEDS as f64;
    let random_mean = random_sum / N_SEEDS as f64;
    assert_eq!(guided_mean, 1.0);
    // Keeping 5 of 64 at random recovers ~5/64 of the planted set; even
    // with sampling noise over 20 seeds it stays nowhere near perfect.
    assert!(
        random_mean < 0.5,
        "random recall {random_mean} should be far from 1.0"
    );
}

#[test]
fn same_ranking_different_site_keeps_the_same_tokens() {
    let mut early = base_config(42);
    early.reduction = 0.5;
    let mut late = early.clone();
    late.policy = Policy::ClsAtLayer2;
    let a = run_pipeline(&early).unwrap();
    let b = run_pipeline(&late).unwrap();
    assert_eq!(a.decision.kept, b.decision.kept);
    assert_eq!(a.decision.tau, b.decision.tau);
    assert_ne!(
        a.decision.applied_at.to_string(),
        b.decision.applied_at.to_string()
    );
    // Layers 0..2 still see every token in the late variant, so the two
    // runs cannot produce identical pruned activations.
    assert_ne!(a.last_logit_divergence, b.last_logit_divergence);
}

#[test]
fn merging_pruned_tokens_changes_the_kept_rows() {
    let mut plain = base_config(7);
    plain.reduction = 0.75;
    let mut merged = plain.clone();
    merged.policy = Policy::ClsMerge;
    merged.k_merge = 3;
    let a = run_pipeline_detailed(&plain).unwrap();
    let b = run_pipeline_detailed(&merged).unwrap();
    assert_eq!(
        a.report.decision.kept, b.report.decision.kept,
        "same [CLS] ranking, same kept set"
    );
    let merge = b.merge.expect("merge assignments present");
    assert!(
        merge.assignments.iter().any(|m| m.weight > 0.0),
        "at least one pruned token folds in with positive weight"
    );
    let diff: f64 = a
        .pruned_last_logits
        .iter()
        .zip(&b.pruned_last_logits)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(
        diff > 0.0,
        "merged rows must differ from plainly pruned rows"
    );
}

#[test]
fn every_policy_is_the_identity_at_zero_budget() {
    for policy in ALL_POLICIES {
        let mut cfg = base_config(3);
        cfg.policy = policy;
        cfg.reduction = 0.0;
        let rep = run_pipeline(&cfg).unwrap();
        assert_eq!(rep.keep_count, cfg.enc_n_patches, "{policy}");
        assert_eq!(rep.last_logit_divergence, 0.0, "{policy}");
        assert_eq!(rep.token_agreement, 1.0, "{policy}");
        assert_eq!(rep.generated, rep.baseline_generated, "{policy}");
    }
}

#[test]
fn report_json_is_machine_readable_and_tied_to_the_config() {
    let cfg = base_config(42);
    let rep = run_pipeline(&cfg).unwrap();
    let json = rep.to_json();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["config_hash"], serde_json::json!(cfg.hash()));
    assert_eq!(value["policy"], serde_json::json!("faster_vlm"));
    assert_eq!(value["decision"]["R"], serde_json::json!(0.5));
    assert!(value["attention"].as_array().unwrap().len() == 4);
    // A different seed is a different config hash and different weights.
    let other = run_pipeline(&base_config(43)).unwrap();
    assert_ne!(other.config_hash, rep.config_hash);
    assert_ne!(other.to_json(), json);
}

#[test]
fn deeper_towers_still_run_end_to_end() {
    let mut cfg = base_config(11);
    cfg.enc_n_layers = 4;
    cfg.dec_n_layers = 5;
    cfg.enc_n_patches = 36;
    cfg.n_salient = 4;
    cfg.reduction = 0.75;
    for policy in ALL_POLICIES {
        cfg.policy = policy;
        let rep = run_pipeline(&cfg).unwrap();
        assert_eq!(rep.keep_count, 9, "{policy}: floor(36·0.25)");
        assert_eq!(rep.generated.len(), cfg.max_new_tokens);
    }
}
