//! Desk-scale study of visual-token pruning for vision-language models.
//!
//! A deterministic, dependency-light toy VLM — ViT-style encoder with a
//! [CLS] token, projector, and causal decoder — instrumented so that
//! every attention matrix is observable. On top of it:
//!
//! * [`probe`] — extraction of [CLS]→patch and text→visual attention
//!   profiles from recorded traces;
//! * [`prune`] — token-selection policies: [CLS]-attention ranking
//!   applied before the decoder, decoder-attention ranking applied at
//!   decoder layer 2, random and patch-attention controls, and a
//!   similarity-weighted merge variant;
//! * [`analysis`] — shift and dispersion statistics of attention
//!   profiles;
//! * [`cost`] — analytic prefill FLOPs and KV-cache model with closed-form
//!   savings;
//! * [`pipeline`] — an end-to-end harness over a synthetic workload with
//!   planted salient patches, reporting recall, output fidelity, and
//!   costs against an unpruned reference run.
//!
//! Everything is `f64`, seeded, and bit-reproducible: the same config
//! yields byte-identical reports.

pub mod analysis;
pub mod config;
pub mod cost;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod prune;
pub mod tensor;
