//! A miniature two-tower vision-language model: a bidirectional patch
//! encoder with a leading [CLS] token, and a causal decoder that consumes
//! `[system; image; text; output]` embedding sequences.
//!
//! The towers are pre-norm transformers (parameter-free LayerNorm, SiLU
//! MLP) with all weights drawn from a seeded Gaussian stream in a fixed,
//! documented order. Forward passes record per-layer, per-head attention
//! into [`AttentionTrace`]; the decoder maintains a [`KvCache`] so
//! incremental decoding can be checked against full recomputation.
//!
//! Layer indices are 0-based everywhere: a trace for an `n_layers` model
//! has entries `0..n_layers`, and "penultimate" means index `n_layers - 2`.

mod decoder;
mod encoder;
mod trace;
mod weights;

pub use decoder::{Decoder, PrefillOpts, PrefillOutput};
pub use encoder::{Encoder, EncoderOutput};
pub use trace::{AttentionTrace, KvCache, LayerKv};
pub use weights::{load_decoder, load_encoder, save_decoder, save_encoder};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{matmul, DenseMatrix, SeededRng, TensorError};

/// Standard deviation of every Gaussian weight and embedding draw.
pub const WEIGHT_INIT_SCALE: f64 = 0.02;

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad {field}: {detail}")]
    BadConfig { field: &'static str, detail: String },
    #[error("input has {got} rows but the layout/config expects {expected}")]
    InputRows { expected: usize, got: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("invalid kept-token indices: {detail}")]
    BadKeptIndices { detail: String },
    #[error("weights io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights format: {detail}")]
    Format { detail: String },
}

// ---- Configs and layout ----

/// Vision-encoder shape. `n_layers >= 2` so a penultimate layer exists for
/// attention extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_patches: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
    /// Learned absolute position embeddings at the input. Disable to make
    /// the encoder exactly permutation-equivariant over patches.
    pub pos_embed: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_tower("encoder", self.d_model, self.n_heads)?;
        if self.n_patches == 0 {
            return Err(ModelError::BadConfig {
                field: "encoder.n_patches",
                detail: "must be at least 1".into(),
            });
        }
        if self.n_layers < 2 {
            return Err(ModelError::BadConfig {
                field: "encoder.n_layers",
                detail: format!(
                    "must be at least 2 so a penultimate layer exists, got {}",
                    self.n_layers
                ),
            });
        }
        Ok(())
    }

    /// 0-based index of the penultimate layer, the default attention
    /// extraction point.
    pub fn penultimate_layer(&self) -> usize {
        self.n_layers - 2
    }

    /// Width of the MLP hidden layer (fixed 4x expansion).
    pub fn d_ffn(&self) -> usize {
        4 * self.d_model
    }
}

/// Causal-decoder shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Learned absolute position embeddings at the input.
    pub pos_embed: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_tower("decoder", self.d_model, self.n_heads)?;
        if self.n_layers == 0 {
            return Err(ModelError::BadConfig {
                field: "decoder.n_layers",
                detail: "must be at least 1".into(),
            });
        }
        if self.d_ffn == 0 {
            return Err(ModelError::BadConfig {
                field: "decoder.d_ffn",
                detail: "must be at least 1".into(),
            });
        }
        if self.vocab == 0 {
            return Err(ModelError::BadConfig {
                field: "decoder.vocab",
                detail: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

fn validate_tower(which: &'static str, d_model: usize, n_heads: usize) -> Result<(), ModelError> {
    if n_heads == 0 {
        return Err(ModelError::BadConfig {
            field: "n_heads",
            detail: format!("{which}: must be at least 1"),
        });
    }
    if d_model == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(ModelError::BadConfig {
            field: "d_model",
            detail: format!(
                "{which}: d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            ),
        });
    }
    Ok(())
}

/// Segment lengths of a decoder input sequence, in order:
/// `[system; image; text; output]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub sys_len: usize,
    pub img_len: usize,
    pub txt_len: usize,
    pub out_len: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.sys_len + self.img_len + self.txt_len + self.out_len
    }

    /// Column/row range of the image segment.
    pub fn img_range(&self) -> std::ops::Range<usize> {
        self.sys_len..self.sys_len + self.img_len
    }

    pub fn txt_range(&self) -> std::ops::Range<usize> {
        let start = self.sys_len + self.img_len;
        start..start + self.txt_len
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.total() == 0 {
            return Err(ModelError::BadConfig {
                field: "layout",
                detail: "sequence must be non-empty".into(),
            });
        }
        Ok(())
    }

    /// Prefill additionally requires exactly one trailing output position
    /// (the token whose logits seed generation).
    pub fn validate_prefill(&self) -> Result<(), ModelError> {
        self.validate()?;
        if self.out_len != 1 {
            return Err(ModelError::BadConfig {
                field: "layout.out_len",
                detail: format!(
                    "prefill expects exactly 1 output position, got {}",
                    self.out_len
                ),
            });
        }
        Ok(())
    }

    /// The layout after dropping all but `kept` image positions.
    pub fn with_img_len(&self, kept: usize) -> SequenceLayout {
        SequenceLayout {
            img_len: kept,
            ..*self
        }
    }
}

// ---- Shared building blocks ----

/// One transformer block's parameters. Public so tests can re-derive
/// forward passes independently of the model's own code path.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub w_up: DenseMatrix,
    pub w_down: DenseMatrix,
}

impl BlockWeights {
    /// Draw order is fixed (q, k, v, o, up, down) and doubles as the
    /// serialization order in the weights file format.
    fn init(rng: &mut SeededRng, d_model: usize, d_ffn: usize) -> Self {
        BlockWeights {
            w_q: crate::tensor::randn_matrix(rng, d_model, d_model, WEIGHT_INIT_SCALE),
            w_k: crate::tensor::randn_matrix(rng, d_model, d_model, WEIGHT_INIT_SCALE),
            w_v: crate::tensor::randn_matrix(rng, d_model, d_model, WEIGHT_INIT_SCALE),
            w_o: crate::tensor::randn_matrix(rng, d_model, d_model, WEIGHT_INIT_SCALE),
            w_up: crate::tensor::randn_matrix(rng, d_model, d_ffn, WEIGHT_INIT_SCALE),
            w_down: crate::tensor::randn_matrix(rng, d_ffn, d_model, WEIGHT_INIT_SCALE),
        }
    }
}

/// Parameter-free LayerNorm over each row: `(x - mean) / sqrt(var + eps)`
/// with biased variance.
pub fn layer_norm_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    let d = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let out_row = out.row_mut(r);
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Two-layer MLP with SiLU: `silu(x W_up) W_down`, applied row-wise.
fn mlp(x: &DenseMatrix, w: &BlockWeights) -> Result<DenseMatrix, TensorError> {
    let mut hidden = matmul(x, &w.w_up)?;
    for r in 0..hidden.rows() {
        for v in hidden.row_mut(r) {
            *v = silu(*v);
        }
    }
    matmul(&hidden, &w.w_down)
}

fn add_in_place(acc: &mut DenseMatrix, delta: &DenseMatrix) {
    debug_assert_eq!(acc.rows(), delta.rows());
    debug_assert_eq!(acc.cols(), delta.cols());
    for r in 0..acc.rows() {
        let d = delta.row(r).to_vec();
        for (a, b) in acc.row_mut(r).iter_mut().zip(d) {
            *a += b;
        }
    }
}

/// Deterministic "learned" absolute position embedding: each position's
/// vector is a Gaussian draw from an RNG keyed on (seed, position), so the
/// table needs no maximum-length parameter and any position can be
/// materialized on demand.
pub(crate) fn position_vector(seed: u64, pos: usize, d: usize) -> Vec<f64> {
    let key = seed
        ^ (pos as u64)
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(0x5851F42D4C957F2D);
    let mut rng = SeededRng::new(key);
    (0..d)
        .map(|_| rng.next_gaussian() * WEIGHT_INIT_SCALE)
        .collect()
}

/// Adds position embeddings for `positions[i]` to row i (when enabled).
fn add_position_embeddings(x: &mut DenseMatrix, seed: u64, positions: &[usize]) {
    debug_assert_eq!(x.rows(), positions.len());
    let d = x.cols();
    for (r, &p) in positions.iter().enumerate() {
        let pv = position_vector(seed, p, d);
        for (a, b) in x.row_mut(r).iter_mut().zip(&pv) {
            *a += b;
        }
    }
}

/// Copies the per-head column block `head` out of a full-width matrix.
fn head_slice(x: &DenseMatrix, head: usize, head_dim: usize) -> DenseMatrix {
    let lo = head * head_dim;
    let mut out = DenseMatrix::zeros(x.rows(), head_dim);
    for r in 0..x.rows() {
        let src = &x.row(r)[lo..lo + head_dim];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

/// Writes a per-head block back into the full-width output.
fn head_unslice(dst: &mut DenseMatrix, src: &DenseMatrix, head: usize, head_dim: usize) {
    let lo = head * head_dim;
    for r in 0..src.rows() {
        let row = src.row(r).to_vec();
        dst.row_mut(r)[lo..lo + head_dim].copy_from_slice(&row);
    }
}

/// Full self-attention over `x_ln` (the already-normalized block input).
/// Returns the post-W_O attention output, the per-head attention matrices,
/// and the full-width K and V for cache capture.
///
/// `causal_mask`, when provided, is added to the logits per head and masked
/// positions are forced to exactly zero weight.
fn self_attention(
    x_ln: &DenseMatrix,
    w: &BlockWeights,
    n_heads: usize,
    causal_mask: Option<&DenseMatrix>,
) -> Result<(DenseMatrix, Vec<DenseMatrix>, DenseMatrix, DenseMatrix), ModelError> {
    let d = x_ln.cols();
    let head_dim = d / n_heads;
    let q = matmul(x_ln, &w.w_q)?;
    let k = matmul(x_ln, &w.w_k)?;
    let v = matmul(x_ln, &w.w_v)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut concat = DenseMatrix::zeros(x_ln.rows(), d);
    let mut per_head = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = head_slice(&q, h, head_dim);
        let kh = head_slice(&k, h, head_dim);
        let vh = head_slice(&v, h, head_dim);
        let mut scores = crate::tensor::matmul_nt(&qh, &kh)?;
        for r in 0..scores.rows() {
            for s in scores.row_mut(r) {
                *s *= scale;
            }
        }
        let attn = match causal_mask {
            Some(mask) => crate::tensor::masked_softmax_rows(&scores, mask)?,
            None => crate::tensor::softmax_rows(&scores),
        };
        let oh = matmul(&attn, &vh)?;
        head_unslice(&mut concat, &oh, h, head_dim);
        per_head.push(attn);
    }
    let out = matmul(&concat, &w.w_o)?;
    Ok((out, per_head, k, v))
}

/// Lower-triangular additive mask of size n (0 on and below the diagonal,
/// sentinel above).
fn causal_mask(n: usize) -> DenseMatrix {
    let mut mask = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            mask.set(i, j, crate::tensor::MASK_SENTINEL);
        }
    }
    mask
}
