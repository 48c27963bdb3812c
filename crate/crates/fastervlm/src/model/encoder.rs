//! Bidirectional patch encoder with a leading [CLS] token.

use crate::tensor::{randn_matrix, DenseMatrix, SeededRng};

use super::{
    add_in_place, add_position_embeddings, layer_norm_rows, mlp, self_attention, AttentionTrace,
    BlockWeights, EncoderConfig, ModelError, WEIGHT_INIT_SCALE,
};

/// Pre-norm transformer over `1 + n_patches` tokens: a learned [CLS]
/// embedding is prepended at row 0 and every layer runs unmasked
/// self-attention, so the [CLS] row of any attention matrix describes how
/// that token distributes its attention over the patches.
///
/// Weight draw order (also the serialization order): `cls_embed`, then per
/// layer `w_q, w_k, w_v, w_o, w_up, w_down`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub cls_embed: DenseMatrix,
    pub blocks: Vec<BlockWeights>,
}

/// Everything a forward pass produces.
///
/// `hidden[0]` is the embedded input (CLS prepended, positions added);
/// `hidden[k]` for `k >= 1` is the output of block `k - 1`. The features
/// handed to the language side are `hidden[n_layers - 1]` — the penultimate
/// layer's output — matching the layer whose attention drives pruning.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Vec<DenseMatrix>,
    pub trace: AttentionTrace,
}

impl EncoderOutput {
    /// Patch-token features (the [CLS] row dropped) from the penultimate
    /// layer's output.
    pub fn penultimate_patch_features(&self) -> DenseMatrix {
        let h = &self.hidden[self.hidden.len() - 2];
        let indices: Vec<usize> = (1..h.rows()).collect();
        h.select_rows(&indices)
            .expect("encoder hidden state always has patch rows")
    }
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let cls_embed = randn_matrix(&mut rng, 1, cfg.d_model, WEIGHT_INIT_SCALE);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights::init(&mut rng, cfg.d_model, cfg.d_ffn()))
            .collect();
        Ok(Self {
            cfg,
            cls_embed,
            blocks,
        })
    }

    /// Runs the encoder over `patches` (`n_patches x d_model`), returning
    /// all per-layer hidden states and the full attention trace.
    pub fn forward(&self, patches: &DenseMatrix) -> Result<EncoderOutput, ModelError> {
        if patches.rows() != self.cfg.n_patches {
            return Err(ModelError::InputRows {
                expected: self.cfg.n_patches,
                got: patches.rows(),
            });
        }
        if patches.cols() != self.cfg.d_model {
            return Err(ModelError::BadConfig {
                field: "patches",
                detail: format!(
                    "expected {} columns to match d_model, got {}",
                    self.cfg.d_model,
                    patches.cols()
                ),
            });
        }

        let mut x = DenseMatrix::vstack(&[&self.cls_embed, patches])?;
        if self.cfg.pos_embed {
            let positions: Vec<usize> = (0..x.rows()).collect();
            add_position_embeddings(&mut x, self.cfg.seed, &positions);
        }

        let mut hidden = Vec::with_capacity(self.cfg.n_layers + 1);
        let mut trace = AttentionTrace::new();
        hidden.push(x);
        for block in &self.blocks {
            let h = hidden.last().unwrap();
            let (attn_out, heads, _k, _v) =
                self_attention(&layer_norm_rows(h), block, self.cfg.n_heads, None)?;
            let mut h1 = h.clone();
            add_in_place(&mut h1, &attn_out);
            let mlp_out = mlp(&layer_norm_rows(&h1), block)?;
            add_in_place(&mut h1, &mlp_out);
            trace.push_layer(heads);
            hidden.push(h1);
        }
        Ok(EncoderOutput { hidden, trace })
    }

    /// Keys produced inside block `layer` for the current hidden states —
    /// `LN(hidden[layer]) · W_K`, one row per token including [CLS] at row
    /// 0. Used for key-similarity token merging.
    pub fn layer_keys(&self, out: &EncoderOutput, layer: usize) -> Result<DenseMatrix, ModelError> {
        if layer >= self.blocks.len() {
            return Err(ModelError::LayerOutOfRange {
                layer,
                n_layers: self.blocks.len(),
            });
        }
        let x_ln = layer_norm_rows(&out.hidden[layer]);
        Ok(crate::tensor::matmul(&x_ln, &self.blocks[layer].w_k)?)
    }
}
