//! Causal decoder with a KV cache, prune-at-layer support, and greedy
//! generation.

use crate::tensor::{matmul, matmul_nt, randn_matrix, DenseMatrix, SeededRng};

use super::{
    add_in_place, add_position_embeddings, causal_mask, head_slice, head_unslice, layer_norm_rows,
    mlp, position_vector, self_attention, AttentionTrace, BlockWeights, DecoderConfig, KvCache,
    LayerKv, ModelError, SequenceLayout, WEIGHT_INIT_SCALE,
};

/// Pre-norm causal transformer over embedding sequences laid out as
/// `[system; image; text; output]`.
///
/// Weight draw order (also the serialization order): `token_embed`,
/// `unembed`, then per layer `w_q, w_k, w_v, w_o, w_up, w_down`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub token_embed: DenseMatrix,
    pub unembed: DenseMatrix,
    pub blocks: Vec<BlockWeights>,
}

/// Optional prefill behaviors.
///
/// `positions` overrides the absolute position ids (default `0..len`);
/// they must be strictly increasing so later decode steps can continue
/// from `last + 1`. `prune_at = (k, kept)` drops every image row except
/// `kept` (indices within the image segment) right before layer `k`:
/// layers `0..k` run over the full sequence, layers `k..` over the reduced
/// one.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrefillOpts<'a> {
    pub positions: Option<&'a [usize]>,
    pub prune_at: Option<(usize, &'a [usize])>,
}

/// Result of a prefill pass.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Logits at the final position — the distribution over the first
    /// generated token.
    pub last_logits: Vec<f64>,
    /// Logits at every (post-pruning) position, one row per token.
    pub all_logits: DenseMatrix,
    pub cache: KvCache,
    pub trace: AttentionTrace,
    /// Layout of the sequence the deepest layers actually processed
    /// (image segment shrunk if pruning was applied).
    pub final_layout: SequenceLayout,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let token_embed = randn_matrix(&mut rng, cfg.vocab, cfg.d_model, WEIGHT_INIT_SCALE);
        let unembed = randn_matrix(&mut rng, cfg.d_model, cfg.vocab, WEIGHT_INIT_SCALE);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockWeights::init(&mut rng, cfg.d_model, cfg.d_ffn))
            .collect();
        Ok(Self {
            cfg,
            token_embed,
            unembed,
            blocks,
        })
    }

    /// Causal forward over the full sequence, populating the cache and
    /// trace. `embeddings` must have `layout.total()` rows (position
    /// embeddings are added internally).
    pub fn prefill(
        &self,
        embeddings: &DenseMatrix,
        layout: SequenceLayout,
    ) -> Result<PrefillOutput, ModelError> {
        self.prefill_opts(embeddings, layout, PrefillOpts::default())
    }

    pub fn prefill_opts(
        &self,
        embeddings: &DenseMatrix,
        layout: SequenceLayout,
        opts: PrefillOpts,
    ) -> Result<PrefillOutput, ModelError> {
        layout.validate_prefill()?;
        let total = layout.total();
        if embeddings.rows() != total {
            return Err(ModelError::InputRows {
                expected: total,
                got: embeddings.rows(),
            });
        }
        if embeddings.cols() != self.cfg.d_model {
            return Err(ModelError::BadConfig {
                field: "embeddings",
                detail: format!(
                    "expected {} columns to match d_model, got {}",
                    self.cfg.d_model,
                    embeddings.cols()
                ),
            });
        }

        let default_positions: Vec<usize>;
        let positions: &[usize] = match opts.positions {
            Some(p) => {
                if p.len() != total {
                    return Err(ModelError::BadConfig {
                        field: "positions",
                        detail: format!("expected {total} entries, got {}", p.len()),
                    });
                }
                if !p.windows(2).all(|w| w[0] < w[1]) {
                    return Err(ModelError::BadConfig {
                        field: "positions",
                        detail: "position ids must be strictly increasing".into(),
                    });
                }
                p
            }
            None => {
                default_positions = (0..total).collect();
                &default_positions
            }
        };

        let keep_rows: Option<(usize, Vec<usize>)> = match opts.prune_at {
            None => None,
            Some((k, kept)) => {
                if k == 0 || k >= self.cfg.n_layers {
                    return Err(ModelError::LayerOutOfRange {
                        layer: k,
                        n_layers: self.cfg.n_layers,
                    });
                }
                validate_kept(kept, layout.img_len)?;
                // Sequence row indices that survive: everything outside the
                // image segment plus the kept image rows.
                let mut rows: Vec<usize> = (0..layout.sys_len).collect();
                rows.extend(kept.iter().map(|&i| layout.sys_len + i));
                rows.extend(layout.sys_len + layout.img_len..total);
                Some((k, rows))
            }
        };

        let mut x = embeddings.clone();
        if self.cfg.pos_embed {
            add_position_embeddings(&mut x, self.cfg.seed, positions);
        }

        let mut trace = AttentionTrace::new();
        let mut cache_layers = Vec::with_capacity(self.cfg.n_layers);
        let mut mask = causal_mask(x.rows());
        let mut final_layout = layout;
        for (layer, block) in self.blocks.iter().enumerate() {
            if let Some((k, rows)) = &keep_rows {
                if layer == *k {
                    x = x.select_rows(rows)?;
                    mask = causal_mask(x.rows());
                    final_layout = layout.with_img_len(rows.len() - (total - layout.img_len));
                }
            }
            let (attn_out, heads, k_full, v_full) =
                self_attention(&layer_norm_rows(&x), block, self.cfg.n_heads, Some(&mask))?;
            cache_layers.push(LayerKv {
                k: k_full,
                v: v_full,
            });
            add_in_place(&mut x, &attn_out);
            let mlp_out = mlp(&layer_norm_rows(&x), block)?;
            add_in_place(&mut x, &mlp_out);
            trace.push_layer(heads);
        }

        let all_logits = matmul(&layer_norm_rows(&x), &self.unembed)?;
        let last_logits = all_logits.row(all_logits.rows() - 1).to_vec();
        let next_pos = positions.last().copied().unwrap_or(0) + 1;
        Ok(PrefillOutput {
            last_logits,
            all_logits,
            cache: KvCache::new(cache_layers, next_pos),
            trace,
            final_layout,
        })
    }

    /// Appends one token at the next position and returns its logits. The
    /// cache grows by exactly one row per layer.
    pub fn step(&self, cache: &mut KvCache, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        let pos = cache.advance();
        self.step_inner(cache, embedding, pos)
    }

    fn step_inner(
        &self,
        cache: &mut KvCache,
        embedding: &[f64],
        pos: usize,
    ) -> Result<Vec<f64>, ModelError> {
        if embedding.len() != self.cfg.d_model {
            return Err(ModelError::BadConfig {
                field: "embedding",
                detail: format!(
                    "expected length {} to match d_model, got {}",
                    self.cfg.d_model,
                    embedding.len()
                ),
            });
        }
        if cache.layers.len() != self.cfg.n_layers {
            return Err(ModelError::BadConfig {
                field: "cache",
                detail: format!(
                    "cache has {} layers, model has {}",
                    cache.layers.len(),
                    self.cfg.n_layers
                ),
            });
        }
        let d = self.cfg.d_model;
        let head_dim = d / self.cfg.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut x = DenseMatrix::new(1, d, embedding.to_vec())?;
        if self.cfg.pos_embed {
            add_position_embeddings(&mut x, self.cfg.seed, &[pos]);
        }

        for (layer, block) in self.blocks.iter().enumerate() {
            let x_ln = layer_norm_rows(&x);
            let q = matmul(&x_ln, &block.w_q)?;
            let k_new = matmul(&x_ln, &block.w_k)?;
            let v_new = matmul(&x_ln, &block.w_v)?;
            let kv = &mut cache.layers[layer];
            kv.k.push_row(k_new.row(0));
            kv.v.push_row(v_new.row(0));

            let mut concat = DenseMatrix::zeros(1, d);
            for h in 0..self.cfg.n_heads {
                let qh = head_slice(&q, h, head_dim);
                let kh = head_slice(&kv.k, h, head_dim);
                let vh = head_slice(&kv.v, h, head_dim);
                let mut scores = matmul_nt(&qh, &kh)?;
                for s in scores.row_mut(0) {
                    *s *= scale;
                }
                crate::tensor::softmax_slice(scores.row_mut(0));
                let oh = matmul(&scores, &vh)?;
                head_unslice(&mut concat, &oh, h, head_dim);
            }
            let attn_out = matmul(&concat, &block.w_o)?;
            add_in_place(&mut x, &attn_out);
            let mlp_out = mlp(&layer_norm_rows(&x), block)?;
            add_in_place(&mut x, &mlp_out);
        }

        let logits = matmul(&layer_norm_rows(&x), &self.unembed)?;
        Ok(logits.row(0).to_vec())
    }

    /// Greedy decoding: prefill, then repeatedly take the argmax token
    /// (ties resolve to the lowest token id) and feed its embedding back.
    /// Returns exactly `max_new` token ids.
    pub fn greedy_generate(
        &self,
        embeddings: &DenseMatrix,
        layout: SequenceLayout,
        max_new: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let prefill = self.prefill(embeddings, layout)?;
        self.continue_greedy(prefill, max_new)
    }

    /// Greedy continuation from an existing prefill (shared by
    /// [`Self::greedy_generate`] and pipelines that need the prefill's
    /// trace as well).
    pub fn continue_greedy(
        &self,
        prefill: PrefillOutput,
        max_new: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut cache = prefill.cache;
        let mut logits = prefill.last_logits;
        let mut out = Vec::with_capacity(max_new);
        for step in 0..max_new {
            let tok = argmax_lowest(&logits);
            out.push(tok);
            if step + 1 < max_new {
                let emb = self.token_embed.row(tok as usize).to_vec();
                logits = self.step(&mut cache, &emb)?;
            }
        }
        Ok(out)
    }

    /// Position embedding vector this decoder would add at `pos` (exposed
    /// for oracle re-derivations in tests).
    pub fn position_embedding(&self, pos: usize) -> Vec<f64> {
        position_vector(self.cfg.seed, pos, self.cfg.d_model)
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax_lowest(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn validate_kept(kept: &[usize], img_len: usize) -> Result<(), ModelError> {
    if kept.is_empty() {
        return Err(ModelError::BadKeptIndices {
            detail: "kept set is empty".into(),
        });
    }
    if !kept.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::BadKeptIndices {
            detail: "kept indices must be strictly ascending".into(),
        });
    }
    if *kept.last().unwrap() >= img_len {
        return Err(ModelError::BadKeptIndices {
            detail: format!(
                "kept index {} out of range for image segment of length {img_len}",
                kept.last().unwrap()
            ),
        });
    }
    Ok(())
}
