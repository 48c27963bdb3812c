//! Attention traces and the decoder KV cache.

use crate::tensor::DenseMatrix;

use super::ModelError;

/// Per-layer, per-head attention matrices recorded during a forward pass.
///
/// Each layer entry holds one square matrix per head whose rows sum to 1.
/// Layers may differ in size within one trace: when tokens are dropped at
/// layer k, layers `k..` are recorded at the reduced sequence length.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    layers: Vec<Vec<DenseMatrix>>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push_layer(&mut self, heads: Vec<DenseMatrix>) {
        assert!(!heads.is_empty(), "a trace layer needs at least one head");
        self.layers.push(heads);
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self, layer: usize) -> Result<&[DenseMatrix], ModelError> {
        self.layers
            .get(layer)
            .map(|h| h.as_slice())
            .ok_or(ModelError::LayerOutOfRange {
                layer,
                n_layers: self.layers.len(),
            })
    }

    /// Arithmetic mean of the head matrices at `layer`. This is the
    /// aggregation used everywhere scores are read off a trace.
    pub fn head_mean(&self, layer: usize) -> Result<DenseMatrix, ModelError> {
        let heads = self.heads(layer)?;
        let rows = heads[0].rows();
        let cols = heads[0].cols();
        let mut mean = DenseMatrix::zeros(rows, cols);
        for h in heads {
            for r in 0..rows {
                let src = h.row(r).to_vec();
                for (m, v) in mean.row_mut(r).iter_mut().zip(src) {
                    *m += v;
                }
            }
        }
        let inv = 1.0 / heads.len() as f64;
        for r in 0..rows {
            for v in mean.row_mut(r) {
                *v *= inv;
            }
        }
        Ok(mean)
    }

    /// True when every entry of every head matrix is finite.
    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(DenseMatrix::all_finite)
    }
}

impl Default for AttentionTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-layer keys and values captured during prefill and extended one row
/// per decode step.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub k: DenseMatrix,
    pub v: DenseMatrix,
}

/// Decoder KV cache. After a plain prefill every layer holds one K/V row
/// per input token; after a prune-at-layer-k prefill, layers `0..k` retain
/// the full sequence while layers `k..` hold only the kept tokens. Each
/// decode step appends exactly one row to every layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    next_pos: usize,
}

impl KvCache {
    pub(crate) fn new(layers: Vec<LayerKv>, next_pos: usize) -> Self {
        Self { layers, next_pos }
    }

    /// Absolute position the next appended token will occupy (used for its
    /// position embedding).
    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    pub(crate) fn advance(&mut self) -> usize {
        let p = self.next_pos;
        self.next_pos += 1;
        p
    }

    /// Cached sequence length per layer.
    pub fn lens(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k.rows()).collect()
    }
}
