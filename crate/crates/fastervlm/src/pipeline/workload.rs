//! Synthetic workload with planted visual salience.
//!
//! The workload plants `n_salient` patches that the encoder's first
//! attention block is *guaranteed* to rank above every other patch in
//! head-averaged [CLS] attention, by construction rather than by luck:
//!
//! 1. For each head h, the [CLS] query at block 0 induces a direction
//!    `v_h` in input space such that a token embedding `x` (zero-mean,
//!    norm √d, hence a layer-norm fixed point up to a uniform scale)
//!    receives pre-softmax logit `x·v_h` from the [CLS] row.
//! 2. Salient patches share the direction `z = Σ c_h v_h`, with `c`
//!    solved from the Gram system `G c = 1` so every head assigns them
//!    the same strictly positive logit.
//! 3. Background patches are random directions orthogonalized against
//!    every `v_h` — their [CLS] logit is exactly zero in every head.
//!
//! Positive beats zero under softmax in every head, so the planted set
//! strictly outranks the background in the head mean. Position
//! embeddings are pre-subtracted from the patch rows so the encoder's own
//! addition restores the constructed embeddings exactly. The guarantee
//! covers attention read at block 0 (the penultimate layer of a
//! two-block encoder); deeper extraction layers see the signal only
//! after it has been mixed by earlier blocks.

use thiserror::Error;

use crate::config::PipelineConfig;
use crate::model::{layer_norm_rows, position_vector, Encoder, ModelError};
use crate::probe::{extract_cls_attention, ProbeError};
use crate::tensor::{dot, matmul, DenseMatrix, SeededRng, TensorError};

/// Stream salts so the workload and the random-prune policy never share
/// an RNG sequence even though both derive from the pipeline seed.
pub(crate) const WORKLOAD_STREAM: u64 = 0x776f_726b_6c6f_6164;
pub(crate) const POLICY_STREAM: u64 = 0x7261_6e64_706f_6c78;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("head key directions are linearly dependent; cannot plant an equal-logit direction")]
    DegenerateHeads,
    #[error("d_model {d_model} too narrow to fit {needed} orthogonal directions")]
    TooNarrow { d_model: usize, needed: usize },
    #[error("could not draw an independent background direction for patch {index}")]
    BackgroundDraw { index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A full pipeline input: patch matrix for the encoder plus token ids for
/// the decoder's system/text/output segments.
#[derive(Debug, Clone)]
pub struct PlantedWorkload {
    /// Raw encoder input, one row per patch (position embeddings not yet
    /// added — the encoder does that).
    pub patches: DenseMatrix,
    /// Indices of the planted patches, strictly ascending.
    pub salient: Vec<usize>,
    pub sys_tokens: Vec<u32>,
    pub txt_tokens: Vec<u32>,
    /// The single final prompt token whose logits start generation.
    pub out_token: u32,
}

/// Outcome of re-checking the planted ordering against an actual forward
/// pass.
#[derive(Debug, Clone, Copy)]
pub struct SalienceCheck {
    pub min_salient: f64,
    pub max_background: f64,
}

impl SalienceCheck {
    /// True when every planted patch strictly outranks every background
    /// patch.
    pub fn holds(&self) -> bool {
        self.min_salient > self.max_background
    }

    pub fn margin(&self) -> f64 {
        self.min_salient - self.max_background
    }
}

impl PlantedWorkload {
    /// Builds the planted workload for `encoder` (which must be the one
    /// built from `cfg`).
    pub fn build(encoder: &Encoder, cfg: &PipelineConfig) -> Result<Self, WorkloadError> {
        let ecfg = &encoder.cfg;
        let d = ecfg.d_model;
        let n = ecfg.n_patches;
        let n_heads = ecfg.n_heads;
        let head_dim = d / n_heads;
        let sqrt_d = (d as f64).sqrt();

        let mut rng = SeededRng::new(cfg.seed ^ WORKLOAD_STREAM);
        let salient = rng.sample_indices(n, cfg.n_salient);
        let mut is_salient = vec![false; n];
        for &i in &salient {
            is_salient[i] = true;
        }

        // The [CLS] query at block 0: LN(cls embedding [+ pos 0]) · W_Q.
        let mut x_cls = encoder.cls_embed.row(0).to_vec();
        if ecfg.pos_embed {
            for (a, b) in x_cls.iter_mut().zip(position_vector(ecfg.seed, 0, d)) {
                *a += b;
            }
        }
        let x_cls = DenseMatrix::new(1, d, x_cls)?;
        let q = matmul(&layer_norm_rows(&x_cls), &encoder.blocks[0].w_q)?;

        // Per-head input-space key directions v_h: for a zero-mean,
        // norm-√d embedding x, head h's [CLS]→x logit is x·v_h (up to the
        // uniform 1/sqrt(1+eps) layer-norm factor). Mean-centering v_h
        // changes nothing for zero-mean x and keeps the algebra inside the
        // zero-mean subspace.
        let inv_sqrt_hd = 1.0 / (head_dim as f64).sqrt();
        let w_k = &encoder.blocks[0].w_k;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let mut v: Vec<f64> = (0..d)
                .map(|j| {
                    cols.clone()
                        .map(|c| w_k.get(j, c) * q.get(0, c))
                        .sum::<f64>()
                        * inv_sqrt_hd
                })
                .collect();
            center(&mut v);
            dirs.push(v);
        }

        // Equal-logit direction: z = Σ c_h v_h with z·v_h = 1 for all h.
        let gram: Vec<Vec<f64>> = dirs
            .iter()
            .map(|a| dirs.iter().map(|b| dot(a, b)).collect())
            .collect();
        let coef = solve_linear(gram, vec![1.0; n_heads]).ok_or(WorkloadError::DegenerateHeads)?;
        let mut z = vec![0.0; d];
        for (c, v) in coef.iter().zip(&dirs) {
            for (zj, vj) in z.iter_mut().zip(v) {
                *zj += c * vj;
            }
        }
        let z_norm = dot(&z, &z).sqrt();
        if !z_norm.is_finite() || z_norm < 1e-12 {
            return Err(WorkloadError::DegenerateHeads);
        }
        let salient_embed: Vec<f64> = z.iter().map(|v| v * sqrt_d / z_norm).collect();

        // Orthonormal basis spanning {1} ∪ {v_h}: the subspace background
        // patches must avoid to score exactly zero in every head.
        let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / sqrt_d; d]];
        for v in &dirs {
            let mut u = v.clone();
            for b in &basis {
                reject(&mut u, b);
            }
            let un = dot(&u, &u).sqrt();
            if un > 1e-10 {
                for x in &mut u {
                    *x /= un;
                }
                basis.push(u);
            }
        }
        if basis.len() + 1 > d {
            return Err(WorkloadError::TooNarrow {
                d_model: d,
                needed: basis.len() + 1,
            });
        }

        let mut patches = DenseMatrix::zeros(n, d);
        for (i, &planted) in is_salient.iter().enumerate() {
            let embed = if planted {
                salient_embed.clone()
            } else {
                draw_background(&mut rng, &basis, d, sqrt_d)
                    .ok_or(WorkloadError::BackgroundDraw { index: i })?
            };
            let row = patches.row_mut(i);
            row.copy_from_slice(&embed);
            if ecfg.pos_embed {
                // Pre-subtract so the encoder's addition restores `embed`.
                for (a, b) in row.iter_mut().zip(position_vector(ecfg.seed, i + 1, d)) {
                    *a -= b;
                }
            }
        }

        let vocab = cfg.dec_vocab;
        let mut draw_tokens = |len: usize| (0..len).map(|_| rng.next_below(vocab) as u32).collect();
        let sys_tokens: Vec<u32> = draw_tokens(cfg.sys_len);
        let txt_tokens: Vec<u32> = draw_tokens(cfg.txt_len);
        let out_token = rng.next_below(vocab) as u32;

        Ok(PlantedWorkload {
            patches,
            salient,
            sys_tokens,
            txt_tokens,
            out_token,
        })
    }

    /// Runs the encoder on the patches and checks the planted ordering in
    /// the head-averaged [CLS] attention at block 0.
    pub fn verify_salience(&self, encoder: &Encoder) -> Result<SalienceCheck, WorkloadError> {
        let out = encoder.forward(&self.patches)?;
        let cls = extract_cls_attention(&out.trace, 0)?;
        let mut is_salient = vec![false; cls.scores.len()];
        for &i in &self.salient {
            is_salient[i] = true;
        }
        let mut min_salient = f64::INFINITY;
        let mut max_background = f64::NEG_INFINITY;
        for (i, &s) in cls.scores.iter().enumerate() {
            if is_salient[i] {
                min_salient = min_salient.min(s);
            } else {
                max_background = max_background.max(s);
            }
        }
        Ok(SalienceCheck {
            min_salient,
            max_background,
        })
    }
}

/// Fraction of the planted set that survived pruning.
pub fn salient_recall(kept: &[usize], salient: &[usize]) -> f64 {
    if salient.is_empty() {
        return 1.0;
    }
    let hits = salient.iter().filter(|s| kept.contains(s)).count();
    hits as f64 / salient.len() as f64
}

fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v {
        *x -= mean;
    }
}

/// Subtracts the projection of `v` onto the unit vector `unit`.
fn reject(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    for (a, b) in v.iter_mut().zip(unit) {
        *a -= c * b;
    }
}

/// A zero-[CLS]-logit background embedding: Gaussian draw with the basis
/// rejected, scaled to norm √d. Two rejection passes keep the residual
/// orthogonal to working precision.
fn draw_background(
    rng: &mut SeededRng,
    basis: &[Vec<f64>],
    d: usize,
    sqrt_d: f64,
) -> Option<Vec<f64>> {
    for _ in 0..16 {
        let mut g: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
        for _ in 0..2 {
            for b in basis {
                reject(&mut g, b);
            }
        }
        let gn = dot(&g, &g).sqrt();
        if gn > 1e-8 {
            for x in &mut g {
                *x *= sqrt_d / gn;
            }
            return Some(g);
        }
    }
    None
}

/// Gaussian elimination with partial pivoting; `None` when the system is
/// numerically singular. Small systems only (one row per head).
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot_row =
            (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / pivot[col];
            for (v, &p) in a[row][col..].iter_mut().zip(&pivot[col..]) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}
