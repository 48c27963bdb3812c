//! Dense f64 matrices, a deterministic RNG, and the handful of numeric
//! kernels everything else is built from: matmul, row softmax (plain and
//! masked), and seeded Gaussian initialization.
//!
//! All math in this crate runs in f64. Matrices are row-major and validate
//! their shape on construction; kernels return [`TensorError`] instead of
//! panicking on shape mismatches so callers can surface the offending
//! dimensions.

use thiserror::Error;

/// Additive mask sentinel for [`masked_softmax_rows`]. A logit with this
/// value added underflows to zero weight after the max-shifted exp; masked
/// outputs are additionally forced to exactly 0.0 so downstream equality
/// checks can rely on bit-exact zeros.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix construction: expected {rows}x{cols} = {expected} entries, got {got}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("matrix construction: entry ({row},{col}) is not finite ({value})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("softmax: row {row} is fully masked; no probability mass to assign")]
    FullyMaskedRow { row: usize },
    #[error("matrix must be non-empty, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
}

// ---- DenseMatrix ----

/// Row-major dense matrix of f64. The only tensor type in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Empty { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    row: i / cols,
                    col: i % cols,
                    value: v,
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zeros: empty shape {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Empty { rows: 0, cols: 0 });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::BadLength {
                    rows: rows.len(),
                    cols,
                    expected: rows.len() * cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Selects the given rows, in the given order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, TensorError> {
        if indices.is_empty() {
            return Err(TensorError::Empty {
                rows: 0,
                cols: self.cols,
            });
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "select_rows",
                    left_rows: self.rows,
                    left_cols: self.cols,
                    right_rows: i,
                    right_cols: 0,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Stacks matrices vertically. All inputs must agree on column count.
    pub fn vstack(parts: &[&DenseMatrix]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or(TensorError::Empty { rows: 0, cols: 0 })?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "vstack",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: p.rows,
                    right_cols: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(
            row.len(),
            self.cols,
            "push_row: expected {} entries, got {}",
            self.cols,
            row.len()
        );
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// True when every entry is finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    // Construction path for kernel outputs: shape is trusted, entries were
    // produced by finite arithmetic. Debug builds still verify.
    fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
}

// ---- SeededRng ----

/// Deterministic 64-bit generator: xoshiro256++ with SplitMix64 seeding.
///
/// The algorithm is fixed here on purpose — the test suite freezes expected
/// values against this exact stream, and reports must be byte-identical for
/// identical (seed, config) across runs. Uniform doubles take the top 53 bits
/// of the next output; Gaussians use the Marsaglia polar method with the
/// spare deviate cached.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    spare_gaussian: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 expands the single-word seed into the 256-bit state;
        // this follows the reference initialization recipe for xoshiro.
        let mut sm = seed;
        let mut next_sm = || {
            sm = sm.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        Self {
            state: [next_sm(), next_sm(), next_sm(), next_sm()],
            spare_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal deviate (mean 0, standard deviation 1).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // Marsaglia polar method: rejection-sample a point in the unit disc,
        // then map it to two independent normals.
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * s.ln() / s).sqrt();
                self.spare_gaussian = Some(v * factor);
                return u * factor;
            }
        }
    }

    /// Uniform integer in [0, bound) via rejection sampling (no modulo bias).
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below: bound must be positive");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % bound) as usize;
            }
        }
    }

    /// Samples k distinct indices from 0..n by partial Fisher–Yates,
    /// returned in ascending order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_indices: k={k} exceeds n={n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

// ---- Kernels ----

/// C = A · B. Shapes: (r×k) · (k×c) → (r×c).
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    // i-k-j order so the inner loop streams over contiguous rows of B.
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix::from_parts(a.rows, b.cols, out))
}

/// C = A · Bᵀ. Shapes: (r×k) · (c×k)ᵀ → (r×c). Used for attention scores
/// (queries against keys) without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    if a.cols != b.cols {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.rows];
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(DenseMatrix::from_parts(a.rows, b.rows, out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max-subtraction for stability. Every output row
/// sums to 1 and contains no NaN for finite input.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.data.clone();
    for r in 0..x.rows {
        softmax_slice(&mut out[r * x.cols..(r + 1) * x.cols]);
    }
    DenseMatrix::from_parts(x.rows, x.cols, out)
}

/// Softmax over `x + mask` per row, where mask entries are either 0 (keep)
/// or [`MASK_SENTINEL`] (drop). Masked positions are forced to exactly 0.0
/// in the output. A row with every position masked is an error.
pub fn masked_softmax_rows(
    x: &DenseMatrix,
    mask: &DenseMatrix,
) -> Result<DenseMatrix, TensorError> {
    if x.rows != mask.rows || x.cols != mask.cols {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax_rows",
            left_rows: x.rows,
            left_cols: x.cols,
            right_rows: mask.rows,
            right_cols: mask.cols,
        });
    }
    let mut out = vec![0.0; x.rows * x.cols];
    for r in 0..x.rows {
        let xr = x.row(r);
        let mr = mask.row(r);
        if mr.iter().all(|&m| m == MASK_SENTINEL) {
            return Err(TensorError::FullyMaskedRow { row: r });
        }
        let row = &mut out[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            row[c] = xr[c] + mr[c];
        }
        softmax_slice(row);
        // The sentinel already underflows to zero weight; force exact zeros
        // so masked positions compare bit-equal to a physically absent token.
        for c in 0..x.cols {
            if mr[c] == MASK_SENTINEL {
                row[c] = 0.0;
            }
        }
    }
    Ok(DenseMatrix::from_parts(x.rows, x.cols, out))
}

pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Matrix of i.i.d. Gaussian draws scaled by `scale`, consumed from `rng`
/// in row-major order. Identical (seed, shape, scale) reproduces identical
/// bytes.
pub fn randn_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    assert!(scale > 0.0, "randn_matrix: scale must be positive");
    let data = (0..rows * cols)
        .map(|_| rng.next_gaussian() * scale)
        .collect();
    DenseMatrix::from_parts(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    // ---- construction ----

    #[test]
    fn new_rejects_wrong_length() {
        let err = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::BadLength {
                expected: 4,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = DenseMatrix::new(1, 3, vec![1.0, f64::NAN, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { row: 0, col: 1, .. }));
    }

    #[test]
    fn select_rows_picks_in_order() {
        let a = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = a.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    // ---- matmul ----

    #[test]
    fn matmul_identity_is_noop() {
        let a = m(2, 2, &[1.5, -2.0, 0.25, 4.0]);
        let out = matmul(&a, &DenseMatrix::identity(2)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_computed_2x3_times_3x2() {
        // [[1,2,3],[4,5,6]] * [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_zero_matrix_annihilates() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = DenseMatrix::zeros(3, 4);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = m(2, 3, &[0.0; 6]);
        let b = m(2, 2, &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "got: {msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = SeededRng::new(9);
        let a = randn_matrix(&mut rng, 4, 6, 1.0);
        let b = randn_matrix(&mut rng, 5, 6, 1.0);
        // Explicit transpose of b.
        let mut bt = DenseMatrix::zeros(6, 5);
        for r in 0..5 {
            for c in 0..6 {
                bt.set(c, r, b.get(r, c));
            }
        }
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &bt).unwrap();
        assert!(via_nt.max_abs_diff(&via_t).unwrap() < TOL);
    }

    // ---- softmax ----

    #[test]
    fn softmax_uniform_logits_gives_uniform_rows() {
        let x = m(2, 4, &[3.0; 8]);
        let s = softmax_rows(&x);
        for r in 0..2 {
            for c in 0..4 {
                assert!((s.get(r, c) - 0.25).abs() < TOL);
            }
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        // exp(0 - 1000) underflows to zero; the row must still be [1, 0]
        // with no NaN from overflow.
        let x = m(1, 2, &[1000.0, 0.0]);
        let s = softmax_rows(&x);
        assert!(s.all_finite());
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn softmax_two_logits_differing_by_ln2() {
        // exp(ln 2) : exp(0) = 2 : 1 → [2/3, 1/3].
        let x = m(1, 2, &[std::f64::consts::LN_2, 0.0]);
        let s = softmax_rows(&x);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < TOL);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn masked_softmax_single_survivor_gets_all_mass() {
        let x = m(1, 3, &[0.3, 0.1, 0.9]);
        let mask = m(1, 3, &[MASK_SENTINEL, 0.0, MASK_SENTINEL]);
        let s = masked_softmax_rows(&x, &mask).unwrap();
        assert_eq!(s.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_forces_exact_zeros() {
        let x = m(1, 4, &[5.0, 1.0, 2.0, 3.0]);
        let mask = m(1, 4, &[0.0, MASK_SENTINEL, 0.0, MASK_SENTINEL]);
        let s = masked_softmax_rows(&x, &mask).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(0, 3), 0.0);
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < TOL);
    }

    #[test]
    fn masked_softmax_lower_triangular_uniform_logits() {
        // 3x3 causal pattern over equal logits: row i is uniform over 0..=i.
        let x = m(3, 3, &[0.0; 9]);
        let mut mask = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in (i + 1)..3 {
                mask.set(i, j, MASK_SENTINEL);
            }
        }
        let s = masked_softmax_rows(&x, &mask).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert!(
                    (s.get(i, j) - expected).abs() < TOL,
                    "row {i} col {j}: got {}, expected {expected}",
                    s.get(i, j)
                );
            }
        }
    }

    #[test]
    fn masked_softmax_fully_masked_row_errors() {
        let x = m(2, 2, &[0.0; 4]);
        let mask = m(2, 2, &[0.0, 0.0, MASK_SENTINEL, MASK_SENTINEL]);
        let err = masked_softmax_rows(&x, &mask).unwrap_err();
        assert_eq!(err, TensorError::FullyMaskedRow { row: 1 });
    }

    // ---- rng ----

    #[test]
    fn rng_identical_seed_identical_stream() {
        let mut a = SeededRng::new(123);
        let mut b = SeededRng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_different_seeds_diverge() {
        let mut a = SeededRng::new(123);
        let mut b = SeededRng::new(124);
        let differs = (0..16).any(|_| a.next_u64() != b.next_u64());
        assert!(differs);
    }

    #[test]
    fn rng_uniform_in_unit_interval() {
        let mut rng = SeededRng::new(7);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn sample_indices_are_distinct_sorted_and_in_range() {
        let mut rng = SeededRng::new(5);
        for _ in 0..100 {
            let s = rng.sample_indices(20, 7);
            assert_eq!(s.len(), 7);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&i| i < 20));
        }
    }

    #[test]
    fn sample_indices_full_draw_is_identity_set() {
        let mut rng = SeededRng::new(11);
        assert_eq!(rng.sample_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }

    // ---- randn ----

    #[test]
    fn randn_seed_42_large_sample_moments() {
        // 10^6 draws: sample mean of N(0,1) has sd 0.001, so ±0.01 is a
        // ten-sigma band; sample sd concentrates far tighter than 5%.
        let mut rng = SeededRng::new(42);
        let x = randn_matrix(&mut rng, 1000, 1000, 1.0);
        let n = (x.rows() * x.cols()) as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "sample mean {mean} out of band");
        let var = x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        assert!((sd - 1.0).abs() < 0.01, "sample sd {sd} out of band");
    }

    #[test]
    fn randn_scale_applies_to_stddev() {
        let mut rng = SeededRng::new(42);
        let x = randn_matrix(&mut rng, 1000, 1000, 0.02);
        let n = (x.rows() * x.cols()) as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        assert!(
            (sd - 0.02).abs() < 0.001,
            "sample sd {sd} not within 5% of 0.02"
        );
    }

    #[test]
    fn randn_identical_seed_identical_bytes() {
        let mut a = SeededRng::new(77);
        let mut b = SeededRng::new(77);
        let x = randn_matrix(&mut a, 13, 9, 0.5);
        let y = randn_matrix(&mut b, 13, 9, 0.5);
        let same = x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same);
    }

    // ---- property tests ----

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn finite_matrix(max_dim: usize) -> impl Strategy<Value = DenseMatrix> {
            (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-50.0..50.0f64, r * c)
                    .prop_map(move |data| DenseMatrix::new(r, c, data).unwrap())
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_stay_finite(x in finite_matrix(8)) {
                let s = softmax_rows(&x);
                prop_assert!(s.all_finite());
                for r in 0..s.rows() {
                    let sum: f64 = s.row(r).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn causal_masked_softmax_has_exact_zeros_above_diagonal(
                x in finite_matrix(8)
            ) {
                let n = x.rows().min(x.cols());
                // Square it off so a causal pattern makes sense.
                let mut sq = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        sq.set(i, j, x.get(i, j));
                    }
                }
                let mut mask = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        mask.set(i, j, MASK_SENTINEL);
                    }
                }
                let s = masked_softmax_rows(&sq, &mask).unwrap();
                for i in 0..n {
                    for j in (i + 1)..n {
                        prop_assert_eq!(s.get(i, j), 0.0);
                    }
                    let sum: f64 = s.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }

            #[test]
            fn matmul_is_associative_within_tolerance(
                seed in 0u64..1000
            ) {
                let mut rng = SeededRng::new(seed);
                let a = randn_matrix(&mut rng, 3, 4, 1.0);
                let b = randn_matrix(&mut rng, 4, 5, 1.0);
                let c = randn_matrix(&mut rng, 5, 2, 1.0);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-9);
            }
        }
    }
}
