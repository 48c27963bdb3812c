//! Attention-distribution diagnostics.
//!
//! Two summary statistics over a vector of non-negative attention scores
//! (one score per visual token position):
//!
//! * **shift** — how much mass leans toward later positions, measured as
//!   the ordinary-least-squares slope of score against normalized position
//!   `i/(n-1)`, plus the Pearson correlation and the center of mass;
//! * **dispersion** — how spread out the mass is: Shannon entropy (natural
//!   log) of the normalized scores, the share captured by the top q
//!   fraction of positions, and the full sorted cumulative curve.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} scores, got {got}")]
    TooFew { got: usize, needed: usize },
    #[error("score {value} at index {index} is not a finite non-negative number")]
    InvalidScore { index: usize, value: f64 },
    #[error("scores sum to zero; statistics are undefined")]
    ZeroMass,
    #[error("quantile {q} outside (0, 1]")]
    BadQuantile { q: f64 },
}

fn validate(scores: &[f64], needed: usize) -> Result<(), AnalysisError> {
    if scores.len() < needed {
        return Err(AnalysisError::TooFew {
            got: scores.len(),
            needed,
        });
    }
    for (index, &value) in scores.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(AnalysisError::InvalidScore { index, value });
        }
    }
    Ok(())
}

// ---- Shift ----

/// Positional-lean summary of a score vector.
///
/// Positions are normalized to `x_i = i/(n-1)` in [0, 1], so `slope` is in
/// score units per full sweep of the sequence: positive means mass leans
/// toward later positions. `r` is the Pearson correlation (0 when the
/// scores are constant), `center_of_mass` the score-weighted mean of x.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftStat {
    pub slope: f64,
    pub r: f64,
    pub center_of_mass: f64,
}

/// Least-squares line through `(i/(n-1), scores[i])`.
pub fn shift_stat(scores: &[f64]) -> Result<ShiftStat, AnalysisError> {
    validate(scores, 2)?;
    let n = scores.len();
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Err(AnalysisError::ZeroMass);
    }
    let inv_span = 1.0 / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 * inv_span).collect();

    let mean_x: f64 = xs.iter().sum::<f64>() / n as f64;
    let mean_y: f64 = total / n as f64;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (&x, &y) in xs.iter().zip(scores) {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    let slope = cov / var_x;
    let r = if var_y == 0.0 {
        0.0
    } else {
        cov / (var_x.sqrt() * var_y.sqrt())
    };
    let center_of_mass = xs.iter().zip(scores).map(|(&x, &y)| x * y).sum::<f64>() / total;
    Ok(ShiftStat {
        slope,
        r,
        center_of_mass,
    })
}

// ---- Dispersion ----

/// Concentration summary of a score vector.
///
/// Scores are normalized to a probability vector first. `entropy` is in
/// nats (uniform over n gives ln n; one-hot gives 0). `top_share` is the
/// mass captured by the top `top_q` fraction of positions, computed by
/// linear interpolation on the sorted cumulative curve so it is exact at
/// whole-position boundaries. `cumulative` is that curve itself:
/// `cumulative[j]` is the mass of the j+1 largest scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionStat {
    pub entropy: f64,
    pub top_q: f64,
    pub top_share: f64,
    pub cumulative: Vec<f64>,
}

/// Entropy, top-`q`-share, and the sorted cumulative mass curve.
pub fn dispersion_stat(scores: &[f64], top_q: f64) -> Result<DispersionStat, AnalysisError> {
    validate(scores, 1)?;
    if !top_q.is_finite() || !(0.0..=1.0).contains(&top_q) || top_q == 0.0 {
        return Err(AnalysisError::BadQuantile { q: top_q });
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Err(AnalysisError::ZeroMass);
    }
    let mut probs: Vec<f64> = scores.iter().map(|s| s / total).collect();
    let entropy = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();

    probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cumulative.push(acc);
    }

    Ok(DispersionStat {
        entropy,
        top_q,
        top_share: interp_cumulative(&cumulative, top_q),
        cumulative,
    })
}

/// Value of the cumulative curve at fractional rank `q·n`, with C(0) = 0
/// and linear interpolation between whole positions.
fn interp_cumulative(cumulative: &[f64], q: f64) -> f64 {
    let n = cumulative.len() as f64;
    let pos = q * n;
    let lo = pos.floor() as usize;
    let frac = pos - pos.floor();
    let at = |j: usize| -> f64 {
        if j == 0 {
            0.0
        } else {
            cumulative[j.min(cumulative.len()) - 1]
        }
    };
    if frac == 0.0 {
        at(lo)
    } else {
        at(lo) + frac * (at(lo + 1) - at(lo))
    }
}

// ---- Row profiles ----

/// Collapses a score vector onto `row_len` columns by averaging over full
/// rows, for grid-shaped token layouts (e.g. column-wise salience of a
/// patch grid). `scores.len()` must be a multiple of `row_len`.
pub fn row_profile(scores: &[f64], row_len: usize) -> Result<Vec<f64>, AnalysisError> {
    validate(scores, 1)?;
    if row_len == 0 || !scores.len().is_multiple_of(row_len) {
        return Err(AnalysisError::TooFew {
            got: scores.len(),
            needed: row_len.max(1),
        });
    }
    let n_rows = scores.len() / row_len;
    let inv = 1.0 / n_rows as f64;
    Ok((0..row_len)
        .map(|c| (0..n_rows).map(|r| scores[r * row_len + c]).sum::<f64>() * inv)
        .collect())
}

// ---- CSV ----

/// One labeled shift/dispersion pair, e.g. one attention source at one
/// layer.
#[derive(Debug, Clone, Serialize)]
pub struct LabeledStats {
    pub label: String,
    pub shift: ShiftStat,
    pub dispersion: DispersionStat,
}

/// Renders labeled stats as CSV with header
/// `label,slope,r,center_of_mass,entropy,top_q,top_share`.
pub fn stats_csv(rows: &[LabeledStats]) -> String {
    let mut out = String::from("label,slope,r,center_of_mass,entropy,top_q,top_share\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.label,
            row.shift.slope,
            row.shift.r,
            row.shift.center_of_mass,
            row.dispersion.entropy,
            row.dispersion.top_q,
            row.dispersion.top_share,
        ));
    }
    out
}
