//! Reading attention scores off recorded traces: the [CLS] row of the
//! encoder, and aggregated text/image/last-token attention profiles over
//! the decoder's visual positions.
//!
//! Head aggregation is always the arithmetic mean. Scores are raw softmax
//! weights — the [CLS] self-attention column is excluded but nothing is
//! renormalized, so a score vector sums to at most 1.

use thiserror::Error;

use crate::model::{AttentionTrace, ModelError, SequenceLayout};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{source_name} segment is empty; no rows to aggregate")]
    EmptySegment { source_name: &'static str },
    #[error("trace layer is {got}x{got} but the layout describes {expected} positions")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("attention matrix has {cols} columns; need at least a [CLS] column plus one patch")]
    TooNarrow { cols: usize },
}

/// Which query rows a decoder attention profile averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSource {
    /// Image rows attending to image columns.
    Image,
    /// Text rows attending to image columns.
    Text,
    /// The single final position attending to image columns.
    Last,
}

impl AttentionSource {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionSource::Image => "image",
            AttentionSource::Text => "text",
            AttentionSource::Last => "last",
        }
    }
}

/// Head-averaged [CLS]→patch attention at one encoder layer. `scores[j]`
/// is the weight [CLS] puts on patch j (0-based patch index, i.e. trace
/// column j+1).
#[derive(Debug, Clone)]
pub struct ClsAttention {
    pub scores: Vec<f64>,
    pub source_layer: usize,
}

/// Head- and row-averaged attention received by each visual position from
/// one source segment of the decoder sequence.
#[derive(Debug, Clone)]
pub struct VisualAttentionProfile {
    pub scores: Vec<f64>,
    pub source: AttentionSource,
    pub layer: usize,
}

/// Extracts the [CLS] attention row at `layer` from an encoder trace,
/// averaging heads and dropping the [CLS] self-attention column.
pub fn extract_cls_attention(
    trace: &AttentionTrace,
    layer: usize,
) -> Result<ClsAttention, ProbeError> {
    let mean = trace.head_mean(layer)?;
    if mean.cols() < 2 {
        return Err(ProbeError::TooNarrow { cols: mean.cols() });
    }
    Ok(ClsAttention {
        scores: mean.row(0)[1..].to_vec(),
        source_layer: layer,
    })
}

/// Averages, over the query rows named by `source` (and over heads), the
/// attention paid to each visual column of a decoder trace. `layout` must
/// describe the sequence the traced layer actually processed — after
/// prune-at-layer runs, that is the reduced layout for deep layers.
pub fn extract_visual_profile(
    trace: &AttentionTrace,
    layout: &SequenceLayout,
    layer: usize,
    source: AttentionSource,
) -> Result<VisualAttentionProfile, ProbeError> {
    let mean = trace.head_mean(layer)?;
    let total = layout.total();
    if mean.rows() != total {
        return Err(ProbeError::LayoutMismatch {
            expected: total,
            got: mean.rows(),
        });
    }
    if layout.img_len == 0 {
        return Err(ProbeError::EmptySegment {
            source_name: "image",
        });
    }
    let rows: Vec<usize> = match source {
        AttentionSource::Image => layout.img_range().collect(),
        AttentionSource::Text => layout.txt_range().collect(),
        AttentionSource::Last => vec![total - 1],
    };
    if rows.is_empty() {
        return Err(ProbeError::EmptySegment {
            source_name: source.name(),
        });
    }
    let img = layout.img_range();
    let inv = 1.0 / rows.len() as f64;
    let scores = img
        .map(|col| rows.iter().map(|&r| mean.get(r, col)).sum::<f64>() * inv)
        .collect();
    Ok(VisualAttentionProfile {
        scores,
        source,
        layer,
    })
}

// ---- CSV export ----

/// One labeled score vector for CSV export.
#[derive(Debug, Clone)]
pub struct ScoreGroup<'a> {
    pub source: &'a str,
    pub layer: usize,
    pub scores: &'a [f64],
}

/// Renders score vectors as CSV with columns `position,score,source,layer`.
pub fn scores_csv(groups: &[ScoreGroup]) -> String {
    let mut out = String::from("position,score,source,layer\n");
    for g in groups {
        for (pos, s) in g.scores.iter().enumerate() {
            out.push_str(&format!("{pos},{s},{},{}\n", g.source, g.layer));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    fn trace_from(heads_per_layer: Vec<Vec<DenseMatrix>>) -> AttentionTrace {
        let mut t = AttentionTrace::new();
        for heads in heads_per_layer {
            t.push_layer(heads);
        }
        t
    }

    fn uniform_rows(n: usize) -> DenseMatrix {
        DenseMatrix::new(n, n, vec![1.0 / n as f64; n * n]).unwrap()
    }

    /// Row i uniform over positions 0..=i, zero above the diagonal.
    fn uniform_causal(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, 1.0 / (i + 1) as f64);
            }
        }
        m
    }

    #[test]
    fn cls_attention_single_head_is_the_raw_row() {
        let mut m = uniform_rows(4);
        m.row_mut(0).copy_from_slice(&[0.1, 0.5, 0.15, 0.25]);
        let trace = trace_from(vec![vec![m]]);
        let cls = extract_cls_attention(&trace, 0).unwrap();
        assert_eq!(cls.scores, vec![0.5, 0.15, 0.25]);
        assert_eq!(cls.source_layer, 0);
    }

    #[test]
    fn cls_attention_averages_heads() {
        let mut h1 = uniform_rows(3);
        h1.row_mut(0).copy_from_slice(&[0.0, 0.7, 0.3]);
        let mut h2 = uniform_rows(3);
        h2.row_mut(0).copy_from_slice(&[0.0, 0.1, 0.9]);
        let trace = trace_from(vec![vec![h1, h2]]);
        let cls = extract_cls_attention(&trace, 0).unwrap();
        assert!((cls.scores[0] - 0.4).abs() < 1e-12);
        assert!((cls.scores[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn cls_scores_exclude_self_attention_and_are_not_renormalized() {
        let mut m = uniform_rows(3);
        m.row_mut(0).copy_from_slice(&[0.5, 0.3, 0.2]);
        let trace = trace_from(vec![vec![m]]);
        let cls = extract_cls_attention(&trace, 0).unwrap();
        let sum: f64 = cls.scores.iter().sum();
        assert!((sum - 0.5).abs() < 1e-12, "scores must keep raw scale");
        assert!(sum <= 1.0 + 1e-9);
    }

    #[test]
    fn cls_attention_layer_out_of_range() {
        let trace = trace_from(vec![vec![uniform_rows(3)]]);
        assert!(extract_cls_attention(&trace, 1).is_err());
    }

    #[test]
    fn uniform_attention_yields_uniform_profiles() {
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 3,
            txt_len: 2,
            out_len: 1,
        };
        let trace = trace_from(vec![vec![uniform_rows(7)]]);
        for source in [
            AttentionSource::Image,
            AttentionSource::Text,
            AttentionSource::Last,
        ] {
            let p = extract_visual_profile(&trace, &layout, 0, source).unwrap();
            assert_eq!(p.scores.len(), 3);
            for &s in &p.scores {
                assert!((s - 1.0 / 7.0).abs() < 1e-12, "{source:?}: {s}");
            }
        }
    }

    #[test]
    fn image_source_hand_computed_means() {
        // layout [sys=1; img=2; txt=0; out=1], single head, hand-set rows.
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 2,
            txt_len: 0,
            out_len: 1,
        };
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.2, 0.8, 0.0, 0.0],
            vec![0.1, 0.3, 0.6, 0.0],
            vec![0.4, 0.1, 0.2, 0.3],
        ])
        .unwrap();
        let trace = trace_from(vec![vec![m]]);
        let p = extract_visual_profile(&trace, &layout, 0, AttentionSource::Image).unwrap();
        // Image rows are 1 and 2; visual columns are 1 and 2.
        assert!((p.scores[0] - (0.8 + 0.3) / 2.0).abs() < 1e-12);
        assert!((p.scores[1] - (0.0 + 0.6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn last_source_under_uniform_causal_attention() {
        // Sequence of img_len + 1 positions with uniform causal rows: the
        // last row weights every position 1/l, so each visual token scores
        // 1/l.
        let img_len = 3;
        let l = img_len + 1;
        let layout = SequenceLayout {
            sys_len: 0,
            img_len,
            txt_len: 0,
            out_len: 1,
        };
        let trace = trace_from(vec![vec![uniform_causal(l)]]);
        let p = extract_visual_profile(&trace, &layout, 0, AttentionSource::Last).unwrap();
        for &s in &p.scores {
            assert!((s - 1.0 / l as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn last_source_equals_the_final_row_slice() {
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 2,
            txt_len: 1,
            out_len: 1,
        };
        let m = uniform_causal(5);
        let trace = trace_from(vec![vec![m.clone()]]);
        let p = extract_visual_profile(&trace, &layout, 0, AttentionSource::Last).unwrap();
        assert_eq!(p.scores.as_slice(), &m.row(4)[1..3]);
    }

    #[test]
    fn empty_text_segment_is_an_error() {
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 2,
            txt_len: 0,
            out_len: 1,
        };
        let trace = trace_from(vec![vec![uniform_rows(4)]]);
        let err = extract_visual_profile(&trace, &layout, 0, AttentionSource::Text).unwrap_err();
        assert!(err.to_string().contains("text"));
    }

    #[test]
    fn layout_trace_disagreement_is_an_error() {
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 2,
            txt_len: 1,
            out_len: 1,
        };
        let trace = trace_from(vec![vec![uniform_rows(4)]]);
        assert!(matches!(
            extract_visual_profile(&trace, &layout, 0, AttentionSource::Image),
            Err(ProbeError::LayoutMismatch {
                expected: 5,
                got: 4
            })
        ));
    }

    #[test]
    fn head_permutation_leaves_profiles_nearly_unchanged() {
        let mut h1 = uniform_rows(4);
        h1.row_mut(0).copy_from_slice(&[0.4, 0.3, 0.2, 0.1]);
        let mut h2 = uniform_rows(4);
        h2.row_mut(0).copy_from_slice(&[0.25, 0.25, 0.25, 0.25]);
        let mut h3 = uniform_rows(4);
        h3.row_mut(0).copy_from_slice(&[0.1, 0.1, 0.4, 0.4]);

        let a = extract_cls_attention(
            &trace_from(vec![vec![h1.clone(), h2.clone(), h3.clone()]]),
            0,
        )
        .unwrap();
        let b = extract_cls_attention(&trace_from(vec![vec![h3, h1, h2]]), 0).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let trace = trace_from(vec![vec![uniform_causal(5)]]);
        let layout = SequenceLayout {
            sys_len: 1,
            img_len: 3,
            txt_len: 0,
            out_len: 1,
        };
        let a = extract_visual_profile(&trace, &layout, 0, AttentionSource::Image).unwrap();
        let b = extract_visual_profile(&trace, &layout, 0, AttentionSource::Image).unwrap();
        let same = a
            .scores
            .iter()
            .zip(&b.scores)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
    }

    #[test]
    fn csv_has_expected_shape() {
        let csv = scores_csv(&[ScoreGroup {
            source: "cls",
            layer: 0,
            scores: &[0.5, 0.25],
        }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "position,score,source,layer");
        assert_eq!(lines[1], "0,0.5,cls,0");
        assert_eq!(lines[2], "1,0.25,cls,0");
    }
}
