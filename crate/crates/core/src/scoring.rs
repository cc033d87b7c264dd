//! Importance observation: attention of recent historical queries over
//! cache entries, with pooling and projected-value-norm refinements.

use crate::math::{self, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("observation window {m} exceeds prompt length {n_prompt}")]
    WindowTooLarge { m: usize, n_prompt: usize },
    #[error(transparent)]
    Math(#[from] math::MathError),
}

/// Per-(layer, q-head) observation matrix: m historical rows over n scored
/// entries, all values nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    pub layer: usize,
    pub head: usize,
    pub values: Matrix,
}

impl ImportanceMatrix {
    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn n(&self) -> usize {
        self.values.cols()
    }
}

/// Causal attention of the last `m` historical queries over all visible
/// cache entries. Row j covers entries 0..=(n_prompt - m + j); masked
/// positions are exactly 0 and normalization runs over the visible range.
/// Returns the full m x n_prompt matrix, before prefix restriction.
pub fn attention_windows(
    queries: &Matrix,
    keys: &Matrix,
    d_h: usize,
) -> Result<Matrix, ScoringError> {
    let m = queries.rows();
    let n_prompt = keys.rows();
    if m > n_prompt {
        return Err(ScoringError::WindowTooLarge { m, n_prompt });
    }
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut logits = math::matmul(queries, &keys.transpose())?;
    for r in 0..m {
        for c in 0..n_prompt {
            logits.set(r, c, logits.get(r, c) * scale);
        }
    }
    let prefix: Vec<usize> = (0..m).map(|j| n_prompt - m + j + 1).collect();
    Ok(math::softmax_rows(&logits, Some(&prefix))?)
}

/// Drops the protected-window columns, keeping the scored prefix
/// (entries 0..n_prompt-m). Normalization already happened over the full
/// visible range in `attention_windows`.
pub fn restrict_prefix(full: &Matrix, window: usize) -> Matrix {
    full.slice_cols(0, full.cols() - window)
}

/// Full observation pipeline for one (layer, q-head): causal attention of
/// the window queries, restricted to the scored prefix.
pub fn attention_importance(
    layer: usize,
    head: usize,
    queries: &Matrix,
    keys: &Matrix,
    d_h: usize,
) -> Result<ImportanceMatrix, ScoringError> {
    let m = queries.rows();
    if m >= keys.rows() {
        return Err(ScoringError::WindowTooLarge { m, n_prompt: keys.rows() });
    }
    let full = attention_windows(queries, keys, d_h)?;
    Ok(ImportanceMatrix {
        layer,
        head,
        values: restrict_prefix(&full, m),
    })
}

/// Average pooling along the entry axis, per historical row.
pub fn pool_importance(i: &ImportanceMatrix, kernel: usize) -> Result<ImportanceMatrix, ScoringError> {
    Ok(ImportanceMatrix {
        layer: i.layer,
        head: i.head,
        values: math::avg_pool_rows(&i.values, kernel)?,
    })
}

/// Per-entry Euclidean norm of the projected value row: ||v_i W_O(slice)||.
pub fn value_norm_weights(v: &Matrix, w_o_slice: &Matrix) -> Result<Vec<f64>, ScoringError> {
    Ok(math::row_l2_norms(&math::matmul(v, w_o_slice)?))
}

/// Projected-value norms for a whole KV group: the norm of v_i through the
/// stacked output-projection slices of the group's query heads, i.e. the
/// quadrature combination of the per-head norms. Reduces to
/// `value_norm_weights` for group size 1.
pub fn group_value_norms(v: &Matrix, w_o_slices: &[Matrix]) -> Result<Vec<f64>, ScoringError> {
    let mut acc = vec![0.0; v.rows()];
    for slice in w_o_slices {
        let norms = value_norm_weights(v, slice)?;
        for (a, n) in acc.iter_mut().zip(&norms) {
            *a += n * n;
        }
    }
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

/// Elementwise product of scores and weights.
pub fn scale_scores(r: &[f64], weights: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if r.len() != weights.len() {
        return Err(ScoringError::Math(math::MathError::DimensionMismatch(format!(
            "scale_scores lengths {} vs {}",
            r.len(),
            weights.len()
        ))));
    }
    Ok(r.iter().zip(weights).map(|(a, b)| a * b).collect())
}
