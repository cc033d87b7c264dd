//! Aggregation strategies: fold an m x n importance matrix into one score
//! per entry.
//!
//! Mean aggregation is the baseline convention. Defensive aggregation
//! takes the per-entry maximum over historical observations (worst-case
//! risk estimation) and then floors every score at the head-level mean of
//! those maxima (adaptive prior-risk correction). Both run in one O(m*n)
//! pass plus an O(n) pass.

use crate::math::Matrix;
use crate::scoring::ImportanceMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("historical token index {j} out of range 1..={m}")]
    TokenOutOfRange { j: usize, m: usize },
    #[error("group reduce: {0}")]
    GroupMismatch(String),
}

/// Which aggregation to run, including the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationSpec {
    Mean,
    /// Worst-case risk estimation without the prior correction.
    WorstCaseOnly,
    Defensive,
    /// Row j of the importance matrix, 1-based.
    SingleToken(usize),
    /// Worst-case estimation with a fixed correction floor instead of the
    /// adaptive head-level prior.
    FixedThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    Max,
    Mean,
}

impl AggregationSpec {
    /// GQA reduction across the query heads of a group: max for the
    /// risk-based kinds, mean for the baselines.
    pub fn group_mode(&self) -> GroupMode {
        match self {
            AggregationSpec::Mean | AggregationSpec::SingleToken(_) => GroupMode::Mean,
            _ => GroupMode::Max,
        }
    }

    pub fn apply(&self, i: &ImportanceMatrix) -> Result<Vec<f64>, AggregationError> {
        match *self {
            AggregationSpec::Mean => Ok(mean_aggregate(i)),
            AggregationSpec::WorstCaseOnly => Ok(worst_case_estimate(i)),
            AggregationSpec::Defensive => Ok(defensive_aggregate(i)),
            AggregationSpec::SingleToken(j) => single_token_scores(i, j),
            AggregationSpec::FixedThreshold(tau) => {
                Ok(worst_case_estimate(i).into_iter().map(|x| x.max(tau)).collect())
            }
        }
    }

    /// Aggregation applied after a max/mean group reduction of per-head
    /// matrices, matching the reduce-then-correct order: the prior risk is
    /// computed per KV head, after the group reduce.
    pub fn apply_group(&self, mats: &[&ImportanceMatrix]) -> Result<Vec<f64>, AggregationError> {
        let reduced = reduce_matrices(mats, self.group_mode())?;
        self.apply(&reduced)
    }
}

fn reduce_matrices(
    mats: &[&ImportanceMatrix],
    mode: GroupMode,
) -> Result<ImportanceMatrix, AggregationError> {
    let first = mats
        .first()
        .ok_or_else(|| AggregationError::GroupMismatch("empty group".into()))?;
    let (m, n) = (first.m(), first.n());
    for im in mats {
        if im.m() != m || im.n() != n {
            return Err(AggregationError::GroupMismatch(format!(
                "matrix {}x{} vs {}x{}",
                im.m(),
                im.n(),
                m,
                n
            )));
        }
    }
    let mut out = Matrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            let v = match mode {
                GroupMode::Max => mats
                    .iter()
                    .map(|im| im.values.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max),
                GroupMode::Mean => {
                    mats.iter().map(|im| im.values.get(r, c)).sum::<f64>() / mats.len() as f64
                }
            };
            out.set(r, c, v);
        }
    }
    Ok(ImportanceMatrix {
        layer: first.layer,
        head: first.head,
        values: out,
    })
}

/// Column means.
pub fn mean_aggregate(i: &ImportanceMatrix) -> Vec<f64> {
    let (m, n) = (i.m(), i.n());
    let mut out = vec![0.0; n];
    for j in 0..m {
        for (o, v) in out.iter_mut().zip(i.values.row(j)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= m as f64;
    }
    out
}

/// Column maxima: the per-entry worst-case risk estimate.
pub fn worst_case_estimate(i: &ImportanceMatrix) -> Vec<f64> {
    let (m, n) = (i.m(), i.n());
    let mut out = i.values.row(0).to_vec();
    for j in 1..m {
        // Branchless max keeps this loop as vectorizable as the mean pass.
        for (o, &v) in out.iter_mut().zip(i.values.row(j)) {
            *o = o.max(v);
        }
    }
    debug_assert_eq!(out.len(), n);
    out
}

/// Floors every score at the mean of the input (the head-level prior risk,
/// computed per call).
pub fn prior_risk_correct(rt: &[f64]) -> Vec<f64> {
    let prior = rt.iter().sum::<f64>() / rt.len() as f64;
    rt.iter().map(|&x| x.max(prior)).collect()
}

/// Worst-case estimation followed by adaptive prior-risk correction.
pub fn defensive_aggregate(i: &ImportanceMatrix) -> Vec<f64> {
    prior_risk_correct(&worst_case_estimate(i))
}

/// Row `j` of the importance matrix, 1-based.
pub fn single_token_scores(i: &ImportanceMatrix, j: usize) -> Result<Vec<f64>, AggregationError> {
    if j == 0 || j > i.m() {
        return Err(AggregationError::TokenOutOfRange { j, m: i.m() });
    }
    Ok(i.values.row(j - 1).to_vec())
}

/// Elementwise max or mean across the g query-head vectors of each KV
/// group. Input length must be a multiple of g.
pub fn gqa_group_reduce(
    per_q_head: &[Vec<f64>],
    group_size: usize,
    mode: GroupMode,
) -> Result<Vec<Vec<f64>>, AggregationError> {
    if group_size == 0 || per_q_head.len() % group_size != 0 {
        return Err(AggregationError::GroupMismatch(format!(
            "{} vectors not divisible by group size {}",
            per_q_head.len(),
            group_size
        )));
    }
    let len = per_q_head[0].len();
    if per_q_head.iter().any(|v| v.len() != len) {
        return Err(AggregationError::GroupMismatch("inconsistent vector lengths".into()));
    }
    let mut out = Vec::with_capacity(per_q_head.len() / group_size);
    for group in per_q_head.chunks(group_size) {
        let mut acc = group[0].clone();
        for v in &group[1..] {
            for (a, &x) in acc.iter_mut().zip(v) {
                match mode {
                    GroupMode::Max => {
                        if x > *a {
                            *a = x;
                        }
                    }
                    GroupMode::Mean => *a += x,
                }
            }
        }
        if mode == GroupMode::Mean {
            for a in &mut acc {
                *a /= group_size as f64;
            }
        }
        out.push(acc);
    }
    Ok(out)
}
