//! Fragility harness: full-cache future importance, retained-importance
//! ratio series, and policy comparison tables.
//!
//! Evaluation is mask-based: retained index sets are scored against the
//! full-cache future-importance record. Nothing is re-decoded with a
//! compacted cache, so the oracle side never mutates under evaluation.

use crate::aggregation::{self, AggregationSpec};
use crate::attention::Trace;
use crate::math::{self, Matrix};
use crate::policy::{BudgetMeta, BudgetScope, EvictionPlan, HeadPlan, LayerPlan};
use crate::scoring::{self, ImportanceMatrix};
use crate::traceio::ImportanceDump;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace has no decode steps")]
    NoDecodeSteps,
    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("single-token index {j} outside observation window 1..={m}")]
    CriterionOutOfRange { j: usize, m: usize },
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Aggregation(#[from] aggregation::AggregationError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Math(#[from] math::MathError),
}

/// Per (layer, q-head): importance of every prompt entry at every future
/// decode step, computed from the full-cache run only.
#[derive(Debug, Clone)]
pub struct FutureImportance {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_steps: usize,
    pub n_entries: usize,
    /// Indexed [layer][q_head], each steps x n_entries.
    pub values: Vec<Vec<Matrix>>,
}

impl FutureImportance {
    pub fn from_dump(dump: &ImportanceDump) -> Self {
        FutureImportance {
            n_layers: dump.n_layers,
            n_q_heads: dump.n_q_heads,
            n_steps: dump.n_steps,
            n_entries: dump.n_entries,
            values: dump.values.clone(),
        }
    }

    pub fn to_dump(&self) -> ImportanceDump {
        ImportanceDump {
            n_layers: self.n_layers,
            n_q_heads: self.n_q_heads,
            n_steps: self.n_steps,
            n_entries: self.n_entries,
            values: self.values.clone(),
        }
    }
}

/// I_{t,i} = A_{t,i} * ||v_i W_O(head slice)|| over prompt entries, using
/// full-cache attention rows. `use_value_norm = false` keeps raw attention.
pub fn future_importance(trace: &Trace, use_value_norm: bool) -> Result<FutureImportance, EvalError> {
    if trace.n_steps == 0 {
        return Err(EvalError::NoDecodeSteps);
    }
    let n = trace.n_prompt;
    let scale = 1.0 / (trace.d_h as f64).sqrt();
    let mut values = Vec::with_capacity(trace.n_layers);
    for layer in 0..trace.n_layers {
        let lt = &trace.layers[layer];
        let mut heads = Vec::with_capacity(trace.n_q_heads);
        for qh in 0..trace.n_q_heads {
            let g = trace.kv_head_of(qh);
            let k = &lt.k[g];
            let norms = if use_value_norm {
                scoring::value_norm_weights(&lt.v[g].slice_rows(0, n), &trace.w_o_slice(layer, qh))?
            } else {
                vec![1.0; n]
            };
            let mut out = Matrix::zeros(trace.n_steps, n);
            for t in 0..trace.n_steps {
                let pos = n + t;
                let q = lt.q[qh].row(pos);
                // Visible entries at decode step t: everything before this
                // token (attention runs pre-append).
                let logits: Vec<f64> = (0..pos)
                    .map(|i| k.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let sm = math::softmax_rows(&Matrix::from_vec(1, pos, logits), None)?;
                for i in 0..n {
                    out.set(t, i, sm.get(0, i) * norms[i]);
                }
            }
            heads.push(out);
        }
        values.push(heads);
    }
    Ok(FutureImportance {
        n_layers: trace.n_layers,
        n_q_heads: trace.n_q_heads,
        n_steps: trace.n_steps,
        n_entries: n,
        values,
    })
}

pub struct RatioSeries {
    pub ratios: Vec<f64>,
    /// Steps where total importance was zero (ratio defined as 1).
    pub zero_denominator_steps: usize,
}

/// Retained-importance ratio per step for one layer, importance summed
/// across the layer's query heads. Query heads map to their KV head's
/// retained set.
pub fn retained_ratio_series(
    fi: &FutureImportance,
    plan: &EvictionPlan,
    layer: usize,
    group_size: usize,
) -> Result<RatioSeries, EvalError> {
    if layer >= fi.n_layers {
        return Err(EvalError::LayerOutOfRange {
            layer,
            n_layers: fi.n_layers,
        });
    }
    let lp = plan
        .layers
        .iter()
        .find(|l| l.layer == layer)
        .ok_or(crate::policy::PolicyError::LayerMismatch(layer))?;
    let mut ratios = Vec::with_capacity(fi.n_steps);
    let mut zero_steps = 0;
    for t in 0..fi.n_steps {
        let mut num = 0.0;
        let mut den = 0.0;
        for qh in 0..fi.n_q_heads {
            let kvh = qh / group_size;
            let mat = &fi.values[layer][qh];
            let row = mat.row(t);
            den += row.iter().sum::<f64>();
            num += lp.heads[kvh].retained.iter().filter(|&&i| i < fi.n_entries).map(|&i| row[i]).sum::<f64>();
        }
        if den == 0.0 {
            zero_steps += 1;
            ratios.push(1.0);
        } else {
            ratios.push(num / den);
        }
    }
    Ok(RatioSeries {
        ratios,
        zero_denominator_steps: zero_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// 1-based index into the observation window.
    SingleToken(usize),
    Mean,
    WorstOnly,
    Defensive,
}

impl Criterion {
    pub fn label(&self) -> String {
        match self {
            Criterion::SingleToken(j) => format!("single{j}"),
            Criterion::Mean => "mean".into(),
            Criterion::WorstOnly => "worst-only".into(),
            Criterion::Defensive => "defensive".into(),
        }
    }

    /// Parses `single:J`, `mean`, `worst-only`, or `defensive`.
    pub fn parse(s: &str) -> Option<Criterion> {
        match s {
            "mean" => Some(Criterion::Mean),
            "worst-only" => Some(Criterion::WorstOnly),
            "defensive" => Some(Criterion::Defensive),
            _ => s
                .strip_prefix("single:")
                .and_then(|j| j.parse().ok())
                .map(Criterion::SingleToken),
        }
    }

    fn agg(&self) -> AggregationSpec {
        match *self {
            Criterion::SingleToken(j) => AggregationSpec::SingleToken(j),
            Criterion::Mean => AggregationSpec::Mean,
            Criterion::WorstOnly => AggregationSpec::WorstCaseOnly,
            Criterion::Defensive => AggregationSpec::Defensive,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FragilityReport {
    pub criterion: String,
    pub ratios: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub outlier_count: usize,
    pub outlier_threshold: f64,
    pub zero_denominator_steps: usize,
}

fn summarize(
    criterion: String,
    series: RatioSeries,
    threshold: f64,
) -> FragilityReport {
    let min = series.ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = series.ratios.iter().sum::<f64>() / series.ratios.len().max(1) as f64;
    let outlier_count = series.ratios.iter().filter(|&&r| r < threshold).count();
    FragilityReport {
        criterion,
        ratios: series.ratios,
        min,
        mean,
        outlier_count,
        outlier_threshold: threshold,
        zero_denominator_steps: series.zero_denominator_steps,
    }
}

/// Builds the eviction plan for one observation criterion, following the
/// fragility methodology: importance is attention times projected-value
/// norm per historical token (no pooling), aggregated per the criterion.
pub fn criterion_plan(
    trace: &Trace,
    criterion: Criterion,
    fraction: f64,
    window: usize,
    use_value_norm: bool,
) -> Result<EvictionPlan, EvalError> {
    if let Criterion::SingleToken(j) = criterion {
        if j == 0 || j > window {
            return Err(EvalError::CriterionOutOfRange { j, m: window });
        }
    }
    let n = trace.n_prompt;
    if window >= n {
        return Err(EvalError::Policy(crate::policy::PolicyError::WindowTooLarge {
            window,
            n_prompt: n,
        }));
    }
    let b = ((fraction * n as f64).ceil() as usize).min(n);
    let agg = criterion.agg();
    let g = trace.group_size();
    let window_indices: Vec<usize> = (n - window..n).collect();
    let k = b.saturating_sub(window).min(n - window);
    let mut layers = Vec::with_capacity(trace.n_layers);
    for layer in 0..trace.n_layers {
        let lt = &trace.layers[layer];
        // Per q-head, norm-scaled observation importance over the prefix.
        let mut per_head: Vec<ImportanceMatrix> = Vec::with_capacity(trace.n_q_heads);
        for qh in 0..trace.n_q_heads {
            let queries = lt.q[qh].slice_rows(n - window, n);
            let keys = lt.k[trace.kv_head_of(qh)].slice_rows(0, n);
            let mut im = scoring::attention_importance(layer, qh, &queries, &keys, trace.d_h)?;
            if use_value_norm {
                let norms = scoring::value_norm_weights(
                    &lt.v[trace.kv_head_of(qh)].slice_rows(0, n),
                    &trace.w_o_slice(layer, qh),
                )?;
                for r in 0..im.m() {
                    for c in 0..im.n() {
                        im.values.set(r, c, im.values.get(r, c) * norms[c]);
                    }
                }
            }
            per_head.push(im);
        }
        let heads = (0..trace.n_kv_heads)
            .map(|kvh| {
                let group: Vec<&ImportanceMatrix> =
                    per_head[kvh * g..(kvh + 1) * g].iter().collect();
                let scores = agg.apply_group(&group)?;
                let mut retained = math::top_k_indices(&scores, k)?;
                retained.extend_from_slice(&window_indices);
                Ok(HeadPlan {
                    head: kvh,
                    retained,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        layers.push(LayerPlan { layer, heads });
    }
    Ok(EvictionPlan {
        policy: format!("criterion-{}", criterion.label()),
        budget: BudgetMeta {
            fraction,
            window,
            sinks: 0,
            scope: BudgetScope::PerHead,
            clamped: false,
        },
        seed: None,
        layers,
    })
}

/// Full fragility run on one layer: for every criterion, simulate the
/// eviction, score the retained set against full-cache future importance,
/// and summarize min / mean / outliers.
pub fn fragility_analysis(
    trace: &Trace,
    layer: usize,
    fraction: f64,
    window: usize,
    criteria: &[Criterion],
    threshold: f64,
    use_value_norm: bool,
) -> Result<Vec<FragilityReport>, EvalError> {
    if layer >= trace.n_layers {
        return Err(EvalError::LayerOutOfRange {
            layer,
            n_layers: trace.n_layers,
        });
    }
    let fi = future_importance(trace, use_value_norm)?;
    let mut reports = Vec::with_capacity(criteria.len());
    for c in criteria {
        let plan = criterion_plan(trace, *c, fraction, window, use_value_norm)?;
        let series = retained_ratio_series(&fi, &plan, layer, trace.group_size())?;
        reports.push(summarize(c.label(), series, threshold));
    }
    Ok(reports)
}

/// A directly constructed observation + future pair, used for synthetic
/// families that bypass the toy model (and for external kind-2 dumps).
pub struct ImportanceInstance {
    /// Per q-head observation matrices, m x n.
    pub obs: Vec<ImportanceMatrix>,
    /// Per q-head future matrices, steps x n.
    pub future: Vec<Matrix>,
    pub group_size: usize,
}

/// Fragility comparison on a constructed instance. `window` trailing
/// entries are protected (0 for none).
pub fn fragility_on_instance(
    inst: &ImportanceInstance,
    fraction: f64,
    window: usize,
    criteria: &[Criterion],
    threshold: f64,
) -> Result<Vec<FragilityReport>, EvalError> {
    let n = inst.obs[0].n();
    let steps = inst.future[0].rows();
    let b = ((fraction * n as f64).ceil() as usize).min(n);
    let k = b.saturating_sub(window).min(n - window);
    let g = inst.group_size;
    let n_kv = inst.obs.len() / g;
    let mut reports = Vec::with_capacity(criteria.len());
    for c in criteria {
        let agg = c.agg();
        let mut retained_per_kv: Vec<Vec<usize>> = Vec::with_capacity(n_kv);
        for kvh in 0..n_kv {
            let group: Vec<&ImportanceMatrix> = inst.obs[kvh * g..(kvh + 1) * g].iter().collect();
            let scores = agg.apply_group(&group)?;
            let mut retained = math::top_k_indices(&scores[..n - window], k)?;
            retained.extend(n - window..n);
            retained_per_kv.push(retained);
        }
        let mut ratios = Vec::with_capacity(steps);
        let mut zero_steps = 0;
        for t in 0..steps {
            let mut num = 0.0;
            let mut den = 0.0;
            for (qh, fut) in inst.future.iter().enumerate() {
                let row = fut.row(t);
                den += row.iter().sum::<f64>();
                num += retained_per_kv[qh / g].iter().map(|&i| row[i]).sum::<f64>();
            }
            if den == 0.0 {
                zero_steps += 1;
                ratios.push(1.0);
            } else {
                ratios.push(num / den);
            }
        }
        reports.push(summarize(
            c.label(),
            RatioSeries {
                ratios,
                zero_denominator_steps: zero_steps,
            },
            threshold,
        ));
    }
    Ok(reports)
}

/// Planted-spike instance family: a handful of entries matter only in one
/// observation row each but dominate bursts of future steps, so mean
/// aggregation drops them while max-based criteria keep them. By
/// construction the defensive criterion beats mean on every seed.
pub fn planted_spike_instance(seed: u64) -> ImportanceInstance {
    let mut rng = crate::rng::SplitMix64::new(seed).fork(0x5350494b); // "SPIK"
    let n = 64;
    let m = 32;
    let steps = 100;
    let n_spikes = 4;
    let spikes: Vec<usize> = (0..n_spikes).map(|i| 2 + i * 7 + rng.below(5)).collect();
    let mut obs = Matrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            obs.set(r, c, 0.05 + 0.05 * rng.uniform());
        }
    }
    for (si, &s) in spikes.iter().enumerate() {
        for r in 0..m {
            obs.set(r, s, 0.01);
        }
        let row = (si * 9 + rng.below(3)) % m;
        obs.set(row, s, 1.0);
    }
    let mut future = Matrix::zeros(steps, n);
    for t in 0..steps {
        for c in 0..n {
            future.set(t, c, 0.02 + 0.02 * rng.uniform());
        }
        if t % 4 == 0 {
            // Spike burst: the spiked entries carry most of the mass.
            let s = spikes[(t / 4) % n_spikes];
            future.set(t, s, 12.0);
        }
    }
    ImportanceInstance {
        obs: vec![ImportanceMatrix {
            layer: 0,
            head: 0,
            values: obs,
        }],
        future: vec![future],
        group_size: 1,
    }
}

/// One comparison-table row: a policy at a budget, scored over traces.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub policy: String,
    pub budget: f64,
    pub mean_ratio: f64,
    pub worst_ratio: f64,
    pub outlier_count: usize,
    pub retained_total: usize,
}

/// Policy x budget table over a set of traces. Ratios aggregate importance
/// across all layers and heads per step; rows follow input order.
pub fn compare_policies(
    traces: &[Trace],
    policies: &[crate::policy::PolicyKind],
    budgets: &[f64],
    window: usize,
    kernel: usize,
    threshold: f64,
) -> Result<Vec<ComparisonRow>, EvalError> {
    let fis: Vec<FutureImportance> = traces
        .iter()
        .map(|t| future_importance(t, true))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for &kind in policies {
        for &budget in budgets {
            let mut all_ratios: Vec<f64> = Vec::new();
            let mut retained_total = 0;
            for (trace, fi) in traces.iter().zip(&fis) {
                let plan = crate::policy::build_plan(trace, kind, budget, window, kernel, None)?;
                retained_total += plan.total_retained();
                let series = global_ratio_series(fi, &plan, trace.group_size());
                all_ratios.extend(series);
            }
            let mean_ratio = all_ratios.iter().sum::<f64>() / all_ratios.len().max(1) as f64;
            let worst_ratio = all_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            let outlier_count = all_ratios.iter().filter(|&&r| r < threshold).count();
            rows.push(ComparisonRow {
                policy: kind.name().into(),
                budget,
                mean_ratio,
                worst_ratio,
                outlier_count,
                retained_total,
            });
        }
    }
    Ok(rows)
}

/// Ratio per step with importance summed across every layer and head.
pub fn global_ratio_series(fi: &FutureImportance, plan: &EvictionPlan, group_size: usize) -> Vec<f64> {
    let mut ratios = Vec::with_capacity(fi.n_steps);
    for t in 0..fi.n_steps {
        let mut num = 0.0;
        let mut den = 0.0;
        for (layer, lp) in plan.layers.iter().enumerate() {
            for qh in 0..fi.n_q_heads {
                let row = fi.values[layer][qh].row(t);
                den += row.iter().sum::<f64>();
                num += lp.heads[qh / group_size]
                    .retained
                    .iter()
                    .filter(|&&i| i < fi.n_entries)
                    .map(|&i| row[i])
                    .sum::<f64>();
            }
        }
        ratios.push(if den == 0.0 { 1.0 } else { num / den });
    }
    ratios
}
