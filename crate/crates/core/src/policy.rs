//! Eviction policies: scoring + aggregation + budget allocation composed
//! into retained-index plans.
//!
//! The protected recent window always counts toward the budget and is
//! retained unconditionally by every score-based policy. Eviction is
//! one-shot over the prompt cache; nothing is re-evicted during decode.

use crate::aggregation::AggregationSpec;
use crate::attention::{KVCache, Trace};
use crate::scoring::{self, ImportanceMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("budget fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("per-head budget {budget} below sink count {sinks}")]
    BudgetBelowSinks { budget: usize, sinks: usize },
    #[error("global budget {budget} below total protected windows {windows}")]
    BudgetBelowWindows { budget: usize, windows: usize },
    #[error("window {window} must be smaller than prompt length {n_prompt}")]
    WindowTooLarge { window: usize, n_prompt: usize },
    #[error("plan index {index} out of range for cache of {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("plan does not cover layer {0}")]
    LayerMismatch(usize),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Aggregation(#[from] crate::aggregation::AggregationError),
    #[error(transparent)]
    Math(#[from] crate::math::MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetScope {
    PerHead,
    PerLayerJoint,
    GlobalJoint,
}

/// Budget description. The fraction converts to entries as
/// B = ceil(fraction * n) per scope unit, so the evicted side is the one
/// rounded down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub fraction: f64,
    /// Protected recent-token count (the observation window).
    pub window: usize,
    /// StreamingLLM only.
    pub sinks: usize,
    pub scope: BudgetScope,
}

impl BudgetSpec {
    pub fn new(fraction: f64, scope: BudgetScope) -> Self {
        BudgetSpec {
            fraction,
            window: 32,
            sinks: 4,
            scope,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(PolicyError::BadFraction(self.fraction));
        }
        Ok(())
    }

    /// Budget in entries for a scope unit containing `n` candidate entries.
    pub fn entries(&self, n: usize) -> usize {
        (self.fraction * n as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub head: usize,
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub heads: Vec<HeadPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetMeta {
    pub fraction: f64,
    pub window: usize,
    pub sinks: usize,
    pub scope: BudgetScope,
    /// Set when the per-head budget fell below the window and the plan
    /// degraded to keeping only the most recent tokens.
    pub clamped: bool,
}

/// Per-(layer, kv-head) retained index sets, ascending, windows included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub policy: String,
    pub budget: BudgetMeta,
    pub seed: Option<u64>,
    pub layers: Vec<LayerPlan>,
}

impl EvictionPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization")
    }

    pub fn retained_count(&self, layer: usize) -> usize {
        self.layers[layer].heads.iter().map(|h| h.retained.len()).sum()
    }

    pub fn total_retained(&self) -> usize {
        self.layers.iter().map(|l| l.heads.iter().map(|h| h.retained.len()).sum::<usize>()).sum()
    }
}

fn meta(budget: &BudgetSpec, clamped: bool) -> BudgetMeta {
    BudgetMeta {
        fraction: budget.fraction,
        window: budget.window,
        sinks: budget.sinks,
        scope: budget.scope,
        clamped,
    }
}

/// Sink tokens plus the most recent tokens, no scoring.
pub fn streaming_llm_plan(
    n: usize,
    n_layers: usize,
    n_kv_heads: usize,
    budget: &BudgetSpec,
) -> Result<EvictionPlan, PolicyError> {
    budget.validate()?;
    let b = budget.entries(n).min(n);
    if b < budget.sinks {
        return Err(PolicyError::BudgetBelowSinks {
            budget: b,
            sinks: budget.sinks,
        });
    }
    let mut retained: Vec<usize> = (0..budget.sinks.min(n)).collect();
    let recent = b - budget.sinks;
    retained.extend(n.saturating_sub(recent)..n);
    retained.sort_unstable();
    retained.dedup();
    let layers = (0..n_layers)
        .map(|layer| LayerPlan {
            layer,
            heads: (0..n_kv_heads)
                .map(|head| HeadPlan {
                    head,
                    retained: retained.clone(),
                })
                .collect(),
        })
        .collect();
    Ok(EvictionPlan {
        policy: "streaming".into(),
        budget: meta(budget, false),
        seed: None,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOpts {
    pub pool_kernel: usize,
    pub use_value_norm: bool,
}

impl Default for ScoringOpts {
    fn default() -> Self {
        ScoringOpts {
            pool_kernel: 5,
            use_value_norm: true,
        }
    }
}

/// Aggregated risk scores for the scored prefix of every KV head of one
/// layer, plus the projected-value norms of all prompt entries.
struct LayerScores {
    /// Per kv-head, length n_prompt - window.
    scores: Vec<Vec<f64>>,
    /// Per kv-head, length n_prompt.
    norms: Vec<Vec<f64>>,
}

fn layer_scores(
    trace: &Trace,
    layer: usize,
    window: usize,
    opts: &ScoringOpts,
    agg: &AggregationSpec,
) -> Result<LayerScores, PolicyError> {
    let n = trace.n_prompt;
    let g = trace.group_size();
    let lt = &trace.layers[layer];
    let mut pooled: Vec<ImportanceMatrix> = Vec::with_capacity(trace.n_q_heads);
    for qh in 0..trace.n_q_heads {
        let queries = lt.q[qh].slice_rows(n - window, n);
        let keys = lt.k[trace.kv_head_of(qh)].slice_rows(0, n);
        let im = scoring::attention_importance(layer, qh, &queries, &keys, trace.d_h)?;
        pooled.push(scoring::pool_importance(&im, opts.pool_kernel)?);
    }
    let mut scores = Vec::with_capacity(trace.n_kv_heads);
    let mut norms = Vec::with_capacity(trace.n_kv_heads);
    for kvh in 0..trace.n_kv_heads {
        let group: Vec<&ImportanceMatrix> = pooled[kvh * g..(kvh + 1) * g].iter().collect();
        let mut r = agg.apply_group(&group)?;
        let v = lt.v[kvh].slice_rows(0, n);
        let slices: Vec<_> = (kvh * g..(kvh + 1) * g)
            .map(|qh| trace.w_o_slice(layer, qh))
            .collect();
        let head_norms = scoring::group_value_norms(&v, &slices)?;
        if opts.use_value_norm {
            r = scoring::scale_scores(&r, &head_norms[..r.len()])?;
        }
        scores.push(r);
        norms.push(head_norms);
    }
    Ok(LayerScores { scores, norms })
}

fn clamped_plan(
    name: &str,
    trace: &Trace,
    budget: &BudgetSpec,
    b: usize,
) -> EvictionPlan {
    let n = trace.n_prompt;
    let retained: Vec<usize> = (n - b.min(n)..n).collect();
    EvictionPlan {
        policy: name.into(),
        budget: meta(budget, true),
        seed: None,
        layers: (0..trace.n_layers)
            .map(|layer| LayerPlan {
                layer,
                heads: (0..trace.n_kv_heads)
                    .map(|head| HeadPlan {
                        head,
                        retained: retained.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Score-based plan over the prompt cache: windows retained
/// unconditionally, prefix entries competed per the budget scope.
pub fn scored_plan(
    name: &str,
    trace: &Trace,
    budget: &BudgetSpec,
    opts: &ScoringOpts,
    agg: &AggregationSpec,
) -> Result<EvictionPlan, PolicyError> {
    budget.validate()?;
    let n = trace.n_prompt;
    if budget.window >= n {
        return Err(PolicyError::WindowTooLarge {
            window: budget.window,
            n_prompt: n,
        });
    }
    let b = budget.entries(n).min(n);
    if b < budget.window {
        return Ok(clamped_plan(name, trace, budget, b));
    }
    let window_indices: Vec<usize> = (n - budget.window..n).collect();
    let prefix_len = n - budget.window;
    let mut layers = Vec::with_capacity(trace.n_layers);
    for layer in 0..trace.n_layers {
        let ls = layer_scores(trace, layer, budget.window, opts, agg)?;
        let heads = match budget.scope {
            BudgetScope::PerHead => {
                let k = (b - budget.window).min(prefix_len);
                ls.scores
                    .iter()
                    .enumerate()
                    .map(|(head, scores)| {
                        let mut retained = crate::math::top_k_indices(scores, k)?;
                        retained.extend_from_slice(&window_indices);
                        Ok(HeadPlan { head, retained })
                    })
                    .collect::<Result<Vec<_>, PolicyError>>()?
            }
            BudgetScope::PerLayerJoint => {
                let layer_budget = budget.entries(n * trace.n_kv_heads);
                let windows = budget.window * trace.n_kv_heads;
                if layer_budget < windows {
                    return Err(PolicyError::BudgetBelowWindows {
                        budget: layer_budget,
                        windows,
                    });
                }
                let k = (layer_budget - windows).min(prefix_len * trace.n_kv_heads);
                let picked = per_layer_joint_select(&ls.scores, k);
                picked
                    .into_iter()
                    .enumerate()
                    .map(|(head, mut retained)| {
                        retained.extend_from_slice(&window_indices);
                        retained.sort_unstable();
                        HeadPlan { head, retained }
                    })
                    .collect()
            }
            BudgetScope::GlobalJoint => {
                return Err(PolicyError::LayerMismatch(layer));
            }
        };
        layers.push(LayerPlan { layer, heads });
    }
    Ok(EvictionPlan {
        policy: name.into(),
        budget: meta(budget, false),
        seed: None,
        layers,
    })
}

/// One top-k over the union of all head candidates in a layer. Ties fill
/// lower (head, index) pairs first. Returns per-head retained prefix
/// indices, ascending.
pub fn per_layer_joint_select(scores_per_head: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (head, scores) in scores_per_head.iter().enumerate() {
        for (idx, &s) in scores.iter().enumerate() {
            candidates.push((s, head, idx));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut out = vec![Vec::new(); scores_per_head.len()];
    for &(_, head, idx) in candidates.iter().take(k) {
        out[head].push(idx);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

/// One top-k over candidates spanning every (layer, head) unit of
/// `scores`, indexed [layer][head][entry]. Ties fill lower
/// (layer, head, index) triples first. Returns retained prefix indices per
/// [layer][head], ascending.
pub fn global_joint_select(scores: &[Vec<Vec<f64>>], k: usize) -> Vec<Vec<Vec<usize>>> {
    let mut candidates: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (layer, heads) in scores.iter().enumerate() {
        for (head, entries) in heads.iter().enumerate() {
            for (idx, &s) in entries.iter().enumerate() {
                candidates.push((s, layer, head, idx));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut out: Vec<Vec<Vec<usize>>> = scores
        .iter()
        .map(|heads| vec![Vec::new(); heads.len()])
        .collect();
    for &(_, layer, head, idx) in candidates.iter().take(k) {
        out[layer][head].push(idx);
    }
    for layer in &mut out {
        for head in layer {
            head.sort_unstable();
        }
    }
    out
}

/// Layer-wise joint variant: DefensiveKV scores per layer, normalized by
/// the layer's total projected-value-norm mass, then one global top-k
/// across all (layer, head, entry) candidates. Windows retained per layer
/// unconditionally.
pub fn layer_defensive_plan(
    trace: &Trace,
    budget: &BudgetSpec,
    opts: &ScoringOpts,
    agg: &AggregationSpec,
) -> Result<EvictionPlan, PolicyError> {
    budget.validate()?;
    let n = trace.n_prompt;
    if budget.window >= n {
        return Err(PolicyError::WindowTooLarge {
            window: budget.window,
            n_prompt: n,
        });
    }
    let units = trace.n_layers * trace.n_kv_heads;
    let total_budget = budget.entries(n * units).min(n * units);
    let total_windows = budget.window * units;
    if total_budget < total_windows {
        return Err(PolicyError::BudgetBelowWindows {
            budget: total_budget,
            windows: total_windows,
        });
    }
    let prefix_len = n - budget.window;
    let k = (total_budget - total_windows).min(prefix_len * units);

    // Per-layer scores normalized by the layer's projected-value-norm mass.
    let mut normalized: Vec<Vec<Vec<f64>>> = Vec::with_capacity(trace.n_layers);
    for layer in 0..trace.n_layers {
        let ls = layer_scores(trace, layer, budget.window, opts, agg)?;
        let mass: f64 = ls.norms.iter().flatten().sum();
        normalized.push(
            ls.scores
                .iter()
                .map(|scores| {
                    scores
                        .iter()
                        .map(|&s| if mass > 0.0 { s / mass } else { s })
                        .collect()
                })
                .collect(),
        );
    }
    let picked = global_joint_select(&normalized, k);
    let window_indices: Vec<usize> = (n - budget.window..n).collect();
    let layers: Vec<LayerPlan> = picked
        .into_iter()
        .enumerate()
        .map(|(layer, heads)| LayerPlan {
            layer,
            heads: heads
                .into_iter()
                .enumerate()
                .map(|(head, mut retained)| {
                    retained.extend_from_slice(&window_indices);
                    retained.sort_unstable();
                    HeadPlan { head, retained }
                })
                .collect(),
        })
        .collect();
    Ok(EvictionPlan {
        policy: "layer-defensivekv".into(),
        budget: meta(budget, false),
        seed: None,
        layers,
    })
}

/// Compacts a cache to exactly the retained rows, relative order
/// preserved. The input cache is untouched.
pub fn apply_plan(cache: &KVCache, plan: &EvictionPlan) -> Result<KVCache, PolicyError> {
    if plan.layers.len() != cache.layers.len() {
        return Err(PolicyError::LayerMismatch(plan.layers.len()));
    }
    let mut layers = Vec::with_capacity(cache.layers.len());
    for (lp, lc) in plan.layers.iter().zip(&cache.layers) {
        let mut heads = Vec::with_capacity(lc.heads.len());
        for (hp, hc) in lp.heads.iter().zip(&lc.heads) {
            let len = hc.k.rows();
            if let Some(&bad) = hp.retained.iter().find(|&&i| i >= len) {
                return Err(PolicyError::IndexOutOfRange { index: bad, len });
            }
            heads.push(crate::attention::HeadKV {
                k: hc.k.gather_rows(&hp.retained),
                v: hc.v.gather_rows(&hp.retained),
            });
        }
        layers.push(crate::attention::LayerKV { heads });
    }
    Ok(KVCache { layers })
}

/// The named policy presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Streaming,
    SnapKv,
    CriticalKv,
    AdaKv,
    AdaKvDefensive,
    DefensiveKv,
    LayerDefensiveKv,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<PolicyKind> {
        Some(match s {
            "streaming" => PolicyKind::Streaming,
            "snapkv" => PolicyKind::SnapKv,
            "criticalkv" => PolicyKind::CriticalKv,
            "adakv" => PolicyKind::AdaKv,
            "adakv-defensive" => PolicyKind::AdaKvDefensive,
            "defensivekv" => PolicyKind::DefensiveKv,
            "layer-defensivekv" => PolicyKind::LayerDefensiveKv,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Streaming => "streaming",
            PolicyKind::SnapKv => "snapkv",
            PolicyKind::CriticalKv => "criticalkv",
            PolicyKind::AdaKv => "adakv",
            PolicyKind::AdaKvDefensive => "adakv-defensive",
            PolicyKind::DefensiveKv => "defensivekv",
            PolicyKind::LayerDefensiveKv => "layer-defensivekv",
        }
    }

    pub fn all() -> &'static [PolicyKind] {
        &[
            PolicyKind::Streaming,
            PolicyKind::SnapKv,
            PolicyKind::CriticalKv,
            PolicyKind::AdaKv,
            PolicyKind::AdaKvDefensive,
            PolicyKind::DefensiveKv,
            PolicyKind::LayerDefensiveKv,
        ]
    }

    fn preset(&self, kernel: usize) -> (ScoringOpts, AggregationSpec, BudgetScope) {
        let opts = |use_value_norm| ScoringOpts {
            pool_kernel: kernel,
            use_value_norm,
        };
        match self {
            PolicyKind::Streaming => (opts(false), AggregationSpec::Mean, BudgetScope::PerHead),
            PolicyKind::SnapKv => (opts(false), AggregationSpec::Mean, BudgetScope::PerHead),
            PolicyKind::CriticalKv => (opts(true), AggregationSpec::Mean, BudgetScope::PerHead),
            PolicyKind::AdaKv => (opts(false), AggregationSpec::Mean, BudgetScope::PerLayerJoint),
            PolicyKind::AdaKvDefensive => {
                (opts(false), AggregationSpec::Defensive, BudgetScope::PerLayerJoint)
            }
            PolicyKind::DefensiveKv => (opts(true), AggregationSpec::Defensive, BudgetScope::PerHead),
            PolicyKind::LayerDefensiveKv => {
                (opts(true), AggregationSpec::Defensive, BudgetScope::GlobalJoint)
            }
        }
    }
}

/// Builds the plan for a named policy. `agg_override` swaps the
/// aggregation (the ablation hook); it is ignored for streaming.
pub fn build_plan(
    trace: &Trace,
    kind: PolicyKind,
    fraction: f64,
    window: usize,
    kernel: usize,
    agg_override: Option<AggregationSpec>,
) -> Result<EvictionPlan, PolicyError> {
    let (opts, default_agg, scope) = kind.preset(kernel);
    let mut budget = BudgetSpec::new(fraction, scope);
    budget.window = window;
    let agg = agg_override.unwrap_or(default_agg);
    match kind {
        PolicyKind::Streaming => {
            streaming_llm_plan(trace.n_prompt, trace.n_layers, trace.n_kv_heads, &budget)
        }
        PolicyKind::LayerDefensiveKv => layer_defensive_plan(trace, &budget, &opts, &agg),
        _ => scored_plan(kind.name(), trace, &budget, &opts, &agg),
    }
}
