//! Seeded synthetic trace generation with regime shifts.
//!
//! The prompt is organized into topic blocks: each block has a direction
//! derived from one of a handful of regime directions, and its tokens
//! cluster around that block direction. Three kinds of structure make
//! short-window importance observation misleading in three distinct ways:
//!
//! * The tail of the prompt (the future observation window) covers only the
//!   "recent" regimes, so mean aggregation concentrates on them.
//! * A few tail tokens are flashbacks: their hidden states revisit one
//!   specific earlier block of a "revisit" regime. Each flashback lights up
//!   its target block in exactly one observation row, so worst-case
//!   aggregation sees it while mean aggregation dilutes it.
//! * The first few tokens are anchors drawn from a dedicated reset
//!   direction that no observation-window query aligns with. During
//!   decoding, the step right after every regime switch queries the reset
//!   direction, so anchors carry the bulk of importance at exactly those
//!   steps despite near-zero observed attention.
//!
//! Decoding walks between the blocks the tail referenced with `shift_prob`
//! per step, emitting a reset-direction query at each switch.

use crate::attention::{self, ModelConfig, Trace};
use crate::math::Matrix;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticRegime {
    pub seed: u64,
    pub n_regimes: usize,
    /// Per-decode-step probability of switching regime, in [0, 1].
    pub shift_prob: f64,
    /// Scale of per-step Gaussian drift added to the block direction.
    pub drift_scale: f64,
}

impl Default for SyntheticRegime {
    fn default() -> Self {
        SyntheticRegime {
            seed: 0,
            n_regimes: 6,
            shift_prob: 0.05,
            drift_scale: 0.3,
        }
    }
}

impl SyntheticRegime {
    pub fn validate(&self) -> Result<(), attention::ModelError> {
        if self.n_regimes == 0 {
            return Err(attention::ModelError::InvalidConfig("n_regimes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shift_prob) {
            return Err(attention::ModelError::InvalidConfig(format!(
                "shift_prob {} outside [0, 1]",
                self.shift_prob
            )));
        }
        if self.drift_scale < 0.0 || !self.drift_scale.is_finite() {
            return Err(attention::ModelError::InvalidConfig(format!(
                "drift_scale {} must be finite and >= 0",
                self.drift_scale
            )));
        }
        Ok(())
    }
}

/// Anchor tokens at the start of the prompt: drawn from the reset
/// direction, which no observation-window query aligns with.
pub const N_ANCHORS: usize = 4;
/// Weight of the per-block offset mixed into the regime direction.
const BLOCK_DIR_MIX: f64 = 0.6;
const TOKEN_NOISE: f64 = 0.2;
/// Length of the structured prompt tail (matches the default observation
/// window).
const TAIL_LEN: usize = 32;
/// Every FLASHBACK_EVERY-th tail token revisits an earlier block.
const FLASHBACK_EVERY: usize = 8;
/// How many of the regimes are "recent" (present in the tail).
const MAX_RECENT: usize = 3;
/// How many regimes are revisit targets for flashbacks.
const MAX_REVISIT: usize = 2;
/// Weight of the incoming block direction mixed into a reset-step query.
/// Keeps regime switches painful (anchors still carry the plurality of the
/// step's mass) without letting them drown out every other failure mode.
const RESET_MIX: f64 = 0.8;

pub struct RunResult {
    pub trace: Trace,
    /// Hidden-state input per token position, (n_prompt + n_steps) rows.
    pub hidden_log: Matrix,
}

struct Block {
    regime: usize,
    dir: Vec<f64>,
}

fn unit_direction(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
    rms_normalize(&mut v);
    v
}

fn rms_normalize(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        for x in v.iter_mut() {
            *x /= rms;
        }
    }
}

fn block_direction(rng: &mut SplitMix64, regime_dir: &[f64]) -> Vec<f64> {
    let offset = unit_direction(rng, regime_dir.len());
    let mut dir: Vec<f64> = regime_dir
        .iter()
        .zip(&offset)
        .map(|(r, o)| r + BLOCK_DIR_MIX * o)
        .collect();
    rms_normalize(&mut dir);
    dir
}

fn token_around(rng: &mut SplitMix64, dir: &[f64], noise: f64) -> Vec<f64> {
    let mut h: Vec<f64> = dir.iter().map(|r| r + noise * rng.gaussian()).collect();
    rms_normalize(&mut h);
    h
}

/// Runs prefill plus `steps` full-cache decode steps and records the
/// complete trace. Deterministic given (config, regime).
pub fn run_trace(
    config: &ModelConfig,
    prompt_len: usize,
    steps: usize,
    regime: &SyntheticRegime,
) -> Result<RunResult, attention::ModelError> {
    config.validate()?;
    regime.validate()?;
    if prompt_len < 1 {
        return Err(attention::ModelError::InvalidConfig("prompt_len must be >= 1".into()));
    }
    let weights = attention::init_model(config)?;
    let d = config.d_model;
    let mut rng = SplitMix64::new(regime.seed).fork(0x53594e54); // "SYNT"

    let reset_dir = unit_direction(&mut rng, d);
    let regime_dirs: Vec<Vec<f64>> = (0..regime.n_regimes)
        .map(|_| unit_direction(&mut rng, d))
        .collect();
    let n_recent = regime.n_regimes.min(MAX_RECENT);
    let n_revisit = (regime.n_regimes - n_recent).min(MAX_REVISIT);
    // Recent regimes fill the tail; revisit regimes are flashback targets;
    // anything beyond is a pure distractor. Decoding only walks recent and
    // revisit regimes.
    let recent: Vec<usize> = (0..n_recent).collect();
    let revisit: Vec<usize> = (n_recent..n_recent + n_revisit).collect();

    let mut hidden_log = Matrix::zeros(prompt_len + steps, d);
    // Body blocks are the evictable middle of the prompt; decode steps
    // revisit their directions.
    let mut body_blocks: Vec<Block> = Vec::new();

    let n_anchors = prompt_len.min(N_ANCHORS);
    let tail_start = prompt_len.saturating_sub(TAIL_LEN).max(n_anchors);
    for pos in 0..n_anchors {
        let h = token_around(&mut rng, &reset_dir, 0.075);
        hidden_log.row_mut(pos).copy_from_slice(&h);
    }

    // Body: variable-length blocks over all regimes.
    let mut pos = n_anchors;
    while pos < tail_start {
        let reg = rng.below(regime.n_regimes);
        let dir = block_direction(&mut rng, &regime_dirs[reg]);
        let block = 4 + rng.below(12);
        for _ in 0..block {
            if pos >= tail_start {
                break;
            }
            let h = token_around(&mut rng, &dir, TOKEN_NOISE);
            hidden_log.row_mut(pos).copy_from_slice(&h);
            pos += 1;
        }
        body_blocks.push(Block { regime: reg, dir });
    }

    // Tail: revisits of recent-regime body blocks, plus flashbacks to
    // revisit-regime blocks. Reusing body-block directions means the
    // observation window genuinely covers those prefix entries instead of
    // only the tail's own keys.
    let mut tail_dir: Option<Vec<f64>> = None;
    let mut tail_left = 0;
    let mut flashback_cycle = 0;
    let mut recent_cycle = 0;
    let mut flash_targets: Vec<usize> = Vec::new();
    let mut tail_refs: Vec<usize> = Vec::new();
    while pos < prompt_len {
        let offset = pos - tail_start;
        if offset % FLASHBACK_EVERY == FLASHBACK_EVERY / 2 {
            // Flashback: revisit one earlier block of a revisit regime.
            let target = pick_block(&body_blocks, &revisit, flashback_cycle);
            flashback_cycle += 1;
            let dir = match target {
                Some(i) => {
                    if !flash_targets.contains(&i) {
                        flash_targets.push(i);
                    }
                    body_blocks[i].dir.clone()
                }
                None => regime_dirs[revisit.first().copied().unwrap_or(0)].clone(),
            };
            let h = token_around(&mut rng, &dir, 0.1);
            hidden_log.row_mut(pos).copy_from_slice(&h);
            pos += 1;
            continue;
        }
        if tail_left == 0 {
            let reg = recent[rng.below(recent.len())];
            tail_dir = Some(match pick_block(&body_blocks, &[reg], recent_cycle) {
                Some(i) => {
                    if !tail_refs.contains(&i) {
                        tail_refs.push(i);
                    }
                    body_blocks[i].dir.clone()
                }
                None => block_direction(&mut rng, &regime_dirs[reg]),
            });
            recent_cycle += 1;
            tail_left = 4 + rng.below(12);
        }
        let h = token_around(&mut rng, tail_dir.as_ref().unwrap(), TOKEN_NOISE);
        hidden_log.row_mut(pos).copy_from_slice(&h);
        tail_left -= 1;
        pos += 1;
    }

    let prompt_hidden = hidden_log.slice_rows(0, prompt_len);
    let pre = attention::prefill(config, &weights, &prompt_hidden)?;
    let mut cache = pre.cache;
    let mut queries = pre.queries;

    // Decode: walk the pool of blocks the tail actually referenced
    // (directly or via flashback), emitting a reset-direction query at
    // every switch. Restricting the walk to referenced blocks means the
    // future never asks about entries no criterion could have observed.
    let pool: Vec<usize> = tail_refs.iter().chain(&flash_targets).copied().collect();
    let pool_dirs: Vec<Vec<f64>> = if pool.is_empty() {
        // Degenerate prompts (no body blocks referenced): fall back to the
        // regime directions themselves.
        regime_dirs.clone()
    } else {
        pool.iter().map(|&i| body_blocks[i].dir.clone()).collect()
    };
    let mut active_block = rng.below(pool_dirs.len());
    let mut active_dir = pool_dirs[active_block].clone();
    for t in 0..steps {
        let shift =
            regime.shift_prob > 0.0 && pool_dirs.len() > 1 && rng.uniform() < regime.shift_prob;
        let h = if shift {
            active_block =
                (active_block + 1 + rng.below(pool_dirs.len() - 1)) % pool_dirs.len();
            active_dir = pool_dirs[active_block].clone();
            let mut mix: Vec<f64> = reset_dir
                .iter()
                .zip(&active_dir)
                .map(|(r, a)| r + RESET_MIX * a)
                .collect();
            rms_normalize(&mut mix);
            token_around(&mut rng, &mix, 0.1)
        } else {
            token_around(&mut rng, &active_dir, regime.drift_scale)
        };
        hidden_log.row_mut(prompt_len + t).copy_from_slice(&h);
        let step = attention::decode_step(config, &weights, &mut cache, &h)?;
        for (l, layer_q) in step.queries.iter().enumerate() {
            for (qh, q) in layer_q.iter().enumerate() {
                queries[l][qh].push_row(q);
            }
        }
    }

    let layers = (0..config.n_layers)
        .map(|l| attention::LayerTrace {
            k: cache.layers[l].heads.iter().map(|h| h.k.clone()).collect(),
            v: cache.layers[l].heads.iter().map(|h| h.v.clone()).collect(),
            q: queries[l].clone(),
            w_o: weights[l].w_o.clone(),
        })
        .collect();

    Ok(RunResult {
        trace: Trace {
            n_layers: config.n_layers,
            n_q_heads: config.n_q_heads,
            n_kv_heads: config.n_kv_heads,
            d_h: config.d_h,
            d_model: config.d_model,
            n_prompt: prompt_len,
            n_steps: steps,
            layers,
        },
        hidden_log,
    })
}

/// Picks the `cycle`-th block index (round-robin) among body blocks whose
/// regime is in `regimes`.
fn pick_block(blocks: &[Block], regimes: &[usize], cycle: usize) -> Option<usize> {
    let candidates: Vec<usize> = blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| regimes.contains(&b.regime))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[cycle % candidates.len()])
    }
}

/// Convenience wrapper returning just the trace.
pub fn gen_synthetic(
    config: &ModelConfig,
    prompt_len: usize,
    steps: usize,
    regime: &SyntheticRegime,
) -> Result<Trace, attention::ModelError> {
    Ok(run_trace(config, prompt_len, steps, regime)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_h: 8,
            seed,
        }
    }

    #[test]
    fn zero_steps_gives_prompt_queries_only() {
        let t = gen_synthetic(&small_cfg(1), 16, 0, &SyntheticRegime::default()).unwrap();
        assert_eq!(t.layers[0].q[0].rows(), 16);
        assert_eq!(t.layers[0].k[0].rows(), 16);
    }

    #[test]
    fn deterministic_given_seed() {
        let r = SyntheticRegime { seed: 7, ..Default::default() };
        let a = gen_synthetic(&small_cfg(3), 24, 8, &r).unwrap();
        let b = gen_synthetic(&small_cfg(3), 24, 8, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_counts() {
        let t = gen_synthetic(&small_cfg(2), 8, 4, &SyntheticRegime::default()).unwrap();
        assert_eq!(t.total_tokens(), 12);
        for layer in &t.layers {
            for q in &layer.q {
                assert_eq!(q.rows(), 12);
            }
            for k in &layer.k {
                assert_eq!(k.rows(), 12);
            }
        }
    }

    #[test]
    fn anchors_align_with_each_other() {
        // All anchors are noisy copies of the same reset direction, so
        // pairwise cosine similarity is near 1; a mid-prompt token is not
        // aligned with them.
        let r = run_trace(&small_cfg(4), 64, 0, &SyntheticRegime::default()).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let da: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let db: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            num / (da * db)
        };
        for pos in 1..N_ANCHORS {
            assert!(cos(r.hidden_log.row(0), r.hidden_log.row(pos)) > 0.95);
        }
        assert!(cos(r.hidden_log.row(0), r.hidden_log.row(20)).abs() < 0.7);
    }

    #[test]
    fn no_shift_importance_is_stable() {
        // With shift_prob = 0 and small drift, consecutive decode steps
        // should distribute attention over prompt entries almost
        // identically. Pearson correlation weights by attention mass, so
        // the near-zero tail does not dominate the statistic.
        use crate::math;
        let mut ok = 0;
        for seed in 0..10u64 {
            let cfg = small_cfg(seed);
            let regime = SyntheticRegime {
                seed,
                shift_prob: 0.0,
                drift_scale: 0.05,
                ..Default::default()
            };
            let t = gen_synthetic(&cfg, 48, 12, &regime).unwrap();
            let layer = &t.layers[0];
            let scale = 1.0 / (t.d_h as f64).sqrt();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for step in 0..t.n_steps {
                let pos = t.n_prompt + step;
                let q = layer.q[0].row(pos);
                let k = &layer.k[0];
                let logits: Vec<f64> = (0..pos)
                    .map(|i| k.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let sm = math::softmax_rows(&Matrix::from_vec(1, pos, logits), None).unwrap();
                rows.push(sm.row(0)[..t.n_prompt].to_vec());
            }
            let mut min_corr = 1.0f64;
            for w in rows.windows(2) {
                min_corr = min_corr.min(pearson(&w[0], &w[1]));
            }
            if min_corr > 0.9 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "stable-regime attention correlation held in only {ok}/10 seeds");
    }

    #[test]
    fn reset_queries_hit_anchors() {
        // At decode steps right after a shift the anchors should carry far
        // more attention mass than during stable decoding. Comparing
        // shift_prob = 1 (every step is a switch) against shift_prob = 0 on
        // the same seed isolates the reset-query effect; mass is averaged
        // over all q-heads and steps because individual heads are noisy.
        use crate::math;
        let mut ok = 0;
        for seed in 0..8u64 {
            let cfg = small_cfg(seed);
            let mut mean_mass = [0.0f64; 2];
            for (slot, shift_prob) in [1.0, 0.0].into_iter().enumerate() {
                let regime = SyntheticRegime { seed, shift_prob, ..Default::default() };
                let t = gen_synthetic(&cfg, 64, 8, &regime).unwrap();
                let layer = &t.layers[0];
                let scale = 1.0 / (t.d_h as f64).sqrt();
                let group = t.n_q_heads / t.n_kv_heads;
                let mut total = 0.0;
                let mut count = 0usize;
                for step in 0..t.n_steps {
                    let pos = t.n_prompt + step;
                    for qh in 0..t.n_q_heads {
                        let q = layer.q[qh].row(pos);
                        let k = &layer.k[qh / group];
                        let logits: Vec<f64> = (0..pos)
                            .map(|i| {
                                k.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale
                            })
                            .collect();
                        let sm =
                            math::softmax_rows(&Matrix::from_vec(1, pos, logits), None).unwrap();
                        total += sm.row(0)[..N_ANCHORS].iter().sum::<f64>();
                        count += 1;
                    }
                }
                mean_mass[slot] = total / count as f64;
            }
            if mean_mass[0] > 0.04 && mean_mass[0] > 3.0 * mean_mass[1] {
                ok += 1;
            }
        }
        assert!(ok >= 6, "anchor mass at reset steps held in only {ok}/8 seeds");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
        num / (da.sqrt() * db.sqrt())
    }
}
