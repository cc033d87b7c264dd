//! Seeded toy multi-layer grouped-query attention model.
//!
//! Attention-only: each layer projects the incoming hidden states to Q/K/V,
//! runs causal attention, and the output projection feeds the next layer
//! after RMS normalization. No MLP, no residual stream. This is the
//! ground-truth generator for every eviction experiment; the full-cache
//! path never mutates under evaluation.

use crate::math::{self, Matrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty cache: decode requires at least one entry")]
    EmptyCache,
    #[error(transparent)]
    Math(#[from] math::MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_h: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 || self.d_h == 0 {
            return Err(ModelError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.n_q_heads * self.d_h != self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "n_q_heads {} * d_h {} != d_model {}",
                self.n_q_heads, self.d_h, self.d_model
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// KV head that query head `q` reads from.
    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }
}

/// Per-layer projection weights.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// One d_model x d_h matrix per query head.
    pub w_q: Vec<Matrix>,
    /// One d_model x d_h matrix per KV head.
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    /// (n_q_heads * d_h) x d_model output projection.
    pub w_o: Matrix,
}

impl LayerWeights {
    /// Rows of `w_o` belonging to query head `q` (a d_h x d_model slice).
    pub fn w_o_slice(&self, q: usize, d_h: usize) -> Matrix {
        self.w_o.slice_rows(q * d_h, (q + 1) * d_h)
    }
}

/// How far each query projection departs from its group's shared key
/// projection (see `init_model`).
const QK_PERTURB: f64 = 0.25;
/// Gain on the shared query/key projection. Logits scale with the square
/// of this, so it acts as an attention temperature: aligned hidden states
/// separate sharply from the noise floor.
const QK_GAIN: f64 = 1.25;

/// Draws all layer weights from the seeded SplitMix64 stream, entries
/// scaled by 1/sqrt(d_model). Identical seeds give identical bytes.
///
/// Key projections are shared with the group's query projections up to a
/// small perturbation, so q . k approximates hidden-state similarity:
/// tokens whose hidden states align genuinely attend to each other instead
/// of through an arbitrary random bilinear form.
pub fn init_model(config: &ModelConfig) -> Result<Vec<LayerWeights>, ModelError> {
    config.validate()?;
    let mut rng = crate::rng::SplitMix64::new(config.seed).fork(0x57454947); // "WEIG"
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gaussian() * scale).collect())
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let w_k: Vec<Matrix> = (0..config.n_kv_heads)
            .map(|_| {
                let m = draw(config.d_model, config.d_h);
                Matrix::from_vec(
                    m.rows(),
                    m.cols(),
                    m.data().iter().map(|x| x * QK_GAIN).collect(),
                )
            })
            .collect();
        let w_q = (0..config.n_q_heads)
            .map(|qh| {
                let base = &w_k[config.kv_head_of(qh)];
                let e = draw(config.d_model, config.d_h);
                Matrix::from_vec(
                    base.rows(),
                    base.cols(),
                    base.data()
                        .iter()
                        .zip(e.data())
                        .map(|(b, p)| b + QK_PERTURB * p)
                        .collect(),
                )
            })
            .collect();
        let w_v = (0..config.n_kv_heads).map(|_| draw(config.d_model, config.d_h)).collect();
        let w_o = draw(config.n_q_heads * config.d_h, config.d_model);
        layers.push(LayerWeights { w_q, w_k, w_v, w_o });
    }
    Ok(layers)
}

/// Per (layer, kv-head) K/V storage. K and V always hold the same number
/// of rows within a head.
#[derive(Debug, Clone)]
pub struct KVCache {
    pub layers: Vec<LayerKV>,
}

#[derive(Debug, Clone)]
pub struct LayerKV {
    pub heads: Vec<HeadKV>,
}

#[derive(Debug, Clone)]
pub struct HeadKV {
    pub k: Matrix,
    pub v: Matrix,
}

impl KVCache {
    /// Entry count of the first head of the first layer (uniform before
    /// any eviction).
    pub fn len(&self) -> usize {
        self.layers[0].heads[0].k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn rms_normalize(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        for x in v.iter_mut() {
            *x /= rms;
        }
    }
}

/// Computes the prompt KV cache: per (layer, kv-head) K = H W_K, V = H W_V.
///
/// Hidden states flow through the layers via causal self-attention, so the
/// returned per-layer query matrices cover every prompt token. Also returns
/// the final-layer hidden states (the last row seeds decoding).
pub struct PrefillResult {
    pub cache: KVCache,
    /// Per layer, per q-head: n_prompt x d_h query matrix.
    pub queries: Vec<Vec<Matrix>>,
    /// Final-layer hidden states, n_prompt x d_model.
    pub hidden_out: Matrix,
}

pub fn prefill(
    config: &ModelConfig,
    weights: &[LayerWeights],
    hidden: &Matrix,
) -> Result<PrefillResult, ModelError> {
    if hidden.cols() != config.d_model {
        return Err(ModelError::InvalidConfig(format!(
            "hidden cols {} != d_model {}",
            hidden.cols(),
            config.d_model
        )));
    }
    let n = hidden.rows();
    let scale = 1.0 / (config.d_h as f64).sqrt();
    let causal: Vec<usize> = (1..=n).collect();

    let mut h = hidden.clone();
    let mut cache_layers = Vec::with_capacity(config.n_layers);
    let mut queries = Vec::with_capacity(config.n_layers);
    for lw in weights {
        let heads: Vec<HeadKV> = (0..config.n_kv_heads)
            .map(|g| {
                Ok(HeadKV {
                    k: math::matmul(&h, &lw.w_k[g])?,
                    v: math::matmul(&h, &lw.w_v[g])?,
                })
            })
            .collect::<Result<_, math::MathError>>()?;

        let mut layer_q = Vec::with_capacity(config.n_q_heads);
        let mut concat = Matrix::zeros(n, config.n_q_heads * config.d_h);
        for qh in 0..config.n_q_heads {
            let g = config.kv_head_of(qh);
            let q = math::matmul(&h, &lw.w_q[qh])?;
            let mut logits = math::matmul(&q, &heads[g].k.transpose())?;
            for v in 0..n {
                for c in 0..n {
                    logits.set(v, c, logits.get(v, c) * scale);
                }
            }
            let attn = math::softmax_rows(&logits, Some(&causal))?;
            let out = math::matmul(&attn, &heads[g].v)?;
            for r in 0..n {
                for c in 0..config.d_h {
                    concat.set(r, qh * config.d_h + c, out.get(r, c));
                }
            }
            layer_q.push(q);
        }
        let mut next = math::matmul(&concat, &lw.w_o)?;
        for r in 0..n {
            rms_normalize(next.row_mut(r));
        }
        cache_layers.push(LayerKV { heads });
        queries.push(layer_q);
        h = next;
    }
    Ok(PrefillResult {
        cache: KVCache { layers: cache_layers },
        queries,
        hidden_out: h,
    })
}

/// One decode step through all layers with the full cache.
pub struct DecodeResult {
    /// Final-layer output, length d_model.
    pub output: Vec<f64>,
    /// Per layer, per q-head: the pre-append attention row over that
    /// head's KV group entries.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Per layer, per q-head: the query vector for this token.
    pub queries: Vec<Vec<Vec<f64>>>,
}

/// Runs one token through every layer: per q-head q = h w_q, attention over
/// the group's cached entries with 1/sqrt(d_h) scaling, concatenated head
/// outputs through w_o. The new token's K/V are appended after attention,
/// so the returned rows are the full-cache, pre-append rows.
pub fn decode_step(
    config: &ModelConfig,
    weights: &[LayerWeights],
    cache: &mut KVCache,
    h_last: &[f64],
) -> Result<DecodeResult, ModelError> {
    let scale = 1.0 / (config.d_h as f64).sqrt();
    let mut h = h_last.to_vec();
    let mut attention = Vec::with_capacity(config.n_layers);
    let mut queries = Vec::with_capacity(config.n_layers);
    for (lw, layer_kv) in weights.iter().zip(cache.layers.iter_mut()) {
        if layer_kv.heads[0].k.rows() == 0 {
            return Err(ModelError::EmptyCache);
        }
        let mut layer_attn = Vec::with_capacity(config.n_q_heads);
        let mut layer_q = Vec::with_capacity(config.n_q_heads);
        let mut concat = vec![0.0; config.n_q_heads * config.d_h];
        for qh in 0..config.n_q_heads {
            let g = config.kv_head_of(qh);
            let q = math::vec_matmul(&h, &lw.w_q[qh])?;
            let k = &layer_kv.heads[g].k;
            let n = k.rows();
            let logits: Vec<f64> = (0..n)
                .map(|i| k.row(i).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let attn = math::softmax_rows(&Matrix::from_vec(1, n, logits), None)?;
            let v = &layer_kv.heads[g].v;
            for c in 0..config.d_h {
                concat[qh * config.d_h + c] =
                    (0..n).map(|i| attn.get(0, i) * v.get(i, c)).sum::<f64>();
            }
            layer_attn.push(attn.row(0).to_vec());
            layer_q.push(q);
        }
        // Append this token's K/V now that attention used the old entries.
        for g in 0..config.n_kv_heads {
            let new_k = math::vec_matmul(&h, &lw.w_k[g])?;
            let new_v = math::vec_matmul(&h, &lw.w_v[g])?;
            layer_kv.heads[g].k.push_row(&new_k);
            layer_kv.heads[g].v.push_row(&new_v);
        }
        let mut next = math::vec_matmul(&concat, &lw.w_o)?;
        rms_normalize(&mut next);
        attention.push(layer_attn);
        queries.push(layer_q);
        h = next;
    }
    Ok(DecodeResult {
        output: h,
        attention,
        queries,
    })
}

/// Full recorded run: everything downstream analysis needs, independent of
/// any eviction plan. K/V/Q cover all n_prompt + n_steps token positions
/// per head, in token order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_h: usize,
    pub d_model: usize,
    pub n_prompt: usize,
    pub n_steps: usize,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Per kv-head: (n_prompt + n_steps) x d_h.
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Per q-head: (n_prompt + n_steps) x d_h.
    pub q: Vec<Matrix>,
    /// (n_q_heads * d_h) x d_model.
    pub w_o: Matrix,
}

impl Trace {
    pub fn total_tokens(&self) -> usize {
        self.n_prompt + self.n_steps
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, q: usize) -> usize {
        q / self.group_size()
    }

    /// Rows of a layer's W_O belonging to query head `q`.
    pub fn w_o_slice(&self, layer: usize, q: usize) -> Matrix {
        self.layers[layer].w_o.slice_rows(q * self.d_h, (q + 1) * self.d_h)
    }
}
