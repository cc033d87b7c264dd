//! DKVT binary trace files.
//!
//! Little-endian, 32-bit float payloads, widened to f64 on load. Two
//! kinds: kind 1 stores a full model trace (K/V/Q per head plus W_O per
//! layer), kind 2 stores precomputed importance arrays so externally
//! produced dumps can feed the evaluation harness directly.
//!
//! Layout, kind 1:
//!   magic "DKVT" | version u32 | kind u32
//!   header u32 x7: n_layers, n_q_heads, n_kv_heads, d_h, d_model,
//!                  n_prompt, n_steps
//!   per layer: per kv-head K then V [(n_prompt+n_steps) x d_h],
//!              per q-head Q [(n_prompt+n_steps) x d_h],
//!              W_O [n_q_heads*d_h x d_model]
//!
//! Layout, kind 2:
//!   magic | version | kind
//!   header u32 x4: n_layers, n_q_heads, n_steps, n_entries
//!   payload [n_layers][n_q_heads][n_steps][n_entries]

use crate::attention::{LayerTrace, Trace};
use crate::math::Matrix;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DKVT";
pub const VERSION: u32 = 1;
pub const KIND_RAW: u32 = 1;
pub const KIND_IMPORTANCE: u32 = 2;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic at byte offset 0: expected \"DKVT\"")]
    BadMagic,
    #[error("unsupported version {found} at byte offset 4: expected {VERSION}")]
    BadVersion { found: u32 },
    #[error("unknown kind {found} at byte offset 8: expected 1 (raw) or 2 (importance)")]
    BadKind { found: u32 },
    #[error("truncated file: field `{field}` at byte offset {offset} needs {needed} more bytes")]
    Truncated {
        field: &'static str,
        offset: usize,
        needed: usize,
    },
    #[error("invalid dimension `{field}` = {value} at byte offset {offset}: {reason}")]
    BadDimension {
        field: &'static str,
        value: u64,
        offset: usize,
        reason: &'static str,
    },
    #[error("payload size overflow computing `{field}`")]
    DimOverflow { field: &'static str },
    #[error("trailing garbage: {extra} unexpected bytes after payload at offset {offset}")]
    TrailingBytes { extra: usize, offset: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Kind-2 payload: per (layer, q-head) importance matrix, steps x entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDump {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_steps: usize,
    pub n_entries: usize,
    /// Indexed [layer][q_head].
    pub values: Vec<Vec<Matrix>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, field: &'static str) -> Result<u32, TraceError> {
        if self.pos + 4 > self.bytes.len() {
            return Err(TraceError::Truncated {
                field,
                offset: self.pos,
                needed: self.pos + 4 - self.bytes.len(),
            });
        }
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn dim(&mut self, field: &'static str, min: u64) -> Result<usize, TraceError> {
        let offset = self.pos;
        let v = self.u32(field)? as u64;
        if v < min {
            return Err(TraceError::BadDimension {
                field,
                value: v,
                offset,
                reason: "below minimum",
            });
        }
        Ok(v as usize)
    }

    fn floats(&mut self, field: &'static str, count: usize) -> Result<Vec<f64>, TraceError> {
        let bytes_needed = count
            .checked_mul(4)
            .ok_or(TraceError::DimOverflow { field })?;
        if self.pos + bytes_needed > self.bytes.len() {
            return Err(TraceError::Truncated {
                field,
                offset: self.pos,
                needed: self.pos + bytes_needed - self.bytes.len(),
            });
        }
        let out = self.bytes[self.pos..self.pos + bytes_needed]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos += bytes_needed;
        Ok(out)
    }

    fn matrix(&mut self, field: &'static str, rows: usize, cols: usize) -> Result<Matrix, TraceError> {
        let count = rows.checked_mul(cols).ok_or(TraceError::DimOverflow { field })?;
        Ok(Matrix::from_vec(rows, cols, self.floats(field, count)?))
    }

    fn finish(&self) -> Result<(), TraceError> {
        if self.pos != self.bytes.len() {
            return Err(TraceError::TrailingBytes {
                extra: self.bytes.len() - self.pos,
                offset: self.pos,
            });
        }
        Ok(())
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn header(kind: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out
}

pub fn trace_to_bytes(trace: &Trace) -> Vec<u8> {
    let mut out = header(KIND_RAW);
    for dim in [
        trace.n_layers,
        trace.n_q_heads,
        trace.n_kv_heads,
        trace.d_h,
        trace.d_model,
        trace.n_prompt,
        trace.n_steps,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for layer in &trace.layers {
        for (k, v) in layer.k.iter().zip(&layer.v) {
            push_matrix(&mut out, k);
            push_matrix(&mut out, v);
        }
        for q in &layer.q {
            push_matrix(&mut out, q);
        }
        push_matrix(&mut out, &layer.w_o);
    }
    out
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<Trace, TraceError> {
    let mut r = check_preamble(bytes, KIND_RAW)?;
    let n_layers = r.dim("n_layers", 1)?;
    let n_q_heads = r.dim("n_q_heads", 1)?;
    let n_kv_heads = r.dim("n_kv_heads", 1)?;
    let d_h = r.dim("d_h", 1)?;
    let d_model = r.dim("d_model", 1)?;
    let n_prompt = r.dim("n_prompt", 1)?;
    let n_steps = r.dim("n_steps", 0)?;
    if n_q_heads % n_kv_heads != 0 {
        return Err(TraceError::BadDimension {
            field: "n_kv_heads",
            value: n_kv_heads as u64,
            offset: 20,
            reason: "n_q_heads not divisible by n_kv_heads",
        });
    }
    if n_q_heads.checked_mul(d_h) != Some(d_model) {
        return Err(TraceError::BadDimension {
            field: "d_model",
            value: d_model as u64,
            offset: 28,
            reason: "d_model must equal n_q_heads * d_h",
        });
    }
    let t = n_prompt
        .checked_add(n_steps)
        .ok_or(TraceError::DimOverflow { field: "n_prompt+n_steps" })?;
    // Check the full payload size before allocating anything, so corrupt
    // header dimensions fail cleanly instead of driving huge allocations.
    let per_layer = (|| {
        let kv = n_kv_heads.checked_mul(2)?.checked_mul(t)?.checked_mul(d_h)?;
        let q = n_q_heads.checked_mul(t)?.checked_mul(d_h)?;
        let wo = n_q_heads.checked_mul(d_h)?.checked_mul(d_model)?;
        kv.checked_add(q)?.checked_add(wo)
    })()
    .ok_or(TraceError::DimOverflow { field: "payload" })?;
    let payload_bytes = n_layers
        .checked_mul(per_layer)
        .and_then(|f| f.checked_mul(4))
        .ok_or(TraceError::DimOverflow { field: "payload" })?;
    let remaining = bytes.len() - r.pos;
    if payload_bytes > remaining {
        return Err(TraceError::Truncated {
            field: "payload",
            offset: r.pos,
            needed: payload_bytes - remaining,
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut k = Vec::with_capacity(n_kv_heads);
        let mut v = Vec::with_capacity(n_kv_heads);
        for _ in 0..n_kv_heads {
            k.push(r.matrix("K", t, d_h)?);
            v.push(r.matrix("V", t, d_h)?);
        }
        let mut q = Vec::with_capacity(n_q_heads);
        for _ in 0..n_q_heads {
            q.push(r.matrix("Q", t, d_h)?);
        }
        let w_o = r.matrix("W_O", n_q_heads * d_h, d_model)?;
        layers.push(LayerTrace { k, v, q, w_o });
    }
    r.finish()?;
    Ok(Trace {
        n_layers,
        n_q_heads,
        n_kv_heads,
        d_h,
        d_model,
        n_prompt,
        n_steps,
        layers,
    })
}

pub fn importance_to_bytes(dump: &ImportanceDump) -> Vec<u8> {
    let mut out = header(KIND_IMPORTANCE);
    for dim in [dump.n_layers, dump.n_q_heads, dump.n_steps, dump.n_entries] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for layer in &dump.values {
        for m in layer {
            push_matrix(&mut out, m);
        }
    }
    out
}

pub fn importance_from_bytes(bytes: &[u8]) -> Result<ImportanceDump, TraceError> {
    let mut r = check_preamble(bytes, KIND_IMPORTANCE)?;
    let n_layers = r.dim("n_layers", 1)?;
    let n_q_heads = r.dim("n_q_heads", 1)?;
    let n_steps = r.dim("n_steps", 1)?;
    let n_entries = r.dim("n_entries", 1)?;
    let payload_bytes = n_layers
        .checked_mul(n_q_heads)
        .and_then(|f| f.checked_mul(n_steps))
        .and_then(|f| f.checked_mul(n_entries))
        .and_then(|f| f.checked_mul(4))
        .ok_or(TraceError::DimOverflow { field: "payload" })?;
    let remaining = bytes.len() - r.pos;
    if payload_bytes > remaining {
        return Err(TraceError::Truncated {
            field: "payload",
            offset: r.pos,
            needed: payload_bytes - remaining,
        });
    }
    let mut values = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut heads = Vec::with_capacity(n_q_heads);
        for _ in 0..n_q_heads {
            heads.push(r.matrix("I", n_steps, n_entries)?);
        }
        values.push(heads);
    }
    r.finish()?;
    Ok(ImportanceDump {
        n_layers,
        n_q_heads,
        n_steps,
        n_entries,
        values,
    })
}

fn check_preamble(bytes: &[u8], expected_kind: u32) -> Result<Reader<'_>, TraceError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(TraceError::Truncated {
            field: "magic",
            offset: 0,
            needed: 4 - bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(TraceError::BadMagic);
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TraceError::BadVersion { found: version });
    }
    let kind = r.u32("kind")?;
    if kind != KIND_RAW && kind != KIND_IMPORTANCE {
        return Err(TraceError::BadKind { found: kind });
    }
    if kind != expected_kind {
        return Err(TraceError::BadKind { found: kind });
    }
    Ok(r)
}

/// Peeks at the kind field of a serialized file.
pub fn peek_kind(bytes: &[u8]) -> Result<u32, TraceError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(TraceError::BadMagic);
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TraceError::BadVersion { found: version });
    }
    r.u32("kind")
}

/// Writes bytes atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp.push(".tmp");
    let tmp_path = dir.join(tmp);
    {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<(), TraceError> {
    write_atomic(path, &trace_to_bytes(trace))
}

pub fn read_trace(path: &Path) -> Result<Trace, TraceError> {
    trace_from_bytes(&std::fs::read(path)?)
}

pub fn write_importance(path: &Path, dump: &ImportanceDump) -> Result<(), TraceError> {
    write_atomic(path, &importance_to_bytes(dump))
}

pub fn read_importance(path: &Path) -> Result<ImportanceDump, TraceError> {
    importance_from_bytes(&std::fs::read(path)?)
}
