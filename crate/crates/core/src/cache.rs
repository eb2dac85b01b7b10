//! Cache metadata: semantic signatures, supersession flags, cumulative
//! attention and the log-scale key decay.
//!
//! Everything is read from the designated layer (layer 0, heads
//! concatenated), one record per cached position.

use sleepgate_tensor::{Graph, Result as TResult, Scalar, Tensor, Var};

use crate::params::Binding;
use crate::policy::decay_factor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEntry {
    pub position: usize,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub signature: Vec<f32>,
    pub superseded: bool,
    pub cum_attention: f64,
}

/// Entries in strictly increasing position order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentedCache {
    pub entries: Vec<AugmentedEntry>,
}

impl AugmentedCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn push(&mut self, position: usize, key: Vec<f32>, value: Vec<f32>) {
        assert!(self.entries.last().is_none_or(|e| e.position < position), "positions must increase");
        self.entries.push(AugmentedEntry {
            position,
            key,
            value,
            signature: Vec::new(),
            superseded: false,
            cum_attention: 0.0,
        });
    }

    /// Refreshes flags from the current signatures. Flags only ever turn on.
    pub fn refresh_flags(&mut self, threshold: f64) {
        let sigs: Vec<&[f32]> = self.entries.iter().map(|e| e.signature.as_slice()).collect();
        let flags = detect_conflicts(&sigs, threshold);
        for (e, f) in self.entries.iter_mut().zip(flags) {
            e.superseded |= f;
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.superseded).collect()
    }

    pub fn cum_attention(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.cum_attention).collect()
    }
}

/// Tagger parameters on one graph.
pub struct TaggerVars {
    w: Var,
    b: Var,
    ln: (Var, Var),
}

impl TaggerVars {
    pub fn from_binding(b: &Binding) -> Self {
        Self { w: b.var("tagger.w"), b: b.var("tagger.b"), ln: (b.var("tagger.ln.g"), b.var("tagger.ln.b")) }
    }
}

/// `[m×m]` averaging matrix: row `i` averages entries `i−w ..= i+w`,
/// clipped to the cache.
pub fn pool_matrix<S: Scalar>(m: usize, window: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); m * m];
    for i in 0..m {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(m - 1);
        let w = S::from_f64(1.0 / (hi - lo + 1) as f64).unwrap();
        for j in lo..=hi {
            data[i * m + j] = w;
        }
    }
    Tensor::new(&[m, m], data).expect("pool shape")
}

/// Signatures `LN([k ∥ LocalPool(k)] W_s + b_s)` for every row of `keys`.
pub fn signatures<S: Scalar>(g: &mut Graph<S>, tv: &TaggerVars, keys: Var, window: usize) -> TResult<Var> {
    let m = g.value(keys).rows();
    let pool = g.constant(pool_matrix(m, window))?;
    let local = g.matmul(pool, keys)?;
    signature_from_parts(g, tv, keys, local)
}

/// Signature from explicit key and pooled-key rows.
pub fn signature_from_parts<S: Scalar>(
    g: &mut Graph<S>,
    tv: &TaggerVars,
    keys: Var,
    pooled: Var,
) -> TResult<Var> {
    let x = g.concat_cols(&[keys, pooled])?;
    let y = g.matmul(x, tv.w)?;
    let y = g.add_row(y, tv.b)?;
    g.layernorm(y, tv.ln.0, tv.ln.1)
}

pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `σ_i = 1` iff some later entry has cosine similarity above `threshold`.
pub fn detect_conflicts<S: Scalar>(signatures: &[&[S]], threshold: f64) -> Vec<bool> {
    let m = signatures.len();
    let mut flags = vec![false; m];
    // one pass per arriving entry against everything before it
    for j in 1..m {
        for i in 0..j {
            if !flags[i] && cosine(signatures[i], signatures[j]) > threshold {
                flags[i] = true;
            }
        }
    }
    flags
}

/// Adds the head-mean of one query's attention weights. `weights` is
/// `[heads][entries]`.
pub fn accumulate_attention(cum: &mut [f64], weights: &[Vec<f64>]) {
    let h = weights.len() as f64;
    for row in weights {
        for (c, w) in cum.iter_mut().zip(row) {
            *c += w / h;
        }
    }
}

/// Per-entry key factors `(1 + t − τ)^(−λ)` for a working copy of the keys.
pub fn key_decay(positions: &[usize], t: usize, rate: f64) -> Vec<f64> {
    positions.iter().map(|&p| decay_factor(t.saturating_sub(p), rate)).collect()
}

/// Decayed copies of `keys`; the originals are left untouched.
pub fn apply_key_decay(keys: &[Vec<f32>], positions: &[usize], t: usize, rate: f64) -> Vec<Vec<f32>> {
    keys.iter()
        .zip(key_decay(positions, t, rate))
        .map(|(k, f)| k.iter().map(|&x| (x as f64 * f) as f32).collect())
        .collect()
}
