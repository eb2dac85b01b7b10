//! Greedy signature clustering and recency-biased cross-attention that
//! merges each cluster of compress-marked entries into one entry.
//!
//! Only the hard-eviction path uses this. It works on plain `f32` vectors:
//! the soft path never reaches it, so its parameters receive no gradient.

use sleepgate_tensor::{Graph, Tensor};

use crate::cache::{cosine, signature_from_parts, AugmentedCache, AugmentedEntry, TaggerVars};
use crate::config::HyperParams;
use crate::error::Result;
use crate::gate::Action;
use crate::params::{Component, ParamStore};

/// Groups entries (given in position order) by single-linkage against each
/// existing cluster: an entry joins the cluster holding its most similar
/// member when that similarity exceeds `threshold`.
pub fn greedy_cluster(signatures: &[&[f32]], threshold: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, s) in signatures.iter().enumerate() {
        let best = clusters
            .iter()
            .enumerate()
            .map(|(c, members)| {
                let sim = members.iter().map(|&j| cosine(s, signatures[j])).fold(f64::NEG_INFINITY, f64::max);
                (c, sim)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((c, sim)) if sim > threshold => clusters[c].push(i),
            _ => clusters.push(vec![i]),
        }
    }
    clusters
}

pub struct ConsolidationParams<'a> {
    wk: &'a Tensor<f32>,
    bk: &'a Tensor<f32>,
    wv: &'a Tensor<f32>,
    bv: &'a Tensor<f32>,
    q: &'a Tensor<f32>,
}

impl<'a> ConsolidationParams<'a> {
    pub fn from_store(p: &'a ParamStore<f32>) -> Self {
        Self { wk: p.expect("cons.wk"), bk: p.expect("cons.bk"), wv: p.expect("cons.wv"), bv: p.expect("cons.bv"), q: p.expect("cons.q") }
    }

    pub fn count(p: &ParamStore<f32>) -> usize {
        p.count(Component::Consolidation)
    }
}

/// `x W + b` for a row vector.
fn affine(x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let n = w.cols();
    let mut out: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    for (i, &xi) in x.iter().enumerate() {
        let row = w.row(i);
        for j in 0..n {
            out[j] += xi as f64 * row[j] as f64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Consolidated {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub position: usize,
    /// Cross-attention weights over members.
    pub alpha: Vec<f64>,
    /// Normalized retention weights used for the key average.
    pub key_weights: Vec<f64>,
}

/// Merges one non-empty cluster.
///
/// `k* = Σ rᵢkᵢ / (Σ rᵢ + ε)`; `v* = Σ αᵢ (W_V′vᵢ + b)` where `α` is a softmax
/// over `q·(W_K′kᵢ + b)/√d + η·τ̃ᵢ` and `τ̃ = τ / max τ`.
pub fn consolidate(
    keys: &[&[f32]],
    values: &[&[f32]],
    retention: &[f64],
    positions: &[usize],
    params: &ConsolidationParams<'_>,
    hp: &HyperParams,
) -> Consolidated {
    assert!(!keys.is_empty(), "empty cluster");
    let d = keys[0].len();
    let rsum: f64 = retention.iter().sum::<f64>() + hp.consolidation_eps;
    let key_weights: Vec<f64> = retention.iter().map(|r| r / rsum).collect();
    let mut key = vec![0.0f64; d];
    for (k, w) in keys.iter().zip(&key_weights) {
        for (o, &x) in key.iter_mut().zip(k.iter()) {
            *o += w * x as f64;
        }
    }
    let tmax = *positions.iter().max().unwrap();
    let recency: Vec<f64> =
        positions.iter().map(|&p| if tmax == 0 { 1.0 } else { p as f64 / tmax as f64 }).collect();
    let inv = 1.0 / (d as f64).sqrt();
    let q = params.q.data();
    let logits: Vec<f64> = keys
        .iter()
        .zip(&recency)
        .map(|(k, &rt)| {
            let pk = affine(k, params.wk, params.bk);
            let s: f64 = pk.iter().zip(q).map(|(a, &b)| a * b as f64).sum();
            s * inv + hp.recency_weight * rt
        })
        .collect();
    let alpha = softmax(&logits);
    let mut value = vec![0.0f64; params.wv.cols()];
    for (v, a) in values.iter().zip(&alpha) {
        for (o, x) in value.iter_mut().zip(affine(v, params.wv, params.bv)) {
            *o += a * x;
        }
    }
    Consolidated {
        key: key.into_iter().map(|x| x as f32).collect(),
        value: value.into_iter().map(|x| x as f32).collect(),
        position: tmax,
        alpha,
        key_weights,
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// How one output entry was produced from the input entries.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Kept(usize),
    Merged { members: Vec<usize>, alpha: Vec<f64>, key_weights: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct HardOutcome {
    pub cache: AugmentedCache,
    /// Aligned with `cache.entries`.
    pub origins: Vec<Origin>,
    pub evicted: Vec<usize>,
}

/// Keep entries stay, compress-marked entries are clustered and merged,
/// evict-marked entries are dropped. The result is position-sorted with
/// flags refreshed.
pub fn hard_sleep_transform(
    cache: &AugmentedCache,
    decisions: &[Action],
    retention: &[f64],
    params: &ParamStore<f32>,
    hp: &HyperParams,
) -> Result<HardOutcome> {
    assert_eq!(decisions.len(), cache.len());
    let cp = ConsolidationParams::from_store(params);
    let compress: Vec<usize> = (0..cache.len()).filter(|&i| decisions[i] == Action::Compress).collect();
    let sigs: Vec<&[f32]> = compress.iter().map(|&i| cache.entries[i].signature.as_slice()).collect();
    let clusters = greedy_cluster(&sigs, hp.conflict_threshold / 2.0);

    let mut out: Vec<(AugmentedEntry, Origin)> = Vec::new();
    for (i, e) in cache.entries.iter().enumerate() {
        if decisions[i] == Action::Keep {
            out.push((e.clone(), Origin::Kept(i)));
        }
    }
    for cl in clusters {
        let members: Vec<usize> = cl.iter().map(|&c| compress[c]).collect();
        let ents: Vec<&AugmentedEntry> = members.iter().map(|&i| &cache.entries[i]).collect();
        let keys: Vec<&[f32]> = ents.iter().map(|e| e.key.as_slice()).collect();
        let values: Vec<&[f32]> = ents.iter().map(|e| e.value.as_slice()).collect();
        let r: Vec<f64> = members.iter().map(|&i| retention[i]).collect();
        let pos: Vec<usize> = ents.iter().map(|e| e.position).collect();
        let c = consolidate(&keys, &values, &r, &pos, &cp, hp);
        let signature = consolidated_signature(params, &c.key)?;
        let entry = AugmentedEntry {
            position: c.position,
            key: c.key,
            value: c.value,
            signature,
            superseded: false,
            cum_attention: ents.iter().map(|e| e.cum_attention).sum(),
        };
        out.push((entry, Origin::Merged { members, alpha: c.alpha, key_weights: c.key_weights }));
    }
    out.sort_by_key(|(e, _)| e.position);
    let evicted = (0..cache.len()).filter(|&i| decisions[i] == Action::Evict).collect();
    let (entries, origins): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let mut cache = AugmentedCache { entries };
    cache.refresh_flags(hp.conflict_threshold);
    Ok(HardOutcome { cache, origins, evicted })
}

/// Signature of a merged entry, whose local pool is the merged key itself.
pub fn consolidated_signature(params: &ParamStore<f32>, key: &[f32]) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, &[Component::Tagger], &[])?;
    let tv = TaggerVars::from_binding(&b);
    let k = g.constant(Tensor::new(&[1, key.len()], key.to_vec())?)?;
    let s = signature_from_parts(&mut g, &tv, k, k)?;
    Ok(g.value(s).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_rule_hand_trace() {
        let a = [1.0f32, 0.0];
        let b = [0.9f32, (1.0f32 - 0.81).sqrt()];
        let c = [0.0f32, 0.0];
        let c2 = [0.0f32, 1.0];
        assert_eq!(greedy_cluster(&[&a[..], &b[..], &c[..]], 0.425), vec![vec![0, 1], vec![2]]);
        assert_eq!(greedy_cluster(&[&a[..], &c2[..]], 0.425), vec![vec![0], vec![1]]);
        assert_eq!(greedy_cluster(&[&a[..], &a[..], &a[..]], 0.425), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn softmax_of_recency_pair() {
        let p = softmax(&[1.0, 2.0]);
        assert!((p[0] - 0.2689).abs() < 1e-4 && (p[1] - 0.7311).abs() < 1e-4);
    }
}
