//! Comparison cache policies: full cache, sliding window, heavy hitters,
//! attention sinks plus window, and key decay without a gate.
//!
//! In teacher-forced passes an evicted position is a masked (−∞) logit;
//! the incremental decoder in [`crate::decode`] removes entries physically.
//! The two must agree.

use std::fmt;
use std::str::FromStr;

use sleepgate_tensor::Scalar;

use crate::config::HyperParams;
use crate::model::AttentionPlan;

/// Every method that trains its own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SleepGate,
    Full,
    Window,
    H2o,
    Streaming,
    Decay,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::SleepGate, Method::Full, Method::Window, Method::H2o, Method::Streaming, Method::Decay];

    pub fn name(self) -> &'static str {
        match self {
            Method::SleepGate => "sleepgate",
            Method::Full => "full",
            Method::Window => "window",
            Method::H2o => "h2o",
            Method::Streaming => "streaming",
            Method::Decay => "decay",
        }
    }

    /// The cache policy a baseline runs under; `None` for the gated method.
    pub fn policy(self, hp: &HyperParams) -> Option<CachePolicy> {
        Some(match self {
            Method::SleepGate => return None,
            Method::Full => CachePolicy::Full,
            Method::Window => CachePolicy::SlidingWindow { window: hp.window },
            Method::H2o => CachePolicy::HeavyHitter { heavy: hp.h2o_heavy, recent: hp.h2o_recent },
            Method::Streaming => CachePolicy::Streaming { sinks: hp.sinks, window: hp.stream_window },
            Method::Decay => CachePolicy::DecayOnly { rate: hp.decay_rate },
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?} (sleepgate, full, window, h2o, streaming, decay)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CachePolicy {
    Full,
    SlidingWindow { window: usize },
    HeavyHitter { heavy: usize, recent: usize },
    Streaming { sinks: usize, window: usize },
    DecayOnly { rate: f64 },
}

impl CachePolicy {
    /// Maximum number of retained entries, if bounded.
    pub fn budget(&self) -> Option<usize> {
        match *self {
            CachePolicy::Full | CachePolicy::DecayOnly { .. } => None,
            CachePolicy::SlidingWindow { window } => Some(window),
            CachePolicy::HeavyHitter { heavy, recent } => Some(heavy + recent),
            CachePolicy::Streaming { sinks, window } => Some(sinks + window),
        }
    }

    /// Attention modifiers for a teacher-forced pass over `t` tokens.
    pub fn plan<S: Scalar>(&self, t: usize) -> AttentionPlan<S> {
        let mut plan = AttentionPlan::default();
        match *self {
            CachePolicy::Full => {}
            CachePolicy::SlidingWindow { .. } | CachePolicy::Streaming { .. } => {
                let mut allowed = vec![false; t * t];
                for i in 0..t {
                    for j in self.retained_positions(i + 1) {
                        allowed[i * t + j] = true;
                    }
                }
                plan.allowed = Some(allowed);
            }
            CachePolicy::HeavyHitter { heavy, recent } => plan.heavy_hitter = Some((heavy, recent)),
            CachePolicy::DecayOnly { rate } => plan.logit_scale = Some(relative_decay(t, rate)),
        }
        plan
    }

    /// Positions kept by a position-only policy once `n` tokens exist.
    /// The heavy-hitter policy needs attention scores; see [`retained_set`].
    fn retained_positions(&self, n: usize) -> Vec<usize> {
        match *self {
            CachePolicy::SlidingWindow { window } => (n.saturating_sub(window)..n).collect(),
            CachePolicy::Streaming { sinks, window } => {
                let start = n.saturating_sub(window);
                (0..sinks.min(start)).chain(start..n).collect()
            }
            _ => (0..n).collect(),
        }
    }
}

/// The retained subset of `positions` (ascending). `cum_attention[i]` is the
/// score of `positions[i]`.
pub fn retained_set(policy: &CachePolicy, positions: &[usize], cum_attention: &[f64]) -> Vec<usize> {
    let n = positions.len();
    match *policy {
        CachePolicy::Full | CachePolicy::DecayOnly { .. } => positions.to_vec(),
        CachePolicy::SlidingWindow { .. } | CachePolicy::Streaming { .. } => {
            policy.retained_positions(n).into_iter().map(|i| positions[i]).collect()
        }
        CachePolicy::HeavyHitter { heavy, recent } => {
            if n <= heavy + recent {
                return positions.to_vec();
            }
            let split = n - recent;
            let mut older: Vec<usize> = (0..split).collect();
            // highest score first; among equal scores the newer entry first
            older.sort_by(|&a, &b| cum_attention[b].total_cmp(&cum_attention[a]).then(b.cmp(&a)));
            let mut keep: Vec<usize> = older[..heavy].to_vec();
            keep.extend(split..n);
            keep.sort_unstable();
            keep.into_iter().map(|i| positions[i]).collect()
        }
    }
}

/// `[T×T]` logit scale `(1 + i − j)^(−rate)` for query `i`, key `j ≤ i`.
pub fn relative_decay<S: Scalar>(t: usize, rate: f64) -> Vec<S> {
    let mut out = vec![S::one(); t * t];
    for i in 0..t {
        for j in 0..=i {
            out[i * t + j] = S::from_f64(decay_factor(i - j, rate)).unwrap();
        }
    }
    out
}

pub fn decay_factor(age: usize, rate: f64) -> f64 {
    (1.0 + age as f64).powf(-rate)
}

/// Sequential heavy-hitter bookkeeping: one token enters per step, and once
/// the cache exceeds its budget the weakest older entry leaves for good.
#[derive(Clone, Debug)]
pub struct HeavyHitterTracker {
    heavy: usize,
    recent: usize,
    members: Vec<usize>,
    scores: Vec<f64>,
}

impl HeavyHitterTracker {
    pub fn new(heavy: usize, recent: usize) -> Self {
        Self { heavy, recent, members: Vec::new(), scores: Vec::new() }
    }

    /// Admits `position` and returns the positions evicted to make room.
    pub fn admit(&mut self, position: usize) -> Vec<usize> {
        self.members.push(position);
        self.scores.push(0.0);
        let policy = CachePolicy::HeavyHitter { heavy: self.heavy, recent: self.recent };
        let keep = retained_set(&policy, &self.members, &self.scores);
        if keep.len() == self.members.len() {
            return Vec::new();
        }
        let mut evicted = Vec::new();
        let (mut members, mut scores) = (Vec::new(), Vec::new());
        for (&p, &s) in self.members.iter().zip(&self.scores) {
            if keep.binary_search(&p).is_ok() {
                members.push(p);
                scores.push(s);
            } else {
                evicted.push(p);
            }
        }
        self.members = members;
        self.scores = scores;
        evicted
    }

    /// Adds attention received (aligned with [`Self::members`]).
    pub fn accumulate(&mut self, weights: &[f64]) {
        for (s, w) in self.scores.iter_mut().zip(weights) {
            *s += w;
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Builds the `[T×T]` visibility mask of the heavy-hitter policy from
/// designated-layer queries and keys (`[T × heads·d_head]`).
///
/// Eviction happens before the new query attends, so a row shows exactly the
/// entries that survive at that step.
#[allow(clippy::too_many_arguments)]
pub fn heavy_hitter_mask<S: Scalar>(
    q: &[S],
    k: &[S],
    t: usize,
    heads: usize,
    heavy: usize,
    recent: usize,
    logit_scale: Option<&[S]>,
    bias: Option<&[S]>,
    allowed: Option<&[bool]>,
) -> Vec<bool> {
    let d = q.len() / t;
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut tracker = HeavyHitterTracker::new(heavy, recent);
    let mut mask = vec![false; t * t];
    let mut logits = Vec::new();
    for i in 0..t {
        tracker.admit(i);
        let visible: Vec<usize> =
            tracker.members().iter().copied().filter(|&j| allowed.is_none_or(|a| a[i * t + j])).collect();
        for &j in &visible {
            mask[i * t + j] = true;
        }
        let mut weights = vec![0.0; tracker.members().len()];
        for h in 0..heads {
            logits.clear();
            for &j in &visible {
                let mut s = 0.0;
                for c in h * dh..(h + 1) * dh {
                    s += q[i * d + c].to_f64().unwrap() * k[j * d + c].to_f64().unwrap();
                }
                s *= inv;
                if let Some(sc) = logit_scale {
                    s *= sc[i * t + j].to_f64().unwrap();
                }
                if let Some(b) = bias {
                    s += b[j].to_f64().unwrap();
                }
                logits.push(s);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
            for (&j, &x) in visible.iter().zip(&logits) {
                let slot = tracker.members().iter().position(|&m| m == j).unwrap();
                weights[slot] += (x - max).exp() / z / heads as f64;
            }
        }
        tracker.accumulate(&weights);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positions(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn sliding_window_of_hundred() {
        let p = CachePolicy::SlidingWindow { window: 64 };
        assert_eq!(retained_set(&p, &positions(100), &[0.0; 100]), (36..100).collect::<Vec<_>>());
    }

    #[test]
    fn sinks_plus_window_of_hundred() {
        let p = CachePolicy::Streaming { sinks: 4, window: 60 };
        let kept = retained_set(&p, &positions(100), &[0.0; 100]);
        let want: Vec<usize> = (0..4).chain(40..100).collect();
        assert_eq!(kept, want);
        assert_eq!(kept.len(), 64);
    }

    #[test]
    fn under_budget_keeps_everything() {
        let hp = HyperParams::default();
        for m in Method::ALL {
            if let Some(p) = m.policy(&hp) {
                assert_eq!(retained_set(&p, &positions(64), &[1.0; 64]), positions(64));
            }
        }
    }

    #[test]
    fn heavy_hitters_break_ties_toward_newer() {
        let p = CachePolicy::HeavyHitter { heavy: 2, recent: 2 };
        let cum = [5.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(retained_set(&p, &positions(6), &cum), vec![0, 3, 4, 5]);
    }

    #[test]
    fn tracker_respects_budget_and_keeps_newest() {
        let mut tr = HeavyHitterTracker::new(3, 2);
        for i in 0..20 {
            tr.admit(i);
            assert!(tr.members().len() <= 5);
            assert_eq!(*tr.members().last().unwrap(), i);
            let w: Vec<f64> = tr.members().iter().map(|&m| if m % 3 == 0 { 1.0 } else { 0.1 }).collect();
            tr.accumulate(&w);
        }
    }

    #[test]
    fn decay_factor_examples() {
        assert_eq!(decay_factor(0, 0.01), 1.0);
        assert!((decay_factor(99, 0.01) - 0.9550).abs() < 1e-4);
        assert_eq!(decay_factor(40, 0.0), 1.0);
    }
}
