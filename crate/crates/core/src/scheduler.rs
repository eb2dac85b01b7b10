//! Sleep triggers and the sleep micro-cycle.
//!
//! A cycle computes signatures and flags, scores every entry with the gate
//! and then either returns a soft attention bias or rewrites the cache
//! (decide, consolidate, evict).

use std::collections::VecDeque;

use sleepgate_tensor::{lit, Graph, Result as TResult, Scalar, Tensor, Var};

use crate::cache::{detect_conflicts, signatures, AugmentedCache, TaggerVars};
use crate::config::HyperParams;
use crate::consolidation::{hard_sleep_transform, HardOutcome};
use crate::error::Result;
use crate::gate::{act, assemble_features, hidden, retention_logit, soft_bias, Action, EntryMeta, GateVars};
use crate::model::ModelConfig;
use crate::params::{Binding, Component, ParamStore};

/// Mean over heads of `−Σ α ln α`, with `0 ln 0 = 0`.
pub fn attention_entropy(weights: &[Vec<f64>]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let total: f64 = weights
        .iter()
        .map(|row| row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum::<f64>())
        .sum();
    total / weights.len() as f64
}

/// Fraction of flagged entries; 0 for an empty cache.
pub fn conflict_density(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TriggerReason {
    Entropy,
    Conflict,
    Fallback,
}

/// Running entropy statistics plus the three trigger clauses.
#[derive(Clone, Debug)]
pub struct TriggerState {
    history: VecDeque<f64>,
    window: usize,
    min_samples: usize,
    kappa: f64,
    max_density: f64,
    fallback: usize,
    pub last_trigger: Option<usize>,
}

impl TriggerState {
    pub fn new(hp: &HyperParams) -> Self {
        Self {
            history: VecDeque::with_capacity(hp.entropy_window),
            window: hp.entropy_window,
            min_samples: hp.entropy_min_samples,
            kappa: hp.entropy_kappa,
            max_density: hp.max_conflict_density,
            fallback: hp.fallback_interval,
            last_trigger: None,
        }
    }

    /// Mean and population standard deviation of the window.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.history.len();
        if n == 0 {
            return (0.0, 0.0);
        }
        let mean = self.history.iter().sum::<f64>() / n as f64;
        let var = self.history.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    }

    pub fn samples(&self) -> usize {
        self.history.len()
    }

    /// Evaluates the clauses against the statistics gathered so far.
    pub fn should_trigger(&self, entropy: f64, density: f64, step: usize) -> Option<TriggerReason> {
        if density > self.max_density {
            return Some(TriggerReason::Conflict);
        }
        if self.history.len() >= self.min_samples {
            let (mean, std) = self.stats();
            if entropy > mean + self.kappa * std {
                return Some(TriggerReason::Entropy);
            }
        }
        if self.fallback > 0 && step.is_multiple_of(self.fallback) {
            return Some(TriggerReason::Fallback);
        }
        None
    }

    pub fn observe(&mut self, entropy: f64) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(entropy);
    }
}

pub struct SleepVars {
    pub tagger: TaggerVars,
    pub gate: GateVars,
}

impl SleepVars {
    pub fn from_binding(b: &Binding) -> Self {
        Self { tagger: TaggerVars::from_binding(b), gate: GateVars::from_binding(b) }
    }
}

pub struct SoftCycle {
    pub signatures: Var,
    pub flags: Vec<bool>,
    pub hidden: Var,
    pub logit: Var,
    /// `[m × 1]`.
    pub retention: Var,
    /// `[m]`.
    pub bias: Var,
}

/// Binary-concrete sampling of retention: noise per entry and temperature.
pub struct Relaxation<'a> {
    pub noise: &'a [f64],
    pub temperature: f64,
}

/// Scores every entry of a cache given its designated-layer keys and
/// values (`[m × d]`, graph variables so gradients can reach the encoder).
#[allow(clippy::too_many_arguments)]
pub fn soft_cycle<S: Scalar>(
    g: &mut Graph<S>,
    sv: &SleepVars,
    cfg: &ModelConfig,
    hp: &HyperParams,
    keys: Var,
    values: Var,
    positions: &[usize],
    cum_attention: &[f64],
    t: usize,
    prior_flags: Option<&[bool]>,
    relax: Option<Relaxation<'_>>,
) -> TResult<SoftCycle> {
    let m = positions.len();
    let sigs = signatures(g, &sv.tagger, keys, hp.pool_window)?;
    let sd = g.value(sigs).cols();
    let rows: Vec<&[S]> = (0..m).map(|i| &g.value(sigs).data()[i * sd..(i + 1) * sd]).collect();
    let mut flags = detect_conflicts(&rows, hp.conflict_threshold);
    if let Some(prev) = prior_flags {
        for (f, &p) in flags.iter_mut().zip(prev) {
            *f |= p;
        }
    }
    let meta = EntryMeta { positions, t, flags: &flags, cum_attention };
    let feats = assemble_features(g, cfg, hp, keys, values, sigs, &meta)?;
    let h = hidden(g, &sv.gate, feats)?;
    let logit = retention_logit(g, &sv.gate, h)?;
    let pre = match relax {
        None => logit,
        Some(rx) => {
            let noise = g.constant(Tensor::new(&[m, 1], rx.noise.iter().map(|&x| lit::<S>(x)).collect())?)?;
            let z = g.add(logit, noise)?;
            g.scale(z, lit(1.0 / rx.temperature))?
        }
    };
    let r = g.sigmoid(pre)?;
    let bias = soft_bias(g, r, hp.bias_scale, hp.bias_eps)?;
    Ok(SoftCycle { signatures: sigs, flags, hidden: h, logit, retention: r, bias })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SleepMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug)]
pub enum SleepResult {
    Soft { retention: Vec<f64>, bias: Vec<f32> },
    Hard { retention: Vec<f64>, decisions: Vec<Action>, outcome: HardOutcome },
}

/// One sleep micro-cycle over a cache at step `t`. Signatures and flags
/// are written back into the cache before the gate runs.
pub fn run_sleep_cycle(
    cache: &mut AugmentedCache,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    t: usize,
    mode: SleepMode,
) -> Result<SleepResult> {
    let m = cache.len();
    if m == 0 {
        return Ok(match mode {
            SleepMode::Soft => SleepResult::Soft { retention: Vec::new(), bias: Vec::new() },
            SleepMode::Hard => SleepResult::Hard {
                retention: Vec::new(),
                decisions: Vec::new(),
                outcome: HardOutcome { cache: AugmentedCache::default(), origins: Vec::new(), evicted: Vec::new() },
            },
        });
    }
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, &[Component::Tagger, Component::Gate, Component::GateAction], &[])?;
    let sv = SleepVars::from_binding(&b);
    let d = cache.entries[0].key.len();
    let keys: Vec<f32> = cache.entries.iter().flat_map(|e| e.key.iter().copied()).collect();
    let values: Vec<f32> = cache.entries.iter().flat_map(|e| e.value.iter().copied()).collect();
    let keys = g.constant(Tensor::new(&[m, d], keys)?)?;
    let values = g.constant(Tensor::new(&[m, d], values)?)?;
    let positions = cache.positions();
    let cum = cache.cum_attention();
    let prior = cache.flags();
    let cycle = soft_cycle(&mut g, &sv, cfg, hp, keys, values, &positions, &cum, t, Some(&prior), None)?;
    let sd = g.value(cycle.signatures).cols();
    for (i, e) in cache.entries.iter_mut().enumerate() {
        e.signature = g.value(cycle.signatures).data()[i * sd..(i + 1) * sd].to_vec();
        e.superseded = cycle.flags[i];
    }
    let retention: Vec<f64> = g.value(cycle.retention).data().iter().map(|&r| r as f64).collect();
    Ok(match mode {
        SleepMode::Soft => SleepResult::Soft { retention, bias: g.value(cycle.bias).data().to_vec() },
        SleepMode::Hard => {
            let decisions: Vec<Action> =
                retention.iter().map(|&r| act(r, hp.keep_threshold, hp.evict_threshold)).collect();
            let outcome = hard_sleep_transform(cache, &decisions, &retention, params, hp)?;
            SleepResult::Hard { retention, decisions, outcome }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((attention_entropy(&[vec![0.25; 4]]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(attention_entropy(&[vec![0.0, 1.0, 0.0]]), 0.0);
        let two = attention_entropy(&[vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0]]);
        assert!((two - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn density_examples() {
        assert_eq!(conflict_density(&[]), 0.0);
        assert_eq!(conflict_density(&[false; 3]), 0.0);
        assert_eq!(conflict_density(&[true, false, true, false, false]), 0.4);
        assert_eq!(conflict_density(&[true; 2]), 1.0);
    }

    #[test]
    fn trigger_clauses() {
        let hp = HyperParams::default();
        let mut s = TriggerState::new(&hp);
        assert_eq!(s.should_trigger(0.0, 0.41, 5), Some(TriggerReason::Conflict));
        assert_eq!(s.should_trigger(0.0, 0.0, 128), Some(TriggerReason::Fallback));
        for _ in 0..10 {
            s.observe(1.0);
        }
        assert_eq!(s.should_trigger(1.0, 0.1, 5), None);
        assert_eq!(s.should_trigger(1.5, 0.1, 5), Some(TriggerReason::Entropy));
    }
}
