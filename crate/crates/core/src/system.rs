//! Whole-model passes shared by training and evaluation: the plain pass
//! under a cache policy and the gated pass with the soft sleep bias.

use sleepgate_tensor::{Graph, Scalar, Var};

use crate::config::HyperParams;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::{cumulative_attention, forward, AttentionPlan, BaseVars, ForwardOutput, ModelConfig};
use crate::params::{Component, ParamStore};
use crate::policy::{decay_factor, CachePolicy, Method};
use crate::scheduler::{soft_cycle, Relaxation, SleepVars, SoftCycle};

/// Attention plan of the biased pass: the per-key sleep bias plus key decay
/// relative to the final step `t = T − 1`, applied as a per-key logit scale.
pub fn sleep_plan<S: Scalar>(bias: Var, t_len: usize, hp: &HyperParams) -> AttentionPlan<S> {
    let t = t_len - 1;
    let row: Vec<S> = (0..t_len).map(|j| S::from_f64(decay_factor(t - j, hp.decay_rate)).unwrap()).collect();
    let mut scale = Vec::with_capacity(t_len * t_len);
    for _ in 0..t_len {
        scale.extend_from_slice(&row);
    }
    AttentionPlan { bias: Some(bias), logit_scale: Some(scale), ..Default::default() }
}

pub struct GatedForward {
    pub plain: ForwardOutput,
    pub cum_attention: Vec<f64>,
    pub cycle: SoftCycle,
    pub biased: ForwardOutput,
}

/// Unbiased pass, one sleep cycle at the final step, then the biased pass.
pub fn gated_forward<S: Scalar>(
    g: &mut Graph<S>,
    base: &BaseVars,
    sleep: &SleepVars,
    cfg: &ModelConfig,
    hp: &HyperParams,
    tokens: &[usize],
    relax: Option<Relaxation<'_>>,
) -> Result<GatedForward> {
    let t_len = tokens.len();
    let plain = forward(g, base, cfg, tokens, &AttentionPlan::default(), false)?;
    let cum_attention = cumulative_attention(g, plain.attention[0], cfg.n_heads, t_len, t_len - 1);
    let positions: Vec<usize> = (0..t_len).collect();
    let cycle = soft_cycle(
        g,
        sleep,
        cfg,
        hp,
        plain.keys0,
        plain.values0,
        &positions,
        &cum_attention,
        t_len - 1,
        None,
        relax,
    )?;
    let plan = sleep_plan(cycle.bias, t_len, hp);
    let biased = forward(g, base, cfg, tokens, &plan, false)?;
    Ok(GatedForward { plain, cum_attention, cycle, biased })
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn answers<S: Scalar>(g: &Graph<S>, logits: Var, ep: &Episode) -> Vec<usize> {
    let l = g.value(logits);
    ep.queries.iter().map(|q| argmax(l.row(q.position))).collect()
}

/// How a trained model is queried at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// Teacher-forced pass under a cache policy.
    Policy(CachePolicy),
    /// Biased pass after one soft sleep cycle.
    Gated,
}

impl EvalMode {
    pub fn for_method(method: Method, hp: &HyperParams) -> Self {
        method.policy(hp).map_or(EvalMode::Gated, EvalMode::Policy)
    }
}

/// Argmax predictions at each query's answer position.
pub fn predict(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    mode: EvalMode,
    ep: &Episode,
) -> Result<Vec<usize>> {
    if ep.queries.is_empty() {
        return Err(Error::Input("episode has no queries".into()));
    }
    let mut g = Graph::<f32>::new();
    match mode {
        EvalMode::Policy(policy) => {
            let b = params.bind(&mut g, &[Component::Base], &[])?;
            let base = BaseVars::from_binding(&b, cfg);
            let out = forward(&mut g, &base, cfg, &ep.tokens, &policy.plan(ep.len()), false)?;
            Ok(answers(&g, out.logits.expect("logits"), ep))
        }
        EvalMode::Gated => {
            let b = params.bind(&mut g, &[Component::Base, Component::Tagger, Component::Gate], &[])?;
            let base = BaseVars::from_binding(&b, cfg);
            let sleep = SleepVars::from_binding(&b);
            let out = gated_forward(&mut g, &base, &sleep, cfg, hp, &ep.tokens, None)?;
            Ok(answers(&g, out.biased.logits.expect("logits"), ep))
        }
    }
}

/// Gate verdicts at the final step against generator labels:
/// `(correct, total)` with a 0.5 cutoff.
pub fn gate_agreement(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    ep: &Episode,
) -> Result<(usize, usize)> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, &[Component::Base, Component::Tagger, Component::Gate], &[])?;
    let base = BaseVars::from_binding(&b, cfg);
    let sleep = SleepVars::from_binding(&b);
    let (cycle, _) = layer0_cycle(&mut g, &base, &sleep, cfg, hp, &ep.tokens)?;
    let labels = ep.forget_labels();
    let r = g.value(cycle.retention).data();
    let correct = r.iter().zip(&labels).filter(|(&r, &forget)| (r < 0.5) == forget).count();
    Ok((correct, labels.len()))
}

/// Sleep cycle at the final step computed from the designated layer only.
pub fn layer0_cycle<S: Scalar>(
    g: &mut Graph<S>,
    base: &BaseVars,
    sleep: &SleepVars,
    cfg: &ModelConfig,
    hp: &HyperParams,
    tokens: &[usize],
) -> Result<(SoftCycle, Vec<f64>)> {
    let t_len = tokens.len();
    let out = forward(g, base, cfg, tokens, &AttentionPlan::default(), true)?;
    let cum = cumulative_attention(g, out.attention[0], cfg.n_heads, t_len, t_len - 1);
    let positions: Vec<usize> = (0..t_len).collect();
    let cycle = soft_cycle(g, sleep, cfg, hp, out.keys0, out.values0, &positions, &cum, t_len - 1, None, None)?;
    Ok((cycle, cum))
}
