//! The forgetting gate: feature assembly, retention scoring, the discrete
//! action rule, Gumbel relaxations and the soft attention bias.

use sleepgate_tensor::{lit, Graph, Result as TResult, Scalar, Var};

use crate::config::HyperParams;
use crate::model::{gate_feature_width, positional_table, ModelConfig};
use crate::params::{open_unit, Binding};
use crate::rng::Rng;

pub struct GateVars {
    w1: Var,
    b1: Var,
    wr: Var,
    br: Var,
    action: Option<(Var, Var)>,
}

impl GateVars {
    pub fn from_binding(b: &Binding) -> Self {
        let action = b.try_var("action.w").zip(b.try_var("action.b"));
        Self { w1: b.var("gate.w1"), b1: b.var("gate.b1"), wr: b.var("gate.wr"), br: b.var("gate.br"), action }
    }
}

/// Non-differentiable per-entry metadata entering the features.
pub struct EntryMeta<'a> {
    pub positions: &'a [usize],
    /// Current step; ages are `t − τ`.
    pub t: usize,
    pub flags: &'a [bool],
    pub cum_attention: &'a [f64],
}

/// `[m × 578]` features `[k ∥ v ∥ PE(age) ∥ s ∥ σ ∥ a/(1+a) ∥ c̄]`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_features<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    keys: Var,
    values: Var,
    signatures: Var,
    meta: &EntryMeta<'_>,
) -> TResult<Var> {
    let m = meta.positions.len();
    let ages = meta.positions.iter().map(|&p| meta.t - p);
    let pe = g.constant(positional_table(ages, cfg.d_model))?;
    let col = |vals: Vec<S>| sleepgate_tensor::Tensor::new(&[m, 1], vals).expect("column");
    let sigma = g.constant(col(meta.flags.iter().map(|&f| if f { S::one() } else { S::zero() }).collect()))?;
    let squashed = meta.cum_attention.iter().map(|&a| lit::<S>(a / (1.0 + a))).collect();
    let attn = g.constant(col(squashed))?;
    let recent = hp.context_window.min(m).max(1);
    let tail = g.slice_rows(keys, m - recent, m)?;
    let ctx = g.mean_rows(tail)?;
    let ctx = g.repeat_rows(ctx, m)?;
    let f = g.concat_cols(&[keys, values, pe, signatures, sigma, attn, ctx])?;
    debug_assert_eq!(g.value(f).cols(), gate_feature_width(cfg, hp));
    Ok(f)
}

/// Hidden layer `GeLU(f W₁ + b₁)`.
pub fn hidden<S: Scalar>(g: &mut Graph<S>, gv: &GateVars, features: Var) -> TResult<Var> {
    let h = g.matmul(features, gv.w1)?;
    let h = g.add_row(h, gv.b1)?;
    g.gelu(h)
}

/// Pre-sigmoid retention logit, `[m × 1]`.
pub fn retention_logit<S: Scalar>(g: &mut Graph<S>, gv: &GateVars, hidden: Var) -> TResult<Var> {
    let z = g.matmul(hidden, gv.wr)?;
    g.add_row(z, gv.br)
}

/// Keep / compress / evict logits, `[m × 3]`. Requires the action head.
pub fn action_logits<S: Scalar>(g: &mut Graph<S>, gv: &GateVars, hidden: Var) -> TResult<Option<Var>> {
    let Some((w, b)) = gv.action else { return Ok(None) };
    let z = g.matmul(hidden, w)?;
    g.add_row(z, b).map(Some)
}

/// `b = β · ln(max(r, ε))` as a flat `[m]` vector.
pub fn soft_bias<S: Scalar>(g: &mut Graph<S>, r: Var, beta: f64, eps: f64) -> TResult<Var> {
    let m = g.value(r).len();
    let c = g.clamp(r, lit(eps), S::infinity())?;
    let l = g.log(c)?;
    let b = g.scale(l, lit(beta))?;
    g.reshape(b, &[m])
}

pub fn soft_bias_value(r: f64, beta: f64, eps: f64) -> f64 {
    beta * r.max(eps).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Keep,
    Compress,
    Evict,
}

/// Keep iff `r ≥ keep`, evict iff `r < evict`, compress otherwise.
pub fn act(r: f64, keep: f64, evict: f64) -> Action {
    if r >= keep {
        Action::Keep
    } else if r >= evict {
        Action::Compress
    } else {
        Action::Evict
    }
}

/// One Gumbel(0, 1) draw, `−ln(−ln u)`.
pub fn gumbel_noise(rng: &mut Rng) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

/// `softmax((z + g) / temp)` over the three actions.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], temp: f64) -> Vec<f64> {
    let y: Vec<f64> = logits.iter().zip(noise).map(|(z, g)| (z + g) / temp).collect();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Binary concrete relaxation `sigmoid((ℓ + g) / temp)`.
pub fn gumbel_sigmoid(logit: f64, noise: f64, temp: f64) -> f64 {
    1.0 / (1.0 + (-(logit + noise) / temp).exp())
}

/// Noise for the binary relaxation: the difference of two Gumbel draws,
/// i.e. a standard logistic sample.
pub fn binary_noise(rng: &mut Rng) -> f64 {
    gumbel_noise(rng) - gumbel_noise(rng)
}

/// Linear annealing from `start` at epoch 0 to `end` at `epochs − 1`.
pub fn gumbel_temperature(hp: &HyperParams, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return hp.gumbel_temp_start;
    }
    let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    hp.gumbel_temp_start + f * (hp.gumbel_temp_end - hp.gumbel_temp_start)
}
