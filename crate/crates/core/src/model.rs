//! The base causal transformer: configuration, initialization, parameter
//! accounting and the teacher-forced forward pass.
//!
//! Pre-norm residual blocks, sinusoidal positions that carry no parameters,
//! biases on every linear map and an untied LM head. Each attention call can
//! carry a shared per-key bias, an extra visibility mask and a per-entry
//! logit scale; that is the hook every cache policy and the sleep bias use.

use sleepgate_tensor::{AttentionSpec, Graph, Result as TResult, Scalar, Tensor, Var};

use crate::config::HyperParams;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Binding, Component, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 4, d_model: 128, n_heads: 4, d_head: 32, d_ff: 256, vocab: 1024, max_seq_len: 1024 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Input(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Input("sinusoidal encoding needs an even d_model".into()));
        }
        Ok(())
    }
}

/// Width of the gate's input: key, value, age encoding, signature,
/// superseded flag, cumulative attention, context summary.
pub fn gate_feature_width(cfg: &ModelConfig, hp: &HyperParams) -> usize {
    3 * cfg.d_model + hp.signature_dim + 2 + cfg.d_model
}

/// Standard sinusoidal encoding with geometric frequencies (base 10000).
/// Even channels carry sines, odd channels cosines.
pub fn positional_encoding(position: usize, d_model: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; d_model];
    for i in 0..d_model / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
        let angle = position as f64 * freq;
        out[2 * i] = angle.sin() as f32;
        out[2 * i + 1] = angle.cos() as f32;
    }
    out
}

pub fn positional_table<S: Scalar>(positions: impl Iterator<Item = usize>, d_model: usize) -> Tensor<S> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in positions {
        data.extend(positional_encoding(p, d_model).into_iter().map(|x| S::from_f32(x).unwrap()));
        rows += 1;
    }
    Tensor::new(&[rows, d_model], data).expect("pe shape")
}

/// Initializes every component: N(0, 0.02) weights and embeddings, zero
/// biases, unit layernorm scales.
pub fn init_params(cfg: &ModelConfig, hp: &HyperParams, rng: &mut Rng) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
    let std = 0.02;
    let w = |p: &mut ParamStore<f32>, name: String, shape: &[usize], rng: &mut Rng| {
        p.insert(name, normal_tensor(shape, std, rng));
    };
    w(&mut p, "base.tok_emb".into(), &[v, d], rng);
    for l in 0..cfg.n_layers {
        let pre = format!("base.l{l}");
        p.insert(format!("{pre}.ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
        for m in ["q", "k", "v", "o"] {
            w(&mut p, format!("{pre}.attn.w{m}"), &[d, d], rng);
            p.insert(format!("{pre}.attn.b{m}"), Tensor::zeros(&[d]));
        }
        p.insert(format!("{pre}.ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
        w(&mut p, format!("{pre}.ff.w1"), &[d, f], rng);
        p.insert(format!("{pre}.ff.b1"), Tensor::zeros(&[f]));
        w(&mut p, format!("{pre}.ff.w2"), &[f, d], rng);
        p.insert(format!("{pre}.ff.b2"), Tensor::zeros(&[d]));
    }
    p.insert("base.lnf.g", Tensor::full(&[d], 1.0));
    p.insert("base.lnf.b", Tensor::zeros(&[d]));
    w(&mut p, "base.head.w".into(), &[d, v], rng);
    p.insert("base.head.b", Tensor::zeros(&[v]));

    let ds = hp.signature_dim;
    w(&mut p, "tagger.w".into(), &[2 * d, ds], rng);
    p.insert("tagger.b", Tensor::zeros(&[ds]));
    p.insert("tagger.ln.g", Tensor::full(&[ds], 1.0));
    p.insert("tagger.ln.b", Tensor::zeros(&[ds]));

    let (dg, dh) = (gate_feature_width(cfg, hp), hp.gate_hidden);
    w(&mut p, "gate.w1".into(), &[dg, dh], rng);
    p.insert("gate.b1", Tensor::zeros(&[dh]));
    w(&mut p, "gate.wr".into(), &[dh, 1], rng);
    p.insert("gate.br", Tensor::zeros(&[1]));
    w(&mut p, "action.w".into(), &[dh, 3], rng);
    p.insert("action.b", Tensor::zeros(&[3]));

    w(&mut p, "cons.wk".into(), &[d, d], rng);
    p.insert("cons.bk", Tensor::zeros(&[d]));
    w(&mut p, "cons.wv".into(), &[d, d], rng);
    p.insert("cons.bv", Tensor::zeros(&[d]));
    w(&mut p, "cons.q".into(), &[d], rng);
    p
}

/// Per-component parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub base: usize,
    pub tagger: usize,
    pub gate: usize,
    pub consolidation: usize,
    /// Hard-variant action head, reported separately and excluded from
    /// `total`.
    pub action_head: usize,
}

impl ParamCounts {
    pub fn of<S: Scalar>(p: &ParamStore<S>) -> Self {
        Self {
            base: p.count(Component::Base),
            tagger: p.count(Component::Tagger),
            gate: p.count(Component::Gate),
            consolidation: p.count(Component::Consolidation),
            action_head: p.count(Component::GateAction),
        }
    }

    pub fn total(&self) -> usize {
        self.base + self.tagger + self.gate + self.consolidation
    }

    pub fn overhead(&self) -> f64 {
        (self.total() - self.base) as f64 / self.base as f64
    }
}

/// Base-model parameter variables for one graph.
pub struct BaseVars {
    tok_emb: Var,
    layers: Vec<LayerVars>,
    lnf: (Var, Var),
    head: (Var, Var),
}

struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

impl BaseVars {
    pub fn from_binding(b: &Binding, cfg: &ModelConfig) -> Self {
        let pair = |w: &str, bias: &str| (b.var(w), b.var(bias));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("base.l{l}.{s}");
                LayerVars {
                    ln1: pair(&n("ln1.g"), &n("ln1.b")),
                    q: pair(&n("attn.wq"), &n("attn.bq")),
                    k: pair(&n("attn.wk"), &n("attn.bk")),
                    v: pair(&n("attn.wv"), &n("attn.bv")),
                    o: pair(&n("attn.wo"), &n("attn.bo")),
                    ln2: pair(&n("ln2.g"), &n("ln2.b")),
                    ff1: pair(&n("ff.w1"), &n("ff.b1")),
                    ff2: pair(&n("ff.w2"), &n("ff.b2")),
                }
            })
            .collect();
        Self {
            tok_emb: b.var("base.tok_emb"),
            layers,
            lnf: pair("base.lnf.g", "base.lnf.b"),
            head: pair("base.head.w", "base.head.b"),
        }
    }
}

pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, (w, b): (Var, Var)) -> TResult<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// How attention is shaped for one forward pass. Masks and scales are
/// `[T×T]` (query × key); the bias is one value per key position and is
/// shared by every layer and head.
#[derive(Clone, Debug)]
pub struct AttentionPlan<S> {
    pub bias: Option<Var>,
    pub allowed: Option<Vec<bool>>,
    pub logit_scale: Option<Vec<S>>,
    /// Heavy-hitter retention `(heavy, recent)`. The visibility mask is built
    /// from layer-0 attention as the sequence is consumed, then applied at
    /// every layer.
    pub heavy_hitter: Option<(usize, usize)>,
}

impl<S> Default for AttentionPlan<S> {
    fn default() -> Self {
        Self { bias: None, allowed: None, logit_scale: None, heavy_hitter: None }
    }
}

pub struct ForwardOutput {
    /// `[T × vocab]`, absent when only the designated layer was run.
    pub logits: Option<Var>,
    /// Designated-layer (layer 0) keys and values, heads concatenated.
    pub keys0: Var,
    pub values0: Var,
    /// Attention nodes per executed layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
    /// The visibility mask actually used, when one was in effect.
    pub allowed: Option<Vec<bool>>,
}

/// Runs the model over `tokens` with teacher forcing.
///
/// With `layer0_only`, stops after the first block's attention, which is
/// all the cache metadata needs.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &BaseVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    plan: &AttentionPlan<S>,
    layer0_only: bool,
) -> Result<ForwardOutput> {
    let t = tokens.len();
    if t == 0 || t > cfg.max_seq_len {
        return Err(Error::Input(format!("sequence length {t} outside 1..={}", cfg.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&x| x >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    let emb = g.embedding(vars.tok_emb, tokens)?;
    let pe = g.constant(positional_table(0..t, cfg.d_model))?;
    let mut x = g.add(emb, pe)?;

    let mut allowed = plan.allowed.clone();
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut layer0 = None;
    for (l, lv) in vars.layers.iter().enumerate() {
        let h = g.layernorm(x, lv.ln1.0, lv.ln1.1)?;
        let q = linear(g, h, lv.q)?;
        let k = linear(g, h, lv.k)?;
        let v = linear(g, h, lv.v)?;
        if l == 0 {
            if let Some((heavy, recent)) = plan.heavy_hitter {
                let mask = crate::policy::heavy_hitter_mask(
                    g.value(q).data(),
                    g.value(k).data(),
                    t,
                    cfg.n_heads,
                    heavy,
                    recent,
                    plan.logit_scale.as_deref(),
                    plan.bias.map(|b| g.value(b).data()),
                    allowed.as_deref(),
                );
                allowed = Some(mask);
            }
            layer0 = Some((k, v));
        }
        let spec = AttentionSpec {
            bias: plan.bias,
            allowed: allowed.as_deref(),
            logit_scale: plan.logit_scale.as_deref(),
        };
        let a = g.attention(q, k, v, cfg.n_heads, &spec)?;
        attention.push(a);
        if layer0_only {
            break;
        }
        let o = linear(g, a, lv.o)?;
        x = g.add(x, o)?;
        let h2 = g.layernorm(x, lv.ln2.0, lv.ln2.1)?;
        let f = linear(g, h2, lv.ff1)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, lv.ff2)?;
        x = g.add(x, f)?;
    }
    let (keys0, values0) = layer0.expect("at least one layer");
    let logits = if layer0_only {
        None
    } else {
        let h = g.layernorm(x, vars.lnf.0, vars.lnf.1)?;
        Some(linear(g, h, vars.head)?)
    };
    Ok(ForwardOutput { logits, keys0, values0, attention, allowed })
}

/// Mean-over-heads attention that each key received from query `row` at the
/// given attention node.
pub fn head_mean_row<S: Scalar>(g: &Graph<S>, attn: Var, heads: usize, t: usize, row: usize) -> Vec<f64> {
    let probs = g.attention_probs(attn).expect("attention node");
    let mut out = vec![0.0; t];
    for h in 0..heads {
        let r = &probs[(h * t + row) * t..(h * t + row) * t + t];
        for (o, p) in out.iter_mut().zip(r) {
            *o += p.to_f64().unwrap() / heads as f64;
        }
    }
    out
}

/// Cumulative mean-over-heads attention received by each key over all
/// queries `0..=upto`.
pub fn cumulative_attention<S: Scalar>(g: &Graph<S>, attn: Var, heads: usize, t: usize, upto: usize) -> Vec<f64> {
    let mut cum = vec![0.0; t];
    for row in 0..=upto.min(t - 1) {
        for (c, w) in cum.iter_mut().zip(head_mean_row(g, attn, heads, t, row)) {
            *c += w;
        }
    }
    cum
}
