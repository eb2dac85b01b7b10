//! Token-by-token decoding with explicit per-layer key/value caches.
//!
//! Baseline policies evict entries physically here, which makes this the
//! reference the masked teacher-forced pass is checked against. The gated
//! model runs the streaming loop: metadata upkeep at every step, adaptive
//! sleep triggers, and soft or hard cycles applied to the live cache.

use sleepgate_tensor::{Graph, Scalar, Tensor};

use crate::cache::{accumulate_attention, key_decay, signatures, AugmentedCache, TaggerVars};
use crate::config::HyperParams;
use crate::consolidation::Origin;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::{positional_encoding, ModelConfig};
use crate::params::{Component, ParamStore};
use crate::policy::{decay_factor, retained_set, CachePolicy, HeavyHitterTracker};
use crate::scheduler::{
    attention_entropy, conflict_density, run_sleep_cycle, SleepMode, SleepResult, TriggerReason, TriggerState,
};
use crate::system::argmax;

struct Linear<'a> {
    w: &'a Tensor<f32>,
    b: &'a Tensor<f32>,
}

impl Linear<'_> {
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        let n = self.w.cols();
        let mut out = self.b.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(&self.w.data()[i * n..(i + 1) * n]) {
                *o += xi * w;
            }
        }
        out
    }
}

fn layernorm(x: &[f32], g: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    let rs = 1.0 / (var + sleepgate_tensor::LAYERNORM_EPS).sqrt();
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(&v, (&g, &b))| ((v as f64 - mean) * rs) as f32 * g + b)
        .collect()
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + <f64 as Scalar>::erf(x / std::f64::consts::SQRT_2))) as f32
}

struct LayerWeights<'a> {
    ln1: (&'a Tensor<f32>, &'a Tensor<f32>),
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
    ln2: (&'a Tensor<f32>, &'a Tensor<f32>),
    ff1: Linear<'a>,
    ff2: Linear<'a>,
}

#[derive(Clone, Debug, Default)]
struct LayerKv {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

/// Output of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Designated-layer attention of the new query, `[heads][entries]`.
    pub attention0: Vec<Vec<f64>>,
    pub evicted: Vec<usize>,
}

pub struct Decoder<'a> {
    cfg: ModelConfig,
    emb: &'a Tensor<f32>,
    layers: Vec<LayerWeights<'a>>,
    lnf: (&'a Tensor<f32>, &'a Tensor<f32>),
    head: Linear<'a>,
    kv: Vec<LayerKv>,
    positions: Vec<usize>,
    bias: Vec<f32>,
    key_scale: Vec<f32>,
    policy: CachePolicy,
    tracker: Option<HeavyHitterTracker>,
    step: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ParamStore<f32>, cfg: &ModelConfig, policy: CachePolicy) -> Self {
        let lin = |w: String, b: String| Linear { w: params.expect(&w), b: params.expect(&b) };
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("base.l{l}.{s}");
                LayerWeights {
                    ln1: (params.expect(&n("ln1.g")), params.expect(&n("ln1.b"))),
                    q: lin(n("attn.wq"), n("attn.bq")),
                    k: lin(n("attn.wk"), n("attn.bk")),
                    v: lin(n("attn.wv"), n("attn.bv")),
                    o: lin(n("attn.wo"), n("attn.bo")),
                    ln2: (params.expect(&n("ln2.g")), params.expect(&n("ln2.b"))),
                    ff1: lin(n("ff.w1"), n("ff.b1")),
                    ff2: lin(n("ff.w2"), n("ff.b2")),
                }
            })
            .collect();
        let tracker = match policy {
            CachePolicy::HeavyHitter { heavy, recent } => Some(HeavyHitterTracker::new(heavy, recent)),
            _ => None,
        };
        Self {
            cfg: *cfg,
            emb: params.expect("base.tok_emb"),
            layers,
            lnf: (params.expect("base.lnf.g"), params.expect("base.lnf.b")),
            head: lin("base.head.w".into(), "base.head.b".into()),
            kv: vec![LayerKv::default(); cfg.n_layers],
            positions: Vec::new(),
            bias: Vec::new(),
            key_scale: Vec::new(),
            policy,
            tracker,
            step: 0,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Designated-layer keys and values of the live cache.
    pub fn layer0(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.kv[0].keys, &self.kv[0].values)
    }

    /// Replaces the per-entry additive bias and logit scale.
    pub fn set_modifiers(&mut self, bias: Vec<f32>, key_scale: Vec<f32>) {
        assert_eq!(bias.len(), self.len());
        assert_eq!(key_scale.len(), self.len());
        self.bias = bias;
        self.key_scale = key_scale;
    }

    fn retain(&mut self, keep: &[usize]) -> Vec<usize> {
        let mut evicted = Vec::new();
        let mut idx = Vec::new();
        for (i, p) in self.positions.iter().enumerate() {
            if keep.binary_search(p).is_ok() {
                idx.push(i);
            } else {
                evicted.push(*p);
            }
        }
        if evicted.is_empty() {
            return evicted;
        }
        let pick = |v: &Vec<Vec<f32>>| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        for kv in &mut self.kv {
            kv.keys = pick(&kv.keys);
            kv.values = pick(&kv.values);
        }
        self.positions = idx.iter().map(|&i| self.positions[i]).collect();
        self.bias = idx.iter().map(|&i| self.bias[i]).collect();
        self.key_scale = idx.iter().map(|&i| self.key_scale[i]).collect();
        evicted
    }

    /// Consumes the next token.
    pub fn step(&mut self, token: usize) -> Result<StepOutput> {
        let p = self.step;
        if p >= self.cfg.max_seq_len {
            return Err(Error::Input(format!("sequence exceeds {}", self.cfg.max_seq_len)));
        }
        if token >= self.cfg.vocab {
            return Err(Error::Input(format!("token id {token} >= vocab {}", self.cfg.vocab)));
        }
        self.step += 1;
        self.positions.push(p);
        self.bias.push(0.0);
        self.key_scale.push(1.0);
        for kv in &mut self.kv {
            kv.keys.push(Vec::new());
            kv.values.push(Vec::new());
        }
        let evicted = match (&self.policy, &mut self.tracker) {
            (CachePolicy::HeavyHitter { .. }, Some(tr)) => {
                let out = tr.admit(p);
                let keep = tr.members().to_vec();
                self.retain(&keep);
                out
            }
            (CachePolicy::SlidingWindow { .. } | CachePolicy::Streaming { .. }, _) => {
                let keep = retained_set(&self.policy, &self.positions, &vec![0.0; self.positions.len()]);
                self.retain(&keep)
            }
            _ => Vec::new(),
        };
        if let CachePolicy::DecayOnly { rate } = self.policy {
            self.key_scale = self.positions.iter().map(|&q| decay_factor(p - q, rate) as f32).collect();
        }

        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let pe = positional_encoding(p, d);
        let mut x: Vec<f32> = self.emb.row(token).iter().zip(&pe).map(|(a, b)| a + b).collect();
        let mut attention0 = Vec::new();
        let last = self.positions.len() - 1;
        for (l, lw) in self.layers.iter().enumerate() {
            let h = layernorm(&x, lw.ln1.0, lw.ln1.1);
            let q = lw.q.apply(&h);
            self.kv[l].keys[last] = lw.k.apply(&h);
            self.kv[l].values[last] = lw.v.apply(&h);
            let kv = &self.kv[l];
            let mut att = vec![0.0f32; d];
            for hd in 0..heads {
                let off = hd * dh;
                let mut logits: Vec<f64> = kv
                    .keys
                    .iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let s: f64 = (0..dh).map(|c| q[off + c] as f64 * k[off + c] as f64).sum::<f64>() * inv;
                        s * self.key_scale[j] as f64 + self.bias[j] as f64
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in logits.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in logits.iter_mut() {
                    *v /= z;
                }
                for (w, val) in logits.iter().zip(&kv.values) {
                    for c in 0..dh {
                        att[off + c] += (*w * val[off + c] as f64) as f32;
                    }
                }
                if l == 0 {
                    attention0.push(logits);
                }
            }
            let o = lw.o.apply(&att);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = layernorm(&x, lw.ln2.0, lw.ln2.1);
            let f: Vec<f32> = lw.ff1.apply(&h2).into_iter().map(gelu).collect();
            let f = lw.ff2.apply(&f);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        if let Some(tr) = &mut self.tracker {
            let m = tr.members().len();
            let mut w = vec![0.0; m];
            for row in &attention0 {
                for (a, b) in w.iter_mut().zip(row) {
                    *a += b / heads as f64;
                }
            }
            tr.accumulate(&w);
        }
        let h = layernorm(&x, self.lnf.0, self.lnf.1);
        let logits = self.head.apply(&h);
        Ok(StepOutput { logits, attention0, evicted })
    }

    /// Rewrites the cache after a hard sleep cycle.
    fn apply_hard(&mut self, aug: &AugmentedCache, origins: &[Origin]) {
        let mut kv = vec![LayerKv::default(); self.cfg.n_layers];
        for (e, origin) in aug.entries.iter().zip(origins) {
            for (l, layer) in kv.iter_mut().enumerate() {
                let (k, v) = match origin {
                    Origin::Kept(i) => (self.kv[l].keys[*i].clone(), self.kv[l].values[*i].clone()),
                    Origin::Merged { .. } if l == 0 => (e.key.clone(), e.value.clone()),
                    Origin::Merged { members, alpha, key_weights } => {
                        let d = self.cfg.d_model;
                        let mut k = vec![0.0f32; d];
                        let mut v = vec![0.0f32; d];
                        for ((&m, &a), &w) in members.iter().zip(alpha).zip(key_weights) {
                            for c in 0..d {
                                k[c] += (w * self.kv[l].keys[m][c] as f64) as f32;
                                v[c] += (a * self.kv[l].values[m][c] as f64) as f32;
                            }
                        }
                        (k, v)
                    }
                };
                layer.keys.push(k);
                layer.values.push(v);
            }
        }
        self.kv = kv;
        self.positions = aug.positions();
        self.bias = vec![0.0; self.positions.len()];
        self.key_scale = vec![1.0; self.positions.len()];
    }
}

/// Teacher-forced logits via the incremental decoder, one row per token.
pub fn decode_logits(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    policy: CachePolicy,
    tokens: &[usize],
) -> Result<Vec<Vec<f32>>> {
    let mut dec = Decoder::new(params, cfg, policy);
    tokens.iter().map(|&t| dec.step(t).map(|o| o.logits)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerEvent {
    pub step: usize,
    pub reason: TriggerReason,
    pub entropy: f64,
    pub density: f64,
    pub cache_size: usize,
    /// Mean retention over flagged and unflagged entries.
    pub mean_r_flagged: Option<f64>,
    pub mean_r_unflagged: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StreamReport {
    pub events: Vec<TriggerEvent>,
    /// Predictions at each query's answer position.
    pub predictions: Vec<usize>,
    pub final_cache_size: usize,
}

/// The literal streaming loop for the gated model: decode a token, update
/// metadata, evaluate the triggers and run a sleep cycle when one fires.
pub fn stream_episode(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    hp: &HyperParams,
    ep: &Episode,
    mode: SleepMode,
) -> Result<StreamReport> {
    let mut dec = Decoder::new(params, cfg, CachePolicy::Full);
    let mut aug = AugmentedCache::default();
    let mut trigger = TriggerState::new(hp);
    let mut events = Vec::new();
    let mut predictions = Vec::new();
    let answer_at: Vec<usize> = ep.queries.iter().map(|q| q.position).collect();
    for (t, &tok) in ep.tokens.iter().enumerate() {
        let out = dec.step(tok)?;
        let (k0, v0) = dec.layer0();
        aug.push(t, k0.last().unwrap().clone(), v0.last().unwrap().clone());
        let mut cum = aug.cum_attention();
        accumulate_attention(&mut cum, &out.attention0);
        for (e, c) in aug.entries.iter_mut().zip(cum) {
            e.cum_attention = c;
        }
        refresh_signatures(&mut aug, params, hp)?;
        let entropy = attention_entropy(&out.attention0);
        let density = conflict_density(&aug.flags());
        let fired = trigger.should_trigger(entropy, density, t);
        trigger.observe(entropy);
        if answer_at.contains(&t) {
            predictions.push(argmax(&out.logits));
        }
        let Some(reason) = fired else { continue };
        trigger.last_trigger = Some(t);
        let result = run_sleep_cycle(&mut aug, params, cfg, hp, t, mode)?;
        let (retention, flags) = match result {
            SleepResult::Soft { retention, bias } => {
                let scale = key_decay(&aug.positions(), t, hp.decay_rate).into_iter().map(|f| f as f32).collect();
                dec.set_modifiers(bias, scale);
                let flags = aug.flags();
                (retention, flags)
            }
            SleepResult::Hard { retention, outcome, .. } => {
                let flags = aug.flags();
                dec.apply_hard(&outcome.cache, &outcome.origins);
                aug = outcome.cache;
                let scale = key_decay(&aug.positions(), t, hp.decay_rate).into_iter().map(|f| f as f32).collect();
                dec.set_modifiers(vec![0.0; aug.len()], scale);
                (retention, flags)
            }
        };
        let mean = |want: bool| {
            let v: Vec<f64> = retention.iter().zip(&flags).filter(|(_, &f)| f == want).map(|(r, _)| *r).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        events.push(TriggerEvent {
            step: t,
            reason,
            entropy,
            density,
            cache_size: flags.len(),
            mean_r_flagged: mean(true),
            mean_r_unflagged: mean(false),
        });
    }
    Ok(StreamReport { events, predictions, final_cache_size: aug.len() })
}

fn refresh_signatures(aug: &mut AugmentedCache, params: &ParamStore<f32>, hp: &HyperParams) -> Result<()> {
    let m = aug.len();
    let d = aug.entries[0].key.len();
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, &[Component::Tagger], &[])?;
    let tv = TaggerVars::from_binding(&b);
    let keys: Vec<f32> = aug.entries.iter().flat_map(|e| e.key.iter().copied()).collect();
    let keys = g.constant(Tensor::new(&[m, d], keys)?)?;
    let s = signatures(&mut g, &tv, keys, hp.pool_window)?;
    let sd = g.value(s).cols();
    for (i, e) in aug.entries.iter_mut().enumerate() {
        e.signature = g.value(s).data()[i * sd..(i + 1) * sd].to_vec();
    }
    aug.refresh_flags(hp.conflict_threshold);
    Ok(())
}
