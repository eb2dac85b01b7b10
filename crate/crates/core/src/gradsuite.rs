//! Central-difference checks for every differentiable kernel and for the
//! composed gate, bias, attention and loss path, all in f64.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepgate_tensor::{gradcheck, AttentionSpec, Graph, GradcheckReport, Result as TResult, Tensor, Var};

use crate::config::HyperParams;
use crate::data::{Episode, EpisodeKind};
use crate::error::Result;
use crate::model::{cumulative_attention, forward, init_params, AttentionPlan, BaseVars, ModelConfig};
use crate::params::{Binding, Component, ParamStore};
use crate::rng::stream;
use crate::scheduler::{soft_cycle, Relaxation, SleepVars};
use crate::system::sleep_plan;
use crate::training::{align_loss, compress_loss, sleep_loss, total_loss, wake_loss};

pub const TOLERANCE: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).expect("shape")
}

/// Fixed random projection of any output onto a scalar.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape, 1.0))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> TResult<Var>>;

fn kernel_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (3, 4, 5);
    let mut t = |shape: &[usize]| rand_tensor(&mut r, shape, 1.0);
    let a = t(&[m, k]);
    let b = t(&[k, n]);
    let c = t(&[m, k]);
    let row = t(&[k]);
    let gamma = t(&[k]);
    let beta = t(&[k]);
    let x = t(&[6, 8]);
    let bias8 = t(&[4]);
    let logits = t(&[4, 7]);
    let table = t(&[9, 3]);
    let pos: Vec<f64> = (0..m * k).map(|i| 0.3 + 0.1 * i as f64).collect();
    let pos = Tensor::new(&[m, k], pos).expect("shape");
    let s = seed;
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul", vec![a.clone(), b], Box::new(move |g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o, s)
        })),
        ("add sub mul", vec![a.clone(), c.clone()], Box::new(move |g, v| {
            let p = g.add(v[0], v[1])?;
            let q = g.sub(p, v[1])?;
            let o = g.mul(q, v[1])?;
            project(g, o, s)
        })),
        ("add_row scale add_scalar", vec![a.clone(), row], Box::new(move |g, v| {
            let o = g.add_row(v[0], v[1])?;
            let o = g.scale(o, 0.7)?;
            let o = g.add_scalar(o, 0.2)?;
            project(g, o, s)
        })),
        ("gelu", vec![a.clone()], Box::new(move |g, v| {
            let o = g.gelu(v[0])?;
            project(g, o, s)
        })),
        ("sigmoid", vec![a.clone()], Box::new(move |g, v| {
            let o = g.sigmoid(v[0])?;
            project(g, o, s)
        })),
        ("exp log", vec![pos], Box::new(move |g, v| {
            let e = g.exp(v[0])?;
            let l = g.log(v[0])?;
            let o = g.add(e, l)?;
            project(g, o, s)
        })),
        ("clamp interior", vec![a.clone()], Box::new(move |g, v| {
            let o = g.clamp(v[0], -5.0, 5.0)?;
            project(g, o, s)
        })),
        ("mean reshape", vec![a.clone()], Box::new(move |g, v| {
            let o = g.reshape(v[0], &[2, 6])?;
            let p = project(g, o, s)?;
            let m = g.mean(v[0])?;
            g.add(p, m)
        })),
        ("concat slice gather repeat mean_rows", vec![a.clone(), c], Box::new(move |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]])?;
            let sl = g.slice_rows(cat, 1, 3)?;
            let ga = g.gather_rows(cat, &[2, 0, 2])?;
            let mr = g.mean_rows(ga)?;
            let rep = g.repeat_rows(mr, 2)?;
            let o = g.add(sl, rep)?;
            project(g, o, s)
        })),
        ("embedding", vec![table], Box::new(move |g, v| {
            let o = g.embedding(v[0], &[3, 0, 3, 8])?;
            project(g, o, s)
        })),
        ("layernorm", vec![a, gamma, beta], Box::new(move |g, v| {
            let o = g.layernorm(v[0], v[1], v[2])?;
            project(g, o, s)
        })),
        ("softmax_with_bias", vec![logits.clone(), t_clone(&Tensor::zeros(&[7]), 7)], Box::new(move |g, v| {
            let o = g.softmax_with_bias(v[0], Some(v[1]))?;
            project(g, o, s)
        })),
        ("cross_entropy", vec![logits], Box::new(move |g, v| {
            g.cross_entropy(v[0], &[1, 6, 0, 3], &[true, false, true, true])
        })),
    ];
    let qkv = || x.clone();
    let scale: Vec<f64> = (0..36).map(|i| 1.0 + 0.01 * (i % 5) as f64).collect();
    let mut allowed = vec![true; 36];
    allowed[3 * 6 + 1] = false;
    allowed[5 * 6 + 2] = false;
    cases.push(("attention bias mask scale", vec![qkv(), t_clone(&x, 1), t_clone(&x, 2), pad_bias(&bias8)], Box::new(
        move |g, v| {
            let spec = AttentionSpec { bias: Some(v[3]), allowed: Some(&allowed), logit_scale: Some(&scale) };
            let o = g.attention(v[0], v[1], v[2], 2, &spec)?;
            project(g, o, s)
        },
    )));
    cases
}

/// Deterministic perturbation of a tensor to get a distinct input of the
/// same shape.
fn t_clone(t: &Tensor<f64>, salt: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(salt);
    rand_tensor(&mut r, t.shape(), 1.0)
}

fn pad_bias(b: &Tensor<f64>) -> Tensor<f64> {
    let mut data = b.data().to_vec();
    data.extend_from_slice(&[0.1, -0.4]);
    Tensor::new(&[6], data).expect("shape")
}

/// A model small enough to finite-difference every parameter.
pub fn tiny_setup() -> (ModelConfig, HyperParams) {
    let cfg = ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_head: 4, d_ff: 16, vocab: 256, max_seq_len: 64 };
    let hp = HyperParams { gate_hidden: 6, signature_dim: 4, context_window: 3, ..HyperParams::default() };
    (cfg, hp)
}

fn tiny_episode() -> Episode {
    Episode::from_tokens(EpisodeKind::Pi, 3, vec![1, 2, 10, 200, 2, 10, 201, 2, 10, 202, 3, 10]).expect("episode")
}

/// Matrices scaled up from the usual init so gradients are not tiny.
fn tiny_params(cfg: &ModelConfig, hp: &HyperParams, seed: u64) -> ParamStore<f64> {
    let mut p = init_params(cfg, hp, &mut stream(seed, "gradsuite", 0)).cast::<f64>();
    for i in 0..p.len() {
        let t = p.tensor_mut(i);
        if t.shape().len() == 2 {
            for x in t.data_mut() {
                *x *= 5.0;
            }
        }
    }
    p
}

/// Which losses the composed path sums.
#[derive(Clone, Copy)]
enum Path {
    Wake,
    GateBias,
    EndToEnd,
}

fn composed_case(path: Path, seed: u64) -> Result<GradcheckReport> {
    let (cfg, hp) = tiny_setup();
    let store = tiny_params(&cfg, &hp, seed);
    let comps: &[Component] = match path {
        Path::Wake => &[Component::Base],
        _ => &[Component::Base, Component::Tagger, Component::Gate],
    };
    let picked: Vec<(String, usize)> = store
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| Component::of(n).is_some_and(|c| comps.contains(&c)))
        .map(|(i, (n, _))| (n.to_string(), i))
        .collect();
    let inputs: Vec<Tensor<f64>> = picked.iter().map(|(_, i)| store.tensor(*i).clone()).collect();
    let ep = tiny_episode();
    let t_len = ep.len();

    // Cumulative attention is metadata computed once from the unperturbed
    // model and held fixed, as in training.
    let cum = {
        let mut g = Graph::<f64>::new();
        let b = store.bind(&mut g, &[Component::Base], &[])?;
        let base = BaseVars::from_binding(&b, &cfg);
        let out = forward(&mut g, &base, &cfg, &ep.tokens, &AttentionPlan::default(), false)?;
        cumulative_attention(&g, out.attention[0], cfg.n_heads, t_len, t_len - 1)
    };
    let noise: Vec<f64> = (0..t_len).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
    let name = match path {
        Path::Wake => "base forward + wake loss",
        Path::GateBias => "gate + bias + attention + sleep loss",
        Path::EndToEnd => "end-to-end total loss, relaxed gate",
    };
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> TResult<Var> {
        let b = Binding::from_vars(picked.iter().zip(vars).map(|((n, i), &v)| (n.clone(), *i, v)));
        let base = BaseVars::from_binding(&b, &cfg);
        let plain = forward(g, &base, &cfg, &ep.tokens, &AttentionPlan::default(), false).map_err(tensor_err)?;
        let (targets, mask) = ep.wake_targets();
        let wake = wake_loss(g, plain.logits.expect("logits"), &targets, &mask)?;
        if let Path::Wake = path {
            return Ok(wake);
        }
        let sv = SleepVars::from_binding(&b);
        let positions: Vec<usize> = (0..t_len).collect();
        let relax = match path {
            Path::EndToEnd => Some(Relaxation { noise: &noise, temperature: 0.7 }),
            _ => None,
        };
        let cycle =
            soft_cycle(g, &sv, &cfg, &hp, plain.keys0, plain.values0, &positions, &cum, t_len - 1, None, relax)?;
        let plan = sleep_plan(cycle.bias, t_len, &hp);
        let biased = forward(g, &base, &cfg, &ep.tokens, &plan, false).map_err(tensor_err)?;
        let (at, am) = ep.answer_targets();
        let sl = sleep_loss(g, biased.logits.expect("logits"), &at, &am)?;
        match path {
            Path::GateBias => Ok(sl),
            _ => {
                let comp = compress_loss(g, cycle.retention)?;
                let al = align_loss(g, cycle.retention, &cycle.flags, hp.align_clamp)?;
                total_loss(g, [wake, sl, comp, al], &hp)
            }
        }
    };
    Ok(gradcheck(name, build, &inputs, TOLERANCE)?)
}

fn tensor_err(e: crate::error::Error) -> sleepgate_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => sleepgate_tensor::TensorError::Shape { op: "model", detail: other.to_string() },
    }
}

/// Runs every check. Kernel checks use several seeds each.
pub fn run_suite(seeds: u64) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for (name, inputs, build) in kernel_cases(seed) {
            let mut r = gradcheck(name, |g, v| build(g, v), &inputs, TOLERANCE)?;
            r.name = format!("{name} (seed {seed})");
            out.push(r);
        }
    }
    for path in [Path::Wake, Path::GateBias, Path::EndToEnd] {
        out.push(composed_case(path, 0)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_passes() {
        for seed in 0..2 {
            for (name, inputs, build) in kernel_cases(seed) {
                let r = gradcheck(name, |g, v| build(g, v), &inputs, TOLERANCE)
                    .unwrap_or_else(|e| panic!("{name}: {e}"));
                assert!(r.passed, "{r}");
            }
        }
    }

    #[test]
    fn composed_paths_pass() {
        for path in [Path::Wake, Path::GateBias, Path::EndToEnd] {
            let r = composed_case(path, 0).unwrap();
            assert!(r.passed, "{r} {:?}", r.per_input);
        }
    }
}
