use proptest::prelude::*;
use sleepgate::data::VOCAB;
use sleepgate::model::{forward, head_mean_row, init_params, AttentionPlan, BaseVars, ModelConfig};
use sleepgate::rng::stream;
use sleepgate::{Component, HyperParams, ParamStore};
use sleepgate_tensor::{Graph, Tensor};

fn small() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_head: 8, d_ff: 32, vocab: VOCAB, max_seq_len: 64 }
}

fn params(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
    let mut p = init_params(cfg, &HyperParams::default(), &mut stream(seed, "model-props", 0));
    for i in 0..p.len() {
        if p.tensor(i).shape().len() == 2 {
            for x in p.tensor_mut(i).data_mut() {
                *x *= 10.0;
            }
        }
    }
    p
}

/// Logits and per-layer head-mean attention rows under an optional bias.
fn run(p: &ParamStore<f32>, cfg: &ModelConfig, tokens: &[usize], bias: Option<Vec<f32>>) -> (Vec<Vec<f32>>, Vec<Vec<Vec<f64>>>) {
    let mut g = Graph::<f32>::new();
    let b = p.bind(&mut g, &[Component::Base], &[]).unwrap();
    let base = BaseVars::from_binding(&b, cfg);
    let t = tokens.len();
    let plan = AttentionPlan {
        bias: bias.map(|v| g.constant(Tensor::new(&[t], v).unwrap()).unwrap()),
        ..AttentionPlan::default()
    };
    let out = forward(&mut g, &base, cfg, tokens, &plan, false).unwrap();
    let l = g.value(out.logits.unwrap());
    let logits = (0..t).map(|i| l.row(i).to_vec()).collect();
    let attn = out
        .attention
        .iter()
        .map(|&a| (0..t).map(|row| head_mean_row(&g, a, cfg.n_heads, t, row)).collect())
        .collect();
    (logits, attn)
}

fn tokens_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..VOCAB, 2..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn future_tokens_do_not_change_past_logits(tokens in tokens_strategy(), cut in 0usize..22, seed in 0u64..4, fresh in 0usize..VOCAB) {
        let cfg = small();
        let p = params(&cfg, seed);
        let cut = cut % (tokens.len() - 1);
        let mut mutated = tokens.clone();
        for (i, t) in mutated.iter_mut().enumerate().skip(cut + 1) {
            *t = (fresh + i * 31) % VOCAB;
        }
        let (a, _) = run(&p, &cfg, &tokens, None);
        let (b, _) = run(&p, &cfg, &mutated, None);
        for t in 0..=cut {
            prop_assert_eq!(&a[t], &b[t], "position {} changed", t);
        }
    }

    #[test]
    fn attention_rows_are_distributions(tokens in tokens_strategy(), seed in 0u64..4) {
        let cfg = small();
        let (_, attn) = run(&params(&cfg, seed), &cfg, &tokens, None);
        for layer in attn {
            for (q, row) in layer.iter().enumerate() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                prop_assert!(row[q + 1..].iter().all(|&w| w == 0.0));
            }
        }
    }

    #[test]
    fn raising_one_bias_raises_its_first_layer_weight(tokens in tokens_strategy(), key in 0usize..24, bump in 0.01f32..3.0, seed in 0u64..4) {
        let cfg = small();
        let p = params(&cfg, seed);
        let t = tokens.len();
        let key = key % t;
        let base: Vec<f32> = (0..t).map(|i| -0.3 * (i % 3) as f32).collect();
        let mut raised = base.clone();
        raised[key] += bump;
        let (_, a) = run(&p, &cfg, &tokens, Some(base));
        let (_, b) = run(&p, &cfg, &tokens, Some(raised));
        // Layer 0 sees identical logits apart from the bias.
        for q in key..t {
            prop_assert!(b[0][q][key] >= a[0][q][key] - 1e-7, "query {} key {}", q, key);
        }
    }

    #[test]
    fn uniform_bias_shift_changes_nothing(tokens in tokens_strategy(), shift in -8.0f32..8.0, seed in 0u64..4) {
        let cfg = small();
        let p = params(&cfg, seed);
        let t = tokens.len();
        let base: Vec<f32> = (0..t).map(|i| -0.5 * (i % 4) as f32).collect();
        let shifted: Vec<f32> = base.iter().map(|b| b + shift).collect();
        let (la, a) = run(&p, &cfg, &tokens, Some(base));
        let (lb, b) = run(&p, &cfg, &tokens, Some(shifted));
        for (x, y) in a.iter().flatten().flatten().zip(b.iter().flatten().flatten()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        for (x, y) in la.iter().flatten().zip(lb.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-3);
        }
    }
}

#[test]
fn zero_bias_is_bitwise_identical_to_no_bias() {
    let cfg = ModelConfig::default();
    let p = init_params(&cfg, &HyperParams::default(), &mut stream(0, "init", 0));
    let tokens: Vec<usize> = (0..40).map(|i| (i * 97 + 13) % VOCAB).collect();
    let (a, aa) = run(&p, &cfg, &tokens, None);
    let (b, bb) = run(&p, &cfg, &tokens, Some(vec![0.0; tokens.len()]));
    let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(aa, bb);
}
