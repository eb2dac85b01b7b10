use sleepgate_tensor::{AttentionSpec, Graph, Tensor, TensorError};

fn mat(rows: &[&[f32]]) -> Tensor<f32> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let b = g.constant(mat(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
    let i2 = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
    let z = g.constant(Tensor::zeros(&[2, 2])).unwrap();

    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.value(ia).data(), g.value(a).data());
    let za = g.matmul(z, a).unwrap();
    assert!(g.value(za).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn softmax_with_bias_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2], vec![0.3, 0.3]).unwrap()).unwrap();
    let p = g.softmax_with_bias(x, None).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::new(&[2], vec![0.0, -(2f64.ln())]).unwrap()).unwrap();
    let p = g.softmax_with_bias(x, Some(b)).unwrap();
    assert!((g.value(p).data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((g.value(p).data()[1] - 1.0 / 3.0).abs() < 1e-12);

    // Retention 0.01 at scale 5 against a peer with no bias.
    let bias = 5.0 * 0.01f64.ln();
    assert!((bias + 23.026).abs() < 1e-3);
    let b = g.constant(Tensor::new(&[2], vec![0.0, bias]).unwrap()).unwrap();
    let p = g.softmax_with_bias(x, Some(b)).unwrap();
    assert!(g.value(p).data()[1] < 1e-9);
}

#[test]
fn zero_bias_reproduces_plain_softmax_bitwise() {
    let mut g = Graph::<f32>::new();
    let data: Vec<f32> = (0..24).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.7).collect();
    let x = g.constant(Tensor::new(&[4, 6], data).unwrap()).unwrap();
    let zero = g.constant(Tensor::zeros(&[6])).unwrap();
    let plain = g.softmax_with_bias(x, None).unwrap();
    let biased = g.softmax_with_bias(x, Some(zero)).unwrap();
    let (a, b) = (g.value(plain).data(), g.value(biased).data());
    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    for row in a.chunks(6) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap()).unwrap();
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    let ge = g.gelu(x).unwrap();
    // 0.5 * (1 + erf(1/sqrt 2))
    assert!((g.value(ge).data()[1] - 0.841_344_746).abs() < 1e-8);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
    assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
}

#[test]
fn non_finite_output_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[1], vec![1000.0]).unwrap()).unwrap();
    assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    assert!(g.leaf(Tensor::new(&[1], vec![f32::NAN]).unwrap(), true).is_err());
}

#[test]
fn layernorm_normalizes_rows() {
    let mut g = Graph::<f32>::new();
    let data: Vec<f32> = (0..3 * 16).map(|i| (i as f32 * 0.37).sin() * 4.0 + 2.0).collect();
    let x = g.constant(Tensor::new(&[3, 16], data).unwrap()).unwrap();
    let gamma = g.constant(Tensor::full(&[16], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[16])).unwrap();
    let y = g.layernorm(x, gamma, beta).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f32>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::zeros(&[3, 1024])).unwrap();
    let l = g.cross_entropy(uniform, &[0, 5, 1023], &[true; 3]).unwrap();
    assert!((g.value(l).item() - 1024f64.ln()).abs() < 1e-9);
    assert!((g.value(l).item() - 6.9315).abs() < 1e-4);

    let two = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let l = g.cross_entropy(two, &[0], &[true]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-4);

    let confident = g.constant(Tensor::new(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap()).unwrap();
    let l = g.cross_entropy(confident, &[0], &[true]).unwrap();
    assert!(g.value(l).item() < 1e-20);
}

#[test]
fn all_masked_cross_entropy_is_zero_with_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 1.0, 0.5]).unwrap(), true).unwrap();
    let l = g.cross_entropy(x, &[0, 1], &[false, false]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn attention_single_token_attends_to_itself() {
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::new(&[1, 8], vec![0.3; 8]).unwrap()).unwrap();
    let k = g.constant(Tensor::new(&[1, 8], vec![-0.2; 8]).unwrap()).unwrap();
    let v = g.constant(Tensor::new(&[1, 8], (0..8).map(|i| i as f32).collect()).unwrap()).unwrap();
    let o = g.attention(q, k, v, 2, &AttentionSpec::default()).unwrap();
    assert_eq!(g.attention_probs(o).unwrap(), &[1.0, 1.0]);
    assert_eq!(g.value(o).data(), g.value(v).data());
}

#[test]
fn attention_rejects_masking_the_diagonal() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    let allowed = [true, false, true, false];
    let spec = AttentionSpec { allowed: Some(&allowed), ..Default::default() };
    assert!(g.attention(x, x, x, 1, &spec).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_populates_every_tracked_leaf() {
    let mut g = Graph::<f32>::new();
    let a = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true).unwrap();
    let b = g.leaf(Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap(), true).unwrap();
    let frozen = g.constant(Tensor::full(&[2, 2], 3.0)).unwrap();
    let ab = g.matmul(a, b).unwrap();
    let y = g.add(ab, frozen).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    // d sum(AB) / dA = 1·Bᵀ, / dB = Aᵀ·1
    assert_eq!(g.grad(a).unwrap(), &[-0.5, 2.0, -0.5, 2.0]);
    assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    assert!(g.grad(frozen).is_none());
}
