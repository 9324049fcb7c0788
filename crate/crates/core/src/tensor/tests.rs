use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference check of every parameter entry against `backward`.
/// `build` records a scalar loss on a fresh graph from the given parameters.
fn check_gradients<F>(params: &[Tensor<f64>], build: F, h: f64, tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build(&mut graph, &vars);
    let grads = graph.backward(loss).unwrap();

    let eval = |params: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).unwrap().data()[0]
    };

    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        assert_eq!(analytic.shape(), params[pi].shape());
        for e in 0..params[pi].len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            assert!(
                rel_err(a, numeric) <= tol || (a - numeric).abs() < 1e-9,
                "param {} entry {}: analytic {} numeric {}",
                pi,
                e,
                a,
                numeric
            );
        }
    }
}

#[test]
fn matmul_identity() {
    let a = Tensor::<f32>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(a.matmul(&b).unwrap(), b);
}

#[test]
fn matmul_hand_arithmetic() {
    let a = Tensor::<f32>::from_rows(&[&[1.0, 2.0]]);
    let b = Tensor::from_rows(&[&[3.0], &[4.0]]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let expected = naive_matmul(a.data(), b.data(), 3, 4, 2);
        let a32: Tensor<f32> = a.cast();
        let b32: Tensor<f32> = b.cast();
        let got = a32.matmul(&b32).unwrap();
        // Oracle evaluated on the same f32-rounded inputs.
        let expected32 = naive_matmul(
            &a32.cast::<f64>().into_data(),
            &b32.cast::<f64>().into_data(),
            3,
            4,
            2,
        );
        for ((g, e), e32) in got.data().iter().zip(&expected).zip(&expected32) {
            assert!((*g as f64 - e32).abs() <= 1e-6, "{} vs {}", g, e32);
            assert!((*g as f64 - e).abs() <= 1e-6);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    let mut g = Graph::new();
    let (va, vb) = (g.input(a), g.input(b));
    assert!(g.matmul(va, vb).is_err());
}

#[test]
fn tensor_rejects_bad_shape() {
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
}

#[test]
fn relu_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    // subgradient at exactly zero is zero
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_all_negative() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![4], vec![-1.0, -0.5, -3.0, -1e-30]).unwrap());
    let y = g.relu(x).unwrap();
    assert!(g.value(y).unwrap().data().iter().all(|v| v.to_bits() == 0));
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_nonzero_pattern_matches_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f32> = random_tensor(&mut rng, &[7, 13]).cast();
    let mut g = Graph::new();
    let vx = g.input(x.clone());
    let y = g.relu(vx).unwrap();
    for (out, inp) in g.value(y).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*out != 0.0, *inp > 0.0);
        if *inp <= 0.0 {
            assert_eq!(out.to_bits(), 0);
        } else {
            assert_eq!(out, inp);
        }
    }
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[2, 5], 3.5));
    let gain = g.input(Tensor::full(&[5], 1.0));
    let bias = g.input(Tensor::zeros(&[5]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_point() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let gain = g.input(Tensor::full(&[2], 1.0));
    let bias = g.input(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let out = g.value(y).unwrap().data();
    // mean 0, variance 1, so the only deviation is the epsilon term
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out[0] as f64 - expected).abs() < 1e-6);
    assert!((out[1] as f64 + expected).abs() < 1e-6);
}

#[test]
fn layer_norm_gradient_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        random_tensor(&mut rng, &[3, 6]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[6, 2]),
    ];
    check_gradients(
        &params,
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            // project so the loss is not trivially invariant
            let z = g.matmul(y, v[3]).unwrap();
            let r = g.relu(z).unwrap();
            g.sum(r).unwrap()
        },
        1e-3,
        1e-4,
    );
}

#[test]
fn cross_entropy_uniform() {
    let mut g = Graph::<f32>::new();
    let logits = g.input(Tensor::zeros(&[3, 4]));
    let loss = g.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
    let l = g.value(loss).unwrap().data()[0];
    assert!((l as f64 - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_limit() {
    let mut g = Graph::<f32>::new();
    let logits = g.input(Tensor::from_rows(&[&[1e4, 0.0, 0.0], &[0.0, 0.0, 1e4]]));
    let loss = g.softmax_cross_entropy(logits, &[0, 2]).unwrap();
    assert!(g.value(loss).unwrap().data()[0].abs() < 1e-6);
}

/// Log-softmax reference evaluated with f64 accumulation and the
/// log-sum-exp anchored at zero rather than the row max.
fn reference_cross_entropy(logits: &[f64], targets: &[usize], vocab: usize) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        total += sum.ln() - row[t];
    }
    total / targets.len() as f64
}

#[test]
fn cross_entropy_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let logits: Tensor<f32> = random_tensor(&mut rng, &[5, 7]).cast();
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..7)).collect();
        let mut g = Graph::new();
        let vl = g.input(logits.clone());
        let loss = g.softmax_cross_entropy(vl, &targets).unwrap();
        let got = g.value(loss).unwrap().data()[0] as f64;
        let expected = reference_cross_entropy(&logits.cast::<f64>().into_data(), &targets, 7);
        assert!((got - expected).abs() <= 1e-6, "{} vs {}", got, expected);
    }
}

#[test]
fn cross_entropy_target_out_of_range() {
    let mut g = Graph::<f32>::new();
    let logits = g.input(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.softmax_cross_entropy(logits, &[0, 4]),
        Err(TensorError::Index { index: 4, bound: 4, .. })
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let r = g.relu(x).unwrap();
    let z = g.add(y, r).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 2.0, 3.0]);
}

#[test]
fn unreached_param_gets_zero_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let unused = g.param(Tensor::full(&[3, 2], 1.0));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    let gu = grads.get(unused).unwrap();
    assert_eq!(gu.shape(), &[3, 2]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut g1 = Graph::<f32>::new();
    let mut g2 = Graph::<f32>::new();
    let x = g1.param(Tensor::full(&[2], 1.0));
    let s = g1.sum(x).unwrap();
    let _ = g2.param(Tensor::full(&[2], 1.0));
    assert!(matches!(g2.backward(s), Err(TensorError::Graph(_))));
    assert!(matches!(g1.backward(x), Err(TensorError::Graph(_))));
}

#[test]
fn two_layer_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = vec![
        random_tensor(&mut rng, &[5, 8]),
        random_tensor(&mut rng, &[8]),
        random_tensor(&mut rng, &[8, 4]),
        random_tensor(&mut rng, &[4]),
    ];
    let inputs = random_tensor(&mut rng, &[6, 5]);
    let targets = [0usize, 1, 2, 3, 1, 0];
    check_gradients(
        &params,
        |g, v| {
            let x = g.input(inputs.clone());
            let h = g.matmul(x, v[0]).unwrap();
            let h = g.add_bias(h, v[1]).unwrap();
            let h = g.relu(h).unwrap();
            let o = g.matmul(h, v[2]).unwrap();
            let o = g.add_bias(o, v[3]).unwrap();
            g.softmax_cross_entropy(o, &targets).unwrap()
        },
        1e-3,
        1e-4,
    );
}

#[test]
fn attention_embedding_mask_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (batch, seq, width, heads) = (2, 4, 6, 2);
    let ids: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..5)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.gen_range(0..5)).collect();
    let keep = [true, false, true, true, false, true];
    let params = vec![
        random_tensor(&mut rng, &[5, width]),
        random_tensor(&mut rng, &[width, width]),
        random_tensor(&mut rng, &[width, width]),
        random_tensor(&mut rng, &[width, width]),
        random_tensor(&mut rng, &[width, 5]),
    ];
    check_gradients(
        &params,
        |g, v| {
            let x = g.embedding(v[0], &ids).unwrap();
            let q = g.matmul(x, v[1]).unwrap();
            let k = g.matmul(x, v[2]).unwrap();
            let val = g.matmul(x, v[3]).unwrap();
            let a = g.causal_attention(q, k, val, batch, seq, heads).unwrap();
            let a = g.mask_units(a, &keep).unwrap();
            let r = g.add(a, x).unwrap();
            let o = g.matmul(r, v[4]).unwrap();
            g.softmax_cross_entropy(o, &targets).unwrap()
        },
        1e-4,
        1e-4,
    );
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (batch, seq, width, heads) = (1, 5, 4, 2);
    let q = random_tensor(&mut rng, &[batch * seq, width]);
    let k = random_tensor(&mut rng, &[batch * seq, width]);
    let v = random_tensor(&mut rng, &[batch * seq, width]);
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = g.causal_attention(vq, vk, vv, batch, seq, heads).unwrap();
        g.value(out).unwrap().clone()
    };
    let base = run(&k, &v);
    let (mut k2, mut v2) = (k.clone(), v.clone());
    for j in 0..width {
        k2.data_mut()[3 * width + j] += 0.7;
        v2.data_mut()[3 * width + j] -= 0.4;
    }
    let perturbed = run(&k2, &v2);
    for pos in 0..seq {
        let same = (0..width).all(|j| base.data()[pos * width + j] == perturbed.data()[pos * width + j]);
        assert_eq!(same, pos < 3, "position {}", pos);
    }
}

#[test]
fn mask_units_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x: Tensor<f32> = random_tensor(&mut rng, &[4, 5]).cast();
    let keep = [true, false, false, true, true];
    let mut g = Graph::new();
    let vx = g.input(x);
    let once = g.mask_units(vx, &keep).unwrap();
    let twice = g.mask_units(once, &keep).unwrap();
    assert_eq!(g.value(once).unwrap(), g.value(twice).unwrap());
    assert!(g.mask_units(vx, &keep[..3]).is_err());
}

#[test]
fn embedding_out_of_range() {
    let mut g = Graph::<f32>::new();
    let t = g.param(Tensor::zeros(&[4, 2]));
    assert!(matches!(
        g.embedding(t, &[1, 4]),
        Err(TensorError::Index { index: 4, .. })
    ));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let a: Tensor<f32> = random_tensor(&mut rng, &[16, 33]).cast();
    let b: Tensor<f32> = random_tensor(&mut rng, &[33, 9]).cast();
    let first = a.matmul(&b).unwrap();
    for _ in 0..3 {
        let again = a.matmul(&b).unwrap();
        assert!(first
            .data()
            .iter()
            .zip(again.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
