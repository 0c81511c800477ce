//! Central finite-difference checks of every differentiable graph op (f64).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdtnet_tensor::{Graph, Parallelism, Tensor, Var};

const EPS: f64 = 1e-6;

/// Checks d(loss)/d(input i) for every input against central differences.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let g = Graph::new(Parallelism::Sequential);
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.input(t)).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);

    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::new(Parallelism::Sequential);
        let vars: Vec<Var> = ins.iter().cloned().map(|t| g.constant(t)).collect();
        let l = build(&g, &vars);
        g.value(l).data()[0]
    };

    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient");
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let an = analytic.data()[j];
            let tol = 1e-5 + 1e-4 * fd.abs().max(an.abs());
            assert!((fd - an).abs() <= tol, "input {i} elem {j}: fd {fd} vs analytic {an}");
        }
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = g.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let m = g.mul(v, w).unwrap();
    g.mean(m)
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv3x3_and_conv1x1() {
    for k in [1, 3] {
        check(
            vec![rand(&[2, 3, 4, 5], 1), rand(&[2, 3, k, k], 2), rand(&[2], 3)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2])).unwrap();
                probe(g, y, 9)
            },
        );
    }
}

#[test]
fn elementwise_ops() {
    check(vec![rand(&[2, 2, 2, 2], 4), rand(&[2, 2, 2, 2], 5)], |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let s = g.sub(a, v[1]).unwrap();
        let m = g.mul(s, v[1]).unwrap();
        let e = g.exp(g.scale(m, 0.3));
        let sg = g.sigmoid(g.add_scalar(e, -1.0));
        let l = g.leaky_relu(g.add(sg, v[0]).unwrap(), 0.2);
        probe(g, l, 10)
    });
}

#[test]
fn pooling_resampling_and_channels() {
    check(vec![rand(&[2, 3, 4, 4], 6), rand(&[2, 2, 2, 2], 7)], |g, v| {
        let p = g.maxpool2(v[0]).unwrap();
        let c = g.concat_channels(&[p, v[1]]).unwrap();
        let n = g.narrow_channels(c, 1, 3).unwrap();
        let u = g.upsample2(n).unwrap();
        let s = g.softmax_channels(u).unwrap();
        probe(g, s, 11)
    });
}

#[test]
fn batch_slicing_and_pooling() {
    check(vec![rand(&[2, 2, 2, 2], 12), rand(&[1, 2, 2, 2], 13)], |g, v| {
        let c = g.concat_batch(&[v[0], v[1]]).unwrap();
        let n = g.narrow_batch(c, 1, 2).unwrap();
        let p = g.global_avg_pool(n).unwrap();
        probe(g, p, 14)
    });
}

#[test]
fn linear_reshape_film() {
    check(
        vec![rand(&[3, 4], 15), rand(&[6, 4], 16), rand(&[6], 17), rand(&[3, 2, 2, 2], 18)],
        |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            let gamma = g.narrow_channels(g.reshape(y, &[3, 6, 1, 1]).unwrap(), 0, 2).unwrap();
            let beta = g.narrow_channels(g.reshape(y, &[3, 6, 1, 1]).unwrap(), 2, 2).unwrap();
            let gamma = g.reshape(gamma, &[3, 2]).unwrap();
            let beta = g.reshape(beta, &[3, 2]).unwrap();
            let f = g.film(v[3], gamma, beta).unwrap();
            probe(g, f, 19)
        },
    );
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let g = Graph::<f64>::new(Parallelism::Sequential);
    let x = g.input(rand(&[1, 3, 2, 2], 20));
    let y = g.straight_through_one_hot(x).unwrap();
    let hot = g.value(y);
    for i in 0..4 {
        let s: f64 = (0..3).map(|c| hot.data()[c * 4 + i]).sum();
        assert_eq!(s, 1.0);
    }
    let w = rand(&[1, 3, 2, 2], 21);
    let wv = g.constant(w.clone());
    let loss = g.mean(g.mul(y, wv).unwrap());
    let grads = g.backward(loss);
    let gx = grads.get(x).unwrap();
    for (a, b) in gx.data().iter().zip(w.data()) {
        assert!((a - b / 12.0).abs() < 1e-15);
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = sdtnet_tensor::ParamStore::<f64>::new();
    let a = store.add("a", rand(&[2, 2], 22));
    let b = store.add("b", rand(&[2, 2], 23));
    let g = Graph::with_trainable(Parallelism::Sequential, move |id| id == a);
    let va = g.param(&store, a);
    let vb = g.param(&store, b);
    let loss = g.mean(g.mul(va, vb).unwrap());
    let grads = g.backward(loss);
    assert!(grads.param(a).is_some());
    assert!(grads.param(b).is_none());
}
