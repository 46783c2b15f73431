use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{graph_gradient_error, ParamStore};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Direct nested-loop "same"/"valid" 3-D convolution of one sample.
fn conv3d_oracle(x: &Tensor, k: &Tensor, same: bool) -> Tensor {
    let [d0, d1, d2, ci] = x.shape().try_into().unwrap();
    let [k0, k1, k2, _, co] = k.shape().try_into().unwrap();
    let (p0, p1, p2) = if same {
        ((k0 - 1) / 2, (k1 - 1) / 2, (k2 - 1) / 2)
    } else {
        (0, 0, 0)
    };
    let (o0, o1, o2) = if same {
        (d0, d1, d2)
    } else {
        (d0 - k0 + 1, d1 - k1 + 1, d2 - k2 + 1)
    };
    let xv = |a: isize, b: isize, c: isize, i: usize| -> f64 {
        if a < 0 || b < 0 || c < 0 || a >= d0 as isize || b >= d1 as isize || c >= d2 as isize {
            0.0
        } else {
            x.data()[((a as usize * d1 + b as usize) * d2 + c as usize) * ci + i]
        }
    };
    let mut out = vec![0.0; o0 * o1 * o2 * co];
    for a in 0..o0 {
        for b in 0..o1 {
            for c in 0..o2 {
                for o in 0..co {
                    let mut s = 0.0;
                    for i in 0..k0 {
                        for j in 0..k1 {
                            for l in 0..k2 {
                                for ch in 0..ci {
                                    let kv = k.data()[(((i * k1 + j) * k2 + l) * ci + ch) * co + o];
                                    s += kv
                                        * xv(
                                            (a + i) as isize - p0 as isize,
                                            (b + j) as isize - p1 as isize,
                                            (c + l) as isize - p2 as isize,
                                            ch,
                                        );
                                }
                            }
                        }
                    }
                    out[((a * o1 + b) * o2 + c) * co + o] = s;
                }
            }
        }
    }
    Tensor::new(&[o0, o1, o2, co], out).unwrap()
}

#[test]
fn conv3d_constant_input_all_ones_kernel_valid() {
    let c = 1.7;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[5, 5, 5, 1], c));
    let k = g.constant(Tensor::full(&[3, 3, 3, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(x, k, Some(b), Padding::Valid, 0.0).unwrap();
    assert_eq!(g.shape(y), &[3, 3, 3, 1]);
    let oracle = conv3d_oracle(
        &Tensor::full(&[5, 5, 5, 1], c),
        &Tensor::full(&[3, 3, 3, 1, 1], 1.0),
        false,
    );
    for v in g.value(y).data() {
        assert!((v - 27.0 * c).abs() < 1e-12);
    }
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv3d_matches_nested_loop_oracle() {
    for (shape, kshape, same) in [
        ([4, 5, 6, 2], [3, 3, 3, 2, 3], true),
        ([3, 4, 4, 1], [3, 3, 3, 1, 2], false),
        ([2, 6, 3, 3], [1, 3, 2, 3, 2], true),
    ] {
        let x = rand_t(&shape, 1);
        let k = rand_t(&kshape, 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let pad = if same { Padding::Same } else { Padding::Valid };
        let y = g.conv3d(xv, kv, None, pad, 0.0).unwrap();
        assert!(g.value(y).max_abs_diff(&conv3d_oracle(&x, &k, same)) < 1e-12);
    }
}

#[test]
fn conv_delta_kernel_same_padding_is_identity() {
    let x = rand_t(&[3, 4, 5, 2], 3);
    let mut k = Tensor::zeros(&[3, 3, 3, 2, 2]);
    for c in 0..2 {
        // centre tap (1,1,1), input channel c -> output channel c
        k.data_mut()[(((1 * 3 + 1) * 3 + 1) * 2 + c) * 2 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv3d(xv, kv, None, Padding::Same, 0.0).unwrap();
    assert_eq!(g.value(y), &x);

    let x1 = rand_t(&[7, 1], 4);
    let k1 = t(&[3, 1, 1], &[0.0, 1.0, 0.0]);
    let xv = g.constant(x1.clone());
    let kv = g.constant(k1);
    let y = g.conv1d(xv, kv, None, Padding::Same).unwrap();
    assert_eq!(g.value(y), &x1);
}

#[test]
fn conv1d_ones_kernel_on_constant_valid() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[6, 1], 2.5));
    let k = g.constant(Tensor::full(&[3, 1, 1], 1.0));
    let y = g.conv1d(x, k, None, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[4, 1]);
    assert!(g.value(y).data().iter().all(|v| (v - 7.5).abs() < 1e-12));
}

#[test]
fn conv_shape_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 6, 6, 3]));
    let bad = g.constant(Tensor::zeros(&[3, 3, 3, 4, 2]));
    assert!(matches!(
        g.conv3d(x, bad, None, Padding::Same, 0.0),
        Err(Error::Shape(_))
    ));
    let big = g.constant(Tensor::zeros(&[5, 3, 3, 3, 2]));
    assert!(matches!(
        g.conv3d(x, big, None, Padding::Valid, 0.0),
        Err(Error::Shape(_))
    ));
    // time-distributed eye slice (15, 9) accepted
    let e = g.constant(Tensor::zeros(&[2, 4, 15, 9]));
    let k = g.constant(Tensor::zeros(&[3, 9, 8]));
    let y = g.conv1d(e, k, None, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 15, 8]);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool(x, &[2, 2], &[2, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::full(&[4, 6, 6, 2], 3.0));
    let y = g.maxpool(c, &[2, 2, 2], &[2, 2, 2]).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));

    let odd = g.constant(rand_t(&[1, 15, 4], 5));
    let y = g.maxpool(odd, &[2], &[2]).unwrap();
    assert_eq!(g.shape(y), &[1, 7, 4]);

    let small = g.constant(Tensor::zeros(&[1, 1, 1]));
    assert!(matches!(g.maxpool(small, &[2], &[2]), Err(Error::Shape(_))));
}

#[test]
fn maxpool_full_video_shape() {
    // shape bookkeeping only; 60x256x256 would be large, the rule is per axis
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[6, 16, 16, 2]));
    let y = g.maxpool(x, &[2, 2, 2], &[2, 2, 2]).unwrap();
    assert_eq!(g.shape(y), &[3, 8, 8, 2]);
}

#[test]
fn dense_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[1.0, 1.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 3.0]);

    let xs = rand_t(&[5, 4], 6);
    let ws = rand_t(&[4, 3], 7);
    let bs = rand_t(&[3], 8);
    let x = g.constant(xs.clone());
    let w = g.constant(ws.clone());
    let b = g.constant(bs.clone());
    let y = g.dense(x, w, Some(b)).unwrap();
    for r in 0..5 {
        for c in 0..3 {
            let mut s = bs.data()[c];
            for k in 0..4 {
                s += xs.data()[r * 4 + k] * ws.data()[k * 3 + c];
            }
            assert!((g.value(y).data()[r * 3 + c] - s).abs() < 1e-12);
        }
    }
    let bad = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.dense(x, bad, None), Err(Error::Shape(_))));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.activation(x, Activation::Relu);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    assert_eq!(g.activation(x, Activation::Linear), x);

    let z = g.constant(Tensor::zeros(&[4]));
    let s = g.softmax(z);
    assert!(g.value(s).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

    let big = g.constant(t(&[2], &[1000.0, 0.0]));
    let s = g.softmax(big);
    // exact: 1/(1+e^-1000) and e^-1000/(1+e^-1000), both representable as 1 and ~0
    assert_eq!(g.value(s).data()[0], 1.0);
    assert!(g.value(s).data()[1] < 1e-300);
}

#[test]
fn batchnorm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let x = g.constant(t(&[4, 1], &[-1.0, 1.0, -1.0, 1.0]));
    let (y, stats) = g.batchnorm(x, gamma, beta, &BnMode::Train, 1e-9).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-8);
    assert_eq!(stats.unwrap().mean, vec![0.0]);

    let c = g.constant(Tensor::full(&[3, 1], 5.0));
    let (y, _) = g.batchnorm(c, gamma, beta, &BnMode::Train, 1e-3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let one = g.constant(Tensor::zeros(&[1, 1]));
    assert!(matches!(
        g.batchnorm(one, gamma, beta, &BnMode::Train, 1e-3),
        Err(Error::DegenerateBatch(1))
    ));

    let gamma2 = g.constant(t(&[2], &[2.0, 0.5]));
    let beta2 = g.constant(t(&[2], &[0.1, -0.3]));
    let x = g.constant(t(&[1, 2], &[3.0, -1.0]));
    let mode = BnMode::Infer {
        mean: vec![1.0, 2.0],
        var: vec![4.0, 0.25],
    };
    let (y, stats) = g.batchnorm(x, gamma2, beta2, &mode, 1e-3).unwrap();
    assert!(stats.is_none());
    let e0 = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-3).sqrt() + 0.1;
    let e1 = 0.5 * (-1.0 - 2.0) / (0.25f64 + 1e-3).sqrt() - 0.3;
    assert!((g.value(y).data()[0] - e0).abs() < 1e-12);
    assert!((g.value(y).data()[1] - e1).abs() < 1e-12);
}

#[test]
fn dropout_modes_and_monte_carlo_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[8], 9));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());

    let input = Tensor::full(&[16], 1.0);
    let mut acc = vec![0.0; 16];
    let n = 10_000;
    for _ in 0..n {
        let mut h = Graph::new();
        let v = h.constant(input.clone());
        let d = h.dropout(v, 0.5, true, &mut rng).unwrap();
        for (a, b) in acc.iter_mut().zip(h.value(d).data()) {
            *a += b;
        }
    }
    for a in acc {
        assert!((a / n as f64 - 1.0).abs() < 0.05);
    }
}

#[test]
fn dropout_is_deterministic_per_seed() {
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[64], 1.0));
        let d = g.dropout(x, 0.3, true, &mut rng).unwrap();
        g.value(d).clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn backward_quadratic_and_contract() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[3.0]));
    let l = g.sum_squares(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);

    let v = g.leaf(t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn untouched_parameters_get_zero_grads() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[1], &[2.0]), true);
    let b = store.add("b", t(&[1], &[5.0]), true);
    store.get_mut(b).grad = t(&[1], &[9.0]);
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let _bv = g.param(&store, b);
    let l = g.sum_squares(av);
    let grads = g.backward(l).unwrap();
    store.set_grads(&grads);
    assert_eq!(store.get(a).grad.data(), &[4.0]);
    assert_eq!(store.get(b).grad.data(), &[0.0]);
}

#[test]
fn l2_accumulator_matches_direct_sum() {
    let k1 = rand_t(&[3, 3, 3, 1, 2], 20);
    let k2 = rand_t(&[3, 3, 3, 2, 2], 21);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[4, 4, 4, 1], 22));
    let kv1 = g.leaf(k1.clone());
    let kv2 = g.leaf(k2.clone());
    let h = g.conv3d(x, kv1, None, Padding::Same, 0.01).unwrap();
    g.conv3d(h, kv2, None, Padding::Same, 0.01).unwrap();
    let reg = g.regularization().unwrap();
    let direct = 0.01 * (k1.sum_squares() + k2.sum_squares());
    assert!((g.value(reg).item() - direct).abs() < 1e-12);
    assert_eq!(g.regularized().len(), 2);
}

#[test]
fn narrow_and_concat_round_trip() {
    let x = rand_t(&[2, 5, 3], 30);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let a = g.narrow(v, 1, 0, 2).unwrap();
    let b = g.narrow(v, 1, 2, 3).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), &x);
    assert!(g.narrow(v, 1, 4, 2).is_err());
}

#[test]
fn loss_examples() {
    let mut g = Graph::new();
    let p = g.constant(t(&[2, 1], &[4.0, 6.0]));
    let l = g.rmse(p, &t(&[2, 1], &[1.0, 2.0])).unwrap();
    assert!((g.value(l).item() - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);

    let u = g.constant(Tensor::full(&[1, 4], 0.25));
    let l = g
        .cross_entropy(u, &t(&[1, 4], &[0.0, 0.0, 1.0, 0.0]))
        .unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let tiny = g.constant(t(&[1, 2], &[1e-15, 1.0 - 1e-15]));
    let l = g.cross_entropy(tiny, &t(&[1, 2], &[1.0, 0.0])).unwrap();
    assert!(g.value(l).item().is_finite());
    assert!((g.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-9);
}

// Gradient soundness: every op against central differences on three random
// shapes each.

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let err = graph_gradient_error(inputs, STEP, build).unwrap();
    assert!(err < TOL, "relative error {err}");
}

/// Fixed random weights turn any tensor into a scalar with nontrivial
/// gradients everywhere.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn grad_conv3d() {
    for (i, (xs, ks, pad)) in [
        ([3, 4, 4, 2], [3, 3, 3, 2, 2], Padding::Same),
        ([4, 3, 5, 1], [2, 3, 3, 1, 3], Padding::Valid),
        ([2, 5, 3, 3], [3, 1, 3, 3, 1], Padding::Same),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [
            rand_t(
                &[2].iter().chain(&xs).copied().collect::<Vec<_>>(),
                40 + i as u64,
            ),
            rand_t(&ks, 50 + i as u64),
            rand_t(&[ks[4]], 60),
        ];
        check(&inputs, |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), pad, 0.01)?;
            let p = project(g, y, 70)?;
            let r = g.regularization().unwrap();
            g.add(p, r)
        });
    }
}

#[test]
fn grad_conv1d() {
    for (i, (xs, ks)) in [
        (vec![2, 4, 6, 3], [3, 3, 2]),
        (vec![5, 2], [3, 2, 4]),
        (vec![3, 7, 1], [2, 1, 2]),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [
            rand_t(&xs, 80 + i as u64),
            rand_t(&ks, 90 + i as u64),
            rand_t(&[ks[2]], 100),
        ];
        check(&inputs, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), Padding::Same)?;
            project(g, y, 110)
        });
    }
}

#[test]
fn grad_maxpool() {
    for (i, (shape, win)) in [
        (vec![2, 4, 4, 4, 2], vec![2, 2, 2]),
        (vec![3, 6, 2], vec![2]),
        (vec![5, 5, 3], vec![2, 3]),
    ]
    .into_iter()
    .enumerate()
    {
        let inputs = [rand_t(&shape, 120 + i as u64)];
        let win2 = win.clone();
        check(&inputs, move |g, v| {
            let y = g.maxpool(v[0], &win2, &win2)?;
            project(g, y, 130)
        });
    }
}

#[test]
fn grad_dense_and_activations() {
    for (i, (n, k, m)) in [(3, 4, 2), (1, 5, 5), (4, 2, 3)].into_iter().enumerate() {
        let inputs = [
            rand_t(&[n, k], 140 + i as u64),
            rand_t(&[k, m], 150 + i as u64),
            rand_t(&[m], 160),
        ];
        for act in [
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Softmax,
            Activation::Linear,
        ] {
            check(&inputs, |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                let a = g.activation(y, act);
                project(g, a, 170)
            });
        }
    }
}

#[test]
fn grad_batchnorm_both_modes() {
    for (i, shape) in [vec![4, 3], vec![3, 2, 2, 2], vec![5, 1]]
        .into_iter()
        .enumerate()
    {
        let c = *shape.last().unwrap();
        let inputs = [
            rand_t(&shape, 180 + i as u64),
            rand_t(&[c], 190),
            rand_t(&[c], 200),
        ];
        check(&inputs, |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], &BnMode::Train, 1e-3)?;
            project(g, y, 210)
        });
        let mode = BnMode::Infer {
            mean: vec![0.1; c],
            var: vec![0.7; c],
        };
        check(&inputs, |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], &mode, 1e-3)?;
            project(g, y, 210)
        });
    }
}

#[test]
fn grad_elementwise_reshape_narrow_concat() {
    for (i, shape) in [vec![2, 3], vec![4, 2, 2], vec![3, 5]]
        .into_iter()
        .enumerate()
    {
        let inputs = [
            rand_t(&shape, 220 + i as u64),
            rand_t(&shape, 230 + i as u64),
        ];
        let s2 = shape.clone();
        check(&inputs, move |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.add(a, v[0])?;
            let c = g.scale(b, 0.7);
            let mask = Tensor::from_fn(&s2, |k| (k % 3) as f64);
            let d = g.mul_const(c, mask)?;
            let n = s2.iter().product::<usize>();
            let r = g.reshape(d, &[n])?;
            let left = g.narrow(r, 0, 0, 1)?;
            let right = g.narrow(r, 0, 1, n - 1)?;
            let cat = g.concat(&[right, left, right], 0)?;
            project(g, cat, 240)
        });
    }
}

#[test]
fn grad_losses() {
    for (i, (n, k)) in [(3, 4), (1, 4), (5, 2)].into_iter().enumerate() {
        let target = Tensor::from_fn(&[n, k], |j| if j % k == (j / k) % k { 1.0 } else { 0.0 });
        let inputs = [rand_t(&[n, k], 250 + i as u64)];
        check(&inputs, |g, v| {
            let p = g.softmax(v[0]);
            g.cross_entropy(p, &target)
        });
        let reg_target = rand_t(&[n, 1], 260 + i as u64);
        let inputs = [rand_t(&[n, 1], 270 + i as u64)];
        check(&inputs, |g, v| g.rmse(v[0], &reg_target));
    }
}

#[test]
fn grad_relu_dense_composite() {
    let inputs = [
        rand_t(&[3, 4], 280),
        rand_t(&[4, 5], 281),
        rand_t(&[5], 282),
    ];
    check(&inputs, |g, v| {
        let y = g.dense(v[0], v[1], Some(v[2]))?;
        let r = g.relu(y);
        Ok(g.sum_squares(r))
    });
}

#[test]
fn grad_conv_pool_dense_softmax_chain() {
    // (4,6,6,1) input through conv3d -> maxpool -> dense -> softmax -> CE
    let inputs = [
        rand_t(&[1, 4, 6, 6, 1], 290),
        rand_t(&[3, 3, 3, 1, 2], 291),
        rand_t(&[2 * 3 * 3 * 2, 3], 292),
        rand_t(&[3], 293),
    ];
    let target = t(&[1, 3], &[0.0, 1.0, 0.0]);
    check(&inputs, |g, v| {
        let c = g.conv3d(v[0], v[1], None, Padding::Same, 0.0)?;
        let p = g.maxpool(c, &[2, 2, 2], &[2, 2, 2])?;
        let f = g.reshape(p, &[1, 2 * 3 * 3 * 2])?;
        let d = g.dense(f, v[2], Some(v[3]))?;
        let s = g.softmax(d);
        g.cross_entropy(s, &target)
    });
}
