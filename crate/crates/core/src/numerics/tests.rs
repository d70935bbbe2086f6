use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_op<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let err = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                probe(g, y, seed)
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn softmax_uniform_on_equal_logits() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Array::zeros(&[3])).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(random(&mut rng, &[7, 5]).map(|v| 30.0 * v)).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.value(y).data().chunks(5) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[3, 4]);
    let mut g = Graph::new(Mode::Eval, 0);
    let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    for i in 0..2 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.data()[i * 3 + k] * b.data()[k * 4 + j];
            }
            assert!((g.value(c).data()[i * 4 + j] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new(Mode::Eval, 0);
    let a = g.constant(Array::zeros(&[2, 3])).unwrap();
    let b = g.constant(Array::zeros(&[2, 3])).unwrap();
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Array::zeros(&[3])).unwrap();
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Array::scalar(-1.0)).unwrap();
    assert!(matches!(g.sqrt(x), Err(NumericsError::NonFinite { .. })));
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(Array::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn backward_requires_scalar_root_and_accumulates() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(Array::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(NumericsError::NonScalarRoot(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(random(&mut rng, &[6])).unwrap();
    let y = g.softmax(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn stop_gradient_severs_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (xa, ya) = (random(&mut rng, &[4]), random(&mut rng, &[4]));
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.param(xa.clone()).unwrap();
    let y = g.param(ya).unwrap();
    let s = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(s), &xa);
    let p = g.mul(s, y).unwrap();
    let l = g.sum(p).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none() || g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(g.grad(y).unwrap(), &xa);
}

#[test]
fn diamond_graph_matches_unrolled_tree() {
    // L = sum((x*x) + (x*x)) built once with a shared node and once unrolled.
    let xa = Array::from_vec(vec![0.3, -1.2, 2.0]);
    let mut shared = Graph::new(Mode::Eval, 0);
    let x = shared.param(xa.clone()).unwrap();
    let sq = shared.mul(x, x).unwrap();
    let d = shared.add(sq, sq).unwrap();
    let l = shared.sum(d).unwrap();
    shared.backward(l).unwrap();

    let mut tree = Graph::new(Mode::Eval, 0);
    let x2 = tree.param(xa).unwrap();
    let a = tree.mul(x2, x2).unwrap();
    let b = tree.mul(x2, x2).unwrap();
    let d2 = tree.add(a, b).unwrap();
    let l2 = tree.sum(d2).unwrap();
    tree.backward(l2).unwrap();
    assert_eq!(shared.grad(x).unwrap(), tree.grad(x2).unwrap());
}

#[test]
fn deterministic_values_and_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g = Graph::new(Mode::Train, 4);
        let x = g.param(random(&mut rng, &[5, 4])).unwrap();
        let w = g.param(random(&mut rng, &[4, 3])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let y = g.dropout(y, 0.3).unwrap();
        let y = g.softmax(y).unwrap();
        let l = g.sum(y).unwrap();
        let l = g.square(l).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_only_in_train_mode() {
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Array::full(&[100], 1.0)).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
    let mut g = Graph::new(Mode::Check, 0);
    let x = g.constant(Array::full(&[100], 1.0)).unwrap();
    assert_eq!(g.dropout(x, 0.5).unwrap(), x);
    let mut g = Graph::new(Mode::Train, 0);
    let x = g.constant(Array::full(&[1000], 1.0)).unwrap();
    let y = g.dropout(x, 0.5).unwrap();
    let v = g.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    assert!(v.contains(&0.0));
}

// ---- per-op finite-difference checks, 20 seeds each -------------------------

#[test]
fn fd_matmul() {
    check_op(&[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    check_op(&[&[4, 3], &[2, 4]], |g, v| g.matmul_t(v[0], true, v[1], true));
    check_op(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.matmul_t(v[0], false, v[1], true));
}

#[test]
fn fd_elementwise() {
    check_op(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    check_op(&[&[5]], |g, v| g.scale(v[0], -2.5));
}

#[test]
fn fd_shape_ops() {
    check_op(&[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check_op(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op(&[&[3, 5]], |g, v| g.transpose(v[0]));
    check_op(&[&[2, 3], &[2, 1], &[2, 2]], |g, v| g.concat(v, 1));
    check_op(&[&[2, 3, 4]], |g, v| g.slice(v[0], 1, 1, 2));
}

#[test]
fn fd_reductions_and_nonlinearities() {
    check_op(&[&[4, 5]], |g, v| g.softmax(v[0]));
    check_op(&[&[4, 5]], |g, v| g.sum(v[0]));
    check_op(&[&[4, 5]], |g, v| g.mean(v[0]));
    check_op(&[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 1));
    check_op(&[&[6]], |g, v| g.abs(v[0]));
    check_op(&[&[6]], |g, v| g.square(v[0]));
    check_op(&[&[6]], |g, v| {
        // keep the argument away from zero
        let s = g.square(v[0])?;
        let one = g.constant(Array::full(&[6], 0.5))?;
        let s = g.add(s, one)?;
        g.sqrt(s)
    });
    check_op(&[&[6]], |g, v| g.relu(v[0]));
    check_op(&[&[6]], |g, v| g.gelu(v[0]));
    check_op(&[&[6]], |g, v| g.dropout(v[0], 0.5));
}

#[test]
fn fd_conv_and_upsample() {
    let geoms = [
        ConvGeometry { kernel: 3, stride: 1, pad: 1 },
        ConvGeometry { kernel: 3, stride: 2, pad: 1 },
        ConvGeometry { kernel: 2, stride: 2, pad: 0 },
    ];
    for geom in geoms {
        let k = geom.kernel;
        check_op(&[&[2, 6, 6, 3], &[k * k * 3, 4], &[4]], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), geom)
        });
    }
    check_op(&[&[2, 3, 3, 2]], |g, v| g.upsample2d(v[0], 2));
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, h, w, c, o) = (2, 5, 5, 3, 2);
    let geom = ConvGeometry { kernel: 3, stride: 2, pad: 1 };
    let x = random(&mut rng, &[b, h, w, c]);
    let wt = random(&mut rng, &[9 * c, o]);
    let mut g = Graph::new(Mode::Eval, 0);
    let (vx, vw) = (g.constant(x.clone()).unwrap(), g.constant(wt.clone()).unwrap());
    let y = g.conv2d(vx, vw, None, geom).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3, 2]);
    for bi in 0..b {
        for oy in 0..3 {
            for ox in 0..3 {
                for oc in 0..o {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xi = ((bi * h + iy as usize) * w + ix as usize) * c + ci;
                                let wi = ((ky * 3 + kx) * c + ci) * o + oc;
                                s += x.data()[xi] * wt.data()[wi];
                            }
                        }
                    }
                    let yi = ((bi * 3 + oy) * 3 + ox) * o + oc;
                    assert!((g.value(y).data()[yi] - s).abs() < 1e-13);
                }
            }
        }
    }
}

#[test]
fn grad_check_exact_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[10]);
    let err = grad_check(|g, v| {
        let s = g.square(v)?;
        g.sum(s)
    }, &x, 1e-5)
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let x = Array::scalar(1.0);
    assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
}

// ---- Adam ------------------------------------------------------------------

fn one_param(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("w", Array::scalar(v));
    p
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut p = one_param(0.7);
    let cfg = AdamConfig { l1: 0.0, ..Default::default() };
    let mut opt = Adam::new(cfg, &p);
    for _ in 0..5 {
        opt.step(&mut p, &[Some(Array::scalar(0.0))]).unwrap();
    }
    assert_eq!(p.values()[0].item(), 0.7);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // m_hat = 1, v_hat = 1 after bias correction, so the step is lr/(1+eps).
    let mut p = one_param(0.5);
    let cfg = AdamConfig { l1: 0.0, lr: 1e-4, ..Default::default() };
    let mut opt = Adam::new(cfg, &p);
    opt.step(&mut p, &[Some(Array::scalar(1.0))]).unwrap();
    let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
    assert!((p.values()[0].item() - expected).abs() < 1e-15);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_l1_shrinks_toward_zero() {
    let mut p = one_param(0.3);
    let cfg = AdamConfig { l1: 1e-5, ..Default::default() };
    let mut opt = Adam::new(cfg, &p);
    opt.step(&mut p, &[Some(Array::scalar(0.0))]).unwrap();
    assert!(p.values()[0].item() < 0.3);
    let mut q = one_param(-0.3);
    let mut opt = Adam::new(cfg, &q);
    opt.step(&mut q, &[Some(Array::scalar(0.0))]).unwrap();
    assert!(q.values()[0].item() > -0.3);
}

#[test]
fn adam_skips_frozen_and_checks_shapes() {
    let mut p = one_param(0.3);
    let mut opt = Adam::new(AdamConfig::default(), &p);
    opt.step(&mut p, &[None]).unwrap();
    assert_eq!(p.values()[0].item(), 0.3);
    assert!(opt.step(&mut p, &[Some(Array::zeros(&[2]))]).is_err());
    assert!(opt.step(&mut p, &[]).is_err());
}

#[test]
fn adam_weight_ema_tracks_parameters() {
    let mut p = one_param(1.0);
    let cfg = AdamConfig { weight_ema: Some(0.5), l1: 0.0, lr: 0.1, ..Default::default() };
    let mut opt = Adam::new(cfg, &p);
    opt.step(&mut p, &[Some(Array::scalar(1.0))]).unwrap();
    let shadow = opt.shadow_weights().unwrap()[0].item();
    assert!((shadow - 0.5 * (1.0 + p.values()[0].item())).abs() < 1e-15);
}
