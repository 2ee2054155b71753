use plaindet::numerics::{check_tape_fn, finite_diff_check, AdamW, AdamWConfig, Tape, Tensor, Var};
use plaindet::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `v` against fixed random weights so every output element matters.
fn project(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(tape.shape(v).to_vec(), weights[..tape.value(v).len()].to_vec())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn suite<F>(name: &str, mut make: F)
where
    F: FnMut(&mut StdRng) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>),
{
    let mut rng = StdRng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (inputs, f) = make(&mut rng);
        let weights: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = check_tape_fn(&inputs, 1e-5, |t, v| {
            let out = f(t, v)?;
            project(t, out, &weights)
        })
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "{name}: worst relative error {worst:e}");
}

macro_rules! unary_suite {
    ($name:ident, $lo:expr, $hi:expr, $op:ident) => {
        #[test]
        fn $name() {
            suite(stringify!($name), |rng| {
                let x = rand_tensor(rng, &[3, 4], $lo, $hi);
                (vec![x], Box::new(|t, v| t.$op(v[0])))
            });
        }
    };
}

unary_suite!(grad_relu, -2.0, 2.0, relu);
unary_suite!(grad_sigmoid, -4.0, 4.0, sigmoid);
unary_suite!(grad_exp, -2.0, 2.0, exp);
unary_suite!(grad_log, 0.2, 3.0, log);
unary_suite!(grad_log_sigmoid, -30.0, 30.0, log_sigmoid);
unary_suite!(grad_abs, -2.0, 2.0, abs);
unary_suite!(grad_softmax, -5.0, 5.0, softmax_last);
unary_suite!(grad_sum, -2.0, 2.0, sum);
unary_suite!(grad_mean, -2.0, 2.0, mean);
unary_suite!(grad_sum_last, -2.0, 2.0, sum_last);
unary_suite!(grad_transpose, -2.0, 2.0, transpose);

#[test]
fn grad_matmul() {
    suite("matmul", |rng| {
        let n = rng.gen_range(1..5);
        let k = rng.gen_range(1..5);
        let m = rng.gen_range(1..5);
        let a = rand_tensor(rng, &[2, n, k], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, k, m], -1.0, 1.0);
        (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1])))
    });
    suite("matmul_shared", |rng| {
        let a = rand_tensor(rng, &[3, 2, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 3], -1.0, 1.0);
        (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1])))
    });
}

#[test]
fn grad_affine() {
    suite("affine", |rng| {
        let x = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4], -1.0, 1.0);
        (vec![x, w, b], Box::new(|t, v| t.affine(v[0], v[1], v[2])))
    });
}

#[test]
fn grad_elementwise_binary() {
    suite("add", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.add(v[0], v[1])))
    });
    suite("sub", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.sub(v[0], v[1])))
    });
    suite("mul", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.mul(v[0], v[1])))
    });
    suite("mul_self", |rng| {
        let v = vec![rand_tensor(rng, &[4], -1.0, 1.0)];
        (v, Box::new(|t, v| t.mul(v[0], v[0])))
    });
    suite("div", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], 0.5, 2.0)];
        (v, Box::new(|t, v| t.div(v[0], v[1])))
    });
    suite("maximum", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.maximum(v[0], v[1])))
    });
    suite("minimum", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.minimum(v[0], v[1])))
    });
}

#[test]
fn grad_shape_ops() {
    suite("concat", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3, 2], -1.0, 1.0), rand_tensor(rng, &[2, 1, 2], -1.0, 1.0)];
        (v, Box::new(|t, v| t.concat(&[v[0], v[1], v[0]], 1)))
    });
    suite("broadcast_add", |rng| {
        // unsqueeze(Bx, 1) + unsqueeze(By, 2)
        let v = vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[2, 5, 4], -1.0, 1.0)];
        (
            v,
            Box::new(|t, v| {
                let bx = t.reshape(v[0], vec![2, 1, 3, 4])?;
                let bx = t.expand(bx, vec![2, 5, 3, 4])?;
                let by = t.reshape(v[1], vec![2, 5, 1, 4])?;
                let by = t.expand(by, vec![2, 5, 3, 4])?;
                t.add(bx, by)
            }),
        )
    });
    suite("permute", |rng| {
        let v = vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0)];
        (v, Box::new(|t, v| t.permute(v[0], &[2, 0, 1])))
    });
    suite("index_rows", |rng| {
        let v = vec![rand_tensor(rng, &[4, 3], -1.0, 1.0)];
        (v, Box::new(|t, v| t.index_rows(v[0], &[3, 0, 3, 1])))
    });
    suite("slice_last", |rng| {
        let v = vec![rand_tensor(rng, &[3, 5], -1.0, 1.0)];
        (v, Box::new(|t, v| t.slice_last(v[0], 1, 3)))
    });
}

#[test]
fn grad_scalar_ops() {
    suite("scale_shift", |rng| {
        let v = vec![rand_tensor(rng, &[3], -1.0, 1.0)];
        (
            v,
            Box::new(|t, v| {
                let s = t.scale(v[0], -2.5)?;
                t.add_scalar(s, 0.75)
            }),
        )
    });
    suite("powf", |rng| {
        let v = vec![rand_tensor(rng, &[3], 0.1, 1.0)];
        (v, Box::new(|t, v| t.powf(v[0], 2.0)))
    });
    suite("clamp", |rng| {
        let v = vec![rand_tensor(rng, &[6], -2.0, 2.0)];
        (v, Box::new(|t, v| t.clamp(v[0], -1.0, 1.0)))
    });
    suite("layer_norm", |rng| {
        let v = vec![
            rand_tensor(rng, &[3, 5], -2.0, 2.0),
            rand_tensor(rng, &[5], 0.5, 1.5),
            rand_tensor(rng, &[5], -0.5, 0.5),
        ];
        (v, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])))
    });
}

#[test]
fn matmul_cases() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let y = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(y), &[3.0, 7.0]);
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(y), tape.value(a));
    let p = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match tape.matmul(p, p) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..20 {
        let (n, k, m) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, m], -1.0, 1.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
                assert!((tape.value(c)[i * m + j] - s).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = tape.softmax_last(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = tape.softmax_last(x).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1f64, 2.0, 3.0].iter().enumerate() {
        assert!((tape.value(y)[i] - v.exp() / z).abs() < 1e-12);
    }

    let shifted = tape.constant(vec![3], vec![1.0 + 17.5, 2.0 + 17.5, 3.0 + 17.5]).unwrap();
    let ys = tape.softmax_last(shifted).unwrap();
    for i in 0..3 {
        assert!((tape.value(ys)[i] - tape.value(y)[i]).abs() < 1e-12);
    }

    let empty = tape.constant(vec![2, 0], vec![]).unwrap();
    assert!(matches!(tape.softmax_last(empty), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_sum_to_one_at_large_magnitude() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[4, 9], -1e3, 1e3);
        let mut tape = Tape::new();
        let v = tape.leaf(&x).unwrap();
        let y = tape.softmax_last(v).unwrap();
        for row in tape.value(y).chunks(9) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn backward_basics() {
    let mut x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x).unwrap();
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    x.accumulate_grad(g.wrt(v).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), &[1.0, 1.0, 1.0]);
    // a second pass without reset accumulates
    x.accumulate_grad(g.wrt(v).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), &[2.0, 2.0, 2.0]);

    let mut tape = Tape::new();
    let v = tape.param(vec![1], vec![3.0]).unwrap();
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(v).unwrap(), &[6.0]);

    let m = tape.param(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(tape.backward(m), Err(Error::Contract(_))));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(vec![2], vec![1.0, 2.0]).unwrap();
    let d = tape.detach(x).unwrap();
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0]);
    assert!(g.wrt(d).is_none());
}

fn mlp_loss(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let h = tape.affine(v[0], v[1], v[2])?;
    let h = tape.relu(h)?;
    let o = tape.affine(h, v[3], v[4])?;
    let sq = tape.mul(o, o)?;
    tape.mean(sq)
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = StdRng::seed_from_u64(21);
    for _ in 0..10 {
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 6], -1.0, 1.0),
            rand_tensor(&mut rng, &[6], -0.5, 0.5),
            rand_tensor(&mut rng, &[6, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[2], -0.5, 0.5),
        ];
        let err = check_tape_fn(&inputs, 1e-5, mlp_loss).unwrap();
        assert!(err <= 1e-4, "{err:e}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = StdRng::seed_from_u64(5);
    let inputs = [rand_tensor(&mut rng, &[4, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[3, 6], -1.0, 1.0),
        rand_tensor(&mut rng, &[6], -0.5, 0.5),
        rand_tensor(&mut rng, &[6, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[2], -0.5, 0.5)];
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.param(t.shape().to_vec(), t.data().to_vec()).unwrap())
            .collect();
        let l = mlp_loss(&mut tape, &vars).unwrap();
        let g = tape.backward(l).unwrap();
        vars.iter().flat_map(|&v| g.wrt(v).unwrap().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f64>::new().with_finite_check(true);
    let x = tape.constant(vec![1], vec![-1.0]).unwrap();
    assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    let mut relaxed = Tape::<f64>::new().with_finite_check(false);
    let x = relaxed.constant(vec![1], vec![-1.0]).unwrap();
    let y = relaxed.log(x).unwrap();
    assert!(relaxed.value(y)[0].is_nan());
}

#[test]
fn finite_diff_check_cases() {
    let err = finite_diff_check(|x: &[f64]| Ok(x[0] * x[0]), &[3.0], &[6.0], 1e-5, None).unwrap();
    assert!(err <= 1e-8);
    let err = finite_diff_check(|_: &[f64]| Ok(4.0), &[1.0, 2.0], &[0.0, 0.0], 1e-5, None).unwrap();
    assert_eq!(err, 0.0);
    let res = finite_diff_check(
        |x: &[f64]| Ok(if x[1] > 2.0 { f64::NAN } else { x[1] }),
        &[0.0, 2.0],
        &[0.0, 1.0],
        1e-5,
        None,
    );
    assert!(matches!(res, Err(Error::NonFiniteProbe { coordinate: 1 })));
}

#[test]
fn adamw_cases() {
    let mk = |vals: Vec<f64>, grad: Vec<f64>| {
        let mut t = Tensor::new(vec![vals.len()], vals).unwrap().requires_grad(true);
        t.accumulate_grad(&grad).unwrap();
        t
    };
    // zero learning rate leaves parameters alone
    let mut ps = vec![mk(vec![1.0, -2.0], vec![0.3, 0.1])];
    let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() });
    opt.step(&mut ps).unwrap();
    assert_eq!(ps[0].data(), &[1.0, -2.0]);

    // first step with constant gradient: -lr * g / (|g| + eps)
    let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
    let mut ps = vec![mk(vec![1.0, -2.0], vec![0.3, -0.1])];
    let mut opt = AdamW::new(cfg);
    opt.step(&mut ps).unwrap();
    for (i, (&p0, &g)) in [1.0, -2.0].iter().zip(&[0.3f64, -0.1]).enumerate() {
        let want = p0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((ps[0].data()[i] - want).abs() < 1e-12);
    }
    assert_eq!(opt.step_count(), 1);

    // decoupled decay with zero gradient
    let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
    let mut ps = vec![mk(vec![2.0, -4.0], vec![0.0, 0.0])];
    AdamW::new(cfg).step(&mut ps).unwrap();
    assert!((ps[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert!((ps[0].data()[1] + 4.0 * (1.0 - 0.05)).abs() < 1e-15);

    // shapes must stay fixed across steps
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut [mk(vec![1.0], vec![1.0])]).unwrap();
    assert!(opt.step(&mut [mk(vec![1.0, 2.0], vec![1.0, 1.0])]).is_err());
}

#[test]
fn generic_over_f32() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(vec![2], vec![1.0f32, 2.0]).unwrap();
    let y = tape.softmax_last(x).unwrap();
    let s = tape.sum(y).unwrap();
    assert!((tape.scalar(s) - 1.0).abs() < 1e-6);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    use plaindet::numerics::checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut rng = StdRng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[3, 4], -1e3, 1e3);
    let b = Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap();
    checkpoint::save(&path, [("a", &a), ("b", &b)], serde_json::json!({"step": 7})).unwrap();
    let (loaded, meta) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(meta["step"], 7);
    assert_eq!(loaded[0].0, "a");
    assert_eq!(loaded[0].1.shape(), a.shape());
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&loaded[0].1), bits(&a));
    assert_eq!(bits(&loaded[1].1), bits(&b));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(manifest["entries"][1]["offset"], 96);
    assert!(checkpoint::load::<f64>(&dir.path().join("missing.json")).is_err());
}
