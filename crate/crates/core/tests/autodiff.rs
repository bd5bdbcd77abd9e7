use std::rc::Rc;

use cmt_core::autodiff::*;
use cmt_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `v` to a scalar with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, g.shape(v).to_vec());
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn check<F>(shapes: &[(&str, Vec<usize>)], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> cmt_core::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .map(|(n, s)| store.add(n, rand_tensor(&mut rng, s.clone())).unwrap())
        .collect();
    let report = grad_check(
        &store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(g, &vars)?;
            Ok(weighted_sum(g, out, seed))
        },
        1e-6,
        200,
        seed,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_f64(vec![3, 1], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let loss = g.matmul_t(xv, xv, true, false).unwrap();
    let loss = g.sum(loss);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
    let report = grad_check(
        &store,
        |g, s| {
            let v = g.param(s, x);
            let m = g.matmul_t(v, v, true, false)?;
            Ok(g.sum(m))
        },
        1e-6,
        200,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("{other:?}"),
    }
    let c = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn matmul_all_transpose_combinations() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { vec![4, 3] } else { vec![3, 4] };
        let sb = if tb { vec![5, 4] } else { vec![4, 5] };
        let e = check(&[("a", sa), ("b", sb)], 1, |g, v| g.matmul_t(v[0], v[1], ta, tb));
        assert!(e < TOL, "ta={ta} tb={tb}: {e}");
    }
}

#[test]
fn structural_ops() {
    let cases: Vec<(&str, f64)> = vec![
        ("transpose", check(&[("a", vec![3, 5])], 2, |g, v| g.transpose(v[0]))),
        ("reshape", check(&[("a", vec![3, 4])], 3, |g, v| g.reshape(v[0], vec![2, 6]))),
        (
            "concat_rows",
            check(&[("a", vec![2, 3]), ("b", vec![4, 3])], 4, |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        ),
        (
            "concat_cols",
            check(&[("a", vec![3, 2]), ("b", vec![3, 4])], 5, |g, v| g.concat_cols(&[v[1], v[0]])),
        ),
        ("slice_rows", check(&[("a", vec![5, 3])], 6, |g, v| g.slice_rows(v[0], 1, 3))),
        ("slice_cols", check(&[("a", vec![3, 6])], 7, |g, v| g.slice_cols(v[0], 2, 3))),
        ("gather_rows", check(&[("a", vec![5, 3])], 8, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))),
        (
            "select_entries",
            check(&[("a", vec![3, 5])], 9, |g, v| g.select_entries(v[0], &[0, 4, 1, 1, 2, 3], 2)),
        ),
        (
            "channels_to_tokens",
            check(&[("a", vec![2, 3, 2, 2])], 10, |g, v| g.channels_to_tokens(v[0])),
        ),
    ];
    for (name, e) in cases {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn elementwise_ops() {
    let s = vec![4, 3];
    let cases: Vec<(&str, f64)> = vec![
        ("add", check(&[("a", s.clone()), ("b", s.clone())], 11, |g, v| g.add(v[0], v[1]))),
        ("sub", check(&[("a", s.clone()), ("b", s.clone())], 12, |g, v| g.sub(v[0], v[1]))),
        ("mul", check(&[("a", s.clone()), ("b", s.clone())], 13, |g, v| g.mul(v[0], v[1]))),
        (
            "div",
            check(&[("a", s.clone()), ("b", s.clone())], 14, |g, v| {
                let b = g.exp(v[1]);
                g.div(v[0], b)
            }),
        ),
        ("minimum", check(&[("a", s.clone()), ("b", s.clone())], 15, |g, v| g.minimum(v[0], v[1]))),
        ("maximum", check(&[("a", s.clone()), ("b", s.clone())], 16, |g, v| g.maximum(v[0], v[1]))),
        ("add_row", check(&[("a", s.clone()), ("b", vec![3])], 17, |g, v| g.add_row(v[0], v[1]))),
        ("scale", check(&[("a", s.clone())], 18, |g, v| Ok(g.scale(v[0], -2.5)))),
        ("add_scalar", check(&[("a", s.clone())], 19, |g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("exp", check(&[("a", s.clone())], 20, |g, v| Ok(g.exp(v[0])))),
        (
            "log",
            check(&[("a", s.clone())], 21, |g, v| {
                let e = g.exp(v[0]);
                Ok(g.log(e))
            }),
        ),
        ("relu", check(&[("a", s.clone())], 22, |g, v| Ok(g.relu(v[0])))),
        ("sigmoid", check(&[("a", s.clone())], 23, |g, v| Ok(g.sigmoid(v[0])))),
        ("sum", check(&[("a", s.clone())], 24, |g, v| Ok(g.sum(v[0])))),
        ("mean", check(&[("a", s.clone())], 25, |g, v| Ok(g.mean(v[0])))),
    ];
    for (name, e) in cases {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn normalization_and_softmax_ops() {
    let cases: Vec<(&str, f64)> = vec![
        ("softmax_rows", check(&[("a", vec![3, 5])], 31, |g, v| g.softmax_rows(v[0]))),
        (
            "masked_softmax",
            check(&[("a", vec![2, 4])], 32, |g, v| {
                let mask = Rc::new(vec![false, true, false, false, true, false, true, false]);
                let m = g.masked_fill(v[0], mask)?;
                g.softmax_rows(m)
            }),
        ),
        (
            "layer_norm",
            check(&[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])], 33, |g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("l2_normalize_rows", check(&[("a", vec![4, 5])], 34, |g, v| g.l2_normalize_rows(v[0]))),
    ];
    for (name, e) in cases {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let e = check(
            &[("x", vec![2, 3, 6, 6]), ("w", vec![4, 3, k, k]), ("b", vec![4])],
            40 + stride as u64,
            |g, v| g.conv2d(v[0], v[1], v[2], Conv2dSpec { stride, pad }),
        );
        assert!(e < TOL, "stride {stride} pad {pad} k {k}: {e}");
    }
}

#[test]
fn conv2d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, vec![3]);
    let mut g = Graph::<f64>::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3, 3]);
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = b.data[co];
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += w.data[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data[(ci * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
                let got = g.data(y)[(co * 3 + oy) * 3 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn loss_ops() {
    let cases: Vec<(&str, f64)> = vec![
        (
            "bce_with_logits",
            check(&[("a", vec![6])], 51, |g, v| {
                let l = g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;
                Ok(g.scale(l, 1.0))
            }),
        ),
        (
            "smooth_l1",
            check(&[("a", vec![2, 4])], 52, |g, v| g.smooth_l1(v[0], &[0.1, 0.5, -0.3, 0.9, 0.0, 2.0, -2.0, 0.4], 0.05)),
        ),
        (
            "cross_entropy_rows",
            check(&[("a", vec![3, 5])], 53, |g, v| {
                let mask = Rc::new((0..15).map(|i| i % 7 == 3).collect::<Vec<_>>());
                g.cross_entropy_rows(v[0], &[0, 4, 2], Some(mask))
            }),
        ),
    ];
    for (name, e) in cases {
        assert!(e < TOL, "{name}: {e}");
    }
}

#[test]
fn bce_and_smooth_l1_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![2], &[0.0, 2.0]).unwrap());
    let l = g.bce_with_logits(x, &[1.0, 0.0]).unwrap();
    let expect = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);
    let s = g.smooth_l1(x, &[0.01, 0.0], 0.05).unwrap();
    let expect = (0.5 * 0.01 * 0.01 / 0.05 + (2.0 - 0.025)) / 2.0;
    assert!((g.value(s).item() - expect).abs() < 1e-12);
}

#[test]
fn masked_softmax_gives_exact_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 4], &[0.3, f64::NEG_INFINITY, 1.0, -0.5]).unwrap());
    let p = g.softmax_rows(x).unwrap();
    let d = g.data(p).to_vec();
    assert_eq!(d[1], 0.0);
    let dense: f64 = [0.3f64, 1.0, -0.5].iter().map(|v| v.exp()).sum();
    assert!((d[0] - 0.3f64.exp() / dense).abs() < 1e-15);

    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 3], &[2.0, 1.0, 0.0]).unwrap());
    let p = g.masked_fill(x, Rc::new(vec![false, true, false])).unwrap();
    let p = g.softmax_rows(p).unwrap();
    assert_eq!(g.data(p)[1], 0.0);
    assert!((g.data(p).iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn masked_coordinates_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(vec![1, 3], &[0.2, 0.9, -0.4]).unwrap());
    let m = g.masked_fill(x, Rc::new(vec![false, true, false])).unwrap();
    let p = g.softmax_rows(m).unwrap();
    let w = g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let y = g.mul(p, w).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap()[1], 0.0);
}

#[test]
fn detach_blocks_gradient() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let d = g.detach(av);
    let y = g.mul(av, d).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    // d/da (a * const) = const
    assert_eq!(g.grad(av).unwrap(), &[1.0, 2.0]);
}

#[test]
fn frozen_parameters_do_not_collect_gradients() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
    store.set_frozen(a, true);
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let b = g.input(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
    let y = g.mul(av, b).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert!(g.grad(av).is_none());
    g.accumulate_into(&mut store);
    assert_eq!(store.grad(a), &[0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let w = store.add_uniform("w", vec![8, 8], 0.5, &mut rng).unwrap();
        let x = Tensor::new(vec![5, 8], (0..40).map(|i| (i as f32).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let xv = g.constant(x);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.softmax_rows(h).unwrap();
        let l = g.sum(h);
        let l = g.log(l);
        g.backward(l).unwrap();
        (g.value(h).data.clone(), g.grad(wv).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn non_finite_loss_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(vec![1], &[-1.0]).unwrap());
    let l = g.log(x);
    let l = g.sum(l);
    assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
}

#[test]
fn adam_with_zero_gradient_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    store.add_uniform("w", vec![3, 3], 1.0, &mut rng).unwrap();
    let before = store.records();
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for _ in 0..5 {
        adam.update(&mut store);
    }
    assert_eq!(store.records(), before);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::from_f64(vec![2], &[3.0, -2.0]).unwrap()).unwrap();
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
    for _ in 0..500 {
        store.zero_grads();
        let mut g = Graph::new();
        let v = g.param(&store, x);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.accumulate_into(&mut store);
        adam.update(&mut store);
    }
    assert!(store.value(x).data.iter().all(|v| v.abs() < 1e-2), "{:?}", store.value(x));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    store.add_uniform("enc.w", vec![2, 3, 3], 1.0, &mut rng).unwrap();
    store.add_uniform("bias", vec![4], 1.0, &mut rng).unwrap();
    let adam = Adam::new(AdamConfig::default(), &store);
    let mut recs = store.records();
    recs.extend(adam.records(&store));
    let bytes = encode_checkpoint(&recs);
    assert_eq!(&bytes[..4], b"CMT1");
    assert_eq!(decode_checkpoint(&bytes).unwrap(), recs);
    assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &recs).unwrap();
    let mut other = ParamStore::<f32>::new();
    other.add("enc.w", Tensor::zeros(vec![2, 3, 3])).unwrap();
    other.add("bias", Tensor::zeros(vec![4])).unwrap();
    other.load_records(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(other.records(), store.records());
    assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::MissingFile(_))));
}

/// Dense multi-head attention with an exclusion mask, assembled from
/// primitive ops.
fn dense_attention(g: &mut Graph<f64>, q: Var, k: Var, v: Var, heads: usize, idx: &[Vec<usize>]) -> Var {
    let (n, m, d) = (g.shape(q)[0], g.shape(k)[0], g.shape(q)[1]);
    let mut mask = vec![true; n * m];
    for (r, cols) in idx.iter().enumerate() {
        for &c in cols {
            mask[r * m + c] = false;
        }
    }
    let mask = Rc::new(mask);
    let dh = d / heads;
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh).unwrap();
        let kh = g.slice_cols(k, h * dh, dh).unwrap();
        let vh = g.slice_cols(v, h * dh, dh).unwrap();
        let a = g.matmul_t(qh, kh, false, true).unwrap();
        let a = g.scale(a, 1.0 / (dh as f64).sqrt());
        let a = g.masked_fill(a, mask.clone()).unwrap();
        let w = g.softmax_rows(a).unwrap();
        outs.push(g.matmul(w, vh).unwrap());
    }
    g.concat_cols(&outs).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=m);
            let mut r = rand::seq::index::sample(rng, m, k).into_vec();
            r.sort_unstable();
            r
        })
        .collect()
}

#[test]
fn sparse_attention_matches_dense_masked_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, m, d, heads) = (6, 9, 8, 2);
    let idx = random_rows(&mut rng, n, m);
    let ts: Vec<Tensor<f64>> = [n, m, m].iter().map(|&r| rand_tensor(&mut rng, vec![r, d])).collect();

    let run = |sparse: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let out = if sparse {
            g.sparse_attention(vars[0], vars[1], vars[2], heads, Rc::new(idx.clone())).unwrap()
        } else {
            dense_attention(&mut g, vars[0], vars[1], vars[2], heads, &idx)
        };
        let loss = weighted_sum(&mut g, out, 5);
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (g.data(out).to_vec(), grads)
    };
    let (ys, gs) = run(true);
    let (yd, gd) = run(false);
    for (a, b) in ys.iter().zip(&yd) {
        assert!((a - b).abs() < 1e-12);
    }
    for (ga, gb) in gs.iter().zip(&gd) {
        for (a, b) in ga.iter().zip(gb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sparse_attention_rejects_bad_rows() {
    let mut g = Graph::<f64>::new();
    let q = g.input(Tensor::zeros(vec![2, 4]));
    let k = g.input(Tensor::zeros(vec![3, 4]));
    assert!(g.sparse_attention(q, k, k, 1, Rc::new(vec![vec![0], vec![]])).is_err());
    assert!(g.sparse_attention(q, k, k, 1, Rc::new(vec![vec![0], vec![3]])).is_err());
    assert!(g.sparse_attention(q, k, k, 3, Rc::new(vec![vec![0], vec![1]])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad_check_random_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let e = check(&[("a", vec![m, k]), ("b", vec![k, n])], seed, |g, v| g.matmul(v[0], v[1]));
        prop_assert!(e < TOL);
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..5, c in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![r, c], data).unwrap());
        let p = g.softmax_rows(x).unwrap();
        for row in g.data(p).chunks(c) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_statistics(c in 2usize..32, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, vec![1, c]);
        let mut g = Graph::<f64>::new();
        let xc = g.constant(x.clone());
        let gain = g.constant(Tensor::from_f64(vec![c], &vec![1.0; c]).unwrap());
        let bias = g.constant(Tensor::zeros(vec![c]));
        let y = g.layer_norm(xc, gain, bias).unwrap();
        let d = g.data(y);
        let mean = d.iter().sum::<f64>() / c as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        // the 1e-5 epsilon shrinks the output variance to v / (v + eps)
        let xm = x.data.iter().sum::<f64>() / c as f64;
        let xv = x.data.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / c as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
    }

    #[test]
    fn sparse_attention_passes_grad_check(n in 1usize..5, m in 1usize..7, heads in 1usize..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = Rc::new(random_rows(&mut rng, n, m));
        let d = 2 * heads;
        let e = check(&[("q", vec![n, d]), ("k", vec![m, d]), ("v", vec![m, d])], seed, |g, v| {
            g.sparse_attention(v[0], v[1], v[2], heads, idx.clone())
        });
        prop_assert!(e < TOL, "rel error {e}");
    }

    // Two features normalize to +-1, leaving an input gradient of pure rounding noise.
    #[test]
    fn layer_norm_passes_grad_check(r in 1usize..4, c in 3usize..7, seed in 0u64..1000) {
        let e = check(&[("x", vec![r, c]), ("g", vec![c]), ("b", vec![c])], seed, |g, v| g.layer_norm(v[0], v[1], v[2]));
        prop_assert!(e < TOL, "rel error {e}");
    }
}
