use cmt_core::autodiff::*;
use cmt_core::model::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> ModelConfig {
    ModelConfig {
        resolution: 32,
        d: 8,
        channels: [4, 4, 4],
        blocks: 2,
        heads: 2,
        k: TopK::K(3),
        ffn_mult: 2,
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rand_image(rng: &mut ChaCha8Rng, res: usize) -> Vec<f32> {
    (0..res * res).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct evaluation of single-head attention of row `qi` over the listed columns.
fn brute_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, qi: usize, cols: &[usize]) -> Vec<f64> {
    let s: Vec<f64> = cols
        .iter()
        .map(|&j| dot(&q[qi * d..(qi + 1) * d], &k[j * d..(j + 1) * d]) / (d as f64).sqrt())
        .collect();
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; d];
    for (w, &j) in e.iter().zip(cols) {
        for c in 0..d {
            out[c] += w / z * v[j * d + c];
        }
    }
    out
}

/// Column indices of the `k` largest entries by full sort.
fn sorted_top(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn run_tkca(q: &[f64], k: &[f64], v: &[f64], d: usize, m: &[f64], top: usize) -> Vec<f64> {
    let (nq, nv) = (q.len() / d, k.len() / d);
    let mut g = Graph::<f64>::new();
    let qv = g.constant(Tensor::new(vec![nq, d], q.to_vec()).unwrap());
    let kv = g.constant(Tensor::new(vec![nv, d], k.to_vec()).unwrap());
    let vv = g.constant(Tensor::new(vec![nv, d], v.to_vec()).unwrap());
    let o = tkca(&mut g, qv, kv, vv, m, top).unwrap();
    g.data(o).to_vec()
}

#[test]
fn tkca_with_all_columns_is_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (nq, nv, d) = (5, 9, 4);
    let (q, k, v, m) = (rand_vec(&mut rng, nq * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nq * nv));
    let out = run_tkca(&q, &k, &v, d, &m, nv);
    let all: Vec<usize> = (0..nv).collect();
    for i in 0..nq {
        let want = brute_attention(&q, &k, &v, d, i, &all);
        for c in 0..d {
            assert!((out[i * d + c] - want[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn tkca_with_one_column_copies_that_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (nq, nv, d) = (3, 7, 4);
    let (q, k, v, m) = (rand_vec(&mut rng, nq * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nq * nv));
    let out = run_tkca(&q, &k, &v, d, &m, 1);
    for i in 0..nq {
        let j = sorted_top(&m[i * nv..(i + 1) * nv], 1)[0];
        assert_eq!(&out[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
    }
}

#[test]
fn tkca_rejects_bad_k_and_m() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(vec![2, 4]));
    let k = g.constant(Tensor::zeros(vec![3, 4]));
    assert!(tkca(&mut g, q, k, k, &[0.0; 6], 0).is_err());
    assert!(tkca(&mut g, q, k, k, &[0.0; 6], 4).is_err());
    assert!(tkca(&mut g, q, k, k, &[0.0; 5], 2).is_err());
}

#[test]
fn top_k_rows_keep_every_valid_column_for_free_rows() {
    let m = [0.9, 0.1, 0.5, 0.7, 0.2, 0.3, 0.8, 0.4];
    let valid = [true, false, true, true];
    let rows = top_k_rows(&m, 2, 4, 2, Some(&valid), &[1]);
    assert_eq!(rows, vec![vec![0, 3], vec![0, 2, 3]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tkca_matches_brute_force(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nq, nv, d, top) = (4, 12, 4, 3);
        let (q, k, v, m) = (rand_vec(&mut rng, nq * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nv * d), rand_vec(&mut rng, nq * nv));
        let out = run_tkca(&q, &k, &v, d, &m, top);
        for i in 0..nq {
            let cols = sorted_top(&m[i * nv..(i + 1) * nv], top);
            let want = brute_attention(&q, &k, &v, d, i, &cols);
            for c in 0..d {
                prop_assert!((out[i * d + c] - want[c]).abs() < 1e-12);
                // convex combination of the selected value rows
                let lo = cols.iter().map(|&j| v[j * d + c]).fold(f64::INFINITY, f64::min);
                let hi = cols.iter().map(|&j| v[j * d + c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[i * d + c] >= lo - 1e-12 && out[i * d + c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn top_k_picks_the_largest_entries(row in prop::collection::vec(-10.0f64..10.0, 1..40), k in 1usize..40) {
        let k = k.min(row.len());
        let mut got = top_k(&row, None, k);
        got.sort_unstable();
        let mut want = sorted_top(&row, k);
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn encoder_maps_images_to_patch_tokens() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let p = CmtParams::new(&cfg, &mut store, &mut rng).unwrap();
    let a = rand_image(&mut rng, 64);
    let b = rand_image(&mut rng, 64);
    let mut g = Graph::new();
    let f = p.encode(&mut g, &store, &[&a, &b, &a]).unwrap();
    assert_eq!(g.shape(f), &[3 * 64, 64]);
    let data = g.data(f);
    let n = 64 * 64;
    assert_eq!(&data[..n], &data[2 * n..]);
    assert_ne!(&data[..n], &data[n..2 * n]);
}

#[test]
fn gray_and_replicated_rgb_encode_alike() {
    let cfg = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let p = CmtParams::new(&cfg, &mut store, &mut rng).unwrap();
    let gray = rand_image(&mut rng, 32);
    let rgb: Vec<f32> = gray.iter().chain(&gray).chain(&gray).copied().collect();
    let mut g = Graph::new();
    let f = p.encode(&mut g, &store, &[&gray, &rgb]).unwrap();
    let n = cfg.patches() * cfg.d;
    let data = g.data(f);
    assert_eq!(&data[..n], &data[n..]);
}

/// Upper bound on the Lipschitz constant of the positional encoder: the
/// Fourier map's derivative norm times the Frobenius norms of the MLP weights.
fn pe_lipschitz_bound(store: &ParamStore<f64>) -> f64 {
    let fourier: f64 = (1.0 + (0..FOURIER_FREQS).map(|i| (2f64.powi(i as i32) * std::f64::consts::PI).powi(2)).sum::<f64>()).sqrt();
    let mut l = fourier;
    for name in ["pe.l1.w", "pe.l2.w"] {
        let w = store.value(store.id(name).unwrap());
        l *= w.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    l
}

#[test]
fn positional_encoding_is_deterministic_and_lipschitz() {
    let cfg = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let p = CmtParams::new(&cfg, &mut store, &mut rng).unwrap();
    let l = pe_lipschitz_bound(&store);
    let mut pts = Vec::new();
    for _ in 0..200 {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        // pairs closer than the occlusion tolerance, as matched patches are
        let mut b = a;
        for c in &mut b {
            *c += rng.gen_range(-0.01..0.01);
        }
        pts.push(a);
        pts.push(b);
    }
    let mut g = Graph::new();
    let e1 = p.pe3d(&mut g, &store, &pts).unwrap();
    let e2 = p.pe3d(&mut g, &store, &pts).unwrap();
    assert_eq!(g.data(e1), g.data(e2));
    let d = cfg.d;
    let e = g.data(e1);
    for i in 0..200 {
        let (a, b) = (&e[2 * i * d..(2 * i + 1) * d], &e[(2 * i + 1) * d..(2 * i + 2) * d]);
        let de = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let dx = pts[2 * i].iter().zip(&pts[2 * i + 1]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(de <= l * dx + 1e-12, "pair {i}: {de} > {l} * {dx}");
    }
}

#[test]
fn fourier_features_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let e = fourier_encode(x);
        assert_eq!(&e[..3], &x);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // sin^2 + cos^2 per frequency
        for pair in e[3..].chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }
}

struct Fixture {
    cfg: ModelConfig,
    store: ParamStore<f64>,
    params: CmtParams,
    queries: Vec<Vec<f32>>,
    views: Vec<Vec<f32>>,
    points: Vec<[f64; 3]>,
    valid: Vec<bool>,
}

fn fixture(seed: u64, n_views: usize) -> Fixture {
    let cfg = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let params = CmtParams::new(&cfg, &mut store, &mut rng).unwrap();
    let res = cfg.resolution;
    let queries = (0..2).map(|_| rand_image(&mut rng, res)).collect();
    let views = (0..n_views).map(|_| rand_image(&mut rng, res)).collect();
    let nv = n_views * cfg.patches();
    let points = (0..nv)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let valid = (0..nv).map(|_| rng.gen_bool(0.7)).collect();
    Fixture {
        cfg,
        store,
        params,
        queries,
        views,
        points,
        valid,
    }
}

impl Fixture {
    fn input(&self) -> GroupInput<'_> {
        GroupInput {
            queries: self.queries.iter().map(Vec::as_slice).collect(),
            views: self.views.iter().map(Vec::as_slice).collect(),
            points: self.points.clone(),
            valid: self.valid.clone(),
        }
    }
}

#[test]
fn projected_features_have_unit_norm() {
    let fx = fixture(5, 2);
    let mut g = Graph::new();
    let out = fx.params.forward_group(&mut g, &fx.store, &fx.input()).unwrap();
    for row in g.data(out.z).chunks(fx.cfg.d) {
        assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-6);
    }
    for m in &out.m {
        assert_eq!(m.len(), fx.cfg.patches() * 2 * fx.cfg.patches());
        assert!(m.iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }
}

#[test]
fn identical_query_and_view_give_unit_self_similarity() {
    let mut fx = fixture(6, 2);
    fx.queries[0] = fx.views[1].clone();
    let mut g = Graph::new();
    let out = fx.params.forward_group(&mut g, &fx.store, &fx.input()).unwrap();
    let (n, nv) = (fx.cfg.patches(), 2 * fx.cfg.patches());
    for i in 0..n {
        assert!((out.m[0][i * nv + n + i] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn classification_loss_leaves_projector_gradients_at_zero() {
    let mut fx = fixture(7, 2);
    let mut g = Graph::new();
    let out = fx.params.forward_group(&mut g, &fx.store, &fx.input()).unwrap();
    let loss = g.bce_with_logits(out.pred.logits, &[1.0, 0.0]).unwrap();
    g.backward(loss).unwrap();
    fx.store.zero_grads();
    g.accumulate_into(&mut fx.store);
    for id in fx.params.beta_ids() {
        assert!(fx.store.grad(id).iter().all(|&v| v == 0.0), "{}", fx.store.name(id));
    }
    let enc = fx.store.id("enc.conv1.w").unwrap();
    assert!(fx.store.grad(enc).iter().any(|&v| v != 0.0));
}

#[test]
fn predictions_do_not_depend_on_view_order() {
    // tie-breaking follows column order, so the fixture must select without ties
    let mut cfg = micro();
    cfg.d = 32;
    cfg.channels = [8, 8, 8];
    let mut fx = fixture(8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    fx.store = ParamStore::new();
    fx.params = CmtParams::new(&cfg, &mut fx.store, &mut rng).unwrap();
    fx.cfg = cfg;
    let n = fx.cfg.patches();
    let mut g = Graph::new();
    let out = fx.params.forward_group(&mut g, &fx.store, &fx.input()).unwrap();
    for m in &out.m {
        for row in m.chunks(3 * n) {
            let mut v: Vec<f64> = row.iter().zip(&fx.valid).filter(|p| *p.1).map(|p| *p.0).collect();
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(v[2] > v[3], "fixture has a top-k tie");
        }
    }
    let a = out.pred;
    let order = [2, 0, 1];
    let views: Vec<&[f32]> = order.iter().map(|&i| fx.views[i].as_slice()).collect();
    let points = order.iter().flat_map(|&i| fx.points[i * n..(i + 1) * n].to_vec()).collect();
    let valid = order.iter().flat_map(|&i| fx.valid[i * n..(i + 1) * n].to_vec()).collect();
    let input = GroupInput {
        queries: fx.queries.iter().map(Vec::as_slice).collect(),
        views,
        points,
        valid,
    };
    let b = fx.params.forward_group(&mut g, &fx.store, &input).unwrap().pred;
    for (x, y) in g.data(a.logits).iter().zip(g.data(b.logits)) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
    for (x, y) in g.data(a.bbox).iter().zip(g.data(b.bbox)) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn queries_in_a_group_are_independent() {
    let fx = fixture(10, 2);
    let mut g = Graph::new();
    let both = fx.params.forward_group(&mut g, &fx.store, &fx.input()).unwrap().pred;
    let mut input = fx.input();
    input.queries.truncate(1);
    let one = fx.params.forward_group(&mut g, &fx.store, &input).unwrap().pred;
    assert!((g.data(both.logits)[0] - g.data(one.logits)[0]).abs() < 1e-12);
    let bbox = g.data(both.bbox);
    assert!(bbox.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn forward_group_checks_its_inputs() {
    let fx = fixture(11, 2);
    let mut g = Graph::new();
    let mut input = fx.input();
    input.points.pop();
    assert!(fx.params.forward_group(&mut g, &fx.store, &input).is_err());
    let mut input = fx.input();
    input.queries.clear();
    assert!(fx.params.forward_group(&mut g, &fx.store, &input).is_err());
}

#[test]
fn baseline_ignores_everything_but_the_query() {
    let cfg = micro();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let p = BaselineParams::new(&cfg, &mut store, &mut rng).unwrap();
    let q = rand_image(&mut rng, 32);
    let r = rand_image(&mut rng, 32);
    let mut g = Graph::new();
    let a = p.forward(&mut g, &store, &[&q]).unwrap();
    let b = p.forward(&mut g, &store, &[&r, &q]).unwrap();
    assert_eq!(g.data(a.logits)[0], g.data(b.logits)[1]);
    assert_eq!(g.shape(b.bbox), &[2, 4]);
}
