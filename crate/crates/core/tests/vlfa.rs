use cmt_core::autodiff::*;
use cmt_core::model::*;
use cmt_core::vlfa::*;
use cmt_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn loss_value(anchors: &[f64], pool: &[f64], d: usize, tables: &CorrespondenceTables, tau: f64) -> cmt_core::Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::new(vec![anchors.len() / d, d], anchors.to_vec())?);
    let p = g.constant(Tensor::new(vec![pool.len() / d, d], pool.to_vec())?);
    let l = contrastive_alignment_loss(&mut g, a, p, tables, tau)?;
    Ok(g.value(l).item())
}

/// Direct sum over the listed negatives.
fn oracle(anchors: &[f64], pool: &[f64], d: usize, tables: &CorrespondenceTables, tau: f64) -> f64 {
    let s = |i: usize, j: usize| -> f64 { anchors[i * d..(i + 1) * d].iter().zip(&pool[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum::<f64>() / tau };
    let mut total = 0.0;
    for i in 0..tables.len() {
        let pos = s(i, tables.positives[i]).exp();
        let neg: f64 = tables.negatives[i].iter().map(|&j| s(i, j).exp()).sum();
        total += -(pos / (pos + neg)).ln();
    }
    total / tables.len() as f64
}

fn random_tables(rng: &mut ChaCha8Rng, anchors: usize, pool: usize, negatives: usize) -> CorrespondenceTables {
    let mut t = CorrespondenceTables::default();
    for i in 0..anchors {
        let pos = rng.gen_range(0..pool);
        let mut neg: Vec<usize> = (0..pool).filter(|&j| j != pos).collect();
        neg.truncate(negatives);
        t.anchors.push(i);
        t.positives.push(pos);
        t.negatives.push(neg);
    }
    t
}

#[test]
fn equal_similarities_give_log_of_candidate_count() {
    let d = 4;
    let row = [0.5, 0.5, 0.5, 0.5];
    let anchors: Vec<f64> = row.repeat(3);
    let pool: Vec<f64> = row.repeat(10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random_tables(&mut rng, 3, 10, 9);
    let l = loss_value(&anchors, &pool, d, &t, 0.07).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn separated_positives_drive_the_loss_to_zero() {
    let d = 2;
    let anchors = [1.0, 0.0];
    let pool = [1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
    let t = CorrespondenceTables {
        anchors: vec![0],
        positives: vec![0],
        negatives: vec![vec![1, 2]],
    };
    let l = loss_value(&anchors, &pool, d, &t, 0.05).unwrap();
    assert!(l < 1e-10 && l >= 0.0);
}

#[test]
fn loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 16;
    let anchors = unit_rows(&mut rng, 8, d);
    let pool = unit_rows(&mut rng, 32, d);
    let t = random_tables(&mut rng, 8, 32, 31);
    let l = loss_value(&anchors, &pool, d, &t, 0.07).unwrap();
    assert!((l - oracle(&anchors, &pool, d, &t, 0.07)).abs() < 1e-10);
}

#[test]
fn empty_negatives_and_bad_indices_are_errors() {
    let d = 2;
    let anchors = [1.0, 0.0];
    let pool = [1.0, 0.0, 0.0, 1.0];
    let t = CorrespondenceTables {
        anchors: vec![0],
        positives: vec![0],
        negatives: vec![vec![]],
    };
    assert!(matches!(loss_value(&anchors, &pool, d, &t, 0.07), Err(Error::EmptyNegatives(0))));
    let t = CorrespondenceTables {
        anchors: vec![0],
        positives: vec![0],
        negatives: vec![vec![0, 1]],
    };
    assert!(loss_value(&anchors, &pool, d, &t, 0.07).is_err());
}

#[test]
fn self_match_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 8;
    let z = unit_rows(&mut rng, 20, d);
    let anchors: Vec<usize> = (0..20).collect();
    let fg = vec![true; 20];
    let t = pseudo_correspondences(&z, &z, d, &anchors, &fg);
    assert_eq!(t.positives, anchors);
    for (i, neg) in t.negatives.iter().enumerate() {
        assert_eq!(neg.len(), 19);
        assert!(!neg.contains(&i));
    }
}

#[test]
fn pseudo_negatives_are_foreground_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let zq = unit_rows(&mut rng, 3, d);
    let zv = unit_rows(&mut rng, 6, d);
    let fg = [true, false, true, true, false, true];
    let t = pseudo_correspondences(&zq, &zv, d, &[0, 1, 2], &fg);
    for (neg, &pos) in t.negatives.iter().zip(&t.positives) {
        assert!(neg.iter().all(|&j| fg[j] && j != pos));
    }
}

#[test]
fn ground_truth_tables_subsample_and_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(ground_truth_tables(&[], &[true; 4], 8, &mut rng).is_none());
    let pairs: Vec<(usize, usize)> = (0..20).map(|i| (i, (i + 1) % 20)).collect();
    let t = ground_truth_tables(&pairs, &[true; 20], 8, &mut rng).unwrap();
    assert_eq!(t.len(), 8);
    for ((&a, &p), neg) in t.anchors.iter().zip(&t.positives).zip(&t.negatives) {
        assert_eq!(p, (a + 1) % 20);
        assert_eq!(neg.len(), 19);
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2]));
    let term = ground_truth_alignment_loss(&mut g, x, x, None, 0.07).unwrap();
    assert!(term.skipped && term.loss.is_none());
}

#[test]
fn extra_negatives_exclude_the_positive_and_respect_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = CorrespondenceTables {
        anchors: vec![0, 1],
        positives: vec![3, 7],
        negatives: vec![vec![0, 1], vec![2]],
    };
    t.extend_negatives(&[3, 7, 8, 9], 4, &mut rng);
    assert_eq!(t.negatives[0].len(), 4);
    assert!(t.negatives[0].iter().all(|j| [0, 1, 7, 8, 9].contains(j)));
    assert!(t.negatives[0].windows(2).all(|w| w[0] < w[1]));
    assert!(!t.negatives[1].contains(&7));
    assert_eq!(t.negatives[1].len(), 4);
}

#[test]
fn total_loss_weights_the_terms() {
    let mut g = Graph::<f64>::new();
    let c = |g: &mut Graph<f64>, v: f64| g.constant(Tensor::from_f64(vec![], &[v]).unwrap());
    let (bce, qv, vv) = (c(&mut g, 0.7), c(&mut g, 2.0), c(&mut g, 3.0));
    let l = total_loss(&mut g, bce, Some(qv), Some(vv), 0.25).unwrap();
    assert!((g.value(l).item() - (0.7 + 0.5 + 2.25)).abs() < 1e-12);
    let l = total_loss(&mut g, bce, None, Some(vv), 0.25).unwrap();
    assert!((g.value(l).item() - (0.7 + 2.25)).abs() < 1e-12);
    let l = total_loss(&mut g, bce, None, None, 0.25).unwrap();
    assert_eq!(g.value(l).item(), 0.7);
}

#[test]
fn alignment_config_is_validated() {
    assert!(AlignConfig::default().validate().is_ok());
    assert!(AlignConfig { tau: 0.0, ..Default::default() }.validate().is_err());
    assert!(AlignConfig { a: 1.5, ..Default::default() }.validate().is_err());
}

#[test]
fn pseudo_labels_follow_the_projector() {
    let cfg = ModelConfig {
        resolution: 32,
        d: 8,
        channels: [4, 4, 4],
        blocks: 1,
        heads: 2,
        k: TopK::K(3),
        ffn_mult: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let p = CmtParams::new(&cfg, &mut store, &mut rng).unwrap();
    let imgs: Vec<Vec<f32>> = (0..2).map(|_| (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let n = cfg.patches();
    let labels = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let f = p.encode(&mut g, store, &[&imgs[0], &imgs[1]]).unwrap();
        let z = p.project_beta(&mut g, store, f).unwrap();
        let zd = g.data(z);
        let d = cfg.d;
        pseudo_correspondences(&zd[..n * d], &zd[n * d..], d, &(0..n).collect::<Vec<_>>(), &vec![true; n]).positives
    };
    let before = labels(&store);
    assert_eq!(before, labels(&store));
    for id in p.beta_ids() {
        for v in store.value_mut(id).data.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    assert_ne!(before, labels(&store));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_anchor_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let anchors = unit_rows(&mut rng, 6, d);
        let pool = unit_rows(&mut rng, 12, d);
        let t = random_tables(&mut rng, 6, 12, 7);
        let l = loss_value(&anchors, &pool, d, &t, 0.1).unwrap();
        let perm = rand::seq::index::sample(&mut rng, 6, 6).into_vec();
        let pa: Vec<f64> = perm.iter().flat_map(|&i| anchors[i * d..(i + 1) * d].to_vec()).collect();
        let pt = CorrespondenceTables {
            anchors: (0..6).collect(),
            positives: perm.iter().map(|&i| t.positives[i]).collect(),
            negatives: perm.iter().map(|&i| t.negatives[i].clone()).collect(),
        };
        let lp = loss_value(&pa, &pool, d, &pt, 0.1).unwrap();
        prop_assert!((l - lp).abs() < 1e-12);
        prop_assert!((l - oracle(&anchors, &pool, d, &t, 0.1)).abs() < 1e-10);
    }
}

#[test]
fn duplicate_features_resolve_to_the_same_position() {
    let row = [0.6, 0.8];
    let other = [1.0, 0.0];
    let z: Vec<f64> = [row, row, other, row].concat();
    let t = pseudo_correspondences(&z, &z, 2, &[0, 1, 3], &[true; 4]);
    assert_eq!(t.positives, vec![0, 1, 3]);
    // away from the anchor's own position the lowest index wins
    let zv: Vec<f64> = [other, row, row, other].concat();
    let t = pseudo_correspondences(&z, &zv, 2, &[0, 3], &[true; 4]);
    assert_eq!(t.positives, vec![1, 1]);
}
