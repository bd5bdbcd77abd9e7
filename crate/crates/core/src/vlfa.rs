//! View-agnostic local feature alignment: self-labelled query-view matches,
//! ground-truth view-view matches, and the InfoNCE loss over both.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub tau: f64,
    /// Weight of the query-view term; the view-view term gets `1 - a`.
    pub a: f64,
    pub anchors: usize,
    pub views_per_query: usize,
    /// View pairs per reference shape per step.
    pub view_pairs: usize,
    pub negatives: usize,
    pub use_qv: bool,
    pub use_vv: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tau: 0.07,
            a: 0.5,
            anchors: 32,
            views_per_query: 2,
            view_pairs: 2,
            negatives: 128,
            use_qv: true,
            use_vv: true,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::Config(format!("a must lie in [0, 1], got {}", self.a)));
        }
        if self.anchors == 0 || self.negatives == 0 {
            return Err(Error::Config("anchors and negatives must be positive".into()));
        }
        Ok(())
    }
}

/// Positives and negatives per anchor. Indices of positives and negatives
/// point into the candidate pool the loss is evaluated against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceTables {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl CorrespondenceTables {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Appends `extra` pool indices to every anchor's negatives, then
    /// subsamples each list down to `cap`.
    pub fn extend_negatives<R: Rng + ?Sized>(&mut self, extra: &[usize], cap: usize, rng: &mut R) {
        for (neg, &pos) in self.negatives.iter_mut().zip(&self.positives) {
            neg.extend(extra.iter().copied().filter(|&e| e != pos));
            if neg.len() > cap {
                neg.shuffle(rng);
                neg.truncate(cap);
                neg.sort_unstable();
            }
        }
    }
}

/// Index of the most similar row of `zv` for each anchor row of `zq`.
/// Ties go to the anchor's own grid position, then to the lowest index.
/// Negatives are the other foreground rows of `zv`.
pub fn pseudo_correspondences<T: Real>(
    zq: &[T],
    zv: &[T],
    d: usize,
    anchors: &[usize],
    foreground_v: &[bool],
) -> CorrespondenceTables {
    let nv = zv.len() / d;
    let mut positives = Vec::with_capacity(anchors.len());
    let mut negatives = Vec::with_capacity(anchors.len());
    for &i in anchors {
        let a = &zq[i * d..(i + 1) * d];
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..nv {
            let s: f64 = a.iter().zip(&zv[j * d..(j + 1) * d]).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            if s > best.0 || (s == best.0 && j == i) {
                best = (s, j);
            }
        }
        positives.push(best.1);
        negatives.push((0..nv).filter(|&j| j != best.1 && foreground_v[j]).collect());
    }
    CorrespondenceTables {
        anchors: anchors.to_vec(),
        positives,
        negatives,
    }
}

/// Tables from ground-truth patch matches `(patch in a, patch in b)`,
/// subsampled to `max_anchors`. `None` when no match survives occlusion.
pub fn ground_truth_tables<R: Rng + ?Sized>(
    pairs: &[(usize, usize)],
    foreground_b: &[bool],
    max_anchors: usize,
    rng: &mut R,
) -> Option<CorrespondenceTables> {
    if pairs.is_empty() {
        return None;
    }
    let picked: Vec<(usize, usize)> = if pairs.len() > max_anchors {
        let mut idx = rand::seq::index::sample(rng, pairs.len(), max_anchors).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pairs[i]).collect()
    } else {
        pairs.to_vec()
    };
    let anchors = picked.iter().map(|p| p.0).collect();
    let positives: Vec<usize> = picked.iter().map(|p| p.1).collect();
    let negatives = positives
        .iter()
        .map(|&pos| (0..foreground_b.len()).filter(|&j| j != pos && foreground_b[j]).collect())
        .collect();
    Some(CorrespondenceTables {
        anchors,
        positives,
        negatives,
    })
}

/// Mean over anchors of `-log(exp(s+/tau) / (exp(s+/tau) + sum exp(s-/tau)))`
/// where `s` are dot products of each anchor row with rows of `pool`.
/// `anchors` holds one feature row per table entry, in table order.
pub fn contrastive_alignment_loss<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    pool: Var,
    tables: &CorrespondenceTables,
    tau: f64,
) -> Result<Var> {
    let p = g.shape(pool)[0];
    if g.shape(anchors)[0] != tables.len() {
        return Err(Error::Shape {
            op: "contrastive_alignment_loss",
            detail: format!("{} anchor rows for {} table entries", g.shape(anchors)[0], tables.len()),
        });
    }
    let mut mask = vec![true; tables.len() * p];
    for (i, (&pos, neg)) in tables.positives.iter().zip(&tables.negatives).enumerate() {
        if neg.is_empty() {
            return Err(Error::EmptyNegatives(i));
        }
        if neg.contains(&pos) || pos >= p || neg.iter().any(|&n| n >= p) {
            return Err(Error::Shape {
                op: "contrastive_alignment_loss",
                detail: format!("anchor {i}: bad indices for a pool of {p}"),
            });
        }
        mask[i * p + pos] = false;
        for &n in neg {
            mask[i * p + n] = false;
        }
    }
    let s = g.matmul_t(anchors, pool, false, true)?;
    let s = g.scale(s, T::from_f64(1.0 / tau));
    g.cross_entropy_rows(s, &tables.positives, Some(Rc::new(mask)))
}

/// View-view term; `skipped` is set when the pair shares no visible point.
pub struct AlignTerm {
    pub loss: Option<Var>,
    pub skipped: bool,
}

pub fn ground_truth_alignment_loss<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    pool: Var,
    tables: Option<&CorrespondenceTables>,
    tau: f64,
) -> Result<AlignTerm> {
    match tables {
        Some(t) if !t.is_empty() => Ok(AlignTerm {
            loss: Some(contrastive_alignment_loss(g, anchors, pool, t, tau)?),
            skipped: false,
        }),
        _ => Ok(AlignTerm {
            loss: None,
            skipped: true,
        }),
    }
}

/// `bce + a * qv + (1 - a) * vv`; absent terms contribute nothing.
pub fn total_loss<T: Real>(g: &mut Graph<T>, bce: Var, qv: Option<Var>, vv: Option<Var>, a: f64) -> Result<Var> {
    let mut l = bce;
    if let Some(q) = qv {
        let t = g.scale(q, T::from_f64(a));
        l = g.add(l, t)?;
    }
    if let Some(v) = vv {
        let t = g.scale(v, T::from_f64(1.0 - a));
        l = g.add(l, t)?;
    }
    Ok(l)
}
