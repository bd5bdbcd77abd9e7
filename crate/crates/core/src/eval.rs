//! Metrics, split evaluation, ROC output, and viewpoint prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyKind;
use crate::autodiff::{Graph, ParamStore};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::model::{query_foreground, CmtParams, DOWNSCALE};
use crate::render::patch_center_pixel;
use crate::train::{iou, shape_groups, to_cxcywh, DataCache, Model};
use crate::vlfa::pseudo_correspondences;

pub const ACCURACY_THRESHOLD: f64 = 0.5;
pub const AP_IOU: f64 = 0.5;

/// Area under the ROC curve from the rank statistic; tied scores count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == (l == 1)).count();
    hits as f64 / scores.len() as f64
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Vec<[f64; 2]> {
    let pos = labels.iter().filter(|&&l| l == 1).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| l == 0).count().max(1) as f64;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push([fp / neg, tp / pos]);
    }
    pts
}

/// Average precision of box hits ranked by score: each anomalous query
/// contributes one detection, a hit when its box IoU reaches `AP_IOU`.
pub fn average_precision(detections: &[(f64, bool)]) -> f64 {
    if detections.is_empty() {
        return 0.0;
    }
    let mut d = detections.to_vec();
    d.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = d.len() as f64;
    let mut tp = 0.0;
    let mut prec = Vec::with_capacity(d.len());
    let mut hit = Vec::with_capacity(d.len());
    for (i, &(_, h)) in d.iter().enumerate() {
        if h {
            tp += 1.0;
        }
        prec.push(tp / (i + 1) as f64);
        hit.push(h);
    }
    // all-point interpolation: precision envelope from the right
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    prec.iter().zip(&hit).filter(|(_, &h)| h).fold(0.0, |acc, (p, _)| acc + p) / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    /// Fraction of this kind scored at or above the threshold.
    pub recall: f64,
    /// AUC of this kind against all normal queries, when defined.
    pub auc_vs_normal: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub auc: f64,
    pub accuracy: f64,
    /// Localization AP at IoU 0.5 over anomalous queries with a box.
    pub ap50: Option<f64>,
    pub per_kind: BTreeMap<AnomalyKind, KindStats>,
    pub roc: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub id: String,
    pub label: u8,
    pub kind: Option<AnomalyKind>,
    pub score: f64,
    pub bbox: [f64; 4],
    /// IoU against the ground-truth box, for anomalous queries that have one.
    pub iou: Option<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores every query of `split` against its reference shape.
pub fn score_split(model: &Model, data: &DataCache, split: Split) -> Result<Vec<ScoredQuery>> {
    let queries = data.queries(split);
    let views = model.test_views();
    let res = data.resolution;
    let mut out: Vec<Option<ScoredQuery>> = vec![None; queries.len()];
    for gr in shape_groups(queries, 8) {
        let imgs: Vec<&[f32]> = gr.queries.iter().map(|&q| queries[q].image.as_slice()).collect();
        let preds = model.predict(&data.shapes[gr.shape], &imgs, &views)?;
        for (&q, p) in gr.queries.iter().zip(preds) {
            let qd = &queries[q];
            let iou = match (qd.label, qd.bbox) {
                (1, Some(b)) => Some(iou(p.bbox, to_cxcywh([b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64], res))),
                _ => None,
            };
            out[q] = Some(ScoredQuery {
                id: qd.id.clone(),
                label: qd.label,
                kind: qd.kind,
                score: sigmoid(p.logit),
                bbox: p.bbox,
                iou,
            });
        }
    }
    Ok(out.into_iter().flatten().collect())
}

pub fn report(split: Split, scored: &[ScoredQuery]) -> Result<EvalReport> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
    let dets = |f: &dyn Fn(&ScoredQuery) -> bool| -> Vec<(f64, bool)> {
        scored
            .iter()
            .filter(|s| f(s))
            .filter_map(|s| s.iou.map(|i| (s.score, i >= AP_IOU)))
            .collect()
    };
    let all = dets(&|_| true);
    let mut per_kind = BTreeMap::new();
    for kind in AnomalyKind::ALL {
        let of: Vec<&ScoredQuery> = scored.iter().filter(|s| s.kind == Some(kind)).collect();
        if of.is_empty() {
            continue;
        }
        let sub: Vec<&ScoredQuery> = scored.iter().filter(|s| s.label == 0 || s.kind == Some(kind)).collect();
        let kd = dets(&|s| s.kind == Some(kind));
        per_kind.insert(
            kind,
            KindStats {
                count: of.len(),
                recall: of.iter().filter(|s| s.score >= ACCURACY_THRESHOLD).count() as f64 / of.len() as f64,
                auc_vs_normal: auc(
                    &sub.iter().map(|s| s.score).collect::<Vec<_>>(),
                    &sub.iter().map(|s| s.label).collect::<Vec<_>>(),
                )
                .ok(),
                ap50: (!kd.is_empty()).then(|| average_precision(&kd)),
            },
        );
    }
    Ok(EvalReport {
        split,
        samples: scored.len(),
        auc: auc(&scores, &labels)?,
        accuracy: accuracy(&scores, &labels, ACCURACY_THRESHOLD),
        ap50: (!all.is_empty()).then(|| average_precision(&all)),
        per_kind,
        roc: roc_points(&scores, &labels),
    })
}

/// Scores `split` and summarizes it. Parameters are only read.
pub fn evaluate(model: &Model, data: &DataCache, split: Split) -> Result<(EvalReport, Vec<ScoredQuery>)> {
    let scored = score_split(model, data, split)?;
    Ok((report(split, &scored)?, scored))
}

pub fn roc_csv(roc: &[[f64; 2]]) -> String {
    let mut s = String::from("fpr,tpr\n");
    for p in roc {
        let _ = writeln!(s, "{},{}", p[0], p[1]);
    }
    s
}

/// Standalone SVG line plot of a ROC curve.
pub fn roc_svg(roc: &[[f64; 2]], auc: f64) -> String {
    let (size, pad) = (320.0, 40.0);
    let span = size - 2.0 * pad;
    let pts: Vec<String> = roc
        .iter()
        .map(|p| format!("{:.2},{:.2}", pad + p[0] * span, size - pad - p[1] * span))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{pad}" stroke="gray" stroke-dasharray="4 4"/>"#,
        size - pad,
        size - pad
    );
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">false positive rate</text>"#, size / 2.0, size - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">true positive rate</text>"#,
        size / 2.0,
        size / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="13" text-anchor="middle">ROC (AUC = {auc:.3})</text>"#, size / 2.0);
    s.push_str("</svg>\n");
    s
}

/// How well one view explains a query: mean pixel distance between each
/// foreground query patch centre and the centre of its best β match, and
/// the mean β similarity of those matches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewMatch {
    pub distance: f64,
    pub similarity: f64,
}

pub fn view_matches(params: &CmtParams, store: &ParamStore<f32>, query: &[f32], views: &[&[f32]]) -> Result<Vec<ViewMatch>> {
    let res = params.cfg.resolution;
    let (nq, d, grid) = (params.cfg.patches(), params.cfg.d, params.cfg.grid());
    let mut g = Graph::new();
    let images: Vec<&[f32]> = std::iter::once(query).chain(views.iter().copied()).collect();
    let f = params.encode(&mut g, store, &images)?;
    let z = params.project_beta(&mut g, store, f)?;
    let zd = g.data(z);
    let gray = &query[..res * res];
    let fg = query_foreground(gray, res);
    let mut anchors: Vec<usize> = (0..nq).filter(|&p| fg[p]).collect();
    if anchors.is_empty() {
        anchors = (0..nq).collect();
    }
    let all = vec![true; nq];
    let zq = &zd[..nq * d];
    let mut out = Vec::with_capacity(views.len());
    for v in 0..views.len() {
        let zv = &zd[(v + 1) * nq * d..(v + 2) * nq * d];
        let t = pseudo_correspondences(zq, zv, d, &anchors, &all);
        let (mut dist, mut sim) = (0.0, 0.0);
        for (&a, &p) in t.anchors.iter().zip(&t.positives) {
            let (ax, ay) = patch_center_pixel(a, grid, DOWNSCALE);
            let (px, py) = patch_center_pixel(p, grid, DOWNSCALE);
            dist += ((ax as f64 - px as f64).powi(2) + (ay as f64 - py as f64).powi(2)).sqrt();
            sim += zq[a * d..(a + 1) * d].iter().zip(&zv[p * d..(p + 1) * d]).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        }
        let n = t.len() as f64;
        out.push(ViewMatch {
            distance: dist / n,
            similarity: sim / n,
        });
    }
    Ok(out)
}

/// View with the lowest mean match distance. Exact distance ties go to the
/// higher mean similarity, then to the lower index.
pub fn predict_viewpoint(params: &CmtParams, store: &ParamStore<f32>, query: &[f32], views: &[&[f32]]) -> Result<usize> {
    if views.is_empty() {
        return Err(Error::Config("viewpoint prediction needs at least one view".into()));
    }
    let m = view_matches(params, store, query, views)?;
    let mut best = 0;
    for (i, x) in m.iter().enumerate().skip(1) {
        let b = &m[best];
        if x.distance < b.distance || (x.distance == b.distance && x.similarity > b.similarity) {
            best = i;
        }
    }
    Ok(best)
}
