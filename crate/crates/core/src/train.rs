//! Training: in-memory data cache, query augmentation, box loss, and the
//! Adam loop for both the correspondence model and the query-only baseline.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyKind;
use crate::autodiff::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::dataset::{load_viewset, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{patch_points, query_foreground, BaselineParams, CmtParams, GroupInput, ModelConfig, Prediction};
use crate::pgm;
use crate::render::{patch_correspondences, CameraPose, RenderedView, REFERENCE_VIEWS};
use crate::vlfa::{contrastive_alignment_loss, ground_truth_tables, pseudo_correspondences, total_loss, AlignConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cmt,
    QueryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Queries per optimizer step.
    pub batch_size: usize,
    /// Queries of one reference shape that share a view draw within a step.
    pub group_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub flip: bool,
    pub crop: bool,
    pub seed: u64,
    pub box_weight: f64,
    pub smooth_l1_beta: f64,
    /// Score the validation split after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Cmt,
            model: ModelConfig::default(),
            align: AlignConfig::default(),
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 8,
            group_size: 4,
            n_train: 10,
            n_test: 20,
            flip: true,
            crop: true,
            seed: 0,
            box_weight: 1.0,
            smooth_l1_beta: 0.1,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.align.validate()?;
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(1..=REFERENCE_VIEWS).contains(&self.n_test) || self.n_train == 0 || self.n_train > self.n_test {
            return Err(Error::Config(format!(
                "need 1 <= n_train <= n_test <= {REFERENCE_VIEWS}, got {} and {}",
                self.n_train, self.n_test
            )));
        }
        if self.batch_size == 0 || self.group_size == 0 {
            return Err(Error::Config("batch_size and group_size must be positive".into()));
        }
        if self.box_weight < 0.0 || !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("box_weight must be >= 0 and smooth_l1_beta > 0".into()));
        }
        Ok(())
    }
}

/// One reference shape held in memory.
pub struct ShapeData {
    pub id: String,
    pub views: Vec<Vec<f32>>,
    pub depth: Vec<Vec<f32>>,
    pub poses: Vec<CameraPose>,
    /// Patch-centre world points per view.
    pub points: Vec<Vec<[f64; 3]>>,
    /// Foreground flags of view patches.
    pub valid: Vec<Vec<bool>>,
    pairs: RefCell<HashMap<(usize, usize), Rc<Vec<(usize, usize)>>>>,
}

impl ShapeData {
    pub fn new(id: String, views: Vec<Vec<f32>>, depth: Vec<Vec<f32>>, poses: Vec<CameraPose>, res: usize) -> Self {
        let (points, valid) = depth.iter().zip(&poses).map(|(d, p)| patch_points(d, p, res)).unzip();
        ShapeData {
            id,
            views,
            depth,
            poses,
            points,
            valid,
            pairs: RefCell::new(HashMap::new()),
        }
    }

    fn rendered(&self, v: usize, res: usize) -> RenderedView {
        RenderedView {
            width: res,
            height: res,
            image: self.views[v].clone(),
            depth: self.depth[v].clone(),
            pose: self.poses[v].clone(),
            masks: None,
        }
    }

    /// Ground-truth patch matches from view `a` into view `b` (cached).
    pub fn view_pairs(&self, a: usize, b: usize, res: usize) -> Rc<Vec<(usize, usize)>> {
        if let Some(p) = self.pairs.borrow().get(&(a, b)) {
            return p.clone();
        }
        let p = Rc::new(patch_correspondences(&self.rendered(a, res), &self.rendered(b, res), crate::model::DOWNSCALE));
        self.pairs.borrow_mut().insert((a, b), p.clone());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryData {
    pub id: String,
    /// Index into [`DataCache::shapes`].
    pub shape: usize,
    pub image: Vec<f32>,
    pub label: u8,
    pub bbox: Option<[u32; 4]>,
    pub kind: Option<AnomalyKind>,
}

/// Images, depth, and derived patch geometry for the requested splits.
pub struct DataCache {
    pub resolution: usize,
    pub shapes: Vec<ShapeData>,
    pub splits: BTreeMap<Split, Vec<QueryData>>,
}

impl DataCache {
    pub fn load(manifest: &Manifest, splits: &[Split]) -> Result<Self> {
        let res = manifest.config.resolution;
        let mut shapes = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut out = BTreeMap::new();
        for &split in splits {
            let mut queries = Vec::new();
            for s in manifest.samples(split) {
                let shape = match index.get(&s.shape_id) {
                    Some(&i) => i,
                    None => {
                        let vs = load_viewset(manifest, &s.shape_id)?;
                        shapes.push(ShapeData::new(s.shape_id.clone(), vs.images, vs.depth, vs.poses, res));
                        index.insert(s.shape_id.clone(), shapes.len() - 1);
                        shapes.len() - 1
                    }
                };
                queries.push(QueryData {
                    id: s.id.clone(),
                    shape,
                    image: pgm::read(&manifest.path(&s.query))?.to_unit(),
                    label: s.label,
                    bbox: s.bbox,
                    kind: s.anomaly.as_ref().map(|a| a.kind),
                });
            }
            out.insert(split, queries);
        }
        Ok(DataCache {
            resolution: res,
            shapes,
            splits: out,
        })
    }

    pub fn queries(&self, split: Split) -> &[QueryData] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Geometric part of an augmentation, used to carry boxes along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Crop origin and side in source pixels.
    pub crop: (usize, usize, usize),
}

impl Augmentation {
    pub fn identity(side: usize) -> Self {
        Augmentation {
            flip: false,
            crop: (0, 0, side),
        }
    }

    /// Maps a pixel box `[x0, y0, x1, y1)` into the augmented frame; `None`
    /// if nothing of it stays inside the crop.
    pub fn map_bbox(&self, b: [u32; 4], side: usize) -> Option<[f64; 4]> {
        let (cx, cy, c) = (self.crop.0 as f64, self.crop.1 as f64, self.crop.2 as f64);
        let s = side as f64 / c;
        let x0 = ((b[0] as f64 - cx).max(0.0) * s).min(side as f64);
        let x1 = ((b[2] as f64 - cx).min(c) * s).max(0.0);
        let y0 = ((b[1] as f64 - cy).max(0.0) * s).min(side as f64);
        let y1 = ((b[3] as f64 - cy).min(c) * s).max(0.0);
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let (x0, x1) = if self.flip { (side as f64 - x1, side as f64 - x0) } else { (x0, x1) };
        Some([x0, y0, x1, y1])
    }
}

pub fn hflip(image: &[f32], side: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    for row in out.chunks_mut(side) {
        row.reverse();
    }
    out
}

/// Bilinear resample of the `c x c` window at `(x0, y0)` to `side x side`.
pub fn crop_resize(image: &[f32], side: usize, x0: usize, y0: usize, c: usize) -> Vec<f32> {
    let scale = c as f64 / side as f64;
    let at = |x: isize, y: isize| {
        let x = x.clamp(x0 as isize, (x0 + c - 1) as isize) as usize;
        let y = y.clamp(y0 as isize, (y0 + c - 1) as isize) as usize;
        image[y * side + x] as f64
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        let sy = y0 as f64 + (r as f64 + 0.5) * scale - 0.5;
        let (fy, ty) = (sy.floor(), sy - sy.floor());
        for col in 0..side {
            let sx = x0 as f64 + (col as f64 + 0.5) * scale - 0.5;
            let (fx, tx) = (sx.floor(), sx - sx.floor());
            let (ix, iy) = (fx as isize, fy as isize);
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[r * side + col] = (top * (1.0 - ty) + bot * ty) as f32;
        }
    }
    out
}

pub const CROP_FRACTION: f64 = 0.875;

/// Random horizontal flip and random crop of `floor(0.875 * side)` resized
/// back to `side`, on a square gray image.
pub fn augment<R: Rng + ?Sized>(image: &[f32], side: usize, flip: bool, crop: bool, rng: &mut R) -> (Vec<f32>, Augmentation) {
    let mut aug = Augmentation::identity(side);
    let mut out = image.to_vec();
    if crop {
        let c = (CROP_FRACTION * side as f64).floor() as usize;
        let x0 = rng.gen_range(0..=side - c);
        let y0 = rng.gen_range(0..=side - c);
        out = crop_resize(&out, side, x0, y0, c);
        aug.crop = (x0, y0, c);
    }
    if flip && rng.gen_bool(0.5) {
        out = hflip(&out, side);
        aug.flip = true;
    }
    (out, aug)
}

/// Pixel box `[x0, y0, x1, y1]` to normalized `(cx, cy, w, h)`.
pub fn to_cxcywh(b: [f64; 4], side: usize) -> [f64; 4] {
    let s = side as f64;
    [(b[0] + b[2]) / (2.0 * s), (b[1] + b[3]) / (2.0 * s), (b[2] - b[0]) / s, (b[3] - b[1]) / s]
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `1 - GIoU` of two `(cx, cy, w, h)` boxes.
pub fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> Result<f64> {
    if !(gt[2] > 0.0 && gt[3] > 0.0) || !(pred[2] > 0.0 && pred[3] > 0.0) {
        return Err(Error::Degenerate(format!("box {gt:?} or {pred:?} has no area")));
    }
    let (pa, ga) = (corners(pred), corners(gt));
    let iw = (pa[2].min(ga[2]) - pa[0].max(ga[0])).max(0.0);
    let ih = (pa[3].min(ga[3]) - pa[1].max(ga[1])).max(0.0);
    let inter = iw * ih;
    let union = pred[2] * pred[3] + gt[2] * gt[3] - inter;
    let c = (pa[2].max(ga[2]) - pa[0].min(ga[0])) * (pa[3].max(ga[3]) - pa[1].min(ga[1]));
    Ok(1.0 - (inter / union - (c - union) / c))
}

/// Mean `1 - GIoU` between predicted rows `[n, 4]` and constant targets.
pub fn giou_loss_graph<T: Real>(g: &mut Graph<T>, pred: Var, gt: &[[f64; 4]]) -> Result<Var> {
    if gt.iter().any(|b| !(b[2] > 0.0 && b[3] > 0.0)) {
        return Err(Error::Degenerate("ground-truth box has no area".into()));
    }
    let n = gt.len();
    let col = |g: &mut Graph<T>, i: usize| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(w, T::from_f64(0.5));
    let hh = g.scale(h, T::from_f64(0.5));
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;
    let gc: Vec<[f64; 4]> = gt.iter().map(|&b| corners(b)).collect();
    let mut konst = |f: &dyn Fn(&[f64; 4]) -> f64| -> Result<Var> {
        let data: Vec<f64> = gc.iter().map(f).collect();
        Ok(g.constant(Tensor::from_f64(vec![n, 1], &data)?))
    };
    let gx0 = konst(&|b| b[0])?;
    let gy0 = konst(&|b| b[1])?;
    let gx1 = konst(&|b| b[2])?;
    let gy1 = konst(&|b| b[3])?;
    let garea = konst(&|b| (b[2] - b[0]) * (b[3] - b[1]))?;

    let ix0 = g.maximum(px0, gx0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy0 = g.maximum(py0, gy0)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let parea = g.mul(w, h)?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let cx0 = g.minimum(px0, gx0)?;
    let cx1 = g.maximum(px1, gx1)?;
    let cy0 = g.minimum(py0, gy0)?;
    let cy1 = g.maximum(py1, gy1)?;
    let cw = g.sub(cx1, cx0)?;
    let ch = g.sub(cy1, cy0)?;
    let carea = g.mul(cw, ch)?;
    let gap = g.sub(carea, union)?;
    let pen = g.div(gap, carea)?;
    let giou = g.sub(iou, pen)?;
    let m = g.mean(giou);
    let neg = g.scale(m, T::from_f64(-1.0));
    Ok(g.add_scalar(neg, T::from_f64(1.0)))
}

pub enum Network {
    Cmt(CmtParams),
    QueryOnly(BaselineParams),
}

/// A network with its parameter values and the configuration it was built from.
pub struct Model {
    pub config: TrainConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
}

/// Per-query outputs of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryOutput {
    pub logit: f64,
    pub bbox: [f64; 4],
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = match config.model_kind {
            ModelKind::Cmt => Network::Cmt(CmtParams::new(&config.model, &mut store, &mut rng)?),
            ModelKind::QueryOnly => Network::QueryOnly(BaselineParams::new(&config.model, &mut store, &mut rng)?),
        };
        Ok(Model {
            config: config.clone(),
            net,
            store,
        })
    }

    /// Path of the JSON config echoed next to a checkpoint.
    pub fn config_path(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam<f32>>, epoch: usize) -> Result<()> {
        let mut recs = self.store.records();
        if let Some(a) = adam {
            recs.extend(a.records(&self.store));
        }
        recs.push(("train.epoch".into(), Tensor::scalar(epoch as f32)));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        save_checkpoint(path, &recs)?;
        let mut text = serde_json::to_string_pretty(&self.config)?;
        text.push('\n');
        fs::write(Self::config_path(path), text)?;
        Ok(())
    }

    /// Loads parameters (and the config echoed beside them). Returns the
    /// model, the optimizer state, and the last completed epoch.
    pub fn load(path: &Path) -> Result<(Self, Adam<f32>, usize)> {
        let cpath = Self::config_path(path);
        let text = fs::read_to_string(&cpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(cpath.clone()),
            _ => Error::Io(e),
        })?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        Self::load_with(path, &config)
    }

    pub fn load_with(path: &Path, config: &TrainConfig) -> Result<(Self, Adam<f32>, usize)> {
        let recs = load_checkpoint(path)?;
        let mut model = Model::init(config)?;
        let n = model.store.len();
        let params: Vec<_> = recs.iter().filter(|(k, _)| !k.starts_with("adam.") && !k.starts_with("train.")).cloned().collect();
        if params.len() != n {
            return Err(Error::Format(format!("checkpoint has {} parameters, model has {n}", params.len())));
        }
        model.store.load_records(&params)?;
        let mut adam = Adam::new(config.adam.clone(), &model.store);
        let opt: Vec<_> = recs.iter().filter(|(k, _)| k.starts_with("adam.")).cloned().collect();
        if !opt.is_empty() {
            adam.load_records(&model.store, &opt)?;
        }
        let epoch = recs
            .iter()
            .find(|(k, _)| k == "train.epoch")
            .map(|(_, t)| t.item() as usize)
            .unwrap_or(0);
        Ok((model, adam, epoch))
    }

    /// View indices used at test time: `n` evenly spaced reference views.
    pub fn test_views(&self) -> Vec<usize> {
        spaced_views(self.config.n_test)
    }

    /// Forward pass without gradients for queries sharing one reference shape.
    pub fn predict(&self, shape: &ShapeData, queries: &[&[f32]], views: &[usize]) -> Result<Vec<QueryOutput>> {
        let mut g = Graph::new();
        let pred = match &self.net {
            Network::Cmt(p) => p.forward_group(&mut g, &self.store, &group_input(shape, queries, views))?.pred,
            Network::QueryOnly(p) => p.forward(&mut g, &self.store, queries)?,
        };
        Ok(outputs(&g, pred))
    }
}

pub fn spaced_views(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * REFERENCE_VIEWS / n).collect()
}

fn outputs(g: &Graph<f32>, pred: Prediction) -> Vec<QueryOutput> {
    let l = g.data(pred.logits);
    let b = g.data(pred.bbox);
    (0..l.len())
        .map(|i| QueryOutput {
            logit: l[i] as f64,
            bbox: [b[4 * i] as f64, b[4 * i + 1] as f64, b[4 * i + 2] as f64, b[4 * i + 3] as f64],
        })
        .collect()
}

pub fn group_input<'a>(shape: &'a ShapeData, queries: &[&'a [f32]], views: &[usize]) -> GroupInput<'a> {
    GroupInput {
        queries: queries.to_vec(),
        views: views.iter().map(|&v| shape.views[v].as_slice()).collect(),
        points: views.iter().flat_map(|&v| shape.points[v].iter().copied()).collect(),
        valid: views.iter().flat_map(|&v| shape.valid[v].iter().copied()).collect(),
    }
}

/// Queries of one reference shape processed together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub shape: usize,
    /// Indices into the split's query list.
    pub queries: Vec<usize>,
}

/// Groups of at most `size` queries per shape, in split order.
pub fn shape_groups(queries: &[QueryData], size: usize) -> Vec<Group> {
    let mut by_shape: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_shape.entry(q.shape).or_default().push(i);
    }
    by_shape
        .into_iter()
        .flat_map(|(shape, idx)| {
            idx.chunks(size)
                .map(|c| Group {
                    shape,
                    queries: c.to_vec(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Shuffled batches of whole groups, at most `batch` queries each.
pub fn epoch_batches<R: Rng + ?Sized>(queries: &[QueryData], group: usize, batch: usize, rng: &mut R) -> Vec<Vec<Group>> {
    let mut by_shape: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_shape.entry(q.shape).or_default().push(i);
    }
    let mut groups = Vec::new();
    for (shape, mut idx) in by_shape {
        idx.shuffle(rng);
        for c in idx.chunks(group.min(batch)) {
            groups.push(Group {
                shape,
                queries: c.to_vec(),
            });
        }
    }
    groups.shuffle(rng);
    let mut out: Vec<Vec<Group>> = Vec::new();
    let mut count = 0;
    for gr in groups {
        if out.is_empty() || count + gr.queries.len() > batch {
            out.push(Vec::new());
            count = 0;
        }
        count += gr.queries.len();
        out.last_mut().unwrap().push(gr);
    }
    out
}

/// Mean loss components of one step (absent terms are 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub bce: f64,
    pub qv: f64,
    pub vv: f64,
    pub bbox: f64,
    pub total: f64,
}

#[derive(Serialize)]
struct BatchDump<'a> {
    losses: StepLosses,
    queries: Vec<&'a str>,
    shapes: Vec<&'a str>,
}

/// One group's forward state inside a training step.
struct GroupState {
    shape: usize,
    views: Vec<usize>,
    z: Var,
    zdata: Vec<f32>,
    query_fg: Vec<Vec<bool>>,
}

pub struct Trainer {
    pub model: Model,
    pub adam: Adam<f32>,
    /// Where a non-finite batch is dumped before aborting.
    pub dump_dir: Option<PathBuf>,
}

fn mean_of(g: &mut Graph<f32>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f32)))
}

fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = Adam::new(model.config.adam.clone(), &model.store);
        Trainer {
            model,
            adam,
            dump_dir: None,
        }
    }

    /// Forward, backward, and one Adam update on `batch`.
    pub fn step<R: Rng + ?Sized>(&mut self, data: &DataCache, split: Split, batch: &[Group], augmented: bool, rng: &mut R) -> Result<StepLosses> {
        let cfg = self.model.config.clone();
        let res = data.resolution;
        let queries = data.queries(split);
        let mut g = Graph::new();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut box_rows = Vec::new();
        let mut box_targets = Vec::new();
        let mut states = Vec::new();
        for gr in batch {
            let shape = &data.shapes[gr.shape];
            let mut imgs = Vec::with_capacity(gr.queries.len());
            for (qi, &q) in gr.queries.iter().enumerate() {
                let qd = &queries[q];
                let (img, aug) = if augmented {
                    augment(&qd.image, res, cfg.flip, cfg.crop, rng)
                } else {
                    (qd.image.clone(), Augmentation::identity(res))
                };
                labels.push(qd.label as f32);
                if qd.label == 1 {
                    if let Some(b) = qd.bbox.and_then(|b| aug.map_bbox(b, res)) {
                        // logits gets one entry per group, so its length is this group's index
                        box_rows.push((logits.len(), qi));
                        box_targets.push(to_cxcywh(b, res));
                    }
                }
                imgs.push(img);
            }
            let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
            match &self.model.net {
                Network::Cmt(p) => {
                    let views = sample_distinct(rng, REFERENCE_VIEWS, cfg.n_train);
                    let fwd = p.forward_group(&mut g, &self.model.store, &group_input(shape, &refs, &views))?;
                    logits.push(fwd.pred.logits);
                    states.push((
                        fwd.pred.bbox,
                        GroupState {
                            shape: gr.shape,
                            views,
                            z: fwd.z,
                            zdata: g.data(fwd.z).to_vec(),
                            query_fg: imgs.iter().map(|im| query_foreground(im, res)).collect(),
                        },
                    ));
                }
                Network::QueryOnly(p) => {
                    let pred = p.forward(&mut g, &self.model.store, &refs)?;
                    logits.push(pred.logits);
                }
            }
        }
        let all = g.concat_rows(&logits)?;
        let bce = g.bce_with_logits(all, &labels)?;

        let mut losses = StepLosses {
            bce: g.value(bce).item() as f64,
            ..Default::default()
        };
        let mut total = bce;
        if let Network::Cmt(p) = &self.model.net {
            let nq = p.cfg.patches();
            let d = p.cfg.d;
            let (qv, vv) = self.alignment_terms(&mut g, data, &states.iter().map(|s| &s.1).collect::<Vec<_>>(), batch, nq, d, rng)?;
            if let Some(v) = qv {
                losses.qv = g.value(v).item() as f64;
            }
            if let Some(v) = vv {
                losses.vv = g.value(v).item() as f64;
            }
            let a = cfg.align.a;
            total = total_loss(&mut g, bce, qv.filter(|_| cfg.align.use_qv), vv.filter(|_| cfg.align.use_vv), a)?;

            if cfg.box_weight > 0.0 && !box_rows.is_empty() {
                let mut rows = Vec::with_capacity(box_rows.len());
                for &(gi, qi) in &box_rows {
                    rows.push(g.slice_rows(states[gi].0, qi, 1)?);
                }
                let pred = g.concat_rows(&rows)?;
                let flat: Vec<f32> = box_targets.iter().flat_map(|b| b.iter().map(|&x| x as f32)).collect();
                let l1 = g.smooth_l1(pred, &flat, cfg.smooth_l1_beta as f32)?;
                let gl = giou_loss_graph(&mut g, pred, &box_targets)?;
                let bl = g.add(l1, gl)?;
                losses.bbox = g.value(bl).item() as f64;
                let wb = g.scale(bl, cfg.box_weight as f32);
                total = g.add(total, wb)?;
            }
        }
        losses.total = g.value(total).item() as f64;
        if !losses.total.is_finite() {
            self.dump(data, split, batch, losses)?;
            return Err(Error::NonFinite(format!("training loss {losses:?}")));
        }
        self.model.store.zero_grads();
        g.backward(total)?;
        g.accumulate_into(&mut self.model.store);
        self.adam.update(&mut self.model.store);
        Ok(losses)
    }

    #[allow(clippy::too_many_arguments)]
    fn alignment_terms<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<f32>,
        data: &DataCache,
        states: &[&GroupState],
        batch: &[Group],
        nq: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let cfg = &self.model.config.align;
        let res = data.resolution;
        let mut qv_terms = Vec::new();
        let mut vv_terms = Vec::new();
        for (gi, st) in states.iter().enumerate() {
            let shape = &data.shapes[st.shape];
            let qn = batch[gi].queries.len();
            // foreground view patches of other objects in the batch
            let others: Vec<(usize, usize)> = states
                .iter()
                .enumerate()
                .filter(|(_, o)| o.shape != st.shape)
                .flat_map(|(oi, o)| {
                    let oshape = &data.shapes[o.shape];
                    let oq = batch[oi].queries.len();
                    o.views.iter().enumerate().flat_map(move |(vi, &v)| {
                        oshape.valid[v]
                            .iter()
                            .enumerate()
                            .filter(|(_, &f)| f)
                            .map(move |(p, _)| (oi, (oq + vi) * nq + p))
                    })
                })
                .collect();
            let pool_for = |g: &mut Graph<f32>, rng: &mut R, view_row: usize| -> Result<(Var, Vec<usize>)> {
                let own = g.slice_rows(st.z, view_row, nq)?;
                let want = cfg.negatives.saturating_sub(nq - 1).min(others.len());
                if want == 0 {
                    return Ok((own, Vec::new()));
                }
                let picks = sample_distinct(rng, others.len(), want);
                let mut parts = vec![own];
                for (oi, o) in states.iter().enumerate() {
                    let rows: Vec<usize> = picks.iter().map(|&i| others[i]).filter(|r| r.0 == oi).map(|r| r.1).collect();
                    if !rows.is_empty() {
                        parts.push(g.gather_rows(o.z, &rows)?);
                    }
                }
                let pool = g.concat_rows(&parts)?;
                Ok((pool, (nq..nq + picks.len()).collect()))
            };

            if cfg.use_qv {
                for q in 0..qn {
                    let fg: Vec<usize> = (0..nq).filter(|&p| st.query_fg[q][p]).collect();
                    if fg.is_empty() {
                        continue;
                    }
                    let anchors: Vec<usize> = sample_distinct(rng, fg.len(), cfg.anchors).into_iter().map(|i| fg[i]).collect();
                    for vi in sample_distinct(rng, st.views.len(), cfg.views_per_query) {
                        let v = st.views[vi];
                        let zq = &st.zdata[q * nq * d..(q + 1) * nq * d];
                        let row = (qn + vi) * nq;
                        let zv = &st.zdata[row * d..(row + nq) * d];
                        let mut tables = pseudo_correspondences(zq, zv, d, &anchors, &shape.valid[v]);
                        let (pool, extra) = pool_for(g, rng, row)?;
                        tables.extend_negatives(&extra, cfg.negatives, rng);
                        if tables.negatives.iter().any(Vec::is_empty) {
                            continue;
                        }
                        let rows: Vec<usize> = anchors.iter().map(|&a| q * nq + a).collect();
                        let za = g.gather_rows(st.z, &rows)?;
                        qv_terms.push(contrastive_alignment_loss(g, za, pool, &tables, cfg.tau)?);
                    }
                }
            }
            if cfg.use_vv && st.views.len() > 1 {
                for _ in 0..cfg.view_pairs {
                    let pick = sample_distinct(rng, st.views.len(), 2);
                    let (ia, ib) = if rng.gen_bool(0.5) { (pick[0], pick[1]) } else { (pick[1], pick[0]) };
                    let (va, vb) = (st.views[ia], st.views[ib]);
                    let pairs = shape.view_pairs(va, vb, res);
                    let Some(mut tables) = ground_truth_tables(&pairs, &shape.valid[vb], cfg.anchors, rng) else {
                        continue;
                    };
                    let (pool, extra) = pool_for(g, rng, (qn + ib) * nq)?;
                    tables.extend_negatives(&extra, cfg.negatives, rng);
                    if tables.negatives.iter().any(Vec::is_empty) {
                        continue;
                    }
                    let rows: Vec<usize> = tables.anchors.iter().map(|&a| (qn + ia) * nq + a).collect();
                    let za = g.gather_rows(st.z, &rows)?;
                    vv_terms.push(contrastive_alignment_loss(g, za, pool, &tables, cfg.tau)?);
                }
            }
        }
        Ok((mean_of(g, &qv_terms)?, mean_of(g, &vv_terms)?))
    }

    fn dump(&self, data: &DataCache, split: Split, batch: &[Group], losses: StepLosses) -> Result<()> {
        let Some(dir) = &self.dump_dir else {
            return Ok(());
        };
        let queries = data.queries(split);
        let dump = BatchDump {
            losses,
            queries: batch.iter().flat_map(|g| g.queries.iter().map(|&q| queries[q].id.as_str())).collect(),
            shapes: batch.iter().map(|g| data.shapes[g.shape].id.as_str()).collect(),
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join("nonfinite_batch.json"), serde_json::to_string_pretty(&dump)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_bce: f64,
    pub loss_qv: f64,
    pub loss_vv: f64,
    pub loss_box: f64,
    pub auc_val: Option<f64>,
    pub acc_val: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss_bce,loss_qv,loss_vv,loss_box,auc_val,acc_val";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.loss_bce,
            self.loss_qv,
            self.loss_vv,
            self.loss_box,
            opt(self.auc_val),
            opt(self.acc_val)
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `model.ckpt` (rewritten each epoch) and `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub verbose: bool,
}

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const METRICS_NAME: &str = "metrics.csv";

/// Epoch-level RNG; depends only on the seed and the epoch so a resumed
/// run replays the same draws.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Trains on the `train` split of `data`, scoring `val` after each epoch
/// when enabled and present.
pub fn train(data: &DataCache, cfg: &TrainConfig, opts: &TrainOptions) -> Result<(Model, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let (mut trainer, start) = match &opts.resume {
        Some(path) => {
            let (model, adam, epoch) = Model::load_with(path, cfg)?;
            (
                Trainer {
                    model,
                    adam,
                    dump_dir: None,
                },
                epoch,
            )
        }
        None => (Trainer::new(Model::init(cfg)?), 0),
    };
    trainer.dump_dir = opts.out_dir.clone();
    let queries = data.queries(Split::Train);
    if queries.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_NAME);
            let fresh = start == 0 || !path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path)?;
            if fresh {
                writeln!(f, "{}", EpochMetrics::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::new();
    for epoch in start + 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = epoch_batches(queries, cfg.group_size, cfg.batch_size, &mut rng);
        let mut sum = StepLosses::default();
        for batch in &batches {
            let l = trainer.step(data, Split::Train, batch, true, &mut rng)?;
            sum.bce += l.bce;
            sum.qv += l.qv;
            sum.vv += l.vv;
            sum.bbox += l.bbox;
        }
        let n = batches.len() as f64;
        let (auc_val, acc_val) = if cfg.validate && !data.queries(Split::Val).is_empty() {
            match crate::eval::evaluate(&trainer.model, data, Split::Val) {
                Ok((r, _)) => (Some(r.auc), Some(r.accuracy)),
                Err(Error::Undefined(_)) => (None, None),
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        let m = EpochMetrics {
            epoch,
            loss_bce: sum.bce / n,
            loss_qv: sum.qv / n,
            loss_vv: sum.vv / n,
            loss_box: sum.bbox / n,
            auc_val,
            acc_val,
        };
        if opts.verbose {
            eprintln!("{}", m.csv_row());
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", m.csv_row())?;
        }
        if let Some(dir) = &opts.out_dir {
            trainer.model.save(&dir.join(CHECKPOINT_NAME), Some(&trainer.adam), epoch)?;
        }
        history.push(m);
    }
    Ok((trainer.model, history))
}
