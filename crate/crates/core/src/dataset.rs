//! Benchmark generation: reference view sets, normal and anomalous query
//! renders, shape-disjoint splits, and the on-disk manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! shapes/<id>/views/v00.pgm .. v19.pgm   8-bit grayscale reference renders
//! shapes/<id>/depth/v00.pgm .. v19.pgm   16-bit depth, value / 10000
//! shapes/<id>/poses.json
//! queries/<split>/<sample-id>.pgm
//! manifest.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{
    apply_broken, apply_missing, apply_positional, apply_rotational, apply_swap, qc_plausibility,
    AnomalyKind, AnomalyParams, AnomalyRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{build_normalized_object, part_adjacency, Family, Mesh, PartGraph, EPS_CONTACT};
use crate::pgm::{self, Pgm};
use crate::render::{
    anomaly_visible, iou_view_filter, mask_bbox, rasterize, sample_query_camera, sample_reference_cameras,
    CameraPose, Intrinsics, RenderOptions, RenderedView, DEFAULT_FOV_DEG, REFERENCE_VIEWS,
};

pub const MANIFEST_VERSION: u32 = 1;
/// Range of the per-part gray level used for query renders.
pub const QUERY_ALBEDO_RANGE: (f32, f32) = (0.3, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub shapes: usize,
    /// Train / val / test fractions; must sum to 1.
    pub split_fractions: [f64; 3],
    pub queries_per_shape: usize,
    /// Fraction of anomalous queries, applied within each split.
    pub anomaly_ratio: f64,
    pub resolution: usize,
    pub fov_deg: f64,
    /// Camera draws per anomalous shape before it is discarded.
    pub camera_attempts: usize,
    /// Part choices tried per anomaly kind before giving up on a query.
    pub part_attempts: usize,
    pub families: Vec<Family>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            shapes: 250,
            split_fractions: [0.8, 0.1, 0.1],
            queries_per_shape: 8,
            anomaly_ratio: 0.56,
            resolution: 64,
            fov_deg: DEFAULT_FOV_DEG,
            camera_attempts: 4,
            part_attempts: 4,
            families: Family::ALL.to_vec(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.shapes == 0 || self.queries_per_shape == 0 {
            return bad("shapes and queries_per_shape must be positive");
        }
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return bad("resolution must be a positive multiple of 8");
        }
        if self.split_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split_fractions must be in [0, 1] and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.anomaly_ratio) {
            return bad("anomaly_ratio must be in [0, 1]");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg must be in (0, 180)");
        }
        if self.camera_attempts == 0 || self.part_attempts == 0 {
            return bad("attempt budgets must be positive");
        }
        if self.families.is_empty() {
            return bad("families must not be empty");
        }
        Ok(())
    }

    /// Exact shape counts per split; val and test are rounded, train takes the rest.
    pub fn split_counts(&self) -> [usize; 3] {
        let val = (self.shapes as f64 * self.split_fractions[1]).round() as usize;
        let test = (self.shapes as f64 * self.split_fractions[2]).round() as usize;
        let val = val.min(self.shapes);
        let test = test.min(self.shapes - val);
        [self.shapes - val - test, val, test]
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.resolution, self.fov_deg)
    }

    /// Anomalous queries among the first `g` queries of a split.
    pub fn anomalies_before(&self, g: usize) -> usize {
        (g as f64 * self.anomaly_ratio + 1e-9).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub family: Family,
    pub geometry_seed: u64,
    pub split: Split,
    pub views: Vec<String>,
    pub depth: Vec<String>,
    pub poses: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub shape_id: String,
    pub query: String,
    pub label: u8,
    pub anomaly: Option<AnomalyRecord>,
    /// Pixel box `[x0, y0, x1, y1)` of the anomalous part.
    pub bbox: Option<[u32; 4]>,
    /// Diagnostic only; never fed to a model.
    pub query_pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: GenerationConfig,
    pub shapes: Vec<ShapeEntry>,
    pub splits: BTreeMap<Split, Vec<Sample>>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn shape(&self, id: &str) -> Result<&ShapeEntry> {
        self.shapes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Validation(format!("unknown shape `{id}`")))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Reference renders of one shape, grayscale single channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<f32>>,
    pub depth: Vec<Vec<f32>>,
    pub poses: Vec<CameraPose>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// View `i` with the gray channel cloned into three channels (CHW).
    pub fn rgb(&self, i: usize) -> Vec<f32> {
        gray_to_rgb(&self.images[i])
    }
}

pub fn gray_to_rgb(gray: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(gray.len() * 3);
    for _ in 0..3 {
        out.extend_from_slice(gray);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    /// 3 x H x W in [0, 1].
    pub query: Vec<f32>,
    pub views: ViewSet,
    pub label: u8,
    pub bbox: Option<[u32; 4]>,
}

pub fn load_viewset(manifest: &Manifest, shape_id: &str) -> Result<ViewSet> {
    let entry = manifest.shape(shape_id)?;
    let poses_path = manifest.path(&entry.poses);
    let text = fs::read_to_string(&poses_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(poses_path.clone()),
        _ => Error::Io(e),
    })?;
    let poses: Vec<CameraPose> = serde_json::from_str(&text)?;
    let mut images = Vec::new();
    let mut depth = Vec::new();
    let (mut width, mut height) = (0, 0);
    for (v, d) in entry.views.iter().zip(&entry.depth) {
        let img = pgm::read(&manifest.path(v))?;
        let dep = pgm::read(&manifest.path(d))?;
        width = img.width;
        height = img.height;
        images.push(img.to_unit());
        depth.push(dep.to_depth());
    }
    if poses.len() != images.len() {
        return Err(Error::Validation(format!(
            "shape {shape_id}: {} poses for {} views",
            poses.len(),
            images.len()
        )));
    }
    Ok(ViewSet {
        width,
        height,
        images,
        depth,
        poses,
    })
}

pub fn load_query(manifest: &Manifest, sample: &Sample) -> Result<Vec<f32>> {
    Ok(gray_to_rgb(&pgm::read(&manifest.path(&sample.query))?.to_unit()))
}

pub fn load_sample(manifest: &Manifest, split: Split, index: usize) -> Result<LoadedSample> {
    let samples = manifest.samples(split);
    let sample = samples.get(index).ok_or_else(|| {
        Error::Config(format!("sample index {index} out of range for {split} ({} samples)", samples.len()))
    })?;
    Ok(LoadedSample {
        query: load_query(manifest, sample)?,
        views: load_viewset(manifest, &sample.shape_id)?,
        label: sample.label,
        bbox: sample.bbox,
    })
}

/// Assigns each shape index to a split from a hash of (seed, index); when the
/// preferred split is full the next one with room is used, so counts are exact.
pub fn assign_splits(seed: u64, counts: [usize; 3], fractions: [f64; 3]) -> Vec<Split> {
    let total: usize = counts.iter().sum();
    let mut left = counts;
    (0..total)
        .map(|i| {
            let digest = Sha256::digest(format!("{seed}:{i}").as_bytes());
            let mut head = [0u8; 8];
            head.copy_from_slice(&digest[..8]);
            let u = u64::from_le_bytes(head) as f64 / u64::MAX as f64;
            let mut pick = 2;
            let mut acc = 0.0;
            for (s, f) in fractions.iter().enumerate() {
                acc += f;
                if u < acc {
                    pick = s;
                    break;
                }
            }
            while left[pick] == 0 {
                pick = (pick + 1) % 3;
            }
            left[pick] -= 1;
            Split::ALL[pick]
        })
        .collect()
}

fn shape_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
struct ShapePlan {
    id: String,
    family: Family,
    geometry_seed: u64,
    split: Split,
}

fn plan_shapes(config: &GenerationConfig, seed: u64) -> Vec<ShapePlan> {
    let splits = assign_splits(seed, config.split_counts(), config.split_fractions);
    let mut rng = shape_rng(seed, 0);
    splits
        .into_iter()
        .enumerate()
        .map(|(i, split)| ShapePlan {
            id: format!("s{i:04}"),
            family: config.families[i % config.families.len()],
            geometry_seed: rng.gen(),
            split,
        })
        .collect()
}

/// One successfully rendered anomalous query.
struct AnomalyRender {
    view: RenderedView,
    record: AnomalyRecord,
    bbox: [u32; 4],
}

/// Applies one deformation of the given kind; swaps need a donor mesh.
pub fn deform<R: Rng + ?Sized>(
    mesh: &Mesh,
    graph: &PartGraph,
    kind: AnomalyKind,
    part: &str,
    donor: Option<(&str, &Mesh)>,
    rng: &mut R,
) -> Result<(Mesh, AnomalyRecord)> {
    match kind {
        AnomalyKind::Positional => apply_positional(mesh, part, rng),
        AnomalyKind::Rotational => apply_rotational(mesh, part, graph, rng),
        AnomalyKind::Broken => apply_broken(mesh, part, rng),
        AnomalyKind::Missing => apply_missing(mesh, part),
        AnomalyKind::Swapped => {
            let (donor_id, donor_mesh) =
                donor.ok_or_else(|| Error::Config("swap requires a donor shape".into()))?;
            let (m, mut rec) = apply_swap(mesh, donor_mesh, part, rng)?;
            if let AnomalyParams::Swapped { donor_shape, .. } = &mut rec.params {
                *donor_shape = donor_id.to_string();
            }
            Ok((m, rec))
        }
    }
}

/// Renders the deformed object from up to `attempts` random cameras and
/// returns the first view in which the part is visible and its mask changed
/// enough (IoU <= 0.8). For a missing part the mask of the intact object
/// is used for visibility and the box.
fn render_anomaly<R: Rng + ?Sized>(
    before_mesh: &Mesh,
    after_mesh: &Mesh,
    record: &AnomalyRecord,
    opts: &RenderOptions,
    intrinsics: Intrinsics,
    attempts: usize,
    rng: &mut R,
) -> Result<Option<AnomalyRender>> {
    for _ in 0..attempts {
        let pose = sample_query_camera(rng, intrinsics);
        let before = rasterize(before_mesh, &pose, opts);
        let after = rasterize(after_mesh, &pose, opts);
        let reference = if record.kind == AnomalyKind::Missing {
            &before
        } else {
            &after
        };
        if anomaly_visible(reference, &record.part)? <= 0.0 {
            continue;
        }
        let mask_before = before.masks.as_ref().map(|m| m.visible_mask(&record.part)).unwrap_or_default();
        let mask_after = after.masks.as_ref().map(|m| m.visible_mask(&record.part)).unwrap_or_default();
        if !iou_view_filter(&mask_before, &mask_after)? {
            continue;
        }
        let mask = if record.kind == AnomalyKind::Missing {
            mask_before
        } else {
            mask_after
        };
        let Some(bbox) = mask_bbox(&mask, after.width) else {
            continue;
        };
        return Ok(Some(AnomalyRender {
            view: after,
            record: record.clone(),
            bbox,
        }));
    }
    Ok(None)
}

struct ShapeContext<'a> {
    mesh: Mesh,
    graph: PartGraph,
    donors: Vec<&'a ShapePlan>,
}

fn try_kind<R: Rng + ?Sized>(
    ctx: &ShapeContext<'_>,
    kind: AnomalyKind,
    config: &GenerationConfig,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<Option<AnomalyRender>> {
    let mut parts = ctx.mesh.part_names();
    parts.shuffle(rng);
    for part in parts.iter().take(config.part_attempts) {
        let donor_mesh;
        let donor = if kind == AnomalyKind::Swapped {
            let Some(d) = ctx.donors.choose(rng) else {
                return Ok(None);
            };
            donor_mesh = build_normalized_object(d.geometry_seed, d.family);
            if !donor_mesh.has_part(part) {
                continue;
            }
            Some((d.id.as_str(), &donor_mesh))
        } else {
            None
        };
        let (after, record) = match deform(&ctx.mesh, &ctx.graph, kind, part, donor, rng) {
            Ok(x) => x,
            Err(
                Error::NoConnectionPoint(_)
                | Error::Unbreakable { .. }
                | Error::NoOpSwap { .. }
                | Error::TooFewParts(_)
                | Error::UnknownPart(_),
            ) => continue,
            Err(e) => return Err(e),
        };
        if !qc_plausibility(&after, &record, &ctx.graph) {
            continue;
        }
        if let Some(r) = render_anomaly(&ctx.mesh, &after, &record, opts, config.intrinsics(), config.camera_attempts, rng)? {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

#[derive(Default)]
struct SplitState {
    queries: usize,
    anomalies: usize,
    debt: usize,
    kinds: [usize; 5],
}

fn write_views(out: &Path, plan: &ShapePlan, mesh: &Mesh, intrinsics: Intrinsics) -> Result<ShapeEntry> {
    let base = format!("shapes/{}", plan.id);
    let cams = sample_reference_cameras(intrinsics);
    let mut views = Vec::new();
    let mut depth = Vec::new();
    for (i, pose) in cams.iter().enumerate() {
        let r = rasterize(mesh, pose, &RenderOptions::default());
        let v = format!("{base}/views/v{i:02}.pgm");
        let d = format!("{base}/depth/v{i:02}.pgm");
        pgm::write(&out.join(&v), &Pgm::from_unit(r.width, r.height, &r.image))?;
        pgm::write(&out.join(&d), &Pgm::from_depth(r.width, r.height, &r.depth))?;
        views.push(v);
        depth.push(d);
    }
    let poses = format!("{base}/poses.json");
    let mut text = serde_json::to_string_pretty(&cams)?;
    text.push('\n');
    fs::write(out.join(&poses), text)?;
    Ok(ShapeEntry {
        id: plan.id.clone(),
        family: plan.family,
        geometry_seed: plan.geometry_seed,
        split: plan.split,
        views,
        depth,
        poses,
    })
}

/// Generates the full benchmark into `out` and writes `manifest.json`.
///
/// Anomalous slots are spread evenly over each split's query stream and each
/// one takes the least-used anomaly kind, so per-split kind counts differ by
/// at most one. A slot whose kinds all fail on the current shape is carried
/// over to the next query of the same split.
pub fn build_dataset(config: &GenerationConfig, seed: u64, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let plans = plan_shapes(config, seed);
    let intrinsics = config.intrinsics();
    let mut states: [SplitState; 3] = Default::default();
    let mut shapes = Vec::with_capacity(plans.len());
    let mut splits: BTreeMap<Split, Vec<Sample>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();

    for (idx, plan) in plans.iter().enumerate() {
        let mut rng = shape_rng(seed, idx as u64 + 1);
        let mesh = build_normalized_object(plan.geometry_seed, plan.family);
        shapes.push(write_views(out, plan, &mesh, intrinsics)?);
        let ctx = ShapeContext {
            graph: part_adjacency(&mesh, EPS_CONTACT),
            donors: plans.iter().filter(|p| p.split == plan.split && p.id != plan.id).collect(),
            mesh,
        };
        let state = &mut states[plan.split.index()];
        for q in 0..config.queries_per_shape {
            let g = state.queries;
            state.queries += 1;
            let scheduled = config.anomalies_before(g + 1) > config.anomalies_before(g);
            if scheduled {
                state.debt += 1;
            }
            let mut albedo = BTreeMap::new();
            for name in ctx.mesh.part_names() {
                albedo.insert(name, rng.gen_range(QUERY_ALBEDO_RANGE.0..=QUERY_ALBEDO_RANGE.1));
            }
            let opts = RenderOptions { albedo, with_masks: true };

            let mut rendered = None;
            if state.debt > 0 {
                let min = *state.kinds.iter().min().unwrap_or(&0);
                for kind in AnomalyKind::ALL.into_iter().filter(|k| state.kinds[k.index()] == min) {
                    if let Some(r) = try_kind(&ctx, kind, config, &opts, &mut rng)? {
                        rendered = Some(r);
                        break;
                    }
                }
            }
            let sample_id = format!("{}_q{q}", plan.id);
            let query = format!("queries/{}/{sample_id}.pgm", plan.split);
            let sample = match rendered {
                Some(r) => {
                    state.debt -= 1;
                    state.anomalies += 1;
                    state.kinds[r.record.kind.index()] += 1;
                    pgm::write(&out.join(&query), &Pgm::from_unit(r.view.width, r.view.height, &r.view.image))?;
                    Sample {
                        id: sample_id,
                        shape_id: plan.id.clone(),
                        query,
                        label: 1,
                        anomaly: Some(r.record),
                        bbox: Some(r.bbox),
                        query_pose: r.view.pose,
                    }
                }
                None => {
                    let pose = sample_query_camera(&mut rng, intrinsics);
                    let view = rasterize(&ctx.mesh, &pose, &RenderOptions { with_masks: false, ..opts });
                    pgm::write(&out.join(&query), &Pgm::from_unit(view.width, view.height, &view.image))?;
                    Sample {
                        id: sample_id,
                        shape_id: plan.id.clone(),
                        query,
                        label: 0,
                        anomaly: None,
                        bbox: None,
                        query_pose: pose,
                    }
                }
            };
            splits.get_mut(&plan.split).expect("all splits present").push(sample);
        }
    }

    for split in Split::ALL {
        let s = &states[split.index()];
        if s.debt > 0 {
            return Err(Error::Generation(format!(
                "{split}: {} of {} anomalies produced ({} outstanding), kind counts {:?}",
                s.anomalies,
                s.anomalies + s.debt,
                s.debt,
                s.kinds
            )));
        }
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        shapes,
        splits,
        root: out.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Checks every manifest contract. Missing files are reported as
/// `Error::MissingFile`; any other violation as `Error::Validation`.
pub fn validate_manifest(manifest: &Manifest) -> Result<()> {
    let fail = |m: String| Err(Error::Validation(m));
    let res = manifest.config.resolution as u32;
    let mut by_split: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for shape in &manifest.shapes {
        if shape.views.len() != REFERENCE_VIEWS || shape.depth.len() != REFERENCE_VIEWS {
            return fail(format!("shape {} has {} views", shape.id, shape.views.len()));
        }
        for rel in shape.views.iter().chain(&shape.depth).chain(std::iter::once(&shape.poses)) {
            let p = manifest.path(rel);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
        by_split.entry(shape.split).or_default().insert(shape.id.as_str());
    }
    let sets: Vec<&BTreeSet<&str>> = by_split.values().collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if let Some(id) = sets[i].intersection(sets[j]).next() {
                return fail(format!("shape {id} appears in two splits"));
            }
        }
    }
    let mut seen = BTreeSet::new();
    for (split, samples) in &manifest.splits {
        for s in samples {
            if !seen.insert(s.id.as_str()) {
                return fail(format!("duplicate sample id {}", s.id));
            }
            let shape = manifest.shape(&s.shape_id)?;
            if shape.split != *split {
                return fail(format!("sample {} in {split} uses {} shape {}", s.id, shape.split, shape.id));
            }
            let p = manifest.path(&s.query);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
            let has_record = s.anomaly.is_some();
            if (s.label == 1) != has_record || has_record != s.bbox.is_some() || s.label > 1 {
                return fail(format!("sample {}: label, anomaly record and bbox disagree", s.id));
            }
            if let Some([x0, y0, x1, y1]) = s.bbox {
                if !(x0 < x1 && y0 < y1 && x1 <= res && y1 <= res) {
                    return fail(format!("sample {}: bbox {:?} invalid", s.id, s.bbox));
                }
            }
            if let Some(rec) = &s.anomaly {
                if !rec.params_in_range() {
                    return fail(format!("sample {}: anomaly parameters out of range", s.id));
                }
            }
        }
    }
    Ok(())
}

/// Per-split, per-kind anomaly counts (kind order as `AnomalyKind::ALL`).
pub fn kind_histogram(manifest: &Manifest) -> BTreeMap<Split, [usize; 5]> {
    manifest
        .splits
        .iter()
        .map(|(split, samples)| {
            let mut h = [0usize; 5];
            for rec in samples.iter().filter_map(|s| s.anomaly.as_ref()) {
                h[rec.kind.index()] += 1;
            }
            (*split, h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_are_exact() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.split_counts(), [200, 25, 25]);
        let s = assign_splits(3, [200, 25, 25], cfg.split_fractions);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 25);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 25);
    }

    #[test]
    fn anomaly_schedule_matches_ratio() {
        let cfg = GenerationConfig {
            anomaly_ratio: 0.55,
            ..Default::default()
        };
        assert_eq!(cfg.anomalies_before(160), 88);
        assert_eq!(cfg.anomalies_before(20), 11);
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = GenerationConfig {
            resolution: 60,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GenerationConfig {
            split_fractions: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
