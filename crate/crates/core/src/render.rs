//! Hemisphere cameras, a flat-shaded z-buffer rasterizer, visibility and IoU
//! view filters, unprojection, and dense view-to-view correspondences.
//!
//! Conventions: world up is +y, elevation is measured from the horizontal
//! plane, every camera looks at the origin. Camera frame is x right, y down,
//! z forward; pixel (col, row) has its centre at (col + 0.5, row + 0.5).
//! Depth is the camera-axis z coordinate, 0 marks background.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::edge_function;
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};

pub const CAMERA_RADIUS: f64 = 2.5;
pub const REFERENCE_VIEWS: usize = 20;
pub const ELEVATION_RANGE: (f64, f64) = (PI / 9.0, 2.0 * PI / 9.0);
pub const AZIMUTH_STEP: f64 = PI / 10.0;
/// Vertical field of view of the benchmark cameras; wide enough that a
/// normalized object never leaves the frame at radius 2.5.
pub const DEFAULT_FOV_DEG: f64 = 72.0;
/// Occlusion tolerance for correspondences, 1% of the camera radius.
pub const DEPTH_TOLERANCE: f64 = 0.01 * CAMERA_RADIUS;
pub const REFERENCE_ALBEDO: f32 = 0.8;

const NEAR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn from_fov(res: usize, fov_deg: f64) -> Self {
        let f = (res as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            width: res,
            height: res,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub intrinsics: Intrinsics,
    /// World-to-camera rigid transform, row-major 4x4.
    pub extrinsic: [f64; 16],
}

impl CameraPose {
    pub fn look_at_origin(azimuth: f64, elevation: f64, radius: f64, intrinsics: Intrinsics) -> Self {
        let c = camera_center(azimuth, elevation, radius);
        let forward = -c.normalize();
        let up = Vec3::new(0.0, 1.0, 0.0);
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * c);
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[(i, j)];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        CameraPose {
            azimuth,
            elevation,
            radius,
            intrinsics,
            extrinsic: m,
        }
    }

    pub fn extrinsic_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.extrinsic)
    }

    fn rotation(&self) -> Matrix3<f64> {
        let e = &self.extrinsic;
        Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10])
    }

    fn translation(&self) -> Vec3 {
        Vec3::new(self.extrinsic[3], self.extrinsic[7], self.extrinsic[11])
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Continuous pixel coordinates and camera-axis depth of a world point.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        let k = &self.intrinsics;
        (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z)
    }
}

pub fn camera_center(azimuth: f64, elevation: f64, radius: f64) -> Vec3 {
    Vec3::new(
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    )
}

/// Centre of pixel (col, row) in continuous coordinates.
pub fn pixel_center(col: usize, row: usize) -> (f64, f64) {
    (col as f64 + 0.5, row as f64 + 0.5)
}

/// The fixed 20-view reference grid: azimuth steps of pi/10 with elevations
/// alternating between pi/9 and 2pi/9.
pub fn sample_reference_cameras(intrinsics: Intrinsics) -> Vec<CameraPose> {
    (0..REFERENCE_VIEWS)
        .map(|i| {
            let elevation = if i % 2 == 0 {
                ELEVATION_RANGE.0
            } else {
                ELEVATION_RANGE.1
            };
            CameraPose::look_at_origin(i as f64 * AZIMUTH_STEP, elevation, CAMERA_RADIUS, intrinsics)
        })
        .collect()
}

/// Azimuth on the pi/10 grid, elevation uniform in [pi/9, 2pi/9].
pub fn sample_query_camera<R: Rng + ?Sized>(rng: &mut R, intrinsics: Intrinsics) -> CameraPose {
    let step = rng.gen_range(0..REFERENCE_VIEWS);
    let elevation = rng.gen_range(ELEVATION_RANGE.0..=ELEVATION_RANGE.1);
    CameraPose::look_at_origin(step as f64 * AZIMUTH_STEP, elevation, CAMERA_RADIUS, intrinsics)
}

/// Per-pixel part labels plus each part's unoccluded silhouette size.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMasks {
    pub names: Vec<String>,
    /// Index into `names` of the visible part, -1 for background.
    pub labels: Vec<i16>,
    pub silhouette_px: Vec<usize>,
}

impl PartMasks {
    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn visible_mask(&self, name: &str) -> Vec<bool> {
        match self.part_index(name) {
            Some(i) => self.labels.iter().map(|&l| l == i as i16).collect(),
            None => vec![false; self.labels.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub pose: CameraPose,
    pub masks: Option<PartMasks>,
}

impl RenderedView {
    pub fn is_foreground(&self, col: usize, row: usize) -> bool {
        self.depth[row * self.width + col] > 0.0
    }

    pub fn foreground_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RenderOptions {
    /// Per-part albedo; parts not listed use `REFERENCE_ALBEDO`.
    pub albedo: BTreeMap<String, f32>,
    pub with_masks: bool,
}

struct Raster {
    depth: Vec<f64>,
    tri: Vec<u32>,
}

fn raster_faces(mesh: &Mesh, faces: &[usize], pose: &CameraPose) -> Raster {
    let k = &pose.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut tri = vec![u32::MAX; w * h];
    for &fi in faces {
        let f = mesh.faces[fi];
        let mut sx = [0.0; 3];
        let mut sy = [0.0; 3];
        let mut sz = [0.0; 3];
        let mut behind = false;
        for c in 0..3 {
            let (u, v, z) = pose.project(&mesh.vertices[f[c] as usize]);
            if z <= NEAR {
                behind = true;
            }
            sx[c] = u;
            sy[c] = v;
            sz[c] = z;
        }
        if behind {
            continue;
        }
        let area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sy[1] - sy[0]) * (sx[2] - sx[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = sx.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as isize;
        let max_x = sx.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64) as isize;
        let min_y = sy.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as isize;
        let max_y = sy.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64) as isize;
        for row in min_y..max_y {
            for col in min_x..max_x {
                let px = col as f64 + 0.5;
                let py = row as f64 + 0.5;
                let mut b = [0.0; 3];
                let mut inside = true;
                for e in 0..3 {
                    let (i, j) = ((e + 1) % 3, (e + 2) % 3);
                    let we = edge_function((sx[i], sy[i]), (sx[j], sy[j]), (px, py)) / area;
                    if we < 0.0 {
                        inside = false;
                        break;
                    }
                    b[e] = we;
                }
                if !inside {
                    continue;
                }
                let inv_z = b[0] / sz[0] + b[1] / sz[1] + b[2] / sz[2];
                let z = 1.0 / inv_z;
                let idx = row as usize * w + col as usize;
                if z < depth[idx] {
                    depth[idx] = z;
                    tri[idx] = fi as u32;
                }
            }
        }
    }
    Raster { depth, tri }
}

/// Z-buffered flat-shaded render with camera-axis depth.
pub fn rasterize(mesh: &Mesh, pose: &CameraPose, opts: &RenderOptions) -> RenderedView {
    let all: Vec<usize> = (0..mesh.faces.len()).collect();
    let raster = raster_faces(mesh, &all, pose);
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    let owner = mesh.part_of_face();
    let names: Vec<String> = mesh.part_names();
    let albedo: Vec<f32> = names
        .iter()
        .map(|n| opts.albedo.get(n).copied().unwrap_or(REFERENCE_ALBEDO))
        .collect();
    let view_dir = -pose.center().normalize();
    let mut image = vec![0.0f32; w * h];
    let mut depth = vec![0.0f32; w * h];
    let mut labels = vec![-1i16; w * h];
    for idx in 0..w * h {
        let t = raster.tri[idx];
        if t == u32::MAX {
            continue;
        }
        let f = mesh.faces[t as usize];
        let a = mesh.vertices[f[0] as usize];
        let n = (mesh.vertices[f[1] as usize] - a)
            .cross(&(mesh.vertices[f[2] as usize] - a))
            .normalize();
        let lambert = n.dot(&view_dir).abs() as f32;
        let part = owner[t as usize];
        image[idx] = albedo[part] * (0.25 + 0.75 * lambert);
        depth[idx] = raster.depth[idx] as f32;
        labels[idx] = part as i16;
    }
    let masks = opts.with_masks.then(|| {
        let silhouette_px = mesh
            .parts
            .values()
            .map(|faces| {
                raster_faces(mesh, faces, pose)
                    .tri
                    .iter()
                    .filter(|&&t| t != u32::MAX)
                    .count()
            })
            .collect();
        PartMasks {
            names,
            labels,
            silhouette_px,
        }
    });
    RenderedView {
        width: w,
        height: h,
        image,
        depth,
        pose: pose.clone(),
        masks,
    }
}

/// Keep iff IoU(before, after) <= 0.8. Two empty masks count as IoU 1.
pub fn iou_view_filter(mask_before: &[bool], mask_after: &[bool]) -> Result<bool> {
    if mask_before.len() != mask_after.len() {
        return Err(Error::Shape {
            op: "iou_view_filter",
            detail: format!("{} vs {}", mask_before.len(), mask_after.len()),
        });
    }
    let inter = mask_before.iter().zip(mask_after).filter(|(a, b)| **a && **b).count();
    let union = mask_before.iter().zip(mask_after).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        return Ok(false);
    }
    // inter/union <= 4/5 without rounding
    Ok(5 * inter <= 4 * union)
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of the part's unoccluded silhouette that survives the z-test.
pub fn anomaly_visible(view: &RenderedView, part: &str) -> Result<f64> {
    let masks = view
        .masks
        .as_ref()
        .ok_or_else(|| Error::Config("view rendered without part masks".into()))?;
    let Some(i) = masks.part_index(part) else {
        return Ok(0.0);
    };
    let total = masks.silhouette_px[i];
    if total == 0 {
        return Ok(0.0);
    }
    let visible = masks.labels.iter().filter(|&&l| l == i as i16).count();
    Ok((visible as f64 / total as f64).min(1.0))
}

/// Tight pixel box `[x0, y0, x1, y1)` of a mask, if non-empty.
pub fn mask_bbox(mask: &[bool], width: usize) -> Option<[u32; 4]> {
    let mut b: Option<[u32; 4]> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        b = Some(match b {
            None => [x, y, x + 1, y + 1],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
        });
    }
    b
}

/// World point on the ray through continuous pixel `(u, v)` at camera-axis depth.
pub fn unproject(u: f64, v: f64, depth: f64, pose: &CameraPose) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    let k = &pose.intrinsics;
    let cam = Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
    Ok(pose.camera_to_world(&cam))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub view_a: usize,
    pub view_b: usize,
    /// Flat pixel index `row * width + col` in view a.
    pub pixel_a: usize,
    pub pixel_b: usize,
}

/// Negatives for an anchor are every foreground pixel of view b except its match.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeSampler {
    pub foreground_b: Vec<usize>,
}

impl NegativeSampler {
    pub fn sample<R: Rng + ?Sized>(&self, positive: usize, count: usize, rng: &mut R) -> Vec<usize> {
        let pool: Vec<usize> = self.foreground_b.iter().copied().filter(|&p| p != positive).collect();
        if pool.len() <= count {
            return pool;
        }
        rand::seq::index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }
}

/// Reprojects pixel (col, row) of view a into view b; `None` if it leaves the
/// image, lands on background, or is occluded in b.
pub fn reproject_pixel(a: &RenderedView, b: &RenderedView, col: usize, row: usize) -> Option<(usize, f64, f64)> {
    let d = a.depth[row * a.width + col];
    if d <= 0.0 {
        return None;
    }
    let (u, v) = pixel_center(col, row);
    let x = unproject(u, v, d as f64, &a.pose).ok()?;
    let (ub, vb, zb) = b.pose.project(&x);
    if zb <= 0.0 || ub < 0.0 || vb < 0.0 {
        return None;
    }
    let (cb, rb) = (ub.floor() as usize, vb.floor() as usize);
    if cb >= b.width || rb >= b.height {
        return None;
    }
    let db = b.depth[rb * b.width + cb];
    if db <= 0.0 || (db as f64 - zb).abs() > DEPTH_TOLERANCE {
        return None;
    }
    Some((rb * b.width + cb, ub, vb))
}

/// Dense ground-truth correspondences from foreground pixels of a into b.
pub fn view_view_correspondences(
    a: &RenderedView,
    b: &RenderedView,
    ids: (usize, usize),
) -> (Vec<CorrespondencePair>, NegativeSampler) {
    let mut positives = Vec::new();
    for row in 0..a.height {
        for col in 0..a.width {
            if let Some((pb, _, _)) = reproject_pixel(a, b, col, row) {
                positives.push(CorrespondencePair {
                    view_a: ids.0,
                    view_b: ids.1,
                    pixel_a: row * a.width + col,
                    pixel_b: pb,
                });
            }
        }
    }
    let foreground_b = (0..b.width * b.height).filter(|&i| b.depth[i] > 0.0).collect();
    (positives, NegativeSampler { foreground_b })
}

/// Centre pixel of patch `p` on a grid with the given stride.
pub fn patch_center_pixel(p: usize, grid_w: usize, stride: usize) -> (usize, usize) {
    let (pc, pr) = (p % grid_w, p / grid_w);
    (pc * stride + stride / 2, pr * stride + stride / 2)
}

/// Patch-level correspondences: each patch centre of a with a valid
/// reprojection maps to the patch of b containing the reprojected point.
pub fn patch_correspondences(a: &RenderedView, b: &RenderedView, stride: usize) -> Vec<(usize, usize)> {
    let gw = a.width / stride;
    let gh = a.height / stride;
    let gwb = b.width / stride;
    let mut out = Vec::new();
    for p in 0..gw * gh {
        let (col, row) = patch_center_pixel(p, gw, stride);
        if let Some((pb, _, _)) = reproject_pixel(a, b, col, row) {
            let (cb, rb) = (pb % b.width, pb / b.width);
            out.push((p, (rb / stride) * gwb + cb / stride));
        }
    }
    out
}
