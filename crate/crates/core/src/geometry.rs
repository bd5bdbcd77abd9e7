//! Parametric multi-part furniture generator and the mesh utilities the
//! anomaly and rendering stages rely on: normalization, part contacts,
//! closed-mesh volume, point containment and surface distance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default contact tolerance in normalized units.
pub const EPS_CONTACT: f64 = 0.01;

const CYLINDER_SEGMENTS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Stool,
    Bench,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Chair, Family::Stool, Family::Bench];

    /// Parts whose removal makes the object structurally meaningless.
    pub fn essential_parts(self) -> &'static [&'static str] {
        &["seat"]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Chair => "chair",
            Family::Stool => "stool",
            Family::Bench => "bench",
        };
        f.write_str(s)
    }
}

/// Triangle soup partitioned into named parts.
///
/// Every face belongs to exactly one part; parts never share vertices, so a
/// part can be moved or removed without touching the rest of the object.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub parts: BTreeMap<String, Vec<usize>>,
}

impl Mesh {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part_names(&self) -> Vec<String> {
        self.parts.keys().cloned().collect()
    }

    pub fn has_part(&self, name: &str) -> bool {
        self.parts.contains_key(name)
    }

    fn require_part(&self, name: &str) -> Result<&Vec<usize>> {
        self.parts
            .get(name)
            .ok_or_else(|| Error::UnknownPart(name.to_string()))
    }

    /// Appends a closed solid as a new part. Face indices are local to `vertices`.
    pub fn push_part(&mut self, name: &str, vertices: &[Vec3], faces: &[[u32; 3]]) {
        let base = self.vertices.len() as u32;
        let first_face = self.faces.len();
        self.vertices.extend_from_slice(vertices);
        self.faces
            .extend(faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        let ids = self.parts.entry(name.to_string()).or_default();
        ids.extend(first_face..self.faces.len());
    }

    /// Sorted unique vertex indices referenced by a part.
    pub fn part_vertex_indices(&self, name: &str) -> Result<Vec<usize>> {
        let faces = self.require_part(name)?;
        let set: BTreeSet<usize> = faces
            .iter()
            .flat_map(|&f| self.faces[f].iter().map(|&v| v as usize))
            .collect();
        Ok(set.into_iter().collect())
    }

    /// Copy of a single part as a standalone mesh with one part of the same name.
    pub fn extract_part(&self, name: &str) -> Result<Mesh> {
        let faces = self.require_part(name)?;
        let mut remap = BTreeMap::new();
        let mut vertices = Vec::new();
        let mut local_faces = Vec::with_capacity(faces.len());
        for &f in faces {
            let mut tri = [0u32; 3];
            for (slot, &v) in tri.iter_mut().zip(self.faces[f].iter()) {
                let next = vertices.len() as u32;
                let id = *remap.entry(v).or_insert_with(|| {
                    vertices.push(self.vertices[v as usize]);
                    next
                });
                *slot = id;
            }
            local_faces.push(tri);
        }
        let mut out = Mesh::new();
        out.push_part(name, &vertices, &local_faces);
        Ok(out)
    }

    /// Mesh containing every part except `name`, with vertices compacted.
    pub fn without_part(&self, name: &str) -> Result<Mesh> {
        self.require_part(name)?;
        let mut out = Mesh::new();
        for part in self.parts.keys().filter(|p| p.as_str() != name) {
            let sub = self.extract_part(part)?;
            out.push_part(part, &sub.vertices, &sub.faces);
        }
        Ok(out)
    }

    /// Replaces (or inserts) part `name` with the single-part geometry `part`.
    pub fn with_part_replaced(&self, name: &str, part: &Mesh) -> Result<Mesh> {
        let mut out = if self.has_part(name) {
            self.without_part(name)?
        } else {
            self.clone()
        };
        out.push_part(name, &part.vertices, &part.faces);
        Ok(out)
    }

    pub fn part_of_face(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.faces.len()];
        for (pi, faces) in self.parts.values().enumerate() {
            for &f in faces {
                owner[f] = pi;
            }
        }
        owner
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        bbox_of(self.vertices.iter())
    }

    pub fn part_bounding_box(&self, name: &str) -> Result<(Vec3, Vec3)> {
        let ids = self.part_vertex_indices(name)?;
        bbox_of(ids.iter().map(|&i| &self.vertices[i]))
            .ok_or_else(|| Error::Degenerate(format!("part {name} has no vertices")))
    }

    /// Enclosed volume by the divergence theorem (outward winding assumed).
    pub fn volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let a = self.vertices[f[0] as usize];
                let b = self.vertices[f[1] as usize];
                let c = self.vertices[f[2] as usize];
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn part_volume(&self, name: &str) -> Result<f64> {
        Ok(self.extract_part(name)?.volume())
    }

    pub fn triangles<'a>(&'a self, faces: &'a [usize]) -> impl Iterator<Item = [Vec3; 3]> + 'a {
        faces.iter().map(move |&f| {
            let t = self.faces[f];
            [
                self.vertices[t[0] as usize],
                self.vertices[t[1] as usize],
                self.vertices[t[2] as usize],
            ]
        })
    }

    /// Every face index is in range and every face is owned by exactly one part.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(bad) = self.faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
            return Err(Error::Degenerate(format!("face {bad:?} out of range")));
        }
        let mut seen = vec![0u8; self.faces.len()];
        for faces in self.parts.values() {
            for &f in faces {
                if f >= seen.len() {
                    return Err(Error::Degenerate(format!("part face {f} out of range")));
                }
                seen[f] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Degenerate("face not owned by exactly one part".into()));
        }
        Ok(())
    }

    /// ASCII OBJ with one `g <part>` group per part (1-based indices).
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for (name, faces) in &self.parts {
            s.push_str(&format!("g {name}\n"));
            for &f in faces {
                let t = self.faces[f];
                s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
            }
        }
        s
    }

    pub fn from_obj(text: &str) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut parts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut current = String::from("default");
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = || Error::Format(format!("obj line {}: {line}", lineno + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .map(|t| t.parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(bad());
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("g") => current = it.next().ok_or_else(bad)?.to_string(),
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            t.split('/')
                                .next()
                                .and_then(|x| x.parse::<u32>().ok())
                                .filter(|&x| x >= 1)
                                .map(|x| x - 1)
                                .ok_or_else(bad)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad());
                    }
                    parts.entry(current.clone()).or_default().push(faces.len());
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        let mesh = Mesh { vertices, faces, parts };
        mesh.check_invariants()?;
        Ok(mesh)
    }
}

fn bbox_of<'a>(mut it: impl Iterator<Item = &'a Vec3>) -> Option<(Vec3, Vec3)> {
    let first = *it.next()?;
    Some(it.fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
}

/// Axis-aligned box with outward-facing triangles.
pub fn box_solid(min: Vec3, max: Vec3) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let v = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let verts = vec![
        v(min.x, min.y, min.z),
        v(max.x, min.y, min.z),
        v(max.x, max.y, min.z),
        v(min.x, max.y, min.z),
        v(min.x, min.y, max.z),
        v(max.x, min.y, max.z),
        v(max.x, max.y, max.z),
        v(min.x, max.y, max.z),
    ];
    let faces = vec![
        [0, 3, 2],
        [0, 2, 1], // -z
        [4, 5, 6],
        [4, 6, 7], // +z
        [0, 1, 5],
        [0, 5, 4], // -y
        [3, 7, 6],
        [3, 6, 2], // +y
        [0, 4, 7],
        [0, 7, 3], // -x
        [1, 2, 6],
        [1, 6, 5], // +x
    ];
    (verts, faces)
}

/// Closed prism approximating a y-aligned cylinder.
pub fn cylinder_y(center_x: f64, center_z: f64, y0: f64, y1: f64, radius: f64) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let n = CYLINDER_SEGMENTS;
    let mut verts = Vec::with_capacity(2 * n + 2);
    for &y in &[y0, y1] {
        for i in 0..n {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            verts.push(Vec3::new(center_x + radius * a.cos(), y, center_z + radius * a.sin()));
        }
    }
    let bottom_c = verts.len() as u32;
    verts.push(Vec3::new(center_x, y0, center_z));
    let top_c = verts.len() as u32;
    verts.push(Vec3::new(center_x, y1, center_z));
    let n32 = n as u32;
    let mut faces = Vec::with_capacity(4 * n);
    for i in 0..n32 {
        let j = (i + 1) % n32;
        // side quad, outward normal (angle increases towards +z from +x)
        faces.push([i, j + n32, j]);
        faces.push([i, i + n32, j + n32]);
        faces.push([bottom_c, i, j]);
        faces.push([top_c, j + n32, i + n32]);
    }
    (verts, faces)
}

/// Generator parameters drawn from the seed; exposed so callers can inspect
/// the intra-family variation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub family: Family,
    pub seat_width: f64,
    pub seat_depth: f64,
    pub seat_thickness: f64,
    pub seat_height: f64,
    pub round_seat: bool,
    pub leg_count: usize,
    pub leg_section: f64,
    pub cylindrical_legs: bool,
    pub leg_inset: f64,
    pub back: Option<BackParams>,
    pub arms: Option<ArmParams>,
    pub stretcher_height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackParams {
    pub height: f64,
    pub thickness: f64,
    pub width_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub height: f64,
    pub width: f64,
    pub depth_ratio: f64,
}

pub fn draw_params(seed: u64, family: Family) -> ObjectParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0B1E_C7u64);
    let leg_count = match family {
        Family::Bench => 4,
        _ => {
            if rng.gen_bool(0.3) {
                3
            } else {
                4
            }
        }
    };
    let (seat_width, seat_depth, seat_height) = match family {
        Family::Chair => (
            rng.gen_range(0.40..0.55),
            rng.gen_range(0.38..0.50),
            rng.gen_range(0.40..0.50),
        ),
        Family::Stool => {
            let w = rng.gen_range(0.32..0.45);
            (w, w * rng.gen_range(0.85..1.0), rng.gen_range(0.45..0.75))
        }
        Family::Bench => (
            rng.gen_range(0.90..1.40),
            rng.gen_range(0.30..0.45),
            rng.gen_range(0.40..0.48),
        ),
    };
    let seat_thickness = rng.gen_range(0.04..0.08);
    let round_seat = family == Family::Stool && rng.gen_bool(0.5);
    let leg_section = rng.gen_range(0.03..0.06);
    let cylindrical_legs = rng.gen_bool(0.5);
    let leg_inset = rng.gen_range(0.0..0.03);
    let back = match family {
        Family::Chair => true,
        Family::Stool => false,
        Family::Bench => rng.gen_bool(0.5),
    }
    .then(|| BackParams {
        height: rng.gen_range(0.35..0.60),
        thickness: rng.gen_range(0.03..0.06),
        width_ratio: rng.gen_range(0.8..1.0),
    });
    let arms = (family == Family::Chair && rng.gen_bool(0.35)).then(|| ArmParams {
        height: rng.gen_range(0.18..0.25),
        width: rng.gen_range(0.04..0.07),
        depth_ratio: rng.gen_range(0.6..0.9),
    });
    let stretcher_height = rng.gen_bool(0.35).then(|| rng.gen_range(0.10..0.20));
    ObjectParams {
        family,
        seat_width,
        seat_depth,
        seat_thickness,
        seat_height,
        round_seat,
        leg_count,
        leg_section,
        cylindrical_legs,
        leg_inset,
        back,
        arms,
        stretcher_height,
    }
}

/// Builds an un-normalized multi-part object from a seed. Deterministic.
pub fn build_parametric_object(seed: u64, family: Family) -> Mesh {
    build_from_params(&draw_params(seed, family))
}

pub fn build_from_params(p: &ObjectParams) -> Mesh {
    let mut mesh = Mesh::new();
    let hw = p.seat_width / 2.0;
    let hd = p.seat_depth / 2.0;
    let y_seat_bottom = p.seat_height;
    let y_seat_top = p.seat_height + p.seat_thickness;

    let (sv, sf) = if p.round_seat {
        cylinder_y(0.0, 0.0, y_seat_bottom, y_seat_top, hw)
    } else {
        box_solid(Vec3::new(-hw, y_seat_bottom, -hd), Vec3::new(hw, y_seat_top, hd))
    };
    mesh.push_part("seat", &sv, &sf);

    // leg centres, front (+z) first
    let r = p.leg_section / 2.0;
    let mut inner_x = hw - r - p.leg_inset;
    let mut inner_z = hd - r - p.leg_inset;
    if p.round_seat {
        // keep legs under a round seat
        inner_x *= std::f64::consts::FRAC_1_SQRT_2;
        inner_z = inner_x;
    }
    let mut centers = vec![(-inner_x, inner_z), (inner_x, inner_z)];
    if p.leg_count == 3 {
        centers.push((0.0, -inner_z));
    } else {
        centers.push((-inner_x, -inner_z));
        centers.push((inner_x, -inner_z));
    }
    for (i, &(x, z)) in centers.iter().enumerate() {
        let (lv, lf) = if p.cylindrical_legs {
            cylinder_y(x, z, 0.0, y_seat_bottom, r)
        } else {
            box_solid(Vec3::new(x - r, 0.0, z - r), Vec3::new(x + r, y_seat_bottom, z + r))
        };
        mesh.push_part(&format!("leg_{}", i + 1), &lv, &lf);
    }

    let mut back_front_z = -hd;
    if let Some(b) = &p.back {
        let bw = hw * b.width_ratio;
        let z0 = -hd;
        back_front_z = -hd + b.thickness;
        let (bv, bf) = box_solid(
            Vec3::new(-bw, y_seat_top, z0),
            Vec3::new(bw, y_seat_top + b.height, back_front_z),
        );
        mesh.push_part("back", &bv, &bf);
    }

    if let Some(a) = &p.arms {
        let z1 = back_front_z + (hd - back_front_z) * a.depth_ratio;
        for (i, sign) in [-1.0f64, 1.0].iter().enumerate() {
            let x_out = sign * hw;
            let x_in = sign * (hw - a.width);
            let (av, af) = box_solid(
                Vec3::new(x_out.min(x_in), y_seat_top, back_front_z),
                Vec3::new(x_out.max(x_in), y_seat_top + a.height, z1),
            );
            mesh.push_part(&format!("arm_{}", i + 1), &av, &af);
        }
    }

    if let Some(h) = p.stretcher_height {
        // spans the two front leg centrelines, so it penetrates both legs
        let (x0, z) = centers[0];
        let (x1, _) = centers[1];
        let t = r * 0.8;
        let (tv, tf) = box_solid(Vec3::new(x0, h - t, z - t), Vec3::new(x1, h + t, z + t));
        mesh.push_part("stretcher", &tv, &tf);
    }
    mesh
}

/// Centers the bounding box at the origin and scales uniformly so the
/// largest axis extent spans exactly [-1, 1].
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| Error::Degenerate("mesh has no vertices".into()))?;
    let half = (hi - lo) / 2.0;
    let scale = half.x.max(half.y).max(half.z);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("zero extent on all axes".into()));
    }
    let center = (hi + lo) / 2.0;
    let mut out = mesh.clone();
    for v in &mut out.vertices {
        *v = (*v - center) / scale;
    }
    Ok(out)
}

/// Generated object already normalized to [-1, 1].
pub fn build_normalized_object(seed: u64, family: Family) -> Mesh {
    normalize_mesh(&build_parametric_object(seed, family)).expect("generated objects are non-degenerate")
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Closest surface point among `faces` of `mesh`.
pub fn closest_surface_point(mesh: &Mesh, faces: &[usize], p: &Vec3) -> Option<(f64, Vec3)> {
    mesh.triangles(faces)
        .map(|[a, b, c]| {
            let q = closest_point_on_triangle(p, &a, &b, &c);
            ((q - p).norm(), q)
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
}

fn ray_hits_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let h = dir.cross(&e2);
    let a = e1.dot(&h);
    if a.abs() < 1e-14 {
        return None;
    }
    let f = 1.0 / a;
    let s = origin - tri[0];
    let u = f * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = f * dir.dot(&q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = f * e2.dot(&q);
    (t > 1e-12).then_some(t)
}

/// Parity test against a closed surface made of `faces`.
pub fn point_inside(mesh: &Mesh, faces: &[usize], p: &Vec3) -> bool {
    // skewed direction avoids grazing axis-aligned edges
    let dir = Vec3::new(1.0, 0.001_414_213_56, 0.001_732_050_8).normalize();
    let hits = mesh
        .triangles(faces)
        .filter(|t| ray_hits_triangle(p, &dir, t).is_some())
        .count();
    hits % 2 == 1
}

/// Contact samples between two parts: for every vertex of either part that
/// lies inside the other or within `eps` of its surface, the midpoint between
/// the vertex and its closest point on the other surface.
pub fn contact_samples(mesh: &Mesh, a: &str, b: &str, eps: f64) -> Result<Vec<Vec3>> {
    let fa = mesh.require_part(a)?;
    let fb = mesh.require_part(b)?;
    let mut samples = Vec::new();
    for (src, dst_faces) in [(a, fb), (b, fa)] {
        for vi in mesh.part_vertex_indices(src)? {
            let p = mesh.vertices[vi];
            if let Some((d, q)) = closest_surface_point(mesh, dst_faces, &p) {
                if d <= eps || point_inside(mesh, dst_faces, &p) {
                    samples.push((p + q) / 2.0);
                }
            }
        }
    }
    Ok(samples)
}

/// Whether part `name` touches any other part (within `eps` or interpenetrating).
pub fn part_touches_rest(mesh: &Mesh, name: &str, eps: f64) -> Result<bool> {
    mesh.require_part(name)?;
    for other in mesh.parts.keys().filter(|p| p.as_str() != name) {
        if !contact_samples(mesh, name, other, eps)?.is_empty() {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Canonical (sorted) unordered part pair.
pub fn part_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartGraph {
    pub contacts: BTreeSet<(String, String)>,
    pub connection_points: BTreeMap<(String, String), Vec3>,
}

impl PartGraph {
    pub fn has_contact(&self, a: &str, b: &str) -> bool {
        self.contacts.contains(&part_pair(a, b))
    }

    pub fn connection_point(&self, a: &str, b: &str) -> Option<Vec3> {
        self.connection_points.get(&part_pair(a, b)).copied()
    }

    pub fn neighbors(&self, part: &str) -> Vec<String> {
        self.contacts
            .iter()
            .filter_map(|(x, y)| {
                if x == part {
                    Some(y.clone())
                } else if y == part {
                    Some(x.clone())
                } else {
                    None
                }
            })
            .collect()
    }

    /// All connection points involving `part`, ordered by neighbor name.
    pub fn connection_points_of(&self, part: &str) -> Vec<(String, Vec3)> {
        self.neighbors(part)
            .into_iter()
            .filter_map(|n| self.connection_point(part, &n).map(|p| (n, p)))
            .collect()
    }
}

pub fn part_adjacency(mesh: &Mesh, eps_contact: f64) -> PartGraph {
    let names = mesh.part_names();
    let mut graph = PartGraph::default();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let samples = contact_samples(mesh, a, b, eps_contact).expect("names come from the mesh");
            if samples.is_empty() {
                continue;
            }
            let c = samples.iter().fold(Vec3::zeros(), |acc, s| acc + s) / samples.len() as f64;
            let key = part_pair(a, b);
            graph.contacts.insert(key.clone());
            graph.connection_points.insert(key, c);
        }
    }
    graph
}

/// Symmetric Hausdorff distance between two vertex sets.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    let directed = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}
