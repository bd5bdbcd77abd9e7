//! The five shape deformations used to synthesize anomalous objects, plus
//! the plausibility rules that reject physically meaningless results.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hausdorff, part_touches_rest, Mesh, PartGraph, Vec3};

pub const POSITIONAL_RANGE: (f64, f64) = (0.04, 0.08);
pub const ROTATIONAL_RANGE: (f64, f64) = (0.2, 0.4);
/// Accepted removed-volume fraction for broken parts (exclusive bounds).
pub const BROKEN_FRACTION: (f64, f64) = (0.10, 0.90);
pub const BROKEN_RETRIES: usize = 8;
pub const VOXEL_RES: usize = 96;
pub const EPS_DETACH: f64 = 0.02;
pub const MIN_SWAP_HAUSDORFF: f64 = 0.02;
pub const MIN_GROUND_CONTACTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Positional,
    Rotational,
    Broken,
    Swapped,
    Missing,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Positional,
        AnomalyKind::Rotational,
        AnomalyKind::Broken,
        AnomalyKind::Swapped,
        AnomalyKind::Missing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnomalyKind::Positional => "positional",
            AnomalyKind::Rotational => "rotational",
            AnomalyKind::Broken => "broken",
            AnomalyKind::Swapped => "swapped",
            AnomalyKind::Missing => "missing",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveShape {
    Sphere,
    Cube,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: [f64; 3],
    /// Radius for spheres, half edge length for cubes.
    pub size: f64,
}

impl Primitive {
    pub fn contains(&self, p: &Vec3) -> bool {
        let c = Vec3::from(self.center);
        match self.shape {
            PrimitiveShape::Sphere => (p - c).norm_squared() <= self.size * self.size,
            PrimitiveShape::Cube => (p - c).iter().all(|d| d.abs() <= self.size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AnomalyParams {
    Positional {
        offset: [f64; 3],
    },
    Rotational {
        axis: [f64; 3],
        angle: f64,
        center: [f64; 3],
    },
    Broken {
        primitive: Primitive,
        removed_fraction: f64,
    },
    Swapped {
        donor_shape: String,
        offset: [f64; 3],
    },
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub kind: AnomalyKind,
    pub part: String,
    pub params: AnomalyParams,
}

impl AnomalyRecord {
    /// Checks the per-kind parameter ranges.
    pub fn params_in_range(&self) -> bool {
        match &self.params {
            AnomalyParams::Positional { offset } => offset
                .iter()
                .all(|d| (POSITIONAL_RANGE.0..=POSITIONAL_RANGE.1).contains(&d.abs())),
            AnomalyParams::Rotational { angle, .. } => {
                (ROTATIONAL_RANGE.0..=ROTATIONAL_RANGE.1).contains(&angle.abs())
            }
            AnomalyParams::Broken { removed_fraction, .. } => fraction_acceptable(*removed_fraction),
            AnomalyParams::Swapped { .. } | AnomalyParams::Missing => true,
        }
    }
}

pub fn fraction_acceptable(f: f64) -> bool {
    f > BROKEN_FRACTION.0 && f < BROKEN_FRACTION.1
}

fn sample_magnitude<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    let m = rng.gen_range(range.0..=range.1);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn map_part_vertices(mesh: &Mesh, part: &str, f: impl Fn(&Vec3) -> Vec3) -> Result<Mesh> {
    let mut out = mesh.clone();
    for i in mesh.part_vertex_indices(part)? {
        out.vertices[i] = f(&mesh.vertices[i]);
    }
    Ok(out)
}

/// Translates one part by an offset whose per-axis magnitude lies in
/// [0.04, 0.08] with an independent random sign per axis.
pub fn apply_positional<R: Rng + ?Sized>(mesh: &Mesh, part: &str, rng: &mut R) -> Result<(Mesh, AnomalyRecord)> {
    let offset = [
        sample_magnitude(rng, POSITIONAL_RANGE),
        sample_magnitude(rng, POSITIONAL_RANGE),
        sample_magnitude(rng, POSITIONAL_RANGE),
    ];
    let d = Vec3::from(offset);
    let out = map_part_vertices(mesh, part, |v| v + d)?;
    Ok((
        out,
        AnomalyRecord {
            kind: AnomalyKind::Positional,
            part: part.to_string(),
            params: AnomalyParams::Positional { offset },
        },
    ))
}

/// Rotates one part about a random axis through one of its connection points.
pub fn apply_rotational<R: Rng + ?Sized>(
    mesh: &Mesh,
    part: &str,
    graph: &PartGraph,
    rng: &mut R,
) -> Result<(Mesh, AnomalyRecord)> {
    if !mesh.has_part(part) {
        return Err(Error::UnknownPart(part.to_string()));
    }
    let points = graph.connection_points_of(part);
    if points.is_empty() {
        return Err(Error::NoConnectionPoint(part.to_string()));
    }
    let center = points[rng.gen_range(0..points.len())].1;
    let axis = random_unit(rng);
    let angle = sample_magnitude(rng, ROTATIONAL_RANGE);
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    let out = map_part_vertices(mesh, part, |v| center + rot * (v - center))?;
    Ok((
        out,
        AnomalyRecord {
            kind: AnomalyKind::Rotational,
            part: part.to_string(),
            params: AnomalyParams::Rotational {
                axis: axis.into(),
                angle,
                center: center.into(),
            },
        },
    ))
}

/// Occupancy grid spanning a part's bounding box.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub origin: Vec3,
    pub cell: Vec3,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
}

impl VoxelGrid {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn get(&self, p: [isize; 3]) -> bool {
        if (0..3).any(|a| p[a] < 0 || p[a] as usize >= self.dims[a]) {
            return false;
        }
        self.occupied[self.index(p[0] as usize, p[1] as usize, p[2] as usize)]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (i as f64 + 0.5) * self.cell.x,
                (j as f64 + 0.5) * self.cell.y,
                (k as f64 + 0.5) * self.cell.z,
            )
    }

    pub fn count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.cell.x * self.cell.y * self.cell.z
    }
}

/// 2D edge function evaluated from a canonical endpoint order, so the two
/// triangles sharing an edge see exactly opposite values.
pub(crate) fn edge_function(s: (f64, f64), e: (f64, f64), p: (f64, f64)) -> f64 {
    let raw = |s: (f64, f64), e: (f64, f64)| (e.0 - s.0) * (p.1 - s.1) - (e.1 - s.1) * (p.0 - s.0);
    if (s.0, s.1) <= (e.0, e.1) {
        raw(s, e)
    } else {
        -raw(e, s)
    }
}

/// Point-in-triangle on the (y, z) projection with a top-left tie rule, so
/// scanlines crossing shared edges are counted exactly once.
fn scanline_hit(tri: &[Vec3; 3], y: f64, z: f64) -> Option<f64> {
    let p = |v: &Vec3| (v.y, v.z);
    let (mut a, mut b, c) = (p(&tri[0]), p(&tri[1]), p(&tri[2]));
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    if area == 0.0 {
        return None;
    }
    let (mut ta, mut tb) = (tri[0], tri[1]);
    if area < 0.0 {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut ta, &mut tb);
    }
    let tc = tri[2];
    let edge = |s: (f64, f64), e: (f64, f64)| {
        let w = edge_function(s, e, (y, z));
        let dy = e.0 - s.0;
        let dz = e.1 - s.1;
        w > 0.0 || (w == 0.0 && (dz < 0.0 || (dz == 0.0 && dy > 0.0)))
    };
    if !(edge(a, b) && edge(b, c) && edge(c, a)) {
        return None;
    }
    // x on the triangle plane at (y, z)
    let n = (tb - ta).cross(&(tc - ta));
    if n.x.abs() < 1e-300 {
        return None;
    }
    Some(ta.x - (n.y * (y - ta.y) + n.z * (z - ta.z)) / n.x)
}

/// Voxelizes a single closed part by x-directed scanline parity.
pub fn voxelize(part: &Mesh, res: usize) -> Result<VoxelGrid> {
    let (lo, hi) = part
        .bounding_box()
        .ok_or_else(|| Error::Degenerate("empty part".into()))?;
    let ext = hi - lo;
    if ext.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Degenerate("flat part cannot be voxelized".into()));
    }
    let cell = ext / res as f64;
    let mut grid = VoxelGrid {
        origin: lo,
        cell,
        dims: [res; 3],
        occupied: vec![false; res * res * res],
    };
    let tris: Vec<[Vec3; 3]> = part
        .faces
        .iter()
        .map(|f| [part.vertices[f[0] as usize], part.vertices[f[1] as usize], part.vertices[f[2] as usize]])
        .collect();
    let mut hits = Vec::new();
    for k in 0..res {
        for j in 0..res {
            let c = grid.center(0, j, k);
            hits.clear();
            hits.extend(tris.iter().filter_map(|t| scanline_hit(t, c.y, c.z)));
            if hits.is_empty() {
                continue;
            }
            hits.sort_by(f64::total_cmp);
            for i in 0..res {
                let x = grid.center(i, j, k).x;
                let crossings = hits.iter().take_while(|&&h| h < x).count();
                if crossings % 2 == 1 {
                    let idx = grid.index(i, j, k);
                    grid.occupied[idx] = true;
                }
            }
        }
    }
    Ok(grid)
}

/// Surface of the occupied voxels, with coplanar faces merged greedily.
pub fn remesh_voxels(grid: &VoxelGrid, name: &str) -> Mesh {
    let mut corner_ids: HashMap<[usize; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut corner = |c: [usize; 3], vertices: &mut Vec<Vec3>| -> u32 {
        *corner_ids.entry(c).or_insert_with(|| {
            vertices.push(
                grid.origin
                    + Vec3::new(
                        c[0] as f64 * grid.cell.x,
                        c[1] as f64 * grid.cell.y,
                        c[2] as f64 * grid.cell.z,
                    ),
            );
            (vertices.len() - 1) as u32
        })
    };
    for axis in 0..3 {
        let u = (axis + 1) % 3;
        let v = (axis + 2) % 3;
        let (nu, nv) = (grid.dims[u], grid.dims[v]);
        for positive in [false, true] {
            for s in 0..grid.dims[axis] {
                let mut mask = vec![false; nu * nv];
                for b in 0..nv {
                    for a in 0..nu {
                        let mut p = [0isize; 3];
                        p[axis] = s as isize;
                        p[u] = a as isize;
                        p[v] = b as isize;
                        let mut q = p;
                        q[axis] += if positive { 1 } else { -1 };
                        mask[b * nu + a] = grid.get(p) && !grid.get(q);
                    }
                }
                let plane = if positive { s + 1 } else { s };
                for b in 0..nv {
                    let mut a = 0;
                    while a < nu {
                        if !mask[b * nu + a] {
                            a += 1;
                            continue;
                        }
                        let mut w = 1;
                        while a + w < nu && mask[b * nu + a + w] {
                            w += 1;
                        }
                        let mut h = 1;
                        'grow: while b + h < nv {
                            for x in a..a + w {
                                if !mask[(b + h) * nu + x] {
                                    break 'grow;
                                }
                            }
                            h += 1;
                        }
                        for y in b..b + h {
                            for x in a..a + w {
                                mask[y * nu + x] = false;
                            }
                        }
                        let at = |du: usize, dv: usize| {
                            let mut c = [0usize; 3];
                            c[axis] = plane;
                            c[u] = du;
                            c[v] = dv;
                            c
                        };
                        let q = [
                            corner(at(a, b), &mut vertices),
                            corner(at(a + w, b), &mut vertices),
                            corner(at(a + w, b + h), &mut vertices),
                            corner(at(a, b + h), &mut vertices),
                        ];
                        if positive {
                            faces.push([q[0], q[1], q[2]]);
                            faces.push([q[0], q[2], q[3]]);
                        } else {
                            faces.push([q[0], q[2], q[1]]);
                            faces.push([q[0], q[3], q[2]]);
                        }
                        a += w;
                    }
                }
            }
        }
    }
    let mut mesh = Mesh::new();
    mesh.push_part(name, &vertices, &faces);
    mesh
}

/// Removes the primitive from a voxelized part; returns the remeshed part and
/// the removed fraction of the part's voxels.
pub fn subtract_primitive(part: &Mesh, name: &str, primitive: &Primitive, res: usize) -> Result<(Mesh, f64)> {
    let mut grid = voxelize(part, res)?;
    let before = grid.count();
    if before == 0 {
        return Err(Error::Degenerate(format!("part {name} has no interior voxels")));
    }
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j, k);
                if grid.occupied[idx] && primitive.contains(&grid.center(i, j, k)) {
                    grid.occupied[idx] = false;
                }
            }
        }
    }
    let removed = (before - grid.count()) as f64 / before as f64;
    Ok((remesh_voxels(&grid, name), removed))
}

fn sample_primitive<R: Rng + ?Sized>(rng: &mut R, lo: &Vec3, hi: &Vec3) -> Primitive {
    let ext = hi - lo;
    let center = Vec3::new(
        rng.gen_range(lo.x..=hi.x),
        rng.gen_range(lo.y..=hi.y),
        rng.gen_range(lo.z..=hi.z),
    );
    let size = ext.max() * rng.gen_range(0.15..0.5);
    let shape = if rng.gen_bool(0.5) {
        PrimitiveShape::Sphere
    } else {
        PrimitiveShape::Cube
    };
    Primitive {
        shape,
        center: center.into(),
        size,
    }
}

/// Fractures a part by subtracting a random sphere or cube. The primitive is
/// resampled until the removed fraction lies strictly inside (0.10, 0.90).
pub fn apply_broken<R: Rng + ?Sized>(mesh: &Mesh, part: &str, rng: &mut R) -> Result<(Mesh, AnomalyRecord)> {
    apply_broken_with(mesh, part, rng, VOXEL_RES)
}

pub fn apply_broken_with<R: Rng + ?Sized>(
    mesh: &Mesh,
    part: &str,
    rng: &mut R,
    res: usize,
) -> Result<(Mesh, AnomalyRecord)> {
    let sub = mesh.extract_part(part)?;
    let (lo, hi) = mesh.part_bounding_box(part)?;
    for _ in 0..BROKEN_RETRIES {
        let primitive = sample_primitive(rng, &lo, &hi);
        let (broken, removed_fraction) = subtract_primitive(&sub, part, &primitive, res)?;
        if !fraction_acceptable(removed_fraction) {
            continue;
        }
        let out = mesh.with_part_replaced(part, &broken)?;
        return Ok((
            out,
            AnomalyRecord {
                kind: AnomalyKind::Broken,
                part: part.to_string(),
                params: AnomalyParams::Broken {
                    primitive,
                    removed_fraction,
                },
            },
        ));
    }
    Err(Error::Unbreakable {
        part: part.to_string(),
        attempts: BROKEN_RETRIES,
    })
}

fn anchor_point(mesh: &Mesh, graph: &PartGraph, part: &str) -> Result<Vec3> {
    let points = graph.connection_points_of(part);
    if let Some((_, p)) = points.iter().find(|(n, _)| n == "seat") {
        return Ok(*p);
    }
    if let Some((_, p)) = points.first() {
        return Ok(*p);
    }
    let (lo, hi) = mesh.part_bounding_box(part)?;
    Ok((lo + hi) / 2.0)
}

/// Replaces `part` of `mesh_a` with the same-named part of `mesh_b`, placed
/// rigidly so the two parts' connection points coincide.
///
/// `donor_shape` in the returned record is empty; the caller fills it in.
pub fn apply_swap<R: Rng + ?Sized>(
    mesh_a: &Mesh,
    mesh_b: &Mesh,
    part: &str,
    _rng: &mut R,
) -> Result<(Mesh, AnomalyRecord)> {
    let own = mesh_a.extract_part(part)?;
    let donor = mesh_b.extract_part(part)?;
    let graph_a = crate::geometry::part_adjacency(mesh_a, crate::geometry::EPS_CONTACT);
    let graph_b = crate::geometry::part_adjacency(mesh_b, crate::geometry::EPS_CONTACT);
    let offset = anchor_point(mesh_a, &graph_a, part)? - anchor_point(mesh_b, &graph_b, part)?;
    let mut placed = donor;
    for v in &mut placed.vertices {
        *v += offset;
    }
    let distance = hausdorff(&own.vertices, &placed.vertices);
    if distance < MIN_SWAP_HAUSDORFF {
        return Err(Error::NoOpSwap {
            part: part.to_string(),
            distance,
        });
    }
    let out = mesh_a.with_part_replaced(part, &placed)?;
    Ok((
        out,
        AnomalyRecord {
            kind: AnomalyKind::Swapped,
            part: part.to_string(),
            params: AnomalyParams::Swapped {
                donor_shape: String::new(),
                offset: offset.into(),
            },
        },
    ))
}

pub fn apply_missing(mesh: &Mesh, part: &str) -> Result<(Mesh, AnomalyRecord)> {
    if !mesh.has_part(part) {
        return Err(Error::UnknownPart(part.to_string()));
    }
    if mesh.parts.len() <= 2 {
        return Err(Error::TooFewParts(part.to_string()));
    }
    Ok((
        mesh.without_part(part)?,
        AnomalyRecord {
            kind: AnomalyKind::Missing,
            part: part.to_string(),
            params: AnomalyParams::Missing,
        },
    ))
}

/// Number of parts resting on the floor, where the floor is the lowest point
/// of every part other than `modified`.
pub fn ground_contacts(mesh: &Mesh, modified: Option<&str>) -> usize {
    let min_y = |name: &str| {
        mesh.part_vertex_indices(name)
            .map(|ids| ids.iter().map(|&i| mesh.vertices[i].y).fold(f64::INFINITY, f64::min))
            .unwrap_or(f64::INFINITY)
    };
    let floor = mesh
        .parts
        .keys()
        .filter(|p| Some(p.as_str()) != modified)
        .map(|p| min_y(p))
        .fold(f64::INFINITY, f64::min);
    mesh.parts.keys().filter(|p| min_y(p) <= floor + EPS_DETACH).count()
}

/// Plausibility check applied after each deformation.
///
/// Rejects (a) translated/rotated parts that lost every contact with the rest
/// of the object, (b) removal of an essential part, and (c) objects left with
/// fewer than three ground contacts.
pub fn qc_plausibility(mesh: &Mesh, record: &AnomalyRecord, graph_before: &PartGraph) -> bool {
    match record.kind {
        AnomalyKind::Positional | AnomalyKind::Rotational => {
            let had_contacts = !graph_before.neighbors(&record.part).is_empty();
            if had_contacts && !part_touches_rest(mesh, &record.part, EPS_DETACH).unwrap_or(false) {
                return false;
            }
        }
        AnomalyKind::Missing => {
            if crate::geometry::Family::Chair
                .essential_parts()
                .contains(&record.part.as_str())
            {
                return false;
            }
        }
        AnomalyKind::Broken | AnomalyKind::Swapped => {}
    }
    let modified = (record.kind != AnomalyKind::Missing).then_some(record.part.as_str());
    ground_contacts(mesh, modified) >= MIN_GROUND_CONTACTS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{box_solid, build_normalized_object, part_adjacency, Family, EPS_CONTACT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn four_leg_chair() -> Mesh {
        (0..)
            .map(|s| build_normalized_object(s, Family::Chair))
            .find(|m| m.has_part("leg_4") && !m.has_part("stretcher"))
            .unwrap()
    }

    #[test]
    fn positional_moves_only_the_part_rigidly() {
        let m = four_leg_chair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, rec) = apply_positional(&m, "leg_2", &mut rng).unwrap();
        assert!(rec.params_in_range());
        let AnomalyParams::Positional { offset } = rec.params else { panic!() };
        let (lo0, hi0) = m.part_bounding_box("leg_2").unwrap();
        let (lo1, hi1) = out.part_bounding_box("leg_2").unwrap();
        for a in 0..3 {
            assert_eq!(lo1[a], lo0[a] + offset[a]);
            assert_eq!(hi1[a], hi0[a] + offset[a]);
        }
        let moved = m.part_vertex_indices("leg_2").unwrap();
        for (i, (a, b)) in m.vertices.iter().zip(&out.vertices).enumerate() {
            if !moved.contains(&i) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn rotation_fixes_center_and_preserves_distances() {
        let m = four_leg_chair();
        let g = part_adjacency(&m, EPS_CONTACT);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, rec) = apply_rotational(&m, "leg_1", &g, &mut rng).unwrap();
        let AnomalyParams::Rotational { axis, angle, center } = rec.params else { panic!() };
        assert!((0.2..=0.4).contains(&angle.abs()));
        let c = Vec3::from(center);
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle);
        assert!((c + rot * (c - c) - c).norm() < 1e-12);
        for i in m.part_vertex_indices("leg_1").unwrap() {
            let d0 = (m.vertices[i] - c).norm();
            let d1 = (out.vertices[i] - c).norm();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_without_connection_point_fails() {
        let (v, f) = box_solid(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let mut m = Mesh::new();
        m.push_part("a", &v, &f);
        let g = part_adjacency(&m, EPS_CONTACT);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_rotational(&m, "a", &g, &mut rng),
            Err(Error::NoConnectionPoint(_))
        ));
    }

    #[test]
    fn box_voxelizes_and_remeshes_exactly() {
        let (v, f) = box_solid(Vec3::new(-0.2, -1.0, -0.1), Vec3::new(0.2, 1.0, 0.1));
        let mut part = Mesh::new();
        part.push_part("p", &v, &f);
        let grid = voxelize(&part, 16).unwrap();
        assert_eq!(grid.count(), 16 * 16 * 16);
        let re = remesh_voxels(&grid, "p");
        assert!((re.volume() - part.volume()).abs() < 1e-12);
        // greedy merge collapses each side to a single quad
        assert_eq!(re.faces.len(), 12);
    }

    #[test]
    fn primitive_outside_part_removes_nothing() {
        let (v, f) = box_solid(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        let mut part = Mesh::new();
        part.push_part("p", &v, &f);
        let prim = Primitive {
            shape: PrimitiveShape::Sphere,
            center: [3.0, 3.0, 3.0],
            size: 0.5,
        };
        let (_, frac) = subtract_primitive(&part, "p", &prim, 24).unwrap();
        assert_eq!(frac, 0.0);
        assert!(!fraction_acceptable(frac));
    }

    #[test]
    fn broken_fraction_is_inside_bounds() {
        let m = four_leg_chair();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, rec) = apply_broken_with(&m, "seat", &mut rng, 32).unwrap();
        assert!(rec.params_in_range());
        assert_eq!(out.parts.len(), m.parts.len());
        assert!(out.part_volume("seat").unwrap() < m.part_volume("seat").unwrap());
    }

    #[test]
    fn swap_with_itself_is_rejected() {
        let m = four_leg_chair();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            apply_swap(&m, &m, "back", &mut rng),
            Err(Error::NoOpSwap { .. })
        ));
    }

    #[test]
    fn swap_keeps_part_count_and_changes_geometry() {
        let a = four_leg_chair();
        let b = build_normalized_object(1234, Family::Chair);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, rec) = apply_swap(&a, &b, "back", &mut rng).unwrap();
        assert_eq!(rec.kind, AnomalyKind::Swapped);
        assert_eq!(out.parts.len(), a.parts.len());
        let before = a.extract_part("back").unwrap().vertices;
        let after = out.extract_part("back").unwrap().vertices;
        assert!(hausdorff(&before, &after) >= MIN_SWAP_HAUSDORFF);
    }

    #[test]
    fn missing_removes_exactly_one_part() {
        let m = four_leg_chair();
        let (out, _) = apply_missing(&m, "leg_1").unwrap();
        assert_eq!(out.parts.len(), m.parts.len() - 1);
        assert!(!out.has_part("leg_1"));
        out.check_invariants().unwrap();
        assert_eq!(
            out.vertices.len(),
            m.vertices.len() - m.part_vertex_indices("leg_1").unwrap().len()
        );
    }

    #[test]
    fn missing_needs_two_remaining_parts() {
        let (v, f) = box_solid(Vec3::repeat(-1.0), Vec3::repeat(0.0));
        let (w, g) = box_solid(Vec3::repeat(0.0), Vec3::repeat(1.0));
        let mut m = Mesh::new();
        m.push_part("a", &v, &f);
        m.push_part("b", &w, &g);
        assert!(matches!(apply_missing(&m, "a"), Err(Error::TooFewParts(_))));
    }

    #[test]
    fn qc_rejects_seat_removal_and_accepts_identity() {
        let m = four_leg_chair();
        let g = part_adjacency(&m, EPS_CONTACT);
        let (out, rec) = apply_missing(&m, "seat").unwrap();
        assert!(!qc_plausibility(&out, &rec, &g));
        let identity = AnomalyRecord {
            kind: AnomalyKind::Positional,
            part: "leg_1".into(),
            params: AnomalyParams::Positional { offset: [0.0; 3] },
        };
        assert!(qc_plausibility(&m, &identity, &g));
    }

    #[test]
    fn qc_detachment_rule() {
        let m = four_leg_chair();
        let g = part_adjacency(&m, EPS_CONTACT);
        let shift = |d: Vec3| {
            let mut out = m.clone();
            for i in m.part_vertex_indices("leg_1").unwrap() {
                out.vertices[i] += d;
            }
            let rec = AnomalyRecord {
                kind: AnomalyKind::Positional,
                part: "leg_1".into(),
                params: AnomalyParams::Positional { offset: d.into() },
            };
            qc_plausibility(&out, &rec, &g)
        };
        // pushed up into the seat: still attached, three legs still on the floor
        assert!(shift(Vec3::new(0.0, 0.07, 0.0)));
        // dropped well clear of everything
        assert!(!shift(Vec3::new(0.0, -0.5, 0.0)));
    }
}
