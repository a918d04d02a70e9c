//! Heightmap surface analysis and suction-grasp candidate generation.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::feasibility::GraspPose;

/// Default Laplacian magnitude above which a cell counts as an edge.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 5.0;

/// Height grid over the table, row index along +y and column index along +x.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    pub grid: Array2<f64>,
    pub cell_size: f64,
    /// World `(x, y)` of the corner of cell `(0, 0)`.
    pub origin: [f64; 2],
}

impl Heightmap {
    pub fn new(grid: Array2<f64>, cell_size: f64, origin: [f64; 2]) -> Result<Self> {
        if grid.nrows() < 3 || grid.ncols() < 3 {
            return Err(Error::InvalidArgument("heightmap needs at least 3x3 cells".into()));
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument("cell size must be positive".into()));
        }
        if grid.iter().any(|&h| !(h >= 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument("heights must be finite and non-negative".into()));
        }
        Ok(Self {
            grid,
            cell_size,
            origin,
        })
    }

    pub fn rows(&self) -> usize {
        self.grid.nrows()
    }

    pub fn cols(&self) -> usize {
        self.grid.ncols()
    }

    /// World `(x, y)` of a cell center.
    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell_size,
            self.origin[1] + (r as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Upward unit normal from central differences; `None` on the border.
    pub fn normal_at(&self, r: usize, c: usize) -> Option<[f64; 3]> {
        if r == 0 || c == 0 || r + 1 >= self.rows() || c + 1 >= self.cols() {
            return None;
        }
        let h = &self.grid;
        let dx = (h[[r, c + 1]] - h[[r, c - 1]]) / (2.0 * self.cell_size);
        let dy = (h[[r + 1, c]] - h[[r - 1, c]]) / (2.0 * self.cell_size);
        // (1, 0, dx) x (0, 1, dy)
        let n = [-dx, -dy, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
        Some(n.map(|v| v / len))
    }

    /// Normals of every interior cell; border entries are `None`.
    pub fn normal_field(&self) -> Array2<Option<[f64; 3]>> {
        Array2::from_shape_fn((self.rows(), self.cols()), |(r, c)| self.normal_at(r, c))
    }
}

/// Surface samples with upward unit normals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointNormalCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub source_cell: Vec<[usize; 2]>,
}

impl PointNormalCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Marks cells whose normal field has a large discrete Laplacian.
///
/// The 5-point Laplacian is applied to each normal component and divided by
/// the cell size; a cell is masked (`true`) when any component's magnitude
/// exceeds `threshold`. Missing neighbors (outside the interior) take the
/// center cell's normal. Border cells have no normal and are always masked.
pub fn laplacian_edge_mask(hm: &Heightmap, threshold: f64) -> Result<Array2<bool>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("edge threshold must be positive".into()));
    }
    let normals = hm.normal_field();
    let (rows, cols) = (hm.rows(), hm.cols());
    let mut mask = Array2::from_elem((rows, cols), true);
    for r in 0..rows {
        for c in 0..cols {
            let Some(n) = normals[[r, c]] else { continue };
            let nb = |rr: isize, cc: isize| -> [f64; 3] {
                if rr < 0 || cc < 0 || rr as usize >= rows || cc as usize >= cols {
                    return n;
                }
                normals[[rr as usize, cc as usize]].unwrap_or(n)
            };
            let (ri, ci) = (r as isize, c as isize);
            let sum = [nb(ri - 1, ci), nb(ri + 1, ci), nb(ri, ci - 1), nb(ri, ci + 1)];
            let edge = (0..3).any(|k| {
                let lap = sum.iter().map(|v| v[k]).sum::<f64>() - 4.0 * n[k];
                (lap / hm.cell_size).abs() > threshold
            });
            mask[[r, c]] = edge;
        }
    }
    Ok(mask)
}

/// Converts the heightmap into surface points with normals, keeping interior
/// cells that are selected by `mask` (if given) and survive edge masking.
pub fn heightmap_to_pointnormals(
    hm: &Heightmap,
    mask: Option<&Array2<bool>>,
    edge_threshold: f64,
) -> Result<PointNormalCloud> {
    if let Some(m) = mask {
        check_dim("mask rows", hm.rows(), m.nrows())?;
        check_dim("mask cols", hm.cols(), m.ncols())?;
    }
    let edges = laplacian_edge_mask(hm, edge_threshold)?;
    let mut cloud = PointNormalCloud::default();
    for r in 1..hm.rows() - 1 {
        for c in 1..hm.cols() - 1 {
            if mask.is_some_and(|m| !m[[r, c]]) || edges[[r, c]] {
                continue;
            }
            let Some(n) = hm.normal_at(r, c) else { continue };
            let [x, y] = hm.cell_center(r, c);
            cloud.points.push([x, y, hm.grid[[r, c]]]);
            cloud.normals.push(n);
            cloud.source_cell.push([r, c]);
        }
    }
    Ok(cloud)
}

/// Uniformly subsamples up to `n` pick grasps from the masked surface.
/// Returned grasps keep cloud order.
pub fn sample_pick_grasps<R: Rng + ?Sized>(
    hm: &Heightmap,
    object_mask: &Array2<bool>,
    n: usize,
    edge_threshold: f64,
    rng: &mut R,
) -> Result<Vec<GraspPose>> {
    if n == 0 {
        return Err(Error::InvalidArgument("grasp count must be >= 1".into()));
    }
    let cloud = heightmap_to_pointnormals(hm, Some(object_mask), edge_threshold)?;
    if cloud.is_empty() {
        return Err(Error::NoPickGrasps);
    }
    let mut chosen: Vec<usize> = if n >= cloud.len() {
        (0..cloud.len()).collect()
    } else {
        index::sample(rng, cloud.len(), n).into_vec()
    };
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| GraspPose::new(cloud.points[i], cloud.normals[i]))
        .collect()
}

/// Solid primitive in its own frame, centered at the origin with the
/// symmetry (height) axis along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl Primitive {
    pub fn height(&self) -> f64 {
        match *self {
            Primitive::Box { size } => size[2],
            Primitive::Cylinder { height, .. } => height,
        }
    }

    /// Footprint extent `(x, y)` when standing upright with zero yaw.
    pub fn footprint(&self) -> [f64; 2] {
        match *self {
            Primitive::Box { size } => [size[0], size[1]],
            Primitive::Cylinder { radius, .. } => [2.0 * radius, 2.0 * radius],
        }
    }
}

/// Place grasp in the object frame and at the target placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceGrasp {
    pub object: GraspPose,
    pub world: GraspPose,
}

/// Minimum world-z of a normal for a face to count as reachable from above.
pub const ACCESSIBLE_MIN_UP: f64 = 0.5;

/// Samples place grasps on the faces of `prim` that point upward when the
/// object rests at `target` (position, quaternion `[w, x, y, z]`). Points are
/// uniform over the accessible surface area.
pub fn sample_place_grasps<R: Rng + ?Sized>(
    prim: &Primitive,
    target_position: [f64; 3],
    target_quaternion: [f64; 4],
    n: usize,
    rng: &mut R,
) -> Result<Vec<PlaceGrasp>> {
    if n == 0 {
        return Err(Error::InvalidArgument("grasp count must be >= 1".into()));
    }
    let rot = unit_quat(target_quaternion);
    let up_of = |v: [f64; 3]| (rot * Vector3::from(v)).z;
    // Candidate surface patches with their areas.
    enum Patch {
        Face { normal: [f64; 3], center: [f64; 3], u: [f64; 3], v: [f64; 3] },
        Band { radius: f64, height: f64, a0: f64, a1: f64 },
    }
    let mut patches: Vec<(Patch, f64)> = Vec::new();
    match *prim {
        Primitive::Box { size } => {
            let half = size.map(|s| s / 2.0);
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut normal = [0.0; 3];
                    normal[axis] = sign;
                    if up_of(normal) < ACCESSIBLE_MIN_UP {
                        continue;
                    }
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    let mut center = [0.0; 3];
                    center[axis] = sign * half[axis];
                    let mut u = [0.0; 3];
                    u[a] = half[a];
                    let mut v = [0.0; 3];
                    v[b] = half[b];
                    patches.push((Patch::Face { normal, center, u, v }, size[a] * size[b]));
                }
            }
        }
        Primitive::Cylinder { radius, height } => {
            for sign in [-1.0, 1.0] {
                let normal = [0.0, 0.0, sign];
                if up_of(normal) >= ACCESSIBLE_MIN_UP {
                    let center = [0.0, 0.0, sign * height / 2.0];
                    patches.push((
                        Patch::Face {
                            normal,
                            center,
                            u: [radius, 0.0, 0.0],
                            v: [0.0, radius, 0.0],
                        },
                        std::f64::consts::PI * radius * radius,
                    ));
                }
            }
            // Side normals (cos a, sin a, 0) map to world z = c cos a + s sin a.
            let c = up_of([1.0, 0.0, 0.0]);
            let s = up_of([0.0, 1.0, 0.0]);
            let amp = c.hypot(s);
            if amp >= ACCESSIBLE_MIN_UP {
                let center = s.atan2(c);
                let half = (ACCESSIBLE_MIN_UP / amp).acos();
                patches.push((
                    Patch::Band {
                        radius,
                        height,
                        a0: center - half,
                        a1: center + half,
                    },
                    2.0 * half * radius * height,
                ));
            }
        }
    }
    if patches.is_empty() {
        return Err(Error::InfeasibleTask("no upward-accessible face at the target placement".into()));
    }
    let total: f64 = patches.iter().map(|(_, a)| a).sum();
    let to_world = |p: [f64; 3], nrm: [f64; 3]| -> Result<PlaceGrasp> {
        let pw = rot * Vector3::from(p);
        let nw = rot * Vector3::from(nrm);
        Ok(PlaceGrasp {
            object: GraspPose::new(p, nrm)?,
            world: GraspPose::new(
                [pw.x + target_position[0], pw.y + target_position[1], pw.z + target_position[2]],
                [nw.x, nw.y, nw.z],
            )?,
        })
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = &patches[patches.len() - 1].0;
        for (p, a) in &patches {
            if pick < *a {
                chosen = p;
                break;
            }
            pick -= a;
        }
        let g = match chosen {
            Patch::Face { normal, center, u, v } => {
                let (s, t) = if matches!(prim, Primitive::Cylinder { .. }) {
                    // uniform on the disc
                    let rr = rng.random::<f64>().sqrt();
                    let th = rng.random::<f64>() * std::f64::consts::TAU;
                    (rr * th.cos(), rr * th.sin())
                } else {
                    (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                };
                let p = std::array::from_fn(|i| center[i] + s * u[i] + t * v[i]);
                to_world(p, *normal)?
            }
            Patch::Band { radius, height, a0, a1 } => {
                let a = rng.random_range(*a0..*a1);
                let z = rng.random_range(-height / 2.0..height / 2.0);
                let nrm = [a.cos(), a.sin(), 0.0];
                to_world([radius * nrm[0], radius * nrm[1], z], nrm)?
            }
        };
        out.push(g);
    }
    Ok(out)
}

pub(crate) fn unit_quat(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub(crate) fn quat_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Rotates `v` by the unit quaternion `q = [w, x, y, z]`.
pub fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let r = unit_quat(q) * Vector3::from(v);
    [r.x, r.y, r.z]
}

/// Quaternion `[w, x, y, z]` of a rotation by `angle` about `axis`.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    quat_array(&UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle))
}

/// Hamilton product `a * b` (apply `b`, then `a`).
pub fn compose(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    quat_array(&(unit_quat(a) * unit_quat(b)))
}

/// Angle in radians between two vectors.
pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    Vector3::from(a).angle(&Vector3::from(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(h: f64) -> Heightmap {
        Heightmap::new(Array2::from_elem((8, 9), h), 0.01, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn flat_map_has_vertical_normals_and_no_edges() {
        let hm = flat(0.2);
        let cloud = heightmap_to_pointnormals(&hm, None, DEFAULT_EDGE_THRESHOLD).unwrap();
        assert_eq!(cloud.len(), 6 * 7);
        assert!(cloud.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
        let edges = laplacian_edge_mask(&hm, DEFAULT_EDGE_THRESHOLD).unwrap();
        for r in 1..7 {
            for c in 1..8 {
                assert!(!edges[[r, c]]);
            }
        }
    }

    #[test]
    fn ramp_normals_match_plane() {
        let cs = 0.01;
        let grid = Array2::from_shape_fn((6, 6), |(_, c)| 0.5 * (c as f64 + 0.5) * cs);
        let hm = Heightmap::new(grid, cs, [0.0, 0.0]).unwrap();
        let k = 1.25f64.sqrt();
        for r in 1..5 {
            for c in 1..5 {
                let n = hm.normal_at(r, c).unwrap();
                assert!((n[0] + 0.5 / k).abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2] - 1.0 / k).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pick_grasps_respect_mask_and_count() {
        let mut grid = Array2::zeros((10, 10));
        let mut mask = Array2::from_elem((10, 10), false);
        for r in 2..8 {
            for c in 2..8 {
                grid[[r, c]] = 0.05;
                mask[[r, c]] = true;
            }
        }
        let hm = Heightmap::new(grid, 0.01, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = sample_pick_grasps(&hm, &mask, 1000, DEFAULT_EDGE_THRESHOLD, &mut rng).unwrap();
        // the Laplacian band reaches two cells into the 6x6 top
        assert_eq!(all.len(), 4);
        let mut seen = std::collections::HashSet::new();
        for g in &all {
            assert!(seen.insert(g.point.map(f64::to_bits)));
            assert_eq!(g.normal, [0.0, 0.0, 1.0]);
        }
        let a = sample_pick_grasps(&hm, &mask, 5, DEFAULT_EDGE_THRESHOLD, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_pick_grasps(&hm, &mask, 5, DEFAULT_EDGE_THRESHOLD, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let empty = Array2::from_elem((10, 10), false);
        assert!(matches!(
            sample_pick_grasps(&hm, &empty, 5, DEFAULT_EDGE_THRESHOLD, &mut rng),
            Err(Error::NoPickGrasps)
        ));
    }

    #[test]
    fn upright_box_place_grasps_point_up() {
        let prim = Primitive::Box { size: [1.0, 1.0, 1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs = sample_place_grasps(&prim, [0.0, 0.5, 0.4], [1.0, 0.0, 0.0, 0.0], 20, &mut rng).unwrap();
        for g in gs {
            for i in 0..3 {
                assert!((g.world.normal[i] - [0.0, 0.0, 1.0][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lying_cylinder_band_faces_up() {
        let prim = Primitive::Cylinder { radius: 0.03, height: 0.12 };
        let q = axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs = sample_place_grasps(&prim, [0.0; 3], q, 200, &mut rng).unwrap();
        for g in &gs {
            assert!(g.object.normal[2].abs() < 1e-12, "side band only");
            assert!(g.world.normal[2] > 0.0);
            let r = g.object.point[0].hypot(g.object.point[1]);
            assert!((r - 0.03).abs() < 1e-12);
        }
        let again = sample_place_grasps(&prim, [0.0; 3], q, 200, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(gs, again);
    }

    #[test]
    fn upside_down_face_only_box_still_has_a_face() {
        // any rotation leaves at least one box face within 60 degrees of up
        let prim = Primitive::Box { size: [0.1, 0.2, 0.3] };
        let q = axis_angle([1.0, 1.0, 0.3], 2.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(sample_place_grasps(&prim, [0.0; 3], q, 4, &mut rng).is_ok());
    }

    #[test]
    fn rotation_helpers_agree() {
        let q = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = rotate(q, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        let qq = compose(q, q);
        let w = rotate(qq, [1.0, 0.0, 0.0]);
        assert!((w[0] + 1.0).abs() < 1e-12);
        assert!((angle_between([1.0, 0.0, 0.0], [0.0, 2.0, 0.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
