//! Synthetic reorientation domain: primitive piles rendered to heightmaps,
//! structured task descriptors, analytic success oracles, the scene-task
//! condition encoder and dataset generation.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};
use std::path::Path;

use base64::Engine as _;
use nalgebra::{Unit, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ReorientPose, Workspace};
use crate::error::{check_dim, Error, Result};
use crate::feasibility::{balance_by_label, FeasibilityRecord, GraspPose};
use crate::geometry::{
    self, angle_between, axis_angle, compose, rotate, sample_pick_grasps, sample_place_grasps, Heightmap,
    PlaceGrasp, Primitive,
};
use crate::nn::{self, Activation, Cotangent, FeedForwardNet, OutputHead, TrainReport, TrainerConfig};
use crate::scalar::Scalar;

pub const N_OBJECT_TYPES: usize = 8;
pub const N_ORIENTATIONS: usize = 4;
pub const N_LEVELS: usize = 3;
pub const N_REF_KINDS: usize = 3;
pub const DESCRIPTOR_DIM: usize = N_REF_KINDS + N_OBJECT_TYPES + N_ORIENTATIONS + N_LEVELS;
/// Discrete yaw options used when snapping predicted placements.
pub const YAW_OPTIONS: usize = 8;
/// Encoder statistics per height band: presence, area fraction, centroid row and column.
pub const BAND_STATS: usize = 4;

/// Catalog entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    pub mass: f64,
}

fn default_catalog() -> Vec<ObjectSpec> {
    let b = |x: f64, y: f64, z: f64, mass: f64| ObjectSpec {
        primitive: Primitive::Box { size: [x, y, z] },
        mass,
    };
    let c = |radius: f64, height: f64, mass: f64| ObjectSpec {
        primitive: Primitive::Cylinder { radius, height },
        mass,
    };
    vec![
        b(0.06, 0.09, 0.05, 0.30),
        c(0.03, 0.07, 0.12),
        b(0.06, 0.06, 0.09, 0.25),
        c(0.045, 0.11, 0.45),
        b(0.09, 0.12, 0.13, 0.60),
        c(0.03, 0.15, 0.20),
        b(0.06, 0.12, 0.17, 0.40),
        c(0.045, 0.19, 0.55),
    ]
}

/// Pile, shelf and rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub catalog: Vec<ObjectSpec>,
    /// Fine heightmap resolution in meters.
    pub cell_size: f64,
    /// Fine cells per coarse cell along each axis.
    pub coarse_factor: usize,
    /// Coarse grid side length in cells.
    pub coarse_cells: usize,
    pub pile_center: [f64; 2],
    /// Shelf heights, meters.
    pub shelf_levels: [f64; N_LEVELS],
    /// Shelf slot `(x, y)`.
    pub shelf_position: [f64; 2],
    /// Width of the height bands fed to the encoder.
    pub height_band: f64,
    pub n_height_bands: usize,
    /// Probability that a task names its object directly (otherwise
    /// heaviest or lightest, equally likely).
    pub absolute_ref_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            catalog: default_catalog(),
            cell_size: 0.01,
            coarse_factor: 3,
            coarse_cells: 16,
            pile_center: [0.0, -0.45],
            shelf_levels: [0.1, 0.4, 0.7],
            shelf_position: [0.0, 0.6],
            height_band: 0.02,
            n_height_bands: 10,
            absolute_ref_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.catalog.len() != N_OBJECT_TYPES {
            return Err(Error::Config(format!("catalog needs {N_OBJECT_TYPES} objects")));
        }
        if self.coarse_factor == 0 || self.coarse_cells < 4 || !(self.cell_size > 0.0) {
            return Err(Error::Config("invalid heightmap resolution".into()));
        }
        let coarse = self.cell_size * self.coarse_factor as f64;
        for (i, spec) in self.catalog.iter().enumerate() {
            let [fx, fy] = spec.primitive.footprint();
            let cells = |v: f64| (v / coarse).round();
            if (cells(fx) * coarse - fx).abs() > 1e-9 || (cells(fy) * coarse - fy).abs() > 1e-9 || cells(fx) < 2.0 {
                return Err(Error::Config(format!(
                    "object {i} footprint must span at least two whole coarse cells"
                )));
            }
            if !(spec.mass > 0.0) {
                return Err(Error::Config(format!("object {i} mass must be positive")));
            }
        }
        let mut bands: Vec<usize> = self.catalog.iter().map(|s| self.band_of(s.primitive.height())).collect();
        bands.sort_unstable();
        bands.dedup();
        if bands.len() != N_OBJECT_TYPES || bands[0] == 0 || *bands.last().unwrap() >= self.n_height_bands {
            return Err(Error::Config("object heights must fall in distinct non-floor height bands".into()));
        }
        let mut masses: Vec<f64> = self.catalog.iter().map(|s| s.mass).collect();
        masses.sort_by(f64::total_cmp);
        if masses.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("object masses must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&self.absolute_ref_prob) {
            return Err(Error::Config("absolute_ref_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn fine_cells(&self) -> usize {
        self.coarse_cells * self.coarse_factor
    }

    pub fn heightmap_origin(&self) -> [f64; 2] {
        let half = 0.5 * self.fine_cells() as f64 * self.cell_size;
        [self.pile_center[0] - half, self.pile_center[1] - half]
    }

    pub fn band_of(&self, h: f64) -> usize {
        ((h / self.height_band).floor().max(0.0) as usize).min(self.n_height_bands - 1)
    }

    /// Encoder trunk input width: per-band statistics plus the descriptor.
    pub fn encoder_input_dim(&self) -> usize {
        self.n_height_bands * BAND_STATS + DESCRIPTOR_DIM
    }

    /// Height band of every coarse cell after max pooling, row-major.
    pub fn coarse_bands(&self, hm: &Heightmap) -> Result<Vec<usize>> {
        let n = self.coarse_cells;
        let f = self.coarse_factor;
        check_dim("heightmap rows", n * f, hm.rows())?;
        check_dim("heightmap cols", n * f, hm.cols())?;
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let mut h: f64 = 0.0;
                for rr in r * f..(r + 1) * f {
                    for cc in c * f..(c + 1) * f {
                        h = h.max(hm.grid[[rr, cc]]);
                    }
                }
                out.push(self.band_of(h));
            }
        }
        Ok(out)
    }
}

/// How the task names its object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum ObjectRef {
    Absolute(usize),
    Heaviest,
    Lightest,
}

/// Structured task: object reference plus placement specification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    pub reference: ObjectRef,
    /// Index of the target yaw, `orientation * pi / 2`.
    pub orientation: usize,
    pub level: usize,
}

impl TaskDescriptor {
    /// One-hot groups: reference kind, object id (absolute only),
    /// orientation, level.
    pub fn encode(&self) -> [f64; DESCRIPTOR_DIM] {
        let mut d = [0.0; DESCRIPTOR_DIM];
        match self.reference {
            ObjectRef::Absolute(id) => {
                d[0] = 1.0;
                d[N_REF_KINDS + id] = 1.0;
            }
            ObjectRef::Heaviest => d[1] = 1.0,
            ObjectRef::Lightest => d[2] = 1.0,
        }
        d[N_REF_KINDS + N_OBJECT_TYPES + self.orientation] = 1.0;
        d[N_REF_KINDS + N_OBJECT_TYPES + N_ORIENTATIONS + self.level] = 1.0;
        d
    }

    pub fn decode(d: &[f64]) -> Result<Self> {
        check_dim("task descriptor", DESCRIPTOR_DIM, d.len())?;
        let one_hot = |slice: &[f64], what: &str| -> Result<Option<usize>> {
            let hot: Vec<usize> = slice
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            if slice.iter().any(|&v| v != 0.0 && v != 1.0) || hot.len() > 1 {
                return Err(Error::InvalidArgument(format!("{what} group is not one-hot")));
            }
            Ok(hot.first().copied())
        };
        let kind = one_hot(&d[..N_REF_KINDS], "reference kind")?
            .ok_or_else(|| Error::InvalidArgument("reference kind missing".into()))?;
        let o0 = N_REF_KINDS;
        let obj = one_hot(&d[o0..o0 + N_OBJECT_TYPES], "object")?;
        let r0 = o0 + N_OBJECT_TYPES;
        let orientation = one_hot(&d[r0..r0 + N_ORIENTATIONS], "orientation")?
            .ok_or_else(|| Error::InvalidArgument("orientation missing".into()))?;
        let l0 = r0 + N_ORIENTATIONS;
        let level = one_hot(&d[l0..l0 + N_LEVELS], "level")?
            .ok_or_else(|| Error::InvalidArgument("level missing".into()))?;
        let reference = match (kind, obj) {
            (0, Some(id)) => ObjectRef::Absolute(id),
            (1, None) => ObjectRef::Heaviest,
            (2, None) => ObjectRef::Lightest,
            _ => return Err(Error::InvalidArgument("object group inconsistent with reference kind".into())),
        };
        Ok(Self {
            reference,
            orientation,
            level,
        })
    }

    pub fn yaw(&self) -> f64 {
        self.orientation as f64 * FRAC_PI_2
    }
}

/// One object of the pile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    pub primitive: Primitive,
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
    /// Occupied coarse cells `[row0, col0, rows, cols]`.
    pub coarse_cells: [usize; 4],
}

/// Rest orientation of every object at the shelf: lying on its side.
pub fn rest_quaternion() -> [f64; 4] {
    axis_angle([1.0, 0.0, 0.0], FRAC_PI_2)
}

/// Target placement for a descriptor under `cfg`.
pub fn target_placement(cfg: &SceneConfig, task: &TaskDescriptor) -> ReorientPose {
    let q = compose(axis_angle([0.0, 0.0, 1.0], task.yaw()), rest_quaternion());
    ReorientPose::new(
        [cfg.shelf_position[0], cfg.shelf_position[1], cfg.shelf_levels[task.level]],
        q,
    )
    .expect("unit quaternion")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTask {
    pub seed: u64,
    pub heightmap: Heightmap,
    pub objects: Vec<SceneObject>,
    pub target_object_id: usize,
    pub target_placement: ReorientPose,
    pub task: TaskDescriptor,
}

impl SceneTask {
    pub fn descriptor(&self) -> [f64; DESCRIPTOR_DIM] {
        self.task.encode()
    }

    pub fn target_object(&self) -> &SceneObject {
        self.objects
            .iter()
            .find(|o| o.object_id == self.target_object_id)
            .expect("target present by construction")
    }

    /// Fine-grid footprint of the target object.
    pub fn target_mask_fine(&self) -> Array2<bool> {
        let labels = render_labels(&self.objects, &self.heightmap);
        labels.mapv(|l| l == Some(self.target_object_id))
    }

    /// Coarse-grid footprint of the target object.
    pub fn target_mask_coarse(&self, cfg: &SceneConfig) -> Array2<bool> {
        let n = cfg.coarse_cells;
        let mut m = Array2::from_elem((n, n), false);
        let o = self.target_object();
        let [r0, c0, rows, cols] = o.coarse_cells;
        for r in r0..r0 + rows {
            for c in c0..c0 + cols {
                m[[r, c]] = true;
            }
        }
        m
    }
}

/// Resolves an object reference against the objects present.
pub fn resolve_reference(reference: ObjectRef, present: &[usize], catalog: &[ObjectSpec]) -> Option<usize> {
    match reference {
        ObjectRef::Absolute(id) => present.contains(&id).then_some(id),
        ObjectRef::Heaviest => present
            .iter()
            .copied()
            .max_by(|&a, &b| catalog[a].mass.total_cmp(&catalog[b].mass).then(b.cmp(&a))),
        ObjectRef::Lightest => present
            .iter()
            .copied()
            .min_by(|&a, &b| catalog[a].mass.total_cmp(&catalog[b].mass).then(a.cmp(&b))),
    }
}

fn footprint_contains(o: &SceneObject, x: f64, y: f64) -> bool {
    let dx = x - o.position[0];
    let dy = y - o.position[1];
    match o.primitive {
        Primitive::Cylinder { radius, .. } => dx * dx + dy * dy <= radius * radius,
        Primitive::Box { size } => {
            let yawed = rotate(o.quaternion, [1.0, 0.0, 0.0]);
            let (c, s) = (yawed[0], yawed[1]);
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            lx.abs() <= size[0] / 2.0 + 1e-9 && ly.abs() <= size[1] / 2.0 + 1e-9
        }
    }
}

/// Per-cell object id of the fine grid.
fn render_labels(objects: &[SceneObject], hm: &Heightmap) -> Array2<Option<usize>> {
    Array2::from_shape_fn((hm.rows(), hm.cols()), |(r, c)| {
        let [x, y] = hm.cell_center(r, c);
        objects
            .iter()
            .find(|o| footprint_contains(o, x, y))
            .map(|o| o.object_id)
    })
}

/// Analytic success oracle of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub theta1: f64,
    pub theta2: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub sector_center: f64,
    pub sector_half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Current orientation of the target object in the pile.
    pub current_quaternion: [f64; 4],
    /// World direction a place-grasp normal must face at the reorientation pose.
    pub required_direction: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Reorient,
    Place,
}

/// Oracle parameters shared by all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Half angular width of the reorientation sector, centered on the
    /// target object's azimuth in the pile.
    pub sector_half_width: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Elevation from vertical of the required place-grasp direction, per shelf level.
    pub level_tilts: [f64; N_LEVELS],
    /// Azimuth offset of the required direction from the target yaw.
    pub approach_azimuth_offset: f64,
    /// Random poses drawn per task to verify that both regions are hit.
    pub hit_test_samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            theta1: 0.3,
            theta2: 0.2,
            r_min: 0.3,
            r_max: 0.6,
            sector_half_width: FRAC_PI_4,
            z_min: 0.0,
            z_max: 0.3,
            level_tilts: [FRAC_PI_2 - 0.15, FRAC_PI_2 + 0.1, FRAC_PI_2 + 0.3],
            approach_azimuth_offset: FRAC_PI_4,
            hit_test_samples: 1000,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 < PI && self.theta2 > 0.0 && self.theta2 < PI) {
            return Err(Error::Config("oracle cone angles must lie in (0, pi)".into()));
        }
        if !(self.r_min >= 0.0 && self.r_max > self.r_min) {
            return Err(Error::Config("oracle radii must satisfy 0 <= r_min < r_max".into()));
        }
        if !(self.sector_half_width > 0.0 && self.sector_half_width <= PI) {
            return Err(Error::Config("sector half width must lie in (0, pi]".into()));
        }
        if !(self.z_max > self.z_min) {
            return Err(Error::Config("oracle z range is empty".into()));
        }
        Ok(())
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

impl OracleSpec {
    fn in_sector(&self, p: [f64; 3]) -> bool {
        let r = p[0].hypot(p[1]);
        let az = p[1].atan2(p[0]);
        r >= self.r_min
            && r <= self.r_max
            && wrap_angle(az - self.sector_center).abs() <= self.sector_half_width
            && p[2] >= self.z_min
            && p[2] <= self.z_max
    }

    /// Pick-grasp normal expressed in the object frame.
    pub fn pick_normal_object(&self, grasp: &GraspPose) -> [f64; 3] {
        let inv = geometry::unit_quat(self.current_quaternion).inverse();
        let v = inv * Vector3::from(grasp.normal);
        [v.x, v.y, v.z]
    }

    /// `grasp` is the world-frame pick grasp for [`Stage::Reorient`] and the
    /// object-frame place grasp for [`Stage::Place`].
    pub fn evaluate(&self, grasp: &GraspPose, pose: &ReorientPose, stage: Stage) -> bool {
        match stage {
            Stage::Reorient => {
                let n = rotate(pose.quaternion, self.pick_normal_object(grasp));
                angle_between(n, [0.0, 0.0, 1.0]) <= self.theta1 && self.in_sector(pose.position)
            }
            Stage::Place => {
                let n = rotate(pose.quaternion, grasp.normal);
                angle_between(n, self.required_direction) <= self.theta2
            }
        }
    }

    /// Positive fraction under uniform positions in `ws` and Haar-uniform
    /// rotations.
    pub fn analytic_fraction(&self, stage: Stage, ws: &Workspace) -> f64 {
        match stage {
            Stage::Reorient => {
                let cone = (1.0 - self.theta1.cos()) / 2.0;
                let area = self.sector_half_width * (self.r_max.powi(2) - self.r_min.powi(2));
                let ws_area = (ws.hi[0] - ws.lo[0]) * (ws.hi[1] - ws.lo[1]);
                let z = (self.z_max.min(ws.hi[2]) - self.z_min.max(ws.lo[2])).max(0.0) / (ws.hi[2] - ws.lo[2]);
                cone * (area / ws_area) * z
            }
            Stage::Place => (1.0 - self.theta2.cos()) / 2.0,
        }
    }
}

/// `oracle_evaluate` entry point.
pub fn oracle_evaluate(oracle: &OracleSpec, grasp: &GraspPose, pose: &ReorientPose, stage: Stage) -> bool {
    oracle.evaluate(grasp, pose, stage)
}

/// Builds the oracle of a task from the target object and descriptor.
pub fn build_oracle(cfg: &OracleConfig, target: &SceneObject, task: &TaskDescriptor) -> OracleSpec {
    let tilt = cfg.level_tilts[task.level];
    let az = task.yaw() + cfg.approach_azimuth_offset;
    OracleSpec {
        theta1: cfg.theta1,
        theta2: cfg.theta2,
        r_min: cfg.r_min,
        r_max: cfg.r_max,
        sector_center: target.position[1].atan2(target.position[0]),
        sector_half_width: cfg.sector_half_width,
        z_min: cfg.z_min,
        z_max: cfg.z_max,
        current_quaternion: target.quaternion,
        required_direction: [tilt.sin() * az.cos(), tilt.sin() * az.sin(), tilt.cos()],
    }
}

/// Haar-uniform rotation and uniform position in the workspace.
pub fn uniform_pose<R: Rng + ?Sized>(ws: &Workspace, rng: &mut R) -> ReorientPose {
    let position = std::array::from_fn(|i| rng.random_range(ws.lo[i]..ws.hi[i]));
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(p) = ReorientPose::new(position, q) {
            return p;
        }
    }
}

/// Proposal parameters for candidate poses near the success regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Share of candidates drawn uniformly over the workspace.
    pub uniform_fraction: f64,
    /// Standard deviation of the rotation perturbation, radians.
    pub rotation_sigma: f64,
    pub radial_margin: f64,
    pub angular_margin: f64,
    pub z_margin: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            uniform_fraction: 0.25,
            rotation_sigma: 0.35,
            radial_margin: 0.06,
            angular_margin: 0.2,
            z_margin: 0.05,
        }
    }
}

/// Rotation that sends the pick normal straight up and turns the place
/// normal toward the required azimuth.
pub fn aligned_rotation(oracle: &OracleSpec, pick_normal_obj: [f64; 3], place_normal_obj: [f64; 3]) -> UnitQuaternion<f64> {
    let up = Vector3::z();
    let n1 = Vector3::from(pick_normal_obj);
    let r0 = UnitQuaternion::rotation_between(&n1, &up)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI));
    let v = r0 * Vector3::from(place_normal_obj);
    let d = oracle.required_direction;
    if v.x.hypot(v.y) < 1e-9 || d[0].hypot(d[1]) < 1e-9 {
        return r0;
    }
    let yaw = d[1].atan2(d[0]) - v.y.atan2(v.x);
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * r0
}

/// Candidate pose from the grasp-aligned proposal.
pub fn targeted_pose<R: Rng + ?Sized>(
    oracle: &OracleSpec,
    pick: &GraspPose,
    place: &GraspPose,
    cfg: &ProposalConfig,
    ws: &Workspace,
    rng: &mut R,
) -> ReorientPose {
    let r = rng.random_range(oracle.r_min - cfg.radial_margin..oracle.r_max + cfg.radial_margin).max(0.0);
    let half = oracle.sector_half_width + cfg.angular_margin;
    let az = oracle.sector_center + rng.random_range(-half..half);
    let z = rng.random_range(oracle.z_min - cfg.z_margin..oracle.z_max + cfg.z_margin);
    let position = ws.clamp([r * az.cos(), r * az.sin(), z]);
    let base = aligned_rotation(oracle, oracle.pick_normal_object(pick), place.normal);
    let axis: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let angle: f64 = StandardNormal.sample(rng);
    let perturb = UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle * cfg.rotation_sigma);
    let q = perturb * base;
    ReorientPose::new(position, geometry::quat_array(&q)).expect("unit quaternion")
}

/// Generates one pile and task. Deterministic in `seed`.
pub fn generate_scene(
    seed: u64,
    n_objects: usize,
    cfg: &SceneConfig,
    oracle_cfg: &OracleConfig,
    ws: &Workspace,
) -> Result<(SceneTask, OracleSpec)> {
    if !(1..=N_OBJECT_TYPES).contains(&n_objects) {
        return Err(Error::InvalidArgument(format!("n_objects must lie in 1..={N_OBJECT_TYPES}")));
    }
    let fail = |reason: String| Error::SceneGeneration { seed, reason };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..N_OBJECT_TYPES)
        .collect::<Vec<_>>()
        .choose_multiple(&mut rng, n_objects)
        .copied()
        .collect();
    let n = cfg.coarse_cells;
    let coarse = cfg.cell_size * cfg.coarse_factor as f64;
    let origin = cfg.heightmap_origin();
    let mut occupied = Array2::from_elem((n, n), false);
    let mut objects = Vec::with_capacity(n_objects);
    for &id in &ids {
        let prim = cfg.catalog[id].primitive;
        let mut placed = None;
        for _ in 0..100 {
            let yaw_quarter = rng.random_range(0..2usize);
            let [fx, fy] = prim.footprint();
            let (mut cw, mut ch) = ((fx / coarse).round() as usize, (fy / coarse).round() as usize);
            if yaw_quarter == 1 {
                std::mem::swap(&mut cw, &mut ch);
            }
            // keep one free coarse cell to the border
            if cw + 2 > n || ch + 2 > n {
                break;
            }
            let r0 = rng.random_range(1..=n - 1 - ch);
            let c0 = rng.random_range(1..=n - 1 - cw);
            let free = (r0..r0 + ch).all(|r| (c0..c0 + cw).all(|c| !occupied[[r, c]]));
            if free {
                placed = Some((yaw_quarter, r0, c0, ch, cw));
                break;
            }
        }
        let (yaw_quarter, r0, c0, ch, cw) =
            placed.ok_or_else(|| fail(format!("could not place object {id} after 100 attempts")))?;
        for r in r0..r0 + ch {
            for c in c0..c0 + cw {
                occupied[[r, c]] = true;
            }
        }
        let x = origin[0] + (c0 as f64 + cw as f64 / 2.0) * coarse;
        let y = origin[1] + (r0 as f64 + ch as f64 / 2.0) * coarse;
        objects.push(SceneObject {
            object_id: id,
            primitive: prim,
            position: [x, y, prim.height() / 2.0],
            quaternion: axis_angle([0.0, 0.0, 1.0], yaw_quarter as f64 * FRAC_PI_2),
            coarse_cells: [r0, c0, ch, cw],
        });
    }

    let fine = cfg.fine_cells();
    let blank = Heightmap::new(Array2::zeros((fine, fine)), cfg.cell_size, origin)?;
    let labels = render_labels(&objects, &blank);
    let grid = labels.mapv(|l| match l {
        // stored at f32 precision so scene files round-trip exactly
        Some(id) => cfg.catalog[id].primitive.height() as f32 as f64,
        None => 0.0,
    });
    let heightmap = Heightmap::new(grid, cfg.cell_size, origin)?;

    let present: Vec<usize> = objects.iter().map(|o| o.object_id).collect();
    let u: f64 = rng.random();
    let reference = if u < cfg.absolute_ref_prob {
        ObjectRef::Absolute(*present.choose(&mut rng).expect("non-empty"))
    } else if u < cfg.absolute_ref_prob + (1.0 - cfg.absolute_ref_prob) / 2.0 {
        ObjectRef::Heaviest
    } else {
        ObjectRef::Lightest
    };
    let target_object_id = resolve_reference(reference, &present, &cfg.catalog).expect("reference resolves");
    let task = TaskDescriptor {
        reference,
        orientation: rng.random_range(0..N_ORIENTATIONS),
        level: rng.random_range(0..N_LEVELS),
    };
    let scene = SceneTask {
        seed,
        heightmap,
        objects,
        target_object_id,
        target_placement: target_placement(cfg, &task),
        task,
    };
    let oracle = build_oracle(oracle_cfg, scene.target_object(), &task);

    // Nonzero-measure check by hit-testing proposal draws.
    let pick = sample_pick_grasps(
        &scene.heightmap,
        &scene.target_mask_fine(),
        16,
        geometry::DEFAULT_EDGE_THRESHOLD,
        &mut rng,
    )
    .map_err(|e| fail(e.to_string()))?;
    let place = sample_place_grasps(
        &scene.target_object().primitive,
        scene.target_placement.position,
        scene.target_placement.quaternion,
        16,
        &mut rng,
    )
    .map_err(|e| fail(e.to_string()))?;
    let proposal = ProposalConfig::default();
    let (mut hit1, mut hit2) = (0usize, 0usize);
    for _ in 0..oracle_cfg.hit_test_samples {
        let g1 = pick.choose(&mut rng).expect("non-empty");
        let g2 = place.choose(&mut rng).expect("non-empty");
        let pose = targeted_pose(&oracle, g1, &g2.object, &proposal, ws, &mut rng);
        hit1 += oracle.evaluate(g1, &pose, Stage::Reorient) as usize;
        hit2 += oracle.evaluate(&g2.object, &pose, Stage::Place) as usize;
        if hit1 > 0 && hit2 > 0 {
            break;
        }
    }
    if hit1 == 0 || hit2 == 0 {
        return Err(fail(format!("oracle region hit-test failed (reorient {hit1}, place {hit2})")));
    }
    Ok((scene, oracle))
}

/// Pick and place grasp candidates of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSets {
    pub pick: Vec<GraspPose>,
    pub place: Vec<PlaceGrasp>,
}

/// Grasp sets from ground-truth scene knowledge.
pub fn true_grasps<R: Rng + ?Sized>(
    scene: &SceneTask,
    n_pick: usize,
    n_place: usize,
    edge_threshold: f64,
    rng: &mut R,
) -> Result<GraspSets> {
    let pick = sample_pick_grasps(&scene.heightmap, &scene.target_mask_fine(), n_pick, edge_threshold, rng)?;
    let place = sample_place_grasps(
        &scene.target_object().primitive,
        scene.target_placement.position,
        scene.target_placement.quaternion,
        n_place,
        rng,
    )?;
    Ok(GraspSets { pick, place })
}

// ---------------------------------------------------------------------------
// Condition encoder

/// Training parameters of the condition encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Trunk hidden widths; the trunk output is the condition embedding.
    pub hidden: Vec<usize>,
    pub phi_dim: usize,
    /// Hidden width of the object and placement head.
    pub head_hidden: usize,
    pub activation: Activation,
    pub trainer: TrainerConfig,
    /// Loss weights of the object, placement and mask heads.
    pub head_weights: [f64; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            phi_dim: 32,
            head_hidden: 64,
            activation: Activation::Silu,
            trainer: TrainerConfig {
                learning_rate: 1e-3,
                epochs: 60,
                batch_size: 64,
                final_lr_factor: 0.05,
                ..TrainerConfig::default()
            },
            head_weights: [1.0, 1.0, 10.0],
        }
    }
}

const PLACEMENT_OUT: usize = 5;
const HEAD_OUT: usize = N_OBJECT_TYPES + PLACEMENT_OUT;

/// Scene-task encoder.
///
/// The trunk maps scene features to the condition embedding. The head reads
/// the object logits and placement from the embedding; the mask decoder is
/// shared across coarse cells: a linear map of the outer product of the
/// cell's one-hot height band and the object probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoder<T> {
    trunk: FeedForwardNet<T>,
    head: FeedForwardNet<T>,
    mask: FeedForwardNet<T>,
    coarse_cells: usize,
    n_bands: usize,
}

/// Decoded encoder output for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub object_id: usize,
    /// Position with the height snapped to a shelf level and the yaw to one
    /// of the discrete options.
    pub placement: ReorientPose,
    pub yaw: f64,
    /// Coarse occupancy mask of the target, row-major.
    pub mask: Vec<bool>,
    pub phi: Vec<f64>,
}

impl TaskPrediction {
    pub fn mask_array(&self, n: usize) -> Array2<bool> {
        Array2::from_shape_vec((n, n), self.mask.clone()).expect("square mask")
    }
}

/// Head quality on a scene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEvaluation {
    pub n_scenes: usize,
    pub object_accuracy: f64,
    pub height_error_mean: f64,
    pub yaw_error_mean: f64,
    pub mask_error_fraction: f64,
    /// Fraction of scenes whose predicted mask misses the target entirely.
    pub mask_missed_fraction: f64,
}

/// Forward values of one encoder batch.
struct EncoderPass<T> {
    trunk: nn::Trace<T>,
    head: nn::Trace<T>,
    /// Rows are scene-major, then cell-major.
    mask: nn::Trace<T>,
    probs: Array2<f64>,
}

/// Softmax over the object logits of each row.
fn object_probabilities<T: Scalar>(out: &Array2<T>) -> Array2<f64> {
    let mut p = Array2::zeros((out.nrows(), N_OBJECT_TYPES));
    for i in 0..out.nrows() {
        let m = (0..N_OBJECT_TYPES).map(|j| out[[i, j]].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..N_OBJECT_TYPES).map(|j| (out[[i, j]].to_f64_lossy() - m).exp()).sum();
        for j in 0..N_OBJECT_TYPES {
            p[[i, j]] = (out[[i, j]].to_f64_lossy() - m).exp() / z;
        }
    }
    p
}

impl<T: Scalar> ConditionEncoder<T> {
    pub fn init<R: Rng + ?Sized>(scene_cfg: &SceneConfig, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut dims = vec![scene_cfg.encoder_input_dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.phi_dim);
        let trunk = FeedForwardNet::init(&dims, cfg.activation, OutputHead::Linear, rng)?;
        let head = FeedForwardNet::init(&[cfg.phi_dim, cfg.head_hidden, HEAD_OUT], cfg.activation, OutputHead::Linear, rng)?;
        let mask = FeedForwardNet::init(
            &[scene_cfg.n_height_bands * N_OBJECT_TYPES, 1],
            cfg.activation,
            OutputHead::Linear,
            rng,
        )?;
        Ok(Self {
            trunk,
            head,
            mask,
            coarse_cells: scene_cfg.coarse_cells,
            n_bands: scene_cfg.n_height_bands,
        })
    }

    /// The embedding network.
    pub fn net(&self) -> &FeedForwardNet<T> {
        &self.trunk
    }

    pub fn phi_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn cast<U: Scalar>(&self) -> ConditionEncoder<U> {
        ConditionEncoder {
            trunk: self.trunk.cast(),
            head: self.head.cast(),
            mask: self.mask.cast(),
            coarse_cells: self.coarse_cells,
            n_bands: self.n_bands,
        }
    }

    /// Encoder input of a scene. The trunk reads presence, area fraction and
    /// centroid of every height band of the pooled heightmap, then the task
    /// descriptor; the mask decoder reads each cell's band.
    pub fn features(&self, scene: &SceneTask, cfg: &SceneConfig) -> Result<EncoderInput<T>> {
        check_dim("encoder input", self.trunk.input_dim(), cfg.encoder_input_dim())?;
        check_dim("coarse cells", self.coarse_cells, cfg.coarse_cells)?;
        let bands = cfg.coarse_bands(&scene.heightmap)?;
        let n = cfg.coarse_cells;
        let nb = cfg.n_height_bands;
        let mut stats = vec![[0.0f64; 3]; nb];
        for (i, &b) in bands.iter().enumerate() {
            stats[b][0] += 1.0;
            stats[b][1] += (i / n) as f64;
            stats[b][2] += (i % n) as f64;
        }
        let mut x = Vec::with_capacity(self.trunk.input_dim());
        let half = 0.5 * (n - 1) as f64;
        for [count, rs, cs] in stats {
            if count > 0.0 {
                x.extend([1.0, count / (n * n) as f64, (rs / count - half) / half, (cs / count - half) / half]);
            } else {
                x.extend([0.0; BAND_STATS]);
            }
        }
        x.extend(scene.descriptor());
        Ok(EncoderInput {
            x: x.into_iter().map(T::lit).collect(),
            bands,
        })
    }

    fn pass(&self, x: &Array2<T>, bands: &[&[usize]]) -> Result<EncoderPass<T>> {
        encoder_pass([&self.trunk, &self.head, &self.mask], self.n_bands, x, bands)
    }

    fn pass_one(&self, scene: &SceneTask, cfg: &SceneConfig) -> Result<EncoderPass<T>> {
        let input = self.features(scene, cfg)?;
        let x = Array2::from_shape_vec((1, input.x.len()), input.x).expect("row");
        self.pass(&x, &[&input.bands])
    }

    /// Condition embedding of a scene.
    pub fn phi(&self, scene: &SceneTask, cfg: &SceneConfig) -> Result<Vec<T>> {
        self.trunk.forward(&self.features(scene, cfg)?.x)
    }

    fn example(&self, s: &SceneTask, scene_cfg: &SceneConfig, ws: &Workspace) -> Result<EncoderExample<T>> {
        let p = ws.normalize(s.target_placement.position);
        let yaw = s.task.yaw();
        Ok(EncoderExample {
            input: self.features(s, scene_cfg)?,
            object: s.target_object_id,
            placement: [p[0], p[1], p[2], yaw.cos(), yaw.sin()],
            mask: s.target_mask_coarse(scene_cfg).iter().map(|&b| b as u8 as f64).collect(),
        })
    }

    /// Parameters of trunk, head and mask decoder, in that order.
    pub fn params_flat(&self) -> Vec<T> {
        [&self.trunk, &self.head, &self.mask].iter().flat_map(|n| n.params_flat()).collect()
    }

    pub fn set_params_flat(&mut self, params: &[T]) -> Result<()> {
        check_dim("encoder parameters", self.params_flat().len(), params.len())?;
        let mut rest = params;
        for net in [&mut self.trunk, &mut self.head, &mut self.mask] {
            let (a, b) = rest.split_at(net.num_params());
            net.set_params_flat(a)?;
            rest = b;
        }
        Ok(())
    }

    /// Training loss on `scenes` and its gradient in [`params_flat`](Self::params_flat) order.
    pub fn loss_gradient(
        &self,
        scenes: &[SceneTask],
        scene_cfg: &SceneConfig,
        cfg: &EncoderConfig,
        ws: &Workspace,
    ) -> Result<(T, Vec<T>)> {
        let examples: Vec<EncoderExample<T>> = scenes.iter().map(|s| self.example(s, scene_cfg, ws)).collect::<Result<_>>()?;
        let batch: Vec<&EncoderExample<T>> = examples.iter().collect();
        let dims = LossDims {
            in_dim: self.trunk.input_dim(),
            cells: self.coarse_cells * self.coarse_cells,
            n_bands: self.n_bands,
            weights: cfg.head_weights,
        };
        let (loss, grads) = encoder_loss([&self.trunk, &self.head, &self.mask], &dims, &batch)?;
        Ok((loss, grads.iter().flat_map(|g| g.flat()).collect()))
    }

    pub fn predict_task(&self, scene: &SceneTask, cfg: &SceneConfig, ws: &Workspace) -> Result<TaskPrediction> {
        let pass = self.pass_one(scene, cfg)?;
        let out: Vec<f64> = pass.head.output().row(0).iter().map(|v| v.to_f64_lossy()).collect();
        let phi: Vec<f64> = pass.trunk.output().row(0).iter().map(|v| v.to_f64_lossy()).collect();
        let object_id = (0..N_OBJECT_TYPES)
            .max_by(|&a, &b| out[a].total_cmp(&out[b]).then(b.cmp(&a)))
            .expect("non-empty");
        let p0 = N_OBJECT_TYPES;
        let pos = ws.denormalize([out[p0], out[p0 + 1], out[p0 + 2]]);
        let level = nearest_index(&cfg.shelf_levels, pos[2]);
        let raw_yaw = out[p0 + 4].atan2(out[p0 + 3]);
        let step = TAU / YAW_OPTIONS as f64;
        let yaw = ((raw_yaw / step).round() * step).rem_euclid(TAU);
        let q = compose(axis_angle([0.0, 0.0, 1.0], yaw), rest_quaternion());
        let placement = ReorientPose::new([pos[0], pos[1], cfg.shelf_levels[level]], q)?;
        let mask = pass.mask.output().column(0).iter().map(|&z| z > T::zero()).collect();
        Ok(TaskPrediction {
            object_id,
            placement,
            yaw,
            mask,
            phi,
        })
    }

    pub fn evaluate(&self, scenes: &[SceneTask], cfg: &SceneConfig, ws: &Workspace) -> Result<EncoderEvaluation> {
        if scenes.is_empty() {
            return Err(Error::Dataset("no scenes to evaluate".into()));
        }
        let (mut correct, mut herr, mut yerr, mut merr, mut missed) = (0usize, 0.0, 0.0, 0.0, 0usize);
        for s in scenes {
            let p = self.predict_task(s, cfg, ws)?;
            correct += (p.object_id == s.target_object_id) as usize;
            herr += (p.placement.position[2] - s.target_placement.position[2]).abs();
            yerr += wrap_angle(p.yaw - s.task.yaw()).abs();
            let truth = s.target_mask_coarse(cfg);
            let wrong = truth.iter().zip(&p.mask).filter(|(a, b)| a != b).count();
            merr += wrong as f64 / truth.len() as f64;
            missed += !truth.iter().zip(&p.mask).any(|(a, b)| *a && *b) as usize;
        }
        let n = scenes.len() as f64;
        Ok(EncoderEvaluation {
            n_scenes: scenes.len(),
            object_accuracy: correct as f64 / n,
            height_error_mean: herr / n,
            yaw_error_mean: yerr / n,
            mask_error_fraction: merr / n,
            mask_missed_fraction: missed as f64 / n,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut extra = BTreeMap::new();
        extra.insert("role".into(), serde_json::json!("encoder"));
        extra.insert("coarse_cells".into(), serde_json::json!(self.coarse_cells));
        extra.insert("n_bands".into(), serde_json::json!(self.n_bands));
        extra.insert("head".into(), nn::net_to_json(&self.head));
        extra.insert("mask_decoder".into(), nn::net_to_json(&self.mask));
        nn::save_model(path, &self.trunk, extra)
    }

    pub fn from_file(file: &nn::ModelFile) -> Result<Self> {
        if file.extra_str("role") != Some("encoder") {
            return Err(Error::Format("model file is not a condition encoder".into()));
        }
        let extra = |k: &str| {
            file.meta
                .extra
                .get(k)
                .ok_or_else(|| Error::Format(format!("encoder metadata lacks `{k}`")))
        };
        let get = |k: &str| {
            extra(k)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("encoder metadata `{k}` is not an integer")))
        };
        let enc = Self {
            trunk: file.to_net()?,
            head: nn::net_from_json(extra("head")?)?,
            mask: nn::net_from_json(extra("mask_decoder")?)?,
            coarse_cells: get("coarse_cells")?,
            n_bands: get("n_bands")?,
        };
        check_dim("encoder head input", enc.trunk.output_dim(), enc.head.input_dim())?;
        check_dim("encoder head output", HEAD_OUT, enc.head.output_dim())?;
        check_dim("mask decoder input", enc.n_bands * N_OBJECT_TYPES, enc.mask.input_dim())?;
        Ok(enc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(&nn::load_model(path)?)
    }
}

/// Trunk input and per-cell bands of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<T> {
    pub x: Vec<T>,
    pub bands: Vec<usize>,
}

fn encoder_pass<T: Scalar>(
    [trunk, head, mask]: [&FeedForwardNet<T>; 3],
    nb: usize,
    x: &Array2<T>,
    bands: &[&[usize]],
) -> Result<EncoderPass<T>> {
    check_dim("band rows", x.nrows(), bands.len())?;
    let cells = bands.first().map_or(0, |b| b.len());
    let trunk = trunk.forward_trace(x.view())?;
    let phi = trunk.output();
    let head = head.forward_trace(phi.view())?;
    let probs = object_probabilities(head.output());
    let rows = Array2::from_shape_fn((x.nrows() * cells, nb * N_OBJECT_TYPES), |(r, j)| {
        let (i, c) = (r / cells, r % cells);
        if j / N_OBJECT_TYPES == bands[i][c] {
            T::lit(probs[[i, j % N_OBJECT_TYPES]])
        } else {
            T::zero()
        }
    });
    let mask = mask.forward_trace(rows.view())?;
    Ok(EncoderPass { trunk, head, mask, probs })
}

fn nearest_index(values: &[f64], x: f64) -> usize {
    (0..values.len())
        .min_by(|&a, &b| (values[a] - x).abs().total_cmp(&(values[b] - x).abs()))
        .expect("non-empty")
}

struct EncoderExample<T> {
    input: EncoderInput<T>,
    object: usize,
    placement: [f64; PLACEMENT_OUT],
    mask: Vec<f64>,
}

struct LossDims {
    in_dim: usize,
    cells: usize,
    n_bands: usize,
    weights: [f64; 3],
}

/// Weighted head losses of a batch and gradients for trunk, head and mask
/// decoder.
fn encoder_loss<T: Scalar>(
    nets: [&FeedForwardNet<T>; 3],
    dims: &LossDims,
    batch: &[&EncoderExample<T>],
) -> Result<(T, Vec<nn::Gradients<T>>)> {
    let n = batch.len();
    let x = Array2::from_shape_fn((n, dims.in_dim), |(i, j)| batch[i].input.x[j]);
    let bands: Vec<&[usize]> = batch.iter().map(|e| e.input.bands.as_slice()).collect();
    let pass = encoder_pass(nets, dims.n_bands, &x, &bands)?;
    let out = pass.head.output();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut cot = Array2::<T>::zeros((n, HEAD_OUT));
    let mut mcot = Array2::<T>::zeros((n * dims.cells, 1));
    let mout = pass.mask.output();
    for (i, ex) in batch.iter().enumerate() {
        let logits: Vec<f64> = (0..N_OBJECT_TYPES).map(|j| out[[i, j]].to_f64_lossy()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        loss += dims.weights[0] * (m + z.ln() - logits[ex.object]);
        for j in 0..N_OBJECT_TYPES {
            let p = (logits[j] - m).exp() / z;
            let y = (j == ex.object) as u8 as f64;
            cot[[i, j]] = T::lit(dims.weights[0] * (p - y) / nf);
        }
        for j in 0..PLACEMENT_OUT {
            let o = N_OBJECT_TYPES + j;
            let r = out[[i, o]].to_f64_lossy() - ex.placement[j];
            loss += dims.weights[1] * r * r;
            cot[[i, o]] = T::lit(dims.weights[1] * 2.0 * r / nf);
        }
        let scale = dims.weights[2] / dims.cells as f64;
        for (c, &y) in ex.mask.iter().enumerate() {
            let zl = mout[[i * dims.cells + c, 0]].to_f64_lossy();
            loss += scale * (zl.max(0.0) - zl * y + (-zl.abs()).exp().ln_1p());
            let p = 1.0 / (1.0 + (-zl).exp());
            mcot[[i * dims.cells + c, 0]] = T::lit(scale * (p - y) / nf);
        }
    }
    let (g_mask, d_rows) = nets[2].backward(&pass.mask, Cotangent::Output(mcot.view()))?;
    for i in 0..n {
        let mut dp = [0.0; N_OBJECT_TYPES];
        for (c, &b) in batch[i].input.bands.iter().enumerate() {
            for (j, d) in dp.iter_mut().enumerate() {
                *d += d_rows[[i * dims.cells + c, b * N_OBJECT_TYPES + j]].to_f64_lossy();
            }
        }
        let p = pass.probs.row(i);
        let dot: f64 = (0..N_OBJECT_TYPES).map(|j| p[j] * dp[j]).sum();
        for j in 0..N_OBJECT_TYPES {
            cot[[i, j]] += T::lit(p[j] * (dp[j] - dot));
        }
    }
    let (g_head, d_phi) = nets[1].backward(&pass.head, Cotangent::Output(cot.view()))?;
    let (g_trunk, _) = nets[0].backward(&pass.trunk, Cotangent::Output(d_phi.view()))?;
    Ok((T::lit(loss / nf), vec![g_trunk, g_head, g_mask]))
}

/// Trains the encoder with cross-entropy on the object head, squared error
/// on the placement head and mean per-cell cross-entropy on the mask head.
pub fn train_condition_encoder<T: Scalar>(
    scenes: &[SceneTask],
    scene_cfg: &SceneConfig,
    cfg: &EncoderConfig,
    ws: &Workspace,
) -> Result<(ConditionEncoder<T>, TrainReport)> {
    if scenes.len() < 500 {
        return Err(Error::Dataset(format!("encoder training needs at least 500 scenes, got {}", scenes.len())));
    }
    let first = scenes[0].target_object_id;
    if scenes.iter().all(|s| s.target_object_id == first) {
        return Err(Error::Dataset("all scenes share one target object class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed ^ 0xe7c0_de00);
    let mut enc = ConditionEncoder::<T>::init(scene_cfg, cfg, &mut rng)?;
    let examples: Vec<EncoderExample<T>> = scenes
        .iter()
        .map(|s| enc.example(s, scene_cfg, ws))
        .collect::<Result<_>>()?;
    let dims = LossDims {
        in_dim: enc.trunk.input_dim(),
        cells: enc.coarse_cells * enc.coarse_cells,
        n_bands: enc.n_bands,
        weights: cfg.head_weights,
    };
    let mut nets = [enc.trunk.clone(), enc.head.clone(), enc.mask.clone()];
    let report = nn::train_joint(&mut nets, &examples, &cfg.trainer, |nets, batch, _| {
        encoder_loss([&nets[0], &nets[1], &nets[2]], &dims, batch)
    })?;
    let [trunk, head, mask] = nets;
    enc.trunk = trunk;
    enc.head = head;
    enc.mask = mask;
    Ok((enc, report))
}

// ---------------------------------------------------------------------------
// Reorientation dataset

/// Candidate generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub candidates_per_scene: usize,
    pub n_pick_grasps: usize,
    pub n_place_grasps: usize,
    pub proposal: ProposalConfig,
    /// Majority-class share cap for the feasibility records.
    pub balance_max_share: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            candidates_per_scene: 80,
            n_pick_grasps: 16,
            n_place_grasps: 16,
            proposal: ProposalConfig::default(),
            balance_max_share: 0.6,
        }
    }
}

/// Per-scene candidate statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub seed: u64,
    pub candidates: usize,
    pub reorient_positive: usize,
    pub place_positive: usize,
    pub both_positive: usize,
    pub uniform_candidates: usize,
    pub uniform_reorient_positive: usize,
    pub uniform_place_positive: usize,
    pub analytic_reorient: f64,
    pub analytic_place: f64,
}

/// A double-success pose; `scene` indexes [`ReorientDataset::phis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionPose {
    pub scene: usize,
    pub pose: ReorientPose,
}

/// A labeled candidate; `scene` indexes [`ReorientDataset::phis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub scene: usize,
    pub grasp: GraspPose,
    pub pose: ReorientPose,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorientDataset {
    /// Condition embedding per scene.
    pub phis: Vec<Vec<f64>>,
    pub diffusion: Vec<DiffusionPose>,
    pub reorient: Vec<LabeledCandidate>,
    pub place: Vec<LabeledCandidate>,
    pub counts: Vec<SceneCounts>,
    /// Seeds of scenes without any double-success candidate.
    pub dropped: Vec<u64>,
}

impl ReorientDataset {
    fn expand(&self, set: &[LabeledCandidate]) -> Vec<FeasibilityRecord> {
        set.iter()
            .map(|c| FeasibilityRecord {
                grasp: c.grasp,
                pose: c.pose,
                phi: self.phis[c.scene].clone(),
                label: c.label,
            })
            .collect()
    }

    pub fn records(&self, stage: Stage) -> Vec<FeasibilityRecord> {
        match stage {
            Stage::Reorient => self.expand(&self.reorient),
            Stage::Place => self.expand(&self.place),
        }
    }

    pub fn score_examples<T: Scalar>(&self, ws: &Workspace) -> Vec<crate::diffusion::ScoreExample<T>> {
        let phis: Vec<Vec<T>> = self.phis.iter().map(|p| p.iter().map(|&v| T::lit(v)).collect()).collect();
        self.diffusion
            .iter()
            .map(|d| crate::diffusion::ScoreExample {
                x0: d.pose.to_latent(ws),
                phi: phis[d.scene].clone(),
            })
            .collect()
    }
}

/// Labels candidate poses with the oracle. `phis[i]` is the condition of
/// `scenes[i]`. Feasibility candidates are kept whatever their label (then
/// class-balanced); the diffusion set keeps only double successes.
pub fn generate_reorient_dataset(
    scenes: &[(SceneTask, OracleSpec)],
    phis: &[Vec<f64>],
    cfg: &DatasetConfig,
    ws: &Workspace,
    seed: u64,
) -> Result<ReorientDataset> {
    check_dim("condition embeddings", scenes.len(), phis.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ReorientDataset {
        phis: phis.to_vec(),
        diffusion: Vec::new(),
        reorient: Vec::new(),
        place: Vec::new(),
        counts: Vec::new(),
        dropped: Vec::new(),
    };
    for (si, (scene, oracle)) in scenes.iter().enumerate() {
        let grasps = true_grasps(scene, cfg.n_pick_grasps, cfg.n_place_grasps, geometry::DEFAULT_EDGE_THRESHOLD, &mut rng)?;
        let mut c = SceneCounts {
            seed: scene.seed,
            candidates: cfg.candidates_per_scene,
            reorient_positive: 0,
            place_positive: 0,
            both_positive: 0,
            uniform_candidates: 0,
            uniform_reorient_positive: 0,
            uniform_place_positive: 0,
            analytic_reorient: oracle.analytic_fraction(Stage::Reorient, ws),
            analytic_place: oracle.analytic_fraction(Stage::Place, ws),
        };
        let before = out.diffusion.len();
        for _ in 0..cfg.candidates_per_scene {
            let g1 = *grasps.pick.choose(&mut rng).expect("non-empty");
            let g2 = grasps.place.choose(&mut rng).expect("non-empty").object;
            let uniform = rng.random::<f64>() < cfg.proposal.uniform_fraction;
            let pose = if uniform {
                uniform_pose(ws, &mut rng)
            } else {
                targeted_pose(oracle, &g1, &g2, &cfg.proposal, ws, &mut rng)
            };
            let y1 = oracle.evaluate(&g1, &pose, Stage::Reorient);
            let y2 = oracle.evaluate(&g2, &pose, Stage::Place);
            c.reorient_positive += y1 as usize;
            c.place_positive += y2 as usize;
            c.both_positive += (y1 && y2) as usize;
            if uniform {
                c.uniform_candidates += 1;
                c.uniform_reorient_positive += y1 as usize;
                c.uniform_place_positive += y2 as usize;
            }
            if y1 && y2 {
                out.diffusion.push(DiffusionPose { scene: si, pose });
            }
            out.reorient.push(LabeledCandidate {
                scene: si,
                grasp: g1,
                pose,
                label: y1 as u8,
            });
            out.place.push(LabeledCandidate {
                scene: si,
                grasp: g2,
                pose,
                label: y2 as u8,
            });
        }
        if out.diffusion.len() == before {
            log::warn!("scene {} contributes no double-success candidate", scene.seed);
            out.dropped.push(scene.seed);
        }
        out.counts.push(c);
    }
    out.reorient = balance_by_label(std::mem::take(&mut out.reorient), |c| c.label, cfg.balance_max_share, &mut rng);
    out.place = balance_by_label(std::mem::take(&mut out.place), |c| c.label, cfg.balance_max_share, &mut rng);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scene files

#[derive(Serialize, Deserialize)]
struct HeightmapFile {
    rows: usize,
    cols: usize,
    cell_size: f64,
    origin: [f64; 2],
    /// Base64 of little-endian f32, row-major.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    seed: u64,
    objects: Vec<SceneObject>,
    target_object_id: usize,
    task: TaskDescriptor,
    descriptor: Vec<f64>,
    target_placement: ReorientPose,
    heightmap: HeightmapFile,
    oracle: OracleSpec,
}

pub fn scene_to_json(scene: &SceneTask, oracle: &OracleSpec) -> Result<String> {
    let mut bytes = Vec::with_capacity(scene.heightmap.grid.len() * 4);
    for &h in scene.heightmap.grid.iter() {
        bytes.extend_from_slice(&(h as f32).to_le_bytes());
    }
    let file = SceneFile {
        version: 1,
        seed: scene.seed,
        objects: scene.objects.clone(),
        target_object_id: scene.target_object_id,
        task: scene.task,
        descriptor: scene.descriptor().to_vec(),
        target_placement: scene.target_placement,
        heightmap: HeightmapFile {
            rows: scene.heightmap.rows(),
            cols: scene.heightmap.cols(),
            cell_size: scene.heightmap.cell_size,
            origin: scene.heightmap.origin,
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        },
        oracle: oracle.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn scene_from_json(text: &str) -> Result<(SceneTask, OracleSpec)> {
    let file: SceneFile = serde_json::from_str(text)?;
    if file.version != 1 {
        return Err(Error::Format(format!("unsupported scene file version {}", file.version)));
    }
    let hm = &file.heightmap;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&hm.data)
        .map_err(|e| Error::Format(format!("heightmap base64: {e}")))?;
    if bytes.len() != hm.rows * hm.cols * 4 {
        return Err(Error::Format("heightmap payload size mismatch".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let grid = Array2::from_shape_vec((hm.rows, hm.cols), values).map_err(|e| Error::Format(e.to_string()))?;
    let task = TaskDescriptor::decode(&file.descriptor)?;
    if task != file.task {
        return Err(Error::Format("descriptor disagrees with task".into()));
    }
    let scene = SceneTask {
        seed: file.seed,
        heightmap: Heightmap::new(grid, hm.cell_size, hm.origin)?,
        objects: file.objects,
        target_object_id: file.target_object_id,
        target_placement: file.target_placement,
        task,
    };
    if !scene.objects.iter().any(|o| o.object_id == scene.target_object_id) {
        return Err(Error::Format("target object missing from scene".into()));
    }
    Ok((scene, file.oracle))
}

pub fn save_scene(path: impl AsRef<Path>, scene: &SceneTask, oracle: &OracleSpec) -> Result<()> {
    std::fs::write(path, scene_to_json(scene, oracle)?)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<(SceneTask, OracleSpec)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    scene_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(seed: u64, n: usize) -> (SceneTask, OracleSpec) {
        generate_scene(seed, n, &SceneConfig::default(), &OracleConfig::default(), &Workspace::default()).unwrap()
    }

    #[test]
    fn default_configs_validate() {
        SceneConfig::default().validate().unwrap();
        OracleConfig::default().validate().unwrap();
    }

    #[test]
    fn descriptor_round_trip() {
        for reference in [ObjectRef::Absolute(5), ObjectRef::Heaviest, ObjectRef::Lightest] {
            for orientation in 0..N_ORIENTATIONS {
                for level in 0..N_LEVELS {
                    let t = TaskDescriptor {
                        reference,
                        orientation,
                        level,
                    };
                    let d = t.encode();
                    assert_eq!(TaskDescriptor::decode(&d).unwrap(), t);
                    assert_eq!(TaskDescriptor::decode(&d).unwrap().encode(), d);
                }
            }
        }
        let mut bad = TaskDescriptor {
            reference: ObjectRef::Heaviest,
            orientation: 0,
            level: 0,
        }
        .encode();
        bad[N_REF_KINDS] = 1.0;
        assert!(TaskDescriptor::decode(&bad).is_err());
    }

    #[test]
    fn heaviest_and_lightest_resolve_with_ties_to_lowest_id() {
        let cat = SceneConfig::default().catalog;
        assert_eq!(resolve_reference(ObjectRef::Heaviest, &[0, 4, 2], &cat), Some(4));
        assert_eq!(resolve_reference(ObjectRef::Lightest, &[0, 4, 1], &cat), Some(1));
        let mut tied = cat.clone();
        tied[3].mass = tied[6].mass;
        assert_eq!(resolve_reference(ObjectRef::Heaviest, &[6, 3], &tied), Some(3));
        assert_eq!(resolve_reference(ObjectRef::Lightest, &[6, 3], &tied), Some(3));
    }

    #[test]
    fn same_seed_same_scene() {
        let (a, oa) = gen(42, 5);
        let (b, ob) = gen(42, 5);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
    }

    #[test]
    fn single_object_heightmap_matches_footprint() {
        let (s, _) = gen(3, 1);
        let mask = s.target_mask_fine();
        let h = s.target_object().primitive.height() as f32 as f64;
        for ((r, c), &v) in s.heightmap.grid.indexed_iter() {
            if mask[[r, c]] {
                assert_eq!(v, h);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!(mask.iter().any(|&m| m));
    }

    #[test]
    fn scene_json_round_trip() {
        let (s, o) = gen(11, 6);
        let text = scene_to_json(&s, &o).unwrap();
        let (s2, o2) = scene_from_json(&text).unwrap();
        assert_eq!(s, s2);
        assert_eq!(o, o2);
    }

    #[test]
    fn oracle_constructed_points() {
        let (s, mut o) = gen(5, 3);
        o.sector_center = 0.0;
        o.current_quaternion = [1.0, 0.0, 0.0, 0.0];
        let up = GraspPose::new([0.0, 0.0, 0.1], [0.0, 0.0, 1.0]).unwrap();
        let inside = ReorientPose::identity_at([0.45, 0.0, 0.1]);
        assert!(o.evaluate(&up, &inside, Stage::Reorient));
        let outside = ReorientPose::identity_at([-0.75, 0.75, 0.1]);
        assert!(!o.evaluate(&up, &outside, Stage::Reorient));
        let _ = s;
    }

    #[test]
    fn many_scenes_generate() {
        for seed in 0..30 {
            let n = 1 + (seed as usize % N_OBJECT_TYPES);
            gen(seed, n);
        }
    }
}
