//! Synthetic multi-camera test bed: boxy worlds with constant-velocity
//! cars, static occluder walls, an analytic ego trajectory, point-splat
//! rendering with z-buffered occlusion, exact BEV ground truth, and
//! per-object visibility labels.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    bev_cell_to_world, project_point, world_to_bev_cell, BevGridSpec, CameraRig, CameraView,
    EgoPose,
};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Splats per meter on box surfaces.
const BOX_PPM: f64 = 12.0;
/// Splats per meter on flat ground patches (road, lane stripes).
const GROUND_PPM: f64 = 3.0;
/// Background color of every rendered image.
pub const BG_COLOR: [f64; 3] = [0.05, 0.06, 0.07];
/// Depth slack when comparing a sample point against the z-buffer.
const VIS_DEPTH_TOL: f64 = 1e-9;

/// Semantic class of a scene object. `Wall` never appears in ground-truth
/// maps (occluders are scenery, not labels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjClass {
    Wall,
    Road,
    Lane,
    Car,
}

impl ObjClass {
    /// Class id in ground-truth maps; 0 is background.
    pub fn id(self) -> u8 {
        match self {
            ObjClass::Wall => 0,
            ObjClass::Road => 1,
            ObjClass::Lane => 2,
            ObjClass::Car => 3,
        }
    }

    /// Stacking order for overlapping footprints; higher wins a cell.
    fn z_rank(self) -> u8 {
        self.id()
    }
}

/// One oriented box in the world: footprint `length` along its yaw axis by
/// `width` across it, vertical extent [z0, z1]. Flat patches have z0 = z1.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: usize,
    pub class: ObjClass,
    pub center: (f64, f64),
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub z0: f64,
    pub z1: f64,
    pub velocity: (f64, f64),
    pub albedo: [f64; 3],
}

impl SceneObject {
    /// Closed point-in-footprint test in world coordinates.
    pub fn contains_xy(&self, p: (f64, f64)) -> bool {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let dx = p.0 - self.center.0;
        let dy = p.1 - self.center.1;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }

    /// Footprint corners, counterclockwise.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let f = |a: f64, b: f64| {
            (
                self.center.0 + c * a - s * b,
                self.center.1 + s * a + c * b,
            )
        };
        [f(hl, hw), f(-hl, hw), f(-hl, -hw), f(hl, -hw)]
    }
}

/// Separating-axis overlap test for two oriented footprints; touching
/// counts as overlap.
pub fn footprints_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        (a.yaw.cos(), a.yaw.sin()),
        (-a.yaw.sin(), a.yaw.cos()),
        (b.yaw.cos(), b.yaw.sin()),
        (-b.yaw.sin(), b.yaw.cos()),
    ];
    for (ax, ay) in axes {
        let proj = |pts: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in pts {
                let d = x * ax + y * ay;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            (lo, hi)
        };
        let (a_lo, a_hi) = proj(&ca);
        let (b_lo, b_hi) = proj(&cb);
        if a_hi < b_lo || b_hi < a_lo {
            return false;
        }
    }
    true
}

/// Analytic constant-curvature ego motion; pose is exact at any time, so
/// trajectories need no integration.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoMotion {
    pub x0: f64,
    pub y0: f64,
    pub yaw0: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl EgoMotion {
    pub fn stationary() -> Self {
        EgoMotion {
            x0: 0.0,
            y0: 0.0,
            yaw0: 0.0,
            speed: 0.0,
            yaw_rate: 0.0,
        }
    }

    pub fn pose_at(&self, t: f64) -> EgoPose {
        if self.yaw_rate.abs() < 1e-12 {
            EgoPose::new(
                self.x0 + self.speed * t * self.yaw0.cos(),
                self.y0 + self.speed * t * self.yaw0.sin(),
                self.yaw0,
            )
        } else {
            let yaw = self.yaw0 + self.yaw_rate * t;
            let r = self.speed / self.yaw_rate;
            EgoPose::new(
                self.x0 + r * (yaw.sin() - self.yaw0.sin()),
                self.y0 - r * (yaw.cos() - self.yaw0.cos()),
                yaw,
            )
        }
    }
}

/// Generation parameters for [`make_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub n_cars: usize,
    pub n_occluders: usize,
    /// Include the road and lane-stripe ground patches.
    pub ground: bool,
    /// World square is [-half_extent, half_extent] in both axes.
    pub half_extent: f64,
    pub n_frames: usize,
    /// Frame period in seconds.
    pub dt: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_cars: 8,
            n_occluders: 2,
            ground: true,
            half_extent: 20.0,
            n_frames: 8,
            dt: 0.5,
            seed: 0,
        }
    }
}

/// A world snapshot at time `t`: dynamic objects, static occluder walls,
/// and the ego motion law.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWorld {
    pub objects: Vec<SceneObject>,
    pub occluders: Vec<SceneObject>,
    pub ego: EgoMotion,
    pub half_extent: f64,
    pub t: f64,
}

fn in_bounds(obj: &SceneObject, he: f64) -> bool {
    obj.corners()
        .iter()
        .all(|&(x, y)| x.abs() <= he && y.abs() <= he)
}

fn clear_of_ego_path(obj: &SceneObject, path: &[(f64, f64)]) -> bool {
    let inflated = SceneObject {
        length: obj.length + 2.4,
        width: obj.width + 2.4,
        ..obj.clone()
    };
    path.iter().all(|&p| !inflated.contains_xy(p))
}

/// Deterministically sample a world: ego motion first, then ground
/// patches, then cars, then occluder walls, each box rejection-sampled
/// until it fits inside the bounds without touching previously placed
/// boxes or the ego path.
pub fn make_scene(spec: &SceneSpec) -> Result<SceneWorld> {
    if spec.dt <= 0.0 {
        return Err(Error::InvalidConfig("frame period must be positive".into()));
    }
    if spec.half_extent <= 5.0 {
        return Err(Error::InvalidConfig("world half extent too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let he = spec.half_extent;
    let ego = EgoMotion {
        x0: rng.gen_range(-0.4 * he..0.4 * he),
        y0: rng.gen_range(-1.5..1.5),
        yaw0: rng.gen_range(-0.2..0.2),
        speed: rng.gen_range(2.0..5.0),
        yaw_rate: rng.gen_range(-0.12..0.12),
    };
    let ego_path: Vec<(f64, f64)> = (0..spec.n_frames.max(1))
        .map(|k| {
            let p = ego.pose_at(k as f64 * spec.dt);
            (p.tx, p.ty)
        })
        .collect();

    let mut objects = Vec::new();
    let mut next_id = 0;
    if spec.ground {
        objects.push(SceneObject {
            id: next_id,
            class: ObjClass::Road,
            center: (0.0, 0.0),
            length: 2.0 * he,
            width: 7.0,
            yaw: 0.0,
            z0: 0.0,
            z1: 0.0,
            velocity: (0.0, 0.0),
            albedo: [0.30, 0.30, 0.32],
        });
        next_id += 1;
        objects.push(SceneObject {
            id: next_id,
            class: ObjClass::Lane,
            center: (0.0, 0.0),
            length: 2.0 * he,
            width: 0.3,
            yaw: 0.0,
            z0: 0.02,
            z1: 0.02,
            velocity: (0.0, 0.0),
            albedo: [0.85, 0.85, 0.80],
        });
        next_id += 1;
    }

    let mut solid: Vec<SceneObject> = Vec::new();
    let place = |rng: &mut ChaCha8Rng,
                     solid: &mut Vec<SceneObject>,
                     kind: ObjClass,
                     id: usize|
     -> Result<SceneObject> {
        for _ in 0..300 {
            let margin = 4.0;
            let center = (
                rng.gen_range(-he + margin..he - margin),
                rng.gen_range(-he + margin..he - margin),
            );
            let (length, width, z1, speed) = match kind {
                ObjClass::Car => (
                    rng.gen_range(3.6..5.0),
                    rng.gen_range(1.6..2.2),
                    rng.gen_range(1.4..1.8),
                    rng.gen_range(0.0..6.0),
                ),
                _ => (
                    rng.gen_range(0.4..1.6),
                    rng.gen_range(2.0..6.0),
                    rng.gen_range(2.2..3.2),
                    0.0,
                ),
            };
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let albedo = match kind {
                ObjClass::Car => [
                    rng.gen_range(0.25..0.95),
                    rng.gen_range(0.25..0.95),
                    rng.gen_range(0.25..0.95),
                ],
                _ => [
                    0.45 + rng.gen_range(-0.08..0.08),
                    0.35 + rng.gen_range(-0.08..0.08),
                    0.25 + rng.gen_range(-0.08..0.08),
                ],
            };
            let candidate = SceneObject {
                id,
                class: kind,
                center,
                length,
                width,
                yaw,
                z0: 0.0,
                z1,
                velocity: (speed * yaw.cos(), speed * yaw.sin()),
                albedo,
            };
            if !in_bounds(&candidate, he) {
                continue;
            }
            if !clear_of_ego_path(&candidate, &ego_path) {
                continue;
            }
            if solid.iter().any(|o| footprints_overlap(o, &candidate)) {
                continue;
            }
            solid.push(candidate.clone());
            return Ok(candidate);
        }
        Err(Error::InvalidInput(format!(
            "could not place object {} after 300 attempts; world too crowded",
            id
        )))
    };

    for _ in 0..spec.n_cars {
        let car = place(&mut rng, &mut solid, ObjClass::Car, next_id)?;
        objects.push(car);
        next_id += 1;
    }
    let mut occluders = Vec::new();
    for _ in 0..spec.n_occluders {
        let wall = place(&mut rng, &mut solid, ObjClass::Wall, next_id)?;
        occluders.push(wall);
        next_id += 1;
    }

    Ok(SceneWorld {
        objects,
        occluders,
        ego,
        half_extent: he,
        t: 0.0,
    })
}

/// Advance the world by `dt`: object centers move at their constant
/// velocities; ego time advances along its analytic trajectory.
pub fn step_world(world: &SceneWorld, dt: f64) -> SceneWorld {
    let mut next = world.clone();
    next.t += dt;
    for obj in &mut next.objects {
        obj.center.0 += obj.velocity.0 * dt;
        obj.center.1 += obj.velocity.1 * dt;
    }
    next
}

fn lattice(a: f64, b: f64, ppm: f64) -> Vec<f64> {
    let n = (((b - a) * ppm).ceil() as usize).max(1);
    (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect()
}

/// Fixed surface sample points of an object in world coordinates: four
/// side faces plus the top for boxes, top only for flat patches.
pub(crate) fn surface_points(obj: &SceneObject) -> Vec<Point3<f64>> {
    let (c, s) = (obj.yaw.cos(), obj.yaw.sin());
    let at = |l_off: f64, w_off: f64, z: f64| {
        Point3::new(
            obj.center.0 + c * l_off - s * w_off,
            obj.center.1 + s * l_off + c * w_off,
            z,
        )
    };
    let (hl, hw) = (obj.length / 2.0, obj.width / 2.0);
    let mut pts = Vec::new();
    if obj.z1 - obj.z0 <= 1e-9 {
        for l_off in lattice(-hl, hl, GROUND_PPM) {
            for w_off in lattice(-hw, hw, GROUND_PPM) {
                pts.push(at(l_off, w_off, obj.z1));
            }
        }
        return pts;
    }
    let ls = lattice(-hl, hl, BOX_PPM);
    let ws = lattice(-hw, hw, BOX_PPM);
    let zs = lattice(obj.z0, obj.z1, BOX_PPM);
    for &w_off in &ws {
        for &z in &zs {
            pts.push(at(hl, w_off, z));
            pts.push(at(-hl, w_off, z));
        }
    }
    for &l_off in &ls {
        for &z in &zs {
            pts.push(at(l_off, hw, z));
            pts.push(at(l_off, -hw, z));
        }
    }
    for &l_off in &ls {
        for &w_off in &ws {
            pts.push(at(l_off, w_off, obj.z1));
        }
    }
    pts
}

/// Per-view splat buffer keeping, per pixel, the nearest hit (with its
/// owner and color) and the nearest hit from any *other* owner. The
/// second layer lets visibility checks ignore an object's own surface.
struct ViewBuf {
    w: usize,
    h: usize,
    color: Vec<[f64; 3]>,
    d1: Vec<f64>,
    owner1: Vec<usize>,
    d2: Vec<f64>,
}

impl ViewBuf {
    fn new(w: usize, h: usize) -> Self {
        ViewBuf {
            w,
            h,
            color: vec![BG_COLOR; w * h],
            d1: vec![f64::INFINITY; w * h],
            owner1: vec![usize::MAX; w * h],
            d2: vec![f64::INFINITY; w * h],
        }
    }

    fn splat(&mut self, px: usize, py: usize, depth: f64, owner: usize, albedo: [f64; 3]) {
        let i = py * self.w + px;
        if depth < self.d1[i] {
            if owner != self.owner1[i] {
                self.d2[i] = self.d1[i];
            }
            self.d1[i] = depth;
            self.owner1[i] = owner;
            self.color[i] = albedo;
        } else if owner != self.owner1[i] && depth < self.d2[i] {
            self.d2[i] = depth;
        }
    }

    /// Nearest splat depth at the pixel among owners other than `owner`.
    fn other_depth(&self, px: usize, py: usize, owner: usize) -> f64 {
        let i = py * self.w + px;
        if self.owner1[i] == owner {
            self.d2[i]
        } else {
            self.d1[i]
        }
    }
}

fn pixel_index(u: f64, v: f64, view: &CameraView) -> (usize, usize) {
    let px = (u.floor() as usize).min(view.width - 1);
    let py = (v.floor() as usize).min(view.height - 1);
    (px, py)
}

fn render_full(world: &SceneWorld, rig: &CameraRig, pose: &EgoPose) -> Vec<ViewBuf> {
    let mut bufs: Vec<ViewBuf> = rig
        .views
        .iter()
        .map(|v| ViewBuf::new(v.width, v.height))
        .collect();
    let renderables = world
        .objects
        .iter()
        .chain(world.occluders.iter())
        .enumerate();
    for (owner, obj) in renderables {
        for p in surface_points(obj) {
            let (ex, ey) = pose.world_to_ego((p.x, p.y));
            let q = Point3::new(ex, ey, p.z);
            for (view, buf) in rig.views.iter().zip(bufs.iter_mut()) {
                if let Some(hit) = project_point(&q, view) {
                    let (px, py) = pixel_index(hit.u, hit.v, view);
                    buf.splat(px, py, hit.depth, owner, obj.albedo);
                }
            }
        }
    }
    bufs
}

fn images_from_bufs(bufs: &[ViewBuf]) -> Vec<FeatureMap> {
    bufs.iter()
        .map(|b| {
            let mut img = FeatureMap::zeros(b.h, b.w, 3);
            for (i, px) in b.color.iter().enumerate() {
                let (y, x) = (i / b.w, i % b.w);
                for ch in 0..3 {
                    img.set(y, x, ch, px[ch]);
                }
            }
            img
        })
        .collect()
}

/// Render every camera of the rig from the given ego pose: point-splat
/// rasterization with a z-buffer, constant background.
pub fn render_views(world: &SceneWorld, rig: &CameraRig, pose: &EgoPose) -> Vec<FeatureMap> {
    images_from_bufs(&render_full(world, rig, pose))
}

/// Fraction of an object's surface samples visible in at least one
/// camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityLabel {
    pub id: usize,
    pub visible_fraction: f64,
}

fn labels_from_bufs(
    world: &SceneWorld,
    rig: &CameraRig,
    pose: &EgoPose,
    bufs: &[ViewBuf],
) -> Vec<VisibilityLabel> {
    let mut out = Vec::new();
    for (owner, obj) in world.objects.iter().enumerate() {
        if obj.class != ObjClass::Car {
            continue;
        }
        let pts = surface_points(obj);
        let mut visible = 0usize;
        for p in &pts {
            let (ex, ey) = pose.world_to_ego((p.x, p.y));
            let q = Point3::new(ex, ey, p.z);
            let seen = rig.views.iter().zip(bufs.iter()).any(|(view, buf)| {
                project_point(&q, view).is_some_and(|hit| {
                    let (px, py) = pixel_index(hit.u, hit.v, view);
                    hit.depth <= buf.other_depth(px, py, owner) + VIS_DEPTH_TOL
                })
            });
            if seen {
                visible += 1;
            }
        }
        out.push(VisibilityLabel {
            id: obj.id,
            visible_fraction: if pts.is_empty() {
                0.0
            } else {
                visible as f64 / pts.len() as f64
            },
        });
    }
    out
}

/// Visibility labels for every car: surface samples tested against the
/// multi-camera z-buffer, an object's own splats never occlude it.
pub fn occlusion_labels(
    world: &SceneWorld,
    rig: &CameraRig,
    pose: &EgoPose,
) -> Vec<VisibilityLabel> {
    let bufs = render_full(world, rig, pose);
    labels_from_bufs(world, rig, pose, &bufs)
}

/// One labeled car in a frame's ground truth, in the current ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub id: usize,
    /// Fractional BEV cell of the center.
    pub center_cell: (f64, f64),
    /// Center in ego-frame meters.
    pub center_ego: (f64, f64),
    /// Velocity rotated into the ego frame, m/s.
    pub velocity_ego: (f64, f64),
}

/// Exact BEV supervision for one frame: per-cell class map plus the cars
/// whose centers land inside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBev {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
    pub objects: Vec<GtObject>,
}

impl GroundTruthBev {
    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }
}

/// Rasterize the world into the ego-centered BEV grid: each cell takes
/// the class of the highest-stacked footprint containing its center
/// (ties to the lowest object id), background otherwise.
pub fn ground_truth_bev(world: &SceneWorld, grid: &BevGridSpec, pose: &EgoPose) -> GroundTruthBev {
    let mut classes = vec![0u8; grid.h * grid.w];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let ego = bev_cell_to_world((x as f64, y as f64), grid);
            let wp = pose.ego_to_world(ego);
            let mut best_rank = 0u8;
            let mut best_class = 0u8;
            for obj in &world.objects {
                if obj.class.z_rank() > best_rank && obj.contains_xy(wp) {
                    best_rank = obj.class.z_rank();
                    best_class = obj.class.id();
                }
            }
            classes[y * grid.w + x] = best_class;
        }
    }
    let (c, s) = (pose.yaw.cos(), pose.yaw.sin());
    let mut objects = Vec::new();
    for obj in &world.objects {
        if obj.class != ObjClass::Car {
            continue;
        }
        let center_ego = pose.world_to_ego(obj.center);
        let center_cell = world_to_bev_cell(center_ego, grid);
        let cx = center_cell.0.round();
        let cy = center_cell.1.round();
        if cx < 0.0 || cy < 0.0 || cx >= grid.w as f64 || cy >= grid.h as f64 {
            continue;
        }
        let (vx, vy) = obj.velocity;
        objects.push(GtObject {
            id: obj.id,
            center_cell,
            center_ego,
            velocity_ego: (c * vx + s * vy, -s * vx + c * vy),
        });
    }
    GroundTruthBev {
        h: grid.h,
        w: grid.w,
        classes,
        objects,
    }
}

/// A ring of `n` outward-facing pinhole cameras on the ego, evenly spaced
/// in yaw starting from straight ahead, all at the same height with the
/// same intrinsics. Image sides must be divisible by 8 so the featurizer
/// accepts them.
pub fn make_ring_rig(
    n: usize,
    width: usize,
    height: usize,
    focal: f64,
    cam_height: f64,
) -> Result<CameraRig> {
    if n == 0 {
        return Err(Error::InvalidConfig("rig needs at least one camera".into()));
    }
    if width % 8 != 0 || height % 8 != 0 {
        return Err(Error::InvalidConfig(format!(
            "image {}x{} sides must be divisible by 8",
            width, height
        )));
    }
    if !(focal > 0.0) {
        return Err(Error::InvalidConfig("focal length must be positive".into()));
    }
    let k = Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let mut views = Vec::with_capacity(n);
    for i in 0..n {
        let phi = std::f64::consts::TAU * i as f64 / n as f64;
        let (c, s) = (phi.cos(), phi.sin());
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let center = Vector3::new(0.3 * c, 0.3 * s, cam_height);
        let translation = -rotation * center;
        views.push(CameraView::from_krt(&k, &rotation, &translation, width, height, i)?);
    }
    CameraRig::new(views)
}

/// Everything the learner needs for one frame.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub t: f64,
    pub pose: EgoPose,
    pub images: Vec<FeatureMap>,
    pub gt: GroundTruthBev,
    pub visibility: Vec<VisibilityLabel>,
}

/// One generated sequence: frames at a fixed period.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub frames: Vec<FrameData>,
    pub dt: f64,
}

/// Generate a full sequence: sample the world once, then render, label,
/// and step it frame by frame.
pub fn build_sequence(
    spec: &SceneSpec,
    rig: &CameraRig,
    grid: &BevGridSpec,
) -> Result<SequenceData> {
    let mut world = make_scene(spec)?;
    let mut frames = Vec::with_capacity(spec.n_frames);
    for _ in 0..spec.n_frames {
        let pose = world.ego.pose_at(world.t);
        let bufs = render_full(&world, rig, &pose);
        let images = images_from_bufs(&bufs);
        let visibility = labels_from_bufs(&world, rig, &pose, &bufs);
        let gt = ground_truth_bev(&world, grid, &pose);
        frames.push(FrameData {
            t: world.t,
            pose,
            images,
            gt,
            visibility,
        });
        world = step_world(&world, spec.dt);
    }
    Ok(SequenceData {
        frames,
        dt: spec.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_car_world(car: SceneObject) -> SceneWorld {
        SceneWorld {
            objects: vec![car],
            occluders: vec![],
            ego: EgoMotion::stationary(),
            half_extent: 20.0,
            t: 0.0,
        }
    }

    fn car_at(center: (f64, f64), length: f64, width: f64, z1: f64) -> SceneObject {
        SceneObject {
            id: 0,
            class: ObjClass::Car,
            center,
            length,
            width,
            yaw: 0.0,
            z0: 0.0,
            z1,
            velocity: (0.0, 0.0),
            albedo: [0.9, 0.1, 0.1],
        }
    }

    #[test]
    fn make_scene_is_deterministic() {
        let spec = SceneSpec::default();
        let a = make_scene(&spec).unwrap();
        let b = make_scene(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_scene(&SceneSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_gives_empty_world() {
        let spec = SceneSpec {
            n_cars: 0,
            n_occluders: 0,
            ground: false,
            ..SceneSpec::default()
        };
        let w = make_scene(&spec).unwrap();
        assert!(w.objects.is_empty());
        assert!(w.occluders.is_empty());
    }

    #[test]
    fn sampled_worlds_have_disjoint_solids() {
        for seed in 0..60 {
            let spec = SceneSpec {
                seed,
                n_cars: 6,
                n_occluders: 2,
                ..SceneSpec::default()
            };
            let w = make_scene(&spec).unwrap();
            let solids: Vec<&SceneObject> = w
                .objects
                .iter()
                .filter(|o| o.class == ObjClass::Car)
                .chain(w.occluders.iter())
                .collect();
            for i in 0..solids.len() {
                for j in i + 1..solids.len() {
                    assert!(
                        !footprints_overlap(solids[i], solids[j]),
                        "seed {} objects {} and {} overlap",
                        seed,
                        solids[i].id,
                        solids[j].id
                    );
                }
            }
            for s in &solids {
                assert!(in_bounds(s, w.half_extent));
            }
        }
    }

    #[test]
    fn step_world_moves_centers_linearly() {
        let mut car = car_at((1.0, 2.0), 4.0, 2.0, 1.5);
        car.velocity = (1.0, 0.0);
        let w = lone_car_world(car);
        let w1 = step_world(&w, 0.5);
        assert_eq!(w1.objects[0].center, (1.5, 2.0));
        assert_eq!(w1.t, 0.5);

        let half = step_world(&step_world(&w, 0.25), 0.25);
        let full = step_world(&w, 0.5);
        assert!((half.objects[0].center.0 - full.objects[0].center.0).abs() < 1e-12);

        let mut parked = car_at((1.0, 2.0), 4.0, 2.0, 1.5);
        parked.velocity = (0.0, 0.0);
        let wp = step_world(&lone_car_world(parked.clone()), 0.5);
        assert_eq!(wp.objects[0].center, parked.center);
    }

    #[test]
    fn ego_pose_straight_and_arc() {
        let straight = EgoMotion {
            x0: 1.0,
            y0: -2.0,
            yaw0: 0.5,
            speed: 3.0,
            yaw_rate: 0.0,
        };
        let p = straight.pose_at(2.0);
        assert!((p.tx - (1.0 + 6.0 * 0.5f64.cos())).abs() < 1e-12);
        assert!((p.ty - (-2.0 + 6.0 * 0.5f64.sin())).abs() < 1e-12);
        assert_eq!(p.yaw, 0.5);

        let arc = EgoMotion {
            x0: 0.0,
            y0: 0.0,
            yaw0: 0.1,
            speed: 4.0,
            yaw_rate: 0.3,
        };
        let p0 = arc.pose_at(0.0);
        assert_eq!((p0.tx, p0.ty, p0.yaw), (0.0, 0.0, 0.1));
        // numeric check: d(pos)/dt == speed * heading
        let h = 1e-6;
        let (pa, pb) = (arc.pose_at(1.0 - h), arc.pose_at(1.0 + h));
        let vx = (pb.tx - pa.tx) / (2.0 * h);
        let vy = (pb.ty - pa.ty) / (2.0 * h);
        let yaw = arc.pose_at(1.0).yaw;
        assert!((vx - 4.0 * yaw.cos()).abs() < 1e-5);
        assert!((vy - 4.0 * yaw.sin()).abs() < 1e-5);
    }

    #[test]
    fn ring_rig_covers_all_directions() {
        let rig = make_ring_rig(6, 64, 48, 30.0, 1.5).unwrap();
        assert_eq!(rig.n_views(), 6);
        let ahead = Point3::new(10.0, 0.0, 0.0);
        let hit = project_point(&ahead, &rig.views[0]).unwrap();
        assert!((hit.u - 32.0).abs() < 1e-9);
        assert!((hit.v - (24.0 + 30.0 * 1.5 / 9.7)).abs() < 1e-9);
        assert!(project_point(&ahead, &rig.views[3]).is_none());
        let behind = Point3::new(-10.0, 0.0, 0.0);
        assert!(project_point(&behind, &rig.views[3]).is_some());
        assert!(project_point(&behind, &rig.views[0]).is_none());
        assert!(make_ring_rig(4, 60, 48, 30.0, 1.5).is_err());
    }

    #[test]
    fn empty_world_renders_background_only() {
        let w = SceneWorld {
            objects: vec![],
            occluders: vec![],
            ego: EgoMotion::stationary(),
            half_extent: 20.0,
            t: 0.0,
        };
        let rig = make_ring_rig(2, 64, 48, 30.0, 1.5).unwrap();
        let imgs = render_views(&w, &rig, &w.ego.pose_at(0.0));
        assert_eq!(imgs.len(), 2);
        for img in imgs {
            for px in img.data().chunks(3) {
                assert_eq!(px, BG_COLOR);
            }
        }
    }

    #[test]
    fn lone_box_pixels_cluster_at_its_projection() {
        let car = car_at((8.0, 0.0), 0.25, 0.25, 0.25);
        let w = lone_car_world(car);
        let rig = make_ring_rig(1, 64, 48, 30.0, 1.5).unwrap();
        let pose = EgoPose::new(0.0, 0.0, 0.0);
        let img = &render_views(&w, &rig, &pose)[0];
        let center_hit = project_point(&Point3::new(8.0, 0.0, 0.125), &rig.views[0]).unwrap();
        let mut n = 0.0;
        let (mut su, mut sv) = (0.0, 0.0);
        for y in 0..img.h {
            for x in 0..img.w {
                if img.at(y, x) != BG_COLOR {
                    n += 1.0;
                    su += x as f64 + 0.5;
                    sv += y as f64 + 0.5;
                    let du = x as f64 + 0.5 - center_hit.u;
                    let dv = y as f64 + 0.5 - center_hit.v;
                    assert!(
                        (du * du + dv * dv).sqrt() < 5.0,
                        "stray pixel ({}, {})",
                        x,
                        y
                    );
                }
            }
        }
        assert!(n > 0.0, "box rendered no pixels");
        let cu = su / n;
        let cv = sv / n;
        assert!(
            (cu - center_hit.u).abs() <= 1.0 && (cv - center_hit.v).abs() <= 1.0,
            "centroid ({cu}, {cv}) vs projection ({}, {})",
            center_hit.u,
            center_hit.v
        );
    }

    #[test]
    fn nearer_occluder_wins_the_depth_test() {
        let car = car_at((10.0, 0.0), 0.5, 1.25, 1.6);
        let wall = SceneObject {
            id: 1,
            class: ObjClass::Wall,
            center: (5.0, 0.0),
            length: 0.2,
            width: 4.0,
            yaw: 0.0,
            z0: 0.0,
            z1: 3.0,
            velocity: (0.0, 0.0),
            albedo: [0.1, 0.2, 0.9],
        };
        let rig = make_ring_rig(1, 64, 48, 30.0, 1.5).unwrap();
        let pose = EgoPose::new(0.0, 0.0, 0.0);
        let hit = project_point(&Point3::new(10.0, 0.0, 0.8), &rig.views[0]).unwrap();
        let (px, py) = pixel_index(hit.u, hit.v, &rig.views[0]);

        let clear = lone_car_world(car.clone());
        let img = &render_views(&clear, &rig, &pose)[0];
        assert_eq!(img.at(py, px), car.albedo);

        let blocked = SceneWorld {
            occluders: vec![wall.clone()],
            ..clear
        };
        let img = &render_views(&blocked, &rig, &pose)[0];
        assert_eq!(img.at(py, px), wall.albedo);
    }

    #[test]
    fn gt_labels_exactly_covered_cells() {
        let car = car_at((5.5, 5.5), 2.2, 2.2, 1.5);
        let w = lone_car_world(car);
        let grid = BevGridSpec::with_origin(12, 12, 1.0, (0.0, 0.0)).unwrap();
        let gt = ground_truth_bev(&w, &grid, &EgoPose::new(0.0, 0.0, 0.0));
        for y in 0..12 {
            for x in 0..12 {
                let want = if (5..=6).contains(&x) && (5..=6).contains(&y) {
                    3
                } else {
                    0
                };
                assert_eq!(gt.class_at(y, x), want, "cell ({x}, {y})");
            }
        }
        assert_eq!(gt.objects.len(), 1);
        assert_eq!(gt.objects[0].center_cell, (5.5, 5.5));
    }

    #[test]
    fn gt_empty_world_is_background() {
        let w = SceneWorld {
            objects: vec![],
            occluders: vec![],
            ego: EgoMotion::stationary(),
            half_extent: 20.0,
            t: 0.0,
        };
        let grid = BevGridSpec::new(8, 8, 1.0).unwrap();
        let gt = ground_truth_bev(&w, &grid, &EgoPose::new(0.0, 0.0, 0.0));
        assert!(gt.classes.iter().all(|&c| c == 0));
        assert!(gt.objects.is_empty());
    }

    #[test]
    fn gt_shifts_with_ego_translation() {
        let mut w = lone_car_world(car_at((1.0, -0.5), 4.2, 1.9, 1.5));
        w.objects.push(SceneObject {
            id: 1,
            ..car_at((-2.5, 2.0), 3.7, 2.1, 1.5)
        });
        let grid = BevGridSpec::new(16, 16, 0.5).unwrap();
        let p0 = EgoPose::new(0.0, 0.0, 0.0);
        let p1 = EgoPose::new(3.0 * 0.5, 0.0, 0.0);
        let gt0 = ground_truth_bev(&w, &grid, &p0);
        let gt1 = ground_truth_bev(&w, &grid, &p1);
        for y in 0..16 {
            for x in 0..13 {
                assert_eq!(gt1.class_at(y, x), gt0.class_at(y, x + 3), "cell ({x}, {y})");
            }
        }
    }

    #[test]
    fn gt_velocity_rotates_into_ego_frame() {
        let mut car = car_at((0.0, 5.0), 4.0, 2.0, 1.5);
        car.velocity = (1.0, 0.0);
        let w = lone_car_world(car);
        let grid = BevGridSpec::new(32, 32, 0.5).unwrap();
        let pose = EgoPose::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let gt = ground_truth_bev(&w, &grid, &pose);
        assert_eq!(gt.objects.len(), 1);
        let v = gt.objects[0].velocity_ego;
        assert!((v.0 - 0.0).abs() < 1e-12);
        assert!((v.1 - -1.0).abs() < 1e-12);
        // ego looks along +y; the car 5 m ahead is at ego-frame (5, 0)
        let ce = gt.objects[0].center_ego;
        assert!((ce.0 - 5.0).abs() < 1e-12);
        assert!((ce.1 - 0.0).abs() < 1e-12);
    }

    #[test]
    fn unobstructed_car_is_fully_visible() {
        let w = lone_car_world(car_at((10.0, 0.0), 0.5, 1.25, 1.6));
        let rig = make_ring_rig(1, 64, 48, 30.0, 1.5).unwrap();
        let labels = occlusion_labels(&w, &rig, &EgoPose::new(0.0, 0.0, 0.0));
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].visible_fraction, 1.0);
    }

    #[test]
    fn car_behind_large_wall_is_invisible() {
        let mut w = lone_car_world(car_at((10.0, 0.0), 0.5, 1.25, 1.6));
        w.occluders.push(SceneObject {
            id: 1,
            class: ObjClass::Wall,
            center: (5.0, 0.0),
            length: 0.2,
            width: 8.0,
            yaw: 0.0,
            z0: 0.0,
            z1: 4.0,
            velocity: (0.0, 0.0),
            albedo: [0.2; 3],
        });
        let rig = make_ring_rig(1, 64, 48, 30.0, 1.5).unwrap();
        let labels = occlusion_labels(&w, &rig, &EgoPose::new(0.0, 0.0, 0.0));
        assert_eq!(labels[0].visible_fraction, 0.0);
    }

    #[test]
    fn half_occluded_car_reports_half() {
        // the wall's +y edge sits at -0.0001 so the ray family splits the
        // car's symmetric sample lattice exactly in half
        let car = car_at((10.0, 0.0), 0.5, 1.25, 1.6);
        let n_samples = surface_points(&car).len() as f64;
        let mut w = lone_car_world(car);
        w.occluders.push(SceneObject {
            id: 1,
            class: ObjClass::Wall,
            center: (5.0, (-5.0 - 0.0001) / 2.0),
            length: 0.2,
            width: 5.0 - 0.0001,
            yaw: 0.0,
            z0: 0.0,
            z1: 3.0,
            velocity: (0.0, 0.0),
            albedo: [0.2; 3],
        });
        let rig = make_ring_rig(1, 64, 48, 30.0, 1.5).unwrap();
        let labels = occlusion_labels(&w, &rig, &EgoPose::new(0.0, 0.0, 0.0));
        let quantum = 1.0 / n_samples;
        assert!(
            (labels[0].visible_fraction - 0.5).abs() <= quantum + 1e-12,
            "fraction {} with quantum {}",
            labels[0].visible_fraction,
            quantum
        );
    }

    #[test]
    fn build_sequence_produces_consistent_frames() {
        let spec = SceneSpec {
            n_cars: 3,
            n_occluders: 1,
            n_frames: 4,
            seed: 7,
            ..SceneSpec::default()
        };
        let rig = make_ring_rig(2, 64, 48, 30.0, 1.5).unwrap();
        let grid = BevGridSpec::new(16, 16, 2.0).unwrap();
        let seq = build_sequence(&spec, &rig, &grid).unwrap();
        assert_eq!(seq.frames.len(), 4);
        for (k, f) in seq.frames.iter().enumerate() {
            assert!((f.t - k as f64 * 0.5).abs() < 1e-12);
            assert_eq!(f.images.len(), 2);
            assert_eq!(f.gt.h, 16);
            assert_eq!(f.visibility.len(), 3);
            for v in &f.visibility {
                assert!((0.0..=1.0).contains(&v.visible_fraction));
            }
        }
        // determinism end to end
        let seq2 = build_sequence(&spec, &rig, &grid).unwrap();
        assert_eq!(
            seq.frames[3].images[0].data(),
            seq2.frames[3].images[0].data()
        );
        assert_eq!(seq.frames[3].gt, seq2.frames[3].gt);
    }
}
