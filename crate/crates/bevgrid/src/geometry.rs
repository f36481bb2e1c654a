//! BEV-grid and camera geometry: cell/world mapping, pillar construction,
//! pinhole projection, hit-view determination, ego-motion alignment of
//! history BEV grids, and extrinsic noise injection.

use nalgebra::{Matrix3, Matrix3x4, Point3, Rotation3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::bilinear_sample;
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Points whose projected depth falls at or below this are misses, keeping
/// the perspective divide away from the camera plane.
pub const DEPTH_EPS: f64 = 1e-6;

/// Shape and scale of the BEV plane. Cell coordinates are (x, y) with x the
/// column and y the row; `origin_cell` holds the fractional cell coords of
/// the ego/world origin and defaults to the grid center.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGridSpec {
    pub h: usize,
    pub w: usize,
    /// meters per cell
    pub s: f64,
    pub origin_cell: (f64, f64),
}

impl BevGridSpec {
    pub fn new(h: usize, w: usize, s: f64) -> Result<Self> {
        Self::with_origin(h, w, s, (w as f64 / 2.0, h as f64 / 2.0))
    }

    pub fn with_origin(h: usize, w: usize, s: f64, origin_cell: (f64, f64)) -> Result<Self> {
        if h < 1 || w < 1 {
            return Err(Error::InvalidConfig(format!("grid {}x{} too small", h, w)));
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidConfig(format!("cell size {} not positive", s)));
        }
        if !origin_cell.0.is_finite() || !origin_cell.1.is_finite() {
            return Err(Error::InvalidConfig("non-finite origin cell".into()));
        }
        Ok(BevGridSpec { h, w, s, origin_cell })
    }
}

/// Cell coords to ego/world meters: x' = (x - x0)*s, y' = (y - y0)*s.
pub fn bev_cell_to_world(p: (f64, f64), grid: &BevGridSpec) -> (f64, f64) {
    (
        (p.0 - grid.origin_cell.0) * grid.s,
        (p.1 - grid.origin_cell.1) * grid.s,
    )
}

/// Inverse of [`bev_cell_to_world`]; returns fractional cell coords.
pub fn world_to_bev_cell(xy: (f64, f64), grid: &BevGridSpec) -> (f64, f64) {
    (
        xy.0 / grid.s + grid.origin_cell.0,
        xy.1 / grid.s + grid.origin_cell.1,
    )
}

/// Rotation + translation half of a camera: maps ego-frame meters into the
/// camera frame as x_cam = R x + t.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// One camera: 3x4 projection (homogeneous ego meters to homogeneous
/// pixels), image size, and a dense view id. Synthetic rigs also carry the
/// explicit extrinsic decomposition needed for noise injection.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub t: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
    pub id: usize,
    pub extrinsics: Option<Extrinsics>,
}

impl CameraView {
    pub fn new(t: Matrix3x4<f64>, width: usize, height: usize, id: usize) -> Result<Self> {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "projection matrix of view {} has non-finite entries",
                id
            )));
        }
        if width < 1 || height < 1 {
            return Err(Error::InvalidConfig(format!(
                "view {} image {}x{} too small",
                id, width, height
            )));
        }
        Ok(CameraView { t, width, height, id, extrinsics: None })
    }

    /// Build from intrinsics K and extrinsics (R, t): T = K [R | t]. Keeps
    /// the decomposition so extrinsic noise can be injected later.
    pub fn from_krt(
        k: &Matrix3<f64>,
        rotation: &Matrix3<f64>,
        translation: &Vector3<f64>,
        width: usize,
        height: usize,
        id: usize,
    ) -> Result<Self> {
        let mut v = CameraView::new(
            compose_projection(k, rotation, translation),
            width,
            height,
            id,
        )?;
        v.extrinsics = Some(Extrinsics {
            rotation: *rotation,
            translation: *translation,
        });
        Ok(v)
    }
}

/// T = K [R | t].
pub fn compose_projection(
    k: &Matrix3<f64>,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Matrix3x4<f64> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    k * rt
}

/// Ordered multi-camera rig with dense view ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub views: Vec<CameraView>,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidConfig("rig needs at least one view".into()));
        }
        for (i, v) in views.iter().enumerate() {
            if v.id != i {
                return Err(Error::InvalidConfig(format!(
                    "view ids must be dense 0..{}, found {} at slot {}",
                    views.len(),
                    v.id,
                    i
                )));
            }
        }
        Ok(CameraRig { views })
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }
}

/// Pillar anchor heights in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorHeights {
    pub z_levels: Vec<f64>,
}

impl AnchorHeights {
    pub fn new(z_levels: Vec<f64>) -> Result<Self> {
        if z_levels.is_empty() {
            return Err(Error::InvalidConfig("need at least one anchor height".into()));
        }
        Ok(AnchorHeights { z_levels })
    }

    /// `n` heights uniformly spaced over `[lo, hi]`, endpoints included.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("need at least one anchor height".into()));
        }
        if n == 1 {
            return Self::new(vec![(lo + hi) / 2.0]);
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new((0..n).map(|j| lo + step * j as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.z_levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_levels.is_empty()
    }
}

impl Default for AnchorHeights {
    /// Four heights uniform on [-5, 3] m.
    fn default() -> Self {
        Self::uniform(4, -5.0, 3.0).unwrap()
    }
}

/// Planar ego pose in a fixed world frame; yaw normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub tx: f64,
    pub ty: f64,
    pub yaw: f64,
}

impl EgoPose {
    pub fn new(tx: f64, ty: f64, yaw: f64) -> Self {
        EgoPose { tx, ty, yaw: normalize_yaw(yaw) }
    }

    /// Ego-frame point to world: w = R(yaw) e + t.
    pub fn ego_to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (c * p.0 - s * p.1 + self.tx, s * p.0 + c * p.1 + self.ty)
    }

    /// World point into this pose's ego frame: e = R(-yaw)(w - t).
    pub fn world_to_ego(&self, p: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (dx, dy) = (p.0 - self.tx, p.1 - self.ty);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wrap into (-pi, pi], leaving already-normalized values untouched.
pub fn normalize_yaw(yaw: f64) -> f64 {
    use std::f64::consts::PI;
    if yaw > -PI && yaw <= PI {
        return yaw;
    }
    let y = (yaw + PI).rem_euclid(2.0 * PI);
    if y == 0.0 {
        PI
    } else {
        y - PI
    }
}

/// One successful projection of a pillar point into a camera.
#[derive(Debug, Clone, PartialEq)]
pub struct HitRecord {
    pub view_id: usize,
    pub ref_index: usize,
    pub pixel: (f64, f64),
    pub depth: f64,
}

/// A projected point that landed inside the image with positive depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// The N_ref 3D pillar points above cell `p`: shared (x', y') from
/// [`bev_cell_to_world`], z from the anchor heights in order.
pub fn make_pillar(
    p: (f64, f64),
    grid: &BevGridSpec,
    anchors: &AnchorHeights,
) -> Vec<Point3<f64>> {
    let (x, y) = bev_cell_to_world(p, grid);
    anchors.z_levels.iter().map(|&z| Point3::new(x, y, z)).collect()
}

/// Pinhole projection: (a, b, c) = T (x, y, z, 1); a hit needs depth
/// c > DEPTH_EPS and pixel inside the closed box [0, width] x [0, height].
pub fn project_point(q: &Point3<f64>, view: &CameraView) -> Option<PixelHit> {
    let hom = view.t * Vector4::new(q.x, q.y, q.z, 1.0);
    let depth = hom.z;
    if !(depth > DEPTH_EPS) {
        return None;
    }
    let u = hom.x / depth;
    let v = hom.y / depth;
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    if u < 0.0 || u > view.width as f64 || v < 0.0 || v > view.height as f64 {
        return None;
    }
    Some(PixelHit { u, v, depth })
}

/// All (view, anchor) projections of the pillar above `p` that hit, ordered
/// by view id then anchor index. The hit views V_hit are the distinct
/// view_ids of the result.
pub fn hit_views(
    p: (f64, f64),
    grid: &BevGridSpec,
    rig: &CameraRig,
    anchors: &AnchorHeights,
) -> Vec<HitRecord> {
    let pillar = make_pillar(p, grid, anchors);
    let mut records = Vec::new();
    for view in &rig.views {
        for (j, q) in pillar.iter().enumerate() {
            if let Some(hit) = project_point(q, view) {
                records.push(HitRecord {
                    view_id: view.id,
                    ref_index: j,
                    pixel: (hit.u, hit.v),
                    depth: hit.depth,
                });
            }
        }
    }
    records
}

/// Resample a previous BEV grid so each output cell refers to the same
/// world location it has under `pose_cur`. Implemented as one SE(2)
/// transform composed in cell units, so coincident poses reproduce the
/// input exactly and lattice-aligned motions stay on the lattice:
///
///   cell_prev = R(yaw_cur - yaw_prev) (p - origin) + R(-yaw_prev)(t_cur - t_prev)/s + origin
///
/// Samples outside the previous grid read as zero.
pub fn align_history_bev(
    prev: &FeatureMap,
    pose_prev: &EgoPose,
    pose_cur: &EgoPose,
    grid: &BevGridSpec,
) -> Result<FeatureMap> {
    if prev.h != grid.h || prev.w != grid.w {
        return Err(Error::ShapeMismatch(format!(
            "history grid {}x{} vs spec {}x{}",
            prev.h, prev.w, grid.h, grid.w
        )));
    }
    let dyaw = pose_cur.yaw - pose_prev.yaw;
    let (cd, sd) = (dyaw.cos(), dyaw.sin());
    let (cp, sp) = (pose_prev.yaw.cos(), pose_prev.yaw.sin());
    let (dtx, dty) = (pose_cur.tx - pose_prev.tx, pose_cur.ty - pose_prev.ty);
    let shift_x = (cp * dtx + sp * dty) / grid.s;
    let shift_y = (-sp * dtx + cp * dty) / grid.s;
    let (x0, y0) = grid.origin_cell;

    let mut out = FeatureMap::zeros(prev.h, prev.w, prev.c);
    let mut sample = vec![0.0; prev.c];
    for y in 0..grid.h {
        let dy = y as f64 - y0;
        for x in 0..grid.w {
            let dx = x as f64 - x0;
            let sx = cd * dx - sd * dy + shift_x + x0;
            let sy = sd * dx + cd * dy + shift_y + y0;
            bilinear_sample(prev, sx, sy, &mut sample);
            out.at_mut(y, x).copy_from_slice(&sample);
        }
    }
    Ok(out)
}

/// Per-axis extrinsic noise at a given level: rotation angles in degrees
/// drawn from Normal(0, variance = level) and translation in centimeters
/// from Normal(0, variance = 5 * level). Level 0 draws nothing.
pub fn extrinsic_noise_sample<R: Rng>(level: i32, rng: &mut R) -> ([f64; 3], [f64; 3]) {
    if level == 0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let rot = Normal::new(0.0, (level as f64).sqrt()).expect("finite sd");
    let tr = Normal::new(0.0, (5.0 * level as f64).sqrt()).expect("finite sd");
    (
        [rot.sample(rng), rot.sample(rng), rot.sample(rng)],
        [tr.sample(rng), tr.sample(rng), tr.sample(rng)],
    )
}

/// Apply level-`level` extrinsic noise to every view and recompose the
/// projection matrices. Level 0 returns the rig unchanged. Each view draws
/// from its own seeded stream, so results are deterministic per (seed,
/// view) regardless of evaluation order.
pub fn perturb_extrinsics(rig: &CameraRig, level: i32, seed: u64) -> Result<CameraRig> {
    if level < 0 {
        return Err(Error::InvalidInput(format!("negative noise level {}", level)));
    }
    if level == 0 {
        return Ok(rig.clone());
    }
    let mut views = Vec::with_capacity(rig.views.len());
    for view in &rig.views {
        let ext = view.extrinsics.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "view {} lacks an extrinsic decomposition; cannot inject noise",
                view.id
            ))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(view.id as u64);
        let (rot_deg, tr_cm) = extrinsic_noise_sample(level, &mut rng);
        let to_rad = std::f64::consts::PI / 180.0;
        let noise = Rotation3::from_euler_angles(
            rot_deg[0] * to_rad,
            rot_deg[1] * to_rad,
            rot_deg[2] * to_rad,
        );
        let rotation = noise.matrix() * ext.rotation;
        let translation = ext.translation
            + Vector3::new(tr_cm[0], tr_cm[1], tr_cm[2]) / 100.0;
        let k = view.t.fixed_view::<3, 3>(0, 0) * ext.rotation.transpose();
        let mut new_view = CameraView::new(
            compose_projection(&k.into(), &rotation, &translation),
            view.width,
            view.height,
            view.id,
        )?;
        new_view.extrinsics = Some(Extrinsics { rotation, translation });
        views.push(new_view);
    }
    CameraRig::new(views)
}
