//! Fixtures shared across the integration suites.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use bevgrid::attention::DeformAttnParams;
use bevgrid::geometry::{CameraRig, CameraView};
use bevgrid::FeatureMap;

pub fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let mut map = FeatureMap::zeros(h, w, c);
    for v in map.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    map
}

/// Deformable-attention parameters with every tensor randomized, so the
/// predictors are active rather than at their zero initialization.
pub fn random_params(
    nh: usize,
    nk: usize,
    c: usize,
    qd: usize,
    rng: &mut ChaCha8Rng,
) -> DeformAttnParams {
    let mut p = DeformAttnParams::zeros(nh, nk, c, qd).unwrap();
    for t in [&mut p.w_value, &mut p.w_out, &mut p.offset_w, &mut p.weight_w, &mut p.weight_b] {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    for v in p.offset_b.data_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    p
}

/// Two 64x48 cameras just inside the grid looking at each other along
/// the x axis: center cells are seen by both views, cells beyond either
/// camera by one, and laterally distant cells by none.
pub fn facing_rig() -> CameraRig {
    let k = Matrix3::new(20.0, 0.0, 32.0, 0.0, 20.0, 24.0, 0.0, 0.0, 1.0);
    let mut views = Vec::new();
    for (id, phi, cx) in [(0usize, 0.0f64, -1.0f64), (1, std::f64::consts::PI, 1.0)] {
        let (s, c) = phi.sin_cos();
        let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let center = Vector3::new(cx, 0.0, 1.5);
        let translation = -rot * center;
        views.push(CameraView::from_krt(&k, &rot, &translation, 64, 48, id).unwrap());
    }
    CameraRig::new(views).unwrap()
}
