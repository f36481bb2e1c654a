//! Task heads on top of the encoded BEV features: per-cell semantic
//! segmentation logits and a center head (objectness heatmap, sub-cell
//! offset, velocity), plus the peak decoder that turns heatmaps into
//! detections.

use crate::geometry::{bev_cell_to_world, BevGridSpec};
use crate::tensor::{affine_apply, affine_backward, FeatureMap};
use crate::{Error, Result};

use super::params::HeadParams;

/// Per-cell class logits, shape H x W x n_classes.
pub fn head_segmentation(bev: &FeatureMap, heads: &HeadParams) -> FeatureMap {
    let n_classes = heads.seg.n_out();
    let mut out = FeatureMap::zeros(bev.h, bev.w, n_classes);
    for (src, dst) in bev
        .data()
        .chunks(bev.c)
        .zip(out.data_mut().chunks_mut(n_classes))
    {
        affine_apply(&heads.seg.w, &heads.seg.b, src, dst);
    }
    out
}

/// Output of the center head. `heat` holds two logits per cell
/// (background, object); `offset` is the sub-cell center correction in
/// cell units; `velocity` is in meters per second, world frame.
#[derive(Debug, Clone)]
pub struct CenterHeadOut {
    pub heat: FeatureMap,
    pub offset: FeatureMap,
    pub velocity: FeatureMap,
}

pub fn head_centers(bev: &FeatureMap, heads: &HeadParams) -> CenterHeadOut {
    let mut heat = FeatureMap::zeros(bev.h, bev.w, 2);
    let mut offset = FeatureMap::zeros(bev.h, bev.w, 2);
    let mut velocity = FeatureMap::zeros(bev.h, bev.w, 2);
    let c = bev.c;
    for (((src, h), o), v) in bev
        .data()
        .chunks(c)
        .zip(heat.data_mut().chunks_mut(2))
        .zip(offset.data_mut().chunks_mut(2))
        .zip(velocity.data_mut().chunks_mut(2))
    {
        affine_apply(&heads.heatmap.w, &heads.heatmap.b, src, h);
        affine_apply(&heads.offset.w, &heads.offset.b, src, o);
        affine_apply(&heads.velocity.w, &heads.velocity.b, src, v);
    }
    CenterHeadOut {
        heat,
        offset,
        velocity,
    }
}

/// Backward through both heads. Upstream gradients may be zero maps for
/// heads the loss does not touch.
pub fn heads_backward(
    bev: &FeatureMap,
    heads: &HeadParams,
    d_seg: &FeatureMap,
    d_centers: &CenterHeadOut,
    d_heads: &mut HeadParams,
    d_bev: &mut FeatureMap,
) -> Result<()> {
    if d_seg.h != bev.h || d_seg.w != bev.w || d_seg.c != heads.seg.n_out() {
        return Err(Error::ShapeMismatch("segmentation gradient shape".into()));
    }
    if !d_centers.heat.same_shape(&FeatureMap::zeros(bev.h, bev.w, 2)) {
        return Err(Error::ShapeMismatch("center-head gradient shape".into()));
    }
    let c = bev.c;
    let nc = heads.seg.n_out();
    for i in 0..bev.h * bev.w {
        let src = &bev.data()[i * c..(i + 1) * c];
        let dst = &mut d_bev.data_mut()[i * c..(i + 1) * c];
        let up_seg = &d_seg.data()[i * nc..(i + 1) * nc];
        affine_backward(&heads.seg.w, src, up_seg, &mut d_heads.seg.w, &mut d_heads.seg.b, dst);
        let up_h = &d_centers.heat.data()[i * 2..(i + 1) * 2];
        affine_backward(
            &heads.heatmap.w,
            src,
            up_h,
            &mut d_heads.heatmap.w,
            &mut d_heads.heatmap.b,
            dst,
        );
        let up_o = &d_centers.offset.data()[i * 2..(i + 1) * 2];
        affine_backward(
            &heads.offset.w,
            src,
            up_o,
            &mut d_heads.offset.w,
            &mut d_heads.offset.b,
            dst,
        );
        let up_v = &d_centers.velocity.data()[i * 2..(i + 1) * 2];
        affine_backward(
            &heads.velocity.w,
            src,
            up_v,
            &mut d_heads.velocity.w,
            &mut d_heads.velocity.b,
            dst,
        );
    }
    Ok(())
}

/// Object probability at one cell from the two heat logits.
pub fn object_prob(heat: &FeatureMap, y: usize, x: usize) -> f64 {
    let l = heat.at(y, x);
    let m = l[0].max(l[1]);
    let e0 = (l[0] - m).exp();
    let e1 = (l[1] - m).exp();
    e1 / (e0 + e1)
}

/// One decoded object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Ego-frame (x, y) center in meters.
    pub center: (f64, f64),
    /// Ego-frame (vx, vy) in meters per second.
    pub velocity: (f64, f64),
    pub score: f64,
}

/// Decode detections from the center head: strict local maxima of the
/// object probability over the 3x3 neighborhood, above `threshold`,
/// strongest first, at most `max_boxes`. Each peak's world center is the
/// cell plus its predicted sub-cell offset, mapped through the grid.
pub fn decode_centers(
    out: &CenterHeadOut,
    grid: &BevGridSpec,
    threshold: f64,
    max_boxes: usize,
) -> Vec<Detection> {
    let h = out.heat.h;
    let w = out.heat.w;
    let mut prob = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            prob[y * w + x] = object_prob(&out.heat, y, x);
        }
    }
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = prob[y * w + x];
            if p < threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if prob[ny as usize * w + nx as usize] >= p {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((p, y, x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    peaks.truncate(max_boxes);
    peaks
        .into_iter()
        .map(|(score, y, x)| {
            let off = out.offset.at(y, x);
            let cell = (x as f64 + off[0], y as f64 + off[1]);
            let vel = out.velocity.at(y, x);
            Detection {
                center: bev_cell_to_world(cell, grid),
                velocity: (vel[0], vel[1]),
                score,
            }
        })
        .collect()
}
