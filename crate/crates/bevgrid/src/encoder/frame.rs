//! Whole-frame encoding: featurize camera images, align the previous BEV
//! state into the current ego frame, and run the encoder layer stack.

use crate::geometry::{align_history_bev, hit_views, AnchorHeights, BevGridSpec, CameraRig};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

use super::featurizer::{featurize, featurize_backward, featurize_cached, FeaturizerCache};
use super::layer::{encoder_layer, encoder_layer_backward, LayerCache};
use super::params::ModelParams;
use super::{BevState, EncoderConfig};

/// One pillar hit for a BEV cell, with the projected pixel already
/// rescaled into feature-map units (pixels divided by the featurizer
/// stride).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellHit {
    pub view_id: usize,
    pub ref_index: usize,
    pub pixel: (f64, f64),
}

/// Precomputed pillar-projection table for a (grid, rig, anchors) triple.
/// Projection depends only on geometry, so one table serves every frame
/// and layer.
#[derive(Debug, Clone)]
pub struct FrameHits {
    pub h: usize,
    pub w: usize,
    pub n_views: usize,
    cells: Vec<Vec<CellHit>>,
    n_hit_views: Vec<usize>,
}

impl FrameHits {
    pub fn compute(
        grid: &BevGridSpec,
        rig: &CameraRig,
        anchors: &AnchorHeights,
        stride: usize,
    ) -> Self {
        let inv = 1.0 / stride as f64;
        let mut cells = Vec::with_capacity(grid.h * grid.w);
        let mut n_hit_views = Vec::with_capacity(grid.h * grid.w);
        for y in 0..grid.h {
            for x in 0..grid.w {
                let recs = hit_views((x as f64, y as f64), grid, rig, anchors);
                let mut distinct = 0;
                let mut last = usize::MAX;
                let mut hits = Vec::with_capacity(recs.len());
                for r in recs {
                    if r.view_id != last {
                        distinct += 1;
                        last = r.view_id;
                    }
                    hits.push(CellHit {
                        view_id: r.view_id,
                        ref_index: r.ref_index,
                        pixel: (r.pixel.0 * inv, r.pixel.1 * inv),
                    });
                }
                cells.push(hits);
                n_hit_views.push(distinct);
            }
        }
        FrameHits {
            h: grid.h,
            w: grid.w,
            n_views: rig.n_views(),
            cells,
            n_hit_views,
        }
    }

    /// Hit records for one cell plus the count of distinct views hit.
    pub fn at(&self, y: usize, x: usize) -> (&[CellHit], usize) {
        let i = y * self.w + x;
        (&self.cells[i], self.n_hit_views[i])
    }

    /// Total number of (cell, pillar point, view) hits in the table.
    pub fn total_hits(&self) -> usize {
        self.cells.iter().map(|c| c.len()).sum()
    }

    /// Number of cells with at least one hit.
    pub fn covered_cells(&self) -> usize {
        self.n_hit_views.iter().filter(|&&n| n > 0).count()
    }
}

/// Everything the backward pass needs from one encoded frame.
#[derive(Debug, Clone)]
pub struct FrameCache {
    pub feats: Vec<FeatureMap>,
    pub feat_caches: Vec<FeaturizerCache>,
    pub hist: FeatureMap,
    pub layers: Vec<LayerCache>,
}

fn initial_queries(params: &ModelParams) -> Result<FeatureMap> {
    let mut q0 = FeatureMap::from_tensor(&params.bev_query_init)?;
    let pos = FeatureMap::from_tensor(&params.pos_embed)?;
    if !q0.same_shape(&pos) {
        return Err(Error::ShapeMismatch(
            "positional embedding shape differs from query init".into(),
        ));
    }
    q0.add_assign(&pos);
    Ok(q0)
}

fn history_map(
    prev: Option<&BevState>,
    pose: &crate::geometry::EgoPose,
    q0: &FeatureMap,
    cfg: &EncoderConfig,
) -> Result<FeatureMap> {
    match prev {
        Some(state) if cfg.align_history => {
            align_history_bev(&state.features, &state.pose, pose, &cfg.grid)
        }
        Some(state) => {
            if state.features.h != cfg.grid.h || state.features.w != cfg.grid.w {
                return Err(Error::ShapeMismatch(
                    "history BEV grid differs from encoder config".into(),
                ));
            }
            Ok(state.features.clone())
        }
        None => Ok(q0.clone()),
    }
}

fn check_frame_inputs(
    images: &[FeatureMap],
    hits: &FrameHits,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    if images.len() != hits.n_views {
        return Err(Error::ShapeMismatch(format!(
            "{} images but the hit table was built for {} views",
            images.len(),
            hits.n_views
        )));
    }
    if hits.h != cfg.grid.h || hits.w != cfg.grid.w {
        return Err(Error::ShapeMismatch(
            "hit table grid differs from encoder config".into(),
        ));
    }
    Ok(())
}

/// Encode one frame without keeping intermediate activations. Used for
/// history frames and inference, where no gradient is needed.
pub fn encode_frame(
    images: &[FeatureMap],
    prev: Option<&BevState>,
    pose: crate::geometry::EgoPose,
    timestamp: f64,
    hits: &FrameHits,
    params: &ModelParams,
    cfg: &EncoderConfig,
    threads: usize,
) -> Result<BevState> {
    check_frame_inputs(images, hits, cfg)?;
    let mut feats = Vec::with_capacity(images.len());
    for img in images {
        feats.push(featurize(img, &params.featurizer)?);
    }
    let q0 = initial_queries(params)?;
    let hist = history_map(prev, &pose, &q0, cfg)?;
    let mut x = q0;
    for lp in &params.layers {
        let cache = encoder_layer(&x, &hist, &feats, hits, lp, cfg, threads)?;
        x = cache.x3;
    }
    Ok(BevState::new(x, timestamp, pose))
}

/// Encode one frame keeping every activation needed for
/// [`frame_backward`].
pub fn encode_frame_cached(
    images: &[FeatureMap],
    prev: Option<&BevState>,
    pose: crate::geometry::EgoPose,
    timestamp: f64,
    hits: &FrameHits,
    params: &ModelParams,
    cfg: &EncoderConfig,
    threads: usize,
) -> Result<(BevState, FrameCache)> {
    check_frame_inputs(images, hits, cfg)?;
    let mut feats = Vec::with_capacity(images.len());
    let mut feat_caches = Vec::with_capacity(images.len());
    for img in images {
        let (f, c) = featurize_cached(img, &params.featurizer)?;
        feats.push(f);
        feat_caches.push(c);
    }
    let q0 = initial_queries(params)?;
    let hist = history_map(prev, &pose, &q0, cfg)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut x = q0;
    for lp in &params.layers {
        let cache = encoder_layer(&x, &hist, &feats, hits, lp, cfg, threads)?;
        x = cache.x3.clone();
        layers.push(cache);
    }
    Ok((
        BevState::new(x, timestamp, pose),
        FrameCache {
            feats,
            feat_caches,
            hist,
            layers,
        },
    ))
}

/// Backward through one encoded frame. `d_bev` is the loss gradient with
/// respect to the frame's output BEV features; parameter gradients
/// accumulate into `d_params`. History is treated as a constant, so
/// nothing flows into the previous frame, and image gradients are
/// discarded (images are inputs, not parameters).
pub fn frame_backward(
    cache: &FrameCache,
    hits: &FrameHits,
    params: &ModelParams,
    cfg: &EncoderConfig,
    d_bev: &FeatureMap,
    d_params: &mut ModelParams,
) -> Result<()> {
    let mut d_feats: Vec<FeatureMap> = cache.feats.iter().map(|f| f.zeros_like()).collect();
    let mut d_x = d_bev.clone();
    for (lc, (lp, d_lp)) in cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(d_params.layers.iter_mut()))
        .rev()
    {
        d_x = encoder_layer_backward(
            lc, &cache.hist, &cache.feats, hits, lp, cfg, &d_x, d_lp, &mut d_feats,
        )?;
    }
    // d_x is now the gradient at q0 = bev_query_init + pos_embed
    for (dst, src) in d_params
        .bev_query_init
        .data_mut()
        .iter_mut()
        .zip(d_x.data().iter())
    {
        *dst += *src;
    }
    for (dst, src) in d_params.pos_embed.data_mut().iter_mut().zip(d_x.data().iter()) {
        *dst += *src;
    }
    for (d_f, fc) in d_feats.iter().zip(cache.feat_caches.iter()) {
        let _ = featurize_backward(d_f, fc, &params.featurizer, &mut d_params.featurizer);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::tests::tiny_config;
    use crate::encoder::ScaMode;
    use crate::geometry::{CameraView, EgoPose};
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_rig() -> CameraRig {
        let k = Matrix3::new(20.0, 0.0, 32.0, 0.0, 20.0, 24.0, 0.0, 0.0, 1.0);
        let fwd = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let back = Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0);
        let views = vec![
            CameraView::from_krt(&k, &fwd, &Vector3::new(0.0, 0.0, 1.5), 64, 48, 0).unwrap(),
            CameraView::from_krt(&k, &back, &Vector3::new(0.0, 0.0, 1.5), 64, 48, 1).unwrap(),
        ];
        CameraRig::new(views).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut m = FeatureMap::zeros(48, 64, 3);
        for v in m.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        m
    }

    #[test]
    fn hit_table_matches_direct_projection() {
        let cfg = tiny_config(ScaMode::Local);
        let rig = toy_rig();
        let hits = FrameHits::compute(&cfg.grid, &rig, &cfg.anchors, cfg.feat_stride);
        assert_eq!(hits.n_views, 2);
        for y in 0..cfg.grid.h {
            for x in 0..cfg.grid.w {
                let recs = hit_views((x as f64, y as f64), &cfg.grid, &rig, &cfg.anchors);
                let (cell, nv) = hits.at(y, x);
                assert_eq!(cell.len(), recs.len());
                let mut views: Vec<usize> = recs.iter().map(|r| r.view_id).collect();
                views.dedup();
                assert_eq!(nv, views.len());
                for (c, r) in cell.iter().zip(recs.iter()) {
                    assert_eq!(c.view_id, r.view_id);
                    assert_eq!(c.ref_index, r.ref_index);
                    assert!((c.pixel.0 - r.pixel.0 / 8.0).abs() < 1e-15);
                    assert!((c.pixel.1 - r.pixel.1 / 8.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let cfg = tiny_config(ScaMode::Local);
        let rig = toy_rig();
        let hits = FrameHits::compute(&cfg.grid, &rig, &cfg.anchors, cfg.feat_stride);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let images = vec![rand_image(&mut rng), rand_image(&mut rng)];
        let pose = EgoPose::new(0.0, 0.0, 0.0);
        let a = encode_frame(&images, None, pose, 0.0, &hits, &params, &cfg, 1).unwrap();
        let (b, _) =
            encode_frame_cached(&images, None, pose, 0.0, &hits, &params, &cfg, 1).unwrap();
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn history_reuse_is_deterministic() {
        let cfg = tiny_config(ScaMode::Local);
        let rig = toy_rig();
        let hits = FrameHits::compute(&cfg.grid, &rig, &cfg.anchors, cfg.feat_stride);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let images = vec![rand_image(&mut rng), rand_image(&mut rng)];
        let p0 = EgoPose::new(0.0, 0.0, 0.0);
        let p1 = EgoPose::new(1.0, 0.5, 0.1);
        let s0 = encode_frame(&images, None, p0, 0.0, &hits, &params, &cfg, 1).unwrap();
        let s1a = encode_frame(&images, Some(&s0), p1, 0.5, &hits, &params, &cfg, 1).unwrap();
        let s1b = encode_frame(&images, Some(&s0), p1, 0.5, &hits, &params, &cfg, 1).unwrap();
        assert_eq!(s1a.features.data(), s1b.features.data());
        assert!((s1a.timestamp - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_image_count_rejected() {
        let cfg = tiny_config(ScaMode::Local);
        let rig = toy_rig();
        let hits = FrameHits::compute(&cfg.grid, &rig, &cfg.anchors, cfg.feat_stride);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let images = vec![rand_image(&mut rng)];
        let pose = EgoPose::new(0.0, 0.0, 0.0);
        assert!(encode_frame(&images, None, pose, 0.0, &hits, &params, &cfg, 1).is_err());
    }
}
