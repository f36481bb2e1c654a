//! Central finite differences against every hand-written backward pass:
//! the deformable kernel, both attention wrappers, the featurizer, the
//! task heads, the loss, and the assembled model. Also proves the
//! harness catches a deliberately corrupted gradient.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevgrid::attention::{
    deform_attn, deform_attn_grad, AttnScratch, DeformAttnGradSinks, DeformAttnParams,
};
use bevgrid::encoder::featurizer::{featurize, featurize_backward, featurize_cached};
use bevgrid::encoder::layer::{
    spatial_cross_attention, spatial_cross_attention_backward, temporal_self_attention,
    temporal_self_attention_backward,
};
use bevgrid::encoder::params::{FeaturizerParams, GlobalAttnParams, HeadParams, ScaParams};
use bevgrid::encoder::{
    encode_frame, encode_frame_cached, frame_backward, head_centers, head_segmentation,
    heads_backward, CenterHeadOut, EncoderConfig, FrameHits, ModelParams, ScaMode, TsaCombine,
};
use bevgrid::geometry::{AnchorHeights, BevGridSpec};
use bevgrid::learner::{
    clip_backward, finite_diff_check, forward_clip, loss_and_grads, LossWeights,
};
use bevgrid::scene::{build_sequence, make_ring_rig, GroundTruthBev, GtObject, SceneSpec};
use bevgrid::FeatureMap;
use common::{facing_rig, random_map, random_params};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Worst relative disagreement between central differences and the
/// analytic gradient over every coordinate of one slot.
fn fd_max_rel<T>(
    subject: &mut T,
    analytic: &[f64],
    loss: &mut dyn FnMut(&T) -> f64,
    slot: &dyn Fn(&mut T) -> &mut [f64],
) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..analytic.len() {
        let orig = slot(subject)[j];
        slot(subject)[j] = orig + EPS;
        let lp = loss(subject);
        slot(subject)[j] = orig - EPS;
        let lm = loss(subject);
        slot(subject)[j] = orig;
        let fd = (lp - lm) / (2.0 * EPS);
        let an = analytic[j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn dot_map(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct KernelSubject {
    qi: Vec<f64>,
    map: FeatureMap,
    p: DeformAttnParams,
}

#[test]
fn deformable_kernel_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    for qd_mult in [1usize, 2] {
        let (nh, nk, c) = (2, 2, 4);
        let qd = qd_mult * c;
        let p = random_params(nh, nk, c, qd, &mut rng);
        let map = random_map(4, 5, c, &mut rng);
        let qi: Vec<f64> = (0..qd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ref_u, ref_v) = (1.7, 2.3);

        let mut d_params = p.zeros_like();
        let mut d_map = map.zeros_like();
        let mut d_qi = vec![0.0; qd];
        {
            let mut scratch = AttnScratch::default();
            let mut sinks = DeformAttnGradSinks {
                params: &mut d_params,
                map: Some(&mut d_map),
                query_input: &mut d_qi,
            };
            deform_attn_grad(&qi, ref_u, ref_v, &map, &p, &upstream, &mut scratch, &mut sinks)
                .unwrap();
        }

        let mut subject = KernelSubject { qi, map, p };
        let mut loss = |s: &KernelSubject| -> f64 {
            let mut scratch = AttnScratch::default();
            let mut out = vec![0.0; c];
            deform_attn(&s.qi, ref_u, ref_v, &s.map, &s.p, &mut scratch, &mut out).unwrap();
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };
        type Slot = Box<dyn Fn(&mut KernelSubject) -> &mut [f64]>;
        let slots: Vec<(&str, Slot, Vec<f64>)> = vec![
            ("w_value", Box::new(|s| s.p.w_value.data_mut()), d_params.w_value.data().to_vec()),
            ("w_out", Box::new(|s| s.p.w_out.data_mut()), d_params.w_out.data().to_vec()),
            ("offset_w", Box::new(|s| s.p.offset_w.data_mut()), d_params.offset_w.data().to_vec()),
            ("offset_b", Box::new(|s| s.p.offset_b.data_mut()), d_params.offset_b.data().to_vec()),
            ("weight_w", Box::new(|s| s.p.weight_w.data_mut()), d_params.weight_w.data().to_vec()),
            ("weight_b", Box::new(|s| s.p.weight_b.data_mut()), d_params.weight_b.data().to_vec()),
            ("map", Box::new(|s| s.map.data_mut()), d_map.data().to_vec()),
            ("query_input", Box::new(|s| s.qi.as_mut_slice()), d_qi.clone()),
        ];
        for (name, slot, analytic) in &slots {
            let worst = fd_max_rel(&mut subject, analytic, &mut loss, slot.as_ref());
            assert!(worst <= TOL, "qd x{}: {} worst rel err {}", qd_mult, name, worst);
        }

        let mut corrupted = d_params.w_value.data().to_vec();
        corrupted[0] += 0.5;
        let worst = fd_max_rel(&mut subject, &corrupted, &mut loss, &|s| s.p.w_value.data_mut());
        assert!(worst > 1e-3, "corrupted w_value gradient went undetected ({})", worst);
    }
}

struct TsaSubject {
    q: FeatureMap,
    p: DeformAttnParams,
}

#[test]
fn temporal_attention_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(211);
    for (concat, combine) in [
        (false, TsaCombine::Mean),
        (true, TsaCombine::Mean),
        (true, TsaCombine::Sum),
    ] {
        let (h, w, c) = (3, 3, 4);
        let q = random_map(h, w, c, &mut rng);
        let hist = random_map(h, w, c, &mut rng);
        let qd = if concat { 2 * c } else { c };
        let p = random_params(2, 2, c, qd, &mut rng);
        let upstream = random_map(h, w, c, &mut rng);

        let mut d_params = p.zeros_like();
        let mut d_q = q.zeros_like();
        temporal_self_attention_backward(
            &q, &hist, &p, concat, combine, &upstream, &mut d_params, &mut d_q,
        )
        .unwrap();

        let mut subject = TsaSubject { q, p };
        let mut loss = |s: &TsaSubject| -> f64 {
            let out = temporal_self_attention(&s.q, &hist, &s.p, concat, combine, 1).unwrap();
            dot_map(&out, &upstream)
        };
        type Slot = Box<dyn Fn(&mut TsaSubject) -> &mut [f64]>;
        let slots: Vec<(&str, Slot, Vec<f64>)> = vec![
            ("w_value", Box::new(|s| s.p.w_value.data_mut()), d_params.w_value.data().to_vec()),
            ("w_out", Box::new(|s| s.p.w_out.data_mut()), d_params.w_out.data().to_vec()),
            ("offset_w", Box::new(|s| s.p.offset_w.data_mut()), d_params.offset_w.data().to_vec()),
            ("offset_b", Box::new(|s| s.p.offset_b.data_mut()), d_params.offset_b.data().to_vec()),
            ("weight_w", Box::new(|s| s.p.weight_w.data_mut()), d_params.weight_w.data().to_vec()),
            ("weight_b", Box::new(|s| s.p.weight_b.data_mut()), d_params.weight_b.data().to_vec()),
            ("queries", Box::new(|s| s.q.data_mut()), d_q.data().to_vec()),
        ];
        for (name, slot, analytic) in &slots {
            let worst = fd_max_rel(&mut subject, analytic, &mut loss, slot.as_ref());
            assert!(
                worst <= TOL,
                "concat {} combine {:?}: {} worst rel err {}",
                concat,
                combine,
                name,
                worst
            );
        }
    }
}

struct ScaSubject {
    q: FeatureMap,
    feats: Vec<FeatureMap>,
    params: ScaParams,
}

fn deform_slice(p: &ScaParams, pick: fn(&DeformAttnParams) -> &[f64]) -> Vec<f64> {
    match p {
        ScaParams::Deform(d) => pick(d).to_vec(),
        ScaParams::Global(_) => unreachable!(),
    }
}

fn global_slice(p: &ScaParams, pick: fn(&GlobalAttnParams) -> &[f64]) -> Vec<f64> {
    match p {
        ScaParams::Global(g) => pick(g).to_vec(),
        ScaParams::Deform(_) => unreachable!(),
    }
}

#[test]
fn spatial_attention_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(223);
    let c = 4;
    let grid = BevGridSpec::new(6, 6, 1.0).unwrap();
    let rig = facing_rig();
    let anchors = AnchorHeights::new(vec![-1.0, 0.5, 2.0]).unwrap();
    let hits = FrameHits::compute(&grid, &rig, &anchors, 8);
    assert!(hits.total_hits() > 0);

    for mode in [ScaMode::Local, ScaMode::Points, ScaMode::Global] {
        let q = random_map(6, 6, c, &mut rng);
        let feats = vec![random_map(6, 8, c, &mut rng), random_map(6, 8, c, &mut rng)];
        let params = match mode {
            ScaMode::Global => {
                let mut gp = GlobalAttnParams::init(2, c, &mut rng);
                for t in [&mut gp.w_q.b, &mut gp.w_k.b, &mut gp.w_v.b, &mut gp.w_o.b] {
                    for v in t.data_mut() {
                        *v = rng.gen_range(-0.3..0.3);
                    }
                }
                ScaParams::Global(gp)
            }
            _ => ScaParams::Deform(random_params(2, 2, c, c, &mut rng)),
        };
        let upstream = random_map(6, 6, c, &mut rng);

        let mut d_params = match &params {
            ScaParams::Deform(d) => {
                ScaParams::Deform(DeformAttnParams::zeros(d.n_heads, d.n_keys, c, d.query_dim).unwrap())
            }
            ScaParams::Global(g) => ScaParams::Global(GlobalAttnParams::zeros(g.n_heads, c)),
        };
        let mut d_q = q.zeros_like();
        let mut d_feats: Vec<FeatureMap> = feats.iter().map(|f| f.zeros_like()).collect();
        spatial_cross_attention_backward(
            &q, &feats, &hits, &params, mode, &upstream, &mut d_params, &mut d_q, &mut d_feats,
        )
        .unwrap();

        if mode == ScaMode::Points {
            let offset_grads = deform_slice(&d_params, |d| d.offset_w.data());
            let weight_grads = deform_slice(&d_params, |d| d.weight_w.data());
            assert!(offset_grads.iter().chain(&weight_grads).all(|&g| g == 0.0));
            assert!(d_q.data().iter().all(|&g| g == 0.0));
        }

        let mut subject = ScaSubject { q, feats, params };
        let mut loss = |s: &ScaSubject| -> f64 {
            let out = spatial_cross_attention(&s.q, &s.feats, &hits, &s.params, mode, 1).unwrap();
            dot_map(&out, &upstream)
        };
        type Slot = Box<dyn Fn(&mut ScaSubject) -> &mut [f64]>;
        let mut slots: Vec<(String, Slot, Vec<f64>)> = vec![
            ("queries".into(), Box::new(|s| s.q.data_mut()), d_q.data().to_vec()),
            ("view0".into(), Box::new(|s| s.feats[0].data_mut()), d_feats[0].data().to_vec()),
            ("view1".into(), Box::new(|s| s.feats[1].data_mut()), d_feats[1].data().to_vec()),
        ];
        match mode {
            ScaMode::Global => {
                let picks: [(&str, fn(&mut ScaParams) -> &mut [f64], fn(&GlobalAttnParams) -> &[f64]); 8] = [
                    ("w_q.w", |p| match p { ScaParams::Global(g) => g.w_q.w.data_mut(), _ => unreachable!() }, |g| g.w_q.w.data()),
                    ("w_q.b", |p| match p { ScaParams::Global(g) => g.w_q.b.data_mut(), _ => unreachable!() }, |g| g.w_q.b.data()),
                    ("w_k.w", |p| match p { ScaParams::Global(g) => g.w_k.w.data_mut(), _ => unreachable!() }, |g| g.w_k.w.data()),
                    ("w_k.b", |p| match p { ScaParams::Global(g) => g.w_k.b.data_mut(), _ => unreachable!() }, |g| g.w_k.b.data()),
                    ("w_v.w", |p| match p { ScaParams::Global(g) => g.w_v.w.data_mut(), _ => unreachable!() }, |g| g.w_v.w.data()),
                    ("w_v.b", |p| match p { ScaParams::Global(g) => g.w_v.b.data_mut(), _ => unreachable!() }, |g| g.w_v.b.data()),
                    ("w_o.w", |p| match p { ScaParams::Global(g) => g.w_o.w.data_mut(), _ => unreachable!() }, |g| g.w_o.w.data()),
                    ("w_o.b", |p| match p { ScaParams::Global(g) => g.w_o.b.data_mut(), _ => unreachable!() }, |g| g.w_o.b.data()),
                ];
                for (name, slot, pick) in picks {
                    let analytic = global_slice(&d_params, pick);
                    slots.push((name.into(), Box::new(move |s| slot(&mut s.params)), analytic));
                }
            }
            _ => {
                let picks: [(&str, fn(&mut ScaParams) -> &mut [f64], fn(&DeformAttnParams) -> &[f64]); 6] = [
                    ("w_value", |p| match p { ScaParams::Deform(d) => d.w_value.data_mut(), _ => unreachable!() }, |d| d.w_value.data()),
                    ("w_out", |p| match p { ScaParams::Deform(d) => d.w_out.data_mut(), _ => unreachable!() }, |d| d.w_out.data()),
                    ("offset_w", |p| match p { ScaParams::Deform(d) => d.offset_w.data_mut(), _ => unreachable!() }, |d| d.offset_w.data()),
                    ("offset_b", |p| match p { ScaParams::Deform(d) => d.offset_b.data_mut(), _ => unreachable!() }, |d| d.offset_b.data()),
                    ("weight_w", |p| match p { ScaParams::Deform(d) => d.weight_w.data_mut(), _ => unreachable!() }, |d| d.weight_w.data()),
                    ("weight_b", |p| match p { ScaParams::Deform(d) => d.weight_b.data_mut(), _ => unreachable!() }, |d| d.weight_b.data()),
                ];
                for (name, slot, pick) in picks {
                    let analytic = deform_slice(&d_params, pick);
                    slots.push((name.into(), Box::new(move |s| slot(&mut s.params)), analytic));
                }
            }
        }
        for (name, slot, analytic) in &slots {
            let worst = fd_max_rel(&mut subject, analytic, &mut loss, slot.as_ref());
            assert!(worst <= TOL, "{:?} {}: worst rel err {}", mode, name, worst);
        }
    }
}

struct FeatSubject {
    image: FeatureMap,
    fp: FeaturizerParams,
}

#[test]
fn featurizer_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(227);
    let image = random_map(16, 16, 3, &mut rng);
    let fp = FeaturizerParams::init(8, &mut rng);
    let (out, cache) = featurize_cached(&image, &fp).unwrap();
    let upstream = random_map(out.h, out.w, out.c, &mut rng);

    let mut d_fp = FeaturizerParams::zeros(8);
    let d_image = featurize_backward(&upstream, &cache, &fp, &mut d_fp);

    let mut subject = FeatSubject { image, fp };
    let mut loss = |s: &FeatSubject| -> f64 {
        dot_map(&featurize(&s.image, &s.fp).unwrap(), &upstream)
    };
    for i in 0..3 {
        let worst = fd_max_rel(
            &mut subject,
            d_fp.convs[i].w.data(),
            &mut loss,
            &move |s: &mut FeatSubject| s.fp.convs[i].w.data_mut(),
        );
        assert!(worst <= TOL, "conv{} weights worst rel err {}", i, worst);
        let worst = fd_max_rel(
            &mut subject,
            d_fp.convs[i].b.data(),
            &mut loss,
            &move |s: &mut FeatSubject| s.fp.convs[i].b.data_mut(),
        );
        assert!(worst <= TOL, "conv{} bias worst rel err {}", i, worst);
    }
    let worst = fd_max_rel(&mut subject, d_image.data(), &mut loss, &|s: &mut FeatSubject| {
        s.image.data_mut()
    });
    assert!(worst <= TOL, "image worst rel err {}", worst);
}

struct HeadSubject {
    bev: FeatureMap,
    heads: HeadParams,
}

#[test]
fn head_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(229);
    let (h, w, c, nc) = (5, 5, 6, 4);
    let bev = random_map(h, w, c, &mut rng);
    let heads = HeadParams::init(c, nc, &mut rng);
    let us = random_map(h, w, nc, &mut rng);
    let u_centers = CenterHeadOut {
        heat: random_map(h, w, 2, &mut rng),
        offset: random_map(h, w, 2, &mut rng),
        velocity: random_map(h, w, 2, &mut rng),
    };

    let mut d_heads = HeadParams::zeros(c, nc);
    let mut d_bev = bev.zeros_like();
    heads_backward(&bev, &heads, &us, &u_centers, &mut d_heads, &mut d_bev).unwrap();

    let mut subject = HeadSubject { bev, heads };
    let mut loss = |s: &HeadSubject| -> f64 {
        let seg = head_segmentation(&s.bev, &s.heads);
        let centers = head_centers(&s.bev, &s.heads);
        dot_map(&seg, &us)
            + dot_map(&centers.heat, &u_centers.heat)
            + dot_map(&centers.offset, &u_centers.offset)
            + dot_map(&centers.velocity, &u_centers.velocity)
    };
    type Slot = Box<dyn Fn(&mut HeadSubject) -> &mut [f64]>;
    let slots: Vec<(&str, Slot, Vec<f64>)> = vec![
        ("seg.w", Box::new(|s| s.heads.seg.w.data_mut()), d_heads.seg.w.data().to_vec()),
        ("seg.b", Box::new(|s| s.heads.seg.b.data_mut()), d_heads.seg.b.data().to_vec()),
        ("heatmap.w", Box::new(|s| s.heads.heatmap.w.data_mut()), d_heads.heatmap.w.data().to_vec()),
        ("heatmap.b", Box::new(|s| s.heads.heatmap.b.data_mut()), d_heads.heatmap.b.data().to_vec()),
        ("offset.w", Box::new(|s| s.heads.offset.w.data_mut()), d_heads.offset.w.data().to_vec()),
        ("offset.b", Box::new(|s| s.heads.offset.b.data_mut()), d_heads.offset.b.data().to_vec()),
        ("velocity.w", Box::new(|s| s.heads.velocity.w.data_mut()), d_heads.velocity.w.data().to_vec()),
        ("velocity.b", Box::new(|s| s.heads.velocity.b.data_mut()), d_heads.velocity.b.data().to_vec()),
        ("bev", Box::new(|s| s.bev.data_mut()), d_bev.data().to_vec()),
    ];
    for (name, slot, analytic) in &slots {
        let worst = fd_max_rel(&mut subject, analytic, &mut loss, slot.as_ref());
        assert!(worst <= TOL, "{} worst rel err {}", name, worst);
    }
}

struct LossSubject {
    seg: FeatureMap,
    centers: CenterHeadOut,
}

#[test]
fn loss_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(233);
    let (h, w, nc) = (6, 6, 5);
    let seg = random_map(h, w, nc, &mut rng);
    let centers = CenterHeadOut {
        heat: random_map(h, w, 2, &mut rng),
        offset: random_map(h, w, 2, &mut rng),
        velocity: random_map(h, w, 2, &mut rng),
    };
    let gt = GroundTruthBev {
        h,
        w,
        classes: (0..h * w).map(|i| (i % 4) as u8).collect(),
        objects: vec![
            GtObject {
                id: 0,
                center_cell: (1.3, 2.6),
                center_ego: (0.0, 0.0),
                velocity_ego: (1.2, -0.4),
            },
            GtObject {
                id: 1,
                center_cell: (4.7, 0.2),
                center_ego: (0.0, 0.0),
                velocity_ego: (-0.3, 2.0),
            },
        ],
    };
    let weights = LossWeights { seg: 0.7, heatmap: 1.3, offset: 0.9, velocity: 1.1 };
    let (losses, d_seg, d_centers) = loss_and_grads(&seg, &centers, &gt, &weights).unwrap();
    assert!(losses.total > 0.0);

    let mut subject = LossSubject { seg, centers };
    let mut loss = |s: &LossSubject| -> f64 {
        loss_and_grads(&s.seg, &s.centers, &gt, &weights).unwrap().0.total
    };
    type Slot = Box<dyn Fn(&mut LossSubject) -> &mut [f64]>;
    let slots: Vec<(&str, Slot, Vec<f64>)> = vec![
        ("seg", Box::new(|s| s.seg.data_mut()), d_seg.data().to_vec()),
        ("heat", Box::new(|s| s.centers.heat.data_mut()), d_centers.heat.data().to_vec()),
        ("offset", Box::new(|s| s.centers.offset.data_mut()), d_centers.offset.data().to_vec()),
        ("velocity", Box::new(|s| s.centers.velocity.data_mut()), d_centers.velocity.data().to_vec()),
    ];
    for (name, slot, analytic) in &slots {
        let worst = fd_max_rel(&mut subject, analytic, &mut loss, slot.as_ref());
        assert!(worst <= TOL, "{} worst rel err {}", name, worst);
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let spec = SceneSpec {
        n_cars: 2,
        n_occluders: 0,
        ground: true,
        half_extent: 12.0,
        n_frames: 3,
        dt: 0.5,
        seed: 5,
    };
    let rig = make_ring_rig(4, 64, 48, 40.0, 1.6).unwrap();
    let grid = BevGridSpec::new(8, 8, 2.0).unwrap();
    let enc = EncoderConfig {
        grid: grid.clone(),
        channels: 8,
        n_layers: 1,
        n_heads: 2,
        n_keys: 2,
        anchors: AnchorHeights::default(),
        sca_mode: ScaMode::Local,
        tsa_concat_offsets: true,
        tsa_combine: TsaCombine::Mean,
        align_history: true,
        ffn_hidden: 16,
        n_classes: 5,
        feat_stride: 8,
    };
    let seq = build_sequence(&spec, &rig, &grid).unwrap();
    let frames: Vec<&_> = seq.frames[..2].iter().collect();
    let hits = FrameHits::compute(&enc.grid, &rig, &enc.anchors, enc.feat_stride);
    let weights = LossWeights { seg: 1.0, heatmap: 1.0, offset: 0.0, velocity: 0.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&enc, &mut rng).unwrap();
    let out = forward_clip(&frames, &params, &enc, &hits, &weights, 1).unwrap();
    assert!(out.losses.total.is_finite() && out.losses.total > 0.0);
    let mut grads = params.zeros_like();
    clip_backward(&out, &hits, &params, &enc, &mut grads).unwrap();

    // The clip objective stops the gradient at the history BEV, so the
    // numeric probe must hold that state fixed too: encode the first
    // frame once at the base parameters, then differentiate only the
    // final frame's pass.
    let f0 = frames[0];
    let f1 = frames[1];
    let s0 = encode_frame(&f0.images, None, f0.pose, f0.t, &hits, &params, &enc, 1).unwrap();

    let mut manual = params.zeros_like();
    {
        let (state, cache) =
            encode_frame_cached(&f1.images, Some(&s0), f1.pose, f1.t, &hits, &params, &enc, 1)
                .unwrap();
        let seg = head_segmentation(&state.features, &params.heads);
        let centers = head_centers(&state.features, &params.heads);
        let (_, d_seg, d_centers) = loss_and_grads(&seg, &centers, &f1.gt, &weights).unwrap();
        let mut d_bev = state.features.zeros_like();
        heads_backward(&state.features, &params.heads, &d_seg, &d_centers, &mut manual.heads, &mut d_bev)
            .unwrap();
        frame_backward(&cache, &hits, &params, &enc, &d_bev, &mut manual).unwrap();
    }
    for ((na, ta), (nb, tb)) in grads.tensors().iter().zip(manual.tensors().iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "clip and single-frame gradients differ on {}", na);
    }

    let frozen_history_loss = |p: &ModelParams| -> f64 {
        let state = encode_frame(&f1.images, Some(&s0), f1.pose, f1.t, &hits, p, &enc, 1).unwrap();
        let seg = head_segmentation(&state.features, &p.heads);
        let centers = head_centers(&state.features, &p.heads);
        loss_and_grads(&seg, &centers, &f1.gt, &weights).unwrap().0.total
    };
    let report = finite_diff_check(&frozen_history_loss, &mut params, &grads, EPS, 3, 7);
    assert!(report.n_checked > 60, "only {} coordinates checked", report.n_checked);
    assert!(
        report.max_rel_err <= TOL,
        "worst tensor {} index {} rel err {}",
        report.worst_tensor,
        report.worst_index,
        report.max_rel_err
    );

    let mut bad = grads.clone();
    for (name, t) in bad.tensors_mut() {
        if name == "heads.seg.w" {
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
    }
    let report = finite_diff_check(&frozen_history_loss, &mut params, &bad, EPS, 3, 7);
    assert!(
        report.max_rel_err > 1e-3,
        "corrupted heads.seg.w gradient went undetected ({})",
        report.max_rel_err
    );
}
