//! One encoder layer: temporal self-attention, spatial cross-attention,
//! feed-forward, each residual-added and layer-normalized (post-norm), with
//! hand-written backward passes for all of it.

use crate::attention::{
    bilinear_sample, bilinear_sample_backward, deform_attn, deform_attn_grad, AttnScratch,
    DeformAttnParams, DeformAttnGradSinks,
};
use crate::tensor::{affine_apply, affine_backward, par_fill_rows, FeatureMap};
use crate::{Error, Result};

use super::featurizer::{silu, silu_grad};
use super::frame::FrameHits;
use super::params::{
    FfnParams, GlobalAttnParams, LayerNormParams, LayerParams, ScaParams,
};
use super::{EncoderConfig, ScaMode, TsaCombine};

pub const LN_EPS: f64 = 1e-5;

/// Per-cell LayerNorm over channels: y = scale * (x - mean)/sqrt(var + eps) + shift.
pub fn layer_norm(x: &FeatureMap, p: &LayerNormParams, out: &mut FeatureMap) {
    debug_assert!(x.same_shape(out));
    let c = x.c;
    let scale = p.scale.data();
    let shift = p.shift.data();
    for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let mean = src.iter().sum::<f64>() / c as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ch in 0..c {
            dst[ch] = scale[ch] * (src[ch] - mean) * inv + shift[ch];
        }
    }
}

/// Backward of [`layer_norm`]: accumulates into `d_p` and `d_x`.
pub fn layer_norm_backward(
    x: &FeatureMap,
    p: &LayerNormParams,
    d_out: &FeatureMap,
    d_p: &mut LayerNormParams,
    d_x: &mut FeatureMap,
) {
    let c = x.c;
    let cf = c as f64;
    let scale = p.scale.data();
    let d_scale = d_p.scale.data_mut();
    let d_shift = d_p.shift.data_mut();
    for ((src, up), dst) in x
        .data()
        .chunks(c)
        .zip(d_out.data().chunks(c))
        .zip(d_x.data_mut().chunks_mut(c))
    {
        let mean = src.iter().sum::<f64>() / cf;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let xhat = (src[ch] - mean) * inv;
            let dxhat = up[ch] * scale[ch];
            d_scale[ch] += up[ch] * xhat;
            d_shift[ch] += up[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for ch in 0..c {
            let xhat = (src[ch] - mean) * inv;
            let dxhat = up[ch] * scale[ch];
            dst[ch] += inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
}

/// Per-cell feed-forward: W2 silu(W1 x + b1) + b2.
pub fn ffn_apply(x: &FeatureMap, p: &FfnParams, out: &mut FeatureMap) {
    let hidden = p.lin1.n_out();
    let mut h = vec![0.0; hidden];
    let c = out.c;
    for (src, dst) in x.data().chunks(x.c).zip(out.data_mut().chunks_mut(c)) {
        affine_apply(&p.lin1.w, &p.lin1.b, src, &mut h);
        for v in h.iter_mut() {
            *v = silu(*v);
        }
        affine_apply(&p.lin2.w, &p.lin2.b, &h, dst);
    }
}

/// Backward of [`ffn_apply`], recomputing the hidden activations.
pub fn ffn_backward(
    x: &FeatureMap,
    p: &FfnParams,
    d_out: &FeatureMap,
    d_p: &mut FfnParams,
    d_x: &mut FeatureMap,
) {
    let hidden = p.lin1.n_out();
    let mut pre = vec![0.0; hidden];
    let mut act = vec![0.0; hidden];
    let mut d_act = vec![0.0; hidden];
    let mut d_pre = vec![0.0; hidden];
    let c = x.c;
    for ((src, up), dst) in x
        .data()
        .chunks(c)
        .zip(d_out.data().chunks(c))
        .zip(d_x.data_mut().chunks_mut(c))
    {
        affine_apply(&p.lin1.w, &p.lin1.b, src, &mut pre);
        for (a, z) in act.iter_mut().zip(pre.iter()) {
            *a = silu(*z);
        }
        d_act.iter_mut().for_each(|v| *v = 0.0);
        affine_backward(&p.lin2.w, &act, up, &mut d_p.lin2.w, &mut d_p.lin2.b, &mut d_act);
        for ((dp, da), z) in d_pre.iter_mut().zip(d_act.iter()).zip(pre.iter()) {
            *dp = da * silu_grad(*z);
        }
        affine_backward(&p.lin1.w, src, &d_pre, &mut d_p.lin1.w, &mut d_p.lin1.b, dst);
    }
}

fn tsa_query_input<'a>(
    q: &'a FeatureMap,
    hist: &'a FeatureMap,
    y: usize,
    x: usize,
    concat: bool,
    buf: &'a mut Vec<f64>,
) -> &'a [f64] {
    if concat {
        buf.clear();
        buf.extend_from_slice(q.at(y, x));
        buf.extend_from_slice(hist.at(y, x));
        buf.as_slice()
    } else {
        q.at(y, x)
    }
}

/// Temporal self-attention: each cell's query deformably attends to both
/// the current query map and the aligned history map at its own grid
/// location, and the two branch outputs are combined. The offset/weight
/// predictors read [Q_p ; hist_p] when `concat` is set, Q_p alone
/// otherwise. For the first frame the caller passes hist = the initial
/// queries, which makes both branches attend to identical content.
pub fn temporal_self_attention(
    q: &FeatureMap,
    hist: &FeatureMap,
    params: &DeformAttnParams,
    concat: bool,
    combine: TsaCombine,
    threads: usize,
) -> Result<FeatureMap> {
    if !q.same_shape(hist) {
        return Err(Error::ShapeMismatch(format!(
            "queries {}x{}x{} vs history {}x{}x{}",
            q.h, q.w, q.c, hist.h, hist.w, hist.c
        )));
    }
    let expect_dim = if concat { 2 * q.c } else { q.c };
    if params.query_dim != expect_dim {
        return Err(Error::ShapeMismatch(format!(
            "TSA predictor width {} but query input is {}",
            params.query_dim, expect_dim
        )));
    }
    let mut out = q.zeros_like();
    let scale = match combine {
        TsaCombine::Mean => 0.5,
        TsaCombine::Sum => 1.0,
    };
    // probe one cell up front so errors surface before threads spawn
    {
        let mut scratch = AttnScratch::default();
        let mut buf = Vec::new();
        let qi = tsa_query_input(q, hist, 0, 0, concat, &mut buf);
        let mut tmp = vec![0.0; q.c];
        deform_attn(qi, 0.0, 0.0, q, params, &mut scratch, &mut tmp)?;
    }
    par_fill_rows(&mut out, threads, |y, x, cell| {
        let mut scratch = AttnScratch::default();
        let mut buf = Vec::new();
        let mut tmp = vec![0.0; cell.len()];
        let qi = tsa_query_input(q, hist, y, x, concat, &mut buf);
        let (u, v) = (x as f64, y as f64);
        deform_attn(qi, u, v, q, params, &mut scratch, &mut tmp).expect("checked above");
        for (o, t) in cell.iter_mut().zip(tmp.iter()) {
            *o = scale * t;
        }
        deform_attn(qi, u, v, hist, params, &mut scratch, &mut tmp).expect("checked above");
        for (o, t) in cell.iter_mut().zip(tmp.iter()) {
            *o += scale * t;
        }
    });
    Ok(out)
}

/// Backward of [`temporal_self_attention`]. History is a constant: no
/// gradient flows into `hist`, neither through the sampled map nor through
/// the concatenated predictor input. `d_q` receives both the per-cell query
/// gradient and the scattered map gradient of the current-queries branch.
pub fn temporal_self_attention_backward(
    q: &FeatureMap,
    hist: &FeatureMap,
    params: &DeformAttnParams,
    concat: bool,
    combine: TsaCombine,
    d_out: &FeatureMap,
    d_params: &mut DeformAttnParams,
    d_q: &mut FeatureMap,
) -> Result<()> {
    let scale = match combine {
        TsaCombine::Mean => 0.5,
        TsaCombine::Sum => 1.0,
    };
    let c = q.c;
    let mut scratch = AttnScratch::default();
    let mut buf = Vec::new();
    let mut upstream = vec![0.0; c];
    let mut d_qi = vec![0.0; if concat { 2 * c } else { c }];
    for y in 0..q.h {
        for x in 0..q.w {
            let go = d_out.at(y, x);
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            for (u, g) in upstream.iter_mut().zip(go.iter()) {
                *u = scale * g;
            }
            let qi_owned: Vec<f64>;
            let qi: &[f64] = if concat {
                buf.clear();
                buf.extend_from_slice(q.at(y, x));
                buf.extend_from_slice(hist.at(y, x));
                qi_owned = buf.clone();
                &qi_owned
            } else {
                qi_owned = q.at(y, x).to_vec();
                &qi_owned
            };
            let (u, v) = (x as f64, y as f64);
            d_qi.iter_mut().for_each(|g| *g = 0.0);
            {
                let mut sinks = DeformAttnGradSinks {
                    params: d_params,
                    map: Some(d_q),
                    query_input: &mut d_qi,
                };
                deform_attn_grad(qi, u, v, q, params, &upstream, &mut scratch, &mut sinks)?;
            }
            {
                let mut sinks = DeformAttnGradSinks {
                    params: d_params,
                    map: None,
                    query_input: &mut d_qi,
                };
                deform_attn_grad(qi, u, v, hist, params, &upstream, &mut scratch, &mut sinks)?;
            }
            let dst = d_q.at_mut(y, x);
            for ch in 0..c {
                dst[ch] += d_qi[ch];
            }
            // d_qi[c..] targets the history vector and is dropped
        }
    }
    Ok(())
}

/// Points-mode kernel: per head, project one bilinear sample through the
/// value/output matrices (zero offsets and uniform weights collapse the
/// keys onto the reference point).
fn points_attend(
    params: &DeformAttnParams,
    map: &FeatureMap,
    u: f64,
    v: f64,
    sample: &mut [f64],
    out: &mut [f64],
) {
    let c = params.channels;
    let hd = params.head_dim();
    bilinear_sample(map, u, v, sample);
    for i in 0..params.n_heads {
        let w_val = params.w_value.slab3(i);
        let w_out = params.w_out.slab3(i);
        for d in 0..hd {
            let row = &w_val[d * c..(d + 1) * c];
            let mut acc = 0.0;
            for ch in 0..c {
                acc += row[ch] * sample[ch];
            }
            for ch in 0..c {
                out[ch] += w_out[ch * hd + d] * acc;
            }
        }
    }
}

fn points_attend_backward(
    params: &DeformAttnParams,
    map: &FeatureMap,
    u: f64,
    v: f64,
    upstream: &[f64],
    d_params: &mut DeformAttnParams,
    d_map: &mut FeatureMap,
) {
    let c = params.channels;
    let hd = params.head_dim();
    let mut sample = vec![0.0; c];
    bilinear_sample(map, u, v, &mut sample);
    let mut d_sample = vec![0.0; c];
    for i in 0..params.n_heads {
        let w_val = params.w_value.slab3(i);
        let w_out = params.w_out.slab3(i);
        let d_w_out = d_params.w_out.slab3_mut(i);
        let mut d_head = vec![0.0; hd];
        let mut head = vec![0.0; hd];
        for d in 0..hd {
            let row = &w_val[d * c..(d + 1) * c];
            head[d] = row.iter().zip(sample.iter()).map(|(a, b)| a * b).sum();
        }
        for ch in 0..c {
            let g = upstream[ch];
            for d in 0..hd {
                d_head[d] += w_out[ch * hd + d] * g;
                d_w_out[ch * hd + d] += g * head[d];
            }
        }
        let d_w_val = d_params.w_value.slab3_mut(i);
        for d in 0..hd {
            let g = d_head[d];
            if g == 0.0 {
                continue;
            }
            let row = &w_val[d * c..(d + 1) * c];
            let d_row = &mut d_w_val[d * c..(d + 1) * c];
            for ch in 0..c {
                d_row[ch] += g * sample[ch];
                d_sample[ch] += row[ch] * g;
            }
        }
    }
    bilinear_sample_backward(map, u, v, &d_sample, d_map);
}

/// Spatial cross-attention. Per cell, every recorded pillar hit
/// contributes one attention evaluation against its view's feature map at
/// the projected (and stride-rescaled) reference point; the sum is divided
/// by the number of distinct hit views. Cells with no hits get a zero
/// update.
pub fn spatial_cross_attention(
    q: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    params: &ScaParams,
    mode: ScaMode,
    threads: usize,
) -> Result<FeatureMap> {
    validate_sca(q, feats, hits, params, mode)?;
    let mut out = q.zeros_like();
    match (params, mode) {
        (ScaParams::Deform(dp), ScaMode::Local) => {
            if dp.query_dim != q.c {
                return Err(Error::ShapeMismatch(
                    "SCA predictor width must equal channel count".into(),
                ));
            }
            par_fill_rows(&mut out, threads, |y, x, cell| {
                let (recs, n_views) = hits.at(y, x);
                if recs.is_empty() {
                    return;
                }
                let mut scratch = AttnScratch::default();
                let mut tmp = vec![0.0; cell.len()];
                let qp = q.at(y, x);
                for rec in recs {
                    deform_attn(
                        qp,
                        rec.pixel.0,
                        rec.pixel.1,
                        &feats[rec.view_id],
                        dp,
                        &mut scratch,
                        &mut tmp,
                    )
                    .expect("shapes validated");
                    for (o, t) in cell.iter_mut().zip(tmp.iter()) {
                        *o += t;
                    }
                }
                let inv = 1.0 / n_views as f64;
                for o in cell.iter_mut() {
                    *o *= inv;
                }
            });
        }
        (ScaParams::Deform(dp), ScaMode::Points) => {
            par_fill_rows(&mut out, threads, |y, x, cell| {
                let (recs, n_views) = hits.at(y, x);
                if recs.is_empty() {
                    return;
                }
                let mut sample = vec![0.0; q.c];
                for rec in recs {
                    points_attend(
                        dp,
                        &feats[rec.view_id],
                        rec.pixel.0,
                        rec.pixel.1,
                        &mut sample,
                        cell,
                    );
                }
                let inv = 1.0 / n_views as f64;
                for o in cell.iter_mut() {
                    *o *= inv;
                }
            });
        }
        (ScaParams::Global(gp), ScaMode::Global) => {
            global_sca_forward(q, feats, hits, gp, threads, &mut out);
        }
        _ => unreachable!("validated above"),
    }
    Ok(out)
}

/// Backward of [`spatial_cross_attention`].
pub fn spatial_cross_attention_backward(
    q: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    params: &ScaParams,
    mode: ScaMode,
    d_out: &FeatureMap,
    d_params: &mut ScaParams,
    d_q: &mut FeatureMap,
    d_feats: &mut [FeatureMap],
) -> Result<()> {
    validate_sca(q, feats, hits, params, mode)?;
    match (params, mode, d_params) {
        (ScaParams::Deform(dp), ScaMode::Local, ScaParams::Deform(dgp)) => {
            let c = q.c;
            let mut scratch = AttnScratch::default();
            let mut upstream = vec![0.0; c];
            let mut d_qp = vec![0.0; c];
            for y in 0..q.h {
                for x in 0..q.w {
                    let (recs, n_views) = hits.at(y, x);
                    if recs.is_empty() {
                        continue;
                    }
                    let go = d_out.at(y, x);
                    if go.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    let inv = 1.0 / n_views as f64;
                    for (u, g) in upstream.iter_mut().zip(go.iter()) {
                        *u = inv * g;
                    }
                    let qp = q.at(y, x).to_vec();
                    d_qp.iter_mut().for_each(|g| *g = 0.0);
                    for rec in recs {
                        let mut sinks = DeformAttnGradSinks {
                            params: dgp,
                            map: Some(&mut d_feats[rec.view_id]),
                            query_input: &mut d_qp,
                        };
                        deform_attn_grad(
                            &qp,
                            rec.pixel.0,
                            rec.pixel.1,
                            &feats[rec.view_id],
                            dp,
                            &upstream,
                            &mut scratch,
                            &mut sinks,
                        )?;
                    }
                    let dst = d_q.at_mut(y, x);
                    for ch in 0..c {
                        dst[ch] += d_qp[ch];
                    }
                }
            }
        }
        (ScaParams::Deform(dp), ScaMode::Points, ScaParams::Deform(dgp)) => {
            let mut upstream = vec![0.0; q.c];
            for y in 0..q.h {
                for x in 0..q.w {
                    let (recs, n_views) = hits.at(y, x);
                    if recs.is_empty() {
                        continue;
                    }
                    let go = d_out.at(y, x);
                    if go.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    let inv = 1.0 / n_views as f64;
                    for (u, g) in upstream.iter_mut().zip(go.iter()) {
                        *u = inv * g;
                    }
                    for rec in recs {
                        points_attend_backward(
                            dp,
                            &feats[rec.view_id],
                            rec.pixel.0,
                            rec.pixel.1,
                            &upstream,
                            dgp,
                            &mut d_feats[rec.view_id],
                        );
                    }
                }
            }
        }
        (ScaParams::Global(gp), ScaMode::Global, ScaParams::Global(dgp)) => {
            global_sca_backward(q, feats, hits, gp, d_out, dgp, d_q, d_feats)?;
        }
        _ => {
            return Err(Error::InvalidConfig(
                "SCA parameter kind does not match mode".into(),
            ))
        }
    }
    Ok(())
}

fn validate_sca(
    q: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    params: &ScaParams,
    mode: ScaMode,
) -> Result<()> {
    if hits.h != q.h || hits.w != q.w {
        return Err(Error::ShapeMismatch("hit table does not match BEV grid".into()));
    }
    if feats.len() != hits.n_views {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps but hit table was built for {} views",
            feats.len(),
            hits.n_views
        )));
    }
    for f in feats {
        if f.c != q.c {
            return Err(Error::ShapeMismatch("view features channel mismatch".into()));
        }
    }
    match (params, mode) {
        (ScaParams::Deform(_), ScaMode::Local | ScaMode::Points) => Ok(()),
        (ScaParams::Global(_), ScaMode::Global) => Ok(()),
        _ => Err(Error::InvalidConfig(
            "SCA parameter kind does not match mode".into(),
        )),
    }
}

fn dedup_hit_views(recs: &[super::frame::CellHit]) -> Vec<usize> {
    let mut views: Vec<usize> = recs.iter().map(|r| r.view_id).collect();
    views.dedup();
    views
}

/// Global-mode SCA: per cell, vanilla multi-head attention whose keys and
/// values are every spatial position of the hit views' feature maps.
fn global_sca_forward(
    q: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    gp: &GlobalAttnParams,
    threads: usize,
    out: &mut FeatureMap,
) {
    let c = gp.channels;
    let hd = gp.head_dim();
    let nh = gp.n_heads;
    // keys/values are shared across cells: precompute per view
    let mut k_maps = Vec::with_capacity(feats.len());
    let mut v_maps = Vec::with_capacity(feats.len());
    for f in feats {
        let mut km = FeatureMap::zeros(f.h, f.w, c);
        let mut vm = FeatureMap::zeros(f.h, f.w, c);
        for ((src, k), v) in f
            .data()
            .chunks(c)
            .zip(km.data_mut().chunks_mut(c))
            .zip(vm.data_mut().chunks_mut(c))
        {
            affine_apply(&gp.w_k.w, &gp.w_k.b, src, k);
            affine_apply(&gp.w_v.w, &gp.w_v.b, src, v);
        }
        k_maps.push(km);
        v_maps.push(vm);
    }
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    par_fill_rows(out, threads, |y, x, cell| {
        let (recs, _) = hits.at(y, x);
        if recs.is_empty() {
            return;
        }
        let views = dedup_hit_views(recs);
        let mut qv = vec![0.0; c];
        affine_apply(&gp.w_q.w, &gp.w_q.b, q.at(y, x), &mut qv);
        let n_pos: usize = views.iter().map(|&v| feats[v].h * feats[v].w).sum();
        let mut logits = vec![0.0; n_pos];
        let mut ctx = vec![0.0; c];
        for h in 0..nh {
            let qh = &qv[h * hd..(h + 1) * hd];
            let mut m = f64::NEG_INFINITY;
            let mut idx = 0;
            for &vid in &views {
                for kvec in k_maps[vid].data().chunks(c) {
                    let kh = &kvec[h * hd..(h + 1) * hd];
                    let dot: f64 = qh.iter().zip(kh.iter()).map(|(a, b)| a * b).sum();
                    let l = dot * inv_sqrt;
                    logits[idx] = l;
                    m = m.max(l);
                    idx += 1;
                }
            }
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - m).exp();
                z += *l;
            }
            let ctx_h = &mut ctx[h * hd..(h + 1) * hd];
            let mut idx = 0;
            for &vid in &views {
                for vvec in v_maps[vid].data().chunks(c) {
                    let a = logits[idx] / z;
                    let vh = &vvec[h * hd..(h + 1) * hd];
                    for d in 0..hd {
                        ctx_h[d] += a * vh[d];
                    }
                    idx += 1;
                }
            }
        }
        affine_apply(&gp.w_o.w, &gp.w_o.b, &ctx, cell);
    });
}

fn global_sca_backward(
    q: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    gp: &GlobalAttnParams,
    d_out: &FeatureMap,
    dgp: &mut GlobalAttnParams,
    d_q: &mut FeatureMap,
    d_feats: &mut [FeatureMap],
) -> Result<()> {
    let c = gp.channels;
    let hd = gp.head_dim();
    let nh = gp.n_heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    // recompute shared keys/values and accumulate their gradients
    let mut k_maps = Vec::with_capacity(feats.len());
    let mut v_maps = Vec::with_capacity(feats.len());
    for f in feats {
        let mut km = FeatureMap::zeros(f.h, f.w, c);
        let mut vm = FeatureMap::zeros(f.h, f.w, c);
        for ((src, k), v) in f
            .data()
            .chunks(c)
            .zip(km.data_mut().chunks_mut(c))
            .zip(vm.data_mut().chunks_mut(c))
        {
            affine_apply(&gp.w_k.w, &gp.w_k.b, src, k);
            affine_apply(&gp.w_v.w, &gp.w_v.b, src, v);
        }
        k_maps.push(km);
        v_maps.push(vm);
    }
    let mut d_k_maps: Vec<FeatureMap> = k_maps.iter().map(|m| m.zeros_like()).collect();
    let mut d_v_maps: Vec<FeatureMap> = v_maps.iter().map(|m| m.zeros_like()).collect();

    let mut qv = vec![0.0; c];
    let mut d_qv = vec![0.0; c];
    let mut ctx = vec![0.0; c];
    let mut d_ctx = vec![0.0; c];
    for y in 0..q.h {
        for x in 0..q.w {
            let (recs, _) = hits.at(y, x);
            if recs.is_empty() {
                continue;
            }
            let go = d_out.at(y, x);
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let views = dedup_hit_views(recs);
            affine_apply(&gp.w_q.w, &gp.w_q.b, q.at(y, x), &mut qv);
            let n_pos: usize = views.iter().map(|&v| feats[v].h * feats[v].w).sum();
            let mut weights = vec![0.0; n_pos];
            ctx.iter_mut().for_each(|v| *v = 0.0);
            d_ctx.iter_mut().for_each(|v| *v = 0.0);
            d_qv.iter_mut().for_each(|v| *v = 0.0);

            // recompute per-head weights and ctx, then backprop
            let mut per_head_weights: Vec<Vec<f64>> = Vec::with_capacity(nh);
            for h in 0..nh {
                let qh = &qv[h * hd..(h + 1) * hd];
                let mut m = f64::NEG_INFINITY;
                let mut idx = 0;
                for &vid in &views {
                    for kvec in k_maps[vid].data().chunks(c) {
                        let kh = &kvec[h * hd..(h + 1) * hd];
                        let dot: f64 = qh.iter().zip(kh.iter()).map(|(a, b)| a * b).sum();
                        weights[idx] = dot * inv_sqrt;
                        m = m.max(weights[idx]);
                        idx += 1;
                    }
                }
                let mut z = 0.0;
                for wv in weights.iter_mut() {
                    *wv = (*wv - m).exp();
                    z += *wv;
                }
                for wv in weights.iter_mut() {
                    *wv /= z;
                }
                let ctx_h = &mut ctx[h * hd..(h + 1) * hd];
                let mut idx = 0;
                for &vid in &views {
                    for vvec in v_maps[vid].data().chunks(c) {
                        let vh = &vvec[h * hd..(h + 1) * hd];
                        for d in 0..hd {
                            ctx_h[d] += weights[idx] * vh[d];
                        }
                        idx += 1;
                    }
                }
                per_head_weights.push(weights.clone());
            }

            // output projection
            affine_backward(&gp.w_o.w, &ctx, go, &mut dgp.w_o.w, &mut dgp.w_o.b, &mut d_ctx);

            for h in 0..nh {
                let qh: Vec<f64> = qv[h * hd..(h + 1) * hd].to_vec();
                let d_ctx_h = &d_ctx[h * hd..(h + 1) * hd];
                let aw = &per_head_weights[h];
                // dA_n = <d_ctx_h, v_n,h>; d_v_n,h += A_n d_ctx_h
                let mut d_a = vec![0.0; n_pos];
                let mut idx = 0;
                for &vid in &views {
                    let vm = &v_maps[vid];
                    let dvm = &mut d_v_maps[vid];
                    for (vvec, dvvec) in vm.data().chunks(c).zip(dvm.data_mut().chunks_mut(c)) {
                        let vh = &vvec[h * hd..(h + 1) * hd];
                        let dvh = &mut dvvec[h * hd..(h + 1) * hd];
                        let a = aw[idx];
                        let mut acc = 0.0;
                        for d in 0..hd {
                            acc += d_ctx_h[d] * vh[d];
                            dvh[d] += a * d_ctx_h[d];
                        }
                        d_a[idx] = acc;
                        idx += 1;
                    }
                }
                // softmax backward
                let dot: f64 = aw.iter().zip(d_a.iter()).map(|(a, d)| a * d).sum();
                // d logits -> d q_h and d k_n,h
                let d_qh = &mut d_qv[h * hd..(h + 1) * hd];
                let mut idx = 0;
                for &vid in &views {
                    let km = &k_maps[vid];
                    let dkm = &mut d_k_maps[vid];
                    for (kvec, dkvec) in km.data().chunks(c).zip(dkm.data_mut().chunks_mut(c)) {
                        let d_logit = aw[idx] * (d_a[idx] - dot) * inv_sqrt;
                        if d_logit != 0.0 {
                            let kh = &kvec[h * hd..(h + 1) * hd];
                            let dkh = &mut dkvec[h * hd..(h + 1) * hd];
                            for d in 0..hd {
                                d_qh[d] += d_logit * kh[d];
                                dkh[d] += d_logit * qh[d];
                            }
                        }
                        idx += 1;
                    }
                }
            }
            affine_backward(
                &gp.w_q.w,
                q.at(y, x),
                &d_qv,
                &mut dgp.w_q.w,
                &mut dgp.w_q.b,
                d_q.at_mut(y, x),
            );
        }
    }

    // key/value projections back to the feature maps
    for (vid, f) in feats.iter().enumerate() {
        for ((src, dk), (dv, df)) in f
            .data()
            .chunks(c)
            .zip(d_k_maps[vid].data().chunks(c))
            .zip(d_v_maps[vid].data().chunks(c).zip(d_feats[vid].data_mut().chunks_mut(c)))
        {
            affine_backward(&gp.w_k.w, src, dk, &mut dgp.w_k.w, &mut dgp.w_k.b, df);
            affine_backward(&gp.w_v.w, src, dv, &mut dgp.w_v.w, &mut dgp.w_v.b, df);
        }
    }
    Ok(())
}

/// Activations of one encoder layer needed for its backward pass. `x3` is
/// the layer output.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x_in: FeatureMap,
    pub x1_pre: FeatureMap,
    pub x1: FeatureMap,
    pub x2_pre: FeatureMap,
    pub x2: FeatureMap,
    pub x3_pre: FeatureMap,
    pub x3: FeatureMap,
}

/// One full encoder layer: TSA, SCA, FFN, each residual-added then
/// normalized.
pub fn encoder_layer(
    x: &FeatureMap,
    hist: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    lp: &LayerParams,
    cfg: &EncoderConfig,
    threads: usize,
) -> Result<LayerCache> {
    let tsa_out = temporal_self_attention(
        x,
        hist,
        &lp.tsa,
        cfg.tsa_concat_offsets,
        cfg.tsa_combine,
        threads,
    )?;
    let mut x1_pre = x.clone();
    x1_pre.add_assign(&tsa_out);
    let mut x1 = x1_pre.zeros_like();
    layer_norm(&x1_pre, &lp.norm1, &mut x1);

    let sca_out = spatial_cross_attention(&x1, feats, hits, &lp.sca, cfg.sca_mode, threads)?;
    let mut x2_pre = x1.clone();
    x2_pre.add_assign(&sca_out);
    let mut x2 = x2_pre.zeros_like();
    layer_norm(&x2_pre, &lp.norm2, &mut x2);

    let mut ffn_out = x2.zeros_like();
    ffn_apply(&x2, &lp.ffn, &mut ffn_out);
    let mut x3_pre = x2.clone();
    x3_pre.add_assign(&ffn_out);
    let mut x3 = x3_pre.zeros_like();
    layer_norm(&x3_pre, &lp.norm3, &mut x3);

    Ok(LayerCache {
        x_in: x.clone(),
        x1_pre,
        x1,
        x2_pre,
        x2,
        x3_pre,
        x3,
    })
}

/// Backward of [`encoder_layer`]; returns the gradient with respect to the
/// layer input.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer_backward(
    cache: &LayerCache,
    hist: &FeatureMap,
    feats: &[FeatureMap],
    hits: &FrameHits,
    lp: &LayerParams,
    cfg: &EncoderConfig,
    d_out: &FeatureMap,
    d_lp: &mut LayerParams,
    d_feats: &mut [FeatureMap],
) -> Result<FeatureMap> {
    // norm3
    let mut d_x3_pre = cache.x3_pre.zeros_like();
    layer_norm_backward(&cache.x3_pre, &lp.norm3, d_out, &mut d_lp.norm3, &mut d_x3_pre);
    // x3_pre = x2 + ffn(x2)
    let mut d_x2 = d_x3_pre.clone();
    ffn_backward(&cache.x2, &lp.ffn, &d_x3_pre, &mut d_lp.ffn, &mut d_x2);
    // norm2
    let mut d_x2_pre = cache.x2_pre.zeros_like();
    layer_norm_backward(&cache.x2_pre, &lp.norm2, &d_x2, &mut d_lp.norm2, &mut d_x2_pre);
    // x2_pre = x1 + sca(x1)
    let mut d_x1 = d_x2_pre.clone();
    spatial_cross_attention_backward(
        &cache.x1,
        feats,
        hits,
        &lp.sca,
        cfg.sca_mode,
        &d_x2_pre,
        &mut d_lp.sca,
        &mut d_x1,
        d_feats,
    )?;
    // norm1
    let mut d_x1_pre = cache.x1_pre.zeros_like();
    layer_norm_backward(&cache.x1_pre, &lp.norm1, &d_x1, &mut d_lp.norm1, &mut d_x1_pre);
    // x1_pre = x + tsa(x)
    let mut d_x = d_x1_pre.clone();
    temporal_self_attention_backward(
        &cache.x_in,
        hist,
        &lp.tsa,
        cfg.tsa_concat_offsets,
        cfg.tsa_combine,
        &d_x1_pre,
        &mut d_lp.tsa,
        &mut d_x,
    )?;
    Ok(d_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DeformAttnParams;
    use crate::encoder::frame::FrameHits;
    use crate::encoder::params::ModelParams;
    use crate::encoder::ScaMode;
    use crate::geometry::{AnchorHeights, BevGridSpec, CameraRig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut m = FeatureMap::zeros(h, w, c);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn layer_norm_zero_mean_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_map(3, 3, 8, &mut rng);
        let p = LayerNormParams::identity(8);
        let mut out = x.zeros_like();
        layer_norm(&x, &p, &mut out);
        for cell in out.data().chunks(8) {
            let mean: f64 = cell.iter().sum::<f64>() / 8.0;
            let var: f64 = cell.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = rand_map(2, 2, 6, &mut rng);
        let mut p = LayerNormParams::identity(6);
        for v in p.scale.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let up = rand_map(2, 2, 6, &mut rng);
        let loss = |x: &FeatureMap, p: &LayerNormParams| -> f64 {
            let mut out = x.zeros_like();
            layer_norm(x, p, &mut out);
            out.data().iter().zip(up.data().iter()).map(|(a, b)| a * b).sum()
        };
        let mut d_p = LayerNormParams::zeros(6);
        let mut d_x = x.zeros_like();
        layer_norm_backward(&x, &p, &up, &mut d_p, &mut d_x);
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..x.data().len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let a = loss(&x, &p);
            x.data_mut()[i] = orig - eps;
            let b = loss(&x, &p);
            x.data_mut()[i] = orig;
            let fd = (a - b) / (2.0 * eps);
            let an = d_x.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        for i in 0..6 {
            let orig = p.scale.data()[i];
            p.scale.data_mut()[i] = orig + eps;
            let a = loss(&x, &p);
            p.scale.data_mut()[i] = orig - eps;
            let b = loss(&x, &p);
            p.scale.data_mut()[i] = orig;
            let fd = (a - b) / (2.0 * eps);
            let an = d_p.scale.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        assert!(worst <= 1e-4, "max rel err {worst}");
    }

    #[test]
    fn tsa_first_frame_identity_collapse() {
        // zero predictors, identity projections, one head/key: both
        // branches sample Q at p, mean is Q_p
        let c = 4;
        let mut p = DeformAttnParams::zeros(1, 1, c, 2 * c).unwrap();
        for i in 0..c {
            p.w_value.data_mut()[i * c + i] = 1.0;
            p.w_out.data_mut()[i * c + i] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_map(3, 4, c, &mut rng);
        let out =
            temporal_self_attention(&q, &q, &p, true, TsaCombine::Mean, 1).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for ch in 0..c {
                    assert!((out.get(y, x, ch) - q.get(y, x, ch)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tsa_duplicate_history_equals_first_frame() {
        let c = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DeformAttnParams::init(2, 3, c, 2 * c, &mut rng).unwrap();
        let q = rand_map(4, 4, c, &mut rng);
        let a = temporal_self_attention(&q, &q, &p, true, TsaCombine::Mean, 1).unwrap();
        let hist = q.clone();
        let b = temporal_self_attention(&q, &hist, &p, true, TsaCombine::Mean, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tsa_parallel_matches_serial() {
        let c = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DeformAttnParams::init(2, 4, c, c, &mut rng).unwrap();
        let q = rand_map(6, 5, c, &mut rng);
        let hist = rand_map(6, 5, c, &mut rng);
        let a = temporal_self_attention(&q, &hist, &p, false, TsaCombine::Mean, 1).unwrap();
        let b = temporal_self_attention(&q, &hist, &p, false, TsaCombine::Mean, 4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn tsa_sum_is_twice_mean_on_duplicate_maps() {
        let c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DeformAttnParams::init(1, 2, c, c, &mut rng).unwrap();
        let q = rand_map(3, 3, c, &mut rng);
        let mean = temporal_self_attention(&q, &q, &p, false, TsaCombine::Mean, 1).unwrap();
        let sum = temporal_self_attention(&q, &q, &p, false, TsaCombine::Sum, 1).unwrap();
        for (a, b) in mean.data().iter().zip(sum.data().iter()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    fn toy_hits_setup() -> (BevGridSpec, CameraRig, AnchorHeights) {
        use nalgebra::{Matrix3, Vector3};
        let grid = BevGridSpec::new(4, 4, 2.0).unwrap();
        // one forward camera at the origin
        let k = Matrix3::new(20.0, 0.0, 32.0, 0.0, 20.0, 24.0, 0.0, 0.0, 1.0);
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let v = crate::geometry::CameraView::from_krt(
            &k,
            &rotation,
            &Vector3::new(0.0, 0.0, 1.5),
            64,
            48,
            0,
        )
        .unwrap();
        let rig = CameraRig::new(vec![v]).unwrap();
        let anchors = AnchorHeights::new(vec![0.0]).unwrap();
        (grid, rig, anchors)
    }

    #[test]
    fn sca_points_single_hit_is_bilinear_sample() {
        // identity value/out projections, single head, one anchor: the
        // points-mode update is the bilinear sample at the projected point
        let (grid, rig, anchors) = toy_hits_setup();
        let hits = FrameHits::compute(&grid, &rig, &anchors, 8);
        let c = 3;
        let mut dp = DeformAttnParams::zeros(1, 1, c, c).unwrap();
        for i in 0..c {
            dp.w_value.data_mut()[i * c + i] = 1.0;
            dp.w_out.data_mut()[i * c + i] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_map(4, 4, c, &mut rng);
        let feats = vec![rand_map(6, 8, c, &mut rng)];
        let out = spatial_cross_attention(
            &q,
            &feats,
            &hits,
            &ScaParams::Deform(dp),
            ScaMode::Points,
            1,
        )
        .unwrap();
        let mut any_hit = false;
        for y in 0..4 {
            for x in 0..4 {
                let (recs, nv) = hits.at(y, x);
                if recs.is_empty() {
                    for ch in 0..c {
                        assert_eq!(out.get(y, x, ch), 0.0);
                    }
                    continue;
                }
                any_hit = true;
                assert_eq!(nv, 1);
                let mut want = vec![0.0; c];
                let mut acc = vec![0.0; c];
                for rec in recs {
                    bilinear_sample(&feats[0], rec.pixel.0, rec.pixel.1, &mut want);
                    for (a, b) in acc.iter_mut().zip(want.iter()) {
                        *a += b;
                    }
                }
                for ch in 0..c {
                    assert!((out.get(y, x, ch) - acc[ch]).abs() < 1e-12);
                }
            }
        }
        assert!(any_hit, "test rig must produce at least one hit");
    }

    #[test]
    fn layer_with_zero_output_projections_is_norm_chain() {
        let cfg = crate::encoder::params::tests::tiny_config(ScaMode::Local);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        let lp = &mut params.layers[0];
        lp.tsa.w_out.fill(0.0);
        if let ScaParams::Deform(d) = &mut lp.sca {
            d.w_out.fill(0.0);
        }
        lp.ffn.lin2.w.fill(0.0);
        lp.ffn.lin2.b.fill(0.0);

        let (grid, rig, anchors) = toy_hits_setup();
        let hits = FrameHits::compute(&grid, &rig, &anchors, 8);
        let q = rand_map(4, 4, cfg.channels, &mut rng);
        let hist = rand_map(4, 4, cfg.channels, &mut rng);
        let feats = vec![rand_map(6, 8, cfg.channels, &mut rng)];
        let cache = encoder_layer(&q, &hist, &feats, &hits, &params.layers[0], &cfg, 1).unwrap();

        let mut n1 = q.zeros_like();
        layer_norm(&q, &params.layers[0].norm1, &mut n1);
        let mut n2 = q.zeros_like();
        layer_norm(&n1, &params.layers[0].norm2, &mut n2);
        let mut n3 = q.zeros_like();
        layer_norm(&n2, &params.layers[0].norm3, &mut n3);
        assert_eq!(cache.x3.data(), n3.data());
    }

    #[test]
    fn layer_matches_hand_composed_sublayers() {
        let cfg = crate::encoder::params::tests::tiny_config(ScaMode::Local);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let lp = &params.layers[0];
        let (grid, rig, anchors) = toy_hits_setup();
        let hits = FrameHits::compute(&grid, &rig, &anchors, 8);
        let q = rand_map(4, 4, cfg.channels, &mut rng);
        let hist = rand_map(4, 4, cfg.channels, &mut rng);
        let feats = vec![rand_map(6, 8, cfg.channels, &mut rng)];

        let cache = encoder_layer(&q, &hist, &feats, &hits, lp, &cfg, 1).unwrap();

        let tsa = temporal_self_attention(
            &q,
            &hist,
            &lp.tsa,
            cfg.tsa_concat_offsets,
            cfg.tsa_combine,
            1,
        )
        .unwrap();
        let mut x1p = q.clone();
        x1p.add_assign(&tsa);
        let mut x1 = x1p.zeros_like();
        layer_norm(&x1p, &lp.norm1, &mut x1);
        let sca =
            spatial_cross_attention(&x1, &feats, &hits, &lp.sca, cfg.sca_mode, 1).unwrap();
        let mut x2p = x1.clone();
        x2p.add_assign(&sca);
        let mut x2 = x2p.zeros_like();
        layer_norm(&x2p, &lp.norm2, &mut x2);
        let mut f = x2.zeros_like();
        ffn_apply(&x2, &lp.ffn, &mut f);
        let mut x3p = x2.clone();
        x3p.add_assign(&f);
        let mut x3 = x3p.zeros_like();
        layer_norm(&x3p, &lp.norm3, &mut x3);

        assert_eq!(cache.x3.data(), x3.data());
    }
}
