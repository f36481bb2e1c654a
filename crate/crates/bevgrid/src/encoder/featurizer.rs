//! Tiny convolutional image featurizer: three 3x3 stride-2 same-padded
//! conv blocks with SiLU, taking an h x w x 3 image to h/8 x w/8 x C.

use crate::tensor::FeatureMap;
use crate::{Error, Result};

use super::params::{ConvParams, FeaturizerParams};

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// One 3x3 stride-2 convolution with padding 1; output is h/2 x w/2.
pub fn conv3x3_s2(input: &FeatureMap, conv: &ConvParams, out: &mut FeatureMap) -> Result<()> {
    let (c_in, c_out) = (conv.c_in(), conv.c_out());
    if input.c != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            c_in, input.c
        )));
    }
    if input.h % 2 != 0 || input.w % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "conv input {}x{} must have even sides",
            input.h, input.w
        )));
    }
    let (ho, wo) = (input.h / 2, input.w / 2);
    if out.h != ho || out.w != wo || out.c != c_out {
        return Err(Error::ShapeMismatch("conv output shape".into()));
    }
    let w = conv.w.data();
    let b = conv.b.data();
    for yo in 0..ho {
        for xo in 0..wo {
            let dst = out.at_mut(yo, xo);
            dst.copy_from_slice(&b[..c_out]);
            for ky in 0..3usize {
                let yi = (2 * yo + ky) as i64 - 1;
                if yi < 0 || yi >= input.h as i64 {
                    continue;
                }
                for kx in 0..3usize {
                    let xi = (2 * xo + kx) as i64 - 1;
                    if xi < 0 || xi >= input.w as i64 {
                        continue;
                    }
                    let src = input.at(yi as usize, xi as usize);
                    for co in 0..c_out {
                        let wrow = &w[((co * c_in) * 9)..];
                        let mut acc = 0.0;
                        for (ci, &s) in src.iter().enumerate() {
                            acc += wrow[ci * 9 + ky * 3 + kx] * s;
                        }
                        dst[co] += acc;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Gradients of [`conv3x3_s2`]: accumulates into `d_conv` and, when given,
/// `d_input`.
pub fn conv3x3_s2_backward(
    input: &FeatureMap,
    conv: &ConvParams,
    d_out: &FeatureMap,
    d_conv: &mut ConvParams,
    mut d_input: Option<&mut FeatureMap>,
) {
    let c_in = conv.c_in();
    let (ho, wo) = (input.h / 2, input.w / 2);
    let w = conv.w.data();
    for yo in 0..ho {
        for xo in 0..wo {
            let g = d_out.at(yo, xo);
            for (co, &gv) in g.iter().enumerate() {
                d_conv.b.data_mut()[co] += gv;
            }
            for ky in 0..3usize {
                let yi = (2 * yo + ky) as i64 - 1;
                if yi < 0 || yi >= input.h as i64 {
                    continue;
                }
                for kx in 0..3usize {
                    let xi = (2 * xo + kx) as i64 - 1;
                    if xi < 0 || xi >= input.w as i64 {
                        continue;
                    }
                    let src = input.at(yi as usize, xi as usize).to_vec();
                    let dw = d_conv.w.data_mut();
                    for (co, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            dw[(co * c_in + ci) * 9 + ky * 3 + kx] += gv * src[ci];
                        }
                    }
                    if let Some(di) = d_input.as_deref_mut() {
                        let dst = di.at_mut(yi as usize, xi as usize);
                        for (co, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                dst[ci] += gv * w[(co * c_in + ci) * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Intermediates needed to backprop one featurize call: per stage, the
/// stage input and the pre-activation conv output.
#[derive(Debug, Clone)]
pub struct FeaturizerCache {
    stages: Vec<(FeatureMap, FeatureMap)>,
}

/// Forward featurizer: conv, SiLU, three times.
pub fn featurize(image: &FeatureMap, params: &FeaturizerParams) -> Result<FeatureMap> {
    Ok(featurize_cached(image, params)?.0)
}

pub fn featurize_cached(
    image: &FeatureMap,
    params: &FeaturizerParams,
) -> Result<(FeatureMap, FeaturizerCache)> {
    if image.h % 8 != 0 || image.w % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} not divisible by the stride 8",
            image.h, image.w
        )));
    }
    let mut cache = FeaturizerCache { stages: Vec::with_capacity(3) };
    let mut cur = image.clone();
    for conv in &params.convs {
        let mut pre = FeatureMap::zeros(cur.h / 2, cur.w / 2, conv.c_out());
        conv3x3_s2(&cur, conv, &mut pre)?;
        let mut post = pre.clone();
        for v in post.data_mut() {
            *v = silu(*v);
        }
        cache.stages.push((cur, pre));
        cur = post;
    }
    Ok((cur, cache))
}

/// Backprop through the featurizer; returns the image gradient (rarely
/// needed, but it closes the chain for full-model checks).
pub fn featurize_backward(
    d_out: &FeatureMap,
    cache: &FeaturizerCache,
    params: &FeaturizerParams,
    d_params: &mut FeaturizerParams,
) -> FeatureMap {
    let mut grad = d_out.clone();
    for i in (0..params.convs.len()).rev() {
        let (input, pre) = &cache.stages[i];
        let mut d_pre = grad.clone();
        for (g, z) in d_pre.data_mut().iter_mut().zip(pre.data().iter()) {
            *g *= silu_grad(*z);
        }
        let mut d_input = input.zeros_like();
        conv3x3_s2_backward(input, &params.convs[i], &d_pre, &mut d_params.convs[i], Some(&mut d_input));
        grad = d_input;
    }
    grad
}
