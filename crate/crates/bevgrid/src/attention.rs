//! Deformable attention kernel with analytic gradients.
//!
//! One query attends to a feature map by sampling `n_keys` offset locations
//! around a reference point per head, weighting the bilinearly interpolated
//! values with predicted convex weights, and projecting through per-head
//! value/output matrices:
//!
//!   out = Σ_i W_i Σ_j A_ij · W'_i · x(ref + Δp_ij)
//!
//! Offsets Δp and weight logits are affine functions of a predictor input
//! (the query itself, or the query concatenated with history features).
//! Everything is differentiated by hand; `deform_attn_grad` returns the
//! gradient of an upstream-weighted output with respect to all parameters,
//! the feature map, and the predictor input.

use rand::Rng;

use crate::tensor::{FeatureMap, Tensor};
use crate::{Error, Result};

/// Parameters of one deformable-attention layer.
///
/// `w_value[i]` maps a sampled C-vector to the per-head subspace
/// (head_dim = C / n_heads); `w_out[i]` maps it back to C. The offset and
/// weight predictors are affine in the predictor input of width `query_dim`.
#[derive(Debug, Clone)]
pub struct DeformAttnParams {
    pub n_heads: usize,
    pub n_keys: usize,
    pub channels: usize,
    pub query_dim: usize,
    /// `[n_heads, head_dim, channels]`
    pub w_value: Tensor,
    /// `[n_heads, channels, head_dim]`
    pub w_out: Tensor,
    /// `[n_heads * n_keys * 2, query_dim]`
    pub offset_w: Tensor,
    /// `[n_heads * n_keys * 2]`
    pub offset_b: Tensor,
    /// `[n_heads * n_keys, query_dim]`
    pub weight_w: Tensor,
    /// `[n_heads * n_keys]`
    pub weight_b: Tensor,
}

impl DeformAttnParams {
    pub fn head_dim(&self) -> usize {
        self.channels / self.n_heads
    }

    /// Zero-initialized parameter block of the given geometry.
    pub fn zeros(n_heads: usize, n_keys: usize, channels: usize, query_dim: usize) -> Result<Self> {
        if channels % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} not divisible by heads {}",
                channels, n_heads
            )));
        }
        if n_heads == 0 || n_keys == 0 {
            return Err(Error::InvalidConfig("need at least one head and key".into()));
        }
        let head_dim = channels / n_heads;
        Ok(DeformAttnParams {
            n_heads,
            n_keys,
            channels,
            query_dim,
            w_value: Tensor::zeros(&[n_heads, head_dim, channels]),
            w_out: Tensor::zeros(&[n_heads, channels, head_dim]),
            offset_w: Tensor::zeros(&[n_heads * n_keys * 2, query_dim]),
            offset_b: Tensor::zeros(&[n_heads * n_keys * 2]),
            weight_w: Tensor::zeros(&[n_heads * n_keys, query_dim]),
            weight_b: Tensor::zeros(&[n_heads * n_keys]),
        })
    }

    /// Deformable-attention style initialization: value/output projections
    /// Xavier-uniform, offset predictor zero with biases on a unit ring that
    /// rotates across heads and keys, weight predictor zero (uniform
    /// attention at start).
    pub fn init<R: Rng>(
        n_heads: usize,
        n_keys: usize,
        channels: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(n_heads, n_keys, channels, query_dim)?;
        let head_dim = p.head_dim();
        xavier_fill(p.w_value.data_mut(), channels, head_dim, rng);
        xavier_fill(p.w_out.data_mut(), head_dim, channels, rng);
        let total = n_heads * n_keys;
        for i in 0..n_heads {
            for j in 0..n_keys {
                let k = i * n_keys + j;
                let theta = 2.0 * std::f64::consts::PI * (k as f64) / (total as f64);
                p.offset_b.data_mut()[2 * k] = theta.cos();
                p.offset_b.data_mut()[2 * k + 1] = theta.sin();
            }
        }
        Ok(p)
    }

    /// Gradient container of matching shapes.
    pub fn zeros_like(&self) -> Self {
        DeformAttnParams {
            n_heads: self.n_heads,
            n_keys: self.n_keys,
            channels: self.channels,
            query_dim: self.query_dim,
            w_value: self.w_value.zeros_like(),
            w_out: self.w_out.zeros_like(),
            offset_w: self.offset_w.zeros_like(),
            offset_b: self.offset_b.zeros_like(),
            weight_w: self.weight_w.zeros_like(),
            weight_b: self.weight_b.zeros_like(),
        }
    }
}

pub(crate) fn xavier_fill<R: Rng>(data: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in data.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Bilinear interpolation of the four cells around fractional `(u, v)`
/// (u along width, v along height). Cells outside `[0, w-1] x [0, h-1]`
/// contribute zero.
pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), map.c);
    out.iter_mut().for_each(|o| *o = 0.0);
    if !u.is_finite() || !v.is_finite() {
        return;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let a = u - x0;
    let b = v - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let corners = [
        (x0, y0, (1.0 - a) * (1.0 - b)),
        (x0 + 1, y0, a * (1.0 - b)),
        (x0, y0 + 1, (1.0 - a) * b),
        (x0 + 1, y0 + 1, a * b),
    ];
    for (x, y, wgt) in corners {
        if wgt == 0.0 || x < 0 || y < 0 || x >= map.w as i64 || y >= map.h as i64 {
            continue;
        }
        let f = map.at(y as usize, x as usize);
        for (o, fv) in out.iter_mut().zip(f.iter()) {
            *o += wgt * fv;
        }
    }
}

/// Scatter the upstream channel gradient `d_out` back into the map and
/// return the positional gradient `(d/du, d/dv)` of `<d_out, sample>`.
pub fn bilinear_sample_backward(
    map: &FeatureMap,
    u: f64,
    v: f64,
    d_out: &[f64],
    d_map: &mut FeatureMap,
) -> (f64, f64) {
    if !u.is_finite() || !v.is_finite() {
        return (0.0, 0.0);
    }
    let x0f = u.floor();
    let y0f = v.floor();
    let a = u - x0f;
    let b = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;

    // Fetch the four corner vectors (zero outside).
    let fetch = |x: i64, y: i64| -> Option<&[f64]> {
        if x < 0 || y < 0 || x >= map.w as i64 || y >= map.h as i64 {
            None
        } else {
            Some(map.at(y as usize, x as usize))
        }
    };
    let dot = |f: Option<&[f64]>| -> f64 {
        f.map(|f| f.iter().zip(d_out.iter()).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0)
    };
    let g00 = dot(fetch(x0, y0));
    let g10 = dot(fetch(x0 + 1, y0));
    let g01 = dot(fetch(x0, y0 + 1));
    let g11 = dot(fetch(x0 + 1, y0 + 1));

    let du = (1.0 - b) * (g10 - g00) + b * (g11 - g01);
    let dv = (1.0 - a) * (g01 - g00) + a * (g11 - g10);

    let corners = [
        (x0, y0, (1.0 - a) * (1.0 - b)),
        (x0 + 1, y0, a * (1.0 - b)),
        (x0, y0 + 1, (1.0 - a) * b),
        (x0 + 1, y0 + 1, a * b),
    ];
    for (x, y, wgt) in corners {
        if wgt == 0.0 || x < 0 || y < 0 || x >= map.w as i64 || y >= map.h as i64 {
            continue;
        }
        let dst = d_map.at_mut(y as usize, x as usize);
        for (d, g) in dst.iter_mut().zip(d_out.iter()) {
            *d += wgt * g;
        }
    }
    (du, dv)
}

/// Softmax per head over the key axis: logits `[n_heads * n_keys]` to
/// weights on the probability simplex of each head.
pub fn normalize_weights(logits: &[f64], n_heads: usize, n_keys: usize, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), n_heads * n_keys);
    for h in 0..n_heads {
        let seg = &logits[h * n_keys..(h + 1) * n_keys];
        let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, &l) in seg.iter().enumerate() {
            let e = (l - m).exp();
            out[h * n_keys + k] = e;
            z += e;
        }
        for k in 0..n_keys {
            out[h * n_keys + k] /= z;
        }
    }
}

/// Scratch buffers reused across per-query kernel invocations.
#[derive(Debug, Default, Clone)]
pub struct AttnScratch {
    offsets: Vec<f64>,
    logits: Vec<f64>,
    weights: Vec<f64>,
    samples: Vec<f64>,
    head_acc: Vec<f64>,
    // backward-only
    d_offsets: Vec<f64>,
    d_logits: Vec<f64>,
    d_weights: Vec<f64>,
    d_sample: Vec<f64>,
    d_head: Vec<f64>,
}

impl AttnScratch {
    fn prepare(&mut self, p: &DeformAttnParams) {
        let nk2 = p.n_heads * p.n_keys * 2;
        let nk = p.n_heads * p.n_keys;
        self.offsets.resize(nk2, 0.0);
        self.logits.resize(nk, 0.0);
        self.weights.resize(nk, 0.0);
        self.samples.resize(nk * p.channels, 0.0);
        self.head_acc.resize(p.head_dim(), 0.0);
        self.d_offsets.resize(nk2, 0.0);
        self.d_logits.resize(nk, 0.0);
        self.d_weights.resize(nk, 0.0);
        self.d_sample.resize(p.channels, 0.0);
        self.d_head.resize(p.head_dim(), 0.0);
    }
}

fn predict(p: &DeformAttnParams, query_input: &[f64], s: &mut AttnScratch) {
    crate::tensor::affine_apply(&p.offset_w, &p.offset_b, query_input, &mut s.offsets);
    crate::tensor::affine_apply(&p.weight_w, &p.weight_b, query_input, &mut s.logits);
    let (nh, nk) = (p.n_heads, p.n_keys);
    let logits = s.logits.clone();
    normalize_weights(&logits, nh, nk, &mut s.weights);
}

/// Forward deformable attention for one query. `query_input` feeds the
/// offset/weight predictors (width `params.query_dim`); `(ref_u, ref_v)` is
/// the reference point in map units. Adds nothing to `out`; overwrites it.
pub fn deform_attn(
    query_input: &[f64],
    ref_u: f64,
    ref_v: f64,
    map: &FeatureMap,
    params: &DeformAttnParams,
    scratch: &mut AttnScratch,
    out: &mut [f64],
) -> Result<()> {
    let c = params.channels;
    if query_input.len() != params.query_dim {
        return Err(Error::ShapeMismatch(format!(
            "predictor input has {} values, params expect {}",
            query_input.len(),
            params.query_dim
        )));
    }
    if map.c != c || out.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "map channels {} / out {} vs params channels {}",
            map.c,
            out.len(),
            c
        )));
    }
    scratch.prepare(params);
    predict(params, query_input, scratch);

    out.iter_mut().for_each(|o| *o = 0.0);
    let hd = params.head_dim();
    for i in 0..params.n_heads {
        let w_val = params.w_value.slab3(i); // [hd, c]
        let w_out = params.w_out.slab3(i); // [c, hd]
        scratch.head_acc.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..params.n_keys {
            let k = i * params.n_keys + j;
            let du = scratch.offsets[2 * k];
            let dv = scratch.offsets[2 * k + 1];
            let sample = &mut scratch.samples[k * c..(k + 1) * c];
            bilinear_sample(map, ref_u + du, ref_v + dv, sample);
            let a = scratch.weights[k];
            for d in 0..hd {
                let row = &w_val[d * c..(d + 1) * c];
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += row[ch] * sample[ch];
                }
                scratch.head_acc[d] += a * acc;
            }
        }
        for ch in 0..c {
            let row = &w_out[ch * hd..(ch + 1) * hd];
            let mut acc = 0.0;
            for d in 0..hd {
                acc += row[d] * scratch.head_acc[d];
            }
            out[ch] += acc;
        }
    }
    Ok(())
}

/// Gradient sinks for one deformable-attention call. `params` receives
/// accumulated parameter gradients; `map` and `query_input` receive input
/// gradients. Passing `None` for `map` drops the feature-map path (used when
/// the map is a constant, e.g. history BEV features).
pub struct DeformAttnGradSinks<'a> {
    pub params: &'a mut DeformAttnParams,
    pub map: Option<&'a mut FeatureMap>,
    pub query_input: &'a mut [f64],
}

/// Backward pass of [`deform_attn`]: accumulates the gradient of
/// `<upstream, out>` into the sinks. Recomputes the forward internals, so it
/// needs the same inputs as the forward call.
pub fn deform_attn_grad(
    query_input: &[f64],
    ref_u: f64,
    ref_v: f64,
    map: &FeatureMap,
    params: &DeformAttnParams,
    upstream: &[f64],
    scratch: &mut AttnScratch,
    sinks: &mut DeformAttnGradSinks,
) -> Result<()> {
    let c = params.channels;
    if upstream.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} values, expected {}",
            upstream.len(),
            c
        )));
    }
    scratch.prepare(params);
    predict(params, query_input, scratch);

    let hd = params.head_dim();
    let nk = params.n_keys;
    scratch.d_offsets.iter_mut().for_each(|x| *x = 0.0);
    scratch.d_logits.iter_mut().for_each(|x| *x = 0.0);
    scratch.d_weights.iter_mut().for_each(|x| *x = 0.0);

    for i in 0..params.n_heads {
        let w_val = params.w_value.slab3(i);
        let w_out = params.w_out.slab3(i);

        // Recompute samples and the per-head value accumulation v_i.
        scratch.head_acc.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..nk {
            let k = i * nk + j;
            let du = scratch.offsets[2 * k];
            let dv = scratch.offsets[2 * k + 1];
            let sample = &mut scratch.samples[k * c..(k + 1) * c];
            bilinear_sample(map, ref_u + du, ref_v + dv, sample);
            let a = scratch.weights[k];
            for d in 0..hd {
                let row = &w_val[d * c..(d + 1) * c];
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += row[ch] * sample[ch];
                }
                scratch.head_acc[d] += a * acc;
            }
        }

        // d v_i = W_iᵀ upstream ; dW_i += upstream ⊗ v_i
        let d_w_out = sinks.params.w_out.slab3_mut(i);
        for d in 0..hd {
            scratch.d_head[d] = 0.0;
        }
        for ch in 0..c {
            let g = upstream[ch];
            let row = &w_out[ch * hd..(ch + 1) * hd];
            let d_row = &mut d_w_out[ch * hd..(ch + 1) * hd];
            for d in 0..hd {
                scratch.d_head[d] += row[d] * g;
                d_row[d] += g * scratch.head_acc[d];
            }
        }

        for j in 0..nk {
            let k = i * nk + j;
            let a = scratch.weights[k];
            let sample = scratch.samples[k * c..(k + 1) * c].to_vec();

            // u_ij = W'_i s_ij ; dA_ij = <d v_i, u_ij> ; d u_ij = A_ij d v_i
            let mut d_a = 0.0;
            scratch.d_sample.iter_mut().for_each(|x| *x = 0.0);
            let d_w_val = sinks.params.w_value.slab3_mut(i);
            for d in 0..hd {
                let row = &w_val[d * c..(d + 1) * c];
                let mut u_ijd = 0.0;
                for ch in 0..c {
                    u_ijd += row[ch] * sample[ch];
                }
                let g = scratch.d_head[d];
                d_a += g * u_ijd;
                let du_d = a * g;
                let d_row = &mut d_w_val[d * c..(d + 1) * c];
                for ch in 0..c {
                    d_row[ch] += du_d * sample[ch];
                    scratch.d_sample[ch] += row[ch] * du_d;
                }
            }
            scratch.d_weights[k] += d_a;

            // Positional gradient through bilinear sampling; map gradient
            // scatters only if the map is a differentiable input.
            let du = scratch.offsets[2 * k];
            let dv = scratch.offsets[2 * k + 1];
            let (gu, gv) = match sinks.map.as_deref_mut() {
                Some(d_map) => bilinear_sample_backward(
                    map,
                    ref_u + du,
                    ref_v + dv,
                    &scratch.d_sample,
                    d_map,
                ),
                None => positional_grad_only(map, ref_u + du, ref_v + dv, &scratch.d_sample),
            };
            scratch.d_offsets[2 * k] += gu;
            scratch.d_offsets[2 * k + 1] += gv;
        }
    }

    // Softmax backward per head: dlogit_k = A_k (dA_k - Σ_m A_m dA_m).
    for i in 0..params.n_heads {
        let seg = i * nk..(i + 1) * nk;
        let dot: f64 = scratch.weights[seg.clone()]
            .iter()
            .zip(scratch.d_weights[seg.clone()].iter())
            .map(|(a, d)| a * d)
            .sum();
        for k in seg {
            scratch.d_logits[k] = scratch.weights[k] * (scratch.d_weights[k] - dot);
        }
    }

    // Predictor backward into parameter and query-input sinks.
    let d_off = scratch.d_offsets.clone();
    let d_log = scratch.d_logits.clone();
    crate::tensor::affine_backward(
        &params.offset_w,
        query_input,
        &d_off,
        &mut sinks.params.offset_w,
        &mut sinks.params.offset_b,
        sinks.query_input,
    );
    crate::tensor::affine_backward(
        &params.weight_w,
        query_input,
        &d_log,
        &mut sinks.params.weight_w,
        &mut sinks.params.weight_b,
        sinks.query_input,
    );
    Ok(())
}

/// Positional bilinear gradient without scattering into a map sink.
fn positional_grad_only(map: &FeatureMap, u: f64, v: f64, d_out: &[f64]) -> (f64, f64) {
    if !u.is_finite() || !v.is_finite() {
        return (0.0, 0.0);
    }
    let x0f = u.floor();
    let y0f = v.floor();
    let a = u - x0f;
    let b = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let fetch = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= map.w as i64 || y >= map.h as i64 {
            0.0
        } else {
            map.at(y as usize, x as usize)
                .iter()
                .zip(d_out.iter())
                .map(|(f, g)| f * g)
                .sum()
        }
    };
    let g00 = fetch(x0, y0);
    let g10 = fetch(x0 + 1, y0);
    let g01 = fetch(x0, y0 + 1);
    let g11 = fetch(x0 + 1, y0 + 1);
    (
        (1.0 - b) * (g10 - g00) + b * (g11 - g01),
        (1.0 - a) * (g01 - g00) + a * (g11 - g10),
    )
}
