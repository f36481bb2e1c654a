//! Parameter containers for the full model, with stable-order tensor
//! visitors used by the optimizer and the checkpoint format.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{xavier_fill, DeformAttnParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::EncoderConfig;

/// y = W x + b with W stored `[n_out, n_in]` row-major.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        AffineParams {
            w: Tensor::zeros(&[n_out, n_in]),
            b: Tensor::zeros(&[n_out]),
        }
    }

    pub fn init<R: Rng>(n_out: usize, n_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_out, n_in);
        xavier_fill(p.w.data_mut(), n_in, n_out, rng);
        p
    }

    pub fn n_out(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn n_in(&self) -> usize {
        self.w.dims()[1]
    }
}

/// Per-channel scale and shift of a LayerNorm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl LayerNormParams {
    pub fn identity(c: usize) -> Self {
        let mut scale = Tensor::zeros(&[c]);
        scale.fill(1.0);
        LayerNormParams { scale, shift: Tensor::zeros(&[c]) }
    }

    pub fn zeros(c: usize) -> Self {
        LayerNormParams {
            scale: Tensor::zeros(&[c]),
            shift: Tensor::zeros(&[c]),
        }
    }
}

/// Two affine maps around a pointwise SiLU.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub lin1: AffineParams,
    pub lin2: AffineParams,
}

impl FfnParams {
    pub fn init<R: Rng>(c: usize, hidden: usize, rng: &mut R) -> Self {
        FfnParams {
            lin1: AffineParams::init(hidden, c, rng),
            lin2: AffineParams::init(c, hidden, rng),
        }
    }

    pub fn zeros(c: usize, hidden: usize) -> Self {
        FfnParams {
            lin1: AffineParams::zeros(hidden, c),
            lin2: AffineParams::zeros(c, hidden),
        }
    }
}

/// Query/key/value/output projections of vanilla multi-head attention.
#[derive(Debug, Clone)]
pub struct GlobalAttnParams {
    pub n_heads: usize,
    pub channels: usize,
    pub w_q: AffineParams,
    pub w_k: AffineParams,
    pub w_v: AffineParams,
    pub w_o: AffineParams,
}

impl GlobalAttnParams {
    pub fn init<R: Rng>(n_heads: usize, channels: usize, rng: &mut R) -> Self {
        GlobalAttnParams {
            n_heads,
            channels,
            w_q: AffineParams::init(channels, channels, rng),
            w_k: AffineParams::init(channels, channels, rng),
            w_v: AffineParams::init(channels, channels, rng),
            w_o: AffineParams::init(channels, channels, rng),
        }
    }

    pub fn zeros(n_heads: usize, channels: usize) -> Self {
        GlobalAttnParams {
            n_heads,
            channels,
            w_q: AffineParams::zeros(channels, channels),
            w_k: AffineParams::zeros(channels, channels),
            w_v: AffineParams::zeros(channels, channels),
            w_o: AffineParams::zeros(channels, channels),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.n_heads
    }
}

/// Spatial cross-attention parameters for the configured mode. Local and
/// points modes share the deformable block (points mode simply never uses
/// the predictors).
#[derive(Debug, Clone)]
pub enum ScaParams {
    Deform(DeformAttnParams),
    Global(GlobalAttnParams),
}

/// One encoder layer: TSA, SCA, FFN, each with its post-residual norm.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub tsa: DeformAttnParams,
    pub norm1: LayerNormParams,
    pub sca: ScaParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub norm3: LayerNormParams,
}

/// 3x3 convolution weights `[c_out, c_in, 3, 3]` plus bias.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvParams {
            w: Tensor::zeros(&[c_out, c_in, 3, 3]),
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn init<R: Rng>(c_out: usize, c_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(c_out, c_in);
        xavier_fill(p.w.data_mut(), c_in * 9, c_out * 9, rng);
        p
    }

    pub fn c_out(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.w.dims()[1]
    }
}

/// Three stride-2 conv blocks: 3 -> c/4 -> c/2 -> c channels (floors of 4).
#[derive(Debug, Clone)]
pub struct FeaturizerParams {
    pub convs: Vec<ConvParams>,
}

impl FeaturizerParams {
    pub fn plan(channels: usize) -> [(usize, usize); 3] {
        let c1 = (channels / 4).max(4);
        let c2 = (channels / 2).max(4);
        [(c1, 3), (c2, c1), (channels, c2)]
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let convs = Self::plan(channels)
            .iter()
            .map(|&(c_out, c_in)| ConvParams::init(c_out, c_in, rng))
            .collect();
        FeaturizerParams { convs }
    }

    pub fn zeros(channels: usize) -> Self {
        let convs = Self::plan(channels)
            .iter()
            .map(|&(c_out, c_in)| ConvParams::zeros(c_out, c_in))
            .collect();
        FeaturizerParams { convs }
    }
}

/// Per-cell task heads: class logits, 2-logit center heatmap, center
/// offsets inside the cell, ego-frame velocity.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub seg: AffineParams,
    pub heatmap: AffineParams,
    pub offset: AffineParams,
    pub velocity: AffineParams,
}

impl HeadParams {
    pub fn init<R: Rng>(c: usize, n_classes: usize, rng: &mut R) -> Self {
        HeadParams {
            seg: AffineParams::init(n_classes, c, rng),
            heatmap: AffineParams::init(2, c, rng),
            offset: AffineParams::init(2, c, rng),
            velocity: AffineParams::init(2, c, rng),
        }
    }

    pub fn zeros(c: usize, n_classes: usize) -> Self {
        HeadParams {
            seg: AffineParams::zeros(n_classes, c),
            heatmap: AffineParams::zeros(2, c),
            offset: AffineParams::zeros(2, c),
            velocity: AffineParams::zeros(2, c),
        }
    }
}

/// Every learnable tensor of the model. The same struct doubles as a
/// gradient accumulator and as the optimizer's moment estimates.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// `[H, W, C]`
    pub bev_query_init: Tensor,
    /// `[H, W, C]`
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub featurizer: FeaturizerParams,
    pub heads: HeadParams,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = (config.grid.h, config.grid.w, config.channels);
        let embed = Normal::new(0.0, 0.02).expect("finite sd");
        let mut bev_query_init = Tensor::zeros(&[h, w, c]);
        for v in bev_query_init.data_mut() {
            *v = embed.sample(rng);
        }
        let mut pos_embed = Tensor::zeros(&[h, w, c]);
        for v in pos_embed.data_mut() {
            *v = embed.sample(rng);
        }
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let tsa = DeformAttnParams::init(
                config.n_heads,
                config.n_keys,
                c,
                config.tsa_query_dim(),
                rng,
            )?;
            let sca = match config.sca_mode {
                super::ScaMode::Global => {
                    ScaParams::Global(GlobalAttnParams::init(config.n_heads, c, rng))
                }
                _ => ScaParams::Deform(DeformAttnParams::init(
                    config.n_heads,
                    config.n_keys,
                    c,
                    c,
                    rng,
                )?),
            };
            layers.push(LayerParams {
                tsa,
                norm1: LayerNormParams::identity(c),
                sca,
                norm2: LayerNormParams::identity(c),
                ffn: FfnParams::init(c, config.ffn_hidden, rng),
                norm3: LayerNormParams::identity(c),
            });
        }
        Ok(ModelParams {
            bev_query_init,
            pos_embed,
            layers,
            featurizer: FeaturizerParams::init(c, rng),
            heads: HeadParams::init(c, config.n_classes, rng),
        })
    }

    /// Same shapes, all zeros: a gradient or moment container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        // LayerNorm identity scales must also zero out in a gradient
        // container; the blanket fill above already handled them.
        z
    }

    /// Stable-ordered view of every tensor, keyed by a checkpoint name.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("bev_query_init".into(), &self.bev_query_init),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{}.{}", i, name);
            push_deform(&mut out, &p("tsa"), &l.tsa);
            out.push((p("norm1.scale"), &l.norm1.scale));
            out.push((p("norm1.shift"), &l.norm1.shift));
            match &l.sca {
                ScaParams::Deform(d) => push_deform(&mut out, &p("sca"), d),
                ScaParams::Global(g) => {
                    out.push((p("sca.w_q.w"), &g.w_q.w));
                    out.push((p("sca.w_q.b"), &g.w_q.b));
                    out.push((p("sca.w_k.w"), &g.w_k.w));
                    out.push((p("sca.w_k.b"), &g.w_k.b));
                    out.push((p("sca.w_v.w"), &g.w_v.w));
                    out.push((p("sca.w_v.b"), &g.w_v.b));
                    out.push((p("sca.w_o.w"), &g.w_o.w));
                    out.push((p("sca.w_o.b"), &g.w_o.b));
                }
            }
            out.push((p("norm2.scale"), &l.norm2.scale));
            out.push((p("norm2.shift"), &l.norm2.shift));
            out.push((p("ffn.lin1.w"), &l.ffn.lin1.w));
            out.push((p("ffn.lin1.b"), &l.ffn.lin1.b));
            out.push((p("ffn.lin2.w"), &l.ffn.lin2.w));
            out.push((p("ffn.lin2.b"), &l.ffn.lin2.b));
            out.push((p("norm3.scale"), &l.norm3.scale));
            out.push((p("norm3.shift"), &l.norm3.shift));
        }
        for (i, conv) in self.featurizer.convs.iter().enumerate() {
            out.push((format!("featurizer.conv{}.w", i), &conv.w));
            out.push((format!("featurizer.conv{}.b", i), &conv.b));
        }
        for (name, a) in [
            ("seg", &self.heads.seg),
            ("heatmap", &self.heads.heatmap),
            ("offset", &self.heads.offset),
            ("velocity", &self.heads.velocity),
        ] {
            out.push((format!("heads.{}.w", name), &a.w));
            out.push((format!("heads.{}.b", name), &a.b));
        }
        out
    }

    /// Mutable twin of [`Self::tensors`], same names and order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("bev_query_init".into(), &mut self.bev_query_init),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |name: &str| format!("layer{}.{}", i, name);
            push_deform_mut(&mut out, &p("tsa"), &mut l.tsa);
            out.push((p("norm1.scale"), &mut l.norm1.scale));
            out.push((p("norm1.shift"), &mut l.norm1.shift));
            match &mut l.sca {
                ScaParams::Deform(d) => push_deform_mut(&mut out, &p("sca"), d),
                ScaParams::Global(g) => {
                    out.push((p("sca.w_q.w"), &mut g.w_q.w));
                    out.push((p("sca.w_q.b"), &mut g.w_q.b));
                    out.push((p("sca.w_k.w"), &mut g.w_k.w));
                    out.push((p("sca.w_k.b"), &mut g.w_k.b));
                    out.push((p("sca.w_v.w"), &mut g.w_v.w));
                    out.push((p("sca.w_v.b"), &mut g.w_v.b));
                    out.push((p("sca.w_o.w"), &mut g.w_o.w));
                    out.push((p("sca.w_o.b"), &mut g.w_o.b));
                }
            }
            out.push((p("norm2.scale"), &mut l.norm2.scale));
            out.push((p("norm2.shift"), &mut l.norm2.shift));
            out.push((p("ffn.lin1.w"), &mut l.ffn.lin1.w));
            out.push((p("ffn.lin1.b"), &mut l.ffn.lin1.b));
            out.push((p("ffn.lin2.w"), &mut l.ffn.lin2.w));
            out.push((p("ffn.lin2.b"), &mut l.ffn.lin2.b));
            out.push((p("norm3.scale"), &mut l.norm3.scale));
            out.push((p("norm3.shift"), &mut l.norm3.shift));
        }
        for (i, conv) in self.featurizer.convs.iter_mut().enumerate() {
            out.push((format!("featurizer.conv{}.w", i), &mut conv.w));
            out.push((format!("featurizer.conv{}.b", i), &mut conv.b));
        }
        for (name, a) in [
            ("seg", &mut self.heads.seg),
            ("heatmap", &mut self.heads.heatmap),
            ("offset", &mut self.heads.offset),
            ("velocity", &mut self.heads.velocity),
        ] {
            out.push((format!("heads.{}.w", name), &mut a.w));
            out.push((format!("heads.{}.b", name), &mut a.b));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_deform<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, d: &'a DeformAttnParams) {
    out.push((format!("{}.w_value", prefix), &d.w_value));
    out.push((format!("{}.w_out", prefix), &d.w_out));
    out.push((format!("{}.offset_w", prefix), &d.offset_w));
    out.push((format!("{}.offset_b", prefix), &d.offset_b));
    out.push((format!("{}.weight_w", prefix), &d.weight_w));
    out.push((format!("{}.weight_b", prefix), &d.weight_b));
}

fn push_deform_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    d: &'a mut DeformAttnParams,
) {
    out.push((format!("{}.w_value", prefix), &mut d.w_value));
    out.push((format!("{}.w_out", prefix), &mut d.w_out));
    out.push((format!("{}.offset_w", prefix), &mut d.offset_w));
    out.push((format!("{}.offset_b", prefix), &mut d.offset_b));
    out.push((format!("{}.weight_w", prefix), &mut d.weight_w));
    out.push((format!("{}.weight_b", prefix), &mut d.weight_b));
}

/// AdamW moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        AdamWState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

impl ModelParams {
    /// Accumulate `other` scaled by `alpha` into `self` (gradient merging).
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::ShapeMismatch("parameter trees differ".into()));
        }
        for ((na, ta), (nb, tb)) in mine.iter_mut().zip(theirs.iter()) {
            if na != nb || ta.dims() != tb.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} vs {} shape mismatch",
                    na, nb
                )));
            }
            for (a, b) in ta.data_mut().iter_mut().zip(tb.data().iter()) {
                *a += alpha * b;
            }
        }
        Ok(())
    }
}
