//! Training and evaluation: clip sampling over sequences, supervised
//! losses on the final frame, AdamW, a finite-difference gradient
//! harness, the step loop, and chronological/static evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    decode_centers, encode_frame, encode_frame_cached, frame_backward, head_centers,
    head_segmentation, heads_backward, AdamWState, BevState, CenterHeadOut, EncoderConfig,
    FrameCache, FrameHits, ModelParams,
};
use crate::geometry::CameraRig;
use crate::metrics::{greedy_match, segmentation_iou, visibility_bucket, BucketRecall, VIS_BUCKETS};
use crate::scene::{FrameData, GroundTruthBev, ObjClass, SequenceData};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Matching radius (meters) and prediction cap used for all recall
/// numbers, and the decode threshold used when logging and evaluating.
pub const MATCH_RADIUS: f64 = 2.0;
pub const MAX_PREDS: usize = 300;
pub const DECODE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown lr schedule '{}' (expected constant|cosine)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

/// Relative weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub velocity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, heatmap: 1.0, offset: 1.0, velocity: 1.0 }
    }
}

/// Knobs of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Clip length; 1 collapses to the static single-frame path.
    pub frames_per_sample: usize,
    /// How far back clip frames may reach, in seconds.
    pub window_seconds: f64,
    /// Sample past frames uniformly from the window instead of taking
    /// the most recent consecutive ones.
    pub random_frame_sampling: bool,
    /// Warp history into the current ego frame (ego-motion alignment).
    pub align_history: bool,
    /// TSA predictors read [query ; history] instead of the query alone.
    pub tsa_concat_offsets: bool,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            frames_per_sample: 4,
            window_seconds: 2.0,
            random_frame_sampling: true,
            align_history: true,
            tsa_concat_offsets: true,
            lr: 2e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            steps: 500,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.frames_per_sample) {
            return Err(Error::InvalidConfig(format!(
                "frames_per_sample {} outside 1..=5",
                self.frames_per_sample
            )));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::InvalidConfig("window_seconds must be > 0".into()));
        }
        // lr 0 is allowed so a no-op run stays expressible in tests
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig("lr must be finite and >= 0".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        let w = self.loss_weights;
        if [w.seg, w.heatmap, w.offset, w.velocity]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at a given step of `steps` total.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                if self.steps <= 1 {
                    return self.lr;
                }
                let frac = step as f64 / self.steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// The encoder configuration a training run actually uses: the run's
/// ablation flags override the base model flags. Parameters must be
/// initialized against this effective config.
pub fn effective_config(enc: &EncoderConfig, cfg: &TrainConfig) -> EncoderConfig {
    let mut e = enc.clone();
    e.tsa_concat_offsets = cfg.tsa_concat_offsets;
    e.align_history = cfg.align_history;
    e
}

/// Pick the clip frame indices ending at `t_idx`: the supervised frame
/// plus up to frames_per_sample−1 past frames from the trailing window,
/// ascending. Random mode samples them uniformly without replacement;
/// otherwise the most recent ones are taken.
pub fn sample_clip(
    seq: &SequenceData,
    t_idx: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if t_idx >= seq.frames.len() {
        return Err(Error::InvalidInput(format!(
            "frame index {} outside sequence of {}",
            t_idx,
            seq.frames.len()
        )));
    }
    let t = seq.frames[t_idx].t;
    let mut past: Vec<usize> = (0..t_idx)
        .filter(|&i| t - seq.frames[i].t <= cfg.window_seconds + 1e-9)
        .collect();
    let take = (cfg.frames_per_sample - 1).min(past.len());
    let mut clip: Vec<usize> = if cfg.random_frame_sampling {
        past.shuffle(rng);
        past.truncate(take);
        past
    } else {
        past.split_off(past.len() - take)
    };
    clip.sort_unstable();
    clip.push(t_idx);
    Ok(clip)
}

/// The four supervised terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub seg: f64,
    pub heatmap: f64,
    pub offset: f64,
    pub velocity: f64,
    pub total: f64,
}

/// Positive cells for the center heads: each ground-truth object claims
/// the cell its center rounds into, first object winning a collision.
fn positive_cells(gt: &GroundTruthBev) -> Vec<(usize, usize, [f64; 2], [f64; 2])> {
    let mut taken = vec![false; gt.h * gt.w];
    let mut pos = Vec::with_capacity(gt.objects.len());
    for obj in &gt.objects {
        let (cx, cy) = obj.center_cell;
        let x = cx.round() as usize;
        let y = cy.round() as usize;
        if taken[y * gt.w + x] {
            continue;
        }
        taken[y * gt.w + x] = true;
        pos.push((
            y,
            x,
            [cx - cx.round(), cy - cy.round()],
            [obj.velocity_ego.0, obj.velocity_ego.1],
        ));
    }
    pos
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits.iter()) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Loss values and their gradients with respect to the head outputs.
/// Segmentation and heatmap are per-cell softmax cross-entropies averaged
/// over the grid; offset and velocity are L1 terms averaged over positive
/// cells (zero when there are none).
pub fn loss_and_grads(
    seg: &FeatureMap,
    centers: &CenterHeadOut,
    gt: &GroundTruthBev,
    weights: &LossWeights,
) -> Result<(Losses, FeatureMap, CenterHeadOut)> {
    if seg.h != gt.h || seg.w != gt.w {
        return Err(Error::ShapeMismatch(
            "segmentation logits grid differs from ground truth".into(),
        ));
    }
    let n_cells = (gt.h * gt.w) as f64;
    let nc = seg.c;
    let mut d_seg = seg.zeros_like();
    let mut probs = vec![0.0; nc];
    let mut seg_loss = 0.0;
    for i in 0..gt.h * gt.w {
        let label = gt.classes[i] as usize;
        if label >= nc {
            return Err(Error::InvalidInput(format!(
                "ground-truth class {} outside {} segmentation logits",
                label, nc
            )));
        }
        let logits = &seg.data()[i * nc..(i + 1) * nc];
        softmax_into(logits, &mut probs);
        seg_loss -= probs[label].max(1e-300).ln();
        let dst = &mut d_seg.data_mut()[i * nc..(i + 1) * nc];
        for k in 0..nc {
            dst[k] = weights.seg * (probs[k] - if k == label { 1.0 } else { 0.0 }) / n_cells;
        }
    }
    seg_loss /= n_cells;

    let pos = positive_cells(gt);
    let mut is_pos = vec![false; gt.h * gt.w];
    for &(y, x, _, _) in &pos {
        is_pos[y * gt.w + x] = true;
    }
    let mut d_heat = centers.heat.zeros_like();
    let mut heat_loss = 0.0;
    let mut p2 = [0.0; 2];
    for i in 0..gt.h * gt.w {
        let label = usize::from(is_pos[i]);
        let logits = &centers.heat.data()[i * 2..(i + 1) * 2];
        softmax_into(logits, &mut p2);
        heat_loss -= p2[label].max(1e-300).ln();
        let dst = &mut d_heat.data_mut()[i * 2..(i + 1) * 2];
        for k in 0..2 {
            dst[k] = weights.heatmap * (p2[k] - if k == label { 1.0 } else { 0.0 }) / n_cells;
        }
    }
    heat_loss /= n_cells;

    let mut d_offset = centers.offset.zeros_like();
    let mut d_velocity = centers.velocity.zeros_like();
    let mut offset_loss = 0.0;
    let mut velocity_loss = 0.0;
    if !pos.is_empty() {
        let n = (pos.len() * 2) as f64;
        for &(y, x, off_t, vel_t) in &pos {
            for k in 0..2 {
                let od = centers.offset.at(y, x)[k] - off_t[k];
                offset_loss += od.abs();
                d_offset.at_mut(y, x)[k] = weights.offset * od.signum() * f64::from(od != 0.0) / n;
                let vd = centers.velocity.at(y, x)[k] - vel_t[k];
                velocity_loss += vd.abs();
                d_velocity.at_mut(y, x)[k] =
                    weights.velocity * vd.signum() * f64::from(vd != 0.0) / n;
            }
        }
        offset_loss /= n;
        velocity_loss /= n;
    }

    let total = weights.seg * seg_loss
        + weights.heatmap * heat_loss
        + weights.offset * offset_loss
        + weights.velocity * velocity_loss;
    Ok((
        Losses { seg: seg_loss, heatmap: heat_loss, offset: offset_loss, velocity: velocity_loss, total },
        d_seg,
        CenterHeadOut { heat: d_heat, offset: d_offset, velocity: d_velocity },
    ))
}

/// Everything produced by one supervised clip pass.
pub struct ClipOutput {
    pub state: BevState,
    pub seg: FeatureMap,
    pub centers: CenterHeadOut,
    pub losses: Losses,
    cache: FrameCache,
    d_seg: FeatureMap,
    d_centers: CenterHeadOut,
}

/// Encode a chronological clip, carrying the BEV recurrently, and
/// evaluate the loss on the final frame. Earlier frames are plain
/// forward passes: their BEV states enter the last frame as constants.
pub fn forward_clip(
    frames: &[&FrameData],
    params: &ModelParams,
    cfg: &EncoderConfig,
    hits: &FrameHits,
    weights: &LossWeights,
    threads: usize,
) -> Result<ClipOutput> {
    let (last, history) = frames
        .split_last()
        .ok_or_else(|| Error::InvalidInput("empty clip".into()))?;
    if frames.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::InvalidInput(
            "clip frames must be chronologically ordered".into(),
        ));
    }
    let mut prev: Option<BevState> = None;
    for f in history {
        let state = encode_frame(&f.images, prev.as_ref(), f.pose, f.t, hits, params, cfg, threads)?;
        prev = Some(state);
    }
    let (state, cache) = encode_frame_cached(
        &last.images,
        prev.as_ref(),
        last.pose,
        last.t,
        hits,
        params,
        cfg,
        threads,
    )?;
    let seg = head_segmentation(&state.features, &params.heads);
    let centers = head_centers(&state.features, &params.heads);
    let (losses, d_seg, d_centers) = loss_and_grads(&seg, &centers, &last.gt, weights)?;
    Ok(ClipOutput { state, seg, centers, losses, cache, d_seg, d_centers })
}

/// Accumulate d(total loss)/d(params) for a finished clip pass.
pub fn clip_backward(
    out: &ClipOutput,
    hits: &FrameHits,
    params: &ModelParams,
    cfg: &EncoderConfig,
    d_params: &mut ModelParams,
) -> Result<()> {
    let mut d_bev = out.state.features.zeros_like();
    heads_backward(
        &out.state.features,
        &params.heads,
        &out.d_seg,
        &out.d_centers,
        &mut d_params.heads,
        &mut d_bev,
    )?;
    frame_backward(&out.cache, hits, params, cfg, &d_bev, d_params)
}

/// One decoupled-weight-decay Adam update. Deterministic: plain loops in
/// tensor order.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamWState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let mut w = params.tensors_mut();
    let g = grads.tensors();
    let mut m = state.m.tensors_mut();
    let mut v = state.v.tensors_mut();
    if w.len() != g.len() {
        return Err(Error::ShapeMismatch(
            "gradient container shape differs from parameters".into(),
        ));
    }
    for i in 0..w.len() {
        if w[i].0 != g[i].0 || w[i].0 != m[i].0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor order mismatch at '{}'",
                w[i].0
            )));
        }
        let wd = w[i].1.data_mut();
        let gd = g[i].1.data();
        let md = m[i].1.data_mut();
        let vd = v[i].1.data_mut();
        if wd.len() != gd.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient size differs from parameter '{}'",
                w[i].0
            )));
        }
        for j in 0..wd.len() {
            md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
            vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            wd[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * wd[j]);
        }
    }
    Ok(())
}

/// Worst disagreement found by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Compare analytic gradients against central differences on a random
/// subsample of coordinates per tensor. `params` is perturbed in place
/// and restored. Relative error uses max(|fd|, |analytic|, 1e-6) as the
/// scale.
pub fn finite_diff_check<F: FnMut(&ModelParams) -> f64>(
    mut loss_fn: F,
    params: &mut ModelParams,
    grads: &ModelParams,
    eps: f64,
    max_per_tensor: usize,
    seed: u64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(max_per_tensor);
        idx.sort_unstable();
        for j in idx {
            let orig = params.tensors()[ti].1.data()[j];
            params.tensors_mut()[ti].1.data_mut()[j] = orig + eps;
            let lp = loss_fn(params);
            params.tensors_mut()[ti].1.data_mut()[j] = orig - eps;
            let lm = loss_fn(params);
            params.tensors_mut()[ti].1.data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads.tensors()[ti].1.data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
                report.worst_index = j;
            }
        }
    }
    report
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub seg_iou: f64,
    pub recall2m: f64,
    pub vel_mae: f64,
    pub lr: f64,
}

/// CSV header matching [`TrainLogRow`] serialization order.
pub const LOG_HEADER: &str = "step,loss,seg_iou,recall2m,vel_mae,lr";

impl TrainLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8}",
            self.step, self.loss, self.seg_iou, self.recall2m, self.vel_mae, self.lr
        )
    }
}

fn argmax_classes(seg: &FeatureMap) -> Vec<u8> {
    let nc = seg.c;
    let mut out = vec![0u8; seg.h * seg.w];
    for i in 0..out.len() {
        let logits = &seg.data()[i * nc..(i + 1) * nc];
        let mut best = 0;
        for k in 1..nc {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        out[i] = best as u8;
    }
    out
}

fn frame_quality(seg: &FeatureMap, centers: &CenterHeadOut, gt: &GroundTruthBev, grid: &crate::geometry::BevGridSpec) -> (f64, f64, f64) {
    let pred = argmax_classes(seg);
    let iou = segmentation_iou(&pred, &gt.classes, ObjClass::Car.id()).unwrap_or(0.0);
    let dets = decode_centers(centers, grid, DECODE_THRESHOLD, MAX_PREDS);
    let scored: Vec<((f64, f64), f64)> = dets.iter().map(|d| (d.center, d.score)).collect();
    let gt_centers: Vec<(f64, f64)> = gt.objects.iter().map(|o| o.center_ego).collect();
    let pairs = greedy_match(&scored, &gt_centers, MATCH_RADIUS, MAX_PREDS);
    let recall = if gt_centers.is_empty() {
        1.0
    } else {
        pairs.len() as f64 / gt_centers.len() as f64
    };
    let vel_mae = if pairs.is_empty() {
        0.0
    } else {
        pairs
            .iter()
            .map(|&(pi, gi)| {
                let pv = dets[pi].velocity;
                let gv = gt.objects[gi].velocity_ego;
                (pv.0 - gv.0).hypot(pv.1 - gv.1)
            })
            .sum::<f64>()
            / pairs.len() as f64
    };
    (iou, recall, vel_mae)
}

/// Per-step RNG: a fixed function of (seed, step) so a resumed run
/// replays the same sample choices as an unbroken one.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Run `cfg.steps` optimization steps starting from `start_step`
/// (nonzero when resuming). Each step samples one clip, backpropagates
/// the final-frame loss, and applies AdamW. Returns one log row per
/// step; quality columns are measured on the sampled frame before the
/// update.
pub fn train(
    data: &[SequenceData],
    rig: &CameraRig,
    params: &mut ModelParams,
    opt: &mut AdamWState,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    start_step: usize,
    threads: usize,
) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    let enc = effective_config(enc, cfg);
    enc.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training sequences".into()));
    }
    let hits = FrameHits::compute(&enc.grid, rig, &enc.anchors, enc.feat_stride);
    let mut log = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let si = rng.gen_range(0..data.len());
        let seq = &data[si];
        let min_t = (cfg.frames_per_sample - 1).min(seq.frames.len() - 1);
        let t_idx = rng.gen_range(min_t..seq.frames.len());
        let clip_idx = sample_clip(seq, t_idx, cfg, &mut rng)?;
        let frames: Vec<&FrameData> = clip_idx.iter().map(|&i| &seq.frames[i]).collect();
        let out = forward_clip(&frames, params, &enc, &hits, &cfg.loss_weights, threads)?;
        let mut grads = params.zeros_like();
        clip_backward(&out, &hits, params, &enc, &mut grads)?;
        let lr = cfg.lr_at(step);
        adamw_step(params, &grads, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)?;
        let gt = &seq.frames[t_idx].gt;
        let (iou, recall, vel_mae) = frame_quality(&out.seg, &out.centers, gt, &enc.grid);
        log.push(TrainLogRow {
            step,
            loss: out.losses.total,
            seg_iou: iou,
            recall2m: recall,
            vel_mae,
            lr,
        });
    }
    Ok(log)
}

/// Aggregated evaluation over full sequences.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Vehicle-class IoU pooled over all frames.
    pub seg_iou: f64,
    /// Matched fraction of all ground-truth centers.
    pub recall2m: f64,
    /// Mean velocity error over all matched pairs.
    pub vel_mae: f64,
    /// Recall split by the ground truth's visible fraction.
    pub buckets: [BucketRecall; 4],
    pub n_frames: usize,
    pub n_gts: usize,
}

/// Evaluate a model over whole sequences. Chronological mode carries the
/// BEV state across each full sequence (history enters every frame after
/// the first); static mode encodes every frame from scratch.
pub fn evaluate(
    data: &[SequenceData],
    rig: &CameraRig,
    params: &ModelParams,
    enc: &EncoderConfig,
    chronological: bool,
    threads: usize,
) -> Result<EvalReport> {
    enc.validate()?;
    let hits = FrameHits::compute(&enc.grid, rig, &enc.anchors, enc.feat_stride);
    let car = ObjClass::Car.id();
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut matched = 0usize;
    let mut n_gts = 0usize;
    let mut vel_sum = 0.0;
    let mut vel_n = 0usize;
    let mut bucket_matched = [0usize; 4];
    let mut bucket_total = [0usize; 4];
    let mut n_frames = 0usize;
    for seq in data {
        let mut prev: Option<BevState> = None;
        for f in &seq.frames {
            let state = encode_frame(
                &f.images,
                if chronological { prev.as_ref() } else { None },
                f.pose,
                f.t,
                &hits,
                params,
                enc,
                threads,
            )?;
            let seg = head_segmentation(&state.features, &params.heads);
            let centers = head_centers(&state.features, &params.heads);
            let pred = argmax_classes(&seg);
            for (p, g) in pred.iter().zip(f.gt.classes.iter()) {
                let pm = *p == car;
                let gm = *g == car;
                inter += usize::from(pm && gm);
                union += usize::from(pm || gm);
            }
            let dets = decode_centers(&centers, &enc.grid, DECODE_THRESHOLD, MAX_PREDS);
            let scored: Vec<((f64, f64), f64)> = dets.iter().map(|d| (d.center, d.score)).collect();
            let gt_centers: Vec<(f64, f64)> = f.gt.objects.iter().map(|o| o.center_ego).collect();
            let pairs = greedy_match(&scored, &gt_centers, MATCH_RADIUS, MAX_PREDS);
            matched += pairs.len();
            n_gts += gt_centers.len();
            for &(pi, gi) in &pairs {
                let pv = dets[pi].velocity;
                let gv = f.gt.objects[gi].velocity_ego;
                vel_sum += (pv.0 - gv.0).hypot(pv.1 - gv.1);
                vel_n += 1;
            }
            for b in 0..4 {
                let centers_b: Vec<(f64, f64)> = f
                    .gt
                    .objects
                    .iter()
                    .filter(|o| {
                        f.visibility
                            .iter()
                            .find(|v| v.id == o.id)
                            .map(|v| visibility_bucket(v.visible_fraction) == b)
                            .unwrap_or(false)
                    })
                    .map(|o| o.center_ego)
                    .collect();
                bucket_total[b] += centers_b.len();
                bucket_matched[b] +=
                    greedy_match(&scored, &centers_b, MATCH_RADIUS, MAX_PREDS).len();
            }
            n_frames += 1;
            if chronological {
                prev = Some(state);
            }
        }
    }
    let mut buckets = [BucketRecall { lo: 0.0, hi: 0.0, n_gts: 0, recall: 1.0 }; 4];
    for b in 0..4 {
        buckets[b] = BucketRecall {
            lo: VIS_BUCKETS[b].0,
            hi: VIS_BUCKETS[b].1,
            n_gts: bucket_total[b],
            recall: if bucket_total[b] == 0 {
                1.0
            } else {
                bucket_matched[b] as f64 / bucket_total[b] as f64
            },
        };
    }
    Ok(EvalReport {
        seg_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        recall2m: if n_gts == 0 { 1.0 } else { matched as f64 / n_gts as f64 },
        vel_mae: if vel_n == 0 { 0.0 } else { vel_sum / vel_n as f64 },
        buckets,
        n_frames,
        n_gts,
    })
}
