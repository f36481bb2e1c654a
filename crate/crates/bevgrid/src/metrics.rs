//! Evaluation metrics: the composite detection score, segmentation IoU,
//! center-distance recall with greedy matching, velocity MAE, and
//! visibility-bucketed recall.

use crate::{Error, Result};

/// The five true-positive error terms entering the composite score:
/// translation, scale, orientation, velocity, attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpErrors {
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

impl TpErrors {
    pub fn new(mate: f64, mase: f64, maoe: f64, mave: f64, maae: f64) -> Result<Self> {
        let e = TpErrors { mate, mase, maoe, mave, maae };
        if e.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "TP errors must be finite and nonnegative".into(),
            ));
        }
        Ok(e)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }
}

/// Composite detection score: (1/10)[5 mAP + Σ (1 − min(1, err))]. Each
/// error term is clamped at 1 so a bad term contributes nothing rather
/// than going negative.
pub fn nds_score(map: f64, errs: &TpErrors) -> f64 {
    let tp_sum: f64 = errs.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_sum) / 10.0
}

/// Per-class intersection over union of two class maps. The maps are
/// flattened cell-class arrays of equal length. Both masks empty means a
/// vacuously perfect 1.
pub fn segmentation_iou(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "class maps of {} and {} cells",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pm = p == class;
        let gm = g == class;
        if pm && gm {
            inter += 1;
        }
        if pm || gm {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// A scored center prediction: ((x, y) meters, score).
pub type ScoredCenter = ((f64, f64), f64);

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Greedy center matching: predictions in descending score (ties by
/// index), truncated to the `max_preds` strongest, each taking the
/// nearest still-unmatched ground truth within `radius` (ties by ground
/// truth index). Returns (pred index, gt index) pairs.
pub fn greedy_match(
    preds: &[ScoredCenter],
    gts: &[(f64, f64)],
    radius: f64,
    max_preds: usize,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.partial_cmp(&preds[a].1).unwrap().then(a.cmp(&b)));
    order.truncate(max_preds);
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for pi in order {
        let p = preds[pi].0;
        let mut best: Option<(f64, usize)> = None;
        for (gi, &g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let d = dist(p, g);
            if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            pairs.push((pi, gi));
        }
    }
    pairs
}

/// Fraction of ground-truth centers matched by [`greedy_match`]. No
/// ground truth to find means a vacuous 1.
pub fn recall_at_distance(
    preds: &[ScoredCenter],
    gts: &[(f64, f64)],
    radius: f64,
    max_preds: usize,
) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    greedy_match(preds, gts, radius, max_preds).len() as f64 / gts.len() as f64
}

/// Mean Euclidean norm of (predicted − true) velocity over matched pairs;
/// 0 when nothing was matched.
pub fn velocity_mae(pairs: &[((f64, f64), (f64, f64))]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(p, g)| dist(*p, *g))
        .sum();
    sum / pairs.len() as f64
}

/// Visibility bucket edges as fractions: three left-closed/right-open
/// buckets and a final closed one.
pub const VIS_BUCKETS: [(f64, f64); 4] = [(0.0, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0)];

/// Index of the bucket holding a visible fraction.
pub fn visibility_bucket(fraction: f64) -> usize {
    if fraction < 0.4 {
        0
    } else if fraction < 0.6 {
        1
    } else if fraction < 0.8 {
        2
    } else {
        3
    }
}

/// Recall for one visibility bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketRecall {
    pub lo: f64,
    pub hi: f64,
    pub n_gts: usize,
    pub recall: f64,
}

/// Center recall per visibility bucket: ground truths are partitioned by
/// their visible fraction, and every bucket's recall is computed against
/// the full prediction list.
pub fn recall_by_visibility(
    preds: &[ScoredCenter],
    gts: &[((f64, f64), f64)],
    radius: f64,
    max_preds: usize,
) -> [BucketRecall; 4] {
    let mut out = [BucketRecall {
        lo: 0.0,
        hi: 0.0,
        n_gts: 0,
        recall: 1.0,
    }; 4];
    for (b, &(lo, hi)) in VIS_BUCKETS.iter().enumerate() {
        let centers: Vec<(f64, f64)> = gts
            .iter()
            .filter(|(_, f)| visibility_bucket(*f) == b)
            .map(|(c, _)| *c)
            .collect();
        out[b] = BucketRecall {
            lo,
            hi,
            n_gts: centers.len(),
            recall: recall_at_distance(preds, &centers, radius, max_preds),
        };
    }
    out
}
