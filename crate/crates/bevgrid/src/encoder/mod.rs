//! The spatiotemporal BEV encoder: grid queries with positional embedding,
//! temporal self-attention over {current queries, aligned history},
//! spatial cross-attention over hit-view image features, feed-forward and
//! layer norm, stacked into a recurrent per-frame state machine, plus the
//! image featurizer and the task heads.

pub mod featurizer;
pub mod frame;
pub mod heads;
pub mod layer;
pub mod params;

pub use frame::{encode_frame, encode_frame_cached, frame_backward, FrameCache, FrameHits};
pub use heads::{
    decode_centers, head_centers, head_segmentation, heads_backward, CenterHeadOut, Detection,
};
pub use params::{AdamWState, ModelParams};

use crate::geometry::{AnchorHeights, BevGridSpec, EgoPose};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

/// Spatial cross-attention flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaMode {
    /// Deformable attention around projected reference points.
    Local,
    /// Sampling restricted to the reference points themselves: offsets
    /// pinned to zero, uniform weights.
    Points,
    /// Vanilla multi-head attention over the flattened features of the hit
    /// views only.
    Global,
}

impl ScaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(ScaMode::Local),
            "points" => Ok(ScaMode::Points),
            "global" => Ok(ScaMode::Global),
            other => Err(Error::InvalidConfig(format!("unknown sca_mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScaMode::Local => "local",
            ScaMode::Points => "points",
            ScaMode::Global => "global",
        }
    }
}

/// How temporal self-attention combines its two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsaCombine {
    /// Arithmetic mean: output scale matches the single-branch case, so the
    /// first-frame degeneration changes nothing downstream.
    Mean,
    /// Literal two-branch sum.
    Sum,
}

impl TsaCombine {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TsaCombine::Mean),
            "sum" => Ok(TsaCombine::Sum),
            other => Err(Error::InvalidConfig(format!("unknown tsa_combine '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TsaCombine::Mean => "mean",
            TsaCombine::Sum => "sum",
        }
    }
}

/// Static shape and behavior of the encoder.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub grid: BevGridSpec,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    pub anchors: AnchorHeights,
    pub sca_mode: ScaMode,
    /// Offset/weight predictors read [Q_p ; hist_p] when set, Q_p alone
    /// otherwise.
    pub tsa_concat_offsets: bool,
    pub tsa_combine: TsaCombine,
    /// Warp the previous BEV into the current ego frame before TSA reads
    /// it. Off carries the raw grid, losing ego-motion compensation.
    pub align_history: bool,
    pub ffn_hidden: usize,
    pub n_classes: usize,
    /// Featurizer downsampling factor (three stride-2 convs).
    pub feat_stride: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.channels == 0 || self.channels % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be a positive multiple of n_heads {}",
                self.channels, self.n_heads
            )));
        }
        if self.n_keys == 0 {
            return Err(Error::InvalidConfig("n_keys must be >= 1".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("ffn_hidden must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.feat_stride != 8 {
            return Err(Error::InvalidConfig(
                "featurizer is three stride-2 convs; feat_stride must be 8".into(),
            ));
        }
        if self.anchors.is_empty() {
            return Err(Error::InvalidConfig("anchors must be non-empty".into()));
        }
        Ok(())
    }

    /// Width of the TSA predictor input.
    pub fn tsa_query_dim(&self) -> usize {
        if self.tsa_concat_offsets {
            2 * self.channels
        } else {
            self.channels
        }
    }
}

/// One BEV feature grid with its timestamp and the ego pose it was encoded
/// under. Serves as the current queries, the raw history B_{t-1}, the
/// aligned history B'_{t-1}, and the encoder output B_t.
#[derive(Debug, Clone)]
pub struct BevState {
    pub features: FeatureMap,
    pub timestamp: f64,
    pub pose: EgoPose,
}

impl BevState {
    pub fn new(features: FeatureMap, timestamp: f64, pose: EgoPose) -> Self {
        BevState { features, timestamp, pose }
    }
}
