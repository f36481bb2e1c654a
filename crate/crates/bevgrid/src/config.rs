//! Run configuration: one JSON document with encoder, training, scene,
//! and path sections. Every field has a default; unknown keys are
//! rejected; the effective encoder section has a stable digest that
//! checkpoints embed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, ScaMode, TsaCombine};
use crate::geometry::{AnchorHeights, BevGridSpec, CameraRig};
use crate::learner::{LossWeights, LrSchedule, TrainConfig};
use crate::scene::{make_ring_rig, SceneSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub resolution: f64,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    pub anchors: Vec<f64>,
    pub sca_mode: String,
    pub tsa_concat_offsets: bool,
    pub tsa_combine: String,
    pub align_history: bool,
    pub ffn_hidden: usize,
    pub n_classes: usize,
    pub feat_stride: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            grid_h: 32,
            grid_w: 32,
            resolution: 1.25,
            channels: 32,
            n_layers: 1,
            n_heads: 2,
            n_keys: 2,
            anchors: vec![0.0, 0.8, 1.6],
            sca_mode: "local".into(),
            tsa_concat_offsets: true,
            tsa_combine: "mean".into(),
            align_history: true,
            ffn_hidden: 64,
            n_classes: 4,
            feat_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub frames_per_sample: usize,
    pub window_seconds: f64,
    pub random_frame_sampling: bool,
    pub align_history: bool,
    pub tsa_concat_offsets: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub lr_schedule: String,
    pub seed: u64,
    pub w_seg: f64,
    pub w_heatmap: f64,
    pub w_offset: f64,
    pub w_velocity: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            frames_per_sample: t.frames_per_sample,
            window_seconds: t.window_seconds,
            random_frame_sampling: t.random_frame_sampling,
            align_history: t.align_history,
            tsa_concat_offsets: t.tsa_concat_offsets,
            lr: t.lr,
            beta1: t.betas.0,
            beta2: t.betas.1,
            eps: t.eps,
            weight_decay: t.weight_decay,
            steps: t.steps,
            lr_schedule: t.lr_schedule.name().into(),
            seed: t.seed,
            w_seg: t.loss_weights.seg,
            w_heatmap: t.loss_weights.heatmap,
            w_offset: t.loss_weights.offset,
            w_velocity: t.loss_weights.velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub n_cars: usize,
    pub n_occluders: usize,
    pub ground: bool,
    pub half_extent: f64,
    pub n_frames: usize,
    pub dt: f64,
    pub seed: u64,
    pub n_cameras: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub camera_height: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneSpec::default();
        SceneSection {
            n_cars: s.n_cars,
            n_occluders: s.n_occluders,
            ground: s.ground,
            half_extent: s.half_extent,
            n_frames: s.n_frames,
            dt: s.dt,
            seed: s.seed,
            n_cameras: 4,
            image_width: 64,
            image_height: 48,
            focal: 30.0,
            camera_height: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub scene: SceneSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The encoder section as typed config, with the training section's
    /// ablation flags applied (those decide parameter shapes).
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let e = &self.encoder;
        let cfg = EncoderConfig {
            grid: BevGridSpec::new(e.grid_h, e.grid_w, e.resolution)?,
            channels: e.channels,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            n_keys: e.n_keys,
            anchors: AnchorHeights::new(e.anchors.clone())?,
            sca_mode: ScaMode::parse(&e.sca_mode)?,
            tsa_concat_offsets: self.train.tsa_concat_offsets,
            tsa_combine: TsaCombine::parse(&e.tsa_combine)?,
            align_history: self.train.align_history,
            ffn_hidden: e.ffn_hidden,
            n_classes: e.n_classes,
            feat_stride: e.feat_stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            frames_per_sample: t.frames_per_sample,
            window_seconds: t.window_seconds,
            random_frame_sampling: t.random_frame_sampling,
            align_history: t.align_history,
            tsa_concat_offsets: t.tsa_concat_offsets,
            lr: t.lr,
            betas: (t.beta1, t.beta2),
            eps: t.eps,
            weight_decay: t.weight_decay,
            steps: t.steps,
            lr_schedule: LrSchedule::parse(&t.lr_schedule)?,
            seed: t.seed,
            loss_weights: LossWeights {
                seg: t.w_seg,
                heatmap: t.w_heatmap,
                offset: t.w_offset,
                velocity: t.w_velocity,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scene spec for the sequence with the given index; sequence index
    /// offsets the base seed so each sequence draws a distinct world.
    pub fn scene_spec(&self, sequence_index: u64) -> SceneSpec {
        let s = &self.scene;
        SceneSpec {
            n_cars: s.n_cars,
            n_occluders: s.n_occluders,
            ground: s.ground,
            half_extent: s.half_extent,
            n_frames: s.n_frames,
            dt: s.dt,
            seed: s.seed.wrapping_add(sequence_index),
        }
    }

    pub fn rig(&self) -> Result<CameraRig> {
        let s = &self.scene;
        make_ring_rig(
            s.n_cameras,
            s.image_width,
            s.image_height,
            s.focal,
            s.camera_height,
        )
    }

    /// SHA-256 over the canonical JSON of the effective encoder section
    /// (training flags applied). Checkpoints embed this so parameters are
    /// never loaded into a differently-shaped model.
    pub fn digest(&self) -> [u8; 32] {
        let mut eff = self.encoder.clone();
        eff.tsa_concat_offsets = self.train.tsa_concat_offsets;
        eff.align_history = self.train.align_history;
        let text = serde_json::to_string(&eff).expect("encoder section serializes");
        let out = Sha256::digest(text.as_bytes());
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.encoder.channels, 32);
        assert_eq!(cfg.train.lr, 2e-3);
        assert_eq!(cfg.scene.n_cameras, 4);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.encoder.channels = 16;
        cfg.train.steps = 77;
        cfg.scene.seed = 42;
        cfg.paths.out_dir = "runs/x".into();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"encoder": {"channelz": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"nonsense": 1}"#).is_err());
    }

    #[test]
    fn typed_configs_validate() {
        let cfg = RunConfig::default();
        let enc = cfg.encoder_config().unwrap();
        assert_eq!(enc.grid.h, 32);
        assert_eq!(enc.tsa_query_dim(), 64);
        let t = cfg.train_config().unwrap();
        assert_eq!(t.betas, (0.9, 0.999));
        let rig = cfg.rig().unwrap();
        assert_eq!(rig.n_views(), 4);
        let spec = cfg.scene_spec(3);
        assert_eq!(spec.seed, 3);
    }

    #[test]
    fn digest_tracks_effective_encoder_shape() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        // scene changes leave the model digest alone
        b.scene.n_cars = 1;
        assert_eq!(a.digest(), b.digest());
        // a training flag that resizes parameters changes it
        b.train.tsa_concat_offsets = false;
        assert_ne!(a.digest(), b.digest());
        let mut c = RunConfig::default();
        c.encoder.channels = 16;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(digest_hex(&a.digest()).len(), 64);
    }

    #[test]
    fn bad_enum_strings_error() {
        let mut cfg = RunConfig::default();
        cfg.encoder.sca_mode = "spectral".into();
        assert!(cfg.encoder_config().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.lr_schedule = "warmup".into();
        assert!(cfg.train_config().is_err());
    }
}
