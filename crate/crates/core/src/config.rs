//! Model, optimizer and training configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Seed for parameter initialization, sampling and dropout.
    pub seed: u64,
    pub input: InputConfig,
    pub pyramid: PyramidConfig,
    pub cost_volume: CostVolumeConfig,
    pub embedding: EmbeddingConfig,
    pub pose_head: PoseHeadConfig,
    pub temporal: TemporalConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Points fed to the network per frame (N).
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Point count per level, finest first; strictly decreasing.
    pub levels: Vec<usize>,
    /// Feature width per level.
    pub widths: Vec<usize>,
    /// Neighbors grouped per set-abstraction center.
    pub k_sa: usize,
    /// Starting index for farthest point sampling.
    #[serde(default)]
    pub fps_seed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostVolumeConfig {
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Embedding width, shared by every level and the recurrent states.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseHeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub enabled: bool,
    pub k_relay: usize,
    /// Feed relative anchor offsets into the relay MLPs alongside the state.
    pub relay_geometry: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every_epochs: u32,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Per-level weights, finest level first.
    pub alpha: Vec<f64>,
    pub s_t: f64,
    pub s_q: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Stop after this many optimizer steps (0 = epochs only).
    #[serde(default)]
    pub max_steps: usize,
    #[serde(default)]
    pub epochs: u32,
    /// Start the first pair of window `t` from the pose and temporal state
    /// the current weights produce over the preceding `warm_pairs` pairs
    /// (fewer near the sequence start) instead of cold. 0 = always cold.
    #[serde(default)]
    pub warm_pairs: usize,
    #[serde(default)]
    pub sequences: Vec<SequenceSource>,
}

/// A KITTI-layout sequence: `velodyne/` scans plus a pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSource {
    pub scans: PathBuf,
    pub poses: PathBuf,
    #[serde(default)]
    pub calib: Option<PathBuf>,
}

impl Config {
    /// Full-scale profile: N = 8192, batch 8, lr 1e-3 decaying by 0.7 every 26 epochs.
    pub fn full() -> Self {
        Self {
            seed: 0,
            input: InputConfig { points: 8192 },
            pyramid: PyramidConfig {
                levels: vec![2048, 512, 256, 64],
                widths: vec![32, 64, 128, 256],
                k_sa: 16,
                fps_seed: 0,
            },
            cost_volume: CostVolumeConfig { k: 8 },
            embedding: EmbeddingConfig { width: 256 },
            pose_head: PoseHeadConfig {
                hidden: 256,
                dropout: 0.5,
            },
            temporal: TemporalConfig {
                enabled: true,
                k_relay: 8,
                relay_geometry: true,
            },
            optimizer: OptimizerConfig {
                lr: 1e-3,
                lr_decay: 0.7,
                decay_every_epochs: 26,
                lr_min: 1e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 8,
            },
            loss: LossConfig {
                alpha: vec![1.6, 0.8, 0.4, 0.2],
                s_t: 0.0,
                s_q: -2.5,
            },
            train: TrainConfig::default(),
        }
    }

    /// Desk profile: N = 256, levels 128/64/32/16, embedding width 64. No
    /// dropout, a lower learning rate and warm-started windows so a short
    /// single-sequence run converges.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.input.points = 256;
        c.pyramid.levels = vec![128, 64, 32, 16];
        c.pyramid.widths = vec![32, 32, 64, 64];
        c.embedding.width = 64;
        c.pose_head.hidden = 64;
        c.pose_head.dropout = 0.0;
        c.optimizer.lr = 3e-4;
        c.optimizer.batch_size = 1;
        c.train.max_steps = 2000;
        c.train.warm_pairs = 32;
        c
    }

    /// Tiny profile for finite-difference checks on a 32-point scene.
    pub fn toy() -> Self {
        let mut c = Self::full();
        c.input.points = 32;
        c.pyramid.levels = vec![16, 10, 6, 4];
        c.pyramid.widths = vec![4, 5, 6, 6];
        c.pyramid.k_sa = 4;
        c.cost_volume.k = 3;
        c.embedding.width = 4;
        c.pose_head.hidden = 5;
        c.temporal.k_relay = 3;
        c.optimizer.batch_size = 1;
        c
    }

    pub fn num_levels(&self) -> usize {
        self.pyramid.levels.len()
    }

    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.optimizer.lr,
            decay: self.optimizer.lr_decay,
            every: self.optimizer.decay_every_epochs,
            minimum: self.optimizer.lr_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pyramid;
        let bad = |m: String| Err(Error::Config(m));
        if p.levels.is_empty() {
            return bad("pyramid.levels is empty".into());
        }
        if p.widths.len() != p.levels.len() {
            return bad(format!(
                "pyramid.widths has {} entries for {} levels",
                p.widths.len(),
                p.levels.len()
            ));
        }
        if self.loss.alpha.len() != p.levels.len() {
            return bad(format!(
                "loss.alpha has {} entries for {} levels",
                self.loss.alpha.len(),
                p.levels.len()
            ));
        }
        if p.levels.windows(2).any(|w| w[1] >= w[0]) {
            return bad("pyramid.levels must be strictly decreasing".into());
        }
        if p.levels[0] > self.input.points {
            return bad("finest pyramid level exceeds the input point count".into());
        }
        if p.widths.contains(&0) || self.embedding.width == 0 || self.pose_head.hidden == 0 {
            return bad("widths must be positive".into());
        }
        if p.k_sa == 0 || self.cost_volume.k == 0 || self.temporal.k_relay == 0 {
            return bad("neighbor counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.pose_head.dropout) {
            return bad("pose_head.dropout must lie in [0, 1)".into());
        }
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative sequence paths resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut c.train.sequences {
            for p in [&mut s.scans, &mut s.poses] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(cal) = s.calib.as_mut().filter(|c| c.is_relative()) {
                *cal = base.join(&*cal);
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        Config::full().validate().unwrap();
        Config::desk().validate().unwrap();
        Config::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::desk();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_desk_profile_matches_builtin() {
        let text = include_str!("../../../configs/desk.toml");
        let mut c = Config::from_toml(text).unwrap();
        c.train.sequences.clear();
        assert_eq!(c, Config::desk());
    }

    #[test]
    fn inconsistent_levels_are_rejected() {
        let mut c = Config::desk();
        c.pyramid.levels = vec![128, 128, 32, 16];
        assert!(c.validate().is_err());
        let mut c = Config::desk();
        c.loss.alpha.pop();
        assert!(c.validate().is_err());
        assert!(Config::from_toml("seed = 1").is_err());
    }
}
